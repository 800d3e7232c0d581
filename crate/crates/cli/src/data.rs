//! Dataset and feature-map containers.
//!
//! A dataset container holds, per sample `i` (zero-padded to five digits):
//! `<i>.image` `[1, S, S]` f64, `<i>.mask` `[S, S]` u8, and `<i>.label`
//! `[2]` f64 holding `(class_id, is_anomalous)`.

use harmoniad::evalio::{Container, TensorData, TensorRecord};
use harmoniad::numerics::Tensor;
use harmoniad::training::SynthSample;

use crate::error::{CliError, CliResult};

pub fn samples_to_container(samples: &[SynthSample<f64>]) -> CliResult<Container> {
    let mut c = Container::new();
    for (i, s) in samples.iter().enumerate() {
        c.push_tensor(&format!("{i:05}.image"), &s.image)?;
        let mask: Vec<u8> = s.pixel_mask.data().iter().map(|&v| u8::from(v != 0.0)).collect();
        c.push(TensorRecord::new(
            format!("{i:05}.mask"),
            s.pixel_mask.shape().to_vec(),
            TensorData::U8(mask),
        )?)?;
        let label = Tensor::from_vec(vec![s.class_id as f64, f64::from(u8::from(s.is_anomalous))]);
        c.push_tensor(&format!("{i:05}.label"), &label)?;
    }
    Ok(c)
}

pub fn samples_from_container(c: &Container) -> CliResult<Vec<SynthSample<f64>>> {
    let mut out = Vec::new();
    loop {
        let i = out.len();
        let Some(image) = c.get(&format!("{i:05}.image")) else {
            break;
        };
        let mask = c.require(&format!("{i:05}.mask"))?.to_tensor::<f64>();
        let label = c.require(&format!("{i:05}.label"))?.to_tensor::<f64>();
        if label.len() != 2 {
            return Err(CliError::Config(format!("sample {i}: label must hold two values")));
        }
        out.push(SynthSample {
            image: image.to_tensor(),
            pixel_mask: mask,
            class_id: label.data()[0] as usize,
            is_anomalous: label.data()[1] != 0.0,
        });
    }
    if out.len() * 3 != c.len() {
        return Err(CliError::Config(format!(
            "dataset container has {} records, expected 3 per sample for {} samples",
            c.len(),
            out.len()
        )));
    }
    Ok(out)
}

/// Every record of a feature container as a `[C, H, W]` map, in file order.
pub fn feature_maps(c: &Container) -> CliResult<Vec<(String, Tensor<f64>)>> {
    c.records()
        .iter()
        .map(|r| {
            if r.shape.len() != 3 {
                return Err(CliError::Config(format!(
                    "record {:?} has shape {:?}, expected [C, H, W]",
                    r.name, r.shape
                )));
            }
            Ok((r.name.clone(), r.to_tensor()))
        })
        .collect()
}

/// Record name made safe for use as a file stem.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
