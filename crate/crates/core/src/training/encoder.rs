//! Frozen filter-bank featurizer.
//!
//! Every patch is summarized by a fixed bank: the patch mean, rectified
//! oriented difference filters, the local standard deviation and the
//! energies of quadrature grating pairs. Channel 0 is the patch mean; every
//! other channel is nonnegative and zero on a constant patch.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug)]
enum Filter {
    Mean,
    /// `|w . x|`
    Rectified(Vec<f64>),
    StdDev,
    /// `sqrt((w0 . x)^2 + (w1 . x)^2)`
    Energy(Vec<f64>, Vec<f64>),
}

/// Zero-mean weights with unit mass on each sign, so the response is the
/// difference between two weighted means.
fn balanced(mut w: Vec<f64>) -> Vec<f64> {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter_mut().for_each(|v| *v -= mean);
    let pos: f64 = w.iter().filter(|v| **v > 0.0).sum();
    if pos > 0.0 {
        w.iter_mut().for_each(|v| *v /= pos);
    }
    w
}

fn bank(channels: usize, p: usize) -> Vec<Filter> {
    let centre = (p as f64 - 1.0) / 2.0;
    let at = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        (0..p * p)
            .map(|i| f((i % p) as f64 - centre, (i / p) as f64 - centre))
            .collect()
    };
    let half = p as f64 / 4.0;
    let mut out = vec![
        Filter::Mean,
        Filter::Rectified(balanced(at(&|x, _| x.signum()))),
        Filter::Rectified(balanced(at(&|_, y| y.signum()))),
        Filter::Rectified(balanced(at(&|x, y| (x * y).signum()))),
        Filter::Rectified(balanced(at(&|x, y| {
            if x.abs() < half && y.abs() < half {
                1.0
            } else {
                -1.0
            }
        }))),
        Filter::StdDev,
    ];
    let mut k = 0usize;
    while out.len() < channels {
        let theta = (k % 4) as f64 * PI / 4.0;
        let freq = 1.0 + (k / 4) as f64;
        let grating = |phase: f64| {
            balanced(at(&|x, y| {
                (2.0 * PI * freq * (x * theta.cos() + y * theta.sin()) / p as f64 + phase).cos()
            }))
        };
        out.push(Filter::Energy(grating(0.0), grating(PI / 2.0)));
        k += 1;
    }
    out.truncate(channels);
    out
}

/// `[1, H, W]` image to a `[C, H / patch, W / patch]` feature map.
pub fn stub_encoder<T: Scalar>(image: &Tensor<T>, channels: usize, patch: usize) -> Result<Tensor<T>> {
    let [1, h, w] = *image.shape() else {
        return Err(Error::Shape(format!(
            "expected a [1, H, W] image, got {:?}",
            image.shape()
        )));
    };
    if patch == 0 || h == 0 || w == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} image not divisible by patch {patch}")));
    }
    if channels == 0 {
        return Err(Error::Config("encoder needs at least one channel".into()));
    }
    let filters = bank(channels, patch);
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Tensor::zeros(&[channels, gh, gw]);
    let mut px = vec![0.0; patch * patch];
    for py in 0..gh {
        for pxi in 0..gw {
            for (i, v) in px.iter_mut().enumerate() {
                let (y, x) = (py * patch + i / patch, pxi * patch + i % patch);
                *v = image.data()[y * w + x].to_f64_lossy();
            }
            let mean = px.iter().sum::<f64>() / px.len() as f64;
            for (c, f) in filters.iter().enumerate() {
                let dot = |wts: &[f64]| wts.iter().zip(&px).map(|(a, b)| a * b).sum::<f64>();
                let v = match f {
                    Filter::Mean => mean,
                    Filter::Rectified(wts) => dot(wts).abs(),
                    Filter::StdDev => {
                        (px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / px.len() as f64).sqrt()
                    }
                    Filter::Energy(a, b) => dot(a).hypot(dot(b)),
                };
                out.data_mut()[(c * gh + py) * gw + pxi] = T::lit(v);
            }
        }
    }
    Ok(out)
}
