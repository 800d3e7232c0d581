//! Supervision at desk scale: frozen encoder, synthetic data, exact
//! gradients with a finite-difference oracle, Adam, and the training loop.

pub mod encoder;
pub mod synth;

pub use encoder::stub_encoder;
pub use synth::{synth_dataset, DefectKind, SynthConfig, SynthSample};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::evalio::container::Container;
use crate::evalio::metrics::{evaluate, Metrics};
use crate::numerics::{Scalar, Tensor};
use crate::pipeline::{
    forward, forward_graph, loss_terms_graph, patch_mask, weighted_terms_graph, BatchNorms, LossHyper, LossTerms,
    LossWeights, ModelConfig, ModelParams, ModelVars,
};

/// Encoder output plus supervision for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample<T> {
    pub feat: Tensor<T>,
    /// `[H, W]` patch-level mask (any-overlap).
    pub patch_mask: Tensor<T>,
    pub pixel_mask: Tensor<T>,
    pub is_anomalous: bool,
}

pub fn encode_samples<T: Scalar>(
    samples: &[SynthSample<T>],
    channels: usize,
    patch: usize,
) -> Result<Vec<EncodedSample<T>>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(EncodedSample {
                feat: stub_encoder(&s.image, channels, patch)?,
                patch_mask: patch_mask(&s.pixel_mask, patch)?,
                pixel_mask: s.pixel_mask.clone(),
                is_anomalous: s.is_anomalous,
            })
        })
        .collect()
}

/// Everything the objective needs besides parameters and data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Objective {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub hyper: LossHyper,
}

/// Loss value, its six terms (batch means) and one gradient per named
/// parameter tensor.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub loss: T,
    pub terms: LossTerms<T>,
    pub grads: Vec<Tensor<T>>,
}

fn check_batch<T: Scalar>(batch: &[EncodedSample<T>], obj: &Objective) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    for s in batch {
        let [c, h, w] = *s.feat.shape() else {
            return Err(Error::Shape(format!("feature map {:?}", s.feat.shape())));
        };
        if c != obj.model.channels || s.patch_mask.shape() != [h, w] {
            return Err(Error::Shape(format!(
                "sample {:?} with mask {:?} for a {}-channel model",
                s.feat.shape(),
                s.patch_mask.shape(),
                obj.model.channels
            )));
        }
    }
    Ok(())
}

/// Per-sample data terms; gradients only when `with_grad`.
fn sample_objective<T: Scalar>(
    params: &ModelParams<T>,
    s: &EncodedSample<T>,
    obj: &Objective,
    norms: &BatchNorms,
    with_grad: bool,
) -> (LossTerms<T>, Option<Vec<Tensor<T>>>) {
    let mut g = Graph::new();
    let vars = if with_grad {
        ModelVars::params(&mut g, params)
    } else {
        ModelVars::constants(&mut g, params)
    };
    let x = g.constant(s.feat.clone());
    let out = forward_graph(&mut g, x, &vars, &obj.model);
    let terms = loss_terms_graph(&mut g, out.recon, &s.feat, &s.patch_mask, norms, &obj.hyper);
    let values = LossTerms::from_array(terms.map(|v| g.value(v).data()[0]));
    if !with_grad {
        return (values, None);
    }
    let total = weighted_terms_graph(&mut g, &terms, &obj.weights);
    let grads = g.backward(total);
    let per_param = params
        .named()
        .iter()
        .zip(&vars.all)
        .map(|((_, t), &v)| grads.get_or_zeros(v, t.shape()))
        .collect();
    (values, Some(per_param))
}

/// Full objective over a batch, value only.
pub fn loss_value<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[EncodedSample<T>],
    obj: &Objective,
) -> Result<(T, LossTerms<T>)> {
    check_batch(batch, obj)?;
    let norms = BatchNorms::from_masks(batch.iter().map(|s| &s.patch_mask), &obj.hyper);
    let parts: Vec<LossTerms<T>> = batch
        .par_iter()
        .map(|s| sample_objective(params, s, obj, &norms, false).0)
        .collect();
    let terms = parts.iter().fold(LossTerms::default(), |a, b| a.add(b));
    let loss = crate::pipeline::total_loss(&terms, &obj.weights, params.norm_sq());
    Ok((loss, terms))
}

/// Exact gradient of the objective by reverse accumulation. Samples run in
/// parallel; their contributions are reduced in batch order.
pub fn grad<T: Scalar>(params: &ModelParams<T>, batch: &[EncodedSample<T>], obj: &Objective) -> Result<Evaluation<T>> {
    check_batch(batch, obj)?;
    obj.weights.validate()?;
    let norms = BatchNorms::from_masks(batch.iter().map(|s| &s.patch_mask), &obj.hyper);
    let parts: Vec<(LossTerms<T>, Option<Vec<Tensor<T>>>)> = batch
        .par_iter()
        .map(|s| sample_objective(params, s, obj, &norms, true))
        .collect();
    let named = params.named();
    let two_reg = T::lit(2.0 * obj.weights.reg);
    let mut grads: Vec<Tensor<T>> = named.iter().map(|(_, t)| t.scale(two_reg)).collect();
    let mut terms = LossTerms::default();
    for (t, g) in parts {
        terms = terms.add(&t);
        for (acc, gi) in grads.iter_mut().zip(g.expect("gradients requested")) {
            acc.add_assign(&gi);
        }
    }
    for ((name, _), g) in named.iter().zip(&grads) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let loss = crate::pipeline::total_loss(&terms, &obj.weights, params.norm_sq());
    Ok(Evaluation { loss, terms, grads })
}

/// `(f(theta + h e_i) - f(theta - h e_i)) / 2h`.
pub fn central_difference<T: Scalar>(f: impl Fn(&[T]) -> T, theta: &[T], index: usize, h: T) -> T {
    let mut x = theta.to_vec();
    x[index] = theta[index] + h;
    let plus = f(&x);
    x[index] = theta[index] - h;
    let minus = f(&x);
    (plus - minus) / (h + h)
}

/// Central difference of the batch objective along flat parameter `index`.
pub fn finite_diff<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[EncodedSample<T>],
    obj: &Objective,
    index: usize,
    h: T,
) -> Result<T> {
    if !(h > T::zero()) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let (k, off) = params
        .locate(index)
        .ok_or_else(|| Error::Shape(format!("parameter index {index} out of range")))?;
    let eval = |delta: T| -> Result<T> {
        let mut p = params.clone();
        let data = p.named_mut().swap_remove(k).1.data_mut();
        data[off] = data[off] + delta;
        Ok(loss_value(&p, batch, obj)?.0)
    };
    Ok((eval(h)? - eval(-h)?) / (h + h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<T>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            cfg,
        }
    }

    /// One bias-corrected update.
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} tensors",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (k, (_, p)) in params.named_mut().into_iter().enumerate() {
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x = *x - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as `adam.m.<name>` / `adam.v.<name>` plus `adam.step`.
    pub fn write_into(&self, params: &ModelParams<T>, c: &mut Container) -> Result<()> {
        for (k, (name, _)) in params.named().iter().enumerate() {
            c.push_tensor(&format!("adam.m.{name}"), &self.m[k])?;
            c.push_tensor(&format!("adam.v.{name}"), &self.v[k])?;
        }
        c.push_tensor("adam.step", &Tensor::<f64>::scalar(self.step as f64))?;
        Ok(())
    }

    pub fn read_from(params: &ModelParams<T>, c: &Container, cfg: AdamConfig) -> Result<Self> {
        let mut s = Self::new(params, cfg);
        for (k, (name, _)) in params.named().iter().enumerate() {
            s.m[k] = c.require(&format!("adam.m.{name}"))?.to_tensor();
            s.v[k] = c.require(&format!("adam.v.{name}"))?.to_tensor();
        }
        s.step = c.require("adam.step")?.to_tensor::<f64>().data()[0] as u64;
        Ok(s)
    }
}

/// Synthetic benchmark layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train_anomaly_fraction: f64,
    pub test_anomaly_fraction: f64,
    pub patch: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_train: 200,
            n_val: 40,
            n_test: 100,
            train_anomaly_fraction: 0.3,
            test_anomaly_fraction: 0.5,
            patch: 8,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Datasets<T> {
    pub train: Vec<EncodedSample<T>>,
    pub val: Vec<EncodedSample<T>>,
    pub test: Vec<EncodedSample<T>>,
}

/// Train, validation and test splits from seeds `seed`, `seed + 1`,
/// `seed + 2`; class textures are shared across splits.
pub fn build_datasets<T: Scalar>(seed: u64, data: &DataConfig, channels: usize) -> Result<Datasets<T>> {
    let per_class = |n: usize| {
        if n % data.n_classes != 0 {
            Err(Error::Config(format!(
                "{n} samples do not divide into {} classes",
                data.n_classes
            )))
        } else {
            Ok(n / data.n_classes)
        }
    };
    let split = |s: u64, n: usize, frac: f64| -> Result<Vec<EncodedSample<T>>> {
        let raw = synth_dataset::<T>(s, data.n_classes, per_class(n)?, frac, &data.synth)?;
        encode_samples(&raw, channels, data.patch)
    };
    Ok(Datasets {
        train: split(seed, data.n_train, data.train_anomaly_fraction)?,
        val: split(seed.wrapping_add(1), data.n_val, data.test_anomaly_fraction)?,
        test: split(seed.wrapping_add(2), data.n_test, data.test_anomaly_fraction)?,
    })
}

/// Image- and pixel-level metrics of a model over a sample set.
pub fn evaluate_model<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    samples: &[EncodedSample<T>],
) -> Result<Metrics> {
    let maps = samples
        .par_iter()
        .map(|s| {
            let size = (s.pixel_mask.rows(), s.pixel_mask.cols());
            forward(&s.feat, params, cfg, size).map(|f| f.map)
        })
        .collect::<Result<Vec<_>>>()?;
    let image_scores: Vec<T> = maps.iter().map(|m| m.image_score).collect();
    let image_labels: Vec<bool> = samples.iter().map(|s| s.is_anomalous).collect();
    let pixel_scores: Vec<T> = maps
        .iter()
        .flat_map(|m| m.pixel_scores.data().iter().copied())
        .collect();
    let pixel_labels: Vec<bool> = samples
        .iter()
        .flat_map(|s| s.pixel_mask.data().iter().map(|&v| v != T::zero()))
        .collect();
    evaluate(&image_scores, &image_labels, &pixel_scores, &pixel_labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub objective: Objective,
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Validation cadence in steps; 0 disables intermediate validation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig::default(),
            objective: Objective::default(),
            adam: AdamConfig::default(),
            steps: 500,
            batch_size: 8,
            eval_every: 100,
        }
    }
}

/// One metric-log row. `loss` and `terms` are measured on the step's batch
/// before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub terms: [f64; 6],
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub optim: OptimState<T>,
    pub history: Vec<HistoryRow>,
}

/// Trains from a seeded initialization; `log` sees every history row as it
/// is produced.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    data: &Datasets<T>,
    mut log: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome<T>> {
    cfg.objective.model.validate()?;
    cfg.objective.weights.validate()?;
    if cfg.batch_size == 0 || data.train.is_empty() {
        return Err(Error::Config("training needs a non-empty batch and dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(&cfg.objective.model, &mut rng)?;
    let mut optim = OptimState::new(&params, cfg.adam.clone());
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut order: Vec<usize> = Vec::new();
    let validate = |p: &ModelParams<T>| -> Result<Option<Metrics>> {
        if data.val.is_empty() {
            Ok(None)
        } else {
            evaluate_model(p, &cfg.objective.model, &data.val).map(Some)
        }
    };
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..data.train.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(data.train[order.pop().unwrap()].clone());
        }
        let eval = grad(&params, &batch, &cfg.objective)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {step}: terms {:?}",
                eval.terms.to_array().map(|t| t.to_f64_lossy())
            )));
        }
        let val = if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            validate(&params)?
        } else {
            None
        };
        let row = HistoryRow {
            step,
            loss: eval.loss.to_f64_lossy(),
            terms: eval.terms.to_array().map(|t| t.to_f64_lossy()),
            val,
        };
        log(&row);
        history.push(row);
        optim.update(&mut params, &eval.grads)?;
        params.check_finite()?;
    }
    if cfg.steps > 0 {
        let (loss, terms) = loss_value(
            &params,
            &data.train[..cfg.batch_size.min(data.train.len())],
            &cfg.objective,
        )?;
        let row = HistoryRow {
            step: cfg.steps,
            loss: loss.to_f64_lossy(),
            terms: terms.to_array().map(|t| t.to_f64_lossy()),
            val: validate(&params)?,
        };
        log(&row);
        history.push(row);
    }
    Ok(TrainOutcome { params, optim, history })
}
