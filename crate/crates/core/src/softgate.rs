//! Adaptive low/high frequency separation.
//!
//! Each candidate radius `r_m` gets a profile score `J_m` from the log-energy
//! of the annulus `(r_{m-1}, r_m]` (with `r_0 = 0`). The cutoff is the
//! expectation of the radii under `softmax(kappa * J)`, and a logistic radial
//! mask of width `tau` around that cutoff routes every bin into the two
//! streams. The masks sum to one at every bin, so splitting is lossless.
//!
//! Masks are built in the unshifted bin layout produced by [`fft2`]; the
//! [`radial_grid`] helper returns the centred (fft-shifted) view.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::numerics::{fft2, softmax_slice, ComplexTensor, Scalar, Tensor};

/// Floor added to annulus energies before the logarithm.
pub const ENERGY_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    Soft,
    /// Fixed threshold on the normalized radius.
    Hard(f64),
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateMode::Soft => write!(f, "soft"),
            GateMode::Hard(t) => write!(f, "hard:{t}"),
        }
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "soft" => Ok(GateMode::Soft),
            other => {
                let t = other
                    .strip_prefix("hard:")
                    .ok_or_else(|| Error::Config(format!("gate mode {other:?}: expected soft or hard:<t>")))?;
                let t: f64 = t
                    .parse()
                    .map_err(|_| Error::Config(format!("gate threshold {t:?} is not a number")))?;
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Config(format!("gate threshold {t} outside [0, 1]")));
                }
                Ok(GateMode::Hard(t))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftGateConfig {
    pub candidates: Vec<f64>,
    /// Inverse temperature of the candidate distribution.
    pub kappa: f64,
    /// Width of the logistic mask transition.
    pub tau: f64,
    pub mode: GateMode,
}

impl Default for SoftGateConfig {
    fn default() -> Self {
        Self {
            candidates: uniform_candidates(8, 0.1, 0.9),
            kappa: 8.0,
            tau: 0.05,
            mode: GateMode::Soft,
        }
    }
}

/// `m` evenly spaced radii from `lo` to `hi` inclusive.
pub fn uniform_candidates(m: usize, lo: f64, hi: f64) -> Vec<f64> {
    if m == 1 {
        return vec![lo];
    }
    (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect()
}

impl SoftGateConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.candidates;
        if r.len() < 2 {
            return Err(Error::Config("soft gate needs at least two candidate radii".into()));
        }
        if r[0] < 0.0 || r[r.len() - 1] > 1.0 || r.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "candidate radii must be strictly increasing within [0, 1]".into(),
            ));
        }
        if !(self.kappa > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("kappa and tau must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable affine map on the annulus log-energies,
/// `J_m = scale * ln(E_m + floor) + offset_m`.
///
/// The offset is per candidate: a single shared offset would cancel inside
/// the softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    pub scale: Tensor<T>,
    pub offset: Tensor<T>,
}

impl<T: Scalar> GateParams<T> {
    pub fn new(m: usize) -> Self {
        Self {
            scale: Tensor::zeros(&[1]),
            offset: Tensor::zeros(&[m]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftGateState<T> {
    pub profile: Vec<T>,
    pub weights: Vec<T>,
    pub cutoff: T,
    /// Mask over the unshifted `[H, W]` bin layout.
    pub mask_low: Tensor<T>,
    pub mask_high: Tensor<T>,
}

fn shifted_radius(y: usize, x: usize, h: usize, w: usize) -> f64 {
    let dy = y as f64 - (h / 2) as f64;
    let dx = x as f64 - (w / 2) as f64;
    let max_r = (((h / 2) * (h / 2) + (w / 2) * (w / 2)) as f64).sqrt();
    (dy * dy + dx * dx).sqrt() / max_r
}

/// Centred radial distance of every bin, normalized so the corner is 1.
pub fn radial_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h, w], |i| T::lit(shifted_radius(i / w, i % w, h, w)))
}

/// [`radial_grid`] rearranged into the unshifted layout of [`fft2`] output.
pub fn radial_grid_unshifted<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        T::lit(shifted_radius((y + h / 2) % h, (x + w / 2) % w, h, w))
    })
}

/// Annulus index of each bin (unshifted layout), `None` outside `r_M`.
pub fn annulus_index(grid: &Tensor<f64>, candidates: &[f64]) -> Vec<Option<usize>> {
    grid.data()
        .iter()
        .map(|&r| candidates.iter().position(|&c| r <= c))
        .collect()
}

/// Mean per-bin energy of each annulus, averaged over channels.
pub fn annulus_energy<T: Scalar>(spectrum: &ComplexTensor<T>, candidates: &[f64]) -> Vec<T> {
    let (c, h, w) = (spectrum.shape()[0], spectrum.shape()[1], spectrum.shape()[2]);
    let grid = radial_grid_unshifted::<f64>(h, w);
    let idx = annulus_index(&grid, candidates);
    let m = candidates.len();
    let mut sum = vec![T::zero(); m];
    let mut count = vec![0usize; m];
    for (bin, slot) in idx.iter().enumerate() {
        let Some(k) = *slot else { continue };
        count[k] += 1;
        for ch in 0..c {
            let i = ch * h * w + bin;
            let (re, im) = (spectrum.re()[i], spectrum.im()[i]);
            sum[k] = sum[k] + re * re + im * im;
        }
    }
    let cf = T::lit(c as f64);
    sum.into_iter()
        .zip(count)
        .map(|(s, n)| if n == 0 { T::zero() } else { s / (cf * T::lit(n as f64)) })
        .collect()
}

/// Profile scores `J_m` for one spectrum.
pub fn score_profile<T: Scalar>(spectrum: &ComplexTensor<T>, cfg: &SoftGateConfig, params: &GateParams<T>) -> Vec<T> {
    let a = params.scale.data()[0];
    annulus_energy(spectrum, &cfg.candidates)
        .into_iter()
        .zip(params.offset.data())
        .map(|(e, &b)| a * (e + T::lit(ENERGY_FLOOR)).ln() + b)
        .collect()
}

/// Candidate weights `softmax(kappa * J)` and the expected cutoff.
pub fn cutoff_expectation<T: Scalar>(profile: &[T], cfg: &SoftGateConfig) -> (Vec<T>, T) {
    let kappa = T::lit(cfg.kappa);
    let logits: Vec<T> = profile.iter().map(|&j| kappa * j).collect();
    let p = softmax_slice(&logits);
    let c = p.iter().zip(&cfg.candidates).map(|(&pm, &r)| pm * T::lit(r)).sum();
    (p, c)
}

/// Complementary masks over `grid`. Hard mode ignores `cutoff` and thresholds
/// at `t` (bins with `r > t` go high).
pub fn build_masks<T: Scalar>(cutoff: T, grid: &Tensor<T>, cfg: &SoftGateConfig) -> (Tensor<T>, Tensor<T>) {
    let high = match cfg.mode {
        GateMode::Soft => {
            let tau = T::lit(cfg.tau);
            grid.map(|r| ((r - cutoff) / tau).sigmoid())
        }
        GateMode::Hard(t) => grid.map(|r| if r > T::lit(t) { T::one() } else { T::zero() }),
    };
    let low = high.map(|v| T::one() - v);
    (low, high)
}

fn check_split_input<T: Scalar>(feat: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *feat.shape() {
        [c, h, w] if c > 0 && h >= 2 && w >= 2 => Ok((c, h, w)),
        _ => Err(Error::Shape(format!(
            "soft gate needs a [C, H, W] map with H, W >= 2, got {:?}",
            feat.shape()
        ))),
    }
}

/// Splits a feature map into `(high, low, state)`; `high + low == feat`.
pub fn split<T: Scalar>(
    feat: &Tensor<T>,
    cfg: &SoftGateConfig,
    params: &GateParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, SoftGateState<T>)> {
    cfg.validate()?;
    check_split_input(feat)?;
    let mut g = Graph::new();
    let x = g.constant(feat.clone());
    let vars = GateVars {
        scale: g.constant(params.scale.clone()),
        offset: g.constant(params.offset.clone()),
    };
    let out = split_graph(&mut g, x, cfg, &vars);
    let state = out.state(&g, cfg);
    Ok((g.value(out.high).clone(), g.value(out.low).clone(), state))
}

/// Graph handles for [`GateParams`].
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub scale: Var,
    pub offset: Var,
}

/// Graph handles produced by [`split_graph`].
#[derive(Clone, Copy, Debug)]
pub struct SplitVars {
    pub high: Var,
    pub low: Var,
    pub profile: Var,
    pub weights: Var,
    pub cutoff: Var,
    pub mask_low: Var,
    pub mask_high: Var,
}

impl SplitVars {
    pub fn state<T: Scalar>(&self, g: &Graph<T>, cfg: &SoftGateConfig) -> SoftGateState<T> {
        let cutoff = match cfg.mode {
            GateMode::Soft => g.value(self.cutoff).data()[0],
            GateMode::Hard(t) => T::lit(t),
        };
        SoftGateState {
            profile: g.value(self.profile).data().to_vec(),
            weights: g.value(self.weights).data().to_vec(),
            cutoff,
            mask_low: g.value(self.mask_low).clone(),
            mask_high: g.value(self.mask_high).clone(),
        }
    }
}

/// Differentiable split. The feature map enters the profile only through its
/// annulus energies; gradients reach the gate parameters through the cutoff
/// and the masks, and reach `feat` through the linear filtering path.
pub fn split_graph<T: Scalar>(g: &mut Graph<T>, feat: Var, cfg: &SoftGateConfig, params: &GateVars) -> SplitVars {
    let shape = g.value(feat).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let spectrum = g.fft2(feat);
    let energies = {
        let v = g.value(spectrum);
        let n = v.len() / 2;
        let z = ComplexTensor::new(
            Tensor::new(shape.clone(), v.data()[..n].to_vec()).unwrap(),
            Tensor::new(shape.clone(), v.data()[n..].to_vec()).unwrap(),
        )
        .unwrap();
        annulus_energy(&z, &cfg.candidates)
    };
    let log_e = g.constant(Tensor::from_vec(
        energies.into_iter().map(|e| (e + T::lit(ENERGY_FLOOR)).ln()).collect(),
    ));
    let scaled = g.mul(log_e, params.scale);
    let profile = g.add(scaled, params.offset);
    let logits = g.scale(profile, T::lit(cfg.kappa));
    let weights = g.softmax_rows(logits);
    let radii = g.constant(Tensor::from_vec(cfg.candidates.iter().map(|&r| T::lit(r)).collect()));
    let weighted = g.mul(weights, radii);
    let cutoff = g.sum(weighted);

    let grid = radial_grid_unshifted::<T>(h, w);
    let (mask_low, mask_high) = match cfg.mode {
        GateMode::Soft => {
            let gv = g.constant(grid);
            let d = g.sub(gv, cutoff);
            let z = g.scale(d, T::one() / T::lit(cfg.tau));
            let high = g.sigmoid(z);
            let low = g.one_minus(high);
            (low, high)
        }
        GateMode::Hard(_) => {
            let (low, high) = build_masks(T::zero(), &grid, cfg);
            (g.constant(low), g.constant(high))
        }
    };
    let zl = g.mul(spectrum, mask_low);
    let zh = g.mul(spectrum, mask_high);
    let low = g.ifft2_real(zl);
    let high = g.ifft2_real(zh);
    SplitVars {
        high,
        low,
        profile,
        weights,
        cutoff,
        mask_low,
        mask_high,
    }
}

/// Convenience: fft2 then [`score_profile`].
pub fn profile_of<T: Scalar>(feat: &Tensor<T>, cfg: &SoftGateConfig, params: &GateParams<T>) -> Result<Vec<T>> {
    Ok(score_profile(&fft2(feat)?, cfg, params))
}
