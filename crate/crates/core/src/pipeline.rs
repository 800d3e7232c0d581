//! End-to-end assembly: split, branch reconstruction, head fusion, scoring,
//! pixel-map upsampling and the six-term training objective.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::evalio::container::Container;
use crate::fsam::{self, FsamOptions, FsamParams, FsamVars, OffsetTable};
use crate::gscm::{self, GridTables, GscmOptions, GscmParams, GscmVars};
use crate::numerics::{cosine_similarity, Scalar, Tensor};
use crate::softgate::{split_graph, GateParams, GateVars, SoftGateConfig, SoftGateState, SplitVars};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    /// FSAM attention width.
    pub head_dim: usize,
    /// Hidden width of the FSAM mask generator.
    pub mask_hidden: usize,
    /// GSCM affinity rank, `1 <= rank < channels`.
    pub rank: usize,
    /// Largest patch grid the GSCM bias table covers.
    pub max_h: usize,
    pub max_w: usize,
    pub gate: SoftGateConfig,
    pub fsam: FsamOptions,
    pub gscm: GscmOptions,
    pub use_fsam: bool,
    pub use_gscm: bool,
    /// Pin both fusion heads to the identity.
    pub identity_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            head_dim: 8,
            mask_hidden: 4,
            rank: 4,
            max_h: 8,
            max_w: 8,
            gate: SoftGateConfig::default(),
            fsam: FsamOptions::default(),
            gscm: GscmOptions::default(),
            use_fsam: true,
            use_gscm: true,
            identity_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        if self.channels < 2 {
            return Err(Error::Config("channels must be at least 2".into()));
        }
        if self.head_dim == 0 || self.mask_hidden == 0 {
            return Err(Error::Config("head_dim and mask_hidden must be positive".into()));
        }
        if self.rank == 0 || self.rank >= self.channels {
            return Err(Error::Config(format!(
                "rank {} must satisfy 1 <= r < C = {}",
                self.rank, self.channels
            )));
        }
        if self.max_h == 0 || self.max_w == 0 {
            return Err(Error::Config("max grid must be non-empty".into()));
        }
        if !(self.fsam.eps > 0.0) {
            return Err(Error::Config("fsam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub gate: GateParams<T>,
    pub fsam: FsamParams<T>,
    pub gscm: GscmParams<T>,
    /// Per-channel scale of the high-frequency head.
    pub head_high: Tensor<T>,
    pub head_low: Tensor<T>,
}

const GATE_COUNT: usize = 2;
const FSAM_COUNT: usize = 9;
const GSCM_COUNT: usize = 12;

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            gate: GateParams::new(cfg.gate.candidates.len()),
            fsam: FsamParams::init(c, cfg.head_dim, cfg.mask_hidden, rng),
            gscm: GscmParams::init(c, cfg.rank, cfg.max_h, cfg.max_w, rng)?,
            head_high: Tensor::ones(&[c]),
            head_low: Tensor::ones(&[c]),
        })
    }

    /// Named tensors in a stable order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("gate.scale", &self.gate.scale), ("gate.offset", &self.gate.offset)];
        v.extend(self.fsam.named());
        v.extend(self.gscm.named());
        v.push(("head.high", &self.head_high));
        v.push(("head.low", &self.head_low));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![
            ("gate.scale", &mut self.gate.scale),
            ("gate.offset", &mut self.gate.offset),
        ];
        v.extend(self.fsam.named_mut());
        v.extend(self.gscm.named_mut());
        v.push(("head.high", &mut self.head_high));
        v.push(("head.low", &mut self.head_low));
        v
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn norm_sq(&self) -> T {
        self.named()
            .iter()
            .map(|(_, t)| t.sum_sq())
            .fold(T::zero(), |a, b| a + b)
    }

    pub fn flat(&self) -> Vec<T> {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.count()
            )));
        }
        let mut at = 0;
        for (_, t) in self.named_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Locates flat index `i` as `(tensor index, offset)`.
    pub fn locate(&self, i: usize) -> Option<(usize, usize)> {
        let mut at = 0;
        for (k, (_, t)) in self.named().iter().enumerate() {
            if i < at + t.len() {
                return Some((k, i - at));
            }
            at += t.len();
        }
        None
    }

    /// One f64 record per named tensor.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for (name, t) in self.named() {
            c.push_tensor(name, t)?;
        }
        Ok(c)
    }

    /// Loads every named tensor; shapes must match `self`.
    pub fn load_container(&mut self, c: &Container) -> Result<()> {
        for (name, t) in self.named_mut() {
            let loaded: Tensor<T> = c.require(name)?.to_tensor();
            if loaded.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint {name} has shape {:?}, model expects {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named() {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Graph handles for [`ModelParams`], in `named()` order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Registers parameters as differentiable leaves.
    pub fn params<T: Scalar>(g: &mut Graph<T>, p: &ModelParams<T>) -> Self {
        Self {
            all: p.named().into_iter().map(|(_, t)| g.param(t.clone())).collect(),
        }
    }

    pub fn constants<T: Scalar>(g: &mut Graph<T>, p: &ModelParams<T>) -> Self {
        Self {
            all: p.named().into_iter().map(|(_, t)| g.constant(t.clone())).collect(),
        }
    }

    pub fn gate(&self) -> GateVars {
        GateVars {
            scale: self.all[0],
            offset: self.all[1],
        }
    }

    pub fn fsam(&self) -> FsamVars {
        FsamVars::from_slice(&self.all[GATE_COUNT..GATE_COUNT + FSAM_COUNT])
    }

    pub fn gscm(&self) -> GscmVars {
        let at = GATE_COUNT + FSAM_COUNT;
        GscmVars::from_slice(&self.all[at..at + GSCM_COUNT])
    }

    pub fn heads(&self) -> (Var, Var) {
        let at = GATE_COUNT + FSAM_COUNT + GSCM_COUNT;
        (self.all[at], self.all[at + 1])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub split: SplitVars,
    pub high_hat: Var,
    pub low_hat: Var,
    pub recon: Var,
}

fn head_graph<T: Scalar>(g: &mut Graph<T>, x: Var, head: Var, identity: bool) -> Var {
    if identity {
        return x;
    }
    let c = g.value(head).len();
    let h = g.reshape(head, &[c, 1, 1]);
    g.mul(x, h)
}

/// Split, reconstruct both streams and fuse.
pub fn forward_graph<T: Scalar>(g: &mut Graph<T>, feat: Var, vars: &ModelVars, cfg: &ModelConfig) -> ForwardVars {
    let shape = g.value(feat).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let split = split_graph(g, feat, &cfg.gate, &vars.gate());
    let high_hat = if cfg.use_fsam {
        fsam::fsam_graph(g, split.high, &vars.fsam(), &cfg.fsam, &OffsetTable::new(h, w))
    } else {
        split.high
    };
    let low_hat = if cfg.use_gscm {
        let tables = GridTables::new(h, w, shape[0], cfg.max_h, cfg.max_w);
        gscm::gscm_graph(g, split.low, &vars.gscm(), &cfg.gscm, &tables)
    } else {
        split.low
    };
    let (ph, pl) = vars.heads();
    let a = head_graph(g, high_hat, ph, cfg.identity_heads);
    let b = head_graph(g, low_hat, pl, cfg.identity_heads);
    let recon = g.add(a, b);
    ForwardVars {
        split,
        high_hat,
        low_hat,
        recon,
    }
}

/// `P_h(high) + P_l(low)` with per-channel scalar heads.
pub fn fuse_reconstruction<T: Scalar>(
    high_hat: &Tensor<T>,
    low_hat: &Tensor<T>,
    head_high: &Tensor<T>,
    head_low: &Tensor<T>,
) -> Result<Tensor<T>> {
    high_hat.check_same_shape(low_hat)?;
    let c = high_hat.shape().first().copied().unwrap_or(0);
    if high_hat.ndim() != 3 || head_high.shape() != [c] || head_low.shape() != [c] {
        return Err(Error::Shape(format!(
            "fusion of {:?} maps with heads {:?}, {:?}",
            high_hat.shape(),
            head_high.shape(),
            head_low.shape()
        )));
    }
    let plane = high_hat.len() / c;
    Ok(Tensor::from_fn(high_hat.shape(), |i| {
        let ch = i / plane;
        head_high.data()[ch] * high_hat.data()[i] + head_low.data()[ch] * low_hat.data()[i]
    }))
}

fn check_map<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        [_, _, _] => Err(Error::EmptyDimension(x.shape().to_vec())),
        _ => Err(Error::Shape(format!("expected [C, H, W], got {:?}", x.shape()))),
    }
}

/// `1 - cos(recon[:, h, w], original[:, h, w])` per patch, in `[0, 2]`.
pub fn patch_anomaly_score<T: Scalar>(recon: &Tensor<T>, original: &Tensor<T>) -> Result<Tensor<T>> {
    recon.check_same_shape(original)?;
    let (c, h, w) = check_map(recon)?;
    let t = h * w;
    let mut a = vec![T::zero(); c];
    let mut b = vec![T::zero(); c];
    Ok(Tensor::from_fn(&[h, w], |i| {
        for k in 0..c {
            a[k] = recon.data()[k * t + i];
            b[k] = original.data()[k * t + i];
        }
        T::one() - cosine_similarity(&a, &b)
    }))
}

/// Sampling convention of [`pixel_map`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Upsample {
    /// Pixel centres at half-integer positions (align-corners off).
    #[default]
    HalfPixel,
    /// Corner samples of input and output coincide.
    AlignCorners,
}

fn source_coord(dst: usize, n_in: usize, n_out: usize, mode: Upsample) -> (usize, usize, f64) {
    let src = match mode {
        Upsample::HalfPixel => (dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5,
        Upsample::AlignCorners if n_out > 1 => dst as f64 * (n_in - 1) as f64 / (n_out - 1) as f64,
        Upsample::AlignCorners => 0.0,
    };
    let src = src.clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear upsampling of a patch-score grid to `(out_h, out_w)`.
pub fn pixel_map<T: Scalar>(patch: &Tensor<T>, out_h: usize, out_w: usize, mode: Upsample) -> Result<Tensor<T>> {
    let [h, w] = *patch.shape() else {
        return Err(Error::Shape(format!("expected [H, W] scores, got {:?}", patch.shape())));
    };
    if h == 0 || w == 0 {
        return Err(Error::EmptyDimension(vec![h, w]));
    }
    if out_h < h || out_w < w {
        return Err(Error::Shape(format!("cannot downsample {h}x{w} to {out_h}x{out_w}")));
    }
    let rows: Vec<_> = (0..out_h).map(|y| source_coord(y, h, out_h, mode)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w, mode)).collect();
    Ok(Tensor::from_fn(&[out_h, out_w], |i| {
        let (y0, y1, fy) = rows[i / out_w];
        let (x0, x1, fx) = cols[i % out_w];
        let (fy, fx) = (T::lit(fy), T::lit(fx));
        let p = |y: usize, x: usize| patch.data()[y * w + x];
        let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
        let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
        top + (bottom - top) * fy
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap<T> {
    pub patch_scores: Tensor<T>,
    pub pixel_scores: Tensor<T>,
    /// Maximum patch score.
    pub image_score: T,
}

impl<T: Scalar> AnomalyMap<T> {
    pub fn from_patch_scores(patch_scores: Tensor<T>, out_h: usize, out_w: usize) -> Result<Self> {
        let pixel_scores = pixel_map(&patch_scores, out_h, out_w, Upsample::HalfPixel)?;
        let image_score = patch_scores.max();
        Ok(Self {
            patch_scores,
            pixel_scores,
            image_score,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub recon: Tensor<T>,
    pub high_hat: Tensor<T>,
    pub low_hat: Tensor<T>,
    pub map: AnomalyMap<T>,
    pub gate: SoftGateState<T>,
}

/// Inference on one feature map; pixel scores sized `image_size`.
pub fn forward<T: Scalar>(
    feat: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    image_size: (usize, usize),
) -> Result<Forward<T>> {
    cfg.validate()?;
    let (c, h, w) = check_map(feat)?;
    if c != cfg.channels || params.head_high.len() != c {
        return Err(Error::Shape(format!(
            "model has {} channels, input has {c}",
            cfg.channels
        )));
    }
    if cfg.use_gscm && (h > cfg.max_h || w > cfg.max_w) {
        return Err(Error::Shape(format!(
            "grid {h}x{w} exceeds the configured {}x{}",
            cfg.max_h, cfg.max_w
        )));
    }
    if !feat.is_finite() {
        return Err(Error::NonFinite("input feature map".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(feat.clone());
    let vars = ModelVars::constants(&mut g, params);
    let out = forward_graph(&mut g, x, &vars, cfg);
    let recon = g.value(out.recon).clone();
    let scores = patch_anomaly_score(&recon, feat)?;
    Ok(Forward {
        map: AnomalyMap::from_patch_scores(scores, image_size.0, image_size.1)?,
        high_hat: g.value(out.high_hat).clone(),
        low_hat: g.value(out.low_hat).clone(),
        gate: out.split.state(&g, &cfg.gate),
        recon,
    })
}

/// Patch-level mask: a patch is abnormal if any of its pixels is.
pub fn patch_mask<T: Scalar>(pixel_mask: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [h, w] = *pixel_mask.shape() else {
        return Err(Error::Shape(format!(
            "expected [H, W] mask, got {:?}",
            pixel_mask.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} mask not divisible by patch {patch}")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut out = Tensor::zeros(&[ph, pw]);
    for y in 0..h {
        for x in 0..w {
            if pixel_mask.data()[y * w + x] != T::zero() {
                out.data_mut()[(y / patch) * pw + x / patch] = T::one();
            }
        }
    }
    Ok(out)
}

/// Coefficients of the six loss terms and the weight penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub n: f64,
    pub a: f64,
    pub con: f64,
    pub an: f64,
    pub far: f64,
    pub tri: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            n: 1.0,
            a: 1.0,
            con: 1.0,
            an: 1.0,
            far: 1.0,
            tri: 1.0,
            reg: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.n, self.a, self.con, self.an, self.far, self.tri, self.reg];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Term weights in [`LossTerms::to_array`] order.
    pub fn terms(&self) -> [f64; 6] {
        [self.n, self.an, self.a, self.far, self.con, self.tri]
    }
}

/// Margins and contrastive settings of the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHyper {
    pub margin_far: f64,
    pub margin_tri: f64,
    pub tau_con: f64,
    /// Euclidean patch distance bounding contrastive positives.
    pub radius_con: f64,
}

impl Default for LossHyper {
    fn default() -> Self {
        Self {
            margin_far: 0.2,
            margin_tri: 0.5,
            tau_con: 0.1,
            radius_con: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    /// `1 - cos` over patches of normal images.
    pub n: T,
    /// `1 - cos` over normal patches of anomalous images.
    pub an: T,
    /// `cos` over abnormal patches.
    pub a: T,
    /// `max(0, cos - margin_far)` over abnormal patches.
    pub far: T,
    pub con: T,
    pub tri: T,
}

impl<T: Scalar> LossTerms<T> {
    pub fn to_array(&self) -> [T; 6] {
        [self.n, self.an, self.a, self.far, self.con, self.tri]
    }

    pub fn from_array(a: [T; 6]) -> Self {
        Self {
            n: a[0],
            an: a[1],
            a: a[2],
            far: a[3],
            con: a[4],
            tri: a[5],
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        let (a, b) = (self.to_array(), o.to_array());
        Self::from_array(std::array::from_fn(|i| a[i] + b[i]))
    }
}

/// `sum_k lambda_k L_k + lambda_reg |theta|^2`.
pub fn total_loss<T: Scalar>(terms: &LossTerms<T>, weights: &LossWeights, params_norm_sq: T) -> T {
    let t = terms.to_array();
    let wt = weights.terms();
    (0..6).fold(T::zero(), |acc, k| acc + T::lit(wt[k]) * t[k]) + T::lit(weights.reg) * params_norm_sq
}

/// Per-batch set sizes used to turn per-sample sums into batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchNorms {
    pub normal_image_patches: usize,
    pub anomalous_normal_patches: usize,
    pub abnormal_patches: usize,
    pub contrastive_anchors: usize,
    pub triplets: usize,
}

/// Contrastive pairs of one image: `(anchor, positives)` for every normal
/// patch with at least one positive, when the image has abnormal patches.
fn contrastive_pairs<T: Scalar>(mask: &Tensor<T>, radius: f64) -> Vec<(usize, Vec<usize>)> {
    let (h, w) = (mask.rows(), mask.cols());
    let abnormal = |i: usize| mask.data()[i] != T::zero();
    if !(0..h * w).any(abnormal) {
        return Vec::new();
    }
    let r2 = radius * radius;
    (0..h * w)
        .filter(|&i| !abnormal(i))
        .filter_map(|i| {
            let (yi, xi) = ((i / w) as f64, (i % w) as f64);
            let pos: Vec<usize> = (0..h * w)
                .filter(|&j| j != i && !abnormal(j))
                .filter(|&j| {
                    let (dy, dx) = ((j / w) as f64 - yi, (j % w) as f64 - xi);
                    dy * dy + dx * dx <= r2
                })
                .collect();
            (!pos.is_empty()).then_some((i, pos))
        })
        .collect()
}

impl BatchNorms {
    pub fn from_masks<'a, T: Scalar + 'a>(masks: impl IntoIterator<Item = &'a Tensor<T>>, hyper: &LossHyper) -> Self {
        let mut n = Self::default();
        for m in masks {
            let bad = m.data().iter().filter(|&&v| v != T::zero()).count();
            let good = m.len() - bad;
            if bad == 0 {
                n.normal_image_patches += m.len();
            } else {
                n.anomalous_normal_patches += good;
                n.abnormal_patches += bad;
                n.triplets += good * bad;
                n.contrastive_anchors += contrastive_pairs(m, hyper.radius_con).len();
            }
        }
        n
    }
}

/// The six terms for one sample, as scalar graph nodes already divided by
/// the batch set sizes.
pub fn loss_terms_graph<T: Scalar>(
    g: &mut Graph<T>,
    recon: Var,
    original: &Tensor<T>,
    mask: &Tensor<T>,
    norms: &BatchNorms,
    hyper: &LossHyper,
) -> [Var; 6] {
    let shape = original.shape().to_vec();
    let t = shape[1] * shape[2];
    let abnormal: Vec<bool> = mask.data().iter().map(|&v| v != T::zero()).collect();
    let anomalous = abnormal.iter().any(|&b| b);
    let inv = |n: usize| if n == 0 { T::zero() } else { T::one() / T::lit(n as f64) };

    let rt = fsam::to_tokens(g, recon);
    let ot = {
        let o = g.constant(original.clone());
        fsam::to_tokens(g, o)
    };
    let cos = g.row_cosine(rt, ot);
    let zero = |g: &mut Graph<T>| g.constant(Tensor::scalar(T::zero()));
    let weighted_sum = |g: &mut Graph<T>, x: Var, wts: Vec<T>, shape: &[usize]| {
        let wv = g.constant(Tensor::new(shape.to_vec(), wts).unwrap());
        let p = g.mul(x, wv);
        g.sum(p)
    };

    let dissim = g.one_minus(cos);
    let l_n = if anomalous {
        zero(g)
    } else {
        weighted_sum(g, dissim, vec![inv(norms.normal_image_patches); t], &[t])
    };
    if !anomalous {
        let (z1, z2, z3, z4, z5) = (zero(g), zero(g), zero(g), zero(g), zero(g));
        return [l_n, z1, z2, z3, z4, z5];
    }
    let sel = |pred: &dyn Fn(usize) -> bool, scale: T| -> Vec<T> {
        (0..t).map(|i| if pred(i) { scale } else { T::zero() }).collect()
    };
    let l_an = weighted_sum(
        g,
        dissim,
        sel(&|i| !abnormal[i], inv(norms.anomalous_normal_patches)),
        &[t],
    );
    let w_abn = sel(&|i| abnormal[i], inv(norms.abnormal_patches));
    let l_a = weighted_sum(g, cos, w_abn.clone(), &[t]);
    let shifted = g.add_scalar(cos, T::lit(-hyper.margin_far));
    let hinge = g.relu(shifted);
    let l_far = weighted_sum(g, hinge, w_abn, &[t]);

    // pairwise cosine between reconstructed patches
    let rn = g.row_normalize(rt);
    let rnt = g.transpose(rn);
    let s = g.matmul(rn, rnt);

    let pairs = contrastive_pairs(mask, hyper.radius_con);
    let l_con = if pairs.is_empty() {
        zero(g)
    } else {
        let inv_tau = T::one() / T::lit(hyper.tau_con);
        let logits = g.scale(s, inv_tau);
        let e = g.exp(logits);
        let neg = g.constant(Tensor::new(vec![t, 1], sel(&|i| abnormal[i], T::one())).unwrap());
        let neg_sum = g.matmul(e, neg);
        let denom = g.add(e, neg_sum);
        let log_denom = g.log(denom);
        let term = g.sub(log_denom, logits);
        let mut wts = vec![T::zero(); t * t];
        let per_anchor = inv(norms.contrastive_anchors);
        for (i, pos) in &pairs {
            let wgt = per_anchor / T::lit(pos.len() as f64);
            for &p in pos {
                wts[i * t + p] = wgt;
            }
        }
        weighted_sum(g, term, wts, &[t, t])
    };

    let cos_col = g.reshape(cos, &[t, 1]);
    let gap = g.sub(s, cos_col);
    let gap = g.add_scalar(gap, T::lit(hyper.margin_tri));
    let tri = g.relu(gap);
    let mut wts = vec![T::zero(); t * t];
    let per_pair = inv(norms.triplets);
    for i in (0..t).filter(|&i| !abnormal[i]) {
        for k in (0..t).filter(|&k| abnormal[k]) {
            wts[i * t + k] = per_pair;
        }
    }
    let l_tri = weighted_sum(g, tri, wts, &[t, t]);
    [l_n, l_an, l_a, l_far, l_con, l_tri]
}

/// The six terms for a single sample treated as a batch of one.
pub fn loss_terms<T: Scalar>(
    recon: &Tensor<T>,
    original: &Tensor<T>,
    mask: &Tensor<T>,
    hyper: &LossHyper,
) -> Result<LossTerms<T>> {
    recon.check_same_shape(original)?;
    let (_, h, w) = check_map(recon)?;
    if mask.shape() != [h, w] {
        return Err(Error::Shape(format!("mask {:?} for a {h}x{w} grid", mask.shape())));
    }
    let norms = BatchNorms::from_masks([mask], hyper);
    let mut g = Graph::new();
    let r = g.constant(recon.clone());
    let vars = loss_terms_graph(&mut g, r, original, mask, &norms, hyper);
    Ok(LossTerms::from_array(vars.map(|v| g.value(v).data()[0])))
}

/// `sum_k lambda_k L_k` on graph nodes (no weight penalty).
pub fn weighted_terms_graph<T: Scalar>(g: &mut Graph<T>, terms: &[Var; 6], weights: &LossWeights) -> Var {
    let wt = weights.terms();
    let mut acc = g.constant(Tensor::scalar(T::zero()));
    for k in 0..6 {
        if wt[k] != 0.0 {
            let s = g.scale(terms[k], T::lit(wt[k]));
            acc = g.add(acc, s);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::uniform;
    use crate::softgate::GateMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            channels: 4,
            head_dim: 3,
            mask_hidden: 2,
            rank: 2,
            max_h: 4,
            max_w: 4,
            ..Default::default()
        }
    }

    #[test]
    fn fusion_examples() {
        let mut r = rng(1);
        let a = uniform::<f64>(&mut r, &[3, 2, 2], 1.0);
        let b = uniform::<f64>(&mut r, &[3, 2, 2], 1.0);
        let ones = Tensor::ones(&[3]);
        let f = fuse_reconstruction(&a, &Tensor::zeros(&[3, 2, 2]), &ones, &ones).unwrap();
        assert_eq!(f, a);
        let f = fuse_reconstruction(&a, &b, &ones, &ones).unwrap();
        assert_eq!(f, a.add(&b).unwrap());
        let f = fuse_reconstruction(&a, &b, &Tensor::full(&[3], 0.3), &Tensor::full(&[3], 0.7)).unwrap();
        for i in 0..a.len() {
            assert!((f.data()[i] - (0.3 * a.data()[i] + 0.7 * b.data()[i])).abs() < 1e-15);
        }
        assert!(fuse_reconstruction(&a, &b, &Tensor::ones(&[2]), &ones).is_err());
    }

    #[test]
    fn score_examples() {
        let mut r = rng(2);
        let a = uniform::<f64>(&mut r, &[4, 3, 3], 1.0);
        assert!(patch_anomaly_score(&a, &a).unwrap().max_abs() < 1e-15);
        let mut neg = a.clone();
        let mut orth = a.clone();
        for c in 0..4 {
            neg.set(&[c, 1, 2], -a.at(&[c, 1, 2]));
            orth.set(&[c, 0, 0], 0.0);
        }
        // orthogonal: swap two channels with a sign flip on a 2-channel support
        orth.set(&[0, 0, 0], a.at(&[1, 0, 0]));
        orth.set(&[1, 0, 0], -a.at(&[0, 0, 0]));
        let mut base = a.clone();
        for c in 2..4 {
            base.set(&[c, 0, 0], 0.0);
        }
        let s = patch_anomaly_score(&neg, &a).unwrap();
        assert!((s.at(&[1, 2]) - 2.0).abs() < 1e-15);
        let s = patch_anomaly_score(&orth, &base).unwrap();
        assert!((s.at(&[0, 0]) - 1.0).abs() < 1e-15);
        let scaled = Tensor::from_fn(a.shape(), |i| a.data()[i] * if i % 9 == 4 { 7.5 } else { 1.0 });
        assert!(patch_anomaly_score(&scaled, &a).unwrap().max_abs() < 1e-15);
        let z = Tensor::<f64>::zeros(&[4, 3, 3]);
        assert_eq!(patch_anomaly_score(&z, &z).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn upsampling_examples() {
        let c = Tensor::<f64>::full(&[2, 2], 0.7);
        assert!(pixel_map(&c, 8, 8, Upsample::HalfPixel)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
        let p = Tensor::<f64>::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(pixel_map(&p, 2, 2, Upsample::HalfPixel).unwrap(), p);
        assert_eq!(pixel_map(&p, 2, 2, Upsample::AlignCorners).unwrap(), p);
        let half = pixel_map(&p, 4, 4, Upsample::HalfPixel).unwrap();
        let corners = pixel_map(&p, 4, 4, Upsample::AlignCorners).unwrap();
        for y in 0..4 {
            // src = (x + 0.5) / 2 - 0.5, clamped to [0, 1]
            for (x, v) in [0.0, 0.25, 0.75, 1.0].into_iter().enumerate() {
                assert!((half.at(&[y, x]) - v).abs() < 1e-15);
            }
            // src = x / 3
            for (x, v) in [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].into_iter().enumerate() {
                assert!((corners.at(&[y, x]) - v).abs() < 1e-15);
            }
        }
        assert!(pixel_map(&p, 1, 4, Upsample::HalfPixel).is_err());
    }

    #[test]
    fn patch_mask_any_overlap() {
        let mut m = Tensor::<f64>::zeros(&[8, 8]);
        m.set(&[3, 4], 1.0);
        let p = patch_mask(&m, 4).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert!(patch_mask(&m, 3).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let terms = LossTerms::<f64>::from_array([0.3, 0.1, 0.7, 0.2, 1.5, 0.05]);
        let zero = LossWeights {
            n: 0.0,
            a: 0.0,
            con: 0.0,
            an: 0.0,
            far: 0.0,
            tri: 0.0,
            reg: 0.0,
        };
        assert_eq!(total_loss(&terms, &zero, 9.0), 0.0);
        let reg = LossWeights {
            reg: 1.0,
            ..zero.clone()
        };
        assert_eq!(total_loss(&terms, &reg, 2.5), 2.5);
        let w = LossWeights {
            n: 0.5,
            a: 2.0,
            con: 0.1,
            an: 3.0,
            far: 1.0,
            tri: 4.0,
            reg: 0.01,
        };
        let expect = 0.5 * 0.3 + 3.0 * 0.1 + 2.0 * 0.7 + 1.0 * 0.2 + 0.1 * 1.5 + 4.0 * 0.05 + 0.01 * 2.0;
        assert!((total_loss(&terms, &w, 2.0) - expect).abs() < 1e-15);
        // linear in each weight
        let w2 = LossWeights { tri: 8.0, ..w.clone() };
        let w0 = LossWeights { tri: 0.0, ..w.clone() };
        let (l0, l1, l2) = (
            total_loss(&terms, &w0, 2.0),
            total_loss(&terms, &w, 2.0),
            total_loss(&terms, &w2, 2.0),
        );
        assert!((l2 - l1 - (l1 - l0)).abs() < 1e-14);
    }

    #[test]
    fn perfect_reconstruction_of_normal_image() {
        let x = uniform::<f64>(&mut rng(3), &[4, 4, 4], 1.0);
        let t = loss_terms(&x, &x, &Tensor::zeros(&[4, 4]), &LossHyper::default()).unwrap();
        assert!(t.n.abs() < 1e-15);
        assert_eq!([t.an, t.a, t.far, t.con, t.tri], [0.0; 5]);
    }

    /// Loss terms evaluated with plain loops.
    fn longhand_terms(recon: &Tensor<f64>, orig: &Tensor<f64>, mask: &Tensor<f64>, hp: &LossHyper) -> [f64; 6] {
        let (c, h, w) = (recon.shape()[0], recon.shape()[1], recon.shape()[2]);
        let t = h * w;
        let vec_of = |x: &Tensor<f64>, i: usize| (0..c).map(|k| x.data()[k * t + i]).collect::<Vec<_>>();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt()
        };
        let bad: Vec<bool> = mask.data().iter().map(|&v| v > 0.0).collect();
        let ci: Vec<f64> = (0..t).map(|i| cos(&vec_of(recon, i), &vec_of(orig, i))).collect();
        let good: Vec<usize> = (0..t).filter(|&i| !bad[i]).collect();
        let abn: Vec<usize> = (0..t).filter(|&i| bad[i]).collect();
        let mean = |v: Vec<f64>| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        if abn.is_empty() {
            return [mean(ci.iter().map(|c| 1.0 - c).collect()), 0.0, 0.0, 0.0, 0.0, 0.0];
        }
        let l_an = mean(good.iter().map(|&i| 1.0 - ci[i]).collect());
        let l_a = mean(abn.iter().map(|&i| ci[i]).collect());
        let l_far = mean(abn.iter().map(|&i| (ci[i] - hp.margin_far).max(0.0)).collect());
        let s = |i: usize, j: usize| cos(&vec_of(recon, i), &vec_of(recon, j));
        let mut anchors = Vec::new();
        for &i in &good {
            let pos: Vec<usize> = good
                .iter()
                .copied()
                .filter(|&j| {
                    let dy = (j / w) as f64 - (i / w) as f64;
                    let dx = (j % w) as f64 - (i % w) as f64;
                    j != i && dy * dy + dx * dx <= hp.radius_con * hp.radius_con
                })
                .collect();
            if pos.is_empty() {
                continue;
            }
            let negs: f64 = abn.iter().map(|&n| (s(i, n) / hp.tau_con).exp()).sum();
            anchors.push(mean(
                pos.iter()
                    .map(|&p| {
                        let lp = s(i, p) / hp.tau_con;
                        -(lp.exp() / (lp.exp() + negs)).ln()
                    })
                    .collect(),
            ));
        }
        let l_con = mean(anchors);
        let mut tri = Vec::new();
        for &i in &good {
            for &k in &abn {
                let (dap, dan) = (1.0 - ci[i], 1.0 - s(i, k));
                tri.push((dap - dan + hp.margin_tri).max(0.0));
            }
        }
        [0.0, l_an, l_a, l_far, l_con, mean(tri)]
    }

    #[test]
    fn loss_terms_match_longhand() {
        let hp = LossHyper::default();
        for seed in 0..4 {
            let mut r = rng(10 + seed);
            let orig = uniform::<f64>(&mut r, &[3, 4, 4], 1.0);
            let noise = uniform::<f64>(&mut r, &[3, 4, 4], 0.6);
            let recon = orig.add(&noise).unwrap();
            let mut mask = Tensor::zeros(&[4, 4]);
            if seed > 0 {
                for i in 0..seed as usize * 2 {
                    mask.data_mut()[(i * 5) % 16] = 1.0;
                }
            }
            let t = loss_terms(&recon, &orig, &mask, &hp).unwrap().to_array();
            let e = longhand_terms(&recon, &orig, &mask, &hp);
            for k in 0..6 {
                assert!(
                    (t[k] - e[k]).abs() < 1e-12,
                    "seed {seed} term {k}: {} vs {}",
                    t[k],
                    e[k]
                );
            }
        }
    }

    #[test]
    fn far_hinge_example() {
        // one channel pair at an angle with cos = 0.9
        let theta = 0.9f64.acos();
        let orig = Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
        let recon = Tensor::new(vec![2, 1, 1], vec![theta.cos(), theta.sin()]).unwrap();
        let mask = Tensor::ones(&[1, 1]);
        let t = loss_terms(&recon, &orig, &mask, &LossHyper::default()).unwrap();
        assert!((t.far - 0.7).abs() < 1e-12);
        assert!((t.a - 0.9).abs() < 1e-12);
        assert_eq!((t.con, t.tri, t.an), (0.0, 0.0, 0.0));
    }

    #[test]
    fn triplet_with_anchor_equal_positive() {
        // patch 0 normal and perfectly reconstructed, patch 1 abnormal
        let orig = Tensor::<f64>::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let recon = Tensor::new(vec![2, 1, 2], vec![1.0, 0.6, 0.0, 0.8]).unwrap();
        let mask = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let t = loss_terms(&recon, &orig, &mask, &LossHyper::default()).unwrap();
        // d(a, n) = 1 - cos((1, 0), (0.6, 0.8)) = 0.4
        assert!((t.tri - (0.5 - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn ablated_identity_model_reproduces_input() {
        let cfg = ModelConfig {
            use_fsam: false,
            use_gscm: false,
            identity_heads: true,
            ..small_cfg()
        };
        let p = ModelParams::<f64>::init(&cfg, &mut rng(4)).unwrap();
        let x = uniform::<f64>(&mut rng(5), &[4, 4, 4], 1.0);
        let out = forward(&x, &p, &cfg, (16, 16)).unwrap();
        assert!(out.recon.max_abs_diff(&x) < 1e-12);
        assert!(out.map.patch_scores.max_abs() < 1e-12);
        for mode in [GateMode::Hard(0.5), GateMode::Hard(0.0)] {
            let cfg = ModelConfig {
                gate: SoftGateConfig {
                    mode,
                    ..Default::default()
                },
                ..cfg.clone()
            };
            assert!(forward(&x, &p, &cfg, (4, 4)).unwrap().recon.max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn zero_low_branch_gives_high_branch() {
        let cfg = small_cfg();
        let mut p = ModelParams::<f64>::init(&cfg, &mut rng(6)).unwrap();
        p.head_low = Tensor::zeros(&[4]);
        let x = uniform::<f64>(&mut rng(7), &[4, 4, 4], 1.0);
        let out = forward(&x, &p, &cfg, (4, 4)).unwrap();
        assert_eq!(out.recon, out.high_hat);
    }

    #[test]
    fn forward_contract() {
        let cfg = ModelConfig::default();
        let p = ModelParams::<f64>::init(&cfg, &mut rng(8)).unwrap();
        let x = uniform::<f64>(&mut rng(9), &[16, 8, 8], 1.0);
        let a = forward(&x, &p, &cfg, (64, 64)).unwrap();
        let b = forward(&x, &p, &cfg, (64, 64)).unwrap();
        assert_eq!(a.map.patch_scores.shape(), &[8, 8]);
        assert_eq!(a.map.pixel_scores.shape(), &[64, 64]);
        assert_eq!(a.map.image_score, a.map.patch_scores.max());
        assert!(a.map.patch_scores.data().iter().all(|&s| (0.0..=2.0).contains(&s)));
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.recon), bits(&b.recon));
        assert_eq!(bits(&a.map.pixel_scores), bits(&b.map.pixel_scores));
        assert!(forward(&uniform::<f64>(&mut rng(9), &[8, 8, 8], 1.0), &p, &cfg, (64, 64)).is_err());
        assert!(forward(&uniform::<f64>(&mut rng(9), &[16, 16, 16], 1.0), &p, &cfg, (64, 64)).is_err());
    }

    #[test]
    fn flat_view_and_checkpoint_round_trip() {
        let cfg = small_cfg();
        let p = ModelParams::<f64>::init(&cfg, &mut rng(11)).unwrap();
        let names = p.names();
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
        assert_eq!(p.flat().len(), p.count());
        let mut q = ModelParams::<f64>::init(&cfg, &mut rng(12)).unwrap();
        assert_ne!(p, q);
        q.set_flat(&p.flat()).unwrap();
        assert_eq!(p, q);
        let bytes = p.to_container().unwrap().to_bytes().unwrap();
        let mut r = ModelParams::<f64>::init(&cfg, &mut rng(13)).unwrap();
        r.load_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(p, r);
        let (k, off) = p.locate(p.count() - 1).unwrap();
        assert_eq!((k, off), (names.len() - 1, 3));
        assert!(p.locate(p.count()).is_none());
    }
}
