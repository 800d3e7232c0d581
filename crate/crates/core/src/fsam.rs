//! High-frequency structural branch.
//!
//! The branch modulates spectral amplitudes with a generated non-negative
//! mask while keeping every bin's phase, returns to the spatial domain, and
//! then attends from the modulated tokens (queries) to the unmodulated
//! spatial tokens (keys, values). Attention logits carry a scalar bias that
//! is linear in a 4-D relative offset descriptor. A residual connection adds
//! the projected attention output back onto the modulated map.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::init::uniform;
use crate::numerics::{ComplexTensor, Scalar, Tensor};

/// `softplus^{-1}(1)`: mask generator output starts at 1.
const UNIT_SOFTPLUS_BIAS: f64 = 0.541_324_854_612_918_1;

/// Sharpness of the amplitude softplus.
pub const DEFAULT_SOFTPLUS_BETA: f64 = 10.0;

/// Grid coordinate `(x, y)` of a token.
pub type Position = (i64, i64);

/// Nonlinearity applied to amplitudes before masking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AmplitudeMap {
    /// `softplus(beta * A) / beta`; empty bins map to `ln 2 / beta`.
    Softplus { beta: f64 },
    /// Test mode: pass amplitudes through unchanged.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FsamOptions {
    /// Relative offset bias on the attention logits.
    pub offset_bias: bool,
    pub amplitude_map: AmplitudeMap,
    /// Freeze the mask generator at `m = 1`.
    pub unit_mask: bool,
    /// Stabilizer in `X / (A + eps)`.
    pub eps: f64,
}

impl Default for FsamOptions {
    fn default() -> Self {
        Self {
            offset_bias: true,
            amplitude_map: AmplitudeMap::Softplus {
                beta: DEFAULT_SOFTPLUS_BETA,
            },
            unit_mask: false,
            eps: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FsamParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub e_theta: Tensor<T>,
    pub mask_w1: Tensor<T>,
    pub mask_b1: Tensor<T>,
    pub mask_w2: Tensor<T>,
    pub mask_b2: Tensor<T>,
}

impl<T: Scalar> FsamParams<T> {
    /// Random projections scaled by `1/sqrt(C)`, zero offset bias, and a mask
    /// generator that starts near `m = 1`.
    pub fn init(channels: usize, head_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (channels as f64).sqrt();
        let so = 1.0 / (head_dim as f64).sqrt();
        Self {
            w_q: uniform(rng, &[channels, head_dim], s),
            w_k: uniform(rng, &[channels, head_dim], s),
            w_v: uniform(rng, &[channels, head_dim], s),
            w_o: uniform(rng, &[head_dim, channels], 0.1 * so),
            e_theta: Tensor::zeros(&[4]),
            mask_w1: uniform(rng, &[channels, hidden], 0.5),
            mask_b1: Tensor::zeros(&[channels, hidden]),
            mask_w2: uniform(rng, &[channels, hidden], 0.5 / (hidden as f64).sqrt()),
            mask_b2: Tensor::full(&[channels], T::lit(UNIT_SOFTPLUS_BIAS)),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("fsam.w_q", &self.w_q),
            ("fsam.w_k", &self.w_k),
            ("fsam.w_v", &self.w_v),
            ("fsam.w_o", &self.w_o),
            ("fsam.e_theta", &self.e_theta),
            ("fsam.mask_w1", &self.mask_w1),
            ("fsam.mask_b1", &self.mask_b1),
            ("fsam.mask_w2", &self.mask_w2),
            ("fsam.mask_b2", &self.mask_b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("fsam.w_q", &mut self.w_q),
            ("fsam.w_k", &mut self.w_k),
            ("fsam.w_v", &mut self.w_v),
            ("fsam.w_o", &mut self.w_o),
            ("fsam.e_theta", &mut self.e_theta),
            ("fsam.mask_w1", &mut self.mask_w1),
            ("fsam.mask_b1", &mut self.mask_b1),
            ("fsam.mask_w2", &mut self.mask_w2),
            ("fsam.mask_b2", &mut self.mask_b2),
        ]
    }
}

/// Graph handles for [`FsamParams`], in the same order as `named()`.
#[derive(Clone, Copy, Debug)]
pub struct FsamVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub e_theta: Var,
    pub mask_w1: Var,
    pub mask_b1: Var,
    pub mask_w2: Var,
    pub mask_b2: Var,
}

impl FsamVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_q: v[0],
            w_k: v[1],
            w_v: v[2],
            w_o: v[3],
            e_theta: v[4],
            mask_w1: v[5],
            mask_b1: v[6],
            mask_w2: v[7],
            mask_b2: v[8],
        }
    }

    pub fn constants<T: Scalar>(g: &mut Graph<T>, p: &FsamParams<T>) -> Self {
        let v: Vec<Var> = p.named().into_iter().map(|(_, t)| g.constant(t.clone())).collect();
        Self::from_slice(&v)
    }
}

/// `[x_i - x_j, y_i - y_j, |x_i - x_j|, |y_i - y_j|]`.
pub fn offset_descriptor(pi: Position, pj: Position) -> [i64; 4] {
    let dx = pi.0 - pj.0;
    let dy = pi.1 - pj.1;
    [dx, dy, dx.abs(), dy.abs()]
}

/// Raster-order positions of an `h x w` grid.
pub fn grid_positions(h: usize, w: usize) -> Vec<Position> {
    (0..h * w).map(|t| ((t % w) as i64, (t / w) as i64)).collect()
}

/// Offset descriptors of every `(i, j)` pair, as an `[N_f * N_s, 4]` matrix.
pub fn descriptor_matrix<T: Scalar>(freq: &[Position], spatial: &[Position]) -> Tensor<T> {
    let ns = spatial.len();
    Tensor::from_fn(&[freq.len() * ns, 4], |i| {
        let pair = i / 4;
        T::lit(offset_descriptor(freq[pair / ns], spatial[pair % ns])[i % 4] as f64)
    })
}

/// `B[i, j] = e_theta . offset_descriptor(p_i, p_j)`.
pub fn bias_matrix<T: Scalar>(freq: &[Position], spatial: &[Position], e_theta: &[T]) -> Result<Tensor<T>> {
    if freq.is_empty() || spatial.is_empty() {
        return Err(Error::Shape("bias matrix needs non-empty position lists".into()));
    }
    if e_theta.len() != 4 {
        return Err(Error::Shape(format!(
            "e_theta has {} entries, expected 4",
            e_theta.len()
        )));
    }
    let d = descriptor_matrix::<T>(freq, spatial);
    let e = Tensor::new(vec![4, 1], e_theta.to_vec())?;
    d.matmul(&e)?.reshape(&[freq.len(), spatial.len()])
}

/// `softmax(Q K^T / sqrt(d) + B) V` on graph handles; `bias` may be absent.
pub fn attention_graph<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Var {
    let d = g.value(q).cols();
    let kt = g.transpose(k);
    let qk = g.matmul(q, kt);
    let mut logits = g.scale(qk, T::one() / T::lit(d as f64).sqrt());
    if let Some(b) = bias {
        logits = g.add(logits, b);
    }
    let attn = g.softmax_rows(logits);
    g.matmul(attn, v)
}

/// Frequency-to-spatial attention with an additive logit bias.
pub fn f2s_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (nf, d) = match *q.shape() {
        [nf, d] => (nf, d),
        _ => return Err(Error::Shape(format!("Q must be a matrix, got {:?}", q.shape()))),
    };
    if d == 0 {
        return Err(Error::Shape("head dimension must be at least 1".into()));
    }
    let ns = k.shape().first().copied().unwrap_or(0);
    if k.shape() != [ns, d] || v.shape() != [ns, d] || b.shape() != [nf, ns] || ns == 0 {
        return Err(Error::Shape(format!(
            "attention shapes Q {:?}, K {:?}, V {:?}, B {:?}",
            q.shape(),
            k.shape(),
            v.shape(),
            b.shape()
        )));
    }
    let mut g = Graph::new();
    let (qv, kv, vv, bv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
        g.constant(b.clone()),
    );
    let out = attention_graph(&mut g, qv, kv, vv, Some(bv));
    Ok(g.value(out).clone())
}

/// Phase-preserving amplitude modulation of a stacked `[2, C, H, W]`
/// spectrum: `X_hat = m * sigma(A) * X / (A + eps)`.
pub fn modulate_graph<T: Scalar>(g: &mut Graph<T>, z: Var, mask: Var, amp: Var, eps: f64, map: AmplitudeMap) -> Var {
    let sig = match map {
        AmplitudeMap::Softplus { beta } => {
            let sharp = g.scale(amp, T::lit(beta));
            let sp = g.softplus(sharp);
            g.scale(sp, T::lit(1.0 / beta))
        }
        AmplitudeMap::Identity => amp,
    };
    let ahat = g.mul(mask, sig);
    let denom = g.add_scalar(amp, T::lit(eps));
    let factor = g.div(ahat, denom);
    g.mul(z, factor)
}

fn amplitude_graph<T: Scalar>(g: &mut Graph<T>, z: Var) -> Var {
    let re = g.real_part(z);
    let im = g.imag_part(z);
    let re2 = g.mul(re, re);
    let im2 = g.mul(im, im);
    let pw = g.add(re2, im2);
    g.sqrt(pw)
}

fn stacked<T: Scalar>(x: &ComplexTensor<T>) -> Tensor<T> {
    let mut shape = vec![2];
    shape.extend_from_slice(x.shape());
    let mut data = x.re().to_vec();
    data.extend_from_slice(x.im());
    Tensor::new(shape, data).unwrap()
}

/// Value-level amplitude modulation; see [`modulate_graph`].
pub fn amplitude_modulation<T: Scalar>(
    x: &ComplexTensor<T>,
    m: &Tensor<T>,
    eps: f64,
    map: AmplitudeMap,
) -> Result<ComplexTensor<T>> {
    if m.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} vs spectrum {:?}",
            m.shape(),
            x.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Config("modulation eps must be positive".into()));
    }
    let mut g = Graph::new();
    let z = g.constant(stacked(x));
    let mv = g.constant(m.clone());
    let amp = g.constant(x.amplitude());
    let out = modulate_graph(&mut g, z, mv, amp, eps, map);
    let v = g.value(out);
    let n = x.len();
    ComplexTensor::new(
        Tensor::new(x.shape().to_vec(), v.data()[..n].to_vec())?,
        Tensor::new(x.shape().to_vec(), v.data()[n..].to_vec())?,
    )
}

/// Per-channel two-layer pointwise map over `ln(1 + A)`, softplus output.
fn mask_generator<T: Scalar>(g: &mut Graph<T>, amp: Var, p: &FsamVars) -> Var {
    let shape = g.value(amp).shape().to_vec();
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let k = g.value(p.mask_w1).cols();
    let la = g.log1p(amp);
    let la = g.reshape(la, &[c, 1, hw]);
    let w1 = g.reshape(p.mask_w1, &[c, k, 1]);
    let b1 = g.reshape(p.mask_b1, &[c, k, 1]);
    let w2 = g.reshape(p.mask_w2, &[c, k, 1]);
    let b2 = g.reshape(p.mask_b2, &[c, 1, 1]);
    let pre = g.mul(la, w1);
    let pre = g.add(pre, b1);
    let hidden = g.silu(pre);
    let weighted = g.mul(hidden, w2);
    let summed = g.sum_axis(weighted, 1);
    let out = g.add(summed, b2);
    let m = g.softplus(out);
    g.reshape(m, &shape)
}

/// `[C, H, W]` map to `[H*W, C]` tokens.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.value(x).shape().to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]]);
    g.transpose(flat)
}

/// `[H*W, C]` tokens back to a `[C, H, W]` map.
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Var {
    let c = g.value(t).cols();
    let tt = g.transpose(t);
    g.reshape(tt, &[c, h, w])
}

/// Precomputed `[T*T, 4]` descriptor matrix for an `h x w` token grid.
#[derive(Clone, Debug)]
pub struct OffsetTable<T> {
    pub h: usize,
    pub w: usize,
    pub descriptors: Arc<Tensor<T>>,
}

impl<T: Scalar> OffsetTable<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let pos = grid_positions(h, w);
        Self {
            h,
            w,
            descriptors: Arc::new(descriptor_matrix(&pos, &pos)),
        }
    }
}

/// Full branch on graph handles.
pub fn fsam_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &FsamVars,
    opts: &FsamOptions,
    offsets: &OffsetTable<T>,
) -> Var {
    let shape = g.value(x).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let t = h * w;
    let z = g.fft2(x);
    let amp = amplitude_graph(g, z);
    let mask = if opts.unit_mask {
        g.constant(Tensor::ones(&shape))
    } else {
        mask_generator(g, amp, p)
    };
    let zhat = modulate_graph(g, z, mask, amp, opts.eps, opts.amplitude_map);
    let modulated = g.ifft2_real(zhat);

    let mt = to_tokens(g, modulated);
    let xt = to_tokens(g, x);
    let q = g.matmul(mt, p.w_q);
    let k = g.matmul(xt, p.w_k);
    let v = g.matmul(xt, p.w_v);
    let bias = if opts.offset_bias {
        assert_eq!((offsets.h, offsets.w), (h, w), "offset table built for another grid");
        let d = g.constant((*offsets.descriptors).clone());
        let e = g.reshape(p.e_theta, &[4, 1]);
        let b = g.matmul(d, e);
        Some(g.reshape(b, &[t, t]))
    } else {
        None
    };
    let attended = attention_graph(g, q, k, v, bias);
    let projected = g.matmul(attended, p.w_o);
    let out = g.add(mt, projected);
    from_tokens(g, out, h, w)
}

/// Value-level forward pass of the branch.
pub fn fsam_forward<T: Scalar>(f_high: &Tensor<T>, params: &FsamParams<T>, opts: &FsamOptions) -> Result<Tensor<T>> {
    let [c, h, w] = *f_high.shape() else {
        return Err(Error::Shape(format!("expected [C, H, W], got {:?}", f_high.shape())));
    };
    if params.w_q.shape()[0] != c || params.mask_b2.len() != c {
        return Err(Error::Shape(format!(
            "parameters built for {} channels, input has {c}",
            params.mask_b2.len()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(f_high.clone());
    let vars = FsamVars::constants(&mut g, params);
    let out = fsam_graph(&mut g, x, &vars, opts, &OffsetTable::new(h, w));
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fft2, softmax_slice};
    use num_complex::Complex;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn descriptor_examples() {
        assert_eq!(offset_descriptor((4, 4), (4, 4)), [0, 0, 0, 0]);
        assert_eq!(offset_descriptor((2, 3), (0, 5)), [2, -2, 2, 2]);
        let mut r = rng(1);
        for _ in 0..50 {
            let a = (r.random_range(-9..9), r.random_range(-9..9));
            let b = (r.random_range(-9..9), r.random_range(-9..9));
            let (f, s) = (offset_descriptor(a, b), offset_descriptor(b, a));
            assert_eq!([f[0], f[1]], [-s[0], -s[1]]);
            assert_eq!([f[2], f[3]], [s[2], s[3]]);
        }
    }

    #[test]
    fn bias_examples() {
        let pos = grid_positions(2, 2);
        let zero = bias_matrix::<f64>(&pos, &pos, &[0.0; 4]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let b = bias_matrix::<f64>(&[(3, 0)], &[(1, 0)], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(b.data(), &[2.0]);
        let e = [0.3, -1.1, 0.7, 0.25];
        let b = bias_matrix::<f64>(&pos, &pos, &e).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (pi, pj) = (pos[i], pos[j]);
                let dx = (pi.0 - pj.0) as f64;
                let dy = (pi.1 - pj.1) as f64;
                let expect = e[0] * dx + e[1] * dy + e[2] * dx.abs() + e[3] * dy.abs();
                assert!((b.at(&[i, j]) - expect).abs() < 1e-15);
            }
        }
        assert!(bias_matrix::<f64>(&[], &pos, &e).is_err());
    }

    #[test]
    fn singleton_key_returns_its_value() {
        let q = Tensor::<f64>::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.1, 9.0, 3.0]).unwrap();
        let k = Tensor::new(vec![1, 2], vec![0.3, 0.4]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![7.0, -1.0]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![5.0, -3.0, 0.0]).unwrap();
        let out = f2s_attention(&q, &k, &v, &b).unwrap();
        for i in 0..3 {
            assert!((out.at(&[i, 0]) - 7.0).abs() < 1e-15 && (out.at(&[i, 1]) + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_bias_selects_column() {
        let mut r = rng(2);
        let q = uniform::<f64>(&mut r, &[2, 3], 1.0);
        let k = uniform::<f64>(&mut r, &[4, 3], 1.0);
        let v = uniform::<f64>(&mut r, &[4, 3], 1.0);
        let mut b = Tensor::zeros(&[2, 4]);
        b.set(&[0, 2], 1e6);
        b.set(&[1, 2], 1e6);
        let out = f2s_attention(&q, &k, &v, &b).unwrap();
        for i in 0..2 {
            for c in 0..3 {
                assert!((out.at(&[i, c]) - v.at(&[2, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let z = Tensor::<f64>::zeros(&[2, 0]);
        assert!(f2s_attention(&z, &z, &z, &Tensor::zeros(&[2, 2])).is_err());
        let q = Tensor::<f64>::zeros(&[2, 3]);
        assert!(f2s_attention(&q, &q, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn zero_bias_equals_unbiased_attention_bitwise() {
        let mut r = rng(3);
        let q = uniform::<f64>(&mut r, &[5, 3], 1.0);
        let k = uniform::<f64>(&mut r, &[6, 3], 1.0);
        let v = uniform::<f64>(&mut r, &[6, 3], 1.0);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let plain = attention_graph(&mut g, qv, kv, vv, None);
        let pos = grid_positions(2, 3);
        let fpos: Vec<Position> = (0..5).map(|i| (i, 2 * i)).collect();
        let b = bias_matrix::<f64>(&fpos, &pos, &[0.0; 4]).unwrap();
        let biased = f2s_attention(&q, &k, &v, &b).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(g.value(plain)), bits(&biased));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut r = rng(4);
        let q = uniform::<f64>(&mut r, &[4, 2], 3.0);
        let k = uniform::<f64>(&mut r, &[4, 2], 3.0);
        let pos = grid_positions(2, 2);
        let b = bias_matrix::<f64>(&pos, &pos, &[0.5, -0.5, 1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let (qv, kv, bv) = (g.constant(q), g.constant(k), g.constant(b));
        let kt = g.transpose(kv);
        let l = g.matmul(qv, kt);
        let l = g.scale(l, 1.0 / 2f64.sqrt());
        let l = g.add(l, bv);
        let s = g.softmax_rows(l);
        for row in g.value(s).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_keys_with_positions_leaves_output_unchanged() {
        let mut r = rng(5);
        let (nf, ns, d) = (3, 5, 2);
        let q = uniform::<f64>(&mut r, &[nf, d], 1.0);
        let k = uniform::<f64>(&mut r, &[ns, d], 1.0);
        let v = uniform::<f64>(&mut r, &[ns, d], 1.0);
        let fpos: Vec<Position> = vec![(0, 0), (2, 1), (1, 3)];
        let spos: Vec<Position> = vec![(0, 1), (1, 1), (2, 2), (3, 0), (4, 4)];
        let e = [0.2, -0.3, 0.1, 0.4];
        let base = f2s_attention(&q, &k, &v, &bias_matrix(&fpos, &spos, &e).unwrap()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let kp = Tensor::from_fn(&[ns, d], |i| k.at(&[perm[i / d], i % d]));
        let vp = Tensor::from_fn(&[ns, d], |i| v.at(&[perm[i / d], i % d]));
        let sp: Vec<Position> = perm.iter().map(|&j| spos[j]).collect();
        let out = f2s_attention(&q, &kp, &vp, &bias_matrix(&fpos, &sp, &e).unwrap()).unwrap();
        assert!(out.max_abs_diff(&base) < 1e-12);
        // relabel queries: rows follow
        let qperm = [2, 0, 1];
        let qp = Tensor::from_fn(&[nf, d], |i| q.at(&[qperm[i / d], i % d]));
        let fp: Vec<Position> = qperm.iter().map(|&j| fpos[j]).collect();
        let out = f2s_attention(&qp, &k, &v, &bias_matrix(&fp, &spos, &e).unwrap()).unwrap();
        for i in 0..nf {
            for c in 0..d {
                assert!((out.at(&[i, c]) - base.at(&[qperm[i], c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_straight_line_evaluation() {
        let mut r = rng(6);
        let (nf, ns, d) = (3, 2, 2);
        let q = uniform::<f64>(&mut r, &[nf, d], 1.0);
        let k = uniform::<f64>(&mut r, &[ns, d], 1.0);
        let v = uniform::<f64>(&mut r, &[ns, d], 1.0);
        let b = uniform::<f64>(&mut r, &[nf, ns], 1.0);
        let out = f2s_attention(&q, &k, &v, &b).unwrap();
        for i in 0..nf {
            let logits: Vec<f64> = (0..ns)
                .map(|j| {
                    let dot: f64 = (0..d).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum();
                    dot / (d as f64).sqrt() + b.at(&[i, j])
                })
                .collect();
            let w = softmax_slice(&logits);
            for c in 0..d {
                let expect: f64 = (0..ns).map(|j| w[j] * v.at(&[j, c])).sum();
                assert!((out.at(&[i, c]) - expect).abs() < 1e-12);
            }
        }
    }

    fn random_spectrum(seed: u64, shape: &[usize]) -> ComplexTensor<f64> {
        let mut r = rng(seed);
        let re = uniform(&mut r, shape, 2.0);
        let im = uniform(&mut r, shape, 2.0);
        ComplexTensor::new(re, im).unwrap()
    }

    #[test]
    fn modulation_examples() {
        let x = random_spectrum(7, &[2, 4, 4]);
        let zero = amplitude_modulation(
            &x,
            &Tensor::zeros(x.shape()),
            1e-3,
            AmplitudeMap::Softplus {
                beta: DEFAULT_SOFTPLUS_BETA,
            },
        )
        .unwrap();
        assert_eq!(zero.energy(), 0.0);
        let same = amplitude_modulation(&x, &Tensor::ones(x.shape()), 1e-12, AmplitudeMap::Identity).unwrap();
        for i in 0..x.len() {
            assert!((same.get(i) - x.get(i)).norm() < 1e-9);
        }
        assert!(amplitude_modulation(&x, &Tensor::ones(&[2, 4]), 1e-3, AmplitudeMap::Identity).is_err());
        assert!(amplitude_modulation(&x, &Tensor::ones(x.shape()), 0.0, AmplitudeMap::Identity).is_err());
    }

    #[test]
    fn modulation_preserves_phase_and_sets_amplitude() {
        let x = random_spectrum(8, &[3, 8, 8]);
        let mut r = rng(9);
        let m = Tensor::from_fn(x.shape(), |_| r.random_range(0.01..3.0));
        let eps = 1e-3;
        let out = amplitude_modulation(
            &x,
            &m,
            eps,
            AmplitudeMap::Softplus {
                beta: DEFAULT_SOFTPLUS_BETA,
            },
        )
        .unwrap();
        let (pa, pb) = (x.phase(), out.phase());
        let (aa, ab) = (x.amplitude(), out.amplitude());
        for i in 0..x.len() {
            let a = aa.data()[i];
            if a > 1e-6 {
                let mut d = (pa.data()[i] - pb.data()[i]).abs();
                d = d.min(2.0 * std::f64::consts::PI - d);
                assert!(d < 1e-9);
            }
            let sp = (DEFAULT_SOFTPLUS_BETA * a).softplus() / DEFAULT_SOFTPLUS_BETA;
            let expect = m.data()[i] * sp * a / (a + eps);
            assert!((ab.data()[i] - expect).abs() < 1e-12 * (1.0 + expect));
        }
    }

    fn identity_params(c: usize) -> FsamParams<f64> {
        let mut p = FsamParams::init(c, c, 2, &mut rng(0));
        p.w_v = Tensor::eye(c);
        p.w_o = Tensor::zeros(&[c, c]);
        p
    }

    #[test]
    fn identity_configuration_reproduces_input() {
        let opts = FsamOptions {
            unit_mask: true,
            amplitude_map: AmplitudeMap::Identity,
            eps: 1e-12,
            ..Default::default()
        };
        let x = Tensor::new(vec![3, 1, 1], vec![0.4, -1.2, 2.0]).unwrap();
        let out = fsam_forward(&x, &identity_params(3), &opts).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn zero_in_zero_out_and_shape_contract() {
        let p = FsamParams::<f64>::init(4, 3, 2, &mut rng(10));
        let opts = FsamOptions::default();
        let z = fsam_forward(&Tensor::zeros(&[4, 8, 8]), &p, &opts).unwrap();
        assert_eq!(z.shape(), &[4, 8, 8]);
        assert_eq!(z.max_abs(), 0.0);
        for (h, w) in [(2, 2), (4, 8), (8, 4)] {
            let x = uniform::<f64>(&mut rng(11), &[4, h, w], 1.0);
            assert_eq!(fsam_forward(&x, &p, &opts).unwrap().shape(), &[4, h, w]);
        }
        assert!(fsam_forward(&Tensor::zeros(&[5, 8, 8]), &p, &opts).is_err());
    }

    #[test]
    fn unit_mask_softplus_path_matches_longhand() {
        let c = 2;
        let x = uniform::<f64>(&mut rng(12), &[c, 2, 2], 1.0);
        let mut p = FsamParams::<f64>::init(c, 2, 2, &mut rng(13));
        p.e_theta = Tensor::from_vec(vec![0.1, 0.2, -0.3, 0.05]);
        let opts = FsamOptions {
            unit_mask: true,
            ..Default::default()
        };
        let out = fsam_forward(&x, &p, &opts).unwrap();

        // longhand: modulate in the frequency domain, invert, attend
        let z = fft2(&x).unwrap();
        let mut zm = z.clone();
        for i in 0..z.len() {
            let a = z.get(i).norm();
            let f = (DEFAULT_SOFTPLUS_BETA * a).softplus() / DEFAULT_SOFTPLUS_BETA / (a + opts.eps);
            zm.set(i, z.get(i) * Complex::new(f, 0.0));
        }
        let modulated = crate::numerics::ifft2(&zm).unwrap();
        let tok = |m: &Tensor<f64>, t: usize| -> Vec<f64> { (0..c).map(|ch| m.data()[ch * 4 + t]).collect() };
        let pos = grid_positions(2, 2);
        for t in 0..4 {
            let qrow: Vec<f64> = (0..2)
                .map(|j| (0..c).map(|ch| tok(&modulated, t)[ch] * p.w_q.at(&[ch, j])).sum())
                .collect();
            let logits: Vec<f64> = (0..4)
                .map(|s| {
                    let krow: Vec<f64> = (0..2)
                        .map(|j| (0..c).map(|ch| tok(&x, s)[ch] * p.w_k.at(&[ch, j])).sum())
                        .collect();
                    let dd = offset_descriptor(pos[t], pos[s]);
                    let bias: f64 = (0..4).map(|k| p.e_theta.data()[k] * dd[k] as f64).sum();
                    (qrow[0] * krow[0] + qrow[1] * krow[1]) / 2f64.sqrt() + bias
                })
                .collect();
            let wts = softmax_slice(&logits);
            let att: Vec<f64> = (0..2)
                .map(|j| {
                    (0..4)
                        .map(|s| wts[s] * (0..c).map(|ch| tok(&x, s)[ch] * p.w_v.at(&[ch, j])).sum::<f64>())
                        .sum()
                })
                .collect();
            for ch in 0..c {
                let proj: f64 = (0..2).map(|j| att[j] * p.w_o.at(&[j, ch])).sum();
                let expect = tok(&modulated, t)[ch] + proj;
                assert!((out.data()[ch * 4 + t] - expect).abs() < 1e-12);
            }
        }
    }
}
