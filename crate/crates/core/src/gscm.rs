//! Low-frequency context branch.
//!
//! Tokens attend to each other through a low-rank dynamic affinity with a
//! relative-offset bias table, aggregate per-token modulated features, and
//! feed a gated recurrence (the DMU) that runs over tokens in raster order.
//! The recurrence output is coupled to a 3x3 convolutional upper stream and
//! fused with an input-conditioned gate plus a coordinate encoding.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::fsam::{from_tokens, grid_positions, to_tokens, Position};
use crate::init::uniform;
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GscmOptions {
    /// Replace the aggregation SiLU with the identity.
    pub identity_activation: bool,
    /// Pin every DMU gate to this value.
    pub force_gate: Option<f64>,
}

/// Learnable weights. Token rows multiply weights from the left (`x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct GscmParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    /// Relative-offset bias table over a `max_h x max_w` grid,
    /// `(2 max_h - 1) * (2 max_w - 1)` entries.
    pub b_rel: Tensor<T>,
    pub w_pi: Tensor<T>,
    pub w_gamma: Tensor<T>,
    /// 3x3 convolution, `[9, C, C]`, tap index `(dy + 1) * 3 + (dx + 1)`.
    pub conv: Tensor<T>,
    pub w_gd: Tensor<T>,
    pub w_r: Tensor<T>,
    pub w_d: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w_go: Tensor<T>,
    /// `[4, C]` coordinate projection.
    pub w_c: Tensor<T>,
    pub max_h: usize,
    pub max_w: usize,
}

impl<T: Scalar> GscmParams<T> {
    pub fn init(channels: usize, rank: usize, max_h: usize, max_w: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 || rank >= channels {
            return Err(Error::Config(format!(
                "rank {rank} must satisfy 1 <= r < C = {channels}"
            )));
        }
        if max_h == 0 || max_w == 0 {
            return Err(Error::EmptyDimension(vec![max_h, max_w]));
        }
        let c = channels;
        let s = 1.0 / (c as f64).sqrt();
        Ok(Self {
            w_q: uniform(rng, &[c, rank], s),
            w_k: uniform(rng, &[c, rank], s),
            b_rel: Tensor::zeros(&[(2 * max_h - 1) * (2 * max_w - 1)]),
            w_pi: uniform(rng, &[c, c], s),
            w_gamma: uniform(rng, &[c, c], s),
            conv: uniform(rng, &[9, c, c], s / 3.0),
            w_gd: uniform(rng, &[c, c], s),
            w_r: uniform(rng, &[c, c], s),
            w_d: uniform(rng, &[c, c], s),
            w_o: uniform(rng, &[c, c], s),
            w_go: uniform(rng, &[c, c], s),
            w_c: Tensor::zeros(&[4, c]),
            max_h,
            max_w,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_pi.rows()
    }

    pub fn rank(&self) -> usize {
        self.w_q.cols()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("gscm.w_q", &self.w_q),
            ("gscm.w_k", &self.w_k),
            ("gscm.b_rel", &self.b_rel),
            ("gscm.w_pi", &self.w_pi),
            ("gscm.w_gamma", &self.w_gamma),
            ("gscm.conv", &self.conv),
            ("gscm.w_gd", &self.w_gd),
            ("gscm.w_r", &self.w_r),
            ("gscm.w_d", &self.w_d),
            ("gscm.w_o", &self.w_o),
            ("gscm.w_go", &self.w_go),
            ("gscm.w_c", &self.w_c),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("gscm.w_q", &mut self.w_q),
            ("gscm.w_k", &mut self.w_k),
            ("gscm.b_rel", &mut self.b_rel),
            ("gscm.w_pi", &mut self.w_pi),
            ("gscm.w_gamma", &mut self.w_gamma),
            ("gscm.conv", &mut self.conv),
            ("gscm.w_gd", &mut self.w_gd),
            ("gscm.w_r", &mut self.w_r),
            ("gscm.w_d", &mut self.w_d),
            ("gscm.w_o", &mut self.w_o),
            ("gscm.w_go", &mut self.w_go),
            ("gscm.w_c", &mut self.w_c),
        ]
    }

    fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 {
            return Err(Error::EmptyDimension(vec![h, w]));
        }
        if h > self.max_h || w > self.max_w {
            return Err(Error::Shape(format!(
                "grid {h}x{w} exceeds bias table {}x{}",
                self.max_h, self.max_w
            )));
        }
        Ok(())
    }
}

/// Graph handles for [`GscmParams`], in `named()` order.
#[derive(Clone, Copy, Debug)]
pub struct GscmVars {
    pub w_q: Var,
    pub w_k: Var,
    pub b_rel: Var,
    pub w_pi: Var,
    pub w_gamma: Var,
    pub conv: Var,
    pub w_gd: Var,
    pub w_r: Var,
    pub w_d: Var,
    pub w_o: Var,
    pub w_go: Var,
    pub w_c: Var,
}

impl GscmVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_q: v[0],
            w_k: v[1],
            b_rel: v[2],
            w_pi: v[3],
            w_gamma: v[4],
            conv: v[5],
            w_gd: v[6],
            w_r: v[7],
            w_d: v[8],
            w_o: v[9],
            w_go: v[10],
            w_c: v[11],
        }
    }

    pub fn constants<T: Scalar>(g: &mut Graph<T>, p: &GscmParams<T>) -> Self {
        let v: Vec<Var> = p.named().into_iter().map(|(_, t)| g.constant(t.clone())).collect();
        Self::from_slice(&v)
    }
}

/// Bias-table index of the offset `p_i - p_j`.
pub fn relative_bucket(pi: Position, pj: Position, max_h: usize, max_w: usize) -> usize {
    let dy = pi.1 - pj.1 + max_h as i64 - 1;
    let dx = pi.0 - pj.0 + max_w as i64 - 1;
    dy as usize * (2 * max_w - 1) + dx as usize
}

/// `rho(p) = (x / W, y / H, x y / (W H), 1)`.
pub fn coordinate_features<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let pos = grid_positions(h, w);
    let (fh, fw) = (h as f64, w as f64);
    Tensor::from_fn(&[h * w, 4], |i| {
        let (x, y) = (pos[i / 4].0 as f64, pos[i / 4].1 as f64);
        T::lit(match i % 4 {
            0 => x / fw,
            1 => y / fh,
            2 => x * y / (fw * fh),
            _ => 1.0,
        })
    })
}

/// Gather maps that depend only on grid size.
#[derive(Clone, Debug)]
pub struct GridTables<T> {
    pub h: usize,
    pub w: usize,
    /// `[T * T]` bias-table indices.
    pub buckets: Arc<Vec<usize>>,
    /// `[T, 9 C]` im2col indices into a `[T, C]` token matrix.
    pub im2col: Arc<Vec<usize>>,
    pub coords: Arc<Tensor<T>>,
}

impl<T: Scalar> GridTables<T> {
    pub fn new(h: usize, w: usize, channels: usize, max_h: usize, max_w: usize) -> Self {
        let pos = grid_positions(h, w);
        let buckets = pos
            .iter()
            .flat_map(|&pi| pos.iter().map(move |&pj| relative_bucket(pi, pj, max_h, max_w)))
            .collect();
        let c = channels;
        let mut im2col = Vec::with_capacity(h * w * 9 * c);
        for &(x, y) in &pos {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (sx, sy) = (x + dx, y + dy);
                    let inside = sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h;
                    if inside {
                        let src = sy as usize * w + sx as usize;
                        im2col.extend((0..c).map(|ci| src * c + ci));
                    } else {
                        im2col.extend(std::iter::repeat_n(GATHER_ZERO, c));
                    }
                }
            }
        }
        Self {
            h,
            w,
            buckets: Arc::new(buckets),
            im2col: Arc::new(im2col),
            coords: Arc::new(coordinate_features(h, w)),
        }
    }
}

fn affinity_graph<T: Scalar>(g: &mut Graph<T>, xt: Var, p: &GscmVars, tables: &GridTables<T>) -> Var {
    let t = g.value(xt).rows();
    let r = g.value(p.w_q).cols();
    let q = g.matmul(xt, p.w_q);
    let k = g.matmul(xt, p.w_k);
    let kt = g.transpose(k);
    let qk = g.matmul(q, kt);
    let scaled = g.scale(qk, T::one() / T::lit(r as f64).sqrt());
    let bias = g.gather(p.b_rel, tables.buckets.clone(), &[t, t]);
    let logits = g.add(scaled, bias);
    g.softmax_rows(logits)
}

fn modulation_graph<T: Scalar>(g: &mut Graph<T>, xt: Var, p: &GscmVars) -> Var {
    let pre = g.matmul(xt, p.w_pi);
    let pi = g.sigmoid(pre);
    let scaled = g.mul(pi, xt);
    let gamma = g.matmul(xt, p.w_gamma);
    g.add(scaled, gamma)
}

/// DMU over all tokens; returns `W_o (u * SiLU(v + m))` rows.
fn dmu_graph<T: Scalar>(g: &mut Graph<T>, u: Var, v: Var, p: &GscmVars, force_gate: Option<f64>) -> Var {
    let gate = match force_gate {
        Some(val) => {
            let shape = g.value(v).shape().to_vec();
            g.constant(Tensor::full(&shape, T::lit(val)))
        }
        None => {
            let pre = g.matmul(v, p.w_gd);
            g.sigmoid(pre)
        }
    };
    let rpre = g.matmul(v, p.w_r);
    let r = g.sigmoid(rpre);
    let rv = g.mul(r, v);
    let dpre = g.matmul(rv, p.w_d);
    let fresh = g.tanh(dpre);
    let m = g.gated_scan(gate, fresh);
    let vm = g.add(v, m);
    let act = g.silu(vm);
    let coupled = g.mul(u, act);
    g.matmul(coupled, p.w_o)
}

fn fusion_graph<T: Scalar>(g: &mut Graph<T>, xt: Var, z: Var, p: &GscmVars, coords: &Tensor<T>) -> Var {
    let pre = g.matmul(xt, p.w_go);
    let gate = g.sigmoid(pre);
    let gated = g.mul(gate, z);
    let rho = g.constant(coords.clone());
    let coord = g.matmul(rho, p.w_c);
    g.add(gated, coord)
}

/// Full branch on graph handles.
pub fn gscm_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &GscmVars,
    opts: &GscmOptions,
    tables: &GridTables<T>,
) -> Var {
    let shape = g.value(x).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!((tables.h, tables.w), (h, w), "grid tables built for another grid");
    let xt = to_tokens(g, x);
    let s = affinity_graph(g, xt, p, tables);
    let modulated = modulation_graph(g, xt, p);
    let agg = g.matmul(s, modulated);
    let z = if opts.identity_activation { agg } else { g.silu(agg) };
    let cols = g.gather(xt, tables.im2col.clone(), &[h * w, 9 * c]);
    let kernel = g.reshape(p.conv, &[9 * c, c]);
    let u = g.matmul(cols, kernel);
    let dmu = dmu_graph(g, u, z, p, opts.force_gate);
    let y = fusion_graph(g, xt, dmu, p, &tables.coords);
    from_tokens(g, y, h, w)
}

fn check_tokens<T: Scalar>(x: &Tensor<T>, c: usize) -> Result<usize> {
    match *x.shape() {
        [t, cc] if cc == c && t > 0 => Ok(t),
        _ => Err(Error::Shape(format!("expected [T, {c}] tokens, got {:?}", x.shape()))),
    }
}

/// Row-stochastic affinity `softmax(X W_q (X W_k)^T / sqrt(r) + B_rel)` for
/// tokens of an `h x w` grid.
pub fn dynamic_affinity<T: Scalar>(x: &Tensor<T>, params: &GscmParams<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let t = check_tokens(x, params.channels())?;
    params.check_grid(h, w)?;
    if t != h * w {
        return Err(Error::Shape(format!("{t} tokens for a {h}x{w} grid")));
    }
    let tables = GridTables::new(h, w, params.channels(), params.max_h, params.max_w);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = GscmVars::constants(&mut g, params);
    let s = affinity_graph(&mut g, xv, &vars, &tables);
    Ok(g.value(s).clone())
}

/// `diag(sigmoid(W_pi x)) x + W_gamma x` for one token.
pub fn token_modulation<T: Scalar>(x_t: &[T], params: &GscmParams<T>) -> Result<Vec<T>> {
    let c = params.channels();
    if x_t.len() != c {
        return Err(Error::Shape(format!("token width {} vs {c} channels", x_t.len())));
    }
    let row = Tensor::new(vec![1, c], x_t.to_vec())?;
    let pi = row.matmul(&params.w_pi)?;
    let gamma = row.matmul(&params.w_gamma)?;
    Ok((0..c)
        .map(|k| pi.data()[k].sigmoid() * x_t[k] + gamma.data()[k])
        .collect())
}

/// `Z = act(S M)`, SiLU unless `identity_activation`.
pub fn aggregate<T: Scalar>(s: &Tensor<T>, modulated: &Tensor<T>, identity_activation: bool) -> Result<Tensor<T>> {
    if s.ndim() != 2 || modulated.ndim() != 2 || s.cols() != modulated.rows() {
        return Err(Error::Shape(format!(
            "S {:?} vs modulated {:?}",
            s.shape(),
            modulated.shape()
        )));
    }
    let z = s.matmul(modulated)?;
    Ok(if identity_activation { z } else { z.map(T::silu) })
}

/// One DMU step: returns `(W_o (u * SiLU(v + m)), m)` with
/// `m = g * s_prev + (1 - g) * tanh(W_d (r * v))`.
pub fn dmu_step<T: Scalar>(
    u: &[T],
    v: &[T],
    s_prev: &[T],
    params: &GscmParams<T>,
    force_gate: Option<f64>,
) -> Result<(Vec<T>, Vec<T>)> {
    let c = params.channels();
    if u.len() != c || v.len() != c || s_prev.len() != c {
        return Err(Error::Shape(format!(
            "dmu_step widths {}, {}, {} vs {c} channels",
            u.len(),
            v.len(),
            s_prev.len()
        )));
    }
    let vrow = Tensor::new(vec![1, c], v.to_vec())?;
    let gate: Vec<T> = match force_gate {
        Some(val) => vec![T::lit(val); c],
        None => vrow.matmul(&params.w_gd)?.data().iter().map(|&a| a.sigmoid()).collect(),
    };
    let r = vrow.matmul(&params.w_r)?;
    let rv = Tensor::new(vec![1, c], (0..c).map(|k| r.data()[k].sigmoid() * v[k]).collect())?;
    let fresh = rv.matmul(&params.w_d)?;
    let m: Vec<T> = (0..c)
        .map(|k| gate[k] * s_prev[k] + (T::one() - gate[k]) * fresh.data()[k].tanh())
        .collect();
    let coupled = Tensor::new(vec![1, c], (0..c).map(|k| u[k] * (v[k] + m[k]).silu()).collect())?;
    let out = coupled.matmul(&params.w_o)?;
    Ok((out.into_data(), m))
}

/// Runs [`dmu_step`] over token rows in order from `s = 0`.
pub fn dmu_scan<T: Scalar>(
    u: &Tensor<T>,
    v: &Tensor<T>,
    params: &GscmParams<T>,
    force_gate: Option<f64>,
) -> Result<Tensor<T>> {
    let c = params.channels();
    let t = check_tokens(v, c)?;
    if u.shape() != v.shape() {
        return Err(Error::Shape(format!("u {:?} vs v {:?}", u.shape(), v.shape())));
    }
    let mut s = vec![T::zero(); c];
    let mut out = Vec::with_capacity(t * c);
    for i in 0..t {
        let (o, m) = dmu_step(u.row(i), v.row(i), &s, params, force_gate)?;
        out.extend(o);
        s = m;
    }
    Tensor::new(vec![t, c], out)
}

/// `Y = sigmoid(X W_go) * Z + rho(p) W_c`.
pub fn output_fusion<T: Scalar>(
    x: &Tensor<T>,
    z: &Tensor<T>,
    positions: &[Position],
    grid: (usize, usize),
    params: &GscmParams<T>,
) -> Result<Tensor<T>> {
    let t = check_tokens(x, params.channels())?;
    if z.shape() != x.shape() || positions.len() != t {
        return Err(Error::Shape(format!(
            "fusion X {:?}, Z {:?}, {} positions",
            x.shape(),
            z.shape(),
            positions.len()
        )));
    }
    let (h, w) = grid;
    let all = coordinate_features::<T>(h, w);
    let coords = Tensor::from_fn(&[t, 4], |i| {
        let (px, py) = positions[i / 4];
        all.at(&[py as usize * w + px as usize, i % 4])
    });
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let zv = g.constant(z.clone());
    let vars = GscmVars::constants(&mut g, params);
    let y = fusion_graph(&mut g, xv, zv, &vars, &coords);
    Ok(g.value(y).clone())
}

/// Value-level forward pass of the branch.
pub fn gscm_forward<T: Scalar>(f_low: &Tensor<T>, params: &GscmParams<T>, opts: &GscmOptions) -> Result<Tensor<T>> {
    let [c, h, w] = *f_low.shape() else {
        return Err(Error::Shape(format!("expected [C, H, W], got {:?}", f_low.shape())));
    };
    if c != params.channels() {
        return Err(Error::Shape(format!(
            "parameters built for {} channels, input has {c}",
            params.channels()
        )));
    }
    params.check_grid(h, w)?;
    let tables = GridTables::new(h, w, c, params.max_h, params.max_w);
    let mut g = Graph::new();
    let x = g.constant(f_low.clone());
    let vars = GscmVars::constants(&mut g, params);
    let y = gscm_graph(&mut g, x, &vars, opts, &tables);
    Ok(g.value(y).clone())
}
