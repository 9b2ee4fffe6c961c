//! Three-stage meta-path message passing and its reverse-mode gradients.
//!
//! Stages run in a fixed order: negative text nodes aggregate from positive
//! and visual nodes, positive text nodes then aggregate from positive,
//! visual and the refined negative nodes, and finally a per-class visual
//! bias is aggregated over visual neighbors and added to every cache row of
//! that class.
//!
//! Features are row vectors, so a projection is written `x W`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, RelationMatrix};
use crate::tensor::{relu, Matrix, Real};

/// The three trainable projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights<T = f32> {
    pub wn: Matrix<T>,
    pub wp: Matrix<T>,
    pub wv: Matrix<T>,
}

impl<T: Real> AdapterWeights<T> {
    pub fn zeros(dim: usize) -> Self {
        AdapterWeights {
            wn: Matrix::zeros(dim, dim),
            wp: Matrix::zeros(dim, dim),
            wv: Matrix::zeros(dim, dim),
        }
    }

    /// Zero-mean Gaussian entries with standard deviation `std`.
    pub fn gaussian(dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let mut draw = || Matrix::from_fn(dim, dim, |_, _| T::lit(normal.sample(&mut rng)));
        let wn = draw();
        let wp = draw();
        let wv = draw();
        AdapterWeights { wn, wp, wv }
    }

    pub fn dim(&self) -> usize {
        self.wp.rows()
    }

    pub fn cast<U: Real>(&self) -> AdapterWeights<U> {
        AdapterWeights {
            wn: self.wn.cast(),
            wp: self.wp.cast(),
            wv: self.wv.cast(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix<T>> {
        [&self.wn, &self.wp, &self.wv].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        [&mut self.wn, &mut self.wp, &mut self.wv].into_iter()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        for w in self.iter() {
            if w.shape() != (dim, dim) {
                return Err(Error::dims(
                    "adapter weights",
                    format!("{dim}x{dim}"),
                    format!("{}x{}", w.rows(), w.cols()),
                ));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite("adapter weights"));
            }
        }
        Ok(())
    }
}

/// Gradients with respect to [`AdapterWeights`].
pub type AdapterGrads<T = f32> = AdapterWeights<T>;

/// Fixed fusion weights of every meta-path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaPathWeights {
    pub beta_pn: f64,
    pub beta_vn: f64,
    pub alpha_pp: f64,
    pub alpha_vp: f64,
    pub alpha_np_train: f64,
    pub alpha_np_test: f64,
    pub gamma: f64,
}

impl Default for MetaPathWeights {
    fn default() -> Self {
        MetaPathWeights {
            beta_pn: 0.2,
            beta_vn: 0.2,
            alpha_pp: 0.06,
            alpha_vp: 0.24,
            alpha_np_train: 0.2,
            alpha_np_test: 0.1,
            gamma: 0.1,
        }
    }
}

impl MetaPathWeights {
    pub fn alpha_np(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Train => self.alpha_np_train,
            Mode::Test => self.alpha_np_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("beta_pn", self.beta_pn),
            ("beta_vn", self.beta_vn),
            ("alpha_pp", self.alpha_pp),
            ("alpha_vp", self.alpha_vp),
            ("alpha_np_train", self.alpha_np_train),
            ("alpha_np_test", self.alpha_np_test),
            ("gamma", self.gamma),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

/// Which stages run. All on is the complete adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub negative: bool,
    pub positive: bool,
    pub visual: bool,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            negative: true,
            positive: true,
            visual: true,
        }
    }
}

impl StagePlan {
    pub const NONE: StagePlan = StagePlan {
        negative: false,
        positive: false,
        visual: false,
    };
}

/// Intermediates of one meta-path aggregation.
#[derive(Clone, Debug)]
struct PathTape<T> {
    coef: T,
    /// `S x_self + N x_src`, the pre-projection mixture.
    mixed: Matrix<T>,
    /// `mixed · W`, before the activation.
    pre: Matrix<T>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape<T = f32> {
    classes: usize,
    dim: usize,
    cache_rows: usize,
    wp: Matrix<T>,
    neg_pos: Option<PathTape<T>>,
    neg_vis: Option<PathTape<T>>,
    pos_pos: Option<PathTape<T>>,
    pos_vis: Option<PathTape<T>>,
    pos_neg: Option<PathTape<T>>,
    /// Normalized n->p adjacency, kept when the n->p path feeds a trained negative stage.
    neg_to_pos_adj: Option<Matrix<T>>,
    visual: Option<PathTape<T>>,
    labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AdapterOutput<T = f32> {
    pub xp_tilde: Matrix<T>,
    pub xn_tilde: Option<Matrix<T>>,
    pub cache_tilde: Matrix<T>,
    /// Per-class visual bias `m^bias` (zero when the visual stage is off).
    pub visual_bias: Matrix<T>,
    pub tape: ForwardTape<T>,
}

fn aggregate_taped<T: Real>(
    x_self: &Matrix<T>,
    x_src: &Matrix<T>,
    rel: &RelationMatrix<T>,
    w: &Matrix<T>,
    include_self: bool,
    coef: T,
) -> Result<(Matrix<T>, PathTape<T>)> {
    let c = rel.weights.rows();
    let d = w.rows();
    if x_src.shape() != (rel.weights.cols(), d)
        || x_self.shape() != (c, d)
        || w.cols() != d
    {
        return Err(Error::dims(
            "aggregate_meta_path",
            format!("{c}x{d} features and {d}x{d} projection"),
            format!(
                "self {:?}, src {:?}, W {:?}, R {:?}",
                x_self.shape(),
                x_src.shape(),
                w.shape(),
                rel.weights.shape()
            ),
        ));
    }
    let mut mixed = rel.normalized().matmul(x_src)?;
    if include_self {
        for (i, s) in rel.self_scale().into_iter().enumerate() {
            for (m, &x) in mixed.row_mut(i).iter_mut().zip(x_self.row(i)) {
                *m = *m + s * x;
            }
        }
    }
    let pre = mixed.matmul(w)?;
    let out = pre.map(relu);
    Ok((out, PathTape { coef, mixed, pre }))
}

/// One meta-path aggregation:
/// `σ( [self]·(x_i W)/(d_i+1) + Σ_j r_ij/√((d_i+1)(d_j+1)) · (x_j W) )` per row.
pub fn aggregate_meta_path<T: Real>(
    x_dest_self: &Matrix<T>,
    x_src: &Matrix<T>,
    rel: &RelationMatrix<T>,
    w: &Matrix<T>,
    include_self: bool,
) -> Result<Matrix<T>> {
    aggregate_taped(x_dest_self, x_src, rel, w, include_self, T::one()).map(|(out, _)| out)
}

fn residual<T: Real>(base: &Matrix<T>, parts: &[(&Matrix<T>, T)]) -> Result<Matrix<T>> {
    let mut out = base.clone();
    for (m, coef) in parts {
        if *coef != T::zero() {
            out.add_scaled(m, *coef)?;
        }
    }
    Ok(out)
}

fn negative_stage_taped<T: Real>(
    graph: &HeteroGraph<T>,
    wn: &Matrix<T>,
    beta_pn: T,
    beta_vn: T,
) -> Result<(Matrix<T>, PathTape<T>, PathTape<T>)> {
    let neg = graph.negative.as_ref().ok_or(Error::MissingNegatives)?;
    let xn = &neg.features;
    let (m_pn, t_pn) = aggregate_taped(xn, &graph.xp, &neg.pos_to_neg, wn, true, beta_pn)?;
    let (m_vn, t_vn) = aggregate_taped(xn, &graph.xv, &neg.vis_to_neg, wn, true, beta_vn)?;
    let out = residual(xn, &[(&m_pn, beta_pn), (&m_vn, beta_vn)])?;
    Ok((out, t_pn, t_vn))
}

/// `X̃n = Xn + β_pn M^{p→n} + β_vn M^{v→n}`.
pub fn negative_stage<T: Real>(
    graph: &HeteroGraph<T>,
    wn: &Matrix<T>,
    beta_pn: T,
    beta_vn: T,
) -> Result<Matrix<T>> {
    negative_stage_taped(graph, wn, beta_pn, beta_vn).map(|(out, _, _)| out)
}

type PositiveTapes<T> = (Matrix<T>, PathTape<T>, PathTape<T>, Option<PathTape<T>>);

fn positive_stage_taped<T: Real>(
    graph: &HeteroGraph<T>,
    xn_tilde: Option<&Matrix<T>>,
    wp: &Matrix<T>,
    alpha_pp: T,
    alpha_vp: T,
    alpha_np: T,
) -> Result<PositiveTapes<T>> {
    let xp = &graph.xp;
    let (m_pp, t_pp) = aggregate_taped(xp, xp, &graph.pos_to_pos, wp, true, alpha_pp)?;
    let (m_vp, t_vp) = aggregate_taped(xp, &graph.xv, &graph.vis_to_pos, wp, true, alpha_vp)?;
    let mut parts = vec![(&m_pp, alpha_pp), (&m_vp, alpha_vp)];
    let np = if alpha_np != T::zero() {
        let neg = graph.negative.as_ref().ok_or(Error::MissingNegatives)?;
        let xn = xn_tilde.unwrap_or(&neg.features);
        Some(aggregate_taped(xp, xn, &neg.neg_to_pos, wp, true, alpha_np)?)
    } else {
        None
    };
    if let Some((m_np, _)) = &np {
        parts.push((m_np, alpha_np));
    }
    let out = residual(xp, &parts)?;
    Ok((out, t_pp, t_vp, np.map(|(_, t)| t)))
}

/// `X̃p = Xp + α_pp M^{p→p} + α_vp M^{v→p} + α_np M^{n→p}`, with the n→p
/// sources taken from `xn_tilde` (the refined negative nodes).
pub fn positive_stage<T: Real>(
    graph: &HeteroGraph<T>,
    xn_tilde: Option<&Matrix<T>>,
    wp: &Matrix<T>,
    alpha_pp: T,
    alpha_vp: T,
    alpha_np: T,
) -> Result<Matrix<T>> {
    positive_stage_taped(graph, xn_tilde, wp, alpha_pp, alpha_vp, alpha_np).map(|t| t.0)
}

fn broadcast_bias<T: Real>(graph: &HeteroGraph<T>, bias: &Matrix<T>, gamma: T) -> Matrix<T> {
    let mut out = graph.cache.clone();
    if gamma == T::zero() {
        return out;
    }
    for (s, &label) in graph.labels.iter().enumerate() {
        for (x, &b) in out.row_mut(s).iter_mut().zip(bias.row(label)) {
            *x = *x + gamma * b;
        }
    }
    out
}

/// Adds `γ · m^bias_{label(s)}` to every cache row `s`.
pub fn visual_stage<T: Real>(graph: &HeteroGraph<T>, wv: &Matrix<T>, gamma: T) -> Result<Matrix<T>> {
    let (bias, _) = aggregate_taped(&graph.xv, &graph.xv, &graph.vis_to_vis, wv, false, gamma)?;
    Ok(broadcast_bias(graph, &bias, gamma))
}

/// Runs every stage.
pub fn forward<T: Real>(
    graph: &HeteroGraph<T>,
    weights: &AdapterWeights<T>,
    mp: &MetaPathWeights,
    mode: Mode,
) -> Result<AdapterOutput<T>> {
    forward_planned(graph, weights, mp, mode, StagePlan::default())
}

/// Runs the stages enabled in `plan`. Disabled stages pass their inputs through.
pub fn forward_planned<T: Real>(
    graph: &HeteroGraph<T>,
    weights: &AdapterWeights<T>,
    mp: &MetaPathWeights,
    mode: Mode,
    plan: StagePlan,
) -> Result<AdapterOutput<T>> {
    mp.validate()?;
    let (c, d) = graph.xp.shape();
    weights.validate(d)?;

    let (xn_tilde, neg_pos, neg_vis) = if plan.negative {
        let (x, a, b) =
            negative_stage_taped(graph, &weights.wn, T::lit(mp.beta_pn), T::lit(mp.beta_vn))?;
        (Some(x), Some(a), Some(b))
    } else {
        (graph.xn().cloned(), None, None)
    };

    let alpha_np = T::lit(mp.alpha_np(mode));
    let (xp_tilde, pos_pos, pos_vis, pos_neg) = if plan.positive {
        let (x, a, b, n) = positive_stage_taped(
            graph,
            xn_tilde.as_ref(),
            &weights.wp,
            T::lit(mp.alpha_pp),
            T::lit(mp.alpha_vp),
            alpha_np,
        )?;
        (x, Some(a), Some(b), n)
    } else {
        (graph.xp.clone(), None, None, None)
    };
    let neg_to_pos_adj = match (&pos_neg, plan.negative) {
        (Some(_), true) => graph.negative.as_ref().map(|n| n.neg_to_pos.normalized()),
        _ => None,
    };

    let gamma = T::lit(mp.gamma);
    let (cache_tilde, visual_bias, visual) = if plan.visual {
        let (bias, tape) =
            aggregate_taped(&graph.xv, &graph.xv, &graph.vis_to_vis, &weights.wv, false, gamma)?;
        (broadcast_bias(graph, &bias, gamma), bias, Some(tape))
    } else {
        (graph.cache.clone(), Matrix::zeros(c, d), None)
    };

    Ok(AdapterOutput {
        xp_tilde: xp_tilde.ensure_finite("positive stage")?,
        xn_tilde: xn_tilde.map(|x| x.ensure_finite("negative stage")).transpose()?,
        cache_tilde: cache_tilde.ensure_finite("visual stage")?,
        visual_bias,
        tape: ForwardTape {
            classes: c,
            dim: d,
            cache_rows: graph.cache.rows(),
            wp: weights.wp.clone(),
            neg_pos,
            neg_vis,
            pos_pos,
            pos_vis,
            pos_neg,
            neg_to_pos_adj,
            visual,
            labels: graph.labels.clone(),
        },
    })
}

/// Backpropagates one path: accumulates `dW` and returns `d(mixed)` when asked.
fn path_backward<T: Real>(
    tape: &PathTape<T>,
    upstream: &Matrix<T>,
    dw: &mut Matrix<T>,
    w: Option<&Matrix<T>>,
) -> Result<Option<Matrix<T>>> {
    let mut dpre = upstream.clone();
    for (g, &p) in dpre.as_mut_slice().iter_mut().zip(tape.pre.as_slice()) {
        *g = if p > T::zero() { *g * tape.coef } else { T::zero() };
    }
    dw.add_scaled(&tape.mixed.t_matmul(&dpre)?, T::one())?;
    w.map(|w| dpre.matmul_t(w)).transpose()
}

impl<T: Real> ForwardTape<T> {
    /// Exact gradients of a scalar loss given its partials with respect to
    /// `X̃p` and `X̃cache`.
    pub fn backward(
        &self,
        d_xp_tilde: &Matrix<T>,
        d_cache_tilde: &Matrix<T>,
    ) -> Result<AdapterGrads<T>> {
        let (c, d) = (self.classes, self.dim);
        if d_xp_tilde.shape() != (c, d) {
            return Err(Error::TapeMismatch(format!(
                "dXp is {:?}, forward produced {c}x{d}",
                d_xp_tilde.shape()
            )));
        }
        if d_cache_tilde.shape() != (self.cache_rows, d) {
            return Err(Error::TapeMismatch(format!(
                "dXcache is {:?}, forward produced {}x{d}",
                d_cache_tilde.shape(),
                self.cache_rows
            )));
        }
        let mut grads = AdapterGrads::zeros(d);

        for tape in [&self.pos_pos, &self.pos_vis].into_iter().flatten() {
            path_backward(tape, d_xp_tilde, &mut grads.wp, None)?;
        }
        if let Some(tape) = &self.pos_neg {
            let d_mixed = path_backward(tape, d_xp_tilde, &mut grads.wp, Some(&self.wp))?;
            if let (Some(d_mixed), Some(adj)) = (d_mixed, &self.neg_to_pos_adj) {
                let d_xn_tilde = adj.t_matmul(&d_mixed)?;
                for tape in [&self.neg_pos, &self.neg_vis].into_iter().flatten() {
                    path_backward(tape, &d_xn_tilde, &mut grads.wn, None)?;
                }
            }
        }

        if let Some(tape) = &self.visual {
            let mut d_bias = Matrix::zeros(c, d);
            for (s, &label) in self.labels.iter().enumerate() {
                for (acc, &g) in d_bias.row_mut(label).iter_mut().zip(d_cache_tilde.row(s)) {
                    *acc = *acc + g;
                }
            }
            path_backward(tape, &d_bias, &mut grads.wv, None)?;
        }
        Ok(grads)
    }
}

/// Convenience wrapper over [`ForwardTape::backward`].
pub fn backward<T: Real>(
    tape: &ForwardTape<T>,
    d_xp_tilde: &Matrix<T>,
    d_cache_tilde: &Matrix<T>,
) -> Result<AdapterGrads<T>> {
    tape.backward(d_xp_tilde, d_cache_tilde)
}
