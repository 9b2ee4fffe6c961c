//! Finite-difference check of the analytic adapter gradients.
//!
//! The analytic side runs in `f32` exactly as training does. The reference is
//! a central difference of the same loss evaluated in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::{forward, AdapterWeights, MetaPathWeights, Mode};
use crate::error::Result;
use crate::graph::HeteroGraph;
use crate::loss::{total_loss, total_loss_value, LossConfig};
use crate::synth::{generate, SyntheticSpec};
use crate::tensor::{finite_diff_grad, Matrix};

/// Pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Central-difference step used for the `f64` reference.
pub const FD_EPS: f64 = 1e-4;
/// Gradients whose scale is below this are compared absolutely.
const SCALE_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub classes: usize,
    pub dim: usize,
    pub shots: usize,
    /// Relative error for `W^n`, `W^p`, `W^v`, worst over both loss settings.
    pub rel_err: [f64; 3],
}

impl GradCheckCase {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(GradCheckCase::max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= GRAD_TOLERANCE
    }
}

/// `max |a - n| / max(max |a|, max |n|)`: the worst entry error relative to
/// the gradient's overall scale.
pub fn relative_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs());
    let diff = analytic.max_abs_diff(numeric);
    if scale < SCALE_FLOOR {
        diff
    } else {
        diff / scale
    }
}

/// Compares analytic and numeric gradients of the full training loss on one instance.
pub fn check_instance(
    graph: &HeteroGraph<f32>,
    weights: &AdapterWeights<f32>,
    mp: &MetaPathWeights,
    loss: &LossConfig,
) -> Result<[f64; 3]> {
    let out = forward(graph, weights, mp, Mode::Train)?;
    let (_, lg) = total_loss(&graph.cache, &graph.labels, &out, &graph.labels, loss)?;
    let analytic = out.tape.backward(&lg.xp_tilde, &lg.cache_tilde)?.cast::<f64>();

    let g64 = graph.cast::<f64>();
    let w64 = weights.cast::<f64>();
    let eval = |w: &AdapterWeights<f64>| -> f64 {
        forward(&g64, w, mp, Mode::Train)
            .and_then(|o| total_loss_value(&g64.cache, &g64.labels, &o, &g64.labels, loss))
            .unwrap_or(f64::NAN)
    };
    let numeric = [
        finite_diff_grad(|m| eval(&AdapterWeights { wn: m.clone(), ..w64.clone() }), &w64.wn, FD_EPS)?,
        finite_diff_grad(|m| eval(&AdapterWeights { wp: m.clone(), ..w64.clone() }), &w64.wp, FD_EPS)?,
        finite_diff_grad(|m| eval(&AdapterWeights { wv: m.clone(), ..w64.clone() }), &w64.wv, FD_EPS)?,
    ];
    Ok([
        relative_error(&analytic.wn, &numeric[0]),
        relative_error(&analytic.wp, &numeric[1]),
        relative_error(&analytic.wv, &numeric[2]),
    ])
}

/// At the default temperature the cache head is usually saturated and the
/// `W^v` gradient vanishes, so every instance is also checked at this softer
/// setting where all three matrices receive gradient.
pub const SOFT_LOSS: LossConfig = LossConfig {
    tau: 1.0,
    lambda: 1.0,
    sharpness: 1.0,
};

/// Runs `n` random instances (C in 2..=6, d in 4..=32, K in 1..=4), each at
/// the default loss settings and at [`SOFT_LOSS`]; errors are the worst of both.
pub fn run_suite(seed: u64, n: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n);
    for _ in 0..n {
        let classes = rng.random_range(2..=6);
        let dim = rng.random_range(4..=32);
        let shots = rng.random_range(1..=4);
        let task = generate(&SyntheticSpec {
            classes,
            shots,
            dim,
            test_per_class: 1,
            seed: rng.random(),
            ..SyntheticSpec::default()
        })?;
        let graph = task.graph()?;
        let weights = AdapterWeights::gaussian(dim, 0.3, rng.random());
        let mut rel_err = [0.0; 3];
        for loss in [LossConfig::default(), SOFT_LOSS] {
            let errs = check_instance(&graph, &weights, &MetaPathWeights::default(), &loss)?;
            for (acc, e) in rel_err.iter_mut().zip(errs) {
                *acc = f64::max(*acc, e);
            }
        }
        cases.push(GradCheckCase {
            classes,
            dim,
            shots,
            rel_err,
        });
    }
    Ok(GradCheckReport { seed, cases })
}
