//! Seeded synthetic few-shot tasks and an independent scalar-loop oracle of
//! the adapter forward pass.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`, which yields
//! identical streams on every platform.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterWeights, MetaPathWeights, Mode};
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::io::{group_nodes, write_hgaf, TaskManifest, NEGATIVE_TEMPLATE};
use crate::tensor::{row_l2_normalize, Matrix, Real};
use crate::train::TestSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub shots: usize,
    pub dim: usize,
    pub test_per_class: usize,
    /// Per-coordinate standard deviation of the Gaussian offset added to a
    /// class center for each image, before renormalizing.
    pub cluster_spread: f64,
    /// Per-coordinate standard deviation of the offset added to each prompt.
    pub prompt_noise: f64,
    /// Weight of `-center` in the negative prompt.
    pub negative_flip: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            shots: 16,
            dim: 64,
            test_per_class: 50,
            cluster_spread: 0.35,
            prompt_noise: 0.35,
            negative_flip: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// The reference task used by the acceptance suite.
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Spec(format!("dim must be at least 2, got {}", self.dim)));
        }
        if self.classes < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.shots == 0 || self.test_per_class == 0 {
            return Err(Error::Spec("shots and test_per_class must be at least 1".into()));
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("prompt_noise", self.prompt_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Spec(format!("{name} must be finite and nonnegative")));
            }
        }
        if !self.negative_flip.is_finite() {
            return Err(Error::Spec("negative_flip must be finite".into()));
        }
        if self.negative_flip == 0.0 && self.prompt_noise == 0.0 {
            return Err(Error::Spec(
                "negative prompts would be zero vectors (negative_flip = prompt_noise = 0)".into(),
            ));
        }
        Ok(())
    }
}

/// An in-memory task equivalent to what a manifest on disk describes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub class_names: Vec<String>,
    pub positive: Matrix<f32>,
    pub negative: Matrix<f32>,
    pub cache: Matrix<f32>,
    pub cache_labels: Vec<usize>,
    pub test: Matrix<f32>,
    pub test_labels: Vec<usize>,
    pub shots: usize,
    pub tau: f64,
}

struct Sampler {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Sampler {
    fn gaussian(&mut self) -> Vec<f64> {
        (0..self.dim)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect()
    }

    /// `base + scale · g` for a fresh standard Gaussian `g`.
    fn perturb(&mut self, base: &[f64], scale: f64) -> Vec<f64> {
        let g = self.gaussian();
        base.iter().zip(g).map(|(&b, g)| b + scale * g).collect()
    }
}

fn unit(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(Error::Spec("sampled a zero vector".into()));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn class_centers(sampler: &mut Sampler, classes: usize) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let orthogonalize = sampler.dim >= classes;
    while centers.len() < classes {
        let mut v = sampler.gaussian();
        if orthogonalize {
            for c in &centers {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= p * y;
                }
            }
        }
        // Redraw the (measure-zero) degenerate case.
        if let Ok(u) = unit(v) {
            centers.push(u);
        }
    }
    Ok(centers)
}

fn to_matrix(rows: Vec<Vec<f64>>, dim: usize) -> Matrix<f32> {
    let n = rows.len();
    let data = rows.into_iter().flatten().map(|x| x as f32).collect();
    Matrix::from_vec(n, dim, data).expect("rows have width dim")
}

/// Draws a task: near-orthogonal class centers, noisy samples around them,
/// noisy positive prompts and partly anti-aligned negative prompts.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let d = spec.dim;
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        dim: d,
    };
    let centers = class_centers(&mut sampler, spec.classes)?;

    let draw_samples = |per_class: usize, sampler: &mut Sampler| -> Result<_> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                rows.push(unit(sampler.perturb(center, spec.cluster_spread))?);
                labels.push(c);
            }
        }
        Ok((rows, labels))
    };
    let (cache, cache_labels) = draw_samples(spec.shots, &mut sampler)?;
    let (test, test_labels) = draw_samples(spec.test_per_class, &mut sampler)?;

    let mut positive = Vec::with_capacity(spec.classes);
    let mut negative = Vec::with_capacity(spec.classes);
    for center in &centers {
        positive.push(unit(sampler.perturb(center, spec.prompt_noise))?);
        let flipped: Vec<f64> = center.iter().map(|x| -spec.negative_flip * x).collect();
        negative.push(unit(sampler.perturb(&flipped, spec.prompt_noise))?);
    }

    Ok(SyntheticTask {
        class_names: (0..spec.classes).map(|c| format!("class_{c:03}")).collect(),
        positive: to_matrix(positive, d),
        negative: to_matrix(negative, d),
        cache: to_matrix(cache, d),
        cache_labels,
        test: to_matrix(test, d),
        test_labels,
        shots: spec.shots,
        tau: crate::loss::LossConfig::default().tau,
    })
}

impl SyntheticTask {
    pub fn graph(&self) -> Result<HeteroGraph<f32>> {
        let c = self.class_names.len();
        let xp = group_nodes(&self.positive, &vec![self.positive.rows() / c; c])?;
        let xn = group_nodes(&self.negative, &vec![self.negative.rows() / c; c])?;
        HeteroGraph::new(xp, Some(xn), self.cache.clone(), self.cache_labels.clone())
    }

    pub fn test_set(&self) -> Result<TestSet> {
        TestSet::new(row_l2_normalize(&self.test)?, self.test_labels.clone())
    }

    /// Writes HGAF files plus a `task.toml` manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("positive.hgaf", &self.positive),
            ("negative.hgaf", &self.negative),
            ("cache.hgaf", &self.cache),
            ("test.hgaf", &self.test),
        ];
        for (name, m) in files {
            write_hgaf(m, &dir.join(name))?;
        }
        let manifest = TaskManifest {
            classes: self.class_names.clone(),
            shots: self.shots,
            tau: self.tau,
            positive_prompts: "positive.hgaf".into(),
            positive_counts: None,
            negative_prompts: Some("negative.hgaf".into()),
            negative_counts: None,
            negative_template: Some(NEGATIVE_TEMPLATE.into()),
            cache: "cache.hgaf".into(),
            cache_labels: self.cache_labels.clone(),
            test: Some("test.hgaf".into()),
            test_labels: Some(self.test_labels.clone()),
            hyper: Default::default(),
        };
        let path = dir.join("task.toml");
        manifest.save(&path)?;
        Ok(path)
    }
}

/// Output of [`oracle_forward`], always in `f64`.
#[derive(Clone, Debug)]
pub struct OracleOutput {
    pub xp_tilde: Vec<Vec<f64>>,
    pub xn_tilde: Vec<Vec<f64>>,
    pub cache_tilde: Vec<Vec<f64>>,
}

fn rows_of<T: Real>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    m.iter_rows()
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `σ( [self]·(x_i W)/(d_i+1) + Σ_j r_ij/√((d_i+1)(d_j+1)) · (x_j W) )`,
/// one node and one output coordinate at a time.
#[allow(clippy::needless_range_loop)]
fn oracle_message(
    i: usize,
    x_self: &[Vec<f64>],
    x_src: &[Vec<f64>],
    r: &[Vec<f64>],
    w: &[Vec<f64>],
    include_self: bool,
) -> Vec<f64> {
    let c = r.len();
    let d = w.len();
    let mut deg_i = 0.0;
    for j in 0..c {
        deg_i += r[i][j].abs();
    }
    let mut out = vec![0.0; d];
    for (col, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        if include_self {
            let mut proj = 0.0;
            for k in 0..d {
                proj += x_self[i][k] * w[k][col];
            }
            acc += proj / (deg_i + 1.0);
        }
        for j in 0..c {
            if r[i][j] == 0.0 {
                continue;
            }
            let mut deg_j = 0.0;
            for row in r.iter() {
                deg_j += row[j].abs();
            }
            let mut proj = 0.0;
            for k in 0..d {
                proj += x_src[j][k] * w[k][col];
            }
            acc += r[i][j] / ((deg_i + 1.0) * (deg_j + 1.0)).sqrt() * proj;
        }
        *o = if acc > 0.0 { acc } else { 0.0 };
    }
    out
}

/// Unoptimized transcription of the full three-stage forward pass.
///
/// Shares no code with the production path: relations, degrees and every
/// aggregation are recomputed here with per-entry loops.
#[allow(clippy::needless_range_loop)]
pub fn oracle_forward<T: Real>(
    graph: &HeteroGraph<T>,
    weights: &AdapterWeights<T>,
    mp: &MetaPathWeights,
    mode: Mode,
) -> Result<OracleOutput> {
    let xn_mat = graph.xn().ok_or(Error::MissingNegatives)?;
    let xp = rows_of(&graph.xp);
    let xn = rows_of(xn_mat);
    let xv = rows_of(&graph.xv);
    let cache = rows_of(&graph.cache);
    let (wn, wp, wv) = (rows_of(&weights.wn), rows_of(&weights.wp), rows_of(&weights.wv));
    let c = xp.len();
    let d = xp[0].len();

    let mut r_pn = vec![vec![0.0; c]; c];
    let mut r_vn = vec![vec![0.0; c]; c];
    let mut r_np = vec![vec![0.0; c]; c];
    let mut r_pp = vec![vec![0.0; c]; c];
    let mut r_vp = vec![vec![0.0; c]; c];
    let mut r_vv = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            if i == j {
                r_pn[i][i] = -cosine(&xp[i], &xn[i]);
                r_vn[i][i] = -cosine(&xv[i], &xn[i]);
                r_np[i][i] = -cosine(&xn[i], &xp[i]);
            } else {
                r_pn[i][j] = cosine(&xp[j], &xn[i]);
                r_vn[i][j] = cosine(&xv[j], &xn[i]);
                r_pp[i][j] = cosine(&xp[i], &xp[j]);
                r_vv[i][j] = cosine(&xv[i], &xv[j]);
            }
            r_vp[i][j] = cosine(&xp[i], &xv[j]);
        }
    }

    let mut xn_tilde = xn.clone();
    for i in 0..c {
        let m_pn = oracle_message(i, &xn, &xp, &r_pn, &wn, true);
        let m_vn = oracle_message(i, &xn, &xv, &r_vn, &wn, true);
        for k in 0..d {
            xn_tilde[i][k] += mp.beta_pn * m_pn[k] + mp.beta_vn * m_vn[k];
        }
    }

    let alpha_np = match mode {
        Mode::Train => mp.alpha_np_train,
        Mode::Test => mp.alpha_np_test,
    };
    let mut xp_tilde = xp.clone();
    for i in 0..c {
        let m_pp = oracle_message(i, &xp, &xp, &r_pp, &wp, true);
        let m_vp = oracle_message(i, &xp, &xv, &r_vp, &wp, true);
        let m_np = oracle_message(i, &xp, &xn_tilde, &r_np, &wp, true);
        for k in 0..d {
            xp_tilde[i][k] += mp.alpha_pp * m_pp[k] + mp.alpha_vp * m_vp[k] + alpha_np * m_np[k];
        }
    }

    let mut cache_tilde = cache.clone();
    for (s, row) in cache_tilde.iter_mut().enumerate() {
        let bias = oracle_message(graph.labels[s], &xv, &xv, &r_vv, &wv, false);
        for k in 0..d {
            row[k] += mp.gamma * bias[k];
        }
    }

    Ok(OracleOutput {
        xp_tilde,
        xn_tilde,
        cache_tilde,
    })
}

/// Largest entrywise gap between an oracle matrix and a production matrix.
pub fn max_deviation<T: Real>(oracle: &[Vec<f64>], production: &Matrix<T>) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in oracle.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max((v - production.get(i, j).as_f64()).abs());
        }
    }
    worst
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::adapter::forward;
    use crate::train::evaluate_zero_shot;

    #[test]
    fn rejects_degenerate_specs() {
        let spec = SyntheticSpec {
            dim: 1,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn noiseless_task_is_solved_zero_shot() {
        let spec = SyntheticSpec {
            classes: 5,
            shots: 2,
            dim: 16,
            cluster_spread: 0.0,
            prompt_noise: 0.0,
            ..SyntheticSpec::default()
        };
        let task = generate(&spec).unwrap();
        let g = task.graph().unwrap();
        let acc = evaluate_zero_shot(&g, &task.test_set().unwrap()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn full_flip_gives_unit_positive_to_negative_weight() {
        let spec = SyntheticSpec {
            classes: 4,
            shots: 1,
            dim: 8,
            prompt_noise: 0.0,
            negative_flip: 1.0,
            ..SyntheticSpec::default()
        };
        let g = generate(&spec).unwrap().graph().unwrap();
        let neg = g.negative.as_ref().unwrap();
        for i in 0..4 {
            assert!((neg.pos_to_neg.weights.get(i, i) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            classes: 3,
            shots: 2,
            dim: 8,
            seed: 99,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticSpec { seed: 100, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn generated_graphs_satisfy_invariants() {
        for seed in 0..5 {
            let spec = SyntheticSpec {
                classes: 3 + seed as usize,
                shots: 1 + seed as usize % 3,
                dim: 4 + 3 * seed as usize,
                seed,
                ..SyntheticSpec::default()
            };
            let g = generate(&spec).unwrap().graph().unwrap();
            g.validate().unwrap();
        }
    }

    #[test]
    fn oracle_identity_and_permutation() {
        let spec = SyntheticSpec {
            classes: 4,
            shots: 2,
            dim: 6,
            seed: 4,
            ..SyntheticSpec::default()
        };
        let task = generate(&spec).unwrap();
        let g = task.graph().unwrap();
        let mp = MetaPathWeights::default();
        let zero = oracle_forward(&g, &AdapterWeights::zeros(6), &mp, Mode::Train).unwrap();
        assert_eq!(max_deviation(&zero.xp_tilde, &g.xp), 0.0);
        assert_eq!(max_deviation(&zero.cache_tilde, &g.cache), 0.0);

        let w = AdapterWeights::gaussian(6, 0.4, 1);
        let base = oracle_forward(&g, &w, &mp, Mode::Test).unwrap();
        let prod = forward(&g, &w, &mp, Mode::Test).unwrap();
        assert!(max_deviation(&base.xp_tilde, &prod.xp_tilde) < 1e-5);

        // Reverse the class order everywhere.
        let perm: Vec<usize> = (0..4).rev().collect();
        let xp = g.xp.select_rows(&perm);
        let xn = g.xn().unwrap().select_rows(&perm);
        let labels: Vec<usize> = g.labels.iter().map(|&l| 3 - l).collect();
        let pg = HeteroGraph::new(xp, Some(xn), g.cache.clone(), labels).unwrap();
        let permuted = oracle_forward(&pg, &w, &mp, Mode::Test).unwrap();
        for i in 0..4 {
            for k in 0..6 {
                assert!((permuted.xp_tilde[i][k] - base.xp_tilde[perm[i]][k]).abs() < 1e-5);
            }
        }
        for s in 0..8 {
            for k in 0..6 {
                assert!((permuted.cache_tilde[s][k] - base.cache_tilde[s][k]).abs() < 1e-5);
            }
        }
    }
}
