//! Heterogeneous class graph over positive-text, negative-text and visual nodes.
//!
//! Every relation is stored as a dense `C x C` matrix whose row indexes the
//! destination node and whose column indexes the source node.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim_matrix, norm, row_l2_normalize, Matrix, Real};

/// Tolerance for the unit-norm checks on node features.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassManifest {
    pub class_names: Vec<String>,
    pub positive_prompt_counts: Vec<usize>,
    pub shots: usize,
}

impl ClassManifest {
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::manifest("classes", "at least two classes are required"));
        }
        if self.shots == 0 {
            return Err(Error::manifest("shots", "must be at least 1"));
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if !seen.insert(name) {
                return Err(Error::manifest("classes", format!("duplicate class `{name}`")));
            }
        }
        if self.positive_prompt_counts.len() != self.class_names.len() {
            return Err(Error::manifest(
                "positive_counts",
                format!(
                    "{} entries for {} classes",
                    self.positive_prompt_counts.len(),
                    self.class_names.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RelationKind {
    NegToPos,
    VisToPos,
    PosToPos,
    PosToNeg,
    VisToNeg,
    VisToVis,
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationKind::NegToPos => "n->p",
            RelationKind::VisToPos => "v->p",
            RelationKind::PosToPos => "p->p",
            RelationKind::PosToNeg => "p->n",
            RelationKind::VisToNeg => "v->n",
            RelationKind::VisToVis => "v->v",
        })
    }
}

/// Signed edge weights of one meta-path plus its absolute-weight degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix<T = f32> {
    pub kind: RelationKind,
    pub weights: Matrix<T>,
    /// `d_i = Σ_j |r_ij|` per destination row.
    pub dest_degrees: Vec<T>,
    /// `d_j = Σ_i |r_ij|` per source column.
    pub src_degrees: Vec<T>,
}

impl<T: Real> RelationMatrix<T> {
    pub fn new(kind: RelationKind, weights: Matrix<T>) -> Self {
        let (rows, cols) = weights.shape();
        let dest_degrees = (0..rows)
            .map(|i| weights.row(i).iter().map(|x| x.abs()).sum())
            .collect();
        let src_degrees = (0..cols)
            .map(|j| (0..rows).map(|i| weights.get(i, j).abs()).sum())
            .collect();
        RelationMatrix {
            kind,
            weights,
            dest_degrees,
            src_degrees,
        }
    }

    /// `r_ij / sqrt((d_i + 1)(d_j + 1))`.
    pub fn normalized(&self) -> Matrix<T> {
        let (rows, cols) = self.weights.shape();
        Matrix::from_fn(rows, cols, |i, j| {
            let r = self.weights.get(i, j);
            r / ((self.dest_degrees[i] + T::one()) * (self.src_degrees[j] + T::one())).sqrt()
        })
    }

    /// The self-term coefficients `1 / (d_i + 1)`.
    pub fn self_scale(&self) -> Vec<T> {
        self.dest_degrees.iter().map(|&d| T::one() / (d + T::one())).collect()
    }

    pub fn cast<U: Real>(&self) -> RelationMatrix<U> {
        RelationMatrix {
            kind: self.kind,
            weights: self.weights.cast(),
            dest_degrees: self.dest_degrees.iter().map(|x| U::lit(x.as_f64())).collect(),
            src_degrees: self.src_degrees.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// The six typed relations.
#[derive(Clone, Debug, PartialEq)]
pub struct Relations<T = f32> {
    pub neg_to_pos: RelationMatrix<T>,
    pub vis_to_pos: RelationMatrix<T>,
    pub pos_to_pos: RelationMatrix<T>,
    pub pos_to_neg: RelationMatrix<T>,
    pub vis_to_neg: RelationMatrix<T>,
    pub vis_to_vis: RelationMatrix<T>,
}

impl<T: Real> Relations<T> {
    pub fn iter(&self) -> impl Iterator<Item = &RelationMatrix<T>> {
        [
            &self.neg_to_pos,
            &self.vis_to_pos,
            &self.pos_to_pos,
            &self.pos_to_neg,
            &self.vis_to_neg,
            &self.vis_to_vis,
        ]
        .into_iter()
    }
}

/// Negative text nodes and the three relations that touch them.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeNodes<T = f32> {
    pub features: Matrix<T>,
    pub pos_to_neg: RelationMatrix<T>,
    pub vis_to_neg: RelationMatrix<T>,
    pub neg_to_pos: RelationMatrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph<T = f32> {
    pub xp: Matrix<T>,
    pub xv: Matrix<T>,
    pub cache: Matrix<T>,
    pub labels: Vec<usize>,
    pub onehot: Matrix<T>,
    pub shots: usize,
    pub pos_to_pos: RelationMatrix<T>,
    pub vis_to_pos: RelationMatrix<T>,
    pub vis_to_vis: RelationMatrix<T>,
    /// Absent when a task ships no negative prompts (only valid for variants
    /// that never touch the negative branch).
    pub negative: Option<NegativeNodes<T>>,
}

fn check_unit_rows<T: Real>(m: &Matrix<T>, context: &'static str) -> Result<()> {
    for (row, r) in m.iter_rows().enumerate() {
        let n = norm(r).as_f64();
        if (n - 1.0).abs() > UNIT_NORM_TOL || !n.is_finite() {
            return Err(Error::NonUnitRow { context, row, norm: n });
        }
    }
    Ok(())
}

fn zero_diagonal<T: Real>(mut m: Matrix<T>) -> Matrix<T> {
    for i in 0..m.rows().min(m.cols()) {
        m.set(i, i, T::zero());
    }
    m
}

fn negate_diagonal<T: Real>(mut m: Matrix<T>) -> Matrix<T> {
    for i in 0..m.rows().min(m.cols()) {
        let v = m.get(i, i);
        m.set(i, i, -v);
    }
    m
}

/// L2-normalized mean of the cache rows of each class.
pub fn class_mean_nodes<T: Real>(
    cache: &Matrix<T>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Matrix<T>> {
    if labels.len() != cache.rows() {
        return Err(Error::dims("class_mean_nodes labels", cache.rows(), labels.len()));
    }
    let mut sums = Matrix::zeros(num_classes, cache.cols());
    let mut counts = vec![0usize; num_classes];
    for (s, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::dims(
                "class_mean_nodes label",
                format!("< {num_classes}"),
                c,
            ));
        }
        counts[c] += 1;
        for (acc, &x) in sums.row_mut(c).iter_mut().zip(cache.row(s)) {
            *acc = *acc + x;
        }
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass {
            class,
            what: "cache samples",
        });
    }
    for (c, &n) in counts.iter().enumerate() {
        let inv = T::one() / T::lit(n as f64);
        for x in sums.row_mut(c) {
            *x = *x * inv;
        }
    }
    row_l2_normalize(&sums)
}

/// One node per class: the L2-normalized mean of that class's prompt embeddings.
pub fn prompt_nodes<T: Real>(per_class: &[Matrix<T>]) -> Result<Matrix<T>> {
    let dim = per_class.first().map_or(0, |m| m.cols());
    let mut out = Matrix::zeros(per_class.len(), dim);
    for (c, prompts) in per_class.iter().enumerate() {
        if prompts.rows() == 0 {
            return Err(Error::EmptyClass {
                class: c,
                what: "prompt embeddings",
            });
        }
        if prompts.cols() != dim {
            return Err(Error::dims("prompt_nodes embedding width", dim, prompts.cols()));
        }
        let inv = T::one() / T::lit(prompts.rows() as f64);
        let row = out.row_mut(c);
        for p in prompts.iter_rows() {
            for (acc, &x) in row.iter_mut().zip(p) {
                *acc = *acc + x;
            }
        }
        for x in row.iter_mut() {
            *x = *x * inv;
        }
    }
    row_l2_normalize(&out)
}

fn check_node_set<T: Real>(xp: &Matrix<T>, other: &Matrix<T>, context: &'static str) -> Result<()> {
    if other.shape() != xp.shape() {
        return Err(Error::dims(
            context,
            format!("{:?}", xp.shape()),
            format!("{:?}", other.shape()),
        ));
    }
    check_unit_rows(other, context)
}

fn positive_relations<T: Real>(
    xp: &Matrix<T>,
    xv: &Matrix<T>,
) -> Result<(RelationMatrix<T>, RelationMatrix<T>, RelationMatrix<T>)> {
    let pos_to_pos = zero_diagonal(cosine_sim_matrix(xp, xp)?);
    // The class's own visual node is a genuine neighbor of its positive node,
    // so only the same-type relations drop their diagonal.
    let vis_to_pos = cosine_sim_matrix(xp, xv)?;
    let vis_to_vis = zero_diagonal(cosine_sim_matrix(xv, xv)?);
    Ok((
        RelationMatrix::new(RelationKind::PosToPos, pos_to_pos),
        RelationMatrix::new(RelationKind::VisToPos, vis_to_pos),
        RelationMatrix::new(RelationKind::VisToVis, vis_to_vis),
    ))
}

fn negative_relations<T: Real>(
    xp: &Matrix<T>,
    xn: &Matrix<T>,
    xv: &Matrix<T>,
) -> Result<(RelationMatrix<T>, RelationMatrix<T>, RelationMatrix<T>)> {
    let pos_to_neg = negate_diagonal(cosine_sim_matrix(xn, xp)?);
    let vis_to_neg = negate_diagonal(cosine_sim_matrix(xn, xv)?);
    let cos_np = cosine_sim_matrix(xp, xn)?;
    let c = xp.rows();
    let neg_to_pos = Matrix::from_fn(c, c, |i, j| {
        if i == j {
            -cos_np.get(i, i)
        } else {
            T::zero()
        }
    });
    Ok((
        RelationMatrix::new(RelationKind::PosToNeg, pos_to_neg),
        RelationMatrix::new(RelationKind::VisToNeg, vis_to_neg),
        RelationMatrix::new(RelationKind::NegToPos, neg_to_pos),
    ))
}

/// Computes all six signed relations from unit-norm class nodes.
pub fn build_relations<T: Real>(
    xp: &Matrix<T>,
    xn: &Matrix<T>,
    xv: &Matrix<T>,
) -> Result<Relations<T>> {
    check_unit_rows(xp, "build_relations positive nodes")?;
    check_node_set(xp, xn, "build_relations negative nodes")?;
    check_node_set(xp, xv, "build_relations visual nodes")?;
    let (pos_to_pos, vis_to_pos, vis_to_vis) = positive_relations(xp, xv)?;
    let (pos_to_neg, vis_to_neg, neg_to_pos) = negative_relations(xp, xn, xv)?;
    Ok(Relations {
        neg_to_pos,
        vis_to_pos,
        pos_to_pos,
        pos_to_neg,
        vis_to_neg,
        vis_to_vis,
    })
}

impl<T: Real> HeteroGraph<T> {
    /// Builds the graph from class-level text nodes and the raw few-shot cache.
    ///
    /// Cache rows are L2-normalized here; `xp` and `xn` must already be
    /// unit-norm class nodes (see [`prompt_nodes`]).
    pub fn new(
        xp: Matrix<T>,
        xn: Option<Matrix<T>>,
        cache: Matrix<T>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let c = xp.rows();
        if c < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {c}")));
        }
        check_unit_rows(&xp, "positive nodes")?;
        if cache.cols() != xp.cols() {
            return Err(Error::dims("cache embedding width", xp.cols(), cache.cols()));
        }
        let cache = row_l2_normalize(&cache)?;
        let xv = class_mean_nodes(&cache, &labels, c)?;

        let mut counts = vec![0usize; c];
        for &l in &labels {
            counts[l] += 1;
        }
        let shots = counts[0];
        if let Some(class) = counts.iter().position(|&n| n != shots) {
            return Err(Error::Config(format!(
                "every class needs the same number of shots: class 0 has {shots}, class {class} has {}",
                counts[class]
            )));
        }

        let onehot = Matrix::from_fn(labels.len(), c, |s, k| {
            if labels[s] == k {
                T::one()
            } else {
                T::zero()
            }
        });
        let (pos_to_pos, vis_to_pos, vis_to_vis) = positive_relations(&xp, &xv)?;
        let negative = match xn {
            Some(xn) => {
                check_node_set(&xp, &xn, "negative nodes")?;
                let (pos_to_neg, vis_to_neg, neg_to_pos) = negative_relations(&xp, &xn, &xv)?;
                Some(NegativeNodes {
                    features: xn,
                    pos_to_neg,
                    vis_to_neg,
                    neg_to_pos,
                })
            }
            None => None,
        };
        Ok(HeteroGraph {
            xp,
            xv,
            cache,
            labels,
            onehot,
            shots,
            pos_to_pos,
            vis_to_pos,
            vis_to_vis,
            negative,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.xp.rows()
    }

    pub fn dim(&self) -> usize {
        self.xp.cols()
    }

    pub fn xn(&self) -> Option<&Matrix<T>> {
        self.negative.as_ref().map(|n| &n.features)
    }

    /// All six relations; `None` when the graph has no negative nodes.
    pub fn relations(&self) -> Option<Relations<T>> {
        let neg = self.negative.as_ref()?;
        Some(Relations {
            neg_to_pos: neg.neg_to_pos.clone(),
            vis_to_pos: self.vis_to_pos.clone(),
            pos_to_pos: self.pos_to_pos.clone(),
            pos_to_neg: neg.pos_to_neg.clone(),
            vis_to_neg: neg.vis_to_neg.clone(),
            vis_to_vis: self.vis_to_vis.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> HeteroGraph<U> {
        HeteroGraph {
            xp: self.xp.cast(),
            xv: self.xv.cast(),
            cache: self.cache.cast(),
            labels: self.labels.clone(),
            onehot: self.onehot.cast(),
            shots: self.shots,
            pos_to_pos: self.pos_to_pos.cast(),
            vis_to_pos: self.vis_to_pos.cast(),
            vis_to_vis: self.vis_to_vis.cast(),
            negative: self.negative.as_ref().map(|n| NegativeNodes {
                features: n.features.cast(),
                pos_to_neg: n.pos_to_neg.cast(),
                vis_to_neg: n.vis_to_neg.cast(),
                neg_to_pos: n.neg_to_pos.cast(),
            }),
        }
    }

    /// Checks every structural invariant of a built graph.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        check_unit_rows(&self.xp, "positive nodes")?;
        check_unit_rows(&self.xv, "visual nodes")?;
        check_unit_rows(&self.cache, "cache")?;
        if let Some(xn) = self.xn() {
            check_unit_rows(xn, "negative nodes")?;
        }
        if self.labels.len() != c * self.shots || self.onehot.shape() != (self.labels.len(), c) {
            return Err(Error::dims(
                "graph labels",
                c * self.shots,
                self.labels.len(),
            ));
        }
        let mut counts = vec![0usize; c];
        for (s, &l) in self.labels.iter().enumerate() {
            counts[l] += 1;
            let row = self.onehot.row(s);
            if row[l] != T::one() || row.iter().copied().sum::<T>() != T::one() {
                return Err(Error::Config(format!("one-hot row {s} is inconsistent")));
            }
        }
        if counts.iter().any(|&n| n != self.shots) {
            return Err(Error::Config("unbalanced class counts".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        row_l2_normalize(&m).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn class_means() {
        let cache = m(&[&[0.6, 0.8], &[1.0, 0.0]]);
        assert_eq!(class_mean_nodes(&cache, &[0, 1], 2).unwrap(), cache);

        let cache = m(&[&[0.6, 0.8], &[0.6, 0.8], &[0.0, 1.0], &[0.0, 1.0]]);
        let means = class_mean_nodes(&cache, &[0, 0, 1, 1], 2).unwrap();
        assert!(means.max_abs_diff(&m(&[&[0.6, 0.8], &[0.0, 1.0]])) < 1e-12);

        let means = class_mean_nodes(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 0], 1).unwrap();
        assert!((means.get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((means.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);

        let err = class_mean_nodes(&cache, &[0, 0, 0, 0], 2).unwrap_err();
        assert!(matches!(err, Error::EmptyClass { class: 1, .. }));
    }

    #[test]
    fn prompt_node_examples() {
        let a = m(&[&[3.0, 4.0]]);
        let b = m(&[&[0.0, 2.0]]);
        let nodes = prompt_nodes(&[a.clone(), b]).unwrap();
        assert!(nodes.max_abs_diff(&m(&[&[0.6, 0.8], &[0.0, 1.0]])) < 1e-12);

        let twice = m(&[&[0.6, 0.8], &[0.6, 0.8]]);
        assert!(prompt_nodes(&[twice]).unwrap().max_abs_diff(&m(&[&[0.6, 0.8]])) < 1e-12);

        let mixed = prompt_nodes(&[m(&[&[1.0, 0.0], &[0.0, 1.0]])]).unwrap();
        assert!((mixed.get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);

        assert!(matches!(
            prompt_nodes(&[a.clone(), Matrix::zeros(0, 2)]),
            Err(Error::EmptyClass { class: 1, .. })
        ));
        assert!(matches!(
            prompt_nodes(&[a, m(&[&[1.0, 0.0, 0.0]])]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn identical_positive_and_visual_share_off_diagonals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xp = random_unit(&mut rng, 4, 6);
        let xn = random_unit(&mut rng, 4, 6);
        let rel = build_relations(&xp, &xn, &xp).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(rel.vis_to_pos.weights.get(i, j), rel.pos_to_pos.weights.get(i, j));
                }
            }
        }
    }

    #[test]
    fn pos_to_neg_sign_flip() {
        // cos(x_p, x_n) = 0.8
        let xp = m(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let xn = m(&[&[0.8, 0.6, 0.0], &[0.0, 1.0, 0.0]]);
        let rel = build_relations(&xp, &xn, &xp).unwrap();
        assert!((rel.pos_to_neg.weights.get(0, 0) + 0.8).abs() < 1e-12);
        assert!((rel.neg_to_pos.weights.get(0, 0) + 0.8).abs() < 1e-12);
        assert_eq!(rel.neg_to_pos.weights.get(0, 1), 0.0);
    }

    #[test]
    fn relations_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (xp, xn, xv) = (
            random_unit(&mut rng, 3, 5),
            random_unit(&mut rng, 3, 5),
            random_unit(&mut rng, 3, 5),
        );
        let rel = build_relations(&xp, &xn, &xv).unwrap();
        let cos = |a: &Matrix<f64>, i: usize, b: &Matrix<f64>, j: usize| {
            let mut s = 0.0;
            for k in 0..5 {
                s += a.get(i, k) * b.get(j, k);
            }
            s
        };
        for i in 0..3 {
            for j in 0..3 {
                let off = i != j;
                let check = |got: f64, want: f64| assert!((got - want).abs() < 1e-6);
                check(rel.pos_to_pos.weights.get(i, j), if off { cos(&xp, i, &xp, j) } else { 0.0 });
                check(rel.vis_to_vis.weights.get(i, j), if off { cos(&xv, i, &xv, j) } else { 0.0 });
                check(rel.vis_to_pos.weights.get(i, j), cos(&xp, i, &xv, j));
                let sign = if off { 1.0 } else { -1.0 };
                check(rel.pos_to_neg.weights.get(i, j), sign * cos(&xp, j, &xn, i));
                check(rel.vis_to_neg.weights.get(i, j), sign * cos(&xv, j, &xn, i));
                check(rel.neg_to_pos.weights.get(i, j), if off { 0.0 } else { -cos(&xn, i, &xp, i) });
            }
        }
        for r in rel.iter() {
            for i in 0..3 {
                let row: f64 = (0..3).map(|j| r.weights.get(i, j).abs()).sum();
                let col: f64 = (0..3).map(|j| r.weights.get(j, i).abs()).sum();
                assert!((row - r.dest_degrees[i]).abs() < 1e-12);
                assert!((col - r.src_degrees[i]).abs() < 1e-12);
            }
            assert!(r.weights.as_slice().iter().all(|w| (-1.0..=1.0).contains(w)));
        }
    }

    #[test]
    fn relations_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (xp, xn, xv) = (
            random_unit(&mut rng, 4, 6),
            random_unit(&mut rng, 4, 6),
            random_unit(&mut rng, 4, 6),
        );
        let perm = [2usize, 0, 3, 1];
        let rel = build_relations(&xp, &xn, &xv).unwrap();
        let prel = build_relations(
            &xp.select_rows(&perm),
            &xn.select_rows(&perm),
            &xv.select_rows(&perm),
        )
        .unwrap();
        for (a, b) in rel.iter().zip(prel.iter()) {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((b.weights.get(i, j) - a.weights.get(perm[i], perm[j])).abs() < 1e-12);
                }
            }
        }
        // Determinism: bitwise identical rebuild.
        assert_eq!(rel, build_relations(&xp, &xn, &xv).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let xp = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let scaled = m(&[&[2.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            build_relations(&xp, &scaled, &xp),
            Err(Error::NonUnitRow { row: 0, .. })
        ));
        let wide = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert!(matches!(
            build_relations(&xp, &wide, &xp),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn graph_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xp = random_unit(&mut rng, 3, 5);
        let xn = random_unit(&mut rng, 3, 5);
        let cache = Matrix::from_fn(6, 5, |_, _| rng.random_range(-2.0..2.0));
        let g = HeteroGraph::new(xp, Some(xn), cache, vec![0, 1, 2, 2, 1, 0]).unwrap();
        g.validate().unwrap();
        assert_eq!(g.shots, 2);
        assert!(g.relations().is_some());

        let err = HeteroGraph::new(
            g.xp.clone(),
            None,
            g.cache.clone(),
            vec![0, 0, 0, 1, 1, 2],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
