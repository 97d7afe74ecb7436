//! Task representations, the multi-head cosine similarity layer and the
//! task relation matrix.
//!
//! A task is represented by the mean extractor feature of its meta-data
//! support inputs. Two tasks are related by
//!
//! ```text
//! m_ij = (1/K) Σ_k cos(ω_k ⊙ z_i, ω_k ⊙ z_j)
//! ```
//!
//! with `K` learnable vectors `ω_k` that start at all-ones.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{forward_features, LinearVars};
use crate::tasks::MetaData;

/// Floor added to clamped similarities before they are used as weights.
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityLayer {
    pub omega: Vec<Tensor>,
}

impl SimilarityLayer {
    /// `heads` weight vectors of length `width`, all ones.
    pub fn new(heads: usize, width: usize) -> Result<Self> {
        if heads == 0 || width == 0 {
            return Err(invalid("similarity layer needs K >= 1 and width >= 1"));
        }
        Ok(Self {
            omega: vec![Tensor::ones(&[width]); heads],
        })
    }

    pub fn heads(&self) -> usize {
        self.omega.len()
    }

    pub fn width(&self) -> usize {
        self.omega[0].len()
    }

    /// Learnable binding: every `ω_k` is a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.omega.iter().map(|w| tape.var(w.clone())).collect()
    }

    /// Frozen binding: `ω_k` are constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.omega.iter().map(|w| tape.constant(w.clone())).collect()
    }

    pub fn is_all_ones(&self) -> bool {
        self.omega.iter().all(|w| w.data().iter().all(|&v| v == 1.0))
    }
}

/// Mean extractor feature over the meta-data support inputs, shape `[width]`.
pub fn task_representation<'t>(
    extractor: &[LinearVars<'t>],
    tape: &'t Tape,
    metadata: &MetaData,
) -> Result<Var<'t>> {
    if metadata.support.is_empty() {
        return Err(invalid("task representation of empty meta-data"));
    }
    let xs = Tensor::column(metadata.support.iter().map(|p| p.x).collect());
    let n = xs.len();
    let feats = forward_features(extractor, tape.constant(xs))?;
    feats.sum_rows()?.scale(1.0 / n as f64)
}

/// Similarity of two task representations under the layer `omega`.
pub fn compute_relation<'t>(omega: &[Var<'t>], zi: Var<'t>, zj: Var<'t>) -> Result<Var<'t>> {
    let first = omega.first().ok_or_else(|| invalid("no similarity heads"))?;
    let width = first.shape();
    if zi.shape() != width || zj.shape() != width {
        return Err(Error::Shape {
            op: "compute_relation",
            shapes: vec![width, zi.shape(), zj.shape()],
        });
    }
    let mut total: Option<Var<'t>> = None;
    for &w in omega {
        let c = w.mul(zi)?.cosine_similarity(w.mul(zj)?)?;
        total = Some(match total {
            Some(t) => t.add(c)?,
            None => c,
        });
    }
    total.unwrap().scale(1.0 / omega.len() as f64)
}

/// Relation matrix whose off-diagonal entries live on a tape. Entry
/// `(i, j)` and `(j, i)` are the same var.
#[derive(Clone, Debug)]
pub struct RelationVars<'t> {
    n: usize,
    upper: Vec<Var<'t>>,
}

impl<'t> RelationVars<'t> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        // row-major upper triangle without the diagonal
        a * (2 * self.n - a - 1) / 2 + (b - a - 1)
    }

    /// `m_ij` for `i != j`.
    pub fn get(&self, i: usize, j: usize) -> Option<Var<'t>> {
        (i != j && i < self.n && j < self.n).then(|| self.upper[self.slot(i, j)])
    }

    /// Clamped weight `max(m_ij, 0) + floor`, recorded on the tape.
    pub fn weight(&self, i: usize, j: usize) -> Result<Var<'t>> {
        let m = self
            .get(i, j)
            .ok_or_else(|| invalid(format!("no relation entry ({i}, {j})")))?;
        m.relu()?.add_scalar(WEIGHT_FLOOR)
    }

    pub fn values(&self) -> RelationMatrix {
        let mut m = vec![vec![1.0; self.n]; self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    m[i][j] = self.upper[self.slot(i, j)].value().data()[0];
                }
            }
        }
        RelationMatrix { m }
    }
}

/// Computes every unordered pair once.
pub fn build_matrix<'t>(omega: &[Var<'t>], reps: &[Var<'t>]) -> Result<RelationVars<'t>> {
    let n = reps.len();
    if n < 2 {
        return Err(invalid(format!("relation matrix needs >= 2 tasks, got {n}")));
    }
    let mut upper = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            upper.push(compute_relation(omega, reps[i], reps[j])?);
        }
    }
    Ok(RelationVars { n, upper })
}

/// Plain-valued relation matrix. The diagonal is unused and held at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationMatrix {
    pub m: Vec<Vec<f64>>,
}

impl RelationMatrix {
    pub fn from_rows(m: Vec<Vec<f64>>) -> Result<Self> {
        let n = m.len();
        if n < 2 || m.iter().any(|r| r.len() != n) {
            return Err(invalid("relation matrix must be square with n >= 2"));
        }
        Ok(Self { m })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| (0..n).all(|j| self.m[i][j].to_bits() == self.m[j][i].to_bits()))
    }
}

/// `w_ij = max(m_ij, 0) + 1e-6` off the diagonal, 0 on it.
pub fn nonneg_weights(matrix: &RelationMatrix) -> Vec<Vec<f64>> {
    let n = matrix.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        matrix.m[i][j].max(0.0) + WEIGHT_FLOOR
                    }
                })
                .collect()
        })
        .collect()
}

/// Clamped weights divided by their row sums; every row sums to 1.
pub fn export_normalized(matrix: &RelationMatrix) -> Vec<Vec<f64>> {
    nonneg_weights(matrix)
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            row.into_iter().map(|w| w / total).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;
    use crate::tasks::Point;

    fn reps<'t>(tape: &'t Tape, zs: &[&[f64]]) -> Vec<Var<'t>> {
        zs.iter().map(|z| tape.var(Tensor::vector(z.to_vec()))).collect()
    }

    #[test]
    fn identical_representations_relate_fully() {
        let tape = Tape::new();
        let layer = SimilarityLayer::new(3, 3).unwrap();
        let mut omega = layer.bind(&tape);
        omega[1] = tape.var(Tensor::vector(vec![0.2, -3.0, 7.0]));
        let z = reps(&tape, &[&[0.4, -1.0, 2.0], &[0.4, -1.0, 2.0]]);
        let m = compute_relation(&omega, z[0], z[1]).unwrap();
        assert_eq!(m.value().item(), Some(1.0));
    }

    #[test]
    fn orthogonal_representations_relate_zero() {
        let tape = Tape::new();
        let omega = SimilarityLayer::new(4, 2).unwrap().bind(&tape);
        let z = reps(&tape, &[&[1.0, 0.0], &[0.0, 2.0]]);
        assert_eq!(compute_relation(&omega, z[0], z[1]).unwrap().value().item(), Some(0.0));
    }

    #[test]
    fn width_mismatch_rejected() {
        let tape = Tape::new();
        let omega = SimilarityLayer::new(1, 2).unwrap().bind(&tape);
        let z = reps(&tape, &[&[1.0, 0.0, 1.0], &[0.0, 2.0, 1.0]]);
        assert!(compute_relation(&omega, z[0], z[1]).is_err());
    }

    #[test]
    fn matrix_needs_two_tasks() {
        let tape = Tape::new();
        let omega = SimilarityLayer::new(1, 2).unwrap().bind(&tape);
        let z = reps(&tape, &[&[1.0, 0.0]]);
        assert!(build_matrix(&omega, &z).is_err());
    }

    #[test]
    fn two_tasks_share_one_entry() {
        let tape = Tape::new();
        let omega = SimilarityLayer::new(2, 2).unwrap().bind(&tape);
        let z = reps(&tape, &[&[1.0, 0.5], &[-0.3, 2.0]]);
        let m = build_matrix(&omega, &z).unwrap();
        assert_eq!(m.get(0, 1).unwrap().index(), m.get(1, 0).unwrap().index());
        assert!(m.get(0, 0).is_none());
        let vals = m.values();
        assert!(vals.is_symmetric());
        assert_eq!(export_normalized(&vals), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn identical_batch_gives_ones() {
        let tape = Tape::new();
        let omega = SimilarityLayer::new(4, 3).unwrap().bind(&tape);
        let row: &[f64] = &[1.0, 2.0, 3.0];
        let z = reps(&tape, &[row; 4]);
        let vals = build_matrix(&omega, &z).unwrap().values();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(vals.m[i][j], 1.0);
            }
        }
        let norm = export_normalized(&vals);
        for (i, row) in norm.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let expected = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert!((v - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn clamp_and_floor() {
        let m = RelationMatrix::from_rows(vec![
            vec![1.0, -0.5, 0.8],
            vec![-0.5, 1.0, -1.0],
            vec![0.8, -1.0, 1.0],
        ])
        .unwrap();
        let w = nonneg_weights(&m);
        assert_eq!(w[0][1], 1e-6);
        assert_eq!(w[0][2], 0.8 + 1e-6);
        assert!(w[1].iter().sum::<f64>() > 0.0);
        let norm = export_normalized(&m);
        assert!((norm[1].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(norm[1][0], 0.5);
    }

    #[test]
    fn representation_is_mean_feature() {
        let model = init_model(&[1, 5, 5], 1, 2).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape);
        let pt = Point { x: 1.3, y: 0.0 };
        let md = |pts: Vec<Point>| MetaData {
            support: pts,
            query: vec![],
            score: 0.0,
        };
        let one = task_representation(&b.extractor, &tape, &md(vec![pt])).unwrap();
        let two = task_representation(&b.extractor, &tape, &md(vec![pt, pt])).unwrap();
        let direct = b
            .forward_features(tape.constant(Tensor::column(vec![1.3])))
            .unwrap();
        assert_eq!(one.value().data(), direct.value().data());
        assert_eq!(two.value().data(), one.value().data());
        assert!(task_representation(&b.extractor, &tape, &md(vec![])).is_err());
    }

    #[test]
    fn zero_extractor_gives_zero_representation() {
        let mut model = init_model(&[1, 4], 1, 2).unwrap();
        model.extractor[0] = crate::nn::Linear::zeros(1, 4);
        let tape = Tape::new();
        let b = model.bind(&tape);
        let md = MetaData {
            support: vec![Point { x: 2.0, y: 1.0 }, Point { x: -1.0, y: 0.0 }],
            query: vec![],
            score: 0.0,
        };
        let z = task_representation(&b.extractor, &tape, &md).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }
}
