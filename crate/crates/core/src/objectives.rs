//! Loss terms and their assembly for one training batch.
//!
//! - task: mean BCE of `sigmoid(score)` against anomaly labels;
//! - alignment: per masked-in row `1 - cos(a_i, Q Q^T f_i)`, averaged over
//!   the masked-in rows only, summed over attributes and guided layers;
//! - orth: `||Q^T Q - I||_F^2`, summed over every projection layer.
//!
//! `total = task + lambda_face * alignment + lambda_orth * orth`.
//!
//! Masked-out rows are dropped with `select_rows` before any arithmetic,
//! so their attribute content cannot reach the loss or its gradient.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Eager, Graph, Program};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{NetworkSpec, ProjectionKind};

/// Default weight of both regularizers.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda_face: f64,
    pub lambda_orth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_face: DEFAULT_LAMBDA,
            lambda_orth: DEFAULT_LAMBDA,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_face >= 0.0 && self.lambda_orth >= 0.0)
            || !self.lambda_face.is_finite()
            || !self.lambda_orth.is_finite()
        {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and nonnegative, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Unweighted components and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub task: f64,
    /// Zero when no row of the batch is masked in.
    pub alignment: f64,
    pub orth: f64,
    pub total: f64,
    pub active_count: usize,
}

fn check_mask(rows: usize, mask: &[bool], op: &'static str) -> Result<()> {
    if mask.len() != rows {
        return Err(Error::shape(
            op,
            format!("{} rows, mask of {}", rows, mask.len()),
        ));
    }
    Ok(())
}

/// Indices of masked-in rows.
pub fn active_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

fn targets(labels: &[bool]) -> Vec<f64> {
    labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect()
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn task_loss(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "task_loss",
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    let s = Matrix::column(scores)?;
    let mut g = Eager;
    Ok(g.bce_with_logits(&s, &targets(labels))?.data()[0])
}

/// `1 - mean cos(a_i, Q Q^T f_i)` over the given rows; `None` when `rows`
/// is empty.
pub fn alignment_term<G: Graph>(
    g: &mut G,
    attrs: &G::Value,
    q: &G::Value,
    features: &G::Value,
    rows: &[usize],
) -> Result<Option<G::Value>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let a = g.select_rows(attrs, rows)?;
    let f = g.select_rows(features, rows)?;
    Ok(Some(alignment_on_rows(g, &a, q, &f)?))
}

/// Alignment loss of row-matched attribute and feature batches.
fn alignment_on_rows<G: Graph>(
    g: &mut G,
    attrs: &G::Value,
    q: &G::Value,
    features: &G::Value,
) -> Result<G::Value> {
    let coords = g.matmul(features, q)?;
    let sens = g.matmul_nt(&coords, q)?;
    let cos = g.row_cosine(attrs, &sens)?;
    let m = g.mean(&cos)?;
    Ok(g.affine(&m, -1.0, 1.0))
}

/// `||Q^T Q - I||_F^2`
pub fn orth_term<G: Graph>(g: &mut G, q: &G::Value) -> Result<G::Value> {
    let k = g.value(q).cols();
    let gram = g.matmul_tn(q, q)?;
    let eye = g.constant(Matrix::identity(k));
    let diff = g.sub(&gram, &eye)?;
    Ok(g.frobenius_sq(&diff))
}

/// Masked-mean alignment loss of one attribute against basis `q`.
pub fn align_loss(attrs: &Matrix, q: &Matrix, features: &Matrix, mask: &[bool]) -> Result<f64> {
    if attrs.shape() != features.shape() {
        return Err(Error::shape(
            "align_loss",
            format!(
                "attrs {:?} vs features {:?}",
                attrs.shape(),
                features.shape()
            ),
        ));
    }
    check_mask(features.rows(), mask, "align_loss")?;
    let mut g = Eager;
    let rows = active_rows(mask);
    Ok(alignment_term(&mut g, attrs, q, features, &rows)?.map_or(0.0, |v| v.data()[0]))
}

/// Unweighted sum of [`align_loss`] over attributes; 0 for none.
pub fn multi_attr_loss(
    attrs: &[(Matrix, Vec<bool>)],
    q: &Matrix,
    features: &Matrix,
) -> Result<f64> {
    let mut total = 0.0;
    for (a, mask) in attrs {
        total += align_loss(a, q, features, mask)?;
    }
    Ok(total)
}

pub fn orth_loss(basis: &Matrix) -> f64 {
    let mut g = Eager;
    // matmul_tn of a matrix with itself cannot fail.
    orth_term(&mut g, basis).map_or(f64::NAN, |v| v.data()[0])
}

/// Weighted combination of already-computed components.
pub fn total_loss(
    task: f64,
    alignment: f64,
    orth: f64,
    active_count: usize,
    weights: LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        task,
        alignment,
        orth,
        total: task + weights.lambda_face * alignment + weights.lambda_orth * orth,
        active_count,
    }
}

/// One attribute channel of a batch: embeddings in input space plus mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeBatch {
    pub embeddings: Matrix,
    pub mask: Vec<bool>,
}

/// Inputs of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<bool>,
    pub attributes: Vec<AttributeBatch>,
}

impl Batch {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let n = self.features.rows();
        if n == 0 {
            return Err(Error::EmptyBatch("Batch"));
        }
        if self.features.cols() != input_dim {
            return Err(Error::shape(
                "Batch",
                format!(
                    "features have {} columns, network expects {}",
                    self.features.cols(),
                    input_dim
                ),
            ));
        }
        if self.labels.len() != n {
            return Err(Error::shape(
                "Batch",
                format!("{} rows, {} labels", n, self.labels.len()),
            ));
        }
        for a in &self.attributes {
            if a.embeddings.shape() != self.features.shape() {
                return Err(Error::shape(
                    "Batch",
                    format!(
                        "attributes {:?} vs features {:?}",
                        a.embeddings.shape(),
                        self.features.shape()
                    ),
                ));
            }
            check_mask(n, &a.mask, "Batch")?;
        }
        Ok(())
    }

    /// Distinct rows masked in by at least one attribute.
    pub fn active_count(&self) -> usize {
        (0..self.features.rows())
            .filter(|&i| self.attributes.iter().any(|a| a.mask[i]))
            .count()
    }
}

/// Graph values of every loss component.
pub struct LossTerms<V> {
    pub task: V,
    pub alignment: Option<V>,
    pub orth: Option<V>,
    pub total: V,
}

/// The full training objective of a network on a batch.
///
/// Each guided layer aligns against the attribute embeddings carried
/// through the same network prefix as the features entering that layer.
pub struct NetworkObjective<'a> {
    pub network: &'a NetworkSpec,
    pub batch: &'a Batch,
    pub weights: LossWeights,
}

impl NetworkObjective<'_> {
    pub fn terms<G: Graph>(&self, g: &mut G, params: &[G::Value]) -> Result<LossTerms<G::Value>> {
        self.batch.validate(self.network.input_dim())?;
        let input = g.constant(self.batch.features.clone());
        let fwd = self.network.forward_graph(g, params, &input, false)?;
        let task = g.bce_with_logits(&fwd.scores, &targets(&self.batch.labels))?;

        let mut alignment: Option<G::Value> = None;
        let mut orth: Option<G::Value> = None;
        for trace in &fwd.projections {
            let o = orth_term(g, &trace.q)?;
            orth = Some(match orth {
                Some(acc) => g.add(&acc, &o)?,
                None => o,
            });
            if trace.kind != ProjectionKind::GuidedOpl {
                continue;
            }
            for attr in &self.batch.attributes {
                let rows = active_rows(&attr.mask);
                if rows.is_empty() {
                    continue;
                }
                let a_in = g.constant(attr.embeddings.select_rows(&rows)?);
                let a = self
                    .network
                    .prefix_graph(g, params, &a_in, trace.stage_index)?;
                let f = g.select_rows(&trace.input, &rows)?;
                let term = alignment_on_rows(g, &a, &trace.q, &f)?;
                alignment = Some(match alignment {
                    Some(acc) => g.add(&acc, &term)?,
                    None => term,
                });
            }
        }

        let mut total = task.clone();
        if let Some(a) = &alignment {
            let w = g.scale(a, self.weights.lambda_face);
            total = g.add(&total, &w)?;
        }
        if let Some(o) = &orth {
            let w = g.scale(o, self.weights.lambda_orth);
            total = g.add(&total, &w)?;
        }
        Ok(LossTerms {
            task,
            alignment,
            orth,
            total,
        })
    }

    pub fn breakdown<G: Graph>(&self, g: &G, terms: &LossTerms<G::Value>) -> LossBreakdown {
        let read = |v: &Option<G::Value>| v.as_ref().map_or(0.0, |v| g.value(v).data()[0]);
        LossBreakdown {
            task: g.value(&terms.task).data()[0],
            alignment: read(&terms.alignment),
            orth: read(&terms.orth),
            total: g.value(&terms.total).data()[0],
            active_count: self.batch.active_count(),
        }
    }

    /// Eager evaluation at the network's current parameters.
    pub fn evaluate(&self) -> Result<LossBreakdown> {
        let mut g = Eager;
        let params = self.network.params();
        let terms = self.terms(&mut g, &params)?;
        Ok(self.breakdown(&g, &terms))
    }
}

impl Program for NetworkObjective<'_> {
    fn eval<G: Graph>(&self, g: &mut G, params: &[G::Value]) -> Result<G::Value> {
        Ok(self.terms(g, params)?.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn task_loss_examples() {
        let ln2 = core::f64::consts::LN_2;
        assert!((task_loss(&[0.0, 0.0], &[true, false]).unwrap() - ln2).abs() < 1e-15);
        assert!(task_loss(&[20.0, -20.0], &[true, false]).unwrap() <= 1e-8);
        let expected = -libm::log(1.0 / (1.0 + libm::exp(-1.0)));
        assert!((task_loss(&[1.0, -1.0], &[true, false]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.313262).abs() < 1e-6);
        assert!(matches!(task_loss(&[], &[]), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn align_loss_examples() {
        let q = m(&[&[1.0], &[0.0], &[0.0]]);
        let f = m(&[&[1.0, 1.0, 0.0]]);
        assert!(
            align_loss(&m(&[&[1.0, 0.0, 0.0]]), &q, &f, &[true])
                .unwrap()
                .abs()
                < 1e-15
        );
        assert!(
            (align_loss(&m(&[&[0.0, 1.0, 0.0]]), &q, &f, &[true]).unwrap() - 1.0).abs() < 1e-15
        );
        assert_eq!(
            align_loss(&m(&[&[0.0, 1.0, 0.0]]), &q, &f, &[false]).unwrap(),
            0.0
        );
    }

    #[test]
    fn align_loss_averages_over_masked_rows_only() {
        let q = m(&[&[1.0], &[0.0], &[0.0]]);
        let f = m(&[&[1.0, 1.0, 0.0], &[2.0, 0.0, 5.0], &[1.0, 0.0, 0.0]]);
        let a = m(&[&[0.0, 1.0, 0.0], &[9.0, 9.0, 9.0], &[1.0, 0.0, 0.0]]);
        // rows 0 and 2: losses 1 and 0
        let l = align_loss(&a, &q, &f, &[true, false, true]).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn multi_attr_reduces_and_adds() {
        let q = m(&[&[0.6], &[0.8], &[0.0]]);
        let f = m(&[&[1.0, 2.0, 3.0], &[0.5, -1.0, 2.0]]);
        let a = m(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]);
        let mask = vec![true, true];
        let single = align_loss(&a, &q, &f, &mask).unwrap();
        assert_eq!(
            multi_attr_loss(&[(a.clone(), mask.clone())], &q, &f).unwrap(),
            single
        );
        let two = multi_attr_loss(&[(a.clone(), mask.clone()), (a, mask)], &q, &f).unwrap();
        assert!((two - 2.0 * single).abs() < 1e-15);
        assert_eq!(multi_attr_loss(&[], &q, &f).unwrap(), 0.0);
    }

    #[test]
    fn multi_attr_prefers_the_joint_span() {
        // Attributes along e1 and e2; features carry both.
        let f = m(&[&[1.0, 1.0, 0.3], &[2.0, -1.0, 0.1]]);
        let a1 = m(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        let a2 = m(&[&[0.0, 1.0, 0.0], &[0.0, -1.0, 0.0]]);
        let mask = vec![true, true];
        let attrs = [(a1, mask.clone()), (a2, mask)];
        let joint = m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let joint_loss = multi_attr_loss(&attrs, &joint, &f).unwrap();
        // Brute force the summed loss over 1-D bases on a sphere grid.
        let mut best_1d = f64::INFINITY;
        let n = 60;
        for i in 0..n {
            for j in 0..(2 * n) {
                let th = core::f64::consts::PI * i as f64 / n as f64;
                let ph = core::f64::consts::PI * j as f64 / n as f64;
                let v = [
                    libm::sin(th) * libm::cos(ph),
                    libm::sin(th) * libm::sin(ph),
                    libm::cos(th),
                ];
                let q = Matrix::new(3, 1, v.to_vec()).unwrap();
                let each: Vec<f64> = attrs
                    .iter()
                    .map(|(a, mk)| align_loss(a, &q, &f, mk).unwrap())
                    .collect();
                best_1d = best_1d.min(each[0] + each[1]);
            }
        }
        assert!(joint_loss < best_1d, "{} vs {}", joint_loss, best_1d);
    }

    #[test]
    fn orth_loss_examples() {
        assert!(orth_loss(&Matrix::identity(3)) < 1e-30);
        let b = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert!((orth_loss(&b) - 1.0).abs() < 1e-15);
        for c in [0.0, 0.5, 2.0, 3.0] {
            let b = m(&[&[c, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
            let want = (c * c - 1.0) * (c * c - 1.0);
            assert!((orth_loss(&b) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        let z = LossWeights {
            lambda_face: 0.0,
            lambda_orth: 0.0,
        };
        assert_eq!(total_loss(0.4, 7.0, 9.0, 3, z).total, 0.4);
        let w = LossWeights {
            lambda_face: 1.0,
            lambda_orth: 0.01,
        };
        assert!((total_loss(0.5, 0.2, 0.1, 1, w).total - 0.701).abs() < 1e-15);
        let d = LossWeights::default();
        assert_eq!((d.lambda_face, d.lambda_orth), (1e-3, 1e-3));
        assert!(LossWeights {
            lambda_face: -1.0,
            lambda_orth: 0.0
        }
        .validate()
        .is_err());
    }
}
