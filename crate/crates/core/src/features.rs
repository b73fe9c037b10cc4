//! Embedding matrices and the zero-shot classification rule.
//!
//! Every feature handled by the toolkit (student image features, teacher
//! image features, teacher text features) lives in a [`FeatureMatrix`]:
//! row-major, one row per sample or label, with an opaque id per row.
//! Distances between unit-norm rows are always computed as squared L2 and
//! cosines are derived from them with `cos = 1 - ||a - b||^2 / 2`, so losses
//! and metrics share a single code path.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    StudentVisual,
    TeacherVisual,
    Text,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::StudentVisual => 0,
            FeatureKind::TeacherVisual => 1,
            FeatureKind::Text => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::StudentVisual),
            1 => Some(FeatureKind::TeacherVisual),
            2 => Some(FeatureKind::Text),
            _ => None,
        }
    }
}

/// N x D row-major matrix of embeddings with one unique id per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    kind: FeatureKind,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(kind: FeatureKind, ids: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ShapeMismatch("dimension must be at least 1".into()));
        }
        if ids.is_empty() {
            return Err(Error::TooFewRows { min: 1, got: 0 });
        }
        if data.len() != ids.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} ids x {} dims needs {} values, got {}",
                ids.len(),
                dim,
                ids.len() * dim,
                data.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self { kind, dim, ids, data })
    }

    pub fn from_rows(kind: FeatureKind, ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::new(kind, ids, dim, data)
    }

    /// Builds a matrix whose ids are the row indices `"0"`, `"1"`, ...
    pub fn indexed(kind: FeatureKind, dim: usize, data: Vec<f64>) -> Result<Self> {
        let rows = data.len().checked_div(dim).unwrap_or(0);
        Self::new(kind, (0..rows).map(|i| i.to_string()).collect(), dim, data)
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FeatureKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// New matrix made of the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(indices.len());
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            ids.push(self.ids[i].clone());
            data.extend_from_slice(self.row(i));
        }
        Self::new(self.kind, ids, self.dim, data)
    }

    /// Same rows, new ids.
    pub fn relabel(&self, ids: Vec<String>) -> Result<Self> {
        Self::new(self.kind, ids, self.dim, self.data.clone())
    }

    pub fn normalize(&self) -> Result<Self> {
        let mut data = self.data.clone();
        for (i, row) in data.chunks_exact_mut(self.dim).enumerate() {
            let norm = l2_norm(row);
            if norm < ZERO_NORM {
                return Err(Error::ZeroRow(i));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Self { kind: self.kind, dim: self.dim, ids: self.ids.clone(), data })
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.iter_rows().all(|r| (l2_norm(r) - 1.0).abs() <= tol)
    }

    pub(crate) fn check_dim(&self, other: &FeatureMatrix) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimMismatch { expected: self.dim, got: other.dim });
        }
        Ok(())
    }

    /// Requires identical row count and ids, row by row.
    pub(crate) fn check_paired(&self, other: &FeatureMatrix) -> Result<()> {
        self.check_dim(other)?;
        if self.rows() != other.rows() {
            return Err(Error::ShapeMismatch(format!(
                "paired matrices have {} and {} rows",
                self.rows(),
                other.rows()
            )));
        }
        match self.ids.iter().zip(&other.ids).position(|(a, b)| a != b) {
            Some(row) => Err(Error::IdMismatch { row }),
            None => Ok(()),
        }
    }
}

/// Row-normalizes `m`; fails with `ZeroRow` on a (near) zero row.
pub fn normalize(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    m.normalize()
}

/// Plain dense row-major matrix (probabilities, gradients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows).map(|i| argmax(self.row(i))).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `||a - b||^2` for unit vectors. Equals `2 - 2 cos(a, b)`.
pub fn squared_l2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch { expected: a.len(), got: b.len() });
    }
    Ok(sq_dist(a, b))
}

/// Cosine of two unit vectors, derived from their squared distance.
pub(crate) fn unit_cosine(a: &[f64], b: &[f64]) -> f64 {
    1.0 - sq_dist(a, b) / 2.0
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - squared_l2(a, b)? / 2.0)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values in descending order; ties go to the
/// lowest index. `k` is clamped to `values.len()`.
pub fn argtopk(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    logits.iter_mut().for_each(|x| *x /= sum);
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(tau))
    }
}

/// `cos(s_i, t_y) / tau` for every student row and text row.
pub fn cosine_logits(student: &FeatureMatrix, text: &FeatureMatrix, tau: f64) -> Result<Matrix> {
    student.check_dim(text)?;
    check_tau(tau)?;
    let mut out = Matrix::zeros(student.rows(), text.rows());
    for (i, s) in student.iter_rows().enumerate() {
        for (y, t) in text.iter_rows().enumerate() {
            out.data[i * text.rows() + y] = unit_cosine(s, t) / tau;
        }
    }
    Ok(out)
}

/// Zero-shot label probabilities: row `i` is the softmax over labels of
/// `cos(student_i, text_y) / tau`.
pub fn classify(student: &FeatureMatrix, text: &FeatureMatrix, tau: f64) -> Result<Matrix> {
    let mut probs = cosine_logits(student, text, tau)?;
    for i in 0..probs.rows {
        softmax_in_place(probs.row_mut(i));
    }
    Ok(probs)
}

/// Top-1 predictions under [`classify`].
pub fn predict(student: &FeatureMatrix, text: &FeatureMatrix) -> Result<Vec<usize>> {
    // argmax is invariant to the temperature
    Ok(cosine_logits(student, text, 1.0)?.argmax_rows())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> FeatureMatrix {
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        FeatureMatrix::from_rows(FeatureKind::Text, ids, rows).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let n = m(&[vec![3.0, 4.0], vec![1.0, 0.0]]).normalize().unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[1.0, 0.0]);
        assert_eq!(n.normalize().unwrap(), n);
    }

    #[test]
    fn normalize_zero_row() {
        let err = m(&[vec![1.0, 1.0], vec![0.0, 0.0]]).normalize().unwrap_err();
        assert!(matches!(err, Error::ZeroRow(1)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = FeatureMatrix::from_rows(FeatureKind::Text, vec!["a".into(), "a".into()], &[vec![1.0], vec![2.0]])
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateId(_)));
    }

    #[test]
    fn squared_l2_cases() {
        assert_eq!(squared_l2(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(squared_l2(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(squared_l2(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 4.0);
        assert!(matches!(squared_l2(&[1.0], &[1.0, 0.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn classify_matching_row_closed_form() {
        let text = m(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let student = m(&[vec![0.0, 1.0, 0.0, 0.0]]);
        let p = classify(&student, &text, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.get(0, 1) - e / (e + 3.0)).abs() < 1e-12);
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_uniform_when_cosines_equal() {
        let text = m(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let s = m(&[vec![1.0 / 3f64.sqrt(); 3]]);
        let p = classify(&s, &text, 0.5).unwrap();
        for &v in p.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_sharp_temperature() {
        let text = m(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let s = m(&[vec![0.8, 0.6]]);
        let p = classify(&s, &text, 0.01).unwrap();
        // logits 80, 60, -80: softmax oracle gives ~1 - e^-20
        assert!(p.get(0, 0) > 0.99);
        assert_eq!(argmax(p.row(0)), 0);
    }

    #[test]
    fn classify_rejects_bad_tau() {
        let t = m(&[vec![1.0, 0.0]]);
        assert!(matches!(classify(&t, &t, 0.0), Err(Error::NonPositiveTemperature(_))));
        assert!(matches!(classify(&t, &t, -1.0), Err(Error::NonPositiveTemperature(_))));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argtopk(&[2.0, 5.0, 2.0, 5.0], 3), vec![1, 3, 0]);
        assert_eq!(argtopk(&[1.0, 2.0], 10), vec![1, 0]);
    }
}
