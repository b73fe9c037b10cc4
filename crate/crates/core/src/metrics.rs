//! Teacher/student alignment metrics and text-space diagnostics.
//!
//! All nearest-neighbor searches are exact and stream over query rows, so
//! memory stays at O(N * D) regardless of N. Ties in any argmin / top-k go to
//! the lowest index.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{check_tau, l2_norm, sq_dist, unit_cosine, FeatureMatrix};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

fn map_rows<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// One metric evaluation, as written to reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    pub values: Vec<f64>,
    pub samples: usize,
}

impl MetricReport {
    pub fn new(metric: &str, dataset: &str, values: Vec<f64>, samples: usize) -> Self {
        Self { metric: metric.into(), dataset: dataset.into(), params: BTreeMap::new(), values, samples }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// (distance, index) ordered so the heap top is the worst kept neighbor:
/// larger distance first, and among equal distances the larger index.
#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Indices of the `k` points of `pool` nearest to `query`, skipping `skip`,
/// in increasing (distance, index) order.
fn nearest(query: &[f64], pool: &FeatureMatrix, k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (j, row) in pool.iter_rows().enumerate() {
        if Some(j) == skip {
            continue;
        }
        let c = Candidate(sq_dist(query, row), j);
        if heap.len() < k {
            heap.push(c);
        } else if heap.peek().is_some_and(|worst| c < *worst) {
            heap.pop();
            heap.push(c);
        }
    }
    heap.into_sorted_vec().into_iter().map(|c| c.1).collect()
}

/// Fraction of samples whose student feature is nearest to their own
/// teacher feature among all teacher features.
pub fn metric_rel(student: &FeatureMatrix, teacher: &FeatureMatrix) -> Result<f64> {
    student.check_paired(teacher)?;
    let hits = map_rows(student.rows(), |i| nearest(student.row(i), teacher, 1, None)[0] == i);
    Ok(hits.iter().filter(|&&h| h).count() as f64 / student.rows() as f64)
}

/// Mean overlap of the k-nearest-neighbor sets (self excluded) in the
/// student and teacher spaces, divided by k.
pub fn metric_neigh(student: &FeatureMatrix, teacher: &FeatureMatrix, k: usize) -> Result<f64> {
    student.check_paired(teacher)?;
    let n = student.rows();
    if k < 1 || k + 1 > n {
        return Err(Error::KOutOfRange { k, min: 1, max: n.saturating_sub(1) });
    }
    let overlaps = map_rows(n, |i| {
        let mut a = nearest(student.row(i), student, k, Some(i));
        let mut b = nearest(teacher.row(i), teacher, k, Some(i));
        a.sort_unstable();
        b.sort_unstable();
        let (mut p, mut q, mut common) = (0, 0, 0usize);
        while p < a.len() && q < b.len() {
            match a[p].cmp(&b[q]) {
                Ordering::Less => p += 1,
                Ordering::Greater => q += 1,
                Ordering::Equal => {
                    common += 1;
                    p += 1;
                    q += 1;
                }
            }
        }
        common
    });
    Ok(overlaps.iter().sum::<usize>() as f64 / (k * n) as f64)
}

/// Counts pairs `p < q` with `a[p] > a[q]` by merge sort. Equal values are
/// not inversions.
pub fn count_inversions(values: &[f64]) -> usize {
    fn sort(v: &mut [f64], buf: &mut Vec<f64>) -> usize {
        let n = v.len();
        if n < 2 {
            return 0;
        }
        let mid = n / 2;
        let mut count = sort(&mut v[..mid], buf) + sort(&mut v[mid..], buf);
        buf.clear();
        let (mut i, mut j) = (0, mid);
        while i < mid && j < n {
            if v[j] < v[i] {
                count += mid - i;
                buf.push(v[j]);
                j += 1;
            } else {
                buf.push(v[i]);
                i += 1;
            }
        }
        buf.extend_from_slice(&v[i..mid]);
        buf.extend_from_slice(&v[j..n]);
        v.copy_from_slice(buf);
        count
    }
    let mut v = values.to_vec();
    sort(&mut v, &mut Vec::with_capacity(values.len()))
}

/// Mean number of inversions between the teacher's ordering of its `k`
/// nearest text features and the student's distances to those same texts.
pub fn metric_vlalign(
    student: &FeatureMatrix,
    teacher_img: &FeatureMatrix,
    text: &FeatureMatrix,
    k: usize,
) -> Result<f64> {
    student.check_paired(teacher_img)?;
    student.check_dim(text)?;
    if k < 1 || k > text.rows() {
        return Err(Error::KOutOfRange { k, min: 1, max: text.rows() });
    }
    let counts = map_rows(student.rows(), |i| {
        let order = nearest(teacher_img.row(i), text, k, None);
        let arr: Vec<f64> = order.iter().map(|&y| sq_dist(student.row(i), text.row(y)).sqrt()).collect();
        count_inversions(&arr)
    });
    Ok(counts.iter().sum::<usize>() as f64 / student.rows() as f64)
}

/// Mean squared error and mean angle (degrees) between paired rows.
pub fn mse_angle_stats(student: &FeatureMatrix, teacher: &FeatureMatrix) -> Result<(f64, f64)> {
    student.check_paired(teacher)?;
    let n = student.rows() as f64;
    let (mut mse, mut angle) = (0.0, 0.0);
    for i in 0..student.rows() {
        let (s, t) = (student.row(i), teacher.row(i));
        mse += sq_dist(s, t);
        angle += unit_cosine(s, t).clamp(-1.0, 1.0).acos().to_degrees();
    }
    Ok((mse / n, angle / n))
}

/// Singular values of the mean-centered matrix, descending, at most `top_n`.
pub fn text_spectrum(text: &FeatureMatrix, top_n: usize) -> Result<Vec<f64>> {
    let (n, d) = (text.rows(), text.dim());
    if n < 2 {
        return Err(Error::TooFewRows { min: 2, got: n });
    }
    let shifted = shifted_rows(text, false)?;
    let mean = column_mean(&shifted, d);
    let centered = DMatrix::from_fn(n, d, |i, j| shifted[i * d + j] - mean[j]);
    let mut values: Vec<f64> = centered.singular_values().iter().map(|v| v.max(0.0)).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values.truncate(top_n);
    Ok(values)
}

/// Mean cosine over all unordered pairs of rows.
pub fn pairwise_cosine_mean(text: &FeatureMatrix) -> Result<f64> {
    let n = text.rows();
    if n < 2 {
        return Err(Error::TooFewRows { min: 2, got: n });
    }
    // sum_{i<j} cos = pairs - sum_{i<j} |u_i - u_j|^2 / 2 and
    // sum_{i<j} |u_i - u_j|^2 = n * sum_i |u_i - mean|^2
    let d = text.dim();
    let shifted = shifted_rows(text, true)?;
    let mean = column_mean(&shifted, d);
    let spread: f64 =
        shifted.chunks_exact(d).map(|r| r.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>()).sum();
    Ok(1.0 - spread / (n - 1) as f64)
}

/// Rows minus the first row (optionally after normalizing each row), so
/// identical rows give exact zeros. Centering is unaffected by the shift.
fn shifted_rows(m: &FeatureMatrix, unit: bool) -> Result<Vec<f64>> {
    let scale = |i: usize| -> Result<f64> {
        if !unit {
            return Ok(1.0);
        }
        let norm = l2_norm(m.row(i));
        if norm < crate::features::ZERO_NORM {
            return Err(Error::ZeroRow(i));
        }
        Ok(norm)
    };
    let n0 = scale(0)?;
    let first: Vec<f64> = m.row(0).iter().map(|x| x / n0).collect();
    let mut out = Vec::with_capacity(m.data().len());
    for i in 0..m.rows() {
        let ni = scale(i)?;
        out.extend(m.row(i).iter().zip(&first).map(|(x, f)| x / ni - f));
    }
    Ok(out)
}

fn column_mean(data: &[f64], d: usize) -> Vec<f64> {
    let n = (data.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Dense boolean table, one row per observation, one column per label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolTable {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BoolTable {
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged boolean table".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilabelMetrics {
    /// Fraction of (observation, label) cells predicted correctly.
    pub accuracy: f64,
    pub precision_per_label: Vec<f64>,
    pub recall_per_label: Vec<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Overall cell accuracy plus per-label precision / recall / F1.
///
/// Per-label precision divides true positives by the number of observations
/// where the label is present or predicted; recall divides them by the
/// number where it is present. A label with a zero denominator contributes 0.
pub fn multilabel_metrics(predictions: &BoolTable, truth: &BoolTable) -> Result<MultilabelMetrics> {
    if predictions.rows != truth.rows || predictions.cols != truth.cols {
        return Err(Error::ShapeMismatch(format!(
            "predictions {}x{} vs truth {}x{}",
            predictions.rows, predictions.cols, truth.rows, truth.cols
        )));
    }
    let (n, l) = (truth.rows, truth.cols);
    if n == 0 || l == 0 {
        return Err(Error::ShapeMismatch("empty table".into()));
    }
    let correct = predictions.data.iter().zip(&truth.data).filter(|(p, t)| p == t).count();
    let mut precision_per_label = Vec::with_capacity(l);
    let mut recall_per_label = Vec::with_capacity(l);
    for y in 0..l {
        let (mut tp, mut union, mut present) = (0usize, 0usize, 0usize);
        for i in 0..n {
            let (p, t) = (predictions.get(i, y), truth.get(i, y));
            tp += usize::from(p && t);
            union += usize::from(p || t);
            present += usize::from(t);
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        precision_per_label.push(ratio(tp, union));
        recall_per_label.push(ratio(tp, present));
    }
    let precision = precision_per_label.iter().sum::<f64>() / l as f64;
    let recall = recall_per_label.iter().sum::<f64>() / l as f64;
    let f1 = if precision > 0.0 && recall > 0.0 { 2.0 / (1.0 / precision + 1.0 / recall) } else { 0.0 };
    Ok(MultilabelMetrics {
        accuracy: correct as f64 / (n * l) as f64,
        precision_per_label,
        recall_per_label,
        precision,
        recall,
        f1,
    })
}

/// Positive/negative prompt prediction: per (sample, label) a two-way
/// softmax over the cosines to the positive and negative text; positive iff
/// `P_pos > 0.5 + bias`.
pub fn multilabel_predict(
    student: &FeatureMatrix,
    pos_text: &FeatureMatrix,
    neg_text: &FeatureMatrix,
    tau: f64,
    bias: f64,
) -> Result<BoolTable> {
    student.check_dim(pos_text)?;
    student.check_dim(neg_text)?;
    check_tau(tau)?;
    if pos_text.rows() != neg_text.rows() {
        return Err(Error::ShapeMismatch("positive and negative prompts differ in label count".into()));
    }
    let l = pos_text.rows();
    let mut data = Vec::with_capacity(student.rows() * l);
    for s in student.iter_rows() {
        for y in 0..l {
            let zp = unit_cosine(s, pos_text.row(y)) / tau;
            let zn = unit_cosine(s, neg_text.row(y)) / tau;
            let p_pos = 1.0 / (1.0 + (zn - zp).exp());
            data.push(p_pos > 0.5 + bias);
        }
    }
    Ok(BoolTable { rows: student.rows(), cols: l, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;

    fn fm(rows: &[Vec<f64>]) -> FeatureMatrix {
        let ids = (0..rows.len()).map(|i| format!("x{i}")).collect();
        FeatureMatrix::from_rows(FeatureKind::TeacherVisual, ids, rows).unwrap()
    }

    fn circle(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.7;
                vec![a.cos(), a.sin(), 0.0]
            })
            .collect()
    }

    #[test]
    fn rel_identity_and_shift() {
        let rows = circle(6);
        let t = fm(&rows);
        assert_eq!(metric_rel(&t, &t).unwrap(), 1.0);
        let mut shifted = rows.clone();
        shifted.rotate_left(1);
        assert_eq!(metric_rel(&fm(&shifted), &t).unwrap(), 0.0);
    }

    #[test]
    fn neigh_full_k_is_one() {
        let a = fm(&circle(7));
        let b = fm(&circle(7).into_iter().rev().collect::<Vec<_>>());
        assert_eq!(metric_neigh(&a, &b, 6).unwrap(), 1.0);
        assert!(matches!(metric_neigh(&a, &b, 7), Err(Error::KOutOfRange { .. })));
        assert!(matches!(metric_neigh(&a, &b, 0), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn vlalign_full_reversal() {
        let text = fm(&[vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]]);
        let teacher = fm(&[vec![1.0, 0.0]]);
        let student = fm(&[vec![0.0, 1.0]]);
        assert_eq!(metric_vlalign(&student, &teacher, &text, 3).unwrap(), 3.0);
        assert_eq!(metric_vlalign(&student, &teacher, &text, 1).unwrap(), 0.0);
        assert_eq!(metric_vlalign(&teacher, &teacher, &text, 3).unwrap(), 0.0);
    }

    #[test]
    fn inversions_small() {
        assert_eq!(count_inversions(&[]), 0);
        assert_eq!(count_inversions(&[3.0, 2.0, 1.0]), 3);
        assert_eq!(count_inversions(&[1.0, 1.0, 1.0]), 0);
        assert_eq!(count_inversions(&[2.0, 1.0, 3.0, 0.0]), 4);
    }

    #[test]
    fn mse_angle_orthogonal() {
        let a = fm(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = fm(&[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let (mse, deg) = mse_angle_stats(&a, &b).unwrap();
        assert!((mse - 2.0).abs() < 1e-12);
        assert!((deg - 90.0).abs() < 1e-9);
        assert_eq!(mse_angle_stats(&a, &a).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn spectrum_degenerate() {
        let t = fm(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]]);
        assert!(text_spectrum(&t, 5).unwrap().iter().all(|&v| v == 0.0));
        let err = text_spectrum(&fm(&[vec![1.0, 0.0]]), 1).unwrap_err();
        assert!(matches!(err, Error::TooFewRows { .. }));
    }

    #[test]
    fn spectrum_rank_one() {
        let t = fm(&[vec![0.6, 0.8], vec![-0.6, -0.8]]);
        let s = text_spectrum(&t, 2).unwrap();
        assert!(s[0] > 1.0);
        assert!(s[1].abs() < 1e-12);
    }

    #[test]
    fn cosine_mean_degenerate() {
        let same = fm(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]]);
        assert_eq!(pairwise_cosine_mean(&same).unwrap(), 1.0);
        let ortho = fm(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!(pairwise_cosine_mean(&ortho).unwrap().abs() < 1e-12);
    }

    #[test]
    fn multilabel_perfect_and_empty() {
        let truth = BoolTable::from_rows(&[vec![true, false], vec![false, true]]).unwrap();
        let m = multilabel_metrics(&truth, &truth).unwrap();
        assert_eq!((m.accuracy, m.f1), (1.0, 1.0));
        let none = BoolTable::from_rows(&[vec![false, false], vec![false, false]]).unwrap();
        let m = multilabel_metrics(&none, &truth).unwrap();
        assert_eq!((m.recall, m.f1), (0.0, 0.0));
        let bad = BoolTable::from_rows(&[vec![false]]).unwrap();
        assert!(matches!(multilabel_metrics(&bad, &truth), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn multilabel_predict_threshold() {
        let s = fm(&[vec![1.0, 0.0]]);
        let pos = fm(&[vec![1.0, 0.0]]);
        let neg = fm(&[vec![0.0, 1.0]]);
        // P_pos = e / (e + 1)
        assert!(multilabel_predict(&s, &pos, &neg, 1.0, 0.0).unwrap().get(0, 0));
        let tie = fm(&[vec![0.6, 0.8]]);
        let even_pos = fm(&[vec![0.8, 0.6]]);
        let even_neg = fm(&[vec![0.8, 0.6]]);
        assert!(!multilabel_predict(&tie, &even_pos, &even_neg, 1.0, 0.0).unwrap().get(0, 0));
        assert!(!multilabel_predict(&s, &pos, &neg, 0.01, 0.5).unwrap().get(0, 0));
    }
}
