//! Distillation objectives.
//!
//! Each loss returns its batch mean, the per-sample terms, and the gradient
//! of the mean with respect to the student rows. Teacher image features and
//! text features are constants. Cosines are taken as `1 - ||s - t||^2 / 2`,
//! and the gradients below differentiate exactly that expression, so they
//! stay consistent with finite differences even off the unit sphere.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    argmax, argtopk, check_tau, classify, cosine_logits, log_sum_exp, sq_dist, unit_cosine, FeatureMatrix, Matrix,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub value: f64,
    pub per_sample: Vec<f64>,
    /// d value / d student, one row per sample.
    pub grad: Matrix,
}

impl LossResult {
    fn from_parts(per_sample: Vec<f64>, grad: Matrix) -> Self {
        let n = per_sample.len().max(1) as f64;
        let value = per_sample.iter().sum::<f64>() / n;
        Self { value, per_sample, grad }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch(format!("{} labels for {} samples", labels.len(), rows)));
    }
    match labels.iter().find(|&&y| y >= classes) {
        Some(&index) => Err(Error::LabelOutOfRange { index, classes }),
        None => Ok(()),
    }
}

/// Adds `scale * (t - s)` to `g`: the derivative of `cos(s, t)` in `s`.
fn add_cos_grad(g: &mut [f64], s: &[f64], t: &[f64], scale: f64) {
    for ((gi, si), ti) in g.iter_mut().zip(s).zip(t) {
        *gi += scale * (ti - si);
    }
}

/// Vision-language contrastive loss: `-log P_S(y | x)` under [`classify`].
pub fn loss_cls(student: &FeatureMatrix, text: &FeatureMatrix, labels: &[usize], tau: f64) -> Result<LossResult> {
    check_labels(labels, student.rows(), text.rows())?;
    let logits = cosine_logits(student, text, tau)?;
    let n = student.rows();
    let mut per_sample = Vec::with_capacity(n);
    let mut grad = Matrix::zeros(n, student.dim());
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let lse = log_sum_exp(z);
        per_sample.push(lse - z[y]);
        let s = student.row(i);
        let g = grad.row_mut(i);
        for (c, t) in text.iter_rows().enumerate() {
            let p = (z[c] - lse).exp();
            let coeff = p - f64::from(u8::from(c == y));
            add_cos_grad(g, s, t, coeff / (tau * n as f64));
        }
    }
    Ok(LossResult::from_parts(per_sample, grad))
}

/// Gradient of the mean [`loss_cls`] with respect to the text rows (C x D).
/// Used when label text features come from a learnable prompt.
pub fn loss_cls_text_grad(student: &FeatureMatrix, text: &FeatureMatrix, labels: &[usize], tau: f64) -> Result<Matrix> {
    check_labels(labels, student.rows(), text.rows())?;
    let logits = cosine_logits(student, text, tau)?;
    let n = student.rows() as f64;
    let mut grad = Matrix::zeros(text.rows(), text.dim());
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let lse = log_sum_exp(z);
        let s = student.row(i);
        for (c, zc) in z.iter().enumerate() {
            let coeff = (zc - lse).exp() - f64::from(u8::from(c == y));
            // d cos(s, t) / dt = s - t
            add_cos_grad(grad.row_mut(c), text.row(c), s, coeff / (tau * n));
        }
    }
    Ok(grad)
}

/// Squared error to the paired teacher image feature.
pub fn loss_mse(student: &FeatureMatrix, teacher: &FeatureMatrix) -> Result<LossResult> {
    student.check_paired(teacher)?;
    let n = student.rows() as f64;
    let mut grad = Matrix::zeros(student.rows(), student.dim());
    let per_sample = (0..student.rows())
        .map(|i| {
            let (s, t) = (student.row(i), teacher.row(i));
            for ((g, a), b) in grad.row_mut(i).iter_mut().zip(s).zip(t) {
                *g = 2.0 * (a - b) / n;
            }
            sq_dist(s, t)
        })
        .collect();
    Ok(LossResult::from_parts(per_sample, grad))
}

/// Visual contrastive imitation: each student row must be closer to its own
/// teacher feature than to the other teacher features in the batch.
pub fn loss_im_cst(student: &FeatureMatrix, teacher: &FeatureMatrix, tau: f64) -> Result<LossResult> {
    loss_im_cst_masked(student, teacher, tau, None)
}

/// [`loss_im_cst`] where only samples with `keep[i]` act as anchors. Masked
/// samples still serve as negatives and count toward the batch mean.
pub fn loss_im_cst_masked(
    student: &FeatureMatrix,
    teacher: &FeatureMatrix,
    tau: f64,
    keep: Option<&[bool]>,
) -> Result<LossResult> {
    student.check_paired(teacher)?;
    check_tau(tau)?;
    let n = student.rows();
    if let Some(k) = keep {
        if k.len() != n {
            return Err(Error::ShapeMismatch(format!("mask of {} for {} samples", k.len(), n)));
        }
    }
    let mut per_sample = vec![0.0; n];
    let mut grad = Matrix::zeros(n, student.dim());
    let mut z = vec![0.0; n];
    for i in 0..n {
        if keep.is_some_and(|k| !k[i]) {
            continue;
        }
        let s = student.row(i);
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = -sq_dist(s, teacher.row(j)) / tau;
        }
        let lse = log_sum_exp(&z);
        per_sample[i] = lse - z[i];
        // d/ds = (2 / tau) (sum_j q_j t_j - t_i)
        let g = grad.row_mut(i);
        let scale = 2.0 / (tau * n as f64);
        for (j, t) in teacher.iter_rows().enumerate() {
            let coeff = (z[j] - lse).exp() - f64::from(u8::from(i == j));
            for (gk, tk) in g.iter_mut().zip(t) {
                *gk += scale * coeff * tk;
            }
        }
    }
    Ok(LossResult::from_parts(per_sample, grad))
}

/// `true` where the teacher's zero-shot prediction equals the sample label.
pub fn teacher_alignment_mask(
    teacher_img: &FeatureMatrix,
    text: &FeatureMatrix,
    labels: &[usize],
) -> Result<Vec<bool>> {
    check_labels(labels, teacher_img.rows(), text.rows())?;
    let logits = cosine_logits(teacher_img, text, 1.0)?;
    Ok(labels.iter().enumerate().map(|(i, &y)| argmax(logits.row(i)) == y).collect())
}

/// Filtered top-k KL between teacher and student label distributions.
pub fn loss_vlprox(
    student: &FeatureMatrix,
    teacher_img: &FeatureMatrix,
    text: &FeatureMatrix,
    labels: &[usize],
    tau: f64,
    k: usize,
) -> Result<LossResult> {
    loss_vlprox_with(student, teacher_img, text, labels, tau, k, true)
}

/// [`loss_vlprox`] with the misalignment filter switchable.
///
/// For each sample the label set is restricted to the teacher's `k` most
/// probable labels (ties to the lowest index, `k` clamped to the label
/// count); both distributions are renormalized over that set and the
/// per-sample term is `KL(teacher || student)`. With `filter` on, samples the
/// teacher misclassifies contribute zero.
pub fn loss_vlprox_with(
    student: &FeatureMatrix,
    teacher_img: &FeatureMatrix,
    text: &FeatureMatrix,
    labels: &[usize],
    tau: f64,
    k: usize,
    filter: bool,
) -> Result<LossResult> {
    if k == 0 {
        return Err(Error::KOutOfRange { k, min: 1, max: text.rows() });
    }
    check_labels(labels, student.rows(), text.rows())?;
    teacher_img.check_dim(text)?;
    if teacher_img.rows() != student.rows() {
        return Err(Error::ShapeMismatch("teacher and student batch sizes differ".into()));
    }
    let p_teacher = classify(teacher_img, text, tau)?;
    let z_student = cosine_logits(student, text, tau)?;
    let n = student.rows();
    let mut per_sample = vec![0.0; n];
    let mut grad = Matrix::zeros(n, student.dim());
    for i in 0..n {
        let pt_row = p_teacher.row(i);
        if filter && argmax(pt_row) != labels[i] {
            continue;
        }
        let top = argtopk(pt_row, k);
        let mass: f64 = top.iter().map(|&y| pt_row[y]).sum();
        let zs: Vec<f64> = top.iter().map(|&y| z_student.get(i, y)).collect();
        let lse = log_sum_exp(&zs);
        let s = student.row(i);
        let g = grad.row_mut(i);
        let mut kl = 0.0;
        for (pos, &y) in top.iter().enumerate() {
            let pt = pt_row[y] / mass;
            let log_ps = zs[pos] - lse;
            if pt > 0.0 {
                kl += pt * (pt.ln() - log_ps);
            }
            add_cos_grad(g, s, text.row(y), (log_ps.exp() - pt) / (tau * n as f64));
        }
        per_sample[i] = kl.max(0.0);
    }
    Ok(LossResult::from_parts(per_sample, grad))
}

/// Caption contrast: pull each image toward its own caption feature, push it
/// from captions of other classes. Same-class captions are not negatives.
pub fn loss_cap(
    student: &FeatureMatrix,
    caption_text: &FeatureMatrix,
    labels: &[usize],
    tau: f64,
) -> Result<LossResult> {
    student.check_dim(caption_text)?;
    check_tau(tau)?;
    let n = student.rows();
    if caption_text.rows() != n || labels.len() != n {
        return Err(Error::ShapeMismatch("need one caption and one label per sample".into()));
    }
    let mut per_sample = Vec::with_capacity(n);
    let mut grad = Matrix::zeros(n, student.dim());
    let mut pool = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let s = student.row(i);
        pool.clear();
        pool.push(i);
        pool.extend((0..n).filter(|&j| labels[j] != labels[i]));
        z.clear();
        z.extend(pool.iter().map(|&j| unit_cosine(s, caption_text.row(j)) / tau));
        let lse = log_sum_exp(&z);
        per_sample.push(lse - z[0]);
        let g = grad.row_mut(i);
        for (pos, &j) in pool.iter().enumerate() {
            let coeff = (z[pos] - lse).exp() - f64::from(u8::from(pos == 0));
            add_cos_grad(g, s, caption_text.row(j), coeff / (tau * n as f64));
        }
    }
    Ok(LossResult::from_parts(per_sample, grad))
}

/// Weighted sum of loss values, per-sample terms and gradients.
pub fn combine(losses: &BTreeMap<String, LossResult>, weights: &BTreeMap<String, f64>) -> Result<LossResult> {
    let mut iter = losses.iter();
    let Some((_, first)) = iter.next() else {
        return Err(Error::ShapeMismatch("no losses to combine".into()));
    };
    let mut out = LossResult {
        value: 0.0,
        per_sample: vec![0.0; first.per_sample.len()],
        grad: Matrix::zeros(first.grad.rows, first.grad.cols),
    };
    for (name, loss) in losses {
        let w = *weights.get(name).ok_or_else(|| Error::MissingWeight(name.clone()))?;
        if loss.grad.data.len() != out.grad.data.len() || loss.per_sample.len() != out.per_sample.len() {
            return Err(Error::ShapeMismatch(format!("loss {name:?} has a different batch shape")));
        }
        if w == 0.0 {
            continue;
        }
        out.value += w * loss.value;
        for (a, b) in out.per_sample.iter_mut().zip(&loss.per_sample) {
            *a += w * b;
        }
        for (a, b) in out.grad.data.iter_mut().zip(&loss.grad.data) {
            *a += w * b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;

    fn fm(rows: &[Vec<f64>]) -> FeatureMatrix {
        let ids = (0..rows.len()).map(|i| format!("s{i}")).collect();
        FeatureMatrix::from_rows(FeatureKind::StudentVisual, ids, rows).unwrap()
    }

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    const E: f64 = std::f64::consts::E;

    #[test]
    fn cls_closed_form() {
        let text = fm(&(0..4).map(|i| basis(4, i)).collect::<Vec<_>>());
        let student = fm(&[basis(4, 2)]);
        let r = loss_cls(&student, &text, &[2], 1.0).unwrap();
        assert!((r.value - (-(E / (E + 3.0)).ln())).abs() < 1e-12);
    }

    #[test]
    fn cls_uniform_is_log_c() {
        let text = fm(&(0..3).map(|i| basis(4, i)).collect::<Vec<_>>());
        let student = fm(&[basis(4, 3)]);
        let r = loss_cls(&student, &text, &[1], 0.3).unwrap();
        assert!((r.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cls_label_out_of_range() {
        let text = fm(&[basis(2, 0)]);
        let err = loss_cls(&text, &text, &[1], 1.0).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { index: 1, classes: 1 }));
    }

    #[test]
    fn mse_cases() {
        let a = fm(&[basis(3, 0), basis(3, 1)]);
        assert_eq!(loss_mse(&a, &a).unwrap().value, 0.0);
        let b = fm(&[basis(3, 1), basis(3, 2)]);
        let r = loss_mse(&a, &b).unwrap();
        assert_eq!(r.per_sample, vec![2.0, 2.0]);
        // 2(S - T) / N
        assert_eq!(r.grad.row(0), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn mse_id_mismatch() {
        let a = fm(&[basis(2, 0)]);
        let b = a.relabel(vec!["other".into()]).unwrap();
        assert!(matches!(loss_mse(&a, &b), Err(Error::IdMismatch { row: 0 })));
    }

    #[test]
    fn im_cst_single_sample_is_zero() {
        let a = fm(&[vec![0.6, 0.8]]);
        let b = fm(&[basis(2, 0)]);
        let r = loss_im_cst(&a, &b, 0.1).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn im_cst_orthogonal_closed_form() {
        let b = 5;
        let t = fm(&(0..b).map(|i| basis(b, i)).collect::<Vec<_>>());
        let r = loss_im_cst(&t, &t, 1.0).unwrap();
        let expect = -(1.0 / (1.0 + (b as f64 - 1.0) * (-2.0f64).exp())).ln();
        for v in &r.per_sample {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn vlprox_zero_when_student_matches_teacher() {
        let text = fm(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-0.6, 0.8]]);
        let img = fm(&[vec![0.8, 0.6], vec![0.6, 0.8]]);
        let r = loss_vlprox(&img, &img, &text, &[0, 1], 0.5, 2).unwrap();
        assert!(r.value.abs() < 1e-15);
    }

    #[test]
    fn vlprox_filter_gate() {
        let text = fm(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let teacher = fm(&[vec![1.0, 0.0]]);
        let student = fm(&[vec![0.0, 1.0]]);
        // teacher predicts label 0, sample is labelled 1
        let r = loss_vlprox(&student, &teacher, &text, &[1], 0.5, 2).unwrap();
        assert_eq!(r.value, 0.0);
        let r = loss_vlprox_with(&student, &teacher, &text, &[1], 0.5, 2, false).unwrap();
        assert!(r.value > 0.0);
    }

    #[test]
    fn cap_single_class_is_zero() {
        let s = fm(&[vec![0.6, 0.8], vec![1.0, 0.0]]);
        let c = fm(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let r = loss_cap(&s, &c, &[3, 3], 0.2).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn cap_two_class_closed_form() {
        let s = fm(&[basis(2, 0), basis(2, 1)]);
        let c = fm(&[basis(2, 0), basis(2, 1)]);
        let r = loss_cap(&s, &c, &[0, 1], 1.0).unwrap();
        assert!((r.per_sample[0] - (-(E / (E + 1.0)).ln())).abs() < 1e-12);
    }

    #[test]
    fn combine_weights() {
        let s = fm(&[vec![0.6, 0.8], vec![1.0, 0.0]]);
        let t = fm(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let a = loss_mse(&s, &t).unwrap();
        let b = loss_im_cst(&s, &t, 0.5).unwrap();
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), a.clone());
        let mut w = BTreeMap::new();
        w.insert("a".to_string(), 1.0);
        assert_eq!(combine(&m, &w).unwrap(), a);
        m.insert("b".to_string(), b);
        assert!(matches!(combine(&m, &w), Err(Error::MissingWeight(n)) if n == "b"));
        w.insert("b".to_string(), 0.0);
        assert_eq!(combine(&m, &w).unwrap(), a);
    }
}
