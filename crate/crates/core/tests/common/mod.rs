//! Brute-force reference implementations, written independently of the
//! library code paths they check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vlmd::{FeatureKind, FeatureMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn matrix(kind: FeatureKind, prefix: &str, rows: &[Vec<f64>]) -> FeatureMatrix {
    let ids = (0..rows.len()).map(|i| format!("{prefix}{i}")).collect();
    FeatureMatrix::from_rows(kind, ids, rows).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, kind: FeatureKind, n: usize, d: usize) -> FeatureMatrix {
    matrix(kind, "r", &unit_rows(rng, n, d))
}

pub fn rows_of(m: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}

pub fn dotp(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// Indices of `others` sorted by distance to `q`, stable on index.
pub fn sorted_by_distance(q: &[f64], others: &[Vec<f64>], skip: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..others.len()).filter(|&j| Some(j) != skip).collect();
    idx.sort_by(|&a, &b| dist2(q, &others[a]).partial_cmp(&dist2(q, &others[b])).unwrap().then(a.cmp(&b)));
    idx
}

pub fn brute_rel(s: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let hits = (0..s.len()).filter(|&i| sorted_by_distance(&s[i], t, None)[0] == i).count();
    hits as f64 / s.len() as f64
}

pub fn brute_neigh(s: &[Vec<f64>], t: &[Vec<f64>], k: usize) -> f64 {
    let mut total = 0usize;
    for i in 0..s.len() {
        let a: Vec<usize> = sorted_by_distance(&s[i], s, Some(i))[..k].to_vec();
        let b: Vec<usize> = sorted_by_distance(&t[i], t, Some(i))[..k].to_vec();
        total += a.iter().filter(|x| b.contains(x)).count();
    }
    total as f64 / (k * s.len()) as f64
}

pub fn brute_inversions(a: &[f64]) -> usize {
    let mut c = 0;
    for p in 0..a.len() {
        for q in p + 1..a.len() {
            if a[p] > a[q] {
                c += 1;
            }
        }
    }
    c
}

pub fn brute_vlalign(s: &[Vec<f64>], t: &[Vec<f64>], text: &[Vec<f64>], k: usize) -> f64 {
    let mut total = 0usize;
    for i in 0..s.len() {
        let order = &sorted_by_distance(&t[i], text, None)[..k];
        let arr: Vec<f64> = order.iter().map(|&y| dist2(&s[i], &text[y])).collect();
        total += brute_inversions(&arr);
    }
    total as f64 / s.len() as f64
}

pub fn brute_cosine_mean(rows: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let c = dotp(&rows[i], &rows[j]) / (dotp(&rows[i], &rows[i]).sqrt() * dotp(&rows[j], &rows[j]).sqrt());
            sum += c;
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Singular values of the column-centered matrix by one-sided Jacobi
/// rotations, descending.
pub fn jacobi_singular_values(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            rows.iter().map(|r| r[j] - mean).collect()
        })
        .collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in p + 1..d {
                let alpha = dotp(&cols[p], &cols[p]);
                let beta = dotp(&cols[q], &cols[q]);
                let gamma = dotp(&cols[p], &cols[q]);
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(f64::MIN_POSITIVE));
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (head, tail) = cols.split_at_mut(q);
                for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                    (*x, *y) = (c * *x - s * *y, s * *x + c * *y);
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| dotp(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let plus = f(&x);
            x[i] = orig - eps;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// max |a - b| / max(|a|, |b|, floor) over entries.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

/// Tip-Adapter style logits evaluated straight from the definition.
pub fn retrieval_oracle(
    q: &[Vec<f64>],
    cache: &[Vec<f64>],
    cache_labels: &[usize],
    text: &[Vec<f64>],
    alpha: f64,
    beta: f64,
) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = (0..text.len())
                .map(|c| {
                    let mut a = 0.0;
                    for (f, &y) in cache.iter().zip(cache_labels) {
                        if y == c {
                            a += (-beta * (1.0 - dotp(qi, f))).exp();
                        }
                    }
                    alpha * a + dotp(qi, &text[c])
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            logits.iter().map(|l| (l - m).exp() / z).collect()
        })
        .collect()
}
