//! Vision-only student: a ReLU MLP backbone (possibly empty), a linear
//! projection to the teacher dimension and L2 normalization.
//!
//! Parameters live in one flat vector so the optimizer and checksums stay
//! trivial. Layout: for each hidden layer `W (out x in)` then `b (out)`,
//! followed by the bias-free projection `P (embed x last)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{dot, l2_norm, FeatureKind, FeatureMatrix, Matrix, ZERO_NORM};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSpec {
    pub input_dim: usize,
    pub embed_dim: usize,
    /// Hidden layer widths; empty gives a linear student.
    pub hidden: Vec<usize>,
}

impl Default for StudentSpec {
    fn default() -> Self {
        Self { input_dim: 32, embed_dim: 20, hidden: vec![64] }
    }
}

impl StudentSpec {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len());
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    fn last_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum::<usize>() + self.embed_dim * self.last_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::ConfigInvalid(format!("student layers must be nonempty: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    spec: StudentSpec,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, needed for backward.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Per row: input followed by every post-ReLU activation.
    activations: Vec<Vec<Vec<f64>>>,
    outputs: FeatureMatrix,
    norms: Vec<f64>,
}

impl Tape {
    pub fn outputs(&self) -> &FeatureMatrix {
        &self.outputs
    }
}

impl StudentModel {
    /// He-initialized hidden layers, zero biases, `N(0, 1/width)` projection.
    pub fn new(spec: StudentSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for (i, o) in spec.layer_dims() {
            let sd = (2.0 / i as f64).sqrt();
            params.extend((0..i * o).map(|_| sd * rng.sample::<f64, _>(StandardNormal)));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        let sd = (1.0 / spec.last_width() as f64).sqrt();
        params.extend((0..spec.embed_dim * spec.last_width()).map(|_| sd * rng.sample::<f64, _>(StandardNormal)));
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: StudentSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::DimMismatch { expected: spec.param_count(), got: params.len() });
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &StudentSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// CRC32 over the little-endian parameter bytes.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        self.params.iter().for_each(|p| h.update(&p.to_le_bytes()));
        h.finalize()
    }

    fn check_inputs(&self, ids: &[String], inputs: &[f64]) -> Result<()> {
        if inputs.len() != ids.len() * self.spec.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} input values for {} rows of width {}",
                inputs.len(),
                ids.len(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    /// Unit-norm features for row-major `inputs`.
    pub fn forward(&self, ids: &[String], inputs: &[f64]) -> Result<FeatureMatrix> {
        Ok(self.forward_tape(ids, inputs)?.outputs)
    }

    pub fn forward_tape(&self, ids: &[String], inputs: &[f64]) -> Result<Tape> {
        self.check_inputs(ids, inputs)?;
        let d_in = self.spec.input_dim;
        let e = self.spec.embed_dim;
        let mut activations = Vec::with_capacity(ids.len());
        let mut out = Vec::with_capacity(ids.len() * e);
        let mut norms = Vec::with_capacity(ids.len());
        for (r, x) in inputs.chunks_exact(d_in).enumerate() {
            let mut acts = vec![x.to_vec()];
            let mut offset = 0;
            for (i, o) in self.spec.layer_dims() {
                let w = &self.params[offset..offset + i * o];
                let b = &self.params[offset + i * o..offset + i * o + o];
                let prev = acts.last().expect("input present");
                let next: Vec<f64> = (0..o).map(|k| (dot(&w[k * i..(k + 1) * i], prev) + b[k]).max(0.0)).collect();
                acts.push(next);
                offset += i * o + o;
            }
            let h = acts.last().expect("input present");
            let width = h.len();
            let p = &self.params[offset..];
            let z: Vec<f64> = (0..e).map(|k| dot(&p[k * width..(k + 1) * width], h)).collect();
            let norm = l2_norm(&z);
            if norm < ZERO_NORM {
                return Err(Error::ZeroRow(r));
            }
            out.extend(z.iter().map(|v| v / norm));
            norms.push(norm);
            activations.push(acts);
        }
        let outputs = FeatureMatrix::new(FeatureKind::StudentVisual, ids.to_vec(), e, out)?;
        Ok(Tape { activations, outputs, norms })
    }

    /// Parameter gradient given the gradient with respect to the unit-norm
    /// outputs of `tape`.
    pub fn backward(&self, tape: &Tape, grad_out: &Matrix) -> Result<Vec<f64>> {
        let e = self.spec.embed_dim;
        if grad_out.rows != tape.norms.len() || grad_out.cols != e {
            return Err(Error::ShapeMismatch("output gradient shape".into()));
        }
        let layers = self.spec.layer_dims();
        let proj_offset = self.params.len() - e * self.spec.last_width();
        let mut grad = vec![0.0; self.params.len()];
        for (r, acts) in tape.activations.iter().enumerate() {
            let g = grad_out.row(r);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let u = tape.outputs.row(r);
            let ug = dot(u, g);
            let gz: Vec<f64> = g.iter().zip(u).map(|(gi, ui)| (gi - ui * ug) / tape.norms[r]).collect();
            let h = acts.last().expect("input present");
            let width = h.len();
            let p = &self.params[proj_offset..];
            let mut gh = vec![0.0; width];
            for (k, gzk) in gz.iter().enumerate() {
                let row = &mut grad[proj_offset + k * width..proj_offset + (k + 1) * width];
                for ((gp, hj), (ghj, pj)) in row.iter_mut().zip(h).zip(gh.iter_mut().zip(&p[k * width..])) {
                    *gp += gzk * hj;
                    *ghj += gzk * pj;
                }
            }
            let mut offset = proj_offset;
            for (l, &(i, o)) in layers.iter().enumerate().rev() {
                offset -= i * o + o;
                let post = &acts[l + 1];
                let prev = &acts[l];
                let gpre: Vec<f64> = gh.iter().zip(post).map(|(g, a)| if *a > 0.0 { *g } else { 0.0 }).collect();
                let mut gprev = vec![0.0; i];
                for (k, gk) in gpre.iter().enumerate() {
                    if *gk == 0.0 {
                        continue;
                    }
                    let w = &self.params[offset + k * i..offset + (k + 1) * i];
                    let gw = &mut grad[offset + k * i..offset + (k + 1) * i];
                    for ((gwj, pj), (gpj, wj)) in gw.iter_mut().zip(prev).zip(gprev.iter_mut().zip(w)) {
                        *gwj += gk * pj;
                        *gpj += gk * wj;
                    }
                    grad[offset + i * o + k] += gk;
                }
                gh = gprev;
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i}")).collect()
    }

    #[test]
    fn outputs_unit_norm_and_deterministic() {
        let spec = StudentSpec { input_dim: 5, embed_dim: 4, hidden: vec![7, 6] };
        let a = StudentModel::new(spec.clone(), 3).unwrap();
        let b = StudentModel::new(spec, 3).unwrap();
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let fa = a.forward(&ids(3), &x).unwrap();
        assert!(fa.is_normalized(1e-12));
        assert_eq!(fa, b.forward(&ids(3), &x).unwrap());
        assert_eq!(a.param_count(), 5 * 7 + 7 + 7 * 6 + 6 + 4 * 6);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = StudentSpec { input_dim: 4, embed_dim: 3, hidden: vec![5] };
        let model = StudentModel::new(spec.clone(), 11).unwrap();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.91).cos()).collect();
        let weights = [0.3, -1.2, 0.7, 0.2, 0.5, -0.4];
        let objective = |m: &StudentModel| -> f64 {
            let f = m.forward(&ids(2), &x).unwrap();
            f.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let tape = model.forward_tape(&ids(2), &x).unwrap();
        let g = Matrix { rows: 2, cols: 3, data: weights.to_vec() };
        let grad = model.backward(&tape, &g).unwrap();
        let eps = 1e-6;
        for (p, g) in grad.iter().enumerate() {
            let mut plus = model.clone();
            plus.params_mut()[p] += eps;
            let mut minus = model.clone();
            minus.params_mut()[p] -= eps;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            assert!((fd - g).abs() < 1e-6, "param {p}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn bad_input_width() {
        let m = StudentModel::new(StudentSpec::default(), 0).unwrap();
        assert!(matches!(m.forward(&ids(1), &[0.0; 3]), Err(Error::ShapeMismatch(_))));
    }
}
