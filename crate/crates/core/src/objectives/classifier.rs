use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, Mat, Rng};

/// Standard deviation of newly added output rows.
pub const NEW_ROW_STD: f64 = 0.02;

/// Relation classifier `g_φ`: one tanh hidden layer, then one logit row per
/// known relation. Relation ids are the row indices, assigned in arrival order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// Hidden activations kept for the backward pass.
pub struct ClassifierCache {
    hidden: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierGrad {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl Classifier {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let sd = 1.0 / (input as f64).sqrt();
        Classifier {
            w1: Mat::from_fn(hidden, input, |_, _| sd * rng.normal()),
            b1: vec![0.0; hidden],
            w2: Mat::zeros(0, hidden),
            b2: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn classes(&self) -> usize {
        self.w2.rows()
    }

    /// Appends `n` output rows; existing rows are untouched.
    pub fn grow(&mut self, n: usize, rng: &mut Rng) {
        let h = self.w1.rows();
        let fresh = Mat::from_fn(n, h, |_, _| NEW_ROW_STD * rng.normal());
        self.w2 = Mat::vstack(&self.w2, &fresh).expect("same hidden width");
        self.b2.extend(std::iter::repeat_n(0.0, n));
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(z)?.0)
    }

    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, ClassifierCache)> {
        if z.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "classifier input {} vs feature {}",
                self.input_dim(),
                z.len()
            )));
        }
        let hidden: Vec<f64> = (0..self.w1.rows())
            .map(|i| (dot(self.w1.row(i), z) + self.b1[i]).tanh())
            .collect();
        let logits = (0..self.w2.rows())
            .map(|r| dot(self.w2.row(r), &hidden) + self.b2[r])
            .collect();
        Ok((logits, ClassifierCache { hidden }))
    }

    /// Accumulates `∂/∂φ` into `grad` and returns `∂/∂z`.
    pub fn backward(&self, z: &[f64], cache: &ClassifierCache, d_logits: &[f64], grad: &mut ClassifierGrad) -> Vec<f64> {
        let h = &cache.hidden;
        let mut dh = vec![0.0; h.len()];
        for (r, &g) in d_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b2[r] += g;
            for ((gw, &hv), (dhv, &w)) in grad.w2.row_mut(r).iter_mut().zip(h).zip(dh.iter_mut().zip(self.w2.row(r))) {
                *gw += g * hv;
                *dhv += g * w;
            }
        }
        let mut dz = vec![0.0; z.len()];
        for i in 0..h.len() {
            let dpre = dh[i] * (1.0 - h[i] * h[i]);
            grad.b1[i] += dpre;
            for ((gw, &zv), (dzv, &w)) in grad.w1.row_mut(i).iter_mut().zip(z).zip(dz.iter_mut().zip(self.w1.row(i))) {
                *gw += dpre * zv;
                *dzv += dpre * w;
            }
        }
        dz
    }

    pub fn predict(&self, z: &[f64]) -> Result<usize> {
        let logits = self.logits(z)?;
        // first maximum wins
        Ok(logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0)
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.w1.as_slice().to_vec();
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn flat_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.w1.as_slice().len()).map(|i| format!("classifier.w1[{i}]")).collect();
        out.extend((0..self.b1.len()).map(|i| format!("classifier.b1[{i}]")));
        out.extend((0..self.w2.as_slice().len()).map(|i| format!("classifier.w2[{i}]")));
        out.extend((0..self.b2.len()).map(|i| format!("classifier.b2[{i}]")));
        out
    }

    pub fn nudge(&mut self, i: usize, delta: f64) {
        let mut rest = i;
        for s in [self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2] {
            if rest < s.len() {
                s[rest] += delta;
                return;
            }
            rest -= s.len();
        }
        panic!("coordinate {i} outside classifier");
    }

    pub fn sgd_step(&mut self, grad: &ClassifierGrad, lr: f64) {
        super::sgd_step(self.w1.as_mut_slice(), grad.w1.as_slice(), lr);
        super::sgd_step(&mut self.b1, &grad.b1, lr);
        super::sgd_step(self.w2.as_mut_slice(), grad.w2.as_slice(), lr);
        super::sgd_step(&mut self.b2, &grad.b2, lr);
    }
}

impl ClassifierGrad {
    pub fn zeros_like(c: &Classifier) -> Self {
        ClassifierGrad {
            w1: Mat::zeros(c.w1.rows(), c.w1.cols()),
            b1: vec![0.0; c.b1.len()],
            w2: Mat::zeros(c.w2.rows(), c.w2.cols()),
            b2: vec![0.0; c.b2.len()],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.w1.as_slice().to_vec();
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in self
            .w1
            .as_mut_slice()
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.as_mut_slice().iter_mut())
            .chain(self.b2.iter_mut())
        {
            *v *= s;
        }
    }
}
