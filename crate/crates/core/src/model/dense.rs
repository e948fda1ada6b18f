use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Affine map `y = W x + b` with `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weights = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [self.outputs, self.inputs]
    }

    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weights, &mut self.bias)
    }

    /// `W [a ; b] + bias`, where `a.len() + b.len() == inputs`.
    pub(crate) fn affine2(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(a.len() + b.len(), self.inputs);
        let split = a.len();
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let mut acc = self.bias[o];
                for (w, x) in row[..split].iter().zip(a) {
                    acc += w * x;
                }
                for (w, x) in row[split..].iter().zip(b) {
                    acc += w * x;
                }
                acc
            })
            .collect()
    }

    pub(crate) fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.affine2(x, &[])
    }

    /// Accumulates `dW += dz [a ; b]^T`, `db += dz` into `grad` and adds
    /// `W^T dz` into `da` and `db_in`.
    pub(crate) fn backward2(
        &self,
        a: &[f64],
        b: &[f64],
        dz: &[f64],
        grad: &mut Dense,
        da: &mut [f64],
        db_in: &mut [f64],
    ) {
        let split = a.len();
        for (o, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = o * self.inputs;
            let w = &self.weights[row..row + self.inputs];
            let gw = &mut grad.weights[row..row + self.inputs];
            for (idx, x) in a.iter().enumerate() {
                gw[idx] += g * x;
                da[idx] += g * w[idx];
            }
            for (idx, x) in b.iter().enumerate() {
                gw[split + idx] += g * x;
                db_in[idx] += g * w[split + idx];
            }
        }
    }
}

/// `tanh` applied in place.
pub(crate) fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_and_backward_agree() {
        let mut d = Dense::zeros(3, 2);
        d.weights = vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        d.bias = vec![0.1, -0.2];
        let y = d.affine2(&[1.0, 1.0], &[2.0]);
        assert_eq!(y, vec![0.1 + 1.0 + 2.0 + 6.0, -0.2 - 1.0 + 0.5]);

        let mut g = Dense::zeros(3, 2);
        let mut da = vec![0.0; 2];
        let mut db = vec![0.0; 1];
        d.backward2(&[1.0, 1.0], &[2.0], &[1.0, 2.0], &mut g, &mut da, &mut db);
        assert_eq!(g.bias, vec![1.0, 2.0]);
        assert_eq!(g.weights, vec![1.0, 1.0, 2.0, 2.0, 2.0, 4.0]);
        assert_eq!(da, vec![1.0 - 2.0, 2.0 + 1.0]);
        assert_eq!(db, vec![3.0]);
    }
}
