use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub value: Vec<f32>,
}

/// Flat list of a network's parameters. Layers refer to entries by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub params: Vec<Param>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            value,
        });
        self.params.len() - 1
    }

    /// He-normal weights for a layer with `fan_in` inputs.
    pub fn add_he(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| normal.sample(rng) as f32).collect();
        self.add(name, shape, value)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Vec<usize>, c: f32) -> usize {
        let n = shape.iter().product();
        self.add(name, shape, vec![c; n])
    }

    pub fn get(&self, idx: usize) -> &[f32] {
        &self.params[idx].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
    }

    /// Layout-only comparison used when loading checkpoints.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Order-sensitive FNV-1a hash of all parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for v in &p.value {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Gradient buffers matching a [`ParamSet`] entry for entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f32>>);

impl Grads {
    pub fn get_mut(&mut self, idx: usize) -> &mut [f32] {
        &mut self.0[idx]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.0 {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|&x| x == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Adaptive-moment optimizer state for one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Vec<f32>>,
    #[serde(skip)]
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = (self.lr / bc1) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params
            .params
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.value.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::default();
        ps.add("w", vec![2], vec![1.0, -1.0]);
        let mut opt = Adam::new(&ps, 0.1);
        opt.update(&mut ps, &Grads(vec![vec![3.0, -0.5]]));
        assert!((ps.get(0)[0] - 0.9).abs() < 1e-6);
        assert!((ps.get(0)[1] + 0.9).abs() < 1e-6);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::default();
        ps.add("w", vec![1], vec![5.0]);
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..2000 {
            let w = ps.get(0)[0];
            opt.update(&mut ps, &Grads(vec![vec![2.0 * (w - 1.5)]]));
        }
        assert!((ps.get(0)[0] - 1.5).abs() < 1e-2);
    }
}
