//! Named parameters, their gradients and Adam moments.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Array2<F>,
    pub grad: Array2<F>,
    first_moment: Array2<F>,
    second_moment: Array2<F>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore<F> {
    params: Vec<Parameter<F>>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
}

impl<F: Element> ParameterStore<F> {
    pub fn add(&mut self, name: &str, value: Array2<F>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let zeros = Array2::zeros(value.dim());
        self.params.push(Parameter {
            name: name.to_string(),
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds a parameter drawn from N(0, std²).
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: (usize, usize),
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let value = Array2::from_shape_simple_fn(shape, || F::c(normal.sample(rng)));
        self.add(name, value)
    }

    /// Adds a parameter drawn from U(-bound, bound).
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: (usize, usize),
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let value = Array2::from_shape_simple_fn(shape, || F::c(rng.random_range(-bound..=bound)));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: &str, shape: (usize, usize)) -> Result<ParamId> {
        self.add(name, Array2::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in &grads.params {
            self.params[id.0].grad += g;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|&g| {
                let g = g.to_f64().unwrap();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients jointly so their global L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_grad_norm();
        if norm > max_norm {
            let k = F::c(max_norm / norm);
            for p in &mut self.params {
                p.grad.mapv_inplace(|g| g * k);
            }
        }
        norm
    }

    /// One bias-corrected Adam update using the stored gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (fb1, fb2) = (F::c(b1), F::c(b2));
        let (one_b1, one_b2) = (F::c(1.0 - b1), F::c(1.0 - b2));
        let (fc1, fc2) = (F::c(c1), F::c(c2));
        let (lr, eps) = (F::c(cfg.lr), F::c(cfg.eps));
        for p in &mut self.params {
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut p.first_moment)
                .and(&mut p.second_moment)
                .for_each(|w, &g, m, v| {
                    *m = fb1 * *m + one_b1 * g;
                    *v = fb2 * *v + one_b2 * g * g;
                    let m_hat = *m / fc1;
                    let v_hat = *v / fc2;
                    *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }

    /// Converts every parameter to another element type. Optimizer state is
    /// reset.
    pub fn cast<G: Element>(&self) -> ParameterStore<G> {
        let mut out = ParameterStore::<G>::default();
        for p in &self.params {
            let v = p.value.mapv(|x| G::c(x.to_f64().unwrap()));
            out.add(&p.name, v).expect("names already unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParameterStore::<f64>::default();
        let id = s.add("w", array![[1.0]]).unwrap();
        s.params[0].grad.fill(1.0);
        s.adam_step(&AdamConfig { lr: 0.1, ..AdamConfig::default() });
        assert_abs_diff_eq!(s.value(id)[[0, 0]], 0.9, epsilon = 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = ParameterStore::<f64>::default();
        let id = s.add("w", array![[0.5, -2.0]]).unwrap();
        s.adam_step(&AdamConfig { lr: 0.1, ..AdamConfig::default() });
        assert_eq!(s.value(id), &array![[0.5, -2.0]]);
    }

    #[test]
    fn clipping_halves_norm_two() {
        let mut s = ParameterStore::<f64>::default();
        s.add("a", array![[0.0, 0.0]]).unwrap();
        s.add("b", array![[0.0]]).unwrap();
        s.params[0].grad = array![[1.2, 1.6]];
        s.params[1].grad = array![[0.0]];
        assert_abs_diff_eq!(s.clip_global_norm(1.0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.params[0].grad[[0, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(s.params[0].grad[[0, 1]], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn clipping_below_threshold_is_untouched() {
        let mut s = ParameterStore::<f64>::default();
        s.add("a", array![[0.0, 0.0]]).unwrap();
        s.params[0].grad = array![[0.3, 0.4]];
        s.clip_global_norm(1.0);
        assert_eq!(s.params[0].grad, array![[0.3, 0.4]]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f32>::default();
        s.add_zeros("w", (1, 1)).unwrap();
        assert!(s.add_zeros("w", (1, 1)).is_err());
    }
}
