use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};

type Mat = DMatrix<f64>;

/// Named parameter tensors plus their adaptive-moment state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
    first_moment: Vec<Mat>,
    second_moment: Vec<Mat>,
    steps: u64,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Register a parameter; panics on a duplicate name (a model-construction bug).
    pub fn insert(&mut self, name: &str, value: Mat) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let id = self.values.len();
        self.first_moment
            .push(Mat::zeros(value.nrows(), value.ncols()));
        self.second_moment
            .push(Mat::zeros(value.nrows(), value.ncols()));
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn insert_glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let m = Mat::from_fn(rows, cols, |_, _| rng.random_range(-a..a));
        self.insert(name, m)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.insert(name, Mat::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.fill(0.0);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copy values for every name of `self` from `other`. Fails listing the
    /// names `other` lacks; shapes must agree.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        let missing: Vec<String> = self
            .names
            .iter()
            .filter(|n| other.id(n).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingParams(missing));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other.get(name).expect("checked above");
            if src.shape() != self.values[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter '{name}' has shape {:?} in checkpoint, {:?} in model",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i].copy_from(src);
        }
        Ok(())
    }

    /// Bias-corrected Adam update. Fails, naming the parameter, on any
    /// non-finite gradient; nothing is modified in that case.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for (id, g) in grads.iter() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of '{}'",
                    self.names[id]
                )));
            }
            if g.shape() != self.values[id].shape() {
                return Err(Error::Shape(format!(
                    "gradient shape mismatch for '{}'",
                    self.names[id]
                )));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (id, g) in grads.iter() {
            let m = &mut self.first_moment[id];
            let v = &mut self.second_moment[id];
            let w = &mut self.values[id];
            for k in 0..g.len() {
                let gk = g[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                w[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameter gradients keyed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_id: BTreeMap<usize, Mat>,
}

impl Gradients {
    pub fn accumulate(&mut self, id: usize, g: Mat) {
        match self.by_id.get_mut(&id) {
            Some(existing) => *existing += g,
            None => {
                self.by_id.insert(id, g);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.by_id {
            self.accumulate(id, g);
        }
    }

    pub fn get(&self, id: usize) -> Option<&Mat> {
        self.by_id.get(&id)
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.by_id.values_mut() {
            *g *= c;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Mat)> {
        self.by_id.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Global L2 norm; used for clipping.
    pub fn norm(&self) -> f64 {
        self.by_id
            .values()
            .map(|g| g.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Mat::from_row_slice(1, 3, &[1.0, -2.0, 0.0]));
        let mut g = Gradients::default();
        g.accumulate(id, Mat::from_row_slice(1, 3, &[0.3, -40.0, 1e-3]));
        store.adam_step(&g, &AdamConfig::with_lr(0.01)).unwrap();
        let w = store.value(id);
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 0.01)).abs() < 1e-6);
        assert!((w[2] - (0.0 - 0.01)).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Mat::from_element(2, 2, 0.7));
        let mut g = Gradients::default();
        g.accumulate(id, Mat::zeros(2, 2));
        for _ in 0..10 {
            store.adam_step(&g, &AdamConfig::with_lr(0.1)).unwrap();
        }
        assert_eq!(store.value(id), &Mat::from_element(2, 2, 0.7));
    }

    #[test]
    fn quadratic_converges() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Mat::from_element(1, 1, 0.75));
        let target = -0.25;
        let cfg = AdamConfig::with_lr(1e-2);
        let mut steps = 0;
        while (store.value(id)[0] - target).abs() > 1e-6 && steps < 2000 {
            let mut g = Gradients::default();
            g.accumulate(
                id,
                Mat::from_element(1, 1, 2.0 * (store.value(id)[0] - target)),
            );
            store.adam_step(&g, &cfg).unwrap();
            steps += 1;
        }
        assert!(
            (store.value(id)[0] - target).abs() <= 1e-6,
            "after {steps} steps: {}",
            store.value(id)[0]
        );
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("a", Mat::zeros(1, 1));
        let b = store.insert("decoder.bias", Mat::zeros(1, 2));
        let mut g = Gradients::default();
        g.accumulate(b, Mat::from_row_slice(1, 2, &[0.0, f64::NAN]));
        let err = store.adam_step(&g, &AdamConfig::with_lr(0.1)).unwrap_err();
        assert!(err.to_string().contains("decoder.bias"));
        assert_eq!(store.steps(), 0);
    }

    #[test]
    fn assign_lists_missing_names() {
        let mut a = ParamStore::new();
        a.insert("x", Mat::zeros(1, 1));
        a.insert("y", Mat::zeros(1, 1));
        let mut b = ParamStore::new();
        b.insert("x", Mat::from_element(1, 1, 2.0));
        match a.assign_from(&b) {
            Err(Error::MissingParams(names)) => assert_eq!(names, vec!["y".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
