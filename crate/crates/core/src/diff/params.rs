use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Array, DiffError};

/// Trainable array plus its gradient slot and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Array,
    pub grad: Array,
    pub first_moment: Array,
    pub second_moment: Array,
    pub step: u64,
}

impl Parameter {
    fn new(value: Array) -> Self {
        let shape = value.shape().to_vec();
        Self {
            grad: Array::zeros(&shape),
            first_moment: Array::zeros(&shape),
            second_moment: Array::zeros(&shape),
            value,
            step: 0,
        }
    }
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Parameter>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// On-disk checkpoint: `{"format_version":1,"params":[{"name","shape","data"}]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: Vec<CheckpointEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<(), DiffError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DiffError::DuplicateParameter(name));
        }
        self.params.insert(name, Parameter::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Array> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Array> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name).map(|p| &mut p.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Euclidean norm over every parameter value.
    pub fn value_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.value.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Add `grad` into the gradient slot of `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Array) -> Result<(), DiffError> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))?;
        if p.grad.shape() != grad.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.grad.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    /// Add the gradients of `other` (same layout) into this store.
    pub fn accumulate_grads(&mut self, other: &ParameterStore) -> Result<(), DiffError> {
        for (name, p) in &mut self.params {
            let o = other
                .params
                .get(name)
                .ok_or_else(|| DiffError::UnknownParameter(name.clone()))?;
            p.grad.add_assign(&o.grad);
        }
        Ok(())
    }

    /// One Adam update with bias correction.
    ///
    /// Weight decay is decoupled: `value -= lr * weight_decay * value` is
    /// applied before the Adam delta. Gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), DiffError> {
        if !(cfg.lr > 0.0) {
            return Err(DiffError::InvalidArgument(format!(
                "adam: learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        for p in self.params.values_mut() {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let n = p.value.len();
            for i in 0..n {
                let g = p.grad.data()[i];
                let m = cfg.beta1 * p.first_moment.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.second_moment.data()[i] + (1.0 - cfg.beta2) * g * g;
                p.first_moment.data_mut()[i] = m;
                p.second_moment.data_mut()[i] = v;
                // With beta = 0 the correction factors are 1 - 0^t = 1.
                let m_hat = if c1 > 0.0 { m / c1 } else { m };
                let v_hat = if c2 > 0.0 { v / c2 } else { v };
                let w = &mut p.value.data_mut()[i];
                *w -= cfg.lr * cfg.weight_decay * *w;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            params: self
                .params
                .iter()
                .map(|(name, p)| CheckpointEntry {
                    name: name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
            meta: None,
        }
    }

    /// Overwrite values from a checkpoint. Every parameter of this store must
    /// appear with an identical shape, and the checkpoint may not carry extras.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), DiffError> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(DiffError::Checkpoint(format!(
                "unsupported format_version {}",
                ckpt.format_version
            )));
        }
        if ckpt.params.len() != self.params.len() {
            return Err(DiffError::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.params.len(),
                ckpt.params.len()
            )));
        }
        for entry in &ckpt.params {
            let p = self.params.get_mut(&entry.name).ok_or_else(|| {
                DiffError::Checkpoint(format!("unexpected parameter `{}`", entry.name))
            })?;
            if p.value.shape() != entry.shape.as_slice() {
                return Err(DiffError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint has {:?}",
                    entry.name,
                    p.value.shape(),
                    entry.shape
                )));
            }
            p.value = Array::new(entry.shape.clone(), entry.data.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn load_json(&mut self, json: &str) -> Result<(), DiffError> {
        let ckpt: Checkpoint =
            serde_json::from_str(json).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        self.load_checkpoint(&ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>, grads: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Array::vector(values)).unwrap();
        s.grad_mut("w").unwrap().data_mut().copy_from_slice(&grads);
        s
    }

    #[test]
    fn zero_grad_without_decay_leaves_values() {
        let mut s = store_with(vec![1.0, -2.0, 0.5], vec![0.0; 3]);
        let before = s.value("w").unwrap().clone();
        s.adam_step(&AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        })
        .unwrap();
        assert_eq!(s.value("w").unwrap(), &before);
    }

    #[test]
    fn zero_betas_move_by_lr_times_sign() {
        let mut s = store_with(vec![1.0, 1.0], vec![0.3, -2.0]);
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        s.adam_step(&cfg).unwrap();
        let v = s.value("w").unwrap().data();
        assert!((v[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((v[1] - (1.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_scales_value() {
        let mut s = store_with(vec![2.0], vec![0.0]);
        s.adam_step(&AdamConfig {
            lr: 3e-4,
            weight_decay: 1e-5,
            ..AdamConfig::default()
        })
        .unwrap();
        let expected = 2.0 * (1.0 - 3e-9);
        assert!((s.value("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn gradients_are_zeroed_after_step() {
        let mut s = store_with(vec![1.0], vec![5.0]);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[0.0]);
        assert_eq!(s.get("w").unwrap().step, 1);
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        let mut s = store_with(vec![1.0], vec![1.0]);
        for lr in [0.0, -1.0, f64::NAN] {
            let cfg = AdamConfig {
                lr,
                ..AdamConfig::default()
            };
            assert!(s.adam_step(&cfg).is_err());
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", Array::scalar(1.0)).unwrap();
        assert!(matches!(
            s.insert("a", Array::scalar(2.0)),
            Err(DiffError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_bits() {
        let mut s = ParameterStore::new();
        s.insert("a", Array::vector(vec![0.1, 1.0 / 3.0, -2.5e-300])).unwrap();
        s.insert("b", Array::matrix(1, 2, vec![std::f64::consts::PI, 7.0]).unwrap())
            .unwrap();
        let json = s.to_json();
        assert!(json.starts_with("{\"format_version\":1,\"params\":["));
        let mut t = s.clone();
        t.value_mut("a").unwrap().data_mut()[0] = 99.0;
        t.load_json(&json).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn checkpoint_rejects_wrong_shape_and_names() {
        let mut s = ParameterStore::new();
        s.insert("a", Array::vector(vec![1.0, 2.0])).unwrap();
        let mut bad = s.to_checkpoint();
        bad.params[0].shape = vec![2, 1];
        assert!(s.clone().load_checkpoint(&bad).is_err());
        let mut bad = s.to_checkpoint();
        bad.params[0].name = "z".into();
        assert!(s.clone().load_checkpoint(&bad).is_err());
    }

    #[test]
    fn iteration_order_is_insertion_order() {
        let mut s = ParameterStore::new();
        for name in ["z", "a", "m"] {
            s.insert(name, Array::scalar(0.0)).unwrap();
        }
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["z", "a", "m"]);
    }
}
