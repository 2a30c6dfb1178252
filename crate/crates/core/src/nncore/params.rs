use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{BatchStats, Graph, NnError, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub architecture_id: String,
    pub training_config_hash: String,
    pub epoch: u32,
    /// Free-form training outputs (held-out metrics, input shape, modes).
    #[serde(default)]
    pub info: BTreeMap<String, serde_json::Value>,
}

impl ModelMeta {
    pub fn new(architecture_id: impl Into<String>) -> Self {
        Self {
            architecture_id: architecture_id.into(),
            ..Self::default()
        }
    }

    pub fn info_f64(&self, key: &str) -> Option<f64> {
        self.info.get(key).and_then(|v| v.as_f64())
    }

    pub fn info_str(&self, key: &str) -> Option<&str> {
        self.info.get(key).and_then(|v| v.as_str())
    }
}

/// Ordered, uniquely named tensors of one network. Tensors with
/// `requires_grad == false` are buffers (e.g. running statistics).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: IndexMap<String, Tensor>,
    pub meta: ModelMeta,
}

/// Graph handles for every tensor of a [`ModelParams`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, NnError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }
}

impl ModelParams {
    pub fn new(meta: ModelMeta) -> Self {
        Self {
            entries: IndexMap::new(),
            meta,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|t| t.is_trainable())
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Places every tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.entries.iter().map(|(k, t)| (k.clone(), g.leaf(t))).collect(),
        }
    }

    /// Adds the leaf gradients computed by `g.backward` into each tensor's accumulator.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) -> Result<(), NnError> {
        for (name, var) in &bound.vars {
            if let Some(grad) = g.grad(*var) {
                self.get_mut(name)?.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Exponential moving update of `{prefix}.running_mean` / `{prefix}.running_var`.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats, momentum: f64) -> Result<(), NnError> {
        for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let t = self.get_mut(&format!("{prefix}.{suffix}"))?;
            if t.numel() != values.len() {
                return Err(NnError::Shape(format!(
                    "{prefix}.{suffix} has {} channels, stats have {}",
                    t.numel(),
                    values.len()
                )));
            }
            for (r, v) in t.data_mut().iter_mut().zip(values.iter()) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut p = ModelParams::new(ModelMeta::new("t"));
        p.insert("b", Tensor::zeros(vec![1])).unwrap();
        p.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(vec![2])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), ["b", "a"]);
    }

    #[test]
    fn grads_flow_back_into_params() {
        let mut p = ModelParams::new(ModelMeta::new("t"));
        p.insert("w", Tensor::new(vec![2], vec![1.0, 3.0]).unwrap().requires_grad(true))
            .unwrap();
        p.insert("buf", Tensor::new(vec![2], vec![5.0, 5.0]).unwrap()).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let w = b.get("w").unwrap();
            let buf = b.get("buf").unwrap();
            let y = g.mul(w, buf).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
            p.accumulate_grads(&g, &b).unwrap();
        }
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[10.0, 10.0]);
        assert!(p.get("buf").unwrap().grad().is_none());
    }
}
