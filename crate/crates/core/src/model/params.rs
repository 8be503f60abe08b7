use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Init, ModelConfig, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors, in the order given by
/// [`ModelConfig::param_specs`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    tensors: IndexMap<String, Tensor>,
}

impl Parameters {
    /// Uniform(-r, r) weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = config.init_range;
        let mut tensors = IndexMap::new();
        for spec in config.param_specs() {
            let n = spec.numel();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform if r == 0.0 => vec![0.0; n],
                Init::Uniform => (0..n).map(|_| rng.random_range(-r..r)).collect(),
            };
            let t = Tensor::new(spec.shape, data)?.with_requires_grad(true);
            tensors.insert(spec.name, t);
        }
        Ok(Parameters { tensors })
    }

    /// Builds from explicit tensors, checking names and shapes against the
    /// config's inventory.
    pub fn from_tensors(config: &ModelConfig, mut given: IndexMap<String, Tensor>) -> Result<Self> {
        let mut tensors = IndexMap::new();
        for spec in config.param_specs() {
            let t = given
                .shift_remove(&spec.name)
                .ok_or_else(|| Error::Format(format!("parameter {:?} missing", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            tensors.insert(spec.name, t.with_requires_grad(true));
        }
        if let Some(extra) = given.keys().next() {
            return Err(Error::Format(format!(
                "unexpected parameter {extra:?} for this model configuration"
            )));
        }
        Ok(Parameters { tensors })
    }

    pub fn entry(&self, name: &str) -> Option<(&str, &Tensor)> {
        self.tensors
            .get_key_value(name)
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(n, _)| ParamGroup::of(n) == Some(group))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds each `(name, grad)` into that parameter's gradient slot.
    pub fn accumulate_grads(&mut self, grads: Vec<(String, Vec<f64>)>) -> Result<()> {
        for (name, g) in grads {
            let t = self.tensors.get_mut(&name).ok_or_else(|| {
                Error::Contract(format!("gradient for unknown parameter {name:?}"))
            })?;
            t.accumulate_grad(&g)?;
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .values()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_clip: 6,
            k: 2,
            d_model: 4,
            d_attn: 4,
            d_fuse: 8,
            heads: 2,
            d_ff: 4,
            d_hidden: 4,
            vocab_size: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let a = Parameters::init(&small(), 1).unwrap();
        assert_eq!(a, Parameters::init(&small(), 1).unwrap());
        assert_ne!(a, Parameters::init(&small(), 2).unwrap());
        assert!(a.all_finite());
        assert_eq!(a.count(), small().param_count());
        assert!(a
            .get("text.ln.gain")
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 1.0));
        assert!(a
            .get("decoder.b_i")
            .unwrap()
            .data()
            .iter()
            .all(|&b| b == 0.0));
        for (_, t) in a.iter() {
            assert!(t.data().iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn from_tensors_rejects_extra_and_missing() {
        let cfg = small();
        let p = Parameters::init(&cfg, 0).unwrap();
        let map: IndexMap<String, Tensor> =
            p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let no_fusion = ModelConfig {
            use_fusion: false,
            ..cfg.clone()
        };
        let err = Parameters::from_tensors(&no_fusion, map.clone()).unwrap_err();
        assert!(err.to_string().contains("unexpected parameter"), "{err}");
        let mut missing = map;
        missing.shift_remove("decoder.w_h");
        assert!(Parameters::from_tensors(&cfg, missing).is_err());
    }
}
