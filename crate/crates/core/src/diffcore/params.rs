use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to one entry of a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

/// Named trainable tensors with insertion-ordered iteration.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameter `{name}` has non-finite values"
            )));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].grad.as_deref()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Adds gradients to the stored accumulators. Repeated calls sum.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        for (id, g) in grads {
            let entry = &mut self.entries[id.0];
            if g.len() != entry.value.numel() {
                return Err(Error::shape(
                    "accumulate",
                    format!(
                        "gradient of `{}` has {} values, expected {}",
                        entry.name,
                        g.len(),
                        entry.value.numel()
                    ),
                ));
            }
            match &mut entry.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => entry.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Scales every populated gradient, e.g. to average over a mini-batch.
    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            if let Some(g) = &mut e.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Plain SGD on every parameter accepted by `select`: `p <- p - lr * grad`.
    /// All gradients are cleared afterwards, including unselected ones.
    pub fn sgd_step<F>(&mut self, lr: f64, select: F) -> Result<()>
    where
        F: Fn(&str) -> bool,
    {
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| select(&e.name) && e.grad.is_none())
        {
            return Err(Error::State(format!(
                "parameter `{}` has no gradient",
                e.name
            )));
        }
        for e in self.entries.iter_mut().filter(|e| select(&e.name)) {
            let g = e.grad.as_ref().expect("checked above");
            for (p, d) in e.value.data.iter_mut().zip(g) {
                *p -= lr * d;
            }
        }
        for e in self.entries.iter().filter(|e| select(&e.name)) {
            if e.value.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter `{}` became non-finite",
                    e.name
                )));
            }
        }
        self.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_update_rule() {
        let mut ps = ParamSet::new();
        let id = ps
            .insert("p", Tensor::new(vec![1], vec![1.0]).unwrap())
            .unwrap();
        ps.accumulate(&[(id, vec![2.0])]).unwrap();
        ps.sgd_step(0.1, |_| true).unwrap();
        assert!((ps.get(id).data[0] - 0.8).abs() < 1e-15);
        assert!(ps.grad(id).is_none());
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = ParamSet::new();
        let id = ps
            .insert("p", Tensor::new(vec![2], vec![0.3, -1.5]).unwrap())
            .unwrap();
        ps.accumulate(&[(id, vec![7.0, 9.0])]).unwrap();
        ps.sgd_step(0.0, |_| true).unwrap();
        assert_eq!(ps.get(id).data, vec![0.3, -1.5]);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::zeros(vec![1])).unwrap();
        let err = ps.sgd_step(0.1, |_| true).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn accumulation_is_additive() {
        let mut ps = ParamSet::new();
        let id = ps.insert("a", Tensor::zeros(vec![2])).unwrap();
        ps.accumulate(&[(id, vec![1.0, -2.0])]).unwrap();
        ps.accumulate(&[(id, vec![1.0, -2.0])]).unwrap();
        assert_eq!(ps.grad(id).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::zeros(vec![1])).unwrap();
        assert!(ps.insert("a", Tensor::zeros(vec![1])).is_err());
    }
}
