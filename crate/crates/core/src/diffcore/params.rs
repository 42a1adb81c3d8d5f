use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Named, shape-fixed parameter groups with per-group freeze flags.
///
/// Groups keep their insertion order, which is also the order used for
/// checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::validation(format!(
                "duplicate parameter group `{name}`"
            )));
        }
        let id = self.groups.len();
        self.index.insert(name.clone(), id);
        self.groups.push(ParamGroup {
            name,
            value,
            frozen: false,
        });
        Ok(id)
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.groups[self.id(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.groups[id].value)
    }

    pub fn group(&self, id: usize) -> &ParamGroup {
        &self.groups[id]
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn is_frozen(&self, id: usize) -> bool {
        self.groups[id].frozen
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let id = self.id(name)?;
        self.groups[id].frozen = frozen;
        Ok(())
    }

    /// Sets the freeze flag on every group whose name starts with `prefix.`
    /// (or equals `prefix`). Returns the number of groups touched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for g in &mut self.groups {
            if matches_prefix(&g.name, prefix) {
                g.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for g in &mut self.groups {
            g.frozen = frozen;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.groups.iter().map(|g| g.value.len()).sum()
    }

    /// Order-sensitive FNV-1a over names and values, for freeze-contract checks.
    pub fn checksum(&self, prefix: Option<&str>) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        };
        for g in &self.groups {
            if let Some(p) = prefix {
                if !matches_prefix(&g.name, p) {
                    continue;
                }
            }
            g.name.bytes().for_each(&mut eat);
            for v in g.value.data() {
                v.to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}

pub(crate) fn matches_prefix(name: &str, prefix: &str) -> bool {
    name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Per-group gradients aligned with a [`ParamStore`]. Frozen groups hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            names: store.groups().iter().map(|g| g.name.clone()).collect(),
            grads: store
                .groups()
                .iter()
                .map(|g| Tensor::zeros(g.value.rows(), g.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.grads[id]
    }

    pub(crate) fn by_id_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.grads[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn sq_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum()
    }

    /// Sum of squared entries over groups whose name starts with `prefix`.
    pub fn sq_norm_prefix(&self, prefix: &str) -> f64 {
        self.iter()
            .filter(|(n, _)| matches_prefix(n, prefix))
            .map(|(_, g)| g.sq_norm())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(1, 1)).unwrap();
        assert!(s.insert("a", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn prefix_matching_respects_component_boundary() {
        assert!(matches_prefix("decoder.layer0.wq", "decoder"));
        assert!(matches_prefix("decoder", "decoder"));
        assert!(!matches_prefix("decoder_extra.w", "decoder"));
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::zeros(2, 2)).unwrap();
        s.insert("b.w", Tensor::zeros(2, 2)).unwrap();
        let before = s.checksum(Some("a"));
        s.get_mut("b.w").unwrap().set(0, 0, 1.0);
        assert_eq!(before, s.checksum(Some("a")));
        s.get_mut("a.w").unwrap().set(0, 0, 1.0);
        assert_ne!(before, s.checksum(Some("a")));
    }
}
