//! Named, versioned storage for one node's trainable weights.

use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};

/// All trainable weights of one node as named slices. Slice names are
/// unique and the total scalar count is fixed after construction; the
/// version counter increments once per optimizer step.
#[derive(Clone, Debug)]
pub struct ParameterSet {
    slices: BTreeMap<String, Tensor>,
    total: usize,
    version: u64,
}

impl ParameterSet {
    pub fn new(slices: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut total = 0;
        for (name, tensor) in slices {
            total += tensor.numel();
            if map.insert(name.clone(), tensor).is_some() {
                return Err(TensorError::DuplicateName(name));
            }
        }
        Ok(ParameterSet { slices: map, total, version: 0 })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slices.get(name).ok_or_else(|| TensorError::MissingSlice(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.slices.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slices.keys().map(|s| s.as_str())
    }

    pub fn total_scalars(&self) -> usize {
        self.total
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// In-place update written by the optimizer. The replacement must
    /// match the existing slice shape, keeping the total count constant.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .slices
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingSlice(name.into()))?;
        if slot.shape() != tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParameterSet::set",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Restores a persisted version counter when loading a checkpoint.
    pub fn restore_version(&mut self, version: u64) {
        self.version = version;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_slice_names_rejected() {
        let err = ParameterSet::new(vec![
            ("w".to_string(), Tensor::zeros(vec![2])),
            ("w".to_string(), Tensor::zeros(vec![3])),
        ])
        .unwrap_err();
        assert!(matches!(err, TensorError::DuplicateName(_)));
    }

    #[test]
    fn set_enforces_shape_and_total_stays_fixed() {
        let mut params = ParameterSet::new(vec![
            ("w".to_string(), Tensor::zeros(vec![2, 3])),
            ("b".to_string(), Tensor::zeros(vec![2])),
        ])
        .unwrap();
        assert_eq!(params.total_scalars(), 8);
        params.set("b", Tensor::filled(vec![2], 1.0)).unwrap();
        assert_eq!(params.total_scalars(), 8);
        let err = params.set("b", Tensor::zeros(vec![3])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
        assert!(matches!(
            params.set("missing", Tensor::zeros(vec![1])),
            Err(TensorError::MissingSlice(_))
        ));
    }

    #[test]
    fn version_counts_steps() {
        let mut params =
            ParameterSet::new(vec![("w".to_string(), Tensor::zeros(vec![1]))]).unwrap();
        assert_eq!(params.version(), 0);
        params.bump_version();
        params.bump_version();
        assert_eq!(params.version(), 2);
    }
}
