//! Named parameter enumeration.
//!
//! Every trainable parameter struct lists its tensors in a fixed order. The
//! gradient for a parameter struct is a value of the same type, so optimizers
//! and checkpoints can zip the two lists.

use crate::scalar::Scalar;

/// A named view of one parameter tensor.
pub struct NamedTensor<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub trait ParamSet<T> {
    /// Tensors in canonical order, names relative to the owning layer.
    fn tensors(&self) -> Vec<NamedTensor<'_, T>>;

    /// Mutable slices in the same order as [`ParamSet::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// All tensors concatenated in canonical order.
    fn to_flat(&self) -> Vec<T>
    where
        T: Copy,
    {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::to_flat`]; `flat` must have `param_count` values.
    fn set_flat(&mut self, flat: &[T])
    where
        T: Copy,
    {
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

/// A copy of `p` with every trainable tensor zeroed (buffers are kept).
pub fn zeroed<T: Scalar, P: ParamSet<T> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    for t in z.tensors_mut() {
        t.fill(T::zero());
    }
    z
}

pub(crate) fn prefixed<'a, T>(prefix: &str, ts: Vec<NamedTensor<'a, T>>) -> Vec<NamedTensor<'a, T>> {
    ts.into_iter()
        .map(|t| NamedTensor {
            name: format!("{prefix}.{}", t.name),
            ..t
        })
        .collect()
}

pub(crate) fn named<'a, T>(name: &str, shape: &[usize], data: &'a [T]) -> NamedTensor<'a, T> {
    NamedTensor {
        name: name.to_string(),
        shape: shape.to_vec(),
        data,
    }
}
