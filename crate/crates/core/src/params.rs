//! Named parameter collections shared by every trainable module.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

pub trait ParamSet: Sized {
    /// Tape handles for each tensor, mirroring the struct layout.
    type Vars: Copy;

    fn bind(&self, tape: &mut Tape) -> Self::Vars;
    fn named(&self) -> Vec<(&'static str, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;
    fn gradients(&self, vars: &Self::Vars, grads: &mut Gradients) -> Self;
    /// Rebuilds the set from `prefix.name` entries, checking shapes against `like`.
    fn from_named(like: &Self, prefix: &str, arrays: &mut BTreeMap<String, Tensor>) -> Result<Self>;

    fn zeros_like(&self) -> Self;

    fn sum_sq(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sum_sq()).sum()
    }

    fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

macro_rules! param_set {
    ($(#[$meta:meta])* $name:ident, $vars:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $(pub $field: $crate::tensor::Tensor,)*
        }

        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub struct $vars {
            $(pub $field: $crate::tape::Var,)*
        }

        impl $crate::params::ParamSet for $name {
            type Vars = $vars;

            fn bind(&self, tape: &mut $crate::tape::Tape) -> $vars {
                $vars { $($field: tape.param(&self.$field),)* }
            }

            fn named(&self) -> Vec<(&'static str, &$crate::tensor::Tensor)> {
                vec![$((stringify!($field), &self.$field),)*]
            }

            fn named_mut(&mut self) -> Vec<(&'static str, &mut $crate::tensor::Tensor)> {
                vec![$((stringify!($field), &mut self.$field),)*]
            }

            fn gradients(&self, vars: &$vars, grads: &mut $crate::tape::Gradients) -> Self {
                $name { $($field: grads.take_or_zeros(vars.$field, &self.$field),)* }
            }

            fn from_named(
                like: &Self,
                prefix: &str,
                arrays: &mut std::collections::BTreeMap<String, $crate::tensor::Tensor>,
            ) -> $crate::error::Result<Self> {
                Ok($name {
                    $($field: $crate::params::take_array(arrays, prefix, stringify!($field), &like.$field)?,)*
                })
            }

            fn zeros_like(&self) -> Self {
                $name { $($field: $crate::tensor::Tensor::zeros(self.$field.rows, self.$field.cols),)* }
            }
        }
    };
}

pub(crate) use param_set;

#[doc(hidden)]
pub fn take_array(
    arrays: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    field: &str,
    like: &Tensor,
) -> Result<Tensor> {
    let key = format!("{prefix}.{field}");
    let t = arrays
        .remove(&key)
        .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
    if t.shape() != like.shape() {
        return Err(Error::Checkpoint(format!(
            "array {key} has shape {:?}, expected {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t)
}
