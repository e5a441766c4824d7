//! Named traversal over nested parameter structs.
//!
//! Names are dotted paths (`decoders.0.amsa1.height.wq`) and traversal order
//! is declaration order, which is what checkpoints and the flat
//! `tensors`/`replace_tensors` pair rely on.

use std::collections::HashMap;

use crate::attention::{AmsaParams, AttnParams, LayerNormParams};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t.clone()));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Swaps in `tensors` in traversal order; shapes must match.
    fn replace_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mut it = tensors.iter();
        let mut err = None;
        self.visit_mut("", &mut |name, slot| {
            match it.next() {
                Some(t) if t.shape() == slot.shape() => *slot = t.clone(),
                Some(t) => {
                    err.get_or_insert_with(|| {
                        Error::shape("replace_tensors", format!("{name}: {:?} vs {:?}", t.shape(), slot.shape()))
                    });
                }
                None => {
                    err.get_or_insert_with(|| Error::shape("replace_tensors", format!("missing tensor for {name}")));
                }
            };
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::shape("replace_tensors", "more tensors than parameters"));
        }
        Ok(())
    }

    /// Fills every slot from `named`, keyed by `prefix`-relative names.
    /// Loaded tensors become trainable leaves when `trainable` is set.
    fn load_named(&mut self, prefix: &str, named: &HashMap<String, Tensor>, trainable: bool) -> Result<()> {
        let mut err = None;
        self.visit_mut(prefix, &mut |name, slot| match named.get(&name) {
            Some(t) if t.shape() == slot.shape() => {
                *slot = if trainable { t.detach_param() } else { t.detach() };
            }
            Some(t) => {
                err.get_or_insert_with(|| {
                    Error::Format(format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), slot.shape()))
                });
            }
            None => {
                err.get_or_insert_with(|| Error::Format(format!("checkpoint is missing {name}")));
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl ParamSet for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self);
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

macro_rules! param_set {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::ParamSet for $ty {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::numcore::Tensor),
            ) {
                $( self.$field.visit(&$crate::params::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut $crate::numcore::Tensor),
            ) {
                $( self.$field.visit_mut(&$crate::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use param_set;

param_set!(AttnParams { wq, wk, wv, wo });
param_set!(LayerNormParams { gamma, beta });
param_set!(AmsaParams { height, height_norm, width, width_norm });

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn names_follow_declaration_order() {
        let p = AmsaParams::init(4, 2, &mut Rng::new(0)).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "height.wq");
        assert_eq!(names[4], "height_norm.gamma");
        assert_eq!(names.last().unwrap(), "width_norm.beta");
        assert_eq!(p.param_count(), 2 * (4 * 16) + 4 * 4);
    }

    #[test]
    fn replace_checks_shapes_and_count() {
        let mut p = AttnParams::init(4, 2, &mut Rng::new(0)).unwrap();
        let zeros: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[4, 4])).collect();
        p.replace_tensors(&zeros).unwrap();
        assert!(p.wo.data().iter().all(|&v| v == 0.0));
        assert!(p.replace_tensors(&zeros[..3]).is_err());
        let mut bad = zeros.clone();
        bad[1] = Tensor::zeros(&[4, 3]);
        assert!(p.replace_tensors(&bad).is_err());
    }
}
