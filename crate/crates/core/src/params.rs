//! Named parameter trees and the JSON parameter store.
//!
//! Model structs are generic over their leaf type `P`: `Tensor<f64>` for
//! stored weights, `Tensor<f32>` for fast inference and
//! [`crate::autodiff::Var`] while recording a training step. Every struct
//! exposes `map` (leaf-wise conversion) and [`Visit`] (named traversal),
//! which the optimizer and the store rely on.
//!
//! Store format (`lpa-params/1`):
//!
//! ```json
//! { "format": "lpa-params/1",
//!   "meta": { ... free-form config ... },
//!   "tensors": { "layer.0.head.0.gates.aperiodic.q": { "shape": [8, 4], "data": [ ... ] } } }
//! ```
//!
//! Arrays are row-major f32.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LpaError, Result};
use crate::numerics::Tensor;

pub const STORE_FORMAT: &str = "lpa-params/1";

/// Named traversal over every leaf of a parameter tree.
pub trait Visit<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements `map` and [`Visit`] for a struct whose listed fields are all leaves.
macro_rules! leaf_params {
    ($name:ident { $($field:ident => $key:literal),* $(,)? }) => {
        impl<P> $name<P> {
            pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: f(&self.$field)),* }
            }
        }

        impl<P> $crate::params::Visit<P> for $name<P> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
                $( f($crate::params::join(prefix, $key), &self.$field); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
                $( f($crate::params::join(prefix, $key), &mut self.$field); )*
            }
        }
    };
}
pub(crate) use leaf_params;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    format: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, StoredTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            format: STORE_FORMAT.to_string(),
            meta: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert(&mut self, key: impl Into<String>, t: &Tensor<f64>) {
        self.tensors.insert(
            key.into(),
            StoredTensor {
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v as f32).collect(),
            },
        );
    }

    pub fn get(&self, key: &str) -> Result<Tensor<f64>> {
        let st = self
            .tensors
            .get(key)
            .ok_or_else(|| LpaError::MissingTensor(key.to_string()))?;
        Tensor::from_vec(st.shape.clone(), st.data.iter().map(|&v| v as f64).collect())
    }

    /// Adds every leaf of `tree` under `prefix`.
    pub fn insert_tree(&mut self, prefix: &str, tree: &impl Visit<Tensor<f64>>) {
        tree.visit(prefix, &mut |k, t| self.insert(k, t));
    }

    /// Overwrites every leaf of `tree` from the store; shapes must agree.
    pub fn fill_tree(&self, prefix: &str, tree: &mut impl Visit<Tensor<f64>>) -> Result<()> {
        let mut err = None;
        tree.visit_mut(prefix, &mut |k, t| {
            if err.is_some() {
                return;
            }
            match self.get(&k) {
                Ok(v) if v.dims() == t.dims() => *t = v,
                Ok(v) => {
                    err = Some(LpaError::Shape(format!(
                        "`{k}`: stored {:?}, model expects {:?}",
                        v.dims(),
                        t.dims()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let store: Self = serde_json::from_str(s)?;
        if store.format != STORE_FORMAT {
            return Err(LpaError::Config(format!(
                "unsupported parameter store format `{}`",
                store.format
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| LpaError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|source| LpaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&s)
    }
}

/// Flattens a tree into `(name, leaf)` pairs in visit order.
pub fn named_leaves<'a, P>(prefix: &str, tree: &'a impl Visit<P>) -> Vec<(String, &'a P)> {
    let mut out = Vec::new();
    tree.visit(prefix, &mut |k, p| out.push((k, p)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pair<P> {
        a: P,
        b: P,
    }
    leaf_params!(Pair { a => "a", b => "b" });

    #[test]
    fn store_round_trip_preserves_values() {
        let pair = Pair {
            a: Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25e-3, 7.0]),
            b: Tensor::row_vector(vec![0.1, 0.2, 0.3]),
        };
        let mut store = ParamStore::new();
        store.insert_tree("layer.0", &pair);
        let json = store.to_json().unwrap();
        let back = ParamStore::from_json(&json).unwrap();
        let mut restored = pair.map(&mut |t| Tensor::zeros(t.rows(), t.cols()));
        back.fill_tree("layer.0", &mut restored).unwrap();
        assert!(restored.a.max_abs_diff(&pair.a) < 1e-6);
        assert!(restored.b.max_abs_diff(&pair.b) < 1e-6);
        assert_eq!(back.keys().collect::<Vec<_>>(), vec!["layer.0.a", "layer.0.b"]);
    }

    #[test]
    fn fill_reports_missing_and_mismatched() {
        let mut store = ParamStore::new();
        store.insert("x.a", &Tensor::zeros(3, 3));
        let mut pair = Pair {
            a: Tensor::<f64>::zeros(2, 2),
            b: Tensor::zeros(1, 1),
        };
        assert!(matches!(store.fill_tree("x", &mut pair), Err(LpaError::Shape(_))));
        store.insert("x.a", &Tensor::zeros(2, 2));
        assert!(matches!(store.fill_tree("x", &mut pair), Err(LpaError::MissingTensor(_))));
    }

    #[test]
    fn rejects_unknown_format() {
        let json = r#"{"format":"other","tensors":{}}"#;
        assert!(ParamStore::from_json(json).is_err());
    }
}
