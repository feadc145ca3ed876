use std::collections::BTreeMap;

use super::{Graph, Scalar, TensorTable, Var};
use crate::error::{Error, Result};

/// Parameters of a [`TensorTable`] registered as graph leaves, addressable by
/// name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    order: Vec<(String, Var)>,
    index: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every tensor of `table` under `prefix`. Trainable tensors
    /// become differentiable leaves; otherwise constants.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, table: &TensorTable, prefix: &str, trainable: bool) -> Self {
        let mut b = Bound::default();
        b.add(g, table, prefix, trainable);
        b
    }

    /// Wraps already-registered variables.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        let mut b = Bound::default();
        for (n, v) in vars {
            b.order.push((n.clone(), v));
            b.index.insert(n, v);
        }
        b
    }

    pub fn add<T: Scalar>(&mut self, g: &mut Graph<T>, table: &TensorTable, prefix: &str, trainable: bool) {
        for (name, t) in table.iter() {
            let values = t.values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
            let v = if trainable {
                g.param(&t.shape, values)
            } else {
                g.constant(&t.shape, values)
            };
            let name = format!("{prefix}{name}");
            self.order.push((name.clone(), v));
            self.index.insert(name, v);
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name:?} not bound")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Gradients of the entries under `prefix`, in table order, as `f32`;
    /// zeros where the loss did not reach a parameter.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>, prefix: &str) -> Vec<Vec<f32>> {
        self.order
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| match g.grad(*v) {
                Some(gr) => gr.iter().map(|x| x.to_f64_lossy() as f32).collect(),
                None => vec![0.0; g.value(*v).len()],
            })
            .collect()
    }
}
