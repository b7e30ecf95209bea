use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (e.g. batchnorm running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Ordered collection of named tensors making up a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar values over trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Places every entry on the graph. Trainable entries require grad when
    /// `requires_grad` is set; buffers never do.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| graph.leaf(p.value.clone(), requires_grad && p.trainable))
            .collect()
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign_from<U: Real>(&mut self, other: &ParamSet<U>) -> Result<()> {
        self.check_compatible(other)?;
        for (dst, src) in self.entries.iter_mut().zip(other.iter()) {
            dst.value = src.value.cast();
        }
        Ok(())
    }

    pub fn check_compatible<U: Real>(&self, other: &ParamSet<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::argument(format!(
                "parameter sets differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(other.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::argument(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self ← λ·self + (1 − λ)·other` over trainable entries; buffers are left alone.
    pub fn ema_toward(&mut self, other: &ParamSet<T>, lambda: f64) -> Result<()> {
        self.check_compatible(other)?;
        let l = T::from_f64(lambda);
        let r = T::from_f64(1.0 - lambda);
        for (dst, src) in self.entries.iter_mut().zip(other.iter()) {
            if !dst.trainable {
                continue;
            }
            for (d, &s) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *d = l * *d + r * s;
            }
        }
        Ok(())
    }

    /// `(prefix + name, tensor)` pairs for archiving.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        self.entries.iter().map(|p| (format!("{prefix}{}", p.name), &p.value)).collect()
    }

    /// Copies every entry from the archive tensor named `prefix + name`.
    pub fn load_named(&mut self, entries: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        for p in self.entries.iter_mut() {
            let key = format!("{prefix}{}", p.name);
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::argument(format!("checkpoint lacks tensor `{key}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::argument(format!(
                    "checkpoint tensor `{key}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}
