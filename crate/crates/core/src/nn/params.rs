use std::collections::HashMap;

use rand::Rng;

use super::{NnError, Tape, Tensor, Var};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let tensor = if tensor.requires_grad() { tensor } else { tensor.with_grad() };
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(NnError::UnknownParam(name.to_string())),
        }
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Adds `scale ×` the tape gradients of every bound parameter into the
    /// stored gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[Option<Var>], scale: f64) {
        for ((_, t), var) in self.entries.iter_mut().zip(bound) {
            let Some(var) = var else { continue };
            let Some(g) = tape.grad(*var) else { continue };
            if let Some(dst) = t.grad_mut() {
                dst.iter_mut().zip(g).for_each(|(d, v)| *d += scale * v);
            }
        }
    }

    /// Bit-level equality of all parameter values (names and order included).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Which parameters are recorded as differentiable leaves.
#[derive(Debug, Clone, Copy)]
pub enum GradFilter<'a> {
    All,
    Nothing,
    Prefix(&'a str),
    ExceptPrefix(&'a str),
}

impl GradFilter<'_> {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            GradFilter::All => true,
            GradFilter::Nothing => false,
            GradFilter::Prefix(p) => name.starts_with(p),
            GradFilter::ExceptPrefix(p) => !name.starts_with(p),
        }
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    filter: GradFilter<'a>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, filter: GradFilter<'a>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            filter,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The tape node for a named parameter, recorded on first use.
    pub fn param(&mut self, name: &str) -> Result<Var, NnError> {
        let &i = self
            .store
            .index
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let t = &self.store.entries[i].1;
        let v = if self.filter.allows(name) {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t.shape(), t.data().to_vec())?
        };
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, t: &Tensor) -> Result<Var, NnError> {
        self.tape.constant(t.shape(), t.data().to_vec())
    }

    pub fn finish(self) -> (Tape, Vec<Option<Var>>) {
        (self.tape, self.bound)
    }
}

/// Kaiming-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}
