//! Named parameter storage shared by every sub-network.
//!
//! Parameters live here as plain arrays between steps; a forward pass binds
//! the trainable ones onto a fresh tape as leaves and reads gradients back
//! by name. Registration order is fixed by construction order, which makes
//! initialization, checkpoints and optimizer state deterministic.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Tape, Var};
use crate::Scalar;

#[derive(Debug, Clone)]
struct Entry<T> {
    array: ArrayD<T>,
    trainable: bool,
}

/// Ordered map of named arrays: trainable weights plus auxiliary state such
/// as normalization running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    /// Registers a trainable parameter; a name may only be registered once.
    pub fn register(&mut self, name: &str, array: ArrayD<T>) {
        let prev = self
            .entries
            .insert(name.to_string(), Entry { array, trainable: true });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Registers non-trainable state (never bound to the tape).
    pub fn register_state(&mut self, name: &str, array: ArrayD<T>) {
        let prev = self
            .entries
            .insert(name.to_string(), Entry { array, trainable: false });
        assert!(prev.is_none(), "duplicate state {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).array
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .array
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Names of trainable parameters, in registration order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// All names in registration order, with their trainable flag.
    pub fn names(&self) -> Vec<(String, bool)> {
        self.entries.iter().map(|(n, e)| (n.clone(), e.trainable)).collect()
    }

    /// Total trainable element count.
    pub fn trainable_len(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.array.len()).sum()
    }

    /// Copies every trainable parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let mut vars = IndexMap::new();
        for (name, e) in &self.entries {
            if e.trainable {
                vars.insert(name.clone(), tape.leaf(e.array.clone()));
            }
        }
        Binding { vars }
    }
}

/// Tape handles for one forward pass, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    /// Builds a binding from explicit (name, var) pairs; used when the
    /// variables come from somewhere other than [`ParamStore::bind`], e.g.
    /// gradient checking harnesses.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Binding { vars: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Zero-mean Gaussian init with the given standard deviation.
pub fn normal_init<T: Scalar>(
    rng: &mut ChaCha12Rng,
    shape: &[usize],
    std: f64,
) -> ArrayD<T> {
    let mut a = ArrayD::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = T::c(n * std);
    }
    a
}

/// He initialization for a convolution or linear weight: std = sqrt(2 / fan_in).
pub fn he_init<T: Scalar>(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    normal_init(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// Uniform init in [-bound, bound], the conventional recurrent-layer scheme.
pub fn uniform_init<T: Scalar>(
    rng: &mut ChaCha12Rng,
    shape: &[usize],
    bound: f64,
) -> ArrayD<T> {
    let mut a = ArrayD::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = T::c(rng.random_range(-bound..bound));
    }
    a
}
