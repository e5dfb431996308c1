//! Named, tape-independent parameter storage.
//!
//! Models keep their weights in a [`ParamSet`]: plain `Vec<f64>` buffers with
//! a name and shape. Each training step registers the set onto a fresh
//! [`Tape`], runs forward/backward there, and applies updates back into the
//! set. The set itself is `Send`, so snapshots can cross threads even though
//! tapes cannot.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{DiffTensor, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of named parameters. Indices are stable: ops hold the
/// index returned by [`ParamSet::add`] and look tensors up through
/// [`TapeParams`] after registration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> usize {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "param {name}: shape {shape:?} does not match {} values",
            values.len()
        );
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
        self.entries.len() - 1
    }

    /// Uniform init on `[-bound, bound]`.
    pub fn add_uniform(&mut self, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], bound: f64) -> usize {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, shape, values)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> usize {
        let n = shape.iter().product();
        self.add(name, shape, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// Total number of scalar values across all entries.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Create one tape parameter per entry, in order.
    pub fn register(&self, tape: &Tape) -> TapeParams {
        TapeParams {
            tensors: self
                .entries
                .iter()
                .map(|e| tape.param(&e.shape, e.values.clone()))
                .collect(),
        }
    }

    /// Shape/value pairs in entry order, for the finite-difference checker.
    pub fn as_check_params(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.shape.clone(), e.values.clone()))
            .collect()
    }
}

/// The tape-side tensors of a registered [`ParamSet`], indexed the same way.
pub struct TapeParams {
    tensors: Vec<DiffTensor>,
}

impl TapeParams {
    pub fn get(&self, idx: usize) -> &DiffTensor {
        &self.tensors[idx]
    }

    pub fn from_tensors(tensors: Vec<DiffTensor>) -> Self {
        TapeParams { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// [`finite_diff_check`](crate::numerics::finite_diff_check) over a whole
/// parameter set: `build` sees the registered tensors with the set's indices.
pub fn finite_diff_check_set<F>(set: &ParamSet, eps: f64, build: F) -> f64
where
    F: Fn(&Tape, &TapeParams) -> DiffTensor,
{
    let pairs = set.as_check_params();
    crate::numerics::finite_diff_check(
        &|tape: &Tape, ts: &[DiffTensor]| {
            let reg = TapeParams::from_tensors(ts.to_vec());
            build(tape, &reg)
        },
        &pairs,
        eps,
    )
}

/// Uniform Glorot bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
