//! Named parameter storage, tape wrapping, and the Adam optimizer.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

/// Ordered map of named f64 arrays. BTreeMap keeps iteration deterministic,
/// which keeps training runs bit-reproducible under a fixed seed.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_arrays(path, &self.map)
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        Ok(ParamStore {
            map: checkpoint::load_arrays(path)?,
        })
    }

    pub fn as_map(&self) -> &BTreeMap<String, ArrayD<f64>> {
        &self.map
    }
}

/// All parameters of a store wrapped as leaves on one tape, so a forward pass
/// can look them up by name and a backward sweep can hand gradients back per
/// name.
pub struct TapedParams {
    vars: BTreeMap<String, Var>,
}

impl TapedParams {
    pub fn wrap(tape: &Rc<Tape>, store: &ParamStore) -> TapedParams {
        let vars = store
            .iter()
            .map(|(name, arr)| (name.clone(), Var::leaf(tape, arr.clone())))
            .collect();
        TapedParams { vars }
    }

    /// Panics on unknown names: a forward pass asking for a parameter that
    /// was never initialized is a programming error, not a runtime condition.
    pub fn get(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Collects per-parameter gradients after a backward sweep. Parameters
    /// that did not participate in the graph get zero gradients.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(IxDyn(var.shape())));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Sums gradient maps elementwise (missing keys are treated as zero).
pub fn accumulate_grads(
    into: &mut BTreeMap<String, ArrayD<f64>>,
    from: &BTreeMap<String, ArrayD<f64>>,
) {
    for (name, g) in from {
        match into.get_mut(name) {
            Some(acc) => *acc += g,
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one update. `frozen` prefixes are skipped entirely.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        frozen_prefixes: &[&str],
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, g) in grads {
            if frozen_prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let Some(param) = store.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, mi, vi, &gi| {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// He-style normal init for a conv kernel `(cout, cin, kh, kw)`.
pub fn he_conv_init<R: Rng>(rng: &mut R, cout: usize, cin: usize, kh: usize, kw: usize) -> ArrayD<f64> {
    let fan_in = (cin * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin, kh, kw]), || {
        // Box-Muller transform keeps us off rand_distr for one distribution.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn constant(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), v)
}

/// Fails with a checkpoint error when a required parameter is absent.
pub fn require<'s>(store: &'s ParamStore, name: &str) -> Result<&'s ArrayD<f64>> {
    store
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter: {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, ops};

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", constant(&[2], 3.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let tape = Tape::new();
            let taped = TapedParams::wrap(&tape, &store);
            let x = taped.get("x");
            let loss = ops::sum_all(&ops::mul(x, x));
            let grads = backward(&loss);
            opt.step(&mut store, &taped.grads(&grads), &[]);
        }
        assert!(store.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_prefixes_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("enc.w", constant(&[1], 1.0));
        store.insert("dec.w", constant(&[1], 1.0));
        let mut grads = BTreeMap::new();
        grads.insert("enc.w".to_string(), constant(&[1], 1.0));
        grads.insert("dec.w".to_string(), constant(&[1], 1.0));
        let mut opt = Adam::new(0.5);
        opt.step(&mut store, &grads, &["enc."]);
        assert_eq!(store.get("enc.w").unwrap()[[0]], 1.0);
        assert!(store.get("dec.w").unwrap()[[0]] < 1.0);
    }
}
