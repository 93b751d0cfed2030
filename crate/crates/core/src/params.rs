//! Named trainable tensors with paired gradient buffers.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat registry of parameters. Registration order is deterministic, so the
/// same configuration and seed always produce the same store.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
    rng: ChaCha8Rng,
    seed: u64,
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Two-layer perceptron `W₂ silu(W₁ x + b₁) + b₂`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.dim());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        id
    }

    /// Uniform fan-in initialisation (`±√(3 / fan_in)`), or zeros.
    pub fn add_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, zero: bool) -> ParamId {
        let value = if zero {
            Tensor::zeros((rows, cols))
        } else {
            let bound = (3.0 / rows as f64).sqrt();
            let rng = &mut self.rng;
            Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
        };
        self.add(name, value)
    }

    pub fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        Linear {
            weight: self.add_uniform(format!("{name}.weight"), fan_in, fan_out, zero),
            bias: self.add(format!("{name}.bias"), Tensor::zeros((1, fan_out))),
        }
    }

    /// Hidden width equals `fan_out` unless `hidden` is given.
    pub fn add_mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize, zero_out: bool) -> Mlp {
        Mlp {
            hidden: self.add_linear(&format!("{name}.0"), fan_in, hidden, false),
            out: self.add_linear(&format!("{name}.1"), hidden, fan_out, zero_out),
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn add_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad += g;
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad *= s;
        }
    }

    /// Overwrites every value with `U(-scale, scale)` noise. Used by gradient
    /// checks, where zero-initialised output layers would hide upstream terms.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            p.value.mapv_inplace(|_| rng.gen_range(-scale..scale));
        }
    }

    /// Same names, shapes and values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

/// Puts each parameter on a tape at most once per forward pass.
pub struct Binder<'a> {
    pub store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.param(id, self.store.get(id).value.clone());
        self.vars[id.0] = Some(v);
        v
    }

    pub fn linear(&mut self, tape: &mut Tape, l: &Linear, x: Var) -> Var {
        let w = self.bind(tape, l.weight);
        let b = self.bind(tape, l.bias);
        tape.linear(x, w, b)
    }

    pub fn mlp(&mut self, tape: &mut Tape, m: &Mlp, x: Var) -> Var {
        let h = self.linear(tape, &m.hidden, x);
        let h = tape.silu(h);
        self.linear(tape, &m.out, h)
    }

    /// `x W` without bias, used for split first layers over concatenated inputs.
    pub fn project(&mut self, tape: &mut Tape, weight: ParamId, x: Var) -> Var {
        let w = self.bind(tape, weight);
        tape.matmul(x, w)
    }
}
