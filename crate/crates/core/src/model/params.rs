use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ArchConfig;
use crate::error::{arg_err, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Initial value of the shared PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// Every learnable tensor of the network, in a stable order and addressable
/// by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

/// Shape of one learnable tensor and whether it is a bias-like vector
/// (zero-initialized) or a weight (Gaussian).
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy)]
pub(crate) enum Init {
    Gaussian,
    /// Single-channel output head; see [`WeightInit::head_std`].
    Head,
    Zero,
    /// Centre tap 1, every other tap 0.
    PassThrough,
    Constant(f64),
}

impl ModelParams {
    /// Fresh parameters: Gaussian weights per `arch.init`, zero biases, PReLU
    /// slope 0.25, and a pass-through post-fusion kernel.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = arch
            .param_specs()
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Gaussian => {
                        let std = arch.init.std_for(&spec.shape);
                        let normal = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                    Init::Head => {
                        let normal = Normal::new(0.0, arch.init.head_std()).expect("positive std");
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                    Init::PassThrough => {
                        let mut d = vec![0.0; n];
                        d[n / 2] = 1.0;
                        d
                    }
                    Init::Zero => vec![0.0; n],
                    Init::Constant(c) => vec![c; n],
                };
                let t = Tensor::new(&spec.shape, data).expect("spec shape").with_grad();
                (spec.name, t)
            })
            .collect();
        Ok(Self { entries })
    }

    /// Builds a parameter set from named tensors, checking them against
    /// `arch`'s expected names and shapes.
    pub fn from_entries(arch: &ArchConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let specs = arch.param_specs();
        if specs.len() != entries.len() {
            return arg_err(format!(
                "architecture expects {} tensors, got {}",
                specs.len(),
                entries.len()
            ));
        }
        let mut out = Vec::with_capacity(entries.len());
        for (spec, (name, t)) in specs.into_iter().zip(entries) {
            if spec.name != name || spec.shape != t.shape() {
                return arg_err(format!(
                    "expected {} {:?}, got {name} {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                ));
            }
            let t = if t.requires_grad() { t } else { t.with_grad() };
            out.push((name, t));
        }
        Ok(Self { entries: out })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Records every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.bind_with(g, true)
    }

    /// Records every tensor as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    g.param(t.detached())
                } else {
                    g.constant(t.detached())
                };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients accumulated in `g` into each tensor's accumulator.
    pub fn absorb_grads(&mut self, g: &Graph, bound: &BoundParams) -> Result<()> {
        for (name, t) in &mut self.entries {
            if let Some(grad) = bound.vars.get(name.as_str()).and_then(|&v| g.grad(v)) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(v) => Ok(*v),
            None => arg_err(format!("no parameter named {name}")),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Replaces the handle for `name`, e.g. with a gradient-check leaf.
    pub fn replace(&mut self, name: &str, v: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => arg_err(format!("no parameter named {name}")),
        }
    }
}
