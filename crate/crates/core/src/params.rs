//! Named parameter storage, declaration and the per-step forward context.

use std::collections::BTreeMap;

use rand::Rng;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::norm::{Mode, RunningStats};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±√(1/fan_in)`.
    FanIn(usize),
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects every parameter tensor and batch-norm buffer a network needs,
/// in declaration order.
#[derive(Clone, Debug, Default)]
pub struct Declarations {
    pub params: Vec<ParamDecl>,
    pub norms: Vec<(String, usize)>,
}

impl Declarations {
    pub fn conv(&mut self, name: &str, spec: &ConvSpec, bias: bool) {
        self.conv_with(name, spec, bias, Init::FanIn(spec.fan_in()));
    }

    /// A convolution whose weights and bias start at exactly zero.
    pub fn conv_zero(&mut self, name: &str, spec: &ConvSpec) {
        self.conv_with(name, spec, true, Init::Zeros);
    }

    fn conv_with(&mut self, name: &str, spec: &ConvSpec, bias: bool, init: Init) {
        self.params.push(ParamDecl {
            name: format!("{name}.weight"),
            shape: spec.weight_shape().to_vec(),
            init,
        });
        if bias {
            self.params.push(ParamDecl {
                name: format!("{name}.bias"),
                shape: vec![spec.out_channels],
                init,
            });
        }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) {
        self.params.push(ParamDecl {
            name: format!("{name}.gamma"),
            shape: vec![channels],
            init: Init::Ones,
        });
        self.params.push(ParamDecl {
            name: format!("{name}.beta"),
            shape: vec![channels],
            init: Init::Zeros,
        });
        self.norms.push((name.to_string(), channels));
    }
}

/// Parameter tensors and batch-norm running statistics, keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Tensor>,
    pub stats: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    pub fn initialize(decls: &Declarations, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::default();
        for d in &decls.params {
            let t = match d.init {
                Init::FanIn(fan_in) => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&d.shape, |_| rng.random_range(-bound..bound))
                }
                Init::Ones => Tensor::full(&d.shape, 1.0),
                Init::Zeros => Tensor::zeros(&d.shape),
            };
            if store.tensors.insert(d.name.clone(), t).is_some() {
                return Err(Error::Config(format!("duplicate parameter '{}'", d.name)));
            }
        }
        for (name, channels) in &decls.norms {
            store.stats.insert(name.clone(), RunningStats::new(*channels));
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    pub vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub binding: &'a Binding,
    pub stats: &'a mut BTreeMap<String, RunningStats>,
    pub mode: Mode,
}

impl Ctx<'_> {
    pub fn conv(&mut self, name: &str, x: Var, spec: ConvSpec, bias: bool) -> Result<Var> {
        let w = self.binding.get(&format!("{name}.weight"))?;
        let b = if bias {
            Some(self.binding.get(&format!("{name}.bias"))?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, spec)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.binding.get(&format!("{name}.gamma"))?;
        let beta = self.binding.get(&format!("{name}.beta"))?;
        let stats = self
            .stats
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(format!("{name} running stats")))?;
        self.tape.batch_norm(x, gamma, beta, stats, self.mode, name)
    }

    /// conv → batch norm → ReLU, twice, at the given dilation.
    pub fn conv_block(&mut self, name: &str, x: Var, cin: usize, cout: usize, dilation: usize) -> Result<Var> {
        let mut h = x;
        for (k, c_in) in [(1, cin), (2, cout)] {
            h = self.conv(
                &format!("{name}.conv{k}"),
                h,
                ConvSpec::same(c_in, cout, 3, dilation),
                false,
            )?;
            h = self.batch_norm(&format!("{name}.bn{k}"), h)?;
            h = self.tape.relu(h)?;
        }
        Ok(h)
    }
}

/// Declarations matching [`Ctx::conv_block`].
pub fn declare_conv_block(decls: &mut Declarations, name: &str, cin: usize, cout: usize, dilation: usize) {
    for (k, c_in) in [(1, cin), (2, cout)] {
        decls.conv(
            &format!("{name}.conv{k}"),
            &ConvSpec::same(c_in, cout, 3, dilation),
            false,
        );
        decls.batch_norm(&format!("{name}.bn{k}"), cout);
    }
}
