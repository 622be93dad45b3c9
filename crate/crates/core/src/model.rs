use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, SideOutputs};
use crate::encoder::{self, build_graph, NetworkConfig, NodeGraph, NodeId};
use crate::error::{Error, Result};
use crate::norm::Mode;
use crate::params::{Binding, Ctx, Declarations, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Network configuration, its node grid and the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub graph: NodeGraph,
    pub params: ParamStore,
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    pub binding: Binding,
    pub nodes: BTreeMap<NodeId, Var>,
    pub outputs: SideOutputs,
}

pub fn declarations(config: &NetworkConfig, graph: &NodeGraph) -> Result<Declarations> {
    let mut decls = Declarations::default();
    encoder::declare(config, graph, &mut decls)?;
    decoder::declare(config, &mut decls);
    Ok(decls)
}

impl Model {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng(config: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let graph = build_graph(&config)?;
        let decls = declarations(&config, &graph)?;
        let params = ParamStore::initialize(&decls, rng)?;
        Ok(Self {
            config,
            graph,
            params,
        })
    }

    /// Rebuilds a model around existing parameters, checking that names and
    /// shapes match what the configuration declares.
    pub fn from_params(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        let graph = build_graph(&config)?;
        let decls = declarations(&config, &graph)?;
        if decls.params.len() != params.tensors.len() || decls.norms.len() != params.stats.len() {
            return Err(Error::Checkpoint(format!(
                "parameter set does not match configuration: expected {} tensors and {} norms, got {} and {}",
                decls.params.len(),
                decls.norms.len(),
                params.tensors.len(),
                params.stats.len()
            )));
        }
        for d in &decls.params {
            let t = params
                .tensors
                .get(&d.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{}'", d.name)))?;
            if t.shape() != d.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                )));
            }
        }
        for (name, channels) in &decls.norms {
            match params.stats.get(name) {
                Some(s) if s.channels() == *channels => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "running statistics for '{name}' missing or mis-sized"
                    )))
                }
            }
        }
        Ok(Self {
            config,
            graph,
            params,
        })
    }

    /// Full forward pass on `B × 1 × H × W` images. Train mode updates the
    /// batch-norm running statistics.
    pub fn forward(&mut self, tape: &mut Tape, images: &Tensor, mode: Mode) -> Result<Forward> {
        let binding = self.params.bind(tape);
        let x = tape.constant(images.clone());
        let mut ctx = Ctx {
            tape,
            binding: &binding,
            stats: &mut self.params.stats,
            mode,
        };
        let nodes = encoder::encoder_forward(&mut ctx, &self.config, &self.graph, x)?;
        let outputs = decoder::decode(&mut ctx, &self.config, &self.graph, &nodes)?;
        Ok(Forward {
            binding,
            nodes,
            outputs,
        })
    }

    /// Eval-mode refined logits.
    pub fn predict_logits(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, images, Mode::Eval)?;
        Ok(tape.value(f.outputs.refined).clone())
    }
}
