//! Hierarchical aggregation encoder: a nested U-Net node grid with dense
//! same-level skips, optional cross-structure links, dilated node
//! convolutions and the attention module at the deepest backbone node.
//!
//! Node `X^{i,j}` lives at level `i` (resolution `H/2^i`) and column `j`, and
//! exists when `i + j ≤ L − 1`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{declare_conv_block, Ctx, Declarations};
use crate::pcam::{self, PcamConfig};
use crate::tape::Var;

pub const MAX_CHANNELS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Number of resolution levels `L`.
    pub depth: usize,
    pub base_channels: usize,
    pub dilation: usize,
    pub use_dilation: bool,
    pub use_cross_structure: bool,
    pub use_pcam: bool,
    pub pcam_paths: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    pub fn desk() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            dilation: 2,
            use_dilation: true,
            use_cross_structure: true,
            use_pcam: true,
            pcam_paths: 4,
        }
    }

    /// Seven levels, so the top-row output node is `X^{0,6}`.
    pub fn full_scale() -> Self {
        Self {
            depth: 7,
            base_channels: 32,
            ..Self::desk()
        }
    }

    pub fn width(&self, level: usize) -> usize {
        (self.base_channels << level.min(20)).min(MAX_CHANNELS)
    }

    pub fn node_dilation(&self) -> usize {
        if self.use_dilation {
            self.dilation
        } else {
            1
        }
    }

    pub fn pcam_config(&self) -> PcamConfig {
        let c = self.width(self.depth - 1);
        PcamConfig {
            in_channels: c,
            out_channels: c,
            paths: self.pcam_paths,
        }
    }

    /// Input extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(2..=10).contains(&self.depth) {
            out.push(format!("network.depth must be in 2..=10, got {}", self.depth));
        }
        if self.base_channels == 0 {
            out.push("network.base_channels must be positive".into());
        }
        if self.dilation == 0 {
            out.push("network.dilation must be positive".into());
        }
        if self.use_pcam && out.is_empty() {
            if let Err(e) = self.pcam_config().validate() {
                out.push(format!("network.pcam_paths: {e}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::shape(
                "encoder",
                format!("input {h}x{w} is not divisible by 2^(L-1) = {m}"),
            ));
        }
        Ok(())
    }
}

pub type NodeId = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    /// The network input feeding `X^{0,0}`.
    Input,
    /// Max-pooled `X^{i−1,0}` into the backbone node `X^{i,0}`.
    Down,
    /// `X^{i,k}`, `k < j`, at the same resolution.
    Skip,
    /// Upsampled `X^{i+1,j−1}`.
    Up,
    /// Max-pooled `X^{i−1,j−1}`.
    CrossDown,
    /// Upsampled `X^{i+1,j}`.
    CrossUp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub kind: EdgeKind,
    /// Source node; `(0, 0)` for [`EdgeKind::Input`] is meaningless.
    pub from: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub inputs: Vec<Edge>,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeGraph {
    pub depth: usize,
    pub nodes: BTreeMap<NodeId, NodeSpec>,
    /// Evaluation order: every node appears after all of its sources.
    pub order: Vec<NodeId>,
}

impl NodeGraph {
    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.get(&id)
    }

    /// `X^{i, L−1−i}`, the last node on level `i`.
    pub fn final_column(&self, level: usize) -> NodeId {
        (level, self.depth - 1 - level)
    }

    pub fn deepest(&self) -> NodeId {
        (self.depth - 1, 0)
    }
}

pub fn build_graph(config: &NetworkConfig) -> Result<NodeGraph> {
    config.validate()?;
    let depth = config.depth;
    let exists = |i: usize, j: usize| i + j < depth;
    let mut nodes = BTreeMap::new();
    let mut order = Vec::new();

    for i in 0..depth {
        let edge = if i == 0 {
            Edge {
                kind: EdgeKind::Input,
                from: (0, 0),
            }
        } else {
            Edge {
                kind: EdgeKind::Down,
                from: (i - 1, 0),
            }
        };
        let in_channels = if i == 0 { 1 } else { config.width(i - 1) };
        nodes.insert(
            (i, 0),
            NodeSpec {
                inputs: vec![edge],
                in_channels,
                out_channels: config.width(i),
            },
        );
        order.push((i, 0));
    }

    for j in 1..depth {
        // Deeper levels first so cross-up sources X^{i+1,j} are ready.
        for i in (0..depth - j).rev() {
            let mut inputs: Vec<Edge> = (0..j)
                .map(|k| Edge {
                    kind: EdgeKind::Skip,
                    from: (i, k),
                })
                .collect();
            inputs.push(Edge {
                kind: EdgeKind::Up,
                from: (i + 1, j - 1),
            });
            if config.use_cross_structure {
                if i >= 1 {
                    inputs.push(Edge {
                        kind: EdgeKind::CrossDown,
                        from: (i - 1, j - 1),
                    });
                }
                if exists(i + 1, j) {
                    inputs.push(Edge {
                        kind: EdgeKind::CrossUp,
                        from: (i + 1, j),
                    });
                }
            }
            let in_channels = inputs.iter().map(|e| config.width(e.from.0)).sum();
            nodes.insert(
                (i, j),
                NodeSpec {
                    inputs,
                    in_channels,
                    out_channels: config.width(i),
                },
            );
            order.push((i, j));
        }
    }
    Ok(NodeGraph {
        depth,
        nodes,
        order,
    })
}

pub fn node_name(id: NodeId) -> String {
    format!("enc.x{}_{}", id.0, id.1)
}

pub const PCAM_PREFIX: &str = "enc.pcam";

pub fn declare(config: &NetworkConfig, graph: &NodeGraph, decls: &mut Declarations) -> Result<()> {
    for id in &graph.order {
        let spec = &graph.nodes[id];
        declare_conv_block(
            decls,
            &node_name(*id),
            spec.in_channels,
            spec.out_channels,
            config.node_dilation(),
        );
    }
    if config.use_pcam {
        pcam::declare(&config.pcam_config(), PCAM_PREFIX, decls)?;
    }
    Ok(())
}

/// Runs every grid node in evaluation order and returns all node outputs.
pub fn encoder_forward(
    ctx: &mut Ctx,
    config: &NetworkConfig,
    graph: &NodeGraph,
    x: Var,
) -> Result<BTreeMap<NodeId, Var>> {
    let (_, c, h, w) = ctx.tape.value(x).dims4()?;
    if c != 1 {
        return Err(Error::shape("encoder", format!("expected 1 input channel, got {c}")));
    }
    config.check_input(h, w)?;
    let mut outputs: BTreeMap<NodeId, Var> = BTreeMap::new();
    for &id in &graph.order {
        let spec = &graph.nodes[&id];
        let mut parts = Vec::with_capacity(spec.inputs.len());
        for edge in &spec.inputs {
            let src = || {
                outputs
                    .get(&edge.from)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("node {:?} evaluated before {:?}", id, edge.from)))
            };
            let v = match edge.kind {
                EdgeKind::Input => x,
                EdgeKind::Skip => src()?,
                EdgeKind::Down | EdgeKind::CrossDown => ctx.tape.max_pool_2x2(src()?)?,
                EdgeKind::Up | EdgeKind::CrossUp => ctx.tape.upsample_bilinear_2x(src()?)?,
            };
            parts.push(v);
        }
        let input = if parts.len() == 1 {
            parts[0]
        } else {
            ctx.tape.concat_channels(&parts)?
        };
        let mut out = ctx.conv_block(
            &node_name(id),
            input,
            spec.in_channels,
            spec.out_channels,
            config.node_dilation(),
        )?;
        if id == graph.deepest() && config.use_pcam {
            out = pcam::pcam_forward(ctx, PCAM_PREFIX, out, &config.pcam_config())?;
        }
        outputs.insert(id, out);
    }
    Ok(outputs)
}
