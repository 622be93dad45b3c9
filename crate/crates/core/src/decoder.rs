//! Multi-scale feature refinement decoder.
//!
//! Walks from the deepest level to level 0, fusing the upsampled decoder
//! state with each level's final-column encoder node. Every level gets a
//! 1×1 side head (deep supervision); a refinement stage gates the side
//! outputs with a sigmoid, brings them to full resolution and adds a
//! residual correction onto the level-0 side logits.

use std::collections::BTreeMap;

use crate::conv::ConvSpec;
use crate::encoder::{NetworkConfig, NodeGraph, NodeId};
use crate::error::{Error, Result};
use crate::objective::kernels::sigmoid;
use crate::params::{declare_conv_block, Ctx, Declarations};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Side logits `S_i` (index = level, `S_0` at full resolution) and the
/// refined logits `R` used for prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct SideOutputs {
    pub sides: Vec<Var>,
    pub refined: Var,
}

fn block_name(level: usize) -> String {
    format!("dec.l{level}")
}

fn side_name(level: usize) -> String {
    format!("dec.side{level}")
}

const REFINE_CONV: &str = "refine.conv";
const REFINE_BRANCH: &str = "refine.branch";
const REFINE_HEAD: &str = "refine.head";

fn block_in_channels(config: &NetworkConfig, level: usize) -> usize {
    if level == config.depth - 1 {
        config.width(level)
    } else {
        config.width(level + 1) + config.width(level)
    }
}

fn refine_specs(config: &NetworkConfig) -> (ConvSpec, ConvSpec, ConvSpec) {
    let w0 = config.width(0);
    (
        ConvSpec::same(config.depth + w0, w0, 3, 1),
        ConvSpec::same(w0, w0, 3, 1),
        ConvSpec::pointwise(w0, 1),
    )
}

pub fn declare(config: &NetworkConfig, decls: &mut Declarations) {
    for level in (0..config.depth).rev() {
        declare_conv_block(
            decls,
            &block_name(level),
            block_in_channels(config, level),
            config.width(level),
            1,
        );
        decls.conv(
            &side_name(level),
            &ConvSpec::pointwise(config.width(level), 1),
            true,
        );
    }
    let (conv, branch, head) = refine_specs(config);
    decls.conv(REFINE_CONV, &conv, true);
    decls.conv(REFINE_BRANCH, &branch, true);
    // Zero head: the refined output starts as exactly S_0.
    decls.conv_zero(REFINE_HEAD, &head);
}

/// Decoder feature maps `D_i` and side logits, before refinement.
pub struct DecoderState {
    pub features: Vec<Var>,
    pub sides: Vec<Var>,
}

pub fn decode_levels(
    ctx: &mut Ctx,
    config: &NetworkConfig,
    graph: &NodeGraph,
    nodes: &BTreeMap<NodeId, Var>,
) -> Result<DecoderState> {
    let depth = config.depth;
    let mut features = vec![None; depth];
    let mut sides = vec![None; depth];
    let mut deeper: Option<Var> = None;
    for level in (0..depth).rev() {
        let id = graph.final_column(level);
        let skip = *nodes
            .get(&id)
            .ok_or_else(|| Error::Invalid(format!("missing encoder output for node {id:?}")))?;
        let input = match deeper {
            None => skip,
            Some(d) => {
                let up = ctx.tape.upsample_bilinear_2x(d)?;
                ctx.tape.concat_channels(&[up, skip])?
            }
        };
        let d = ctx.conv_block(
            &block_name(level),
            input,
            block_in_channels(config, level),
            config.width(level),
            1,
        )?;
        let s = ctx.conv(
            &side_name(level),
            d,
            ConvSpec::pointwise(config.width(level), 1),
            true,
        )?;
        features[level] = Some(d);
        sides[level] = Some(s);
        deeper = Some(d);
    }
    Ok(DecoderState {
        features: features.into_iter().map(Option::unwrap).collect(),
        sides: sides.into_iter().map(Option::unwrap).collect(),
    })
}

/// Full decoder: level-wise fusion, side heads and refinement.
pub fn decode(
    ctx: &mut Ctx,
    config: &NetworkConfig,
    graph: &NodeGraph,
    nodes: &BTreeMap<NodeId, Var>,
) -> Result<SideOutputs> {
    let state = decode_levels(ctx, config, graph, nodes)?;
    let refined = refine(ctx, config, &state.sides, state.features[0])?;
    Ok(SideOutputs {
        sides: state.sides,
        refined,
    })
}

/// `R = S_0 + head(h + up(branch(pool(h))))` with
/// `h = ReLU(conv(concat(up(σ(S_0)), …, up(σ(S_{L−1})), D_0)))`.
pub fn refine(ctx: &mut Ctx, config: &NetworkConfig, sides: &[Var], top_feature: Var) -> Result<Var> {
    let s0 = *sides
        .first()
        .ok_or_else(|| Error::Invalid("refine: empty side-output list".into()))?;
    if sides.len() != config.depth {
        return Err(Error::Invalid(format!(
            "refine: expected {} side outputs, got {}",
            config.depth,
            sides.len()
        )));
    }
    let (_, _, h, w) = ctx.tape.value(s0).dims4()?;
    let mut parts = Vec::with_capacity(sides.len() + 1);
    for (level, &s) in sides.iter().enumerate() {
        let (_, _, sh, sw) = ctx.tape.value(s).dims4()?;
        if (sh << level, sw << level) != (h, w) {
            return Err(Error::shape(
                "refine",
                format!("side output {level} is {sh}x{sw}, expected {}x{}", h >> level, w >> level),
            ));
        }
        let gate = ctx.tape.sigmoid(s)?;
        parts.push(if level == 0 {
            gate
        } else {
            ctx.tape.upsample_bilinear(gate, 1 << level)?
        });
    }
    parts.push(top_feature);
    let (conv, branch, head) = refine_specs(config);
    let cat = ctx.tape.concat_channels(&parts)?;
    let h1 = ctx.conv(REFINE_CONV, cat, conv, true)?;
    let h1 = ctx.tape.relu(h1)?;
    let pooled = ctx.tape.max_pool_2x2(h1)?;
    let b = ctx.conv(REFINE_BRANCH, pooled, branch, true)?;
    let b = ctx.tape.relu(b)?;
    let b = ctx.tape.upsample_bilinear_2x(b)?;
    let h2 = ctx.tape.add(h1, b)?;
    let correction = ctx.conv(REFINE_HEAD, h2, head, true)?;
    ctx.tape.add(s0, correction)
}

/// `[σ(logit) ≥ threshold]` as a 0/1 tensor.
pub fn predict_mask(logits: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!("threshold {threshold} not in (0, 1)")));
    }
    Ok(logits.map(|x| if sigmoid(x) >= threshold { 1.0 } else { 0.0 }))
}
