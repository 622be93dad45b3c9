//! Parallel convolutional attention module.
//!
//! `N` independent conv → ReLU → batch-norm paths, each emitting
//! `C_out/N` channels, are concatenated and aggregated by a dilated 3×3
//! conv followed by a 1×1 conv into `F_ctx`. A two-layer 1×1 bottleneck
//! (`C_out/4` wide) with a sigmoid produces a full `C_out × H × W` attention
//! map `A`, and the module returns `F_ctx ⊙ A`.

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::params::{Ctx, Declarations};
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcamConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub paths: usize,
}

impl PcamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.paths == 0 {
            return Err(Error::Config(format!("PCAM widths must be positive: {self:?}")));
        }
        if !self.out_channels.is_multiple_of(self.paths) {
            return Err(Error::Config(format!(
                "PCAM output width {} is not divisible by {} paths",
                self.out_channels, self.paths
            )));
        }
        if !self.out_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "PCAM output width {} is not divisible by 4 (attention bottleneck)",
                self.out_channels
            )));
        }
        Ok(())
    }

    pub fn path_width(&self) -> usize {
        self.out_channels / self.paths
    }

    pub fn bottleneck(&self) -> usize {
        self.out_channels / 4
    }

    fn path_spec(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.path_width(), 3, 1)
    }

    fn dilated_spec(&self) -> ConvSpec {
        ConvSpec::same(self.out_channels, self.out_channels, 3, 2)
    }
}

pub fn declare(cfg: &PcamConfig, prefix: &str, decls: &mut Declarations) -> Result<()> {
    cfg.validate()?;
    for k in 0..cfg.paths {
        decls.conv(&format!("{prefix}.path{k}.conv"), &cfg.path_spec(), true);
        decls.batch_norm(&format!("{prefix}.path{k}.bn"), cfg.path_width());
    }
    let c = cfg.out_channels;
    decls.conv(&format!("{prefix}.agg.dilated"), &cfg.dilated_spec(), true);
    decls.conv(&format!("{prefix}.agg.pointwise"), &ConvSpec::pointwise(c, c), true);
    decls.conv(
        &format!("{prefix}.attn.reduce"),
        &ConvSpec::pointwise(c, cfg.bottleneck()),
        true,
    );
    decls.conv(
        &format!("{prefix}.attn.expand"),
        &ConvSpec::pointwise(cfg.bottleneck(), c),
        true,
    );
    Ok(())
}

/// `F_i = BatchNorm(ReLU(Conv(x)))` for each path.
pub fn pcam_paths(ctx: &mut Ctx, prefix: &str, x: Var, cfg: &PcamConfig) -> Result<Vec<Var>> {
    cfg.validate()?;
    (0..cfg.paths)
        .map(|k| {
            let h = ctx.conv(&format!("{prefix}.path{k}.conv"), x, cfg.path_spec(), true)?;
            let h = ctx.tape.relu(h)?;
            ctx.batch_norm(&format!("{prefix}.path{k}.bn"), h)
        })
        .collect()
}

/// `F_ctx = Conv1×1(Conv3×3,d=2(Concat(F_1..F_N)))`.
pub fn pcam_aggregate(ctx: &mut Ctx, prefix: &str, paths: &[Var], cfg: &PcamConfig) -> Result<Var> {
    let first = paths
        .first()
        .ok_or_else(|| Error::shape("pcam_aggregate", "no paths"))?;
    let shape = ctx.tape.value(*first).shape().to_vec();
    if paths.iter().any(|&p| ctx.tape.value(p).shape() != shape.as_slice()) {
        return Err(Error::shape("pcam_aggregate", "paths have ragged shapes"));
    }
    let cat = ctx.tape.concat_channels(paths)?;
    let h = ctx.conv(&format!("{prefix}.agg.dilated"), cat, cfg.dilated_spec(), true)?;
    let c = cfg.out_channels;
    ctx.conv(
        &format!("{prefix}.agg.pointwise"),
        h,
        ConvSpec::pointwise(c, c),
        true,
    )
}

/// `A = σ(Conv1×1(ReLU(Conv1×1(F_ctx))))`.
pub fn pcam_attention(ctx: &mut Ctx, prefix: &str, f_ctx: Var, cfg: &PcamConfig) -> Result<Var> {
    cfg.validate()?;
    let c = cfg.out_channels;
    let h = ctx.conv(
        &format!("{prefix}.attn.reduce"),
        f_ctx,
        ConvSpec::pointwise(c, cfg.bottleneck()),
        true,
    )?;
    let h = ctx.tape.relu(h)?;
    let h = ctx.conv(
        &format!("{prefix}.attn.expand"),
        h,
        ConvSpec::pointwise(cfg.bottleneck(), c),
        true,
    )?;
    ctx.tape.sigmoid(h)
}

/// `Y = F_ctx ⊙ A`.
pub fn pcam_forward(ctx: &mut Ctx, prefix: &str, x: Var, cfg: &PcamConfig) -> Result<Var> {
    let paths = pcam_paths(ctx, prefix, x, cfg)?;
    let f_ctx = pcam_aggregate(ctx, prefix, &paths, cfg)?;
    let attention = pcam_attention(ctx, prefix, f_ctx, cfg)?;
    ctx.tape.mul(f_ctx, attention)
}
