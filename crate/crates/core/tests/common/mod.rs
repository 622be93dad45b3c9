#![allow(dead_code)]

use std::collections::BTreeMap;

use pemf_core::encoder::{node_name, NodeId, PCAM_PREFIX};
use pemf_core::norm::{Mode, RunningStats};
use pemf_core::params::{Binding, Ctx};
use pemf_core::pcam;
use pemf_core::{ConvSpec, NetworkConfig, Tape, Tensor, Var};

/// Direct nested-loop convolution, the reference for the GEMM path.
pub fn naive_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    let (b, cin, h, wd) = x.dims4().unwrap();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let d = spec.dilation;
    let ho = (h + 2 * ph - d * (kh - 1) - 1) / sh + 1;
    let wo = (wd + 2 * pw - d * (kw - 1) - 1) / sw + 1;
    let cout = spec.out_channels;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * sh + i * d) as isize - ph as isize;
                                let ix = (xo * sw + j * d) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * cin + c) * kh + i) * kw + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, ho, wo], out).unwrap()
}

/// Nested U-Net forward written directly against tape ops, sharing the
/// model's parameter names. Optionally applies the attention block at the
/// deepest node.
pub fn reference_unetpp(
    tape: &mut Tape,
    binding: &Binding,
    stats: &mut BTreeMap<String, RunningStats>,
    cfg: &NetworkConfig,
    x: Var,
) -> BTreeMap<NodeId, Var> {
    let depth = cfg.depth;
    let block = |tape: &mut Tape, stats: &mut BTreeMap<String, RunningStats>, id: NodeId, input: Var, cin: usize| {
        let cout = cfg.width(id.0);
        let mut h = input;
        for (k, c) in [(1, cin), (2, cout)] {
            let name = format!("{}.conv{k}", node_name(id));
            let w = binding.get(&format!("{name}.weight")).unwrap();
            h = tape.conv2d(h, w, None, ConvSpec::same(c, cout, 3, 1)).unwrap();
            let bn = format!("{}.bn{k}", node_name(id));
            let g = binding.get(&format!("{bn}.gamma")).unwrap();
            let b = binding.get(&format!("{bn}.beta")).unwrap();
            h = tape
                .batch_norm(h, g, b, stats.get_mut(&bn).unwrap(), Mode::Train, "ref")
                .unwrap();
            h = tape.relu(h).unwrap();
        }
        h
    };
    let mut x_ij: BTreeMap<NodeId, Var> = BTreeMap::new();
    for i in 0..depth {
        let (input, cin) = if i == 0 {
            (x, 1)
        } else {
            (tape.max_pool_2x2(x_ij[&(i - 1, 0)]).unwrap(), cfg.width(i - 1))
        };
        let mut out = block(tape, stats, (i, 0), input, cin);
        if i == depth - 1 && cfg.use_pcam {
            let mut ctx = Ctx {
                tape,
                binding,
                stats,
                mode: Mode::Train,
            };
            out = pcam::pcam_forward(&mut ctx, PCAM_PREFIX, out, &cfg.pcam_config()).unwrap();
        }
        x_ij.insert((i, 0), out);
    }
    for j in 1..depth {
        for i in (0..depth - j).rev() {
            let mut parts: Vec<Var> = (0..j).map(|k| x_ij[&(i, k)]).collect();
            parts.push(tape.upsample_bilinear_2x(x_ij[&(i + 1, j - 1)]).unwrap());
            let cin = j * cfg.width(i) + cfg.width(i + 1);
            let cat = tape.concat_channels(&parts).unwrap();
            let out = block(tape, stats, (i, j), cat, cin);
            x_ij.insert((i, j), out);
        }
    }
    x_ij
}
