mod common;

use std::collections::BTreeMap;

use pemf_core::decoder::{self, refine};
use pemf_core::encoder::{build_graph, encoder_forward, EdgeKind, NodeId, PCAM_PREFIX};
use pemf_core::model::declarations;
use pemf_core::norm::Mode;
use pemf_core::params::{Binding, Ctx, Declarations, ParamStore};
use pemf_core::pcam::{self, PcamConfig};
use pemf_core::{Model, NetworkConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn pcam_store(cfg: &PcamConfig, seed: u64) -> ParamStore {
    let mut decls = Declarations::default();
    pcam::declare(cfg, "p", &mut decls).unwrap();
    ParamStore::initialize(&decls, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn with_ctx<T>(store: &mut ParamStore, f: impl FnOnce(&mut Ctx, &Binding) -> T) -> (Tape, T) {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let out = {
        let mut ctx = Ctx {
            tape: &mut tape,
            binding: &binding,
            stats: &mut store.stats,
            mode: Mode::Train,
        };
        f(&mut ctx, &binding)
    };
    (tape, out)
}

const PCAM8: PcamConfig = PcamConfig {
    in_channels: 3,
    out_channels: 8,
    paths: 4,
};

#[test]
fn pcam_paths_split_channels_and_keep_extent() {
    let mut store = pcam_store(&PCAM8, 1);
    let (tape, paths) = with_ctx(&mut store, |ctx, _| {
        let x = ctx.tape.constant(random(&[2, 3, 6, 5], 2));
        pcam::pcam_paths(ctx, "p", x, &PCAM8).unwrap()
    });
    assert_eq!(paths.len(), 4);
    for p in paths {
        assert_eq!(tape.value(p).shape(), &[2, 2, 6, 5]);
    }
}

#[test]
fn pcam_zero_input_gives_zero_paths() {
    let mut store = pcam_store(&PCAM8, 1);
    for (name, t) in store.tensors.iter_mut() {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let (tape, paths) = with_ctx(&mut store, |ctx, _| {
        let x = ctx.tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
        pcam::pcam_paths(ctx, "p", x, &PCAM8).unwrap()
    });
    for p in paths {
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn pcam_zero_dilated_kernel_gives_bias_map() {
    let mut store = pcam_store(&PCAM8, 3);
    *store.get_mut("p.agg.dilated.weight").unwrap() = Tensor::zeros(&[8, 8, 3, 3]);
    let bias_dil = random(&[8], 4);
    *store.get_mut("p.agg.dilated.bias").unwrap() = bias_dil.clone();
    // Identity pointwise conv with zero bias.
    *store.get_mut("p.agg.pointwise.weight").unwrap() =
        Tensor::from_fn(&[8, 8, 1, 1], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
    *store.get_mut("p.agg.pointwise.bias").unwrap() = Tensor::zeros(&[8]);
    let (tape, f) = with_ctx(&mut store, |ctx, _| {
        let x = ctx.tape.constant(random(&[1, 3, 5, 7], 5));
        let paths = pcam::pcam_paths(ctx, "p", x, &PCAM8).unwrap();
        pcam::pcam_aggregate(ctx, "p", &paths, &PCAM8).unwrap()
    });
    let f = tape.value(f);
    assert_eq!(f.shape(), &[1, 8, 5, 7]);
    for c in 0..8 {
        assert!(f.plane(0, c).iter().all(|&v| v == bias_dil.data()[c]));
    }
}

fn attention_value(store: &mut ParamStore, f_ctx: &Tensor) -> (Tensor, Tensor) {
    let (tape, (a, y)) = with_ctx(store, |ctx, _| {
        let f = ctx.tape.constant(f_ctx.clone());
        let a = pcam::pcam_attention(ctx, "p", f, &PCAM8).unwrap();
        let y = ctx.tape.mul(f, a).unwrap();
        (a, y)
    });
    (tape.value(a).clone(), tape.value(y).clone())
}

#[test]
fn pcam_attention_limits() {
    let f_ctx = random(&[2, 8, 3, 3], 6);
    let mut store = pcam_store(&PCAM8, 7);
    let (a, _) = attention_value(&mut store, &f_ctx);
    assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));

    for name in ["p.attn.reduce.weight", "p.attn.reduce.bias", "p.attn.expand.weight", "p.attn.expand.bias"] {
        let t = store.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let (a, y) = attention_value(&mut store, &f_ctx);
    assert!(a.data().iter().all(|&v| v == 0.5));
    assert_eq!(y.data(), f_ctx.map(|v| v / 2.0).data());

    *store.get_mut("p.attn.expand.bias").unwrap() = Tensor::full(&[8], 40.0);
    let (a, y) = attention_value(&mut store, &f_ctx);
    assert!(a.data().iter().all(|&v| (1.0 - v).abs() < 1e-12));
    assert!(y.max_abs_diff(&f_ctx) < 1e-10);
}

#[test]
fn pcam_forward_equals_context_times_gate() {
    let mut store = pcam_store(&PCAM8, 8);
    let (tape, (f, a, y)) = with_ctx(&mut store, |ctx, _| {
        let x = ctx.tape.constant(random(&[2, 3, 4, 4], 9));
        let paths = pcam::pcam_paths(ctx, "p", x, &PCAM8).unwrap();
        let f = pcam::pcam_aggregate(ctx, "p", &paths, &PCAM8).unwrap();
        let a = pcam::pcam_attention(ctx, "p", f, &PCAM8).unwrap();
        let y = pcam::pcam_forward(ctx, "p", x, &PCAM8).unwrap();
        (f, a, y)
    });
    let expect = tape.value(f).zip_map(tape.value(a), |f, a| f * a).unwrap();
    assert_eq!(tape.value(y), &expect);
}

/// Edges of a canonical nested U-Net, generated without the library.
fn unetpp_edges(depth: usize) -> BTreeMap<NodeId, Vec<(EdgeKind, NodeId)>> {
    let mut out = BTreeMap::new();
    for i in 0..depth {
        for j in 0..depth - i {
            let mut e = Vec::new();
            if j == 0 {
                if i == 0 {
                    e.push((EdgeKind::Input, (0, 0)));
                } else {
                    e.push((EdgeKind::Down, (i - 1, 0)));
                }
            } else {
                for k in 0..j {
                    e.push((EdgeKind::Skip, (i, k)));
                }
                e.push((EdgeKind::Up, (i + 1, j - 1)));
            }
            e.sort();
            out.insert((i, j), e);
        }
    }
    out
}

#[test]
fn cross_off_grid_is_canonical_unetpp() {
    for depth in 2..=5 {
        let cfg = NetworkConfig {
            depth,
            use_cross_structure: false,
            ..NetworkConfig::desk()
        };
        let graph = build_graph(&cfg).unwrap();
        let got: BTreeMap<NodeId, Vec<(EdgeKind, NodeId)>> = graph
            .nodes
            .iter()
            .map(|(id, spec)| {
                let mut e: Vec<_> = spec.inputs.iter().map(|e| (e.kind, e.from)).collect();
                e.sort();
                (*id, e)
            })
            .collect();
        assert_eq!(got, unetpp_edges(depth), "depth {depth}");
    }
}

fn model(depth: usize, base: usize, seed: u64, dilation: bool, cross: bool, pcam: bool) -> Model {
    let cfg = NetworkConfig {
        depth,
        base_channels: base,
        pcam_paths: 4,
        use_dilation: dilation,
        use_cross_structure: cross,
        use_pcam: pcam,
        ..NetworkConfig::desk()
    };
    Model::new(cfg, seed).unwrap()
}

#[test]
fn encoder_and_decoder_shapes() {
    let mut m = model(3, 8, 1, true, true, true);
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, &random(&[1, 1, 32, 32], 2), Mode::Train).unwrap();
    assert_eq!(tape.value(f.nodes[&(2, 0)]).shape(), &[1, 32, 8, 8]);
    assert_eq!(tape.value(f.nodes[&(0, 2)]).shape(), &[1, 8, 32, 32]);
    let sides: Vec<_> = f.outputs.sides.iter().map(|&s| tape.value(s).shape().to_vec()).collect();
    assert_eq!(sides, vec![vec![1, 1, 32, 32], vec![1, 1, 16, 16], vec![1, 1, 8, 8]]);
    assert_eq!(tape.value(f.outputs.refined).shape(), &[1, 1, 32, 32]);
    assert!(m.forward(&mut Tape::new(), &random(&[1, 1, 30, 32], 2), Mode::Train).is_err());
}

#[test]
fn pcam_off_leaves_deepest_node_raw() {
    let mut m = model(3, 8, 1, true, true, false);
    assert!(!m.params.tensors.keys().any(|k| k.starts_with(PCAM_PREFIX)));
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, &random(&[2, 1, 16, 16], 2), Mode::Train).unwrap();
    assert_eq!(tape.op_name(f.nodes[&(2, 0)]), "relu");
    let mut on = model(3, 8, 1, true, true, true);
    let mut tape = Tape::new();
    let f = on.forward(&mut tape, &random(&[2, 1, 16, 16], 2), Mode::Train).unwrap();
    assert_eq!(tape.op_name(f.nodes[&(2, 0)]), "mul");
}

#[test]
fn ablation_arm_is_bit_identical_to_plain_unetpp() {
    for pcam_on in [false, true] {
        let m = model(3, 4, 11, false, false, pcam_on);
        let graph = build_graph(&m.config).unwrap();
        let images = random(&[2, 1, 16, 16], 12);

        let mut tape = Tape::new();
        let binding = m.params.bind(&mut tape);
        let mut stats = m.params.stats.clone();
        let x = tape.constant(images.clone());
        let nodes = {
            let mut ctx = Ctx {
                tape: &mut tape,
                binding: &binding,
                stats: &mut stats,
                mode: Mode::Train,
            };
            encoder_forward(&mut ctx, &m.config, &graph, x).unwrap()
        };

        let mut ref_tape = Tape::new();
        let ref_binding = m.params.bind(&mut ref_tape);
        let mut ref_stats = m.params.stats.clone();
        let rx = ref_tape.constant(images);
        let reference = common::reference_unetpp(&mut ref_tape, &ref_binding, &mut ref_stats, &m.config, rx);

        assert_eq!(nodes.len(), reference.len());
        for (id, v) in &nodes {
            assert_eq!(tape.value(*v), ref_tape.value(reference[id]), "node {id:?}, pcam {pcam_on}");
        }
        assert_eq!(stats, ref_stats);
    }
}

#[test]
fn zero_init_head_makes_refined_equal_side_zero() {
    let mut m = model(3, 8, 5, true, true, true);
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, &random(&[2, 1, 16, 16], 6), Mode::Train).unwrap();
    assert_eq!(tape.value(f.outputs.refined), tape.value(f.outputs.sides[0]));

    // With a live head the refinement contributes.
    let head = m.params.get_mut("refine.head.weight").unwrap();
    *head = random(head.shape(), 7);
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, &random(&[2, 1, 16, 16], 6), Mode::Train).unwrap();
    assert!(tape.value(f.outputs.refined).max_abs_diff(tape.value(f.outputs.sides[0])) > 0.0);
}

#[test]
fn zero_side_heads_emit_their_bias() {
    let mut m = model(3, 8, 5, true, true, true);
    let biases = [0.25, -1.5, 3.0];
    for (level, b) in biases.iter().enumerate() {
        let w = m.params.get_mut(&format!("dec.side{level}.weight")).unwrap();
        *w = Tensor::zeros(w.shape());
        *m.params.get_mut(&format!("dec.side{level}.bias")).unwrap() = Tensor::full(&[1], *b);
    }
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, &random(&[1, 1, 16, 16], 6), Mode::Train).unwrap();
    for (level, b) in biases.iter().enumerate() {
        assert!(tape.value(f.outputs.sides[level]).data().iter().all(|v| v == b));
    }
}

#[test]
fn refine_validates_its_inputs() {
    let cfg = NetworkConfig {
        depth: 2,
        base_channels: 4,
        ..NetworkConfig::desk()
    };
    let graph = build_graph(&cfg).unwrap();
    let decls = declarations(&cfg, &graph).unwrap();
    let mut store = ParamStore::initialize(&decls, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (_, results) = with_ctx(&mut store, |ctx, _| {
        let top = ctx.tape.constant(random(&[1, 4, 8, 8], 1));
        let s0 = ctx.tape.constant(Tensor::full(&[1, 1, 8, 8], 0.3));
        let s1 = ctx.tape.constant(Tensor::full(&[1, 1, 4, 4], -0.3));
        let bad = ctx.tape.constant(Tensor::full(&[1, 1, 8, 8], -0.3));
        let empty = refine(ctx, &cfg, &[], top).is_err();
        let short = refine(ctx, &cfg, &[s0], top).is_err();
        let wrong_res = refine(ctx, &cfg, &[s0, bad], top).is_err();
        let ok = refine(ctx, &cfg, &[s0, s1], top).map(|r| ctx.tape.value(r).shape().to_vec());
        (empty, short, wrong_res, ok.unwrap())
    });
    assert_eq!(results, (true, true, true, vec![1, 1, 8, 8]));
}

#[test]
fn eval_before_any_training_step_is_an_error() {
    let mut m = model(2, 4, 0, true, true, true);
    let err = m.predict_logits(&random(&[1, 1, 8, 8], 0)).unwrap_err();
    assert!(matches!(err, pemf_core::Error::MissingRunningStats(_)), "{err}");
    m.forward(&mut Tape::new(), &random(&[2, 1, 8, 8], 0), Mode::Train).unwrap();
    let logits = m.predict_logits(&random(&[1, 1, 8, 8], 0)).unwrap();
    assert_eq!(
        decoder::predict_mask(&logits, 0.5).unwrap().shape(),
        &[1, 1, 8, 8]
    );
}
