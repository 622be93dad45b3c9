//! Central finite-difference checks of every backward rule.
//!
//! Each case builds a scalar from leaf tensors (non-scalar outputs are
//! reduced with fixed random weights), then compares the tape gradient with
//! `(f(x + h) − f(x − h)) / 2h` entry by entry. The error of an entry is
//! `|analytic − numeric| / max(|numeric|, 1e−6)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvSpec;
use crate::decoder;
use crate::encoder::{self, build_graph, NetworkConfig};
use crate::error::{Error, Result};
use crate::model::declarations;
use crate::norm::{Mode, RunningStats};
use crate::objective::{total_loss, LossConfig};
use crate::params::{Binding, Ctx, ParamStore};
use crate::pcam::{self, PcamConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
/// Entries checked per parameter tensor in the network-sized cases.
const SAMPLES_PER_TENSOR: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Losses,
    Network,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "losses" => Ok(Scope::Losses),
            "network" => Ok(Scope::Network),
            _ => Err(Error::Invalid(format!(
                "unknown gradcheck scope '{s}' (expected ops, losses or network)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub seed: u64,
    /// Case name whose analytic gradient is scaled by 1.5 before the
    /// comparison. Used to confirm the harness notices a wrong rule.
    pub perturb: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Input name and flat index of the worst entry.
    pub worst: (String, usize),
    pub entries: usize,
    /// Entries whose ±step probes crossed a ReLU, pooling or TV kink.
    pub skipped: usize,
}

impl CaseResult {
    /// Passes when every compared entry is within tolerance and at most a
    /// quarter of the entries had to be skipped.
    pub fn passed(&self) -> bool {
        self.entries > 0 && self.max_rel_error < TOLERANCE && 4 * self.skipped <= self.entries + self.skipped
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max rel err {:.3e} at {}[{}] over {} entries ({} at kinks): {}",
            self.name,
            self.max_rel_error,
            self.worst.0,
            self.worst.1,
            self.entries,
            self.skipped,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn scalar_root(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    tape.weighted_sum(out, weights.clone())
}

fn evaluate(inputs: &[(String, Tensor)], build: &Build, weights: &Tensor) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let root = scalar_root(&mut tape, out, weights)?;
    Ok((tape.value(root).item(), tape.branch_pattern()))
}

/// Checks every entry of every input of one case.
pub fn check_case(
    name: &str,
    inputs: Vec<(String, Tensor)>,
    build: &Build,
    rng: &mut ChaCha8Rng,
    opts: &Options,
) -> Result<CaseResult> {
    check_case_sampled(name, inputs, build, rng, opts, None)
}

/// Like [`check_case`], but with at most `per_input` randomly chosen
/// entries of each input when a limit is given.
pub fn check_case_sampled(
    name: &str,
    inputs: Vec<(String, Tensor)>,
    build: &Build,
    rng: &mut ChaCha8Rng,
    opts: &Options,
    per_input: Option<usize>,
) -> Result<CaseResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    // Mixed signs keep the root small, and with it the rounding noise of
    // the differences.
    let weights = Tensor::from_fn(&shape, |_| {
        let m = rng.random_range(0.5..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    });
    let root = scalar_root(&mut tape, out, &weights)?;
    let grads = tape.backward(root)?;
    let pattern = tape.branch_pattern();
    let scale = if opts.perturb.as_deref() == Some(name) { 1.5 } else { 1.0 };

    let mut worst = (0.0, (String::new(), 0));
    let mut entries = 0;
    let mut skipped = 0;
    let mut probe = inputs.clone();
    for (k, (input_name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], t.shape());
        let indices: Vec<usize> = match per_input {
            Some(n) if n < t.len() => rand::seq::index::sample(rng, t.len(), n).into_vec(),
            _ => (0..t.len()).collect(),
        };
        for i in indices {
            let x = t.data()[i];
            probe[k].1.data_mut()[i] = x + STEP;
            let (plus, p_plus) = evaluate(&probe, build, &weights)?;
            probe[k].1.data_mut()[i] = x - STEP;
            let (minus, p_minus) = evaluate(&probe, build, &weights)?;
            probe[k].1.data_mut()[i] = x;
            if p_plus != pattern || p_minus != pattern {
                // The difference straddles a kink and says nothing about
                // the derivative on either side.
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = scale * analytic.data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(FLOOR);
            if err > worst.0 || entries == 0 {
                worst = (err, (input_name.clone(), i));
            }
            entries += 1;
        }
    }
    Ok(CaseResult {
        name: name.to_string(),
        max_rel_error: worst.0,
        worst: worst.1,
        entries,
        skipped,
    })
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn normal_like(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ReLU.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// A shuffled ladder of well-separated values, so no pooling window ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("shape product")
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.random::<bool>() { 1.0 } else { 0.0 })
}

fn named(pairs: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn conv_case(
    rng: &mut ChaCha8Rng,
    opts: &Options,
    name: &str,
    kernel: usize,
    dilation: usize,
) -> Result<CaseResult> {
    let cin = dims(rng, 1, 3);
    let cout = dims(rng, 1, 3);
    let h = dims(rng, 3, 6);
    let w = dims(rng, 3, 6);
    let spec = ConvSpec::same(cin, cout, kernel, dilation);
    let inputs = named(vec![
        ("x", normal_like(rng, &[2, cin, h, w])),
        ("weight", normal_like(rng, &spec.weight_shape())),
        ("bias", normal_like(rng, &[cout])),
    ]);
    check_case(
        name,
        inputs,
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), spec),
        rng,
        opts,
    )
}

fn op_cases(rng: &mut ChaCha8Rng, opts: &Options) -> Result<Vec<CaseResult>> {
    let mut out = vec![
        conv_case(rng, opts, "conv2d 3x3", 3, 1)?,
        conv_case(rng, opts, "conv2d 3x3 dilation 2", 3, 2)?,
        conv_case(rng, opts, "conv2d 3x3 dilation 3", 3, 3)?,
        conv_case(rng, opts, "conv2d 1x1", 1, 1)?,
    ];

    let c = dims(rng, 1, 3);
    let (h, w) = (dims(rng, 2, 5), dims(rng, 2, 5));
    let inputs = named(vec![
        ("x", normal_like(rng, &[2, c, h, w])),
        ("gamma", normal_like(rng, &[c])),
        ("beta", normal_like(rng, &[c])),
    ]);
    out.push(check_case(
        "batch_norm",
        inputs,
        &|t, v| {
            let mut stats = RunningStats::new(c);
            t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train, "gradcheck")
        },
        rng,
        opts,
    )?);

    let shape = [2, dims(rng, 1, 3), dims(rng, 2, 6), dims(rng, 2, 6)];
    out.push(check_case(
        "relu",
        named(vec![("x", off_zero(rng, &shape))]),
        &|t, v| t.relu(v[0]),
        rng,
        opts,
    )?);
    out.push(check_case(
        "sigmoid",
        named(vec![("x", normal_like(rng, &shape).map(|v| 3.0 * v))]),
        &|t, v| t.sigmoid(v[0]),
        rng,
        opts,
    )?);
    out.push(check_case(
        "add",
        named(vec![("a", normal_like(rng, &shape)), ("b", normal_like(rng, &shape))]),
        &|t, v| t.add(v[0], v[1]),
        rng,
        opts,
    )?);
    out.push(check_case(
        "mul",
        named(vec![("a", normal_like(rng, &shape)), ("b", normal_like(rng, &shape))]),
        &|t, v| t.mul(v[0], v[1]),
        rng,
        opts,
    )?);
    out.push(check_case(
        "scale",
        named(vec![("x", normal_like(rng, &shape))]),
        &|t, v| t.scale(v[0], -1.75),
        rng,
        opts,
    )?);

    let (h, w) = (dims(rng, 1, 3), dims(rng, 1, 3));
    let inputs = named(vec![
        ("a", normal_like(rng, &[2, 1, h, w])),
        ("b", normal_like(rng, &[2, 2, h, w])),
        ("c", normal_like(rng, &[2, 3, h, w])),
    ]);
    out.push(check_case(
        "concat",
        inputs,
        &|t, v| t.concat_channels(v),
        rng,
        opts,
    )?);

    let pool_shape = [2, dims(rng, 1, 2), 2 * dims(rng, 1, 3), 2 * dims(rng, 1, 3)];
    out.push(check_case(
        "max_pool_2x2",
        named(vec![("x", distinct(rng, &pool_shape))]),
        &|t, v| t.max_pool_2x2(v[0]),
        rng,
        opts,
    )?);

    let small = [2, dims(rng, 1, 2), dims(rng, 2, 3), dims(rng, 2, 3)];
    out.push(check_case(
        "upsample_bilinear x2",
        named(vec![("x", normal_like(rng, &small))]),
        &|t, v| t.upsample_bilinear_2x(v[0]),
        rng,
        opts,
    )?);
    out.push(check_case(
        "upsample_bilinear x4",
        named(vec![("x", normal_like(rng, &small))]),
        &|t, v| t.upsample_bilinear(v[0], 4),
        rng,
        opts,
    )?);
    out.push(check_case(
        "sum",
        named(vec![("x", normal_like(rng, &shape))]),
        &|t, v| t.sum(v[0]),
        rng,
        opts,
    )?);
    Ok(out)
}

/// Logits whose probabilities differ by at least 0.01 between neighbours,
/// keeping the TV absolute values away from their kink.
fn tv_safe_logits(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    loop {
        let t = normal_like(rng, shape).map(|v| 2.5 * v);
        if tv_margin(&t) > 0.01 {
            return t;
        }
    }
}

fn tv_margin(logits: &Tensor) -> f64 {
    use crate::objective::kernels::sigmoid;
    let (b, c, h, w) = logits.dims4().expect("rank 4");
    let p: Vec<f64> = logits.data().iter().map(|&x| sigmoid(x)).collect();
    let mut m = f64::INFINITY;
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                let v = p[base + y * w + x];
                if y + 1 < h {
                    m = m.min((p[base + (y + 1) * w + x] - v).abs());
                }
                if x + 1 < w {
                    m = m.min((p[base + y * w + x + 1] - v).abs());
                }
            }
        }
    }
    m
}

fn toy_network() -> NetworkConfig {
    NetworkConfig {
        depth: 2,
        base_channels: 4,
        pcam_paths: 2,
        ..NetworkConfig::desk()
    }
}

/// Parameters of `config` as named inputs plus their running statistics.
fn network_inputs(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<(String, Tensor)>, ParamStore)> {
    let graph = build_graph(config)?;
    let decls = declarations(config, &graph)?;
    let mut store = ParamStore::initialize(&decls, rng)?;
    // The zero-initialised refinement head would make every upstream
    // refinement gradient vanish; give it random weights for the check.
    for (name, t) in store.tensors.iter_mut() {
        if name.starts_with("refine.head") {
            *t = normal_like(rng, t.shape()).map(|v| 0.5 * v);
        }
    }
    let inputs = store
        .tensors
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok((inputs, store))
}

fn binding_for(inputs_names: &[String], vars: &[Var]) -> Binding {
    Binding {
        vars: inputs_names.iter().cloned().zip(vars.iter().copied()).collect(),
    }
}

fn network_loss_case(rng: &mut ChaCha8Rng, opts: &Options) -> Result<CaseResult> {
    let config = toy_network();
    let graph = build_graph(&config)?;
    let (inputs, store) = network_inputs(&config, rng)?;
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let images = normal_like(rng, &[2, 1, 4, 4]).map(|v| 0.5 + 0.5 * v);
    let masks = binary(rng, &[2, 1, 4, 4]);
    let loss = LossConfig::default();
    let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let binding = binding_for(&names, v);
        let mut stats: BTreeMap<String, RunningStats> = store.stats.clone();
        let x = t.constant(images.clone());
        let mut ctx = Ctx {
            tape: t,
            binding: &binding,
            stats: &mut stats,
            mode: Mode::Train,
        };
        let nodes = encoder::encoder_forward(&mut ctx, &config, &graph, x)?;
        let outputs = decoder::decode(&mut ctx, &config, &graph, &nodes)?;
        Ok(total_loss(t, &outputs, &masks, &loss)?.total)
    };
    check_case_sampled("total_loss (toy network)", inputs, &build, rng, opts, Some(SAMPLES_PER_TENSOR))
}

fn loss_cases(rng: &mut ChaCha8Rng, opts: &Options) -> Result<Vec<CaseResult>> {
    let shape = [2, 1, dims(rng, 2, 6), dims(rng, 2, 6)];
    let targets = binary(rng, &shape);
    let logits = normal_like(rng, &shape).map(|v| 3.0 * v);
    let mut out = vec![
        check_case(
            "bce_with_logits",
            named(vec![("logits", logits.clone())]),
            &|t, v| t.bce_with_logits(v[0], &targets),
            rng,
            opts,
        )?,
        check_case(
            "soft_dice",
            named(vec![("logits", logits)]),
            &|t, v| t.soft_dice_loss(v[0], &targets, 1e-6),
            rng,
            opts,
        )?,
    ];
    let tv_logits = tv_safe_logits(rng, &shape);
    out.push(check_case(
        "total_variation",
        named(vec![("logits", tv_logits)]),
        &|t, v| t.tv_loss(v[0]),
        rng,
        opts,
    )?);
    out.push(network_loss_case(rng, opts)?);
    Ok(out)
}

fn pcam_case(rng: &mut ChaCha8Rng, opts: &Options) -> Result<CaseResult> {
    let cfg = PcamConfig {
        in_channels: 3,
        out_channels: 8,
        paths: 2,
    };
    let mut decls = crate::params::Declarations::default();
    pcam::declare(&cfg, "p", &mut decls)?;
    let store = ParamStore::initialize(&decls, rng)?;
    let mut inputs: Vec<(String, Tensor)> = vec![("x".to_string(), normal_like(rng, &[2, 3, 5, 5]))];
    inputs.extend(store.tensors.iter().map(|(k, v)| (k.clone(), v.clone())));
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let binding = binding_for(&names, v);
        let mut stats = store.stats.clone();
        let mut ctx = Ctx {
            tape: t,
            binding: &binding,
            stats: &mut stats,
            mode: Mode::Train,
        };
        pcam::pcam_forward(&mut ctx, "p", v[0], &cfg)
    };
    check_case("pcam", inputs, &build, rng, opts)
}

fn encoder_decoder_case(rng: &mut ChaCha8Rng, opts: &Options) -> Result<CaseResult> {
    let config = NetworkConfig {
        depth: 3,
        base_channels: 4,
        pcam_paths: 2,
        ..NetworkConfig::desk()
    };
    let graph = build_graph(&config)?;
    let (inputs, store) = network_inputs(&config, rng)?;
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let images = normal_like(rng, &[4, 1, 8, 8]);
    let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let binding = binding_for(&names, v);
        let mut stats = store.stats.clone();
        let x = t.constant(images.clone());
        let mut ctx = Ctx {
            tape: t,
            binding: &binding,
            stats: &mut stats,
            mode: Mode::Train,
        };
        let nodes = encoder::encoder_forward(&mut ctx, &config, &graph, x)?;
        let outputs = decoder::decode(&mut ctx, &config, &graph, &nodes)?;
        // Every node output and side output, each reduced with fixed
        // mixed-sign weights normalised by its size.
        let mut parts: Vec<Var> = Vec::new();
        for &v in nodes.values().chain(&outputs.sides).chain([&outputs.refined]) {
            let shape = ctx.tape.value(v).shape().to_vec();
            let n = ctx.tape.value(v).len() as f64;
            let w = Tensor::from_fn(&shape, |i| (0.7 * i as f64 + 0.3).sin() / n);
            parts.push(ctx.tape.weighted_sum(v, w)?);
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = ctx.tape.add(acc, p)?;
        }
        Ok(acc)
    };
    check_case_sampled("encoder + decoder (depth 3)", inputs, &build, rng, opts, Some(SAMPLES_PER_TENSOR))
}

fn network_cases(rng: &mut ChaCha8Rng, opts: &Options) -> Result<Vec<CaseResult>> {
    Ok(vec![
        pcam_case(rng, opts)?,
        encoder_decoder_case(rng, opts)?,
        network_loss_case(rng, opts)?,
    ])
}

pub fn run(scope: Scope, opts: &Options) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    match scope {
        Scope::Ops => op_cases(&mut rng, opts),
        Scope::Losses => loss_cases(&mut rng, opts),
        Scope::Network => network_cases(&mut rng, opts),
    }
}
