//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Training runs are cached and shared between criteria, so the default arm
//! at seed 0 is trained once and reused wherever it appears.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pemf_core::checkpoint::Checkpoint;
use pemf_core::conv::conv2d_forward;
use pemf_core::data::{make_folds, synth_generate, SynthConfig};
use pemf_core::encoder::{build_graph, encoder_forward};
use pemf_core::gradcheck::{self, Options, Scope};
use pemf_core::metrics::{confusion, dsc, iou, ConfusionCounts};
use pemf_core::norm::Mode;
use pemf_core::objective::kernels;
use pemf_core::params::Ctx;
use pemf_core::trainer::{mean_probability_tv, train, AdamConfig, TrainOutcome};
use pemf_core::{
    ConvSpec, LesionClass, Model, NetworkConfig, SegmentationSample, Tape, Tensor, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPOCHS: usize = 15;
const LR: f64 = 1e-3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_soundness() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut cases = 0;
    for seed in 0..20 {
        let opts = Options { seed, perturb: None };
        for scope in [Scope::Ops, Scope::Losses] {
            for r in gradcheck::run(scope, &opts).expect("gradcheck runs") {
                cases += 1;
                if r.max_rel_error > worst.0 {
                    worst = (r.max_rel_error, r.name.clone());
                }
                if !r.passed() {
                    failures.push(format!("seed {seed}: {r}"));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    verdict(
        pass,
        format!(
            "{cases} case runs over 20 seeds, worst rel err {:.2e} ({}), {} failures, {}{}",
            worst.0,
            worst.1,
            failures.len(),
            secs(elapsed),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn convolution_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let spec = ConvSpec {
            in_channels: rng.random_range(1..5),
            out_channels: rng.random_range(1..5),
            kernel: (rng.random_range(1..5), rng.random_range(1..5)),
            stride: (rng.random_range(1..4), rng.random_range(1..4)),
            padding: (rng.random_range(0..3), rng.random_range(0..3)),
            dilation: rng.random_range(1..4),
        };
        let span = |k: usize, p: usize| (spec.dilation * (k - 1) + 1).saturating_sub(2 * p).max(1);
        let h = span(spec.kernel.0, spec.padding.0) + rng.random_range(0..7);
        let w = span(spec.kernel.1, spec.padding.1) + rng.random_range(0..7);
        let batch = rng.random_range(1..3);
        let x = random_tensor(&mut rng, vec![batch, spec.in_channels, h, w]);
        let k = random_tensor(&mut rng, spec.weight_shape().to_vec());
        let bias = random_tensor(&mut rng, vec![spec.out_channels]);
        let fast = conv2d_forward(&x, &k, Some(&bias), &spec).unwrap();
        let slow = common::naive_conv(&x, &k, Some(&bias), &spec);
        if fast.shape() != slow.shape() {
            return verdict(false, format!("shape mismatch for {spec:?}"));
        }
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    verdict(worst < 1e-10, format!("200 configurations, max abs diff {worst:.2e}"))
}

fn loss_closed_forms() -> Verdict {
    let t = |shape: &[usize], v: Vec<f64>| Tensor::new(shape.to_vec(), v).unwrap();
    let bce0 = kernels::bce_with_logits(&t(&[1, 1, 2, 2], vec![0.0; 4]), &t(&[1, 1, 2, 2], vec![1.0; 4])).unwrap();
    let bce1 = kernels::bce_with_logits(&t(&[1, 1, 1, 1], vec![1.0]), &t(&[1, 1, 1, 1], vec![0.0])).unwrap();
    let dice = kernels::soft_dice(
        &t(&[1, 1, 1, 4], vec![1.0, 1.0, 0.0, 0.0]),
        &t(&[1, 1, 1, 4], vec![1.0, 0.0, 1.0, 0.0]),
        1e-12,
    )
    .unwrap();
    let tv = kernels::total_variation(&t(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0])).unwrap();
    let constant = kernels::total_variation(&Tensor::full(&[2, 1, 5, 7], 0.37)).unwrap();
    let checks = [
        (bce0 - std::f64::consts::LN_2).abs() <= 1e-12,
        (bce1 - 1.313262).abs() <= 1e-6,
        (dice - 0.5).abs() <= 1e-6,
        tv == 0.5,
        constant == 0.0,
    ];
    verdict(
        checks.iter().all(|&c| c),
        format!("bce(0,1)={bce0:.15} bce(1,0)={bce1:.7} dice={dice:.9} tv={tv} tv(const)={constant}"),
    )
}

fn metric_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut bad = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..17), rng.random_range(1..17));
        let density = rng.random_range(0.0..1.0);
        let mut mask = || {
            Tensor::new(
                vec![1, 1, h, w],
                (0..h * w).map(|_| (rng.random::<f64>() < density) as u8 as f64).collect(),
            )
            .unwrap()
        };
        let (pred, truth) = (mask(), mask());
        let c = confusion(&pred, &truth).unwrap();
        let mut brute = ConfusionCounts::default();
        for (&p, &g) in pred.data().iter().zip(truth.data()) {
            match (p == 1.0, g == 1.0) {
                (true, true) => brute.tp += 1,
                (true, false) => brute.fp += 1,
                (false, true) => brute.fn_ += 1,
                (false, false) => brute.tn += 1,
            }
        }
        let (d, j) = (dsc(&c), iou(&c));
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
        if c != brute || j > d {
            bad += 1;
        }
    }
    verdict(
        bad == 0 && worst <= 1e-12,
        format!("1000 mask pairs, {bad} violations, max identity gap {worst:.1e}"),
    )
}

fn tiny_network(dilation: bool, cross: bool) -> NetworkConfig {
    NetworkConfig {
        depth: 3,
        base_channels: 8,
        pcam_paths: 4,
        use_dilation: dilation,
        use_cross_structure: cross,
        use_pcam: true,
        ..NetworkConfig::desk()
    }
}

fn train_config(seed: u64, lambda_tv: f64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: EPOCHS,
        batch_size: 4,
        seed,
        adam: AdamConfig {
            lr: LR,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.loss.weights.lambda_tv = lambda_tv;
    cfg
}

struct Run {
    outcome: TrainOutcome,
    dsc: f64,
    tv: f64,
    wall: Duration,
}

struct Runs {
    train: Vec<SegmentationSample>,
    test: Vec<SegmentationSample>,
    cache: BTreeMap<(bool, bool, u64, u64), Run>,
}

impl Runs {
    fn get(&mut self, dilation: bool, cross: bool, seed: u64, lambda_tv: f64) -> &Run {
        let key = (dilation, cross, seed, lambda_tv.to_bits());
        if !self.cache.contains_key(&key) {
            let start = Instant::now();
            let outcome = train(tiny_network(dilation, cross), &self.train, &self.test, train_config(seed, lambda_tv))
                .expect("training runs");
            let wall = start.elapsed();
            let mut model = outcome.last.model().unwrap();
            let tv = mean_probability_tv(&mut model, &self.test).unwrap();
            let dsc = outcome.evaluations.last().map_or(f64::NAN, |(_, r)| r.mean_dsc());
            eprintln!(
                "  run dilation={dilation} cross={cross} seed={seed} lambda_tv={lambda_tv}: dsc {dsc:.4}, tv {tv:.4}, {}",
                secs(wall)
            );
            self.cache.insert(key, Run { outcome, dsc, tv, wall });
        }
        &self.cache[&key]
    }
}

fn end_to_end(runs: &mut Runs) -> Verdict {
    let (dsc, wall, history, bytes, halted) = {
        let r = runs.get(true, true, 0, 1e-3);
        (
            r.dsc,
            r.wall,
            r.outcome.history.clone(),
            r.outcome.last.to_bytes().unwrap(),
            r.outcome.halted.clone(),
        )
    };
    let again = train(tiny_network(true, true), &runs.train, &runs.test, train_config(0, 1e-3)).unwrap();
    let deterministic = again.history == history && again.last.to_bytes().unwrap() == bytes;
    let mut model = again.last.model().unwrap();
    let train_dsc = pemf_core::trainer::evaluate_model(&mut model, &runs.train, 0, 0.5, false)
        .unwrap()
        .mean_dsc();
    verdict(
        halted.is_none() && dsc >= 0.90 && wall <= Duration::from_secs(900) && deterministic,
        format!(
            "held-out DSC {dsc:.4} after {EPOCHS} epochs (train DSC {train_dsc:.4}), wall {}, rerun identical: {deterministic}",
            secs(wall)
        ),
    )
}

fn tv_effect(runs: &mut Runs) -> Verdict {
    let mut lower = 0;
    let (mut dsc_on, mut dsc_off) = (0.0, 0.0);
    let mut rows = Vec::new();
    for seed in 0..5 {
        let (on_tv, on_dsc) = {
            let r = runs.get(true, true, seed, 1e-3);
            (r.tv, r.dsc)
        };
        let (off_tv, off_dsc) = {
            let r = runs.get(true, true, seed, 0.0);
            (r.tv, r.dsc)
        };
        if on_tv < off_tv {
            lower += 1;
        }
        dsc_on += on_dsc / 5.0;
        dsc_off += off_dsc / 5.0;
        rows.push(format!("s{seed} tv {on_tv:.6}/{off_tv:.6}"));
    }
    let degradation = dsc_off - dsc_on;
    verdict(
        lower >= 4 && degradation < 0.05,
        format!(
            "regularized TV lower in {lower}/5 seeds, mean DSC {dsc_on:.4} vs {dsc_off:.4} (degradation {degradation:+.4}); {}",
            rows.join(", ")
        ),
    )
}

fn ablation(runs: &mut Runs) -> Verdict {
    let mut arms = Vec::new();
    let mut ok = true;
    for (dilation, cross) in [(true, true), (true, false), (false, true), (false, false)] {
        let dsc = runs.get(dilation, cross, 0, 1e-3).dsc;
        ok &= dsc >= 0.80;
        arms.push(format!("dil={} cross={}: {dsc:.4}", dilation as u8, cross as u8));
    }
    let trained = runs.get(false, false, 0, 1e-3).outcome.last.clone();
    let mut identical = true;
    for (use_pcam, params) in [
        (true, trained.params.clone()),
        (false, Model::new(NetworkConfig { use_pcam: false, ..tiny_network(false, false) }, 3).unwrap().params),
    ] {
        let cfg = NetworkConfig { use_pcam, ..tiny_network(false, false) };
        identical &= plain_unetpp_matches(&cfg, &Model::from_params(cfg.clone(), params).unwrap());
    }
    verdict(
        ok && identical,
        format!("{}; cross-off/dilation-off equals plain UNet++: {identical}", arms.join(", ")),
    )
}

fn plain_unetpp_matches(cfg: &NetworkConfig, model: &Model) -> bool {
    let graph = build_graph(cfg).unwrap();
    let images = random_tensor(&mut ChaCha8Rng::seed_from_u64(5), vec![2, 1, 64, 64]);
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape);
    let mut stats = model.params.stats.clone();
    let x = tape.constant(images.clone());
    let nodes = {
        let mut ctx = Ctx {
            tape: &mut tape,
            binding: &binding,
            stats: &mut stats,
            mode: Mode::Train,
        };
        encoder_forward(&mut ctx, cfg, &graph, x).unwrap()
    };
    let mut ref_tape = Tape::new();
    let ref_binding = model.params.bind(&mut ref_tape);
    let mut ref_stats = model.params.stats.clone();
    let rx = ref_tape.constant(images);
    let reference = common::reference_unetpp(&mut ref_tape, &ref_binding, &mut ref_stats, cfg, rx);
    nodes.len() == reference.len()
        && nodes.iter().all(|(id, v)| tape.value(*v) == ref_tape.value(reference[id]))
        && stats == ref_stats
}

fn fold_protocol() -> Verdict {
    let blank = Tensor::zeros(&[1, 1, 2, 2]);
    let samples: Vec<SegmentationSample> = (0..163)
        .map(|i| SegmentationSample {
            id: format!("case{i:03}"),
            image: blank.clone(),
            mask: blank.clone(),
            class: if i % 3 == 2 && i < 159 {
                LesionClass::Malignant
            } else {
                LesionClass::Benign
            },
        })
        .collect();
    let malignant = samples.iter().filter(|s| s.class == LesionClass::Malignant).count();
    if malignant != 53 {
        return verdict(false, format!("fixture has {malignant} malignant samples"));
    }
    let mut ok = true;
    for seed in 0..20 {
        let (split, _) = make_folds(&samples, 5, seed).unwrap();
        let mut sizes = split.sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        ok &= sizes == [33, 33, 33, 32, 32];
        for t in &split.tallies {
            ok &= t.get(&LesionClass::Benign) == Some(&22);
            ok &= matches!(t.get(&LesionClass::Malignant), Some(10 | 11));
        }
    }
    verdict(ok, "163 samples (110/53), 20 shuffle seeds")
}

fn serialization(runs: &mut Runs) -> Verdict {
    let ck = runs.get(true, true, 0, 1e-3).outcome.last.clone();
    let dir = std::env::temp_dir().join(format!("pemf-acceptance-{}", std::process::id()));
    let path = dir.join("model.pemf");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let resaved = loaded.to_bytes().unwrap() == std::fs::read(&path).unwrap();
    let _ = std::fs::remove_dir_all(&dir);
    let (mut before, mut after) = (ck.model().unwrap(), loaded.model().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut same = 0;
    for _ in 0..10 {
        let x = random_tensor(&mut rng, vec![1, 1, 64, 64]);
        if before.predict_logits(&x).unwrap() == after.predict_logits(&x).unwrap() {
            same += 1;
        }
    }
    verdict(
        same == 10 && resaved,
        format!("{same}/10 forwards bit-identical, save-load-save identical: {resaved}"),
    )
}

type Criterion = Box<dyn FnOnce(&mut Runs) -> Verdict>;

fn main() -> ExitCode {
    // libtest flags such as --nocapture or a name filter are accepted and ignored.
    let data = synth_generate(&SynthConfig::default()).expect("synthetic data");
    let (train_set, test_set) = data.split_at(60);
    let mut runs = Runs {
        train: train_set.to_vec(),
        test: test_set.to_vec(),
        cache: BTreeMap::new(),
    };
    let criteria: Vec<(&str, Criterion)> = vec![
        ("gradient soundness", Box::new(|_| gradient_soundness())),
        ("convolution oracle", Box::new(|_| convolution_oracle())),
        ("loss closed forms", Box::new(|_| loss_closed_forms())),
        ("metric identities", Box::new(|_| metric_identities())),
        ("end-to-end synthetic training", Box::new(end_to_end)),
        ("tv regularization effect", Box::new(tv_effect)),
        ("ablation arms", Box::new(ablation)),
        ("fold protocol", Box::new(|_| fold_protocol())),
        ("serialization", Box::new(serialization)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let v = check(&mut runs);
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name}: {} [{}]",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            secs(start.elapsed())
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
