use std::collections::BTreeSet;
use std::path::Path;

use pemf_core::checkpoint::Checkpoint;
use pemf_core::data::{
    load_dataset, make_folds, preprocess, read_gray_png, read_manifest, synth_generate, write_flat,
    write_gray_png, write_manifest, Layout, SynthConfig,
};
use pemf_core::gradcheck::{self, Options, Scope};
use pemf_core::metrics::write_report;
use pemf_core::trainer::{evaluate_model, predict_image_mask, train_with, write_history};
use pemf_core::{Error, NetworkConfig, SegmentationSample};

use crate::config::{self, LoadError, RunConfig};
use crate::{EvalArgs, FoldsArgs, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;
pub const GRADCHECK: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Invalid(_) | Error::Checkpoint(_) => CONFIG,
            Error::Data { .. } | Error::Io { .. } => DATA,
            Error::NonFinite { .. } | Error::Diverged(_) => NUMERIC,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::new(CONFIG, format!("cannot load checkpoint: {e}")))
}

fn parse_layout(s: &str) -> Result<Layout, Failure> {
    s.parse().map_err(Failure::from)
}

/// Resizes every sample to `target`, or to the common extent when no
/// target is given.
fn prepare(
    samples: &[SegmentationSample],
    target: Option<(usize, usize)>,
    network: &NetworkConfig,
) -> Result<Vec<SegmentationSample>, Failure> {
    let target = match target {
        Some(t) => t,
        None => {
            let extents: BTreeSet<(usize, usize)> = samples.iter().map(|s| s.extent()).collect();
            if extents.len() > 1 {
                return Err(Failure::new(
                    DATA,
                    format!("images have {} different sizes; set data.input_size", extents.len()),
                ));
            }
            samples[0].extent()
        }
    };
    network
        .check_input(target.0, target.1)
        .map_err(|e| Failure::new(CONFIG, format!("input size {}x{}: {e}", target.0, target.1)))?;
    samples
        .iter()
        .map(|s| preprocess(s, target).map_err(Failure::from))
        .collect()
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<SegmentationSample>, Failure> {
    if cfg.data.source == "synth" {
        Ok(synth_generate(&cfg.synth_config())?)
    } else {
        let layout = parse_layout(&cfg.data.layout)?;
        Ok(load_dataset(Path::new(&cfg.data.source), layout)?)
    }
}

type Split = (Vec<SegmentationSample>, Vec<SegmentationSample>);

fn split(cfg: &RunConfig, samples: Vec<SegmentationSample>) -> Result<Split, Failure> {
    if let (Some(manifest), Some(fold)) = (&cfg.data.manifest, cfg.data.fold) {
        let rows = read_manifest(manifest)?;
        let mut held = BTreeSet::new();
        let mut listed = BTreeSet::new();
        for r in &rows {
            listed.insert(r.id.as_str());
            if r.fold == fold {
                held.insert(r.id.as_str());
            }
        }
        if held.is_empty() {
            return Err(Failure::new(DATA, format!("fold {fold} is empty in {}", manifest.display())));
        }
        let (test, train): (Vec<_>, Vec<_>) = samples
            .into_iter()
            .filter(|s| listed.contains(s.id.as_str()))
            .partition(|s| held.contains(s.id.as_str()));
        if train.is_empty() {
            return Err(Failure::new(DATA, "no training samples outside the held-out fold"));
        }
        Ok((train, test))
    } else {
        let n_test = (samples.len() as f64 * cfg.data.test_fraction).round() as usize;
        if n_test >= samples.len() {
            return Err(Failure::new(DATA, "test_fraction leaves no training samples"));
        }
        let mut train = samples;
        let test = train.split_off(train.len() - n_test);
        Ok((train, test))
    }
}

fn with_overrides(args: &TrainArgs) -> Vec<String> {
    let mut sets = Vec::new();
    if let Some(d) = &args.data {
        sets.push(format!("data.source={}", serde_json::Value::String(d.clone())));
    }
    if let Some(e) = args.epochs {
        sets.push(format!("train.epochs={e}"));
    }
    if let Some(s) = args.seed {
        sets.push(format!("train.seed={s}"));
    }
    if let Some(o) = &args.out {
        sets.push(format!("output_dir={}", serde_json::Value::String(o.display().to_string())));
    }
    sets.extend(args.set.iter().cloned());
    sets
}

pub fn train(args: TrainArgs) -> Outcome {
    let cfg = match config::load(args.config.as_deref(), &with_overrides(&args)) {
        Ok(c) => c,
        Err(LoadError::Io(msg)) => return Err(Failure::new(CONFIG, msg)),
        Err(LoadError::Invalid(errors)) => {
            let list: Vec<String> = errors.iter().map(|e| format!("  - {e}")).collect();
            return Err(Failure::new(
                CONFIG,
                format!("{} configuration problem(s):\n{}", errors.len(), list.join("\n")),
            ));
        }
    };
    let samples = load_samples(&cfg)?;
    let target = cfg.data.input_size.map(|[h, w]| (h, w));
    let samples = prepare(&samples, target, &cfg.network)?;
    let (train_set, test_set) = split(&cfg, samples)?;
    eprintln!(
        "training on {} samples, holding out {}, {} epochs",
        train_set.len(),
        test_set.len(),
        cfg.train.epochs
    );

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Failure::new(DATA, format!("{}: {e}", out.display())))?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    std::fs::write(out.join("config.json"), resolved + "\n")
        .map_err(|e| Failure::new(DATA, format!("{}: {e}", out.display())))?;

    let outcome = train_with(cfg.network.clone(), &train_set, &test_set, cfg.train_config(), |r| {
        let eval = r.eval_dsc.map(|d| format!(" held-out dsc {d:.4}")).unwrap_or_default();
        eprintln!("epoch {:>4} loss {:.6} (bce {:.6} tv {:.6} dice {:.6}){eval}", r.epoch, r.loss, r.bce, r.tv, r.dice);
    })?;

    outcome.last.save(&out.join("checkpoint.pemf"))?;
    write_history(&out.join("history.csv"), &outcome.history)?;
    for (epoch, report) in &outcome.evaluations {
        write_report(&out.join(format!("eval_epoch_{epoch:04}.csv")), report)?;
    }
    if let Some((epoch, best)) = &outcome.best {
        best.save(&out.join("best.pemf"))?;
        eprintln!("best held-out dsc at epoch {epoch}");
    }
    if let Some(why) = outcome.halted {
        return Err(Failure::new(
            NUMERIC,
            format!("training halted at {why}; last good state saved to {}", out.join("checkpoint.pemf").display()),
        ));
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

pub fn predict(args: PredictArgs) -> Outcome {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(Failure::new(CONFIG, format!("threshold {} not in (0, 1)", args.threshold)));
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    let image = read_gray_png(&args.input)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut model = ck.model()?;
    let mask = predict_image_mask(&mut model, ck.meta.input_size, &image, args.threshold)?;
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::new(DATA, format!("{}: {e}", parent.display())))?;
    }
    write_gray_png(&args.output, &mask)?;
    let lesion = mask.data().iter().filter(|&&v| v > 0.5).count();
    eprintln!("wrote {} ({h}x{w}, {lesion} lesion pixels)", args.output.display());
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Outcome {
    let scope: Scope = args.scope.parse().map_err(|e: Error| Failure::new(CONFIG, e.to_string()))?;
    let opts = Options {
        seed: args.seed,
        perturb: args.perturb,
    };
    let results = gradcheck::run(scope, &opts)?;
    let mut failed = Vec::new();
    for r in &results {
        println!("{r}");
        if !r.passed() {
            failed.push(format!("{} (worst at {}[{}])", r.name, r.worst.0, r.worst.1));
        }
    }
    if failed.is_empty() {
        println!("all {} cases within tolerance {:e}", results.len(), gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(Failure::new(GRADCHECK, format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn synth(args: SynthArgs) -> Outcome {
    let samples = synth_generate(&SynthConfig {
        count: args.count,
        size: args.size,
        seed: args.seed,
        noise_level: args.noise,
    })?;
    write_flat(&args.out, &samples)?;
    eprintln!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

pub fn folds(args: FoldsArgs) -> Outcome {
    if args.k < 2 {
        return Err(Failure::new(CONFIG, format!("--k must be at least 2, got {}", args.k)));
    }
    let layout = parse_layout(&args.layout)?;
    let samples = load_dataset(&args.data, layout)?;
    let (split, warnings) = make_folds(&samples, args.k, args.seed)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    write_manifest(&args.out, &split, &samples)?;
    for (i, t) in split.tallies.iter().enumerate() {
        let classes: Vec<String> = t.iter().map(|(c, n)| format!("{c} {n}")).collect();
        println!("fold {i}: {} samples ({})", split.folds[i].len(), classes.join(", "));
    }
    Ok(())
}

pub fn eval(args: EvalArgs) -> Outcome {
    let ck = load_checkpoint(&args.checkpoint)?;
    let layout = parse_layout(&args.layout)?;
    let mut samples = load_dataset(&args.data, layout)?;
    let fold = match (&args.manifest, args.fold) {
        (Some(manifest), Some(fold)) => {
            let ids: BTreeSet<String> = read_manifest(manifest)?
                .into_iter()
                .filter(|r| r.fold == fold)
                .map(|r| r.id)
                .collect();
            samples.retain(|s| ids.contains(&s.id));
            if samples.is_empty() {
                return Err(Failure::new(DATA, format!("no samples of {} are in fold {fold}", args.data.display())));
            }
            fold
        }
        _ => 0,
    };
    let samples = prepare(&samples, Some(ck.meta.input_size), &ck.meta.network)?;
    let mut model = ck.model()?;
    let report = evaluate_model(&mut model, &samples, fold, args.threshold, args.include_normal)?;
    write_report(&args.out, &report)?;
    println!("{} images, mean dsc {:.4}", samples.len(), report.mean_dsc());
    Ok(())
}
