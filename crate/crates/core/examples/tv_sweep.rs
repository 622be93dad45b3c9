//! Held-out probability-map TV and DSC on the synthetic task for several
//! TV weights and seeds.
//!
//!     cargo run --release -p pemf-core --example tv_sweep -- 15 0,1,2 0,0.001,0.1,1

use pemf_core::data::{synth_generate, SynthConfig};
use pemf_core::trainer::{mean_probability_tv, train, AdamConfig};
use pemf_core::{NetworkConfig, TrainConfig};

fn list<T: std::str::FromStr>(arg: Option<String>, default: &str) -> Vec<T> {
    arg.as_deref()
        .unwrap_or(default)
        .split(',')
        .map(|s| s.parse().ok().expect("bad list entry"))
        .collect()
}

fn main() {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(15, |s| s.parse().expect("epochs"));
    let seeds: Vec<u64> = list(args.next(), "0,1,2");
    let weights: Vec<f64> = list(args.next(), "0,0.001,0.1,1");

    let data = synth_generate(&SynthConfig::default()).unwrap();
    let (train_set, test_set) = data.split_at(60);
    let network = NetworkConfig {
        depth: 3,
        base_channels: 8,
        pcam_paths: 4,
        ..NetworkConfig::desk()
    };
    println!("seed,lambda_tv,held_out_tv,held_out_dsc");
    for &seed in &seeds {
        for &lambda in &weights {
            let mut cfg = TrainConfig {
                epochs,
                batch_size: 4,
                seed,
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            };
            cfg.loss.weights.lambda_tv = lambda;
            let out = train(network.clone(), train_set, test_set, cfg).unwrap();
            let mut model = out.last.model().unwrap();
            let tv = mean_probability_tv(&mut model, test_set).unwrap();
            let dsc = out.evaluations.last().map_or(f64::NAN, |(_, r)| r.mean_dsc());
            println!("{seed},{lambda},{tv:.8},{dsc:.6}");
        }
    }
}
