use std::time::Instant;

use eqinv::data::{self, BiasedDatasetSpec};
use eqinv::envs;
use eqinv::ssl::{self, PretrainConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(15);
    let mut spec = BiasedDatasetSpec::desk_default(seed);
    if let Some(rho) = std::env::args().nth(3).and_then(|s| s.parse().ok()) {
        spec.bias_ratio = rho;
    }

    let t0 = Instant::now();
    let dataset = data::generate(&spec).unwrap();
    println!("gen: {:?}", t0.elapsed());

    let t1 = Instant::now();
    let config = PretrainConfig { epochs, ..PretrainConfig::desk_default(seed) };
    let out = ssl::pretrain(&dataset, &config).unwrap();
    let first = out.curve.first().unwrap().loss;
    let last = out.curve.last().unwrap().loss;
    println!(
        "pretrain {} epochs: {:?}  loss {:.4} -> {:.4} (ln(255)={:.4})",
        epochs,
        t1.elapsed(),
        first,
        last,
        255f64.ln()
    );

    let t2 = Instant::now();
    let bank = envs::build_feature_bank(&out.model, &dataset).unwrap();
    let (min_dist, collisions) = ssl::sample_equivariance_score(&bank).unwrap();
    println!("bank: {:?}  min_dist={min_dist:.6e} collisions={collisions}", t2.elapsed());

    for adjust in [true, false] {
        let t3 = Instant::now();
        let splits = envs::build_environments(&bank, adjust).unwrap();
        let diags: Vec<_> =
            splits.iter().map(|s| envs::env_diagnostics(s, &dataset).unwrap()).collect();
        let summary = envs::summarize_diagnostics(&diags, dataset.num_classes).unwrap();
        println!(
            "envs adjust={adjust}: {:?}  gap_mean={:.4} max_dev_mean={:.4} dev_mean={:.4}",
            t3.elapsed(),
            summary.color_gap_mean,
            summary.class_deviation_max_mean,
            summary.class_deviation_mean
        );
    }
    println!("env label reads (diagnostics only): {}", dataset.env_label_reads());
    println!("total: {:?}", t0.elapsed());
}
