use eqinv::data::{self, BiasedDatasetSpec, Split};
use eqinv::envs::{self, FeatureBank};
use eqinv::ssl::{self, PretrainConfig};

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

fn report(tag: &str, bank: &FeatureBank, dataset: &data::BiasedDataset) {
    let splits = envs::build_environments(bank, true).unwrap();
    let mut anchor_gaps = Vec::new();
    let mut other_gaps = Vec::new();
    for split in &splits {
        let d = envs::env_diagnostics(split, dataset).unwrap();
        for (z, share) in d.color_env1_share.iter().enumerate() {
            let gap = (2.0 * share - 1.0).abs();
            if z == split.anchor_class {
                anchor_gaps.push(gap);
            } else {
                other_gaps.push(gap);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "{tag}: anchor-color gap mean={:.4}  other-color gap mean={:.4}  contrast={:.4}",
        mean(&anchor_gaps),
        mean(&other_gaps),
        mean(&anchor_gaps) - mean(&other_gaps)
    );
}

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(15);
    let rho: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let mut spec = BiasedDatasetSpec::desk_default(seed);
    spec.bias_ratio = rho;
    let dataset = data::generate(&spec).unwrap();

    let raw_rows: Vec<(usize, usize, Vec<f64>)> = dataset
        .indices_of(Split::Train)
        .into_iter()
        .map(|id| {
            let mut row: Vec<f64> = dataset.image(id).iter().map(|v| f64::from(*v)).collect();
            normalize(&mut row);
            (id, dataset.label(id), row)
        })
        .collect();
    let raw_bank = FeatureBank::from_rows(raw_rows).unwrap();
    report("raw-pixels", &raw_bank, &dataset);

    if epochs == 0 {
        let config =
            eqinv::model::ModelConfig::desk_default(dataset.pixels(), dataset.num_classes);
        let model = eqinv::model::Model::init(config, seed).unwrap();
        let bank = envs::build_feature_bank(&model, &dataset).unwrap();
        report("random-init", &bank, &dataset);
    } else {
        let config = PretrainConfig { epochs, ..PretrainConfig::desk_default(seed) };
        let out = ssl::pretrain(&dataset, &config).unwrap();
        let bank = envs::build_feature_bank(&out.model, &dataset).unwrap();
        report("trained", &bank, &dataset);
    }
}
