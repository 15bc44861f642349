//! Environment construction (pipeline step 2).
//!
//! From the pretrained encoder's train-set features, each class in turn acts
//! as the anchor: cosine similarities from every other-class sample to the
//! anchor class are averaged (`similarity_stats`), centered per class to
//! strip the class effect (`adjust_similarity`), and the pooled rest ranked
//! and split evenly (`split_environments`). Anchor samples sit in both
//! halves, so C classes yield 2C environments that differ mainly in the
//! hidden nuisance factor.
//!
//! Nothing here reads hidden environment labels except [`env_diagnostics`],
//! which exists to audit the construction after the fact.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape};
use crate::data::{BiasedDataset, Split};
use crate::error::{EqInvError, Result};
use crate::model::{batch_tensor, Model};

/// Row norms may drift this far from 1 before the bank refuses them.
const UNIT_TOL: f64 = 1e-9;

/// Encode chunk size when filling the bank.
const ENCODE_CHUNK: usize = 256;

/// Unit-normalized train-set features, grouped contiguously by class.
pub struct FeatureBank {
    dim: usize,
    rows: Vec<f64>,
    class_ranges: Vec<(usize, usize)>,
    sample_ids: Vec<usize>,
}

impl FeatureBank {
    /// Canonicalize `(sample id, class, feature row)` triples into a bank:
    /// rows are sorted by (class, sample id), so any presentation order of
    /// the same triples builds the same bank.
    pub fn from_rows(mut entries: Vec<(usize, usize, Vec<f64>)>) -> Result<FeatureBank> {
        if entries.is_empty() {
            return Err(EqInvError::Data("bank needs at least one row".into()));
        }
        let dim = entries[0].2.len();
        if dim == 0 || entries.iter().any(|(_, _, r)| r.len() != dim) {
            return Err(EqInvError::Shape("bank rows must share one nonzero dimension".into()));
        }
        entries.sort_by_key(|(id, class, _)| (*class, *id));

        let num_classes = entries.last().unwrap().1 + 1;
        let mut class_ranges = Vec::with_capacity(num_classes);
        let mut rows = Vec::with_capacity(entries.len() * dim);
        let mut sample_ids = Vec::with_capacity(entries.len());
        let mut cursor = 0usize;
        for class in 0..num_classes {
            let start = cursor;
            while cursor < entries.len() && entries[cursor].1 == class {
                cursor += 1;
            }
            if cursor == start {
                return Err(EqInvError::Data(format!("class {class} has no rows")));
            }
            class_ranges.push((start, cursor));
        }
        for (id, _, row) in entries {
            let norm = kernels::dot(&row, &row).sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(EqInvError::Contract(format!(
                    "bank row for sample {id} has norm {norm}, expected 1"
                )));
            }
            sample_ids.push(id);
            rows.extend_from_slice(&row);
        }
        Ok(FeatureBank { dim, rows, class_ranges, sample_ids })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_ranges.len()
    }

    /// Flat row-major feature storage.
    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.rows[index * self.dim..(index + 1) * self.dim]
    }

    /// Bank-row range `[a, b)` holding the class's samples.
    pub fn class_range(&self, class: usize) -> Result<(usize, usize)> {
        self.class_ranges
            .get(class)
            .copied()
            .ok_or_else(|| EqInvError::Shape(format!("class {class} out of range")))
    }

    /// Dataset sample id behind each bank row.
    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    /// Bank rows outside the anchor class, ascending, with the pool-local
    /// contiguous range of each remaining class.
    pub fn other_pool(&self, anchor: usize) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
        let (a, b) = self.class_range(anchor)?;
        let mut pool = Vec::with_capacity(self.len() - (b - a));
        let mut ranges = Vec::with_capacity(self.class_ranges.len() - 1);
        for (class, &(lo, hi)) in self.class_ranges.iter().enumerate() {
            if class == anchor {
                continue;
            }
            let start = pool.len();
            pool.extend(lo..hi);
            ranges.push((start, pool.len()));
        }
        Ok((pool, ranges))
    }
}

/// Encode the train split with the given model and bank the unit-normalized
/// features class by class.
pub fn build_feature_bank(model: &Model, dataset: &BiasedDataset) -> Result<FeatureBank> {
    let mut labeled: Vec<(usize, usize)> = Vec::new();
    for class in 0..dataset.num_classes {
        let ids = dataset.class_indices(Split::Train, class);
        if ids.is_empty() {
            return Err(EqInvError::Data(format!("class {class} has no train samples")));
        }
        labeled.extend(ids.into_iter().map(|id| (id, class)));
    }

    let mut entries = Vec::with_capacity(labeled.len());
    for chunk in labeled.chunks(ENCODE_CHUNK) {
        let images: Vec<&[f32]> = chunk.iter().map(|(id, _)| dataset.image(*id)).collect();
        let x = batch_tensor(&images)?;
        let tape = Tape::new();
        let f = model.encode(&tape, &x)?;
        let z = tape.l2_normalize_rows(&f)?;
        let dim = z.cols();
        let data = z.data_vec();
        for (k, (id, class)) in chunk.iter().enumerate() {
            entries.push((*id, *class, data[k * dim..(k + 1) * dim].to_vec()));
        }
    }
    FeatureBank::from_rows(entries)
}

/// Bank of l2-normalized raw pixels instead of encoder features. With the
/// default palette every color sees the same pixel-similarity profile to a
/// uniform color mix, so this featurization is color-neutral by construction
/// and serves as the reference point for environment diagnostics: any color
/// gap it reports on unbiased data is noise, not signal.
pub fn pixel_feature_bank(dataset: &BiasedDataset) -> Result<FeatureBank> {
    let mut entries = Vec::new();
    for id in dataset.indices_of(Split::Train) {
        let mut row: Vec<f64> = dataset.image(id).iter().map(|v| f64::from(*v)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(EqInvError::Data(format!("train image {id} is all black")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
        entries.push((id, dataset.label(id), row));
    }
    FeatureBank::from_rows(entries)
}

/// Mean cosine similarity from each other-class sample to the anchor class:
/// `s_plus[j]` averages `dot(anchor_row_i, other_row_j)` over the anchor
/// rows i, in pool order. The average of dot products equals the dot product
/// with the averaged anchor row, so one pass over the pool suffices.
pub fn similarity_stats(bank: &FeatureBank, anchor: usize) -> Result<Vec<f64>> {
    let (a, b) = bank.class_range(anchor)?;
    let (pool, _) = bank.other_pool(anchor)?;
    let l = (b - a) as f64;
    let mut mean_row = vec![0.0; bank.dim()];
    for i in a..b {
        for (m, v) in mean_row.iter_mut().zip(bank.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean_row {
        *m /= l;
    }
    Ok(pool.iter().map(|&j| kernels::dot(&mean_row, bank.row(j))).collect())
}

/// Subtract each class's mean similarity from its samples, leaving only the
/// within-class ordering ("environment effect"). `ranges` are the pool-local
/// class ranges from [`FeatureBank::other_pool`] and must partition the
/// vector.
pub fn adjust_similarity(s_plus: &[f64], ranges: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut cursor = 0usize;
    for &(lo, hi) in ranges {
        if lo != cursor || hi <= lo {
            return Err(EqInvError::Contract("class ranges must partition the pool".into()));
        }
        cursor = hi;
    }
    if cursor != s_plus.len() {
        return Err(EqInvError::Contract("class ranges must partition the pool".into()));
    }
    let mut adjusted = s_plus.to_vec();
    for &(lo, hi) in ranges {
        let mean = s_plus[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        for v in &mut adjusted[lo..hi] {
            *v -= mean;
        }
    }
    Ok(adjusted)
}

/// One anchor class's two environments, as sorted dataset sample ids.
/// `env1` and `env2` each contain every anchor sample plus disjoint halves
/// of the other-class pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentSplit {
    pub anchor_class: usize,
    pub anchor: Vec<usize>,
    pub env1: Vec<usize>,
    pub env2: Vec<usize>,
}

impl EnvironmentSplit {
    /// Non-anchor members of the requested environment (1 or 2).
    pub fn pool_members(&self, env: usize) -> Vec<usize> {
        let set = if env == 1 { &self.env1 } else { &self.env2 };
        set.iter().copied().filter(|id| self.anchor.binary_search(id).is_err()).collect()
    }

    /// Check the defining set relations against the full id universe.
    pub fn validate(&self, all_ids: &[usize]) -> Result<()> {
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !(sorted(&self.anchor) && sorted(&self.env1) && sorted(&self.env2)) {
            return Err(EqInvError::Contract("environment id lists must be strictly ascending".into()));
        }
        let inter: Vec<usize> =
            self.env1.iter().copied().filter(|id| self.env2.binary_search(id).is_ok()).collect();
        if inter != self.anchor {
            return Err(EqInvError::Contract(
                "environments must overlap in exactly the anchor samples".into(),
            ));
        }
        let n1 = self.env1.len() - self.anchor.len();
        let n2 = self.env2.len() - self.anchor.len();
        if n1 < n2 || n1 - n2 > 1 {
            return Err(EqInvError::Contract(format!(
                "uneven environment sizes: {n1} vs {n2} non-anchor members"
            )));
        }
        let mut union: Vec<usize> = self.env1.iter().chain(&self.env2).copied().collect();
        union.sort_unstable();
        union.dedup();
        if union != all_ids {
            return Err(EqInvError::Contract("environments must cover every sample".into()));
        }
        Ok(())
    }
}

/// Rank the pooled other-class samples by similarity, descending, ties and
/// order broken by ascending pool position; the top half (rounded up) joins
/// Env#1, the rest Env#2, and every anchor sample joins both.
pub fn split_environments(bank: &FeatureBank, anchor: usize, s: &[f64]) -> Result<EnvironmentSplit> {
    let (a, b) = bank.class_range(anchor)?;
    let (pool, _) = bank.other_pool(anchor)?;
    if s.len() != pool.len() {
        return Err(EqInvError::Shape(format!(
            "similarity length {} does not match pool size {}",
            s.len(),
            pool.len()
        )));
    }
    if pool.len() < 2 {
        return Err(EqInvError::Contract("need at least 2 other-class samples to split".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(EqInvError::Numeric("similarities must be finite".into()));
    }

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&p, &q| s[q].partial_cmp(&s[p]).unwrap().then(p.cmp(&q)));
    let top = pool.len().div_ceil(2);

    let anchor_ids: Vec<usize> = (a..b).map(|r| bank.sample_ids[r]).collect();
    let to_ids = |positions: &[usize]| -> Vec<usize> {
        let mut ids: Vec<usize> =
            positions.iter().map(|&p| bank.sample_ids[pool[p]]).collect();
        ids.extend_from_slice(&anchor_ids);
        ids.sort_unstable();
        ids
    };
    let mut split = EnvironmentSplit {
        anchor_class: anchor,
        anchor: anchor_ids.clone(),
        env1: to_ids(&order[..top]),
        env2: to_ids(&order[top..]),
    };
    split.anchor.sort_unstable();
    Ok(split)
}

/// All C anchor splits; `adjust` false ranks the raw class-to-anchor
/// similarities instead of the class-centered ones.
pub fn build_environments(bank: &FeatureBank, adjust: bool) -> Result<Vec<EnvironmentSplit>> {
    (0..bank.num_classes())
        .map(|anchor| {
            let s_plus = similarity_stats(bank, anchor)?;
            let s = if adjust {
                let (_, ranges) = bank.other_pool(anchor)?;
                adjust_similarity(&s_plus, &ranges)?
            } else {
                s_plus
            };
            split_environments(bank, anchor, &s)
        })
        .collect()
}

/// On-disk form of the full environment construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvFile {
    pub version: u32,
    pub num_classes: usize,
    pub adjusted: bool,
    pub splits: Vec<EnvironmentSplit>,
}

pub const ENV_FILE_VERSION: u32 = 1;

pub fn save_environments(file: &EnvFile, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(file)
        .map_err(|e| EqInvError::Format(format!("environment encode failed: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Load and re-validate: every split must still satisfy the set relations
/// over the union of ids it claims.
pub fn load_environments(path: &Path) -> Result<EnvFile> {
    let text = std::fs::read_to_string(path)?;
    let file: EnvFile = serde_json::from_str(&text)
        .map_err(|e| EqInvError::Format(format!("environment file does not parse: {e}")))?;
    if file.version != ENV_FILE_VERSION {
        return Err(EqInvError::Format(format!(
            "unsupported environment file version {}",
            file.version
        )));
    }
    if file.splits.len() != file.num_classes {
        return Err(EqInvError::Format("one split per class required".into()));
    }
    for split in &file.splits {
        let mut all: Vec<usize> = split.env1.iter().chain(&split.env2).copied().collect();
        all.sort_unstable();
        all.dedup();
        split.validate(&all).map_err(|e| EqInvError::Format(e.to_string()))?;
    }
    Ok(file)
}

/// Composition of one split's environments, measured against ground truth.
/// Proportions are over non-anchor members; `class_proportions[e][c]` and
/// `color_proportions[e][z]` index environment e in {0 => Env#1, 1 => Env#2}.
#[derive(Debug, Clone)]
pub struct EnvDiagnostics {
    pub anchor_class: usize,
    pub class_proportions: [Vec<f64>; 2],
    pub color_proportions: [Vec<f64>; 2],
    /// Per color z: the fraction of the pool's z-colored samples that landed
    /// in Env#1 (0.5 when the pool has no such samples, i.e. no signal).
    pub color_env1_share: Vec<f64>,
    /// |share(Env#1) - share(Env#2)| for the anchor's own color: 1 when the
    /// split routes every anchor-colored sample to one side, 0 when they
    /// land evenly. This is the bias signal the construction is after; under
    /// heavy bias anchor-colored samples are rare in the pool, so their
    /// within-environment proportions are tiny either way and only the way
    /// the group itself splits carries information.
    pub anchor_color_gap: f64,
}

/// Audit a split against the dataset's hidden color labels. This is the one
/// deliberate consumer of `hidden_env_label` in the pipeline.
pub fn env_diagnostics(split: &EnvironmentSplit, dataset: &BiasedDataset) -> Result<EnvDiagnostics> {
    let c = dataset.num_classes;
    let mut class_proportions = [vec![0.0; c], vec![0.0; c]];
    let mut color_proportions = [vec![0.0; c], vec![0.0; c]];
    let mut color_counts = [vec![0usize; c], vec![0usize; c]];
    for (slot, env) in [1usize, 2].into_iter().enumerate() {
        let members = split.pool_members(env);
        if members.is_empty() {
            return Err(EqInvError::Data(format!("environment {env} has no non-anchor members")));
        }
        let w = 1.0 / members.len() as f64;
        for id in members {
            class_proportions[slot][dataset.label(id)] += w;
            let z = dataset.hidden_env_label(id);
            color_proportions[slot][z] += w;
            color_counts[slot][z] += 1;
        }
    }
    let color_env1_share: Vec<f64> = (0..c)
        .map(|z| {
            let total = color_counts[0][z] + color_counts[1][z];
            if total == 0 {
                0.5
            } else {
                color_counts[0][z] as f64 / total as f64
            }
        })
        .collect();
    let share = color_env1_share[split.anchor_class];
    Ok(EnvDiagnostics {
        anchor_class: split.anchor_class,
        class_proportions,
        color_proportions,
        color_env1_share,
        anchor_color_gap: (2.0 * share - 1.0).abs(),
    })
}

/// Across-anchor aggregates used by the construction quality checks.
#[derive(Debug, Clone, Copy)]
pub struct DiagnosticsSummary {
    /// Mean anchor-color gap over anchors.
    pub color_gap_mean: f64,
    /// Mean over anchors of the worst per-class deviation from the uniform
    /// share 1/(C-1), taken over both environments and all non-anchor classes.
    pub class_deviation_max_mean: f64,
    /// Mean deviation over anchors, environments, and non-anchor classes.
    pub class_deviation_mean: f64,
}

pub fn summarize_diagnostics(diags: &[EnvDiagnostics], num_classes: usize) -> Result<DiagnosticsSummary> {
    if diags.is_empty() || num_classes < 2 {
        return Err(EqInvError::Contract("need diagnostics for at least one anchor".into()));
    }
    let uniform = 1.0 / (num_classes - 1) as f64;
    let mut gap_sum = 0.0;
    let mut max_sum = 0.0;
    let mut dev_sum = 0.0;
    for d in diags {
        gap_sum += d.anchor_color_gap;
        let mut worst: f64 = 0.0;
        let mut total = 0.0;
        let mut count = 0usize;
        for env in 0..2 {
            for (class, p) in d.class_proportions[env].iter().enumerate() {
                if class == d.anchor_class {
                    continue;
                }
                let dev = (p - uniform).abs();
                worst = worst.max(dev);
                total += dev;
                count += 1;
            }
        }
        max_sum += worst;
        dev_sum += total / count as f64;
    }
    let n = diags.len() as f64;
    Ok(DiagnosticsSummary {
        color_gap_mean: gap_sum / n,
        class_deviation_max_mean: max_sum / n,
        class_deviation_mean: dev_sum / n,
    })
}

/// Diagnostics CSV: `anchor,env,class_or_color,proportion`, with one final
/// `env 0` row per anchor carrying the anchor-color gap.
pub fn write_diagnostics_csv(diags: &[EnvDiagnostics], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "anchor,env,class_or_color,proportion")?;
    for d in diags {
        for env in 0..2 {
            for (class, p) in d.class_proportions[env].iter().enumerate() {
                writeln!(w, "{},{},class_{class},{p}", d.anchor_class, env + 1)?;
            }
            for (color, p) in d.color_proportions[env].iter().enumerate() {
                writeln!(w, "{},{},color_{color},{p}", d.anchor_class, env + 1)?;
            }
        }
        writeln!(w, "{},0,anchor_color_gap,{}", d.anchor_class, d.anchor_color_gap)?;
    }
    w.flush()?;
    Ok(())
}
