//! Synthetic biased "colored shapes" datasets.
//!
//! Every sample is a grayscale class glyph tinted with one environment
//! color. In the train and val splits a sample's color matches its class
//! with probability `bias_ratio`, so color is a spurious shortcut; the
//! bias-conflicting test split breaks the correlation on purpose. The color
//! index is stored as a hidden environment label, readable only through a
//! counted accessor so tests can prove training never looked at it.
//!
//! Color counts per class are assigned by exact quota, not by independent
//! coin flips: the aligned count is `round(bias_ratio * n)` and every
//! conflicting color appears as close to equally often as integer division
//! allows. That keeps empirical bias within 1/n of the requested ratio and
//! makes the unbiased setting exactly uniform.

mod augment;
mod glyph;
mod io;
pub mod palette;

use std::sync::atomic::{AtomicU64, Ordering};

pub use augment::augment;
pub use io::{file_hash, inspect, load, save, DatasetHeader};

use crate::error::{EqInvError, Result};
use crate::rng;
use glyph::GlyphPrototype;

/// Everything needed to generate a dataset deterministically.
#[derive(Debug, Clone)]
pub struct BiasedDatasetSpec {
    pub num_classes: usize,
    /// Train samples per class; val and test sizes derive from this.
    pub samples_per_class: usize,
    /// Images are square RGB with this side length.
    pub image_side: usize,
    /// Probability that a train/val sample's color matches its class.
    pub bias_ratio: f64,
    /// One color per class; color i is class i's aligned environment.
    pub env_palette: Vec<[f64; 3]>,
    pub seed: u64,
    /// Fraction of test samples placed in the bias-conflicting split.
    pub test_conflict_fraction: f64,
}

impl BiasedDatasetSpec {
    /// Spec with the default palette for the class count and a half
    /// conflicting test split.
    pub fn sized(
        num_classes: usize,
        samples_per_class: usize,
        image_side: usize,
        bias_ratio: f64,
        seed: u64,
    ) -> BiasedDatasetSpec {
        BiasedDatasetSpec {
            num_classes,
            samples_per_class,
            image_side,
            bias_ratio,
            env_palette: palette::default_palette(num_classes),
            seed,
            test_conflict_fraction: 0.5,
        }
    }

    /// Desk-scale default: 10 classes, 200 train samples each, 95% bias,
    /// 32x32 images. The whole pipeline runs in minutes at this size.
    pub fn desk_default(seed: u64) -> BiasedDatasetSpec {
        BiasedDatasetSpec::sized(10, 200, 32, 0.95, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 {
            return Err(EqInvError::Config("num_classes must be at least 2".into()));
        }
        if self.samples_per_class == 0 {
            return Err(EqInvError::Config("samples_per_class must be positive".into()));
        }
        if self.image_side < 4 {
            return Err(EqInvError::Config("image_side must be at least 4".into()));
        }
        let unbiased = 1.0 / c as f64;
        if !(self.bias_ratio.is_finite() && self.bias_ratio <= 1.0)
            || self.bias_ratio < unbiased - 1e-12
        {
            return Err(EqInvError::Config(format!(
                "bias_ratio must lie in [1/{c}, 1], got {}",
                self.bias_ratio
            )));
        }
        if self.env_palette.len() != c {
            return Err(EqInvError::Config(format!(
                "palette has {} colors for {c} classes",
                self.env_palette.len()
            )));
        }
        for color in &self.env_palette {
            if color.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(EqInvError::Config(format!("palette color {color:?} outside [0,1]")));
            }
        }
        let min_dist = palette::min_pairwise_distance(&self.env_palette);
        if min_dist < 0.3 {
            return Err(EqInvError::Config(format!(
                "palette colors too close (min distance {min_dist:.3}, need 0.3)"
            )));
        }
        if !(0.0..=1.0).contains(&self.test_conflict_fraction) {
            return Err(EqInvError::Config("test_conflict_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Dataset splits. Train and val share the bias ratio; the two test splits
/// are deterministic interventions (color forced to match or mismatch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    TestAligned,
    TestConflicting,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestAligned, Split::TestConflicting];

    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::TestAligned => 2,
            Split::TestConflicting => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Split> {
        Ok(match tag {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::TestAligned,
            3 => Split::TestConflicting,
            other => return Err(EqInvError::Format(format!("unknown split tag {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestAligned => "test_aligned",
            Split::TestConflicting => "test_conflicting",
        }
    }
}

/// Generated dataset. Images are `[N × 3 × side × side]` channel-major f32
/// in [0, 1]; environment labels are private and read-counted.
pub struct BiasedDataset {
    pub num_classes: usize,
    pub image_side: usize,
    pub bias_ratio: f64,
    pub seed: u64,
    images: Vec<f32>,
    labels: Vec<usize>,
    env: Vec<usize>,
    splits: Vec<Split>,
    env_reads: AtomicU64,
}

impl BiasedDataset {
    pub(crate) fn from_parts(
        num_classes: usize,
        image_side: usize,
        bias_ratio: f64,
        seed: u64,
        images: Vec<f32>,
        labels: Vec<usize>,
        env: Vec<usize>,
        splits: Vec<Split>,
    ) -> Result<BiasedDataset> {
        let n = labels.len();
        if env.len() != n || splits.len() != n || images.len() != n * 3 * image_side * image_side {
            return Err(EqInvError::Data("dataset arrays disagree on sample count".into()));
        }
        if labels.iter().chain(env.iter()).any(|v| *v >= num_classes) {
            return Err(EqInvError::Data("label outside class range".into()));
        }
        Ok(BiasedDataset {
            num_classes,
            image_side,
            bias_ratio,
            seed,
            images,
            labels,
            env,
            splits,
            env_reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Floats per image (3 channels x side x side).
    pub fn pixels(&self) -> usize {
        3 * self.image_side * self.image_side
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let p = self.pixels();
        &self.images[index * p..(index + 1) * p]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|i| self.splits[*i] == split).collect()
    }

    pub fn class_indices(&self, split: Split, class: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|i| self.splits[*i] == split && self.labels[*i] == class)
            .collect()
    }

    /// Ground-truth environment label. Diagnostics and oracles only; every
    /// call is counted so tests can assert the training path never looks.
    pub fn hidden_env_label(&self, index: usize) -> usize {
        self.env_reads.fetch_add(1, Ordering::Relaxed);
        self.env[index]
    }

    /// How many times environment labels have been read from this dataset.
    pub fn env_label_reads(&self) -> u64 {
        self.env_reads.load(Ordering::Relaxed)
    }

    /// Fraction of a split whose environment matches its class. Counted as
    /// a diagnostic read.
    pub fn aligned_fraction(&self, split: Split) -> f64 {
        let idx = self.indices_of(split);
        if idx.is_empty() {
            return 0.0;
        }
        let aligned = idx.iter().filter(|i| self.hidden_env_label(**i) == self.labels[**i]).count();
        aligned as f64 / idx.len() as f64
    }

    pub(crate) fn raw_images(&self) -> &[f32] {
        &self.images
    }

    pub(crate) fn raw_labels(&self) -> &[usize] {
        &self.labels
    }

    pub(crate) fn raw_env(&self) -> &[usize] {
        &self.env
    }

    pub(crate) fn raw_splits(&self) -> &[Split] {
        &self.splits
    }
}

/// Per-class sample counts for each split, derived from the train size.
fn split_sizes(spec: &BiasedDatasetSpec) -> [(Split, usize); 4] {
    let n = spec.samples_per_class;
    let val = n.div_ceil(4);
    let test = n.div_ceil(2);
    let conflicting = (spec.test_conflict_fraction * test as f64).round() as usize;
    [
        (Split::Train, n),
        (Split::Val, val),
        (Split::TestAligned, test - conflicting),
        (Split::TestConflicting, conflicting),
    ]
}

/// Exact-quota color list for one class: `aligned` copies of the class's
/// own color, the rest spread as evenly as possible over the other colors
/// (rotated by class so no color is globally favored).
fn color_quota(class: usize, num_classes: usize, total: usize, aligned: usize) -> Vec<usize> {
    debug_assert!(aligned <= total);
    let mut colors = vec![class; aligned];
    let conflicting = total - aligned;
    if conflicting > 0 {
        let others = num_classes - 1;
        let base = conflicting / others;
        let extra = conflicting % others;
        for k in 0..others {
            let color = (class + 1 + k) % num_classes;
            let count = base + usize::from(k < extra);
            colors.extend(std::iter::repeat(color).take(count));
        }
    }
    colors
}

fn aligned_count(split: Split, total: usize, bias_ratio: f64) -> usize {
    match split {
        Split::Train | Split::Val => (bias_ratio * total as f64).round() as usize,
        Split::TestAligned => total,
        Split::TestConflicting => 0,
    }
}

/// Intensity pattern for one sample, independent of color and bias ratio:
/// the same (seed, split, class, index) always draws the same posed glyph.
fn sample_intensity(
    proto: &GlyphPrototype,
    seed: u64,
    split: Split,
    class: usize,
    index: usize,
    side: usize,
) -> Vec<f64> {
    let class_tag = class.to_string();
    let index_tag = index.to_string();
    let mut rng = rng::stream(seed, &["glyph", split.name(), &class_tag, &index_tag]);
    proto.render(side, &mut rng)
}

/// Tint a grayscale intensity pattern with one RGB color, quantizing to the
/// stored f32 precision.
fn tint(intensity: &[f64], color: [f64; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * intensity.len());
    for channel in color {
        out.extend(intensity.iter().map(|v| (v * channel) as f32));
    }
    out
}

/// Generate a dataset. Pure in the spec: equal specs give bitwise-equal
/// datasets.
pub fn generate(spec: &BiasedDatasetSpec) -> Result<BiasedDataset> {
    spec.validate()?;
    let side = spec.image_side;
    let c = spec.num_classes;
    let prototypes: Vec<GlyphPrototype> = (0..c).map(GlyphPrototype::for_class).collect();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut env = Vec::new();
    let mut splits = Vec::new();

    for (split, per_class) in split_sizes(spec) {
        for class in 0..c {
            let aligned = aligned_count(split, per_class, spec.bias_ratio);
            let mut colors = color_quota(class, c, per_class, aligned);
            let class_tag = class.to_string();
            let mut color_rng = rng::stream(spec.seed, &["colors", split.name(), &class_tag]);
            rng::shuffle(&mut color_rng, &mut colors);

            for (index, &color) in colors.iter().enumerate() {
                let intensity =
                    sample_intensity(&prototypes[class], spec.seed, split, class, index, side);
                images.extend_from_slice(&tint(&intensity, spec.env_palette[color]));
                labels.push(class);
                env.push(color);
                splits.push(split);
            }
        }
    }

    BiasedDataset::from_parts(
        c,
        side,
        spec.bias_ratio,
        spec.seed,
        images,
        labels,
        env,
        splits,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_bias_ratio_lands_in_band() {
        let spec = BiasedDatasetSpec::sized(10, 1000, 8, 0.995, 3);
        let data = generate(&spec).unwrap();
        let frac = data.aligned_fraction(Split::Train);
        assert!((0.992..=0.998).contains(&frac), "aligned fraction {frac}");
    }

    #[test]
    fn unbiased_spec_is_uniform_within_binomial_bounds() {
        let c = 5;
        let spec = BiasedDatasetSpec::sized(c, 100, 8, 1.0 / c as f64, 11);
        let data = generate(&spec).unwrap();
        // Empirical P(z|y) against the binomial 3-sigma envelope around 1/C.
        let p = 1.0 / c as f64;
        let n = 100.0;
        let sigma = (p * (1.0 - p) / n).sqrt();
        for class in 0..c {
            let idx = data.class_indices(Split::Train, class);
            for color in 0..c {
                let count = idx.iter().filter(|i| data.hidden_env_label(**i) == color).count();
                let freq = count as f64 / idx.len() as f64;
                assert!(
                    (freq - p).abs() <= 3.0 * sigma,
                    "P(z={color}|y={class}) = {freq}, expected ~{p}"
                );
            }
        }
    }

    #[test]
    fn train_bias_is_within_one_over_n_of_request() {
        for (c, n, rho) in [(3, 50, 0.9), (4, 37, 0.61), (10, 200, 0.95)] {
            let spec = BiasedDatasetSpec::sized(c, n, 8, rho, 5);
            let data = generate(&spec).unwrap();
            let frac = data.aligned_fraction(Split::Train);
            assert!(
                (frac - rho).abs() <= 1.0 / n as f64,
                "C={c} n={n} rho={rho}: fraction {frac}"
            );
        }
    }

    #[test]
    fn conflicting_split_never_matches_class() {
        let data = generate(&BiasedDatasetSpec::sized(4, 24, 8, 0.8, 9)).unwrap();
        let idx = data.indices_of(Split::TestConflicting);
        assert!(!idx.is_empty());
        for i in idx {
            assert_ne!(data.hidden_env_label(i), data.label(i));
        }
    }

    #[test]
    fn equal_seeds_regenerate_bitwise() {
        let spec = BiasedDatasetSpec::sized(3, 50, 8, 0.9, 7);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.raw_images(), b.raw_images());
        assert_eq!(a.raw_labels(), b.raw_labels());
        assert_eq!(a.raw_env(), b.raw_env());
        assert_eq!(a.raw_splits(), b.raw_splits());
        let c = generate(&BiasedDatasetSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.raw_images(), c.raw_images());
    }

    #[test]
    fn palette_size_mismatch_is_a_spec_error() {
        let mut spec = BiasedDatasetSpec::sized(4, 10, 8, 0.8, 1);
        spec.env_palette.pop();
        assert!(matches!(generate(&spec), Err(EqInvError::Config(_))));
    }

    #[test]
    fn bias_ratio_below_uniform_is_rejected() {
        let spec = BiasedDatasetSpec::sized(4, 10, 8, 0.2, 1);
        assert!(matches!(generate(&spec), Err(EqInvError::Config(_))));
    }

    #[test]
    fn bias_only_changes_the_tint_layer() {
        // Same seed, different bias: identical glyph intensities, colors
        // reassigned. Each image must factor as tint(shared intensity, color).
        let c = 4;
        let biased = generate(&BiasedDatasetSpec::sized(c, 12, 8, 1.0, 21)).unwrap();
        let unbiased = generate(&BiasedDatasetSpec::sized(c, 12, 8, 1.0 / c as f64, 21)).unwrap();
        assert_eq!(biased.raw_labels(), unbiased.raw_labels());
        assert_eq!(biased.raw_splits(), unbiased.raw_splits());
        let palette = palette::default_palette(c);
        let prototypes: Vec<GlyphPrototype> = (0..c).map(GlyphPrototype::for_class).collect();

        let mut cursor = std::collections::HashMap::new();
        for i in 0..biased.len() {
            let (split, class) = (biased.split_of(i), biased.label(i));
            let index = *cursor
                .entry((split.tag(), class))
                .and_modify(|v| *v += 1)
                .or_insert(0usize);
            let intensity = sample_intensity(&prototypes[class], 21, split, class, index, 8);
            assert_eq!(biased.image(i), tint(&intensity, palette[biased.raw_env()[i]]));
            assert_eq!(unbiased.image(i), tint(&intensity, palette[unbiased.raw_env()[i]]));
        }
    }

    #[test]
    fn env_label_reads_are_counted() {
        let data = generate(&BiasedDatasetSpec::sized(3, 6, 8, 0.9, 2)).unwrap();
        assert_eq!(data.env_label_reads(), 0);
        let _ = data.image(0);
        let _ = data.label(0);
        let _ = data.indices_of(Split::Train);
        assert_eq!(data.env_label_reads(), 0);
        let _ = data.hidden_env_label(0);
        assert_eq!(data.env_label_reads(), 1);
    }

    #[test]
    fn split_sizes_cover_expected_counts() {
        let spec = BiasedDatasetSpec::sized(10, 200, 8, 0.95, 1);
        let data = generate(&spec).unwrap();
        assert_eq!(data.indices_of(Split::Train).len(), 2000);
        assert_eq!(data.indices_of(Split::Val).len(), 500);
        assert_eq!(data.indices_of(Split::TestAligned).len(), 500);
        assert_eq!(data.indices_of(Split::TestConflicting).len(), 500);
    }
}
