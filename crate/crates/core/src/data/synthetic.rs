//! Procedural glyph images with an exactly controlled long-tailed label profile.
//!
//! Every class owns a seeded binary glyph and a base colour. An image shows a
//! class's glyph (with position and colour jitter) iff that label is on.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClassStats, CountPolicy, DbLossParams, Group};
use crate::params::sha256_hex;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Test sample ids start here so they never collide with training ids.
pub const TEST_ID_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Number of head, medium and tail classes, in that order.
    pub split: [usize; 3],
    /// Per-class positive counts of the training split. Derived from `split` when absent.
    #[serde(default)]
    pub counts: Option<Vec<usize>>,
    /// Target mean number of labels per image.
    pub cooccurrence: f64,
    /// Positives per class in the balanced test split.
    pub test_per_class: usize,
    /// Side length of a class glyph in pixels.
    #[serde(default = "default_glyph")]
    pub glyph_size: usize,
    /// Glyphs are placed in distinct cells of this size, jittered within the cell.
    #[serde(default = "default_cell")]
    pub cell_size: usize,
    /// Amplitude of the uniform background noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_glyph() -> usize {
    6
}

fn default_cell() -> usize {
    8
}

fn default_noise() -> f64 {
    0.25
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            classes: 12,
            image_size: 32,
            channels: 3,
            split: [4, 4, 4],
            counts: None,
            cooccurrence: 1.4,
            test_per_class: 47,
            glyph_size: default_glyph(),
            cell_size: default_cell(),
            noise: default_noise(),
            seed: 2024,
        }
    }
}

fn geometric(n: usize, hi: f64, lo: f64) -> Vec<usize> {
    match n {
        0 => vec![],
        1 => vec![hi.round() as usize],
        _ => (0..n)
            .map(|i| (hi * (lo / hi).powf(i as f64 / (n - 1) as f64)).round() as usize)
            .collect(),
    }
}

/// Piecewise-geometric long-tail profile: head classes from 200 down to 110,
/// medium from 90 to 25, tail from 16 to 4.
pub fn default_profile(split: [usize; 3]) -> Vec<usize> {
    let mut v = geometric(split[0], 200.0, 110.0);
    v.extend(geometric(split[1], 90.0, 25.0));
    v.extend(geometric(split[2], 16.0, 4.0));
    v
}

impl GeneratorSpec {
    /// Training profile after defaults are applied.
    pub fn train_counts(&self) -> Vec<usize> {
        self.counts.clone().unwrap_or_else(|| default_profile(self.split))
    }

    /// Number of glyph cells per image.
    pub fn cells(&self) -> usize {
        (self.image_size / self.cell_size.max(1)).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("generator.classes: must be at least 1"));
        }
        if self.classes > u16::MAX as usize {
            return Err(Error::config("generator.classes: at most 65535 classes"));
        }
        if self.channels == 0 || self.image_size == 0 {
            return Err(Error::config("generator.channels / image_size: must be positive"));
        }
        if self.cell_size == 0 || self.cell_size > self.image_size {
            return Err(Error::config("generator.cell_size: must be in 1..=image_size"));
        }
        if self.glyph_size == 0 || self.glyph_size > self.cell_size {
            return Err(Error::config("generator.glyph_size: must be in 1..=cell_size"));
        }
        if self.classes > self.cells() {
            // An image may carry every label, so every glyph needs its own cell.
            return Err(Error::config(format!(
                "generator.classes: {} classes do not fit in {} glyph cells",
                self.classes,
                self.cells()
            )));
        }
        if self.split.iter().sum::<usize>() != self.classes {
            return Err(Error::config(format!(
                "generator.split: {:?} does not add up to {} classes",
                self.split, self.classes
            )));
        }
        if !(self.cooccurrence >= 1.0) || !self.cooccurrence.is_finite() {
            return Err(Error::config("generator.cooccurrence: must be a finite value >= 1"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("generator.noise: must lie in [0, 1]"));
        }
        let counts = self.train_counts();
        if counts.len() != self.classes {
            return Err(Error::config(format!(
                "generator.counts: {} entries for {} classes",
                counts.len(),
                self.classes
            )));
        }
        let mut groups = [0usize; 3];
        for &c in &counts {
            groups[Group::ALL.iter().position(|g| *g == Group::from_count(c)).unwrap()] += 1;
        }
        if groups != self.split {
            return Err(Error::config(format!(
                "generator.counts: profile has head/medium/tail sizes {groups:?}, split declares {:?}",
                self.split
            )));
        }
        if self.test_per_class == 0 {
            return Err(Error::config("generator.test_per_class: must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config(format!("generator spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub class: u16,
    pub x: u16,
    pub y: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `C×H×W` row-major, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub labels: Vec<bool>,
    pub glyphs: Vec<Placement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub samples: Vec<Sample>,
    /// Generator spec the data came from (TOML), echoed into archives.
    pub spec_echo: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            for (c, &l) in counts.iter_mut().zip(&s.labels) {
                *c += l as usize;
            }
        }
        counts
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// Row-major `[len, classes]` label matrix.
    pub fn labels_flat(&self) -> Vec<bool> {
        self.samples.iter().flat_map(|s| s.labels.iter().copied()).collect()
    }

    pub fn mean_labels_per_image(&self) -> f64 {
        self.class_counts().iter().sum::<usize>() as f64 / self.len().max(1) as f64
    }

    /// `[B, C, H, W]` tensor of the selected images.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let per = self.channels * self.image_size * self.image_size;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.samples[i].image.iter().map(|&x| T::of_f32(x)));
        }
        Tensor::new([indices.len(), self.channels, self.image_size, self.image_size], data)
            .expect("image buffer matches geometry")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<bool> {
        indices
            .iter()
            .flat_map(|&i| self.samples[i].labels.iter().copied())
            .collect()
    }

    pub fn ids_of(&self, indices: &[usize]) -> Vec<u64> {
        indices.iter().map(|&i| self.samples[i].id).collect()
    }

    /// Hash over ids, labels, placements and image bits.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.len() * (self.channels * self.image_size * self.image_size * 4 + 32));
        bytes.extend((self.classes as u64).to_le_bytes());
        for s in &self.samples {
            bytes.extend(s.id.to_le_bytes());
            bytes.extend(s.labels.iter().map(|&l| l as u8));
            for g in &s.glyphs {
                bytes.extend(g.class.to_le_bytes());
                bytes.extend(g.x.to_le_bytes());
                bytes.extend(g.y.to_le_bytes());
            }
            for x in &s.image {
                bytes.extend(x.to_bits().to_le_bytes());
            }
        }
        sha256_hex(bytes)
    }
}

struct Glyph {
    mask: Vec<bool>,
    color: Vec<f64>,
}

fn class_glyphs(spec: &GeneratorSpec) -> Vec<Glyph> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX - 1);
    let g = spec.glyph_size;
    (0..spec.classes)
        .map(|_| {
            let mut mask: Vec<bool>;
            loop {
                mask = (0..g * g).map(|_| rng.random_bool(0.5)).collect();
                let on = mask.iter().filter(|&&m| m).count();
                if on >= g * g / 3 && on <= 2 * g * g / 3 {
                    break;
                }
            }
            (mask, rng.random_range(0.85..1.0))
        })
        .enumerate()
        .map(|(i, (mask, value))| Glyph {
            mask,
            color: class_color(i, spec.classes, spec.channels, value),
        })
        .collect()
}

/// Evenly spaced hues for three channels; a brightness ramp otherwise.
fn class_color(i: usize, classes: usize, channels: usize, value: f64) -> Vec<f64> {
    let h = i as f64 / classes as f64;
    if channels != 3 {
        return vec![0.4 + 0.6 * (i as f64 + 0.5) / classes as f64; channels];
    }
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        value - value * (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    vec![f(5.0), f(3.0), f(1.0)]
}

/// Assigns exactly `counts[i]` positives of class `i` over `n` images, at least one label per image.
fn assign_labels(counts: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<bool>>> {
    let total: usize = counts.iter().sum();
    if let Some((i, &c)) = counts.iter().enumerate().find(|(_, &c)| c > n) {
        return Err(Error::config(format!(
            "infeasible profile: class {i} needs {c} images but only {n} exist"
        )));
    }
    if total < n {
        return Err(Error::config(format!(
            "infeasible profile: {total} labels cannot cover {n} images"
        )));
    }
    let mut tokens: Vec<usize> = counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect();
    tokens.shuffle(rng);
    let mut labels = vec![vec![false; counts.len()]; n];
    // One token per image first, so no image is left empty.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut rest = Vec::with_capacity(total - n);
    let mut remaining = tokens.into_iter();
    for &img in &order {
        let cls = remaining.next().expect("total >= n");
        labels[img][cls] = true;
    }
    rest.extend(remaining);
    for cls in rest {
        let free: Vec<usize> = (0..n).filter(|&i| !labels[i][cls]).collect();
        let pick = free[rng.random_range(0..free.len())];
        labels[pick][cls] = true;
    }
    Ok(labels)
}

fn render(spec: &GeneratorSpec, glyphs: &[Glyph], labels: &[bool], rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<Placement>) {
    let (c, s, g) = (spec.channels, spec.image_size, spec.glyph_size);
    let mut img: Vec<f64> = (0..c * s * s).map(|_| rng.random::<f64>() * spec.noise).collect();
    let mut placed: Vec<Placement> = Vec::new();
    let grid = s / spec.cell_size;
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(rng);
    let slack = spec.cell_size - g;
    for (slot, (cls, _)) in labels.iter().enumerate().filter(|(_, &l)| l).enumerate() {
        let cell = cells[slot];
        let x = (cell % grid) * spec.cell_size + rng.random_range(0..=slack);
        let y = (cell / grid) * spec.cell_size + rng.random_range(0..=slack);
        let glyph = &glyphs[cls];
        let jitter: Vec<f64> = (0..c).map(|_| rng.random_range(-0.15..0.15)).collect();
        for ch in 0..c {
            let col = (glyph.color[ch] + jitter[ch]).clamp(0.0, 1.0);
            for gy in 0..g {
                for gx in 0..g {
                    if glyph.mask[gy * g + gx] {
                        let px = &mut img[(ch * s + y + gy) * s + x + gx];
                        *px = px.max(col);
                    }
                }
            }
        }
        placed.push(Placement {
            class: cls as u16,
            x: x as u16,
            y: y as u16,
        });
    }
    (img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(), placed)
}

fn build(spec: &GeneratorSpec, counts: &[usize], stream: u64, id_offset: u64) -> Result<Dataset> {
    let total: usize = counts.iter().sum();
    let n = ((total as f64) / spec.cooccurrence).round().max(1.0) as usize;
    let glyphs = class_glyphs(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let labels = assign_labels(counts, n, &mut rng)?;
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, labels)| {
            // Per-sample stream: the image depends only on (seed, split, index).
            let mut srng = ChaCha8Rng::seed_from_u64(spec.seed ^ stream.rotate_left(17));
            srng.set_stream(i as u64);
            let (image, glyphs) = render(spec, &glyphs, &labels, &mut srng);
            Sample {
                id: id_offset + i as u64,
                image,
                labels,
                glyphs,
            }
        })
        .collect();
    Ok(Dataset {
        classes: spec.classes,
        channels: spec.channels,
        image_size: spec.image_size,
        samples,
        spec_echo: spec.to_toml(),
    })
}

/// Generates `(train, test)`: the long-tailed training split and a test split
/// with `test_per_class` positives for every class.
pub fn generate(spec: &GeneratorSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let train = build(spec, &spec.train_counts(), 1, 0)?;
    let test = build(spec, &vec![spec.test_per_class; spec.classes], 2, TEST_ID_OFFSET)?;
    Ok((train, test))
}

/// Class statistics of a training split; degenerate counts are clamped with a warning.
pub fn class_stats<T: Scalar>(ds: &Dataset, p: &DbLossParams) -> Result<ClassStats<T>> {
    if ds.is_empty() {
        return Err(Error::config("class statistics of an empty dataset"));
    }
    ClassStats::from_counts(&ds.class_counts(), ds.len(), p, CountPolicy::Clamp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_has_even_split() {
        let p = default_profile([4, 4, 4]);
        assert_eq!(p.len(), 12);
        let groups: Vec<Group> = p.iter().map(|&c| Group::from_count(c)).collect();
        assert_eq!(&groups[..4], &[Group::Head; 4]);
        assert_eq!(&groups[4..8], &[Group::Medium; 4]);
        assert_eq!(&groups[8..], &[Group::Tail; 4]);
        assert_eq!(p[0], 200);
        assert_eq!(p[11], 4);
    }

    #[test]
    fn counts_match_profile_exactly() {
        let spec = GeneratorSpec::default();
        let (train, test) = generate(&spec).unwrap();
        assert_eq!(train.class_counts(), spec.train_counts());
        assert_eq!(test.class_counts(), vec![47; 12]);
        assert!(train.samples.iter().all(|s| s.labels.iter().any(|&l| l)));
        assert!(train.samples.iter().all(|s| s.image.iter().all(|&x| (0.0..=1.0).contains(&x))));
        assert!((590..=640).contains(&train.len()), "{}", train.len());
        assert!((390..=420).contains(&test.len()), "{}", test.len());
    }

    #[test]
    fn glyph_present_iff_label() {
        let (train, _) = generate(&GeneratorSpec::default()).unwrap();
        for s in train.samples.iter().take(50) {
            let mut from_glyphs = vec![false; 12];
            for g in &s.glyphs {
                from_glyphs[g.class as usize] = true;
            }
            assert_eq!(from_glyphs, s.labels);
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let spec = GeneratorSpec::default();
        let a = generate(&spec).unwrap().0.content_hash();
        let b = generate(&spec).unwrap().0.content_hash();
        assert_eq!(a, b);
        let other = GeneratorSpec { seed: 7, ..spec };
        assert_ne!(a, generate(&other).unwrap().0.content_hash());
    }

    #[test]
    fn cooccurrence_target_on_large_split() {
        let spec = GeneratorSpec {
            classes: 10,
            split: [10, 0, 0],
            counts: Some(vec![200; 10]),
            cooccurrence: 2.0,
            test_per_class: 1,
            ..GeneratorSpec::default()
        };
        let (train, _) = generate(&spec).unwrap();
        assert_eq!(train.len(), 1000);
        assert!((train.mean_labels_per_image() - 2.0).abs() / 2.0 < 0.1);
    }

    #[test]
    fn field_level_validation() {
        let bad = GeneratorSpec {
            counts: Some(vec![200, 50, 5]),
            classes: 3,
            split: [1, 1, 1],
            ..GeneratorSpec::default()
        };
        assert!(bad.validate().is_ok());
        let wrong_split = GeneratorSpec {
            split: [2, 0, 1],
            ..bad.clone()
        };
        let err = wrong_split.validate().unwrap_err().to_string();
        assert!(err.contains("generator.counts"), "{err}");
        let infeasible = GeneratorSpec {
            counts: Some(vec![500, 50, 5]),
            ..bad
        };
        assert!(generate(&infeasible).is_err());
    }

    #[test]
    fn stats_of_voc_like_profile() {
        let spec = GeneratorSpec {
            classes: 20,
            split: [6, 6, 8],
            counts: Some(default_profile([6, 6, 8])),
            test_per_class: 1,
            image_size: 40,
            ..GeneratorSpec::default()
        };
        let (train, _) = generate(&spec).unwrap();
        let stats: ClassStats<f64> = class_stats(&train, &DbLossParams::default()).unwrap();
        assert_eq!(stats.group_sizes(), [6, 6, 8]);
    }
}
