//! Procedural four-class slides.
//!
//! * `Neg`: dark background with noise.
//! * `AMA`: bright coarse discs, visible after downscaling.
//! * `SMA-V` / `SMA-T`: a tissue rectangle filled with period-2 stripes
//!   (vertical or horizontal). Rectangle edges sit on even coordinates, so
//!   every downscaled block covering tissue averages to the same value for
//!   both orientations; only full-resolution patches tell them apart.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{DatasetManifest, ManifestEntry, MANIFEST_FILE, MANIFEST_VERSION};
use super::pgm::write_pgm;
use super::preprocess::{preprocess_slide, Geometry, SlideRecord};
use super::{DataError, GrayImage, Split};

pub const CLASS_NAMES: [&str; 4] = ["Neg", "AMA", "SMA-V", "SMA-T"];

/// Reference class distribution of the training split.
pub const REFERENCE_TRAIN_COUNTS: [usize; 4] = [239, 106, 107, 27];
/// Reference class distribution of the test split.
pub const REFERENCE_TEST_COUNTS: [usize; 4] = [103, 45, 46, 11];

/// Scales `reference` to sum to `total` by largest remainder (ties to the lower class).
pub fn scale_counts(reference: [usize; 4], total: usize) -> [usize; 4] {
    let sum: usize = reference.iter().sum();
    let exact: Vec<f64> = reference.iter().map(|&c| c as f64 * total as f64 / sum as f64).collect();
    let mut counts = [0usize; 4];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_counts: [usize; 4],
    pub test_counts: [usize; 4],
    pub full_side: usize,
    pub factor: usize,
    pub background: f64,
    pub noise_sigma: f64,
    pub blob_level: f64,
    pub stripe_low: f64,
    pub stripe_high: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_counts: scale_counts(REFERENCE_TRAIN_COUNTS, 120),
            test_counts: scale_counts(REFERENCE_TEST_COUNTS, 40),
            full_side: 256,
            factor: 8,
            background: 0.1,
            noise_sigma: 0.02,
            blob_level: 0.85,
            stripe_low: 0.1,
            stripe_high: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<Geometry, DataError> {
        let geo = Geometry::new(self.full_side, self.factor)?;
        if self.full_side < 32 || self.full_side % 16 != 0 {
            return Err(DataError::Usage(format!(
                "full resolution {} must be a multiple of 16 and at least 32",
                self.full_side
            )));
        }
        for (split, counts) in [("train", self.train_counts), ("test", self.test_counts)] {
            if counts.iter().sum::<usize>() == 0 {
                return Err(DataError::Usage(format!("{split} split has no slides")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(DataError::Usage("noise sigma must be non-negative".into()));
        }
        Ok(geo)
    }

    pub fn counts(&self, split: Split) -> [usize; 4] {
        match split {
            Split::Train => self.train_counts,
            Split::Test => self.test_counts,
        }
    }

    fn echo(&self) -> Vec<(String, String)> {
        let join = |c: [usize; 4]| c.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("train_counts".into(), join(self.train_counts)),
            ("test_counts".into(), join(self.test_counts)),
            ("background".into(), self.background.to_string()),
            ("noise_sigma".into(), self.noise_sigma.to_string()),
            ("blob_level".into(), self.blob_level.to_string()),
            ("stripe_low".into(), self.stripe_low.to_string()),
            ("stripe_high".into(), self.stripe_high.to_string()),
        ]
    }
}

fn even(v: usize) -> usize {
    v & !1
}

/// Renders one full-resolution slide of class `label`.
pub fn render_slide<R: Rng>(config: &SynthConfig, label: usize, rng: &mut R) -> GrayImage {
    let side = config.full_side;
    let mut img = GrayImage::filled(side, side, config.background);
    match label {
        1 => {
            let blobs = rng.random_range(8..=12);
            let (rmin, rmax) = (side / 16, side * 7 / 64);
            for _ in 0..blobs {
                let r = rng.random_range(rmin..=rmax);
                let cy = rng.random_range(r..side - r) as isize;
                let cx = rng.random_range(r..side - r) as isize;
                let r = r as isize;
                for y in (cy - r).max(0)..(cy + r + 1).min(side as isize) {
                    for x in (cx - r).max(0)..(cx + r + 1).min(side as isize) {
                        let (dy, dx) = (y - cy, x - cx);
                        if dy * dy + dx * dx <= r * r {
                            img.set(y as usize, x as usize, config.blob_level);
                        }
                    }
                }
            }
        }
        2 | 3 => {
            let jitter = side / 16;
            let center_y = side / 2 - jitter + rng.random_range(0..=2 * jitter);
            let center_x = side / 2 - jitter + rng.random_range(0..=2 * jitter);
            let half_h = rng.random_range(side / 4..=side * 3 / 8);
            let half_w = rng.random_range(side / 4..=side * 3 / 8);
            let top = even(center_y.saturating_sub(half_h));
            let left = even(center_x.saturating_sub(half_w));
            let bottom = even((center_y + half_h).min(side));
            let right = even((center_x + half_w).min(side));
            for y in top..bottom {
                for x in left..right {
                    let phase = if label == 2 { x } else { y };
                    let v = if phase % 2 == 1 {
                        config.stripe_high
                    } else {
                        config.stripe_low
                    };
                    img.set(y, x, v);
                }
            }
        }
        _ => {}
    }
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("sigma validated");
        for y in 0..side {
            for x in 0..side {
                let v = img.get(y, x) + noise.sample(rng);
                img.set(y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Deterministic stream of `(split, record)` for every slide of a dataset.
pub struct SyntheticSlides<'a> {
    config: &'a SynthConfig,
    master: ChaCha8Rng,
    plan: Vec<(Split, usize, usize)>,
    next: usize,
}

impl<'a> SyntheticSlides<'a> {
    pub fn new(config: &'a SynthConfig, seed: u64) -> Result<Self, DataError> {
        config.validate()?;
        let mut plan = Vec::new();
        for split in [Split::Train, Split::Test] {
            let mut idx = 0;
            for (label, &count) in config.counts(split).iter().enumerate() {
                for _ in 0..count {
                    plan.push((split, idx, label));
                    idx += 1;
                }
            }
        }
        Ok(Self {
            config,
            master: ChaCha8Rng::seed_from_u64(seed),
            plan,
            next: 0,
        })
    }
}

impl Iterator for SyntheticSlides<'_> {
    type Item = (Split, SlideRecord);

    fn next(&mut self) -> Option<Self::Item> {
        let &(split, idx, label) = self.plan.get(self.next)?;
        self.next += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.master.next_u64());
        let full_image = render_slide(self.config, label, &mut rng);
        Some((
            split,
            SlideRecord {
                slide_id: format!("{}_{idx:04}", split.name()),
                full_image,
                label,
            },
        ))
    }
}

/// Renders, preprocesses and writes a dataset under `root`.
pub fn generate_synthetic_dataset(
    config: &SynthConfig,
    seed: u64,
    root: &Path,
) -> Result<DatasetManifest, DataError> {
    let geo = config.validate()?;
    let mut entries = Vec::new();
    for (split, record) in SyntheticSlides::new(config, seed)? {
        let prepared = preprocess_slide(&record, config.factor)?;
        let rel_dir = format!("{}/{}", split.name(), record.slide_id);
        let dir = root.join(&rel_dir);
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        write_pgm(&dir.join("lowres.pgm"), &prepared.lowres)?;
        for (i, patch) in prepared.patches.iter().enumerate() {
            let (r, c) = (i / geo.grid_side, i % geo.grid_side);
            write_pgm(&dir.join(format!("patch_{r}_{c}.pgm")), patch)?;
        }
        entries.push(ManifestEntry {
            split,
            slide_id: record.slide_id,
            label: record.label,
            lowres_path: format!("{rel_dir}/lowres.pgm"),
            patch_dir: rel_dir,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        geometry: geo,
        seed,
        config: config.echo(),
        entries,
    };
    manifest.write(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts_follow_reference_ratios() {
        assert_eq!(scale_counts(REFERENCE_TRAIN_COUNTS, 120), [60, 26, 27, 7]);
        assert_eq!(scale_counts(REFERENCE_TEST_COUNTS, 40), [20, 9, 9, 2]);
        assert_eq!(scale_counts(REFERENCE_TRAIN_COUNTS, 479), REFERENCE_TRAIN_COUNTS);
    }

    #[test]
    fn rejects_impossible_configs() {
        let mut c = SynthConfig {
            train_counts: [0; 4],
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
        c = SynthConfig {
            factor: 7,
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn stripes_are_identical_after_downscale_without_noise() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let v = render_slide(&cfg, 2, &mut a);
        let h = render_slide(&cfg, 3, &mut b);
        assert_ne!(v, h);
        let (sv, sh) = (v.block_mean(8).unwrap(), h.block_mean(8).unwrap());
        for (x, y) in sv.data().iter().zip(sh.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn stream_is_deterministic() {
        let cfg = SynthConfig {
            train_counts: [1, 1, 1, 1],
            test_counts: [1, 0, 0, 0],
            ..SynthConfig::default()
        };
        let a: Vec<_> = SyntheticSlides::new(&cfg, 4).unwrap().collect();
        let b: Vec<_> = SyntheticSlides::new(&cfg, 4).unwrap().collect();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert_eq!(a[4].1.slide_id, "test_0000");
    }
}
