//! Synthetic fine-grained dataset and training-time augmentation.
//!
//! Every image is one fixed smooth background shared by all classes, plus
//! two copies of a class glyph in two distinct randomly chosen slots (each
//! jittered independently), plus pixel noise. The class signal is local and
//! appears twice.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const GLYPH_CONTRAST: f64 = 1.0;
pub const BACKGROUND_AMPLITUDE: f64 = 0.5;

/// Side of the square pixel cells glyphs are drawn with.
pub const GLYPH_CELL: usize = 2;

/// Minimum number of differing free cells between two class glyphs: a
/// quarter of them.
pub fn min_cell_distance(free_cells: usize) -> usize {
    (free_cells / 4).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    /// Glyph side length.
    pub glyph: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub jitter: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("classes", self.classes),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.glyph < 3 {
            return Err(Error::config("patch", "glyphs need a side of at least 3"));
        }
        if self.slot_grid().0 * self.slot_grid().1 < 2 {
            return Err(Error::config(
                "jitter",
                format!(
                    "two jittered glyphs do not fit in {}x{}",
                    self.image_h, self.image_w
                ),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be finite and nonnegative"));
        }
        if self.classes > 64 {
            return Err(Error::config("classes", "at most 64 classes"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_h, self.image_w, self.channels]
    }

    /// Rows and columns of glyph slots. A slot is a square of side
    /// `glyph + 2·jitter`, so jittered glyphs in distinct slots never overlap.
    pub fn slot_grid(&self) -> (usize, usize) {
        let pitch = self.glyph + 2 * self.jitter;
        (self.image_h / pitch, self.image_w / pitch)
    }

    /// Top-left corner of the glyph in slot `k` (row-major) before jitter.
    pub fn slot_anchor(&self, k: usize) -> (usize, usize) {
        let pitch = self.glyph + 2 * self.jitter;
        let cols = self.slot_grid().1;
        (
            (k / cols) * pitch + self.jitter,
            (k % cols) * pitch + self.jitter,
        )
    }
}

/// Images as `[H, W, C]` row-major `f64` arrays with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image<T: Real>(&self, i: usize) -> Tensor<T> {
        Tensor::new(
            self.shape.to_vec(),
            self.images[i].iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("dataset images match their shape")
    }
}

/// Per-class glyphs and the shared background.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphBank {
    pub side: usize,
    /// `[class][y * side + x]`, values ±1.
    pub glyphs: Vec<Vec<f64>>,
    /// `[H * W]`, shared by all channels.
    pub background: Vec<f64>,
}

impl GlyphBank {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let side = spec.glyph;
        // glyphs are drawn on a coarse grid of GLYPH_CELL-pixel cells and
        // are mirror-symmetric, so a horizontal flip only moves them
        let grid = side.div_ceil(GLYPH_CELL);
        let half = grid.div_ceil(2);
        let free = grid * half;
        let dist = |a: &[bool], c: &[bool]| a.iter().zip(c).filter(|(x, y)| x != y).count();
        let min_dist = min_cell_distance(free);
        let mut patterns: Vec<Vec<bool>> = Vec::new();
        let mut tries = 0;
        while patterns.len() < spec.classes {
            tries += 1;
            if tries > 100_000 {
                return Err(Error::config("classes", "could not separate class glyphs"));
            }
            let cand: Vec<bool> = (0..free).map(|_| rng.random_bool(0.5)).collect();
            if patterns.iter().all(|o| dist(&cand, o) >= min_dist) {
                patterns.push(cand);
            }
        }
        let glyphs = patterns
            .iter()
            .map(|p| {
                (0..side * side)
                    .map(|i| {
                        let (cy, cx) = (i / side / GLYPH_CELL, (i % side) / GLYPH_CELL);
                        let cx = cx.min(grid - 1 - cx);
                        if p[cy * half + cx] {
                            GLYPH_CONTRAST
                        } else {
                            -GLYPH_CONTRAST
                        }
                    })
                    .collect()
            })
            .collect();

        let (h, w) = (spec.image_h, spec.image_w);
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..2.0),
                    rng.random_range(0.5..2.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let background = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
                let s: f64 = waves
                    .iter()
                    .map(|(fy, fx, ph)| (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin())
                    .sum();
                BACKGROUND_AMPLITUDE * s / waves.len() as f64
            })
            .collect();
        Ok(Self {
            side,
            glyphs,
            background,
        })
    }
}

/// Deterministic train and test splits. Classes are interleaved so every
/// prefix of `G` images holds one image per class.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    let bank = GlyphBank::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let train = render_split(spec, &bank, spec.train_per_class, &mut rng)?;
    let test = render_split(spec, &bank, spec.test_per_class, &mut rng)?;
    Ok((train, test))
}

fn render_split(
    spec: &DatasetSpec,
    bank: &GlyphBank,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let noise = (spec.noise_std > 0.0)
        .then(|| Normal::new(0.0, spec.noise_std).expect("validated noise"));
    let (h, w, c) = (spec.image_h, spec.image_w, spec.channels);
    let j = spec.jitter as i64;
    let (rows, cols) = spec.slot_grid();
    let mut images = Vec::with_capacity(per_class * spec.classes);
    let mut labels = Vec::with_capacity(per_class * spec.classes);
    for _ in 0..per_class {
        for class in 0..spec.classes {
            let mut plane = bank.background.clone();
            let slots = rand::seq::index::sample(rng, rows * cols, 2);
            for (ay, ax) in slots.iter().map(|k| spec.slot_anchor(k)) {
                let dy = rng.random_range(-j..=j);
                let dx = rng.random_range(-j..=j);
                let (y0, x0) = ((ay as i64 + dy) as usize, (ax as i64 + dx) as usize);
                for gy in 0..bank.side {
                    for gx in 0..bank.side {
                        plane[(y0 + gy) * w + x0 + gx] += bank.glyphs[class][gy * bank.side + gx];
                    }
                }
            }
            let mut img = Vec::with_capacity(h * w * c);
            for &v in &plane {
                for _ in 0..c {
                    img.push(v + noise.map_or(0.0, |n| n.sample(rng)));
                }
            }
            images.push(img);
            labels.push(class);
        }
    }
    Ok(Dataset {
        shape: spec.image_shape(),
        images,
        labels,
    })
}

/// Zero-pads by `pad` on every side and crops the canvas back out at
/// offset `(dy, dx)` in the padded frame. `(pad, pad)` is the identity.
pub fn pad_crop(image: &[f64], shape: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let [h, w, c] = shape;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let sy = (y + dy) as i64 - pad as i64;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w {
            let sx = (x + dx) as i64 - pad as i64;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            let (s, d) = ((sy as usize * w + sx as usize) * c, (y * w + x) * c);
            out[d..d + c].copy_from_slice(&image[s..s + c]);
        }
    }
    out
}

pub fn flip_horizontal(image: &[f64], shape: [usize; 3]) -> Vec<f64> {
    let [h, w, c] = shape;
    let mut out = vec![0.0; image.len()];
    for y in 0..h {
        for x in 0..w {
            let (s, d) = ((y * w + x) * c, (y * w + (w - 1 - x)) * c);
            out[d..d + c].copy_from_slice(&image[s..s + c]);
        }
    }
    out
}

/// Random pad-and-crop followed by a horizontal flip with probability 0.5.
pub fn augment(image: &[f64], shape: [usize; 3], pad: usize, rng: &mut impl Rng) -> Vec<f64> {
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    let flip = rng.random_bool(0.5);
    let out = pad_crop(image, shape, pad, dy, dx);
    if flip {
        flip_horizontal(&out, shape)
    } else {
        out
    }
}

/// Evaluation-time view: the center crop of the padded canvas, which is the
/// image itself.
pub fn center_crop(image: &[f64], shape: [usize; 3], pad: usize) -> Vec<f64> {
    pad_crop(image, shape, pad, pad, pad)
}

/// Visit order of one epoch.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec() -> DatasetSpec {
        DatasetSpec {
            image_h: 32,
            image_w: 32,
            channels: 1,
            glyph: 8,
            classes: 8,
            train_per_class: 4,
            test_per_class: 2,
            jitter: 2,
            noise_std: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn without_jitter_glyphs_fill_two_slots_exactly() {
        let spec = DatasetSpec {
            jitter: 0,
            train_per_class: 16,
            ..small_spec()
        };
        let bank = GlyphBank::new(&spec).unwrap();
        let (train, _) = generate_dataset(&spec).unwrap();
        let (rows, cols) = spec.slot_grid();
        assert_eq!((rows, cols), (4, 4));
        let s = spec.glyph;
        let mut used = vec![0usize; rows * cols];
        for (img, &label) in train.images.iter().zip(&train.labels) {
            let residual: Vec<f64> = img.iter().zip(&bank.background).map(|(a, b)| a - b).collect();
            let mut filled = 0;
            for k in 0..rows * cols {
                let (y0, x0) = spec.slot_anchor(k);
                let cell: Vec<f64> = (0..s * s)
                    .map(|i| residual[(y0 + i / s) * spec.image_w + x0 + i % s])
                    .collect();
                if cell.iter().all(|v| *v == 0.0) {
                    continue;
                }
                assert!(cell.iter().zip(&bank.glyphs[label]).all(|(a, b)| (a - b).abs() < 1e-12));
                filled += 1;
                used[k] += 1;
            }
            assert_eq!(filled, 2);
        }
        assert!(used.iter().all(|&n| n > 0), "slots used: {used:?}");
    }

    #[test]
    fn labels_are_balanced() {
        let (train, test) = generate_dataset(&small_spec()).unwrap();
        for split in [&train, &test] {
            let mut counts = vec![0; 8];
            split.labels.iter().for_each(|&l| counts[l] += 1);
            assert!(counts.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn seeds_change_noise_not_labels() {
        let a = DatasetSpec {
            noise_std: 0.1,
            ..small_spec()
        };
        let b = DatasetSpec { seed: 8, ..a.clone() };
        let (ta, _) = generate_dataset(&a).unwrap();
        let (tb, _) = generate_dataset(&b).unwrap();
        assert_eq!(ta.labels, tb.labels);
        assert_ne!(ta.images[0], tb.images[0]);
        assert_eq!(generate_dataset(&a).unwrap().0, ta);
    }

    #[test]
    fn glyphs_are_symmetric_and_apart() {
        let bank = GlyphBank::new(&small_spec()).unwrap();
        let s = bank.side;
        let mirror = |g: &[f64]| -> Vec<f64> {
            (0..s * s).map(|i| g[(i / s) * s + s - 1 - i % s]).collect()
        };
        // 4x4 cells, 8 free; two differing free cells flip 2 x 2 x 4 pixels
        let want = 16;
        for a in 0..bank.glyphs.len() {
            assert_eq!(mirror(&bank.glyphs[a]), bank.glyphs[a]);
            for b in a + 1..bank.glyphs.len() {
                let d = bank.glyphs[a]
                    .iter()
                    .zip(&bank.glyphs[b])
                    .filter(|(p, q)| p != q)
                    .count();
                assert!(d >= want, "classes {a} and {b} differ in {d} pixels");
            }
        }
    }

    #[test]
    fn oversized_jitter_is_rejected() {
        let spec = DatasetSpec {
            jitter: 5,
            ..small_spec()
        };
        assert!(matches!(spec.validate(), Err(Error::Config { key, .. }) if key == "jitter"));
    }

    #[test]
    fn flip_twice_and_center_crop_are_identity() {
        let shape = [4, 5, 2];
        let img: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert_eq!(flip_horizontal(&flip_horizontal(&img, shape), shape), img);
        assert_eq!(center_crop(&img, shape, 2), img);
        let shifted = pad_crop(&img, shape, 1, 0, 1);
        assert_eq!(&shifted[..10], &[0.0; 10]);
        assert_eq!(shifted[10..12], img[0..2]);
    }
}
