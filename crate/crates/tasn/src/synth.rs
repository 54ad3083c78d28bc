//! Synthetic fine-grained dataset: every class shares the same coarse
//! silhouette, and the class is determined solely by a tiny high-contrast
//! glyph placed at a random position inside the silhouette. The glyph covers
//! well under 2% of the image, so a 4x uniform downsample reduces it to
//! about one pixel and destroys the class evidence by construction.
//!
//! Glyph patterns are rows of a first-order Reed-Muller code: each 4x4
//! pattern has exactly 8 cells on and any two patterns differ in 8 of 16
//! cells, so no class pair is distinguishable by glyph mean intensity.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::{self, FormatError};
use crate::num::Real;
use crate::sampler::ImageBuffer;
use crate::tensor::{Result, TensorError};

/// Generation parameters for the synthetic set.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_size: usize,
    pub glyph_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 8,
            image_size: 64,
            glyph_size: 4,
            train_per_class: 200,
            test_per_class: 50,
            seed: 0,
        }
    }
}

/// One split of generated images with labels and the glyph placement used
/// for each image (kept for difficulty oracles; not serialized).
#[derive(Debug, Clone)]
pub struct LabeledSet<T> {
    pub images: Vec<ImageBuffer<T>>,
    pub labels: Vec<usize>,
    pub glyph_pos: Vec<(usize, usize)>,
}

impl<T> LabeledSet<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-class glyph bitmaps, `glyph_size^2` cells each, row-major.
///
/// For the default 4x4 glyph the patterns are the nonzero-functional rows of
/// the Reed-Muller RM(1,4) code: weight 8, pairwise Hamming distance 8.
pub fn glyph_patterns(classes: usize, glyph_size: usize) -> Result<Vec<Vec<bool>>> {
    let cells = glyph_size * glyph_size;
    let max_classes = cells - 1;
    if classes < 2 || classes > max_classes {
        return Err(TensorError::Usage(format!(
            "classes must be in [2, {max_classes}] for a {glyph_size}x{glyph_size} glyph"
        )));
    }
    Ok((0..classes)
        .map(|k| {
            (0..cells)
                .map(|i| ((k + 1) & i).count_ones() % 2 == 1)
                .collect()
        })
        .collect())
}

fn silhouette(size: usize) -> Vec<f64> {
    let c = size as f64 / 2.0 - 0.5;
    let (rx, ry) = (0.40 * size as f64, 0.32 * size as f64);
    let mut img = vec![0.0f64; size * size];
    for r in 0..size {
        for col in 0..size {
            let dy = (r as f64 - c) / ry;
            let dx = (col as f64 - c) / rx;
            let d = (dx * dx + dy * dy).sqrt();
            // soft-edged ellipse: flat interior, smooth ramp to background
            let v = 0.45 * ((1.0 - d) / 0.25).clamp(0.0, 1.0);
            img[r * size + col] = v;
        }
    }
    img
}

/// Generate the train and test splits. A fixed seed yields a byte-identical
/// dataset on regeneration.
pub fn generate_dataset<T: Real>(spec: &SynthSpec) -> Result<(LabeledSet<T>, LabeledSet<T>)> {
    let s = spec.image_size;
    let g = spec.glyph_size;
    if s < 4 * g {
        return Err(TensorError::Usage(format!(
            "image size {s} too small for glyph size {g}"
        )));
    }
    let glyph_area = (g * g) as f64 / (s * s) as f64;
    if glyph_area >= 0.02 {
        return Err(TensorError::Usage(format!(
            "glyph covers {:.1}% of the image; must stay under 2%",
            glyph_area * 100.0
        )));
    }
    let patterns = glyph_patterns(spec.classes, g)?;
    let base = silhouette(s);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let center = s as f64 / 2.0 - 0.5;
    let (rx, ry) = (0.40 * s as f64, 0.32 * s as f64);
    let mut make_set = |per_class: usize| -> Result<LabeledSet<T>> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut glyph_pos = Vec::new();
        for class in 0..spec.classes {
            for _ in 0..per_class {
                // place the glyph fully inside the silhouette interior
                let (top, left) = loop {
                    let top = rng.gen_range(0..s - g);
                    let left = rng.gen_range(0..s - g);
                    let cy = top as f64 + g as f64 / 2.0 - 0.5;
                    let cx = left as f64 + g as f64 / 2.0 - 0.5;
                    let d = (((cx - center) / rx).powi(2) + ((cy - center) / ry).powi(2)).sqrt();
                    if d < 0.6 {
                        break (top, left);
                    }
                };
                let mut px = base.clone();
                let pattern = &patterns[class];
                for cr in 0..g {
                    for cc in 0..g {
                        px[(top + cr) * s + (left + cc)] =
                            if pattern[cr * g + cc] { 1.0 } else { 0.0 };
                    }
                }
                let data = px.iter().map(|&v| T::from_f64_lossy(v)).collect();
                images.push(ImageBuffer::new(s, s, 1, data)?);
                labels.push(class);
                glyph_pos.push((top, left));
            }
        }
        Ok(LabeledSet {
            images,
            labels,
            glyph_pos,
        })
    };

    let train = make_set(spec.train_per_class)?;
    let test = make_set(spec.test_per_class)?;
    Ok((train, test))
}

/// Write a split as `img_NNNNN.pgm` files plus a `labels.tsv` of
/// `filename<TAB>class-index` lines.
pub fn save_set<T: Real>(dir: &Path, set: &LabeledSet<T>) -> std::result::Result<(), FormatError> {
    fs::create_dir_all(dir)?;
    let mut labels = String::new();
    for (i, (img, &label)) in set.images.iter().zip(&set.labels).enumerate() {
        let name = format!("img_{i:05}.pgm");
        io::save_image(&dir.join(&name), img)?;
        labels.push_str(&format!("{name}\t{label}\n"));
    }
    io::write_atomic(&dir.join("labels.tsv"), labels.as_bytes())
}

/// Read a split written by [`save_set`]. Glyph positions are not stored on
/// disk, so the loaded set carries an empty position table.
pub fn load_set<T: Real>(dir: &Path) -> std::result::Result<LabeledSet<T>, FormatError> {
    let text = fs::read_to_string(dir.join("labels.tsv"))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines() {
        let (name, label) = line
            .split_once('\t')
            .ok_or_else(|| FormatError::Corrupt(format!("bad labels line: {line}")))?;
        let label: usize = label
            .parse()
            .map_err(|_| FormatError::Corrupt(format!("bad class index in: {line}")))?;
        images.push(io::load_image(&dir.join(name))?);
        labels.push(label);
    }
    Ok(LabeledSet {
        images,
        labels,
        glyph_pos: Vec::new(),
    })
}
