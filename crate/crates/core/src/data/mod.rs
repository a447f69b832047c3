//! Synthetic text images (regular, curved, tilted), their on-disk form
//! (PGM files plus a TSV manifest) and loading into training tensors.

pub mod font;
mod image;
mod render;

pub use image::{resize_bilinear, GrayImage};
pub use render::{
    render_sample, render_sample_with, RenderParams, SyntheticSample, MAX_SCALE, MAX_TILT_DEG,
    MIN_SCALE, NOISE_SIGMA,
};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{Charset, LabelSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Distortion {
    Regular,
    Curved,
    Tilted,
}

impl Distortion {
    pub const ALL: [Distortion; 3] = [Distortion::Regular, Distortion::Curved, Distortion::Tilted];

    pub fn tag(self) -> &'static str {
        match self {
            Distortion::Regular => "regular",
            Distortion::Curved => "curved",
            Distortion::Tilted => "tilted",
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distortion::ALL
            .into_iter()
            .find(|d| d.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown distortion tag {s:?}")))
    }
}

/// Seed of sample `index` in a run seeded with `seed`. The run seed is
/// mixed first so that nearby run seeds do not share samples.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) ^ index
}

/// What to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub regular: usize,
    pub curved: usize,
    pub tilted: usize,
    /// Symbols labels are drawn from.
    pub charset: String,
    /// Inclusive label length range.
    pub length: (usize, usize),
    /// `(W, H)` of the rendering canvas.
    pub canvas: (usize, usize),
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            regular: 0,
            curved: 0,
            tilted: 0,
            charset: "0123456789".into(),
            length: (1, 8),
            canvas: (200, 64),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Equal thirds of `total` (remainder goes to the first tags).
    pub fn balanced(total: usize, seed: u64) -> Self {
        let third = total / 3;
        let rem = total % 3;
        DatasetSpec {
            regular: third + (rem > 0) as usize,
            curved: third + (rem > 1) as usize,
            tilted: third,
            seed,
            ..Self::default()
        }
    }

    pub fn total(&self) -> usize {
        self.regular + self.curved + self.tilted
    }

    fn plan(&self) -> impl Iterator<Item = Distortion> + '_ {
        std::iter::repeat_n(Distortion::Regular, self.regular)
            .chain(std::iter::repeat_n(Distortion::Curved, self.curved))
            .chain(std::iter::repeat_n(Distortion::Tilted, self.tilted))
    }
}

/// Render every sample of `spec` in memory. Labels are uniform over the
/// charset with uniform length; sample `i` depends only on `(seed, i)`.
pub fn synthesize(spec: &DatasetSpec) -> Result<Vec<SyntheticSample>> {
    let symbols: Vec<char> = spec.charset.chars().collect();
    let (lo, hi) = spec.length;
    if symbols.is_empty() || lo == 0 || lo > hi {
        return Err(Error::Config(format!(
            "need a non-empty charset and 1 <= min <= max length, got {:?}",
            spec.length
        )));
    }
    spec.plan()
        .enumerate()
        .map(|(i, d)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, i as u64));
            let len = rng.gen_range(lo..=hi);
            let text: String = (0..len).map(|_| symbols[rng.gen_range(0..symbols.len())]).collect();
            render_sample(&text, d, rng.gen(), spec.canvas)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub label: String,
    pub tag: Distortion,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.path, r.label, r.tag))
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, line)| {
                let bad = |msg: String| Error::Dataset {
                    path: path.to_path_buf(),
                    msg: format!("line {}: {msg}", i + 1),
                };
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 3 {
                    return Err(bad(format!("expected 3 tab-separated fields, got {}", f.len())));
                }
                Ok(ManifestRecord {
                    path: f[0].to_string(),
                    label: f[1].to_string(),
                    tag: f[2].parse().map_err(|e: Error| bad(e.to_string()))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DatasetManifest { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    pub fn count(&self, tag: Distortion) -> usize {
        self.records.iter().filter(|r| r.tag == tag).count()
    }
}

/// Render `spec` into `out_dir`: `images/NNNNNN.pgm` plus `manifest.tsv`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = synthesize(spec)?;
    fs::create_dir_all(out_dir)?;
    if !samples.is_empty() {
        fs::create_dir_all(out_dir.join("images"))?;
    }
    let mut manifest = DatasetManifest::default();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:06}.pgm");
        let (_, h, w) = s.image.dims3()?;
        GrayImage::from_signed(w, h, s.image.data()).write(&out_dir.join(&rel))?;
        manifest.records.push(ManifestRecord {
            path: rel,
            label: s.text.clone(),
            tag: s.distortion,
        });
    }
    fs::write(out_dir.join(MANIFEST_NAME), manifest.to_tsv())?;
    Ok(manifest)
}

/// One training or test example.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    /// `[C, H, W]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    /// Label as the charset reads it back (case-folded if the charset folds).
    pub text: String,
    pub label: LabelSequence,
    pub tag: Distortion,
}

/// Images at a fixed size with encoded labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(W, H)`
    pub size: (usize, usize),
    pub channels: usize,
    pub items: Vec<Item>,
}

fn to_item(
    unit: &[f32],
    src: (usize, usize),
    target: (usize, usize),
    channels: usize,
    text: &str,
    tag: Distortion,
    charset: &Charset,
) -> Result<Item> {
    let plane = resize_bilinear(unit, src, target);
    let mut data = Vec::with_capacity(plane.len() * channels);
    for _ in 0..channels {
        data.extend(plane.iter().map(|&v| 2.0 * v - 1.0));
    }
    let label = charset.encode(text)?;
    Ok(Item {
        image: Tensor::from_data(&[channels, target.1, target.0], data)?,
        text: charset.decode(&label),
        label,
        tag,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Build directly from rendered samples, with the same resize and
    /// scaling as [`load_dataset`].
    pub fn from_samples(
        samples: &[SyntheticSample],
        target: (usize, usize),
        channels: usize,
        charset: &Charset,
    ) -> Result<Self> {
        let items = samples
            .iter()
            .map(|s| {
                let (_, h, w) = s.image.dims3()?;
                let unit = GrayImage::from_signed(w, h, s.image.data()).unit();
                to_item(&unit, (w, h), target, channels, &s.text, s.distortion, charset)
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            size: target,
            channels,
            items,
        })
    }

    /// Stack the items at `indices` into `[N, C, H, W]` with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<LabelSequence>)> {
        let images: Vec<Tensor<f32>> = indices.iter().map(|&i| self.items[i].image.clone()).collect();
        let labels = indices.iter().map(|&i| self.items[i].label.clone()).collect();
        Ok((Tensor::stack(&images)?, labels))
    }

    pub fn subset(&self, keep: impl Fn(&Item) -> bool) -> Dataset {
        Dataset {
            size: self.size,
            channels: self.channels,
            items: self.items.iter().filter(|i| keep(i)).cloned().collect(),
        }
    }
}

/// Directory holding the manifest, for resolving relative image paths.
fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Load a manifest (or a directory containing `manifest.tsv`), resizing
/// every image to `target = (W, H)`.
pub fn load_dataset(
    manifest_path: &Path,
    target: (usize, usize),
    channels: usize,
    charset: &Charset,
) -> Result<Dataset> {
    let path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_NAME)
    } else {
        manifest_path.to_path_buf()
    };
    let manifest = DatasetManifest::read(&path)?;
    let dir = manifest_dir(&path);
    let items = manifest
        .records
        .iter()
        .map(|r| {
            let img = GrayImage::read(&dir.join(&r.path))?;
            to_item(
                &img.unit(),
                (img.width, img.height),
                target,
                channels,
                &r.label,
                r.tag,
                charset,
            )
            .map_err(|e| match e {
                Error::Charset(_) => Error::Dataset {
                    path: path.clone(),
                    msg: format!("label {:?}: {e}", r.label),
                },
                e => e,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        size: target,
        channels,
        items,
    })
}
