//! Datasets and task streams.
//!
//! A [`LabeledDataset`] is a flat list of `(id, label, features)` examples;
//! ids are unique and stable so deterministic reruns and memory-buffer
//! exports can reference examples by identity. A [`TaskStream`] partitions
//! the label set into ordered tasks, each carrying its own train/test split.
//!
//! Sources:
//! - [`synth_gaussians`]: class-conditional Gaussian clouds with a
//!   controllable separation knob — the desk-scale workhorse;
//! - [`load_image_dataset`]: raw label+pixel record files or a PNG directory
//!   with a CSV manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PstError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Example {
    pub id: u64,
    pub label: usize,
    pub features: Tensor,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<Example>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Examples grouped by label, ascending; order within a class follows
    /// dataset order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<&Example>> {
        let mut out: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
        for e in &self.examples {
            out.entry(e.label).or_default().push(e);
        }
        out
    }

    /// Keeps only examples whose label is in `classes`.
    pub fn restrict_to(&self, classes: &BTreeSet<usize>) -> LabeledDataset {
        LabeledDataset {
            examples: self
                .examples
                .iter()
                .filter(|e| classes.contains(&e.label))
                .cloned()
                .collect(),
        }
    }

    pub fn validate_unique_ids(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.examples {
            if !seen.insert(e.id) {
                return Err(PstError::Contract(format!("duplicate example id {}", e.id)));
            }
        }
        Ok(())
    }
}

/// Stacks examples into one `[n, ...input_shape]` batch plus its label list.
///
/// Features only need to hold the right element count: a flat `[d]` vector
/// feeds a `[c, h, w]` model unchanged, taking the model's layout. Stored
/// layouts and the model input are validated against each other upstream.
pub fn collate(examples: &[&Example], input_shape: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    if examples.is_empty() {
        return Err(PstError::Contract("collate: empty batch".into()));
    }
    let per: usize = input_shape.iter().product();
    let mut data = Vec::with_capacity(examples.len() * per);
    let mut labels = Vec::with_capacity(examples.len());
    for e in examples {
        if e.features.numel() != per {
            return Err(PstError::Dimension(format!(
                "example {} holds {} values, the {:?} input needs {per}",
                e.id,
                e.features.numel(),
                input_shape
            )));
        }
        data.extend_from_slice(e.features.data());
        labels.push(e.label);
    }
    let mut shape = vec![examples.len()];
    shape.extend_from_slice(input_shape);
    Ok((Tensor::new(shape, data)?, labels))
}

/// A dataset with its train/test division fixed at creation time.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitDataset {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// One task of a stream.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskData {
    /// Labels this task introduces, in stream order.
    pub classes: Vec<usize>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub seed: u64,
}

impl TaskStream {
    /// Union of class labels of tasks `0..=upto`.
    pub fn seen_classes(&self, upto: usize) -> BTreeSet<usize> {
        self.tasks[..=upto]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }

    /// Concatenated test split of tasks `0..=upto`.
    pub fn seen_test(&self, upto: usize) -> LabeledDataset {
        LabeledDataset {
            examples: self.tasks[..=upto]
                .iter()
                .flat_map(|t| t.test.examples.iter().cloned())
                .collect(),
        }
    }
}

/// Splits the classes of `data` into consecutive tasks of `classes_per_task`
/// labels each (the final task takes any remainder). Class order is shuffled
/// by `seed`, so different seeds yield different curricula.
pub fn make_stream(data: &SplitDataset, classes_per_task: usize, seed: u64) -> Result<TaskStream> {
    let classes: Vec<usize> = data.train.classes().into_iter().collect();
    if classes_per_task == 0 {
        return Err(PstError::Config("classes_per_task must be >= 1".into()));
    }
    if classes.is_empty() {
        return Err(PstError::Contract("dataset has no classes".into()));
    }
    if classes_per_task > classes.len() {
        return Err(PstError::Config(format!(
            "classes_per_task {} exceeds the {} available classes",
            classes_per_task,
            classes.len()
        )));
    }
    let mut order = classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let tasks = order
        .chunks(classes_per_task)
        .map(|chunk| {
            let set: BTreeSet<usize> = chunk.iter().copied().collect();
            TaskData {
                classes: chunk.to_vec(),
                train: data.train.restrict_to(&set),
                test: data.test.restrict_to(&set),
            }
        })
        .collect();
    Ok(TaskStream { tasks, seed })
}

/// Class-conditional Gaussians: class means are uniform points on the sphere
/// of radius `separation`, samples add unit-variance noise per coordinate.
/// Examples split 80/20 train/test by a hash of their id, so the split is a
/// property of the example, not of visit order.
pub fn synth_gaussians(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<SplitDataset> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(PstError::Config(
            "num_classes, dim, and per_class must all be >= 1".into(),
        ));
    }
    if !(separation >= 0.0) {
        return Err(PstError::Config(format!(
            "separation must be >= 0, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x *= separation / norm;
        }
        means.push(v);
    }

    let mut train = LabeledDataset::default();
    let mut test = LabeledDataset::default();
    for class in 0..num_classes {
        for i in 0..per_class {
            let id = ((class as u64) << 32) | i as u64;
            let features: Vec<f64> = means[class]
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let e = Example {
                id,
                label: class,
                features: Tensor::new(vec![dim], features)?,
            };
            if splitmix64(id) % 5 == 0 {
                test.examples.push(e);
            } else {
                train.examples.push(e);
            }
        }
    }
    Ok(SplitDataset { train, test })
}

/// Stateless 64-bit mixer; drives the id-hash train/test split so the split
/// is a property of the example, never of load order.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// On-disk formats [`load_image_dataset`] understands.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ImageFormat {
    /// Fixed-length records: one label byte followed by channel-major pixel
    /// bytes (`channels × height × width` of them).
    RawBatches {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// A CSV manifest `id,path,label` (with header) next to PNG files;
    /// `path` is relative to the manifest's directory.
    PngDir,
}

/// Per-channel normalization constants.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Loads an image dataset: pixels scaled to `[0,1]`, optionally mean-pooled
/// down by `downsample`, then per-channel standardized.
///
/// When `normalize` is `None` the constants are computed from this data and
/// returned, so the caller can record them (and reuse them for the test
/// split). Ids are record indices for raw batches and the manifest's id
/// column for PNG directories.
pub fn load_image_dataset(
    path: &Path,
    format: &ImageFormat,
    downsample: usize,
    normalize: Option<NormStats>,
) -> Result<(LabeledDataset, NormStats)> {
    let mut raw = match format {
        ImageFormat::RawBatches {
            channels,
            height,
            width,
        } => load_raw_batches(path, *channels, *height, *width)?,
        ImageFormat::PngDir => load_png_dir(path)?,
    };
    if downsample > 1 {
        for e in &mut raw.examples {
            e.features = pool_channels(&e.features, downsample)?;
        }
    }
    let channels = raw
        .examples
        .first()
        .map(|e| e.features.shape()[0])
        .unwrap_or(0);
    let stats = match normalize {
        Some(s) => {
            if s.mean.len() != channels || s.std.len() != channels {
                return Err(PstError::Config(format!(
                    "normalization constants cover {} channels, data has {channels}",
                    s.mean.len()
                )));
            }
            s
        }
        None => compute_norm_stats(&raw, channels),
    };
    for e in &mut raw.examples {
        let shape = e.features.shape().to_vec();
        let spatial: usize = shape[1..].iter().product();
        let data = e.features.data_mut();
        for c in 0..channels {
            let m = stats.mean[c];
            let s = stats.std[c].max(1e-12);
            for v in &mut data[c * spatial..(c + 1) * spatial] {
                *v = (*v - m) / s;
            }
        }
    }
    Ok((raw, stats))
}

fn compute_norm_stats(data: &LabeledDataset, channels: usize) -> NormStats {
    let mut sum = vec![0.0; channels];
    let mut sumsq = vec![0.0; channels];
    let mut count = vec![0usize; channels];
    for e in &data.examples {
        let spatial: usize = e.features.shape()[1..].iter().product();
        for c in 0..channels {
            for v in &e.features.data()[c * spatial..(c + 1) * spatial] {
                sum[c] += v;
                sumsq[c] += v * v;
                count[c] += 1;
            }
        }
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, n)| if *n > 0 { s / *n as f64 } else { 0.0 })
        .collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&count)
        .zip(&mean)
        .map(|((sq, n), m)| {
            if *n > 0 {
                (sq / *n as f64 - m * m).max(0.0).sqrt().max(1e-12)
            } else {
                1.0
            }
        })
        .collect();
    NormStats { mean, std }
}

fn load_raw_batches(
    path: &Path,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let record = 1 + channels * height * width;
    if bytes.is_empty() || bytes.len() % record != 0 {
        let offset = (bytes.len() / record) * record;
        return Err(PstError::Parse {
            offset: offset as u64,
            msg: format!(
                "file length {} is not a multiple of the {record}-byte record",
                bytes.len()
            ),
        });
    }
    let mut out = LabeledDataset::default();
    for (idx, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[0] as usize;
        let pixels: Vec<f64> = rec[1..].iter().map(|b| *b as f64 / 255.0).collect();
        out.examples.push(Example {
            id: idx as u64,
            label,
            features: Tensor::new(vec![channels, height, width], pixels)?,
        });
    }
    Ok(out)
}

fn load_png_dir(manifest: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut out = LabeledDataset::default();
    let mut offset = 0u64;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header.trim() != "id,path,label" {
        return Err(PstError::Parse {
            offset: 0,
            msg: format!("manifest header must be 'id,path,label', got '{header}'"),
        });
    }
    offset += header.len() as u64 + 1;
    let mut any = false;
    for line in lines {
        let line_len = line.len() as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            offset += line_len;
            continue;
        }
        let parts: Vec<&str> = trimmed.split(',').collect();
        if parts.len() != 3 {
            return Err(PstError::Parse {
                offset,
                msg: format!("expected 'id,path,label', got '{trimmed}'"),
            });
        }
        let id: u64 = parts[0].trim().parse().map_err(|_| PstError::Parse {
            offset,
            msg: format!("id '{}' is not an unsigned integer", parts[0]),
        })?;
        let label: usize = parts[2].trim().parse().map_err(|_| PstError::Parse {
            offset,
            msg: format!("label '{}' is not an unsigned integer", parts[2]),
        })?;
        let img_path = dir.join(parts[1].trim());
        let img = image::open(&img_path).map_err(|e| PstError::Parse {
            offset,
            msg: format!("cannot decode '{}': {e}", img_path.display()),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        // channel-major f64 in [0,1]
        let mut pixels = vec![0.0; 3 * (w * h) as usize];
        for (x, y, p) in rgb.enumerate_pixels() {
            let base = (y * w + x) as usize;
            for c in 0..3 {
                pixels[c * (w * h) as usize + base] = p[c] as f64 / 255.0;
            }
        }
        out.examples.push(Example {
            id,
            label,
            features: Tensor::new(vec![3, h as usize, w as usize], pixels)?,
        });
        any = true;
        offset += line_len;
    }
    if !any {
        return Err(PstError::Parse {
            offset,
            msg: "manifest lists no images".into(),
        });
    }
    out.validate_unique_ids()?;
    Ok(out)
}

/// Mean-pools each channel down by `factor` in both spatial directions.
fn pool_channels(t: &Tensor, factor: usize) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(PstError::Dimension(format!(
            "downsampling needs [c, h, w] features, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(PstError::Config(format!(
            "downsample {factor} does not tile {h}x{w} images"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += t.data()[(ch * h + y * factor + dy) * w + x * factor + dx];
                    }
                }
                out[(ch * oh + y) * ow + x] = acc * norm;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}
