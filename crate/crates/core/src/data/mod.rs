//! Dataset ingestion, splitting, mixup and weighted oversampling.
//!
//! On disk a dataset is a UTF-8 CSV manifest with a header row and columns
//! `relative_path,label_name[,tag][,weight]`, next to P6 images.

pub mod augment;
pub mod ppm;
pub mod synthetic;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Beta;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{apply_policy, AugmentOp, AugmentPolicy, PolicyStep};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// 3×S×S, values in [0, 1].
    pub image: Tensor<T>,
    /// Probability vector over classes; one-hot for raw data.
    pub label: Vec<T>,
    /// Relative sampling weight, > 0.
    pub weight: f64,
    pub tag: Option<String>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(image: Tensor<T>, class: usize, num_classes: usize) -> Self {
        let mut label = vec![T::zero(); num_classes];
        label[class] = T::one();
        Sample { image, label, weight: 1.0, tag: None }
    }

    /// Index of the largest label entry (the true class for one-hot labels).
    pub fn class(&self) -> usize {
        argmax(&self.label)
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tag.as_deref() == Some(tag)
    }
}

pub(crate) fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
    pub class_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Common image side length; errors if images are not all S×S with 3 channels.
    pub fn image_size(&self) -> Result<usize> {
        let first = self.samples.first().ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let s = first.image.shape()[1];
        for (i, smp) in self.samples.iter().enumerate() {
            if smp.image.shape() != [3, s, s] {
                return Err(Error::Data(format!(
                    "sample {i} has shape {:?}, expected [3, {s}, {s}]",
                    smp.image.shape()
                )));
            }
        }
        Ok(s)
    }

    /// Sets `weight` on every sample tagged `tag`.
    pub fn weight_tagged(&mut self, tag: &str, weight: f64) -> Result<usize> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::InvalidArgument(format!("sample weight must be positive, got {weight}")));
        }
        let mut n = 0;
        for s in self.samples.iter_mut().filter(|s| s.has_tag(tag)) {
            s.weight = weight;
            n += 1;
        }
        Ok(n)
    }

    /// Stacks samples `indices` into a B×3×S×S batch and a B×K label matrix.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        stack(indices.iter().map(|&i| &self.samples[i]))
    }
}

pub(crate) fn stack<'a, T: Scalar + 'a>(
    samples: impl IntoIterator<Item = &'a Sample<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<(Vec<usize>, usize)> = None;
    let mut n = 0;
    for s in samples {
        match &shape {
            None => shape = Some((s.image.shape().to_vec(), s.label.len())),
            Some((sh, k)) if sh.as_slice() != s.image.shape() || *k != s.label.len() => {
                return Err(Error::shape("batch", "samples differ in image shape or class count"));
            }
            _ => {}
        }
        images.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.label);
        n += 1;
    }
    let (img_shape, k) = shape.ok_or_else(|| Error::shape("batch", "no samples"))?;
    let mut full = vec![n];
    full.extend(img_shape);
    Ok((Tensor::new(full, images)?, Tensor::new(vec![n, k], labels)?))
}

/// Reads a manifest and decodes every image it lists, in manifest order.
///
/// With `class_names` given, labels must come from that list (and its order
/// defines class indices); otherwise the sorted set of labels is used.
pub fn load_dataset<T: Scalar>(manifest: &Path, class_names: Option<&[String]>) -> Result<Dataset<T>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // header is line 1
        let record = record.map_err(|e| Error::Data(format!("manifest row {row}: {e}")))?;
        if record.len() < 2 || record.len() > 4 || record[0].is_empty() || record[1].is_empty() {
            return Err(Error::Data(format!(
                "manifest row {row}: expected `relative_path,label_name[,tag][,weight]`"
            )));
        }
        let tag = record.get(2).filter(|t| !t.is_empty()).map(str::to_owned);
        let weight = match record.get(3).filter(|w| !w.is_empty()) {
            None => 1.0,
            Some(w) => match w.parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => v,
                _ => return Err(Error::Data(format!("manifest row {row}: bad weight `{w}`"))),
            },
        };
        rows.push((row, record[0].to_owned(), record[1].to_owned(), tag, weight));
    }
    let names: Vec<String> = match class_names {
        Some(names) => names.to_vec(),
        None => {
            let mut set: Vec<String> = rows.iter().map(|r| r.2.clone()).collect();
            set.sort();
            set.dedup();
            set
        }
    };
    let mut samples = Vec::with_capacity(rows.len());
    for (row, rel, label, tag, weight) in rows {
        let class = names.iter().position(|n| *n == label).ok_or_else(|| {
            Error::Data(format!("manifest row {row}: label `{label}` is not in the class list"))
        })?;
        let path = base.join(&rel);
        if !path.is_file() {
            return Err(Error::Data(format!("manifest row {row}: missing image file {}", path.display())));
        }
        let image = ppm::read_ppm(&path)
            .map_err(|e| Error::Data(format!("manifest row {row} ({}): {e}", path.display())))?;
        let mut s = Sample::new(image, class, names.len());
        s.weight = weight;
        s.tag = tag;
        samples.push(s);
    }
    Ok(Dataset { samples, class_names: names })
}

/// Writes P6 images plus a manifest into `dir` (created if missing).
pub fn save_dataset<T: Scalar>(ds: &Dataset<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["relative_path", "label_name", "tag", "weight"])?;
    for (i, s) in ds.samples.iter().enumerate() {
        let name = format!("img_{i:05}.ppm");
        ppm::write_ppm(&dir.join(&name), &s.image)?;
        let weight = s.weight.to_string();
        w.write_record([name.as_str(), &ds.class_names[s.class()], s.tag.as_deref().unwrap_or(""), &weight])?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

/// Sends samples tagged with any of `holdout_tags` to validation, then shuffles
/// the rest with `seed` and puts the first `floor(n · train_fraction)` in train.
pub fn split_dataset<T: Scalar>(
    ds: &Dataset<T>,
    train_fraction: f64,
    seed: u64,
    holdout_tags: &HashSet<String>,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if ds.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let held = |s: &Sample<T>| s.tag.as_ref().is_some_and(|t| holdout_tags.contains(t));
    let mut forced = Vec::new();
    let mut rest = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if held(s) { forced.push(i) } else { rest.push(i) }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rest.shuffle(&mut rng);
    let n_train = (rest.len() as f64 * train_fraction).floor() as usize;
    let pick = |idx: &[usize]| Dataset {
        samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
        class_names: ds.class_names.clone(),
    };
    let mut val_idx = rest[n_train..].to_vec();
    val_idx.extend(forced);
    val_idx.sort_unstable();
    let mut train_idx = rest[..n_train].to_vec();
    train_idx.sort_unstable();
    Ok((pick(&train_idx), pick(&val_idx)))
}

/// Convex combination `λ·a + (1−λ)·b` of images and labels. The result keeps
/// `a`'s weight and tag.
pub fn mixup<T: Scalar>(a: &Sample<T>, b: &Sample<T>, lambda: f64) -> Result<Sample<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup lambda must be in [0, 1], got {lambda}")));
    }
    if a.image.shape() != b.image.shape() || a.label.len() != b.label.len() {
        return Err(Error::shape("mixup", "samples differ in image shape or class count"));
    }
    let (l, r) = (T::of(lambda), T::of(1.0 - lambda));
    let mix = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| l * p + r * q).collect::<Vec<T>>();
    Ok(Sample {
        image: Tensor::new(a.image.shape().to_vec(), mix(a.image.data(), b.image.data()))?,
        label: mix(&a.label, &b.label),
        weight: a.weight,
        tag: a.tag.clone(),
    })
}

/// Draws a mixup coefficient from Beta(α, α). α = 0 is the degenerate limit:
/// 0 or 1 with equal probability, i.e. no mixing.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if alpha == 0.0 {
        return Ok(if rng.random::<bool>() { 1.0 } else { 0.0 });
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// `epoch_length` indices drawn with replacement, with probability proportional
/// to each sample's weight.
pub fn weighted_sampler<T: Scalar>(ds: &Dataset<T>, epoch_length: usize, seed: u64) -> Result<Vec<usize>> {
    if ds.is_empty() {
        return Err(Error::Data("cannot sample from an empty dataset".into()));
    }
    if let Some((i, s)) = ds.samples.iter().enumerate().find(|(_, s)| !(s.weight > 0.0) || !s.weight.is_finite()) {
        return Err(Error::InvalidArgument(format!("sample {i} has non-positive weight {}", s.weight)));
    }
    let dist = WeightedIndex::new(ds.samples.iter().map(|s| s.weight))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..epoch_length).map(|_| dist.sample(&mut rng)).collect())
}
