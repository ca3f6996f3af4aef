//! Labelled image datasets: CIFAR-10 binary batches and a synthetic
//! fractal classification task.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ifs::{hue_to_rgb, iterate_ifs, render, CodePool, IfsCode, RgbImage, SamplingConfig};
use crate::nn::Tensor;
use crate::seed::{derive_rng, stream};
use crate::{Error, Result};

/// Images stored normalised as `[N, 3, H, W]`, with the statistics used.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl LabeledDataset {
    /// Builds a dataset from raw `[0, 1]` images and normalises it.
    pub fn from_raw(images: Tensor, labels: Vec<usize>, classes: usize, mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "expected [N, 3, H, W] images for {} labels, got {shape:?}",
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} at item {i} ≥ class count {classes}"
            )));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("non-positive std {std:?}")));
        }
        let mut images = images;
        let plane = shape[2] * shape[3];
        for (j, v) in images.data_mut().iter_mut().enumerate() {
            let c = (j / plane) % 3;
            *v = (*v - mean[c]) / std[c];
        }
        Ok(LabeledDataset {
            images,
            labels,
            classes,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[3, H, W]`
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Images and labels of the given items, in the given order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (images, labels) = self.batch(indices);
        LabeledDataset {
            images,
            labels,
            classes: self.classes,
            mean: self.mean,
            std: self.std,
        }
    }
}

/// Per-channel mean and std of raw `[N, 3, H, W]` images.
pub fn channel_stats(images: &Tensor) -> ([f64; 3], [f64; 3]) {
    let shape = images.shape();
    let plane = shape[2] * shape[3];
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for (j, &v) in images.data().iter().enumerate() {
        let c = (j / plane) % 3;
        sum[c] += v;
        sq[c] += v * v;
    }
    let n = (shape[0] * plane).max(1) as f64;
    let mut mean = [0.0; 3];
    let mut std = [1.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n;
        let var = sq[c] / n - mean[c] * mean[c];
        if var > 1e-12 {
            std[c] = var.sqrt();
        }
    }
    (mean, std)
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Raw `[N, 3, 32, 32]` images in `[0, 1]` and labels.
pub fn parse_cifar10_records(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let rem = bytes.len() % CIFAR_RECORD;
    if rem != 0 {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            offset: (bytes.len() - rem) as u64,
            reason: format!("trailing {rem} bytes do not form a {CIFAR_RECORD}-byte record"),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                offset: (i * CIFAR_RECORD) as u64,
                reason: format!("label {} > 9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((images, labels))
}

fn read_cifar_file(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = CIFAR_RECORDS_PER_FILE * CIFAR_RECORD;
    if bytes.len() != expected {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected) as u64,
            reason: format!("file has {} bytes, expected {expected}", bytes.len()),
        });
    }
    parse_cifar10_records(&bytes, path)
}

#[derive(Clone, Debug)]
pub struct TrainTest {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Loads the five training batches and the test batch. Both splits are
/// normalised with training-set channel statistics.
pub fn load_cifar10_binary(dir: &Path) -> Result<TrainTest> {
    let mut train_px = Vec::new();
    let mut train_labels = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        let (px, l) = read_cifar_file(&dir.join(f))?;
        train_px.extend(px);
        train_labels.extend(l);
    }
    let (test_px, test_labels) = read_cifar_file(&dir.join(CIFAR_TEST_FILE))?;
    let train_images = Tensor::new(vec![train_labels.len(), 3, 32, 32], train_px)?;
    let test_images = Tensor::new(vec![test_labels.len(), 3, 32, 32], test_px)?;
    let (mean, std) = channel_stats(&train_images);
    Ok(TrainTest {
        train: LabeledDataset::from_raw(train_images, train_labels, 10, mean, std)?,
        test: LabeledDataset::from_raw(test_images, test_labels, 10, mean, std)?,
    })
}

/// Synthetic classification: class `c` is fractal code `c` of a seeded pool,
/// re-rendered per item with a random scale, hue, position and flip, then
/// corrupted with pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub side: usize,
    pub n_iters: usize,
    pub scale_range: (f64, f64),
    /// Std of additive Gaussian pixel noise.
    pub noise: f64,
    /// Probability of pasting an extra fractal from a distractor code.
    pub distractor_prob: f64,
    pub code_seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            classes: 4,
            train_per_class: 250,
            test_per_class: 100,
            side: 16,
            n_iters: 400,
            scale_range: (0.5, 1.0),
            noise: 0.15,
            distractor_prob: 0.5,
            code_seed: 1,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.side < 4 || self.n_iters == 0 {
            return Err(Error::InvalidArgument(format!(
                "toy dataset needs ≥ 2 classes, side ≥ 4 and ≥ 1 iteration, got {self:?}"
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) || !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.distractor_prob)
        {
            return Err(Error::InvalidArgument(format!("bad toy dataset parameters {self:?}")));
        }
        Ok(())
    }

    /// Class codes followed by one distractor code per class.
    fn codes(&self) -> Result<CodePool> {
        CodePool::generate(
            crate::seed::mix(self.code_seed, &[stream::TOY_CODES]),
            2 * self.classes,
            &SamplingConfig::default(),
        )
    }
}

fn paste_fractal(
    canvas: &mut RgbImage,
    code: &IfsCode,
    spec: &ToyDatasetSpec,
    rng: &mut crate::seed::Rng,
) -> Result<()> {
    let side = spec.side;
    let points = iterate_ifs(code, spec.n_iters, rng)?;
    let scale = rng.random_range(spec.scale_range.0..=spec.scale_range.1);
    let t = ((scale * side as f64).round() as usize).clamp(1, side);
    let gray = render(&points, t, t)?;
    let color = hue_to_rgb(rng.random::<f64>());
    let mut tile = RgbImage::black(t, t);
    for (px, &v) in tile.data.chunks_exact_mut(3).zip(&gray.values) {
        for c in 0..3 {
            px[c] = color[c] * v as f32;
        }
    }
    if rng.random_bool(0.5) {
        tile.flip_horizontal();
    }
    let x = rng.random_range(0..=side - t);
    let y = rng.random_range(0..=side - t);
    canvas.paste_max(&tile, x, y);
    Ok(())
}

fn toy_items(
    spec: &ToyDatasetSpec,
    pool: &CodePool,
    per_class: usize,
    seed: u64,
    split: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let n = spec.classes * per_class;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let items = (0..n)
        .into_par_iter()
        .map(|i| {
            let label = i % spec.classes;
            let mut rng = derive_rng(seed, &[split, i as u64]);
            let mut canvas = RgbImage::black(spec.side, spec.side);
            if rng.random_bool(spec.distractor_prob) {
                let d = spec.classes + rng.random_range(0..spec.classes);
                paste_fractal(&mut canvas, &pool.codes[d], spec, &mut rng)?;
            }
            paste_fractal(&mut canvas, &pool.codes[label], spec, &mut rng)?;
            let mut chw = canvas.to_chw(&[0.0; 3], &[1.0; 3]);
            if spec.noise > 0.0 {
                for v in chw.iter_mut() {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            Ok((chw, label))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(n * 3 * spec.side * spec.side);
    let mut labels = Vec::with_capacity(n);
    for (chw, l) in items {
        data.extend(chw);
        labels.push(l);
    }
    Ok((Tensor::new(vec![n, 3, spec.side, spec.side], data)?, labels))
}

/// Balanced train and test splits, both normalised with training statistics.
/// Items interleave classes (`label = index mod C`). Everything derives from
/// `spec.code_seed` (class codes) and `seed` (per-item realisations).
pub fn make_toy_dataset(spec: &ToyDatasetSpec, seed: u64) -> Result<TrainTest> {
    spec.validate()?;
    let pool = spec.codes()?;
    let (train_raw, train_labels) = toy_items(spec, &pool, spec.train_per_class, seed, stream::TOY_TRAIN)?;
    let (test_raw, test_labels) = toy_items(spec, &pool, spec.test_per_class, seed, stream::TOY_TEST)?;
    let (mean, std) = channel_stats(&train_raw);
    Ok(TrainTest {
        train: LabeledDataset::from_raw(train_raw, train_labels, spec.classes, mean, std)?,
        test: LabeledDataset::from_raw(test_raw, test_labels, spec.classes, mean, std)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_record_arithmetic() {
        let mut bytes = vec![0u8; 3 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 7;
        bytes[CIFAR_RECORD + 1] = 255;
        let (px, labels) = parse_cifar10_records(&bytes, Path::new("x")).unwrap();
        assert_eq!(labels, vec![0, 7, 0]);
        assert_eq!(px.len(), 3 * 3072);
        assert!(px[..3072].iter().all(|&v| v == 0.0));
        assert_eq!(px[3072], 1.0);
    }

    #[test]
    fn cifar_rejects_bad_label_and_length() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 10;
        match parse_cifar10_records(&bytes, Path::new("x")) {
            Err(Error::Dataset { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        match parse_cifar10_records(&bytes[..CIFAR_RECORD + 5], Path::new("x")) {
            Err(Error::Dataset { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn toy_is_balanced_and_deterministic() {
        let spec = ToyDatasetSpec {
            classes: 2,
            train_per_class: 10,
            test_per_class: 3,
            ..ToyDatasetSpec::default()
        };
        let a = make_toy_dataset(&spec, 9).unwrap();
        let b = make_toy_dataset(&spec, 9).unwrap();
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.train.class_histogram(), vec![10, 10]);
        assert_eq!(a.test.class_histogram(), vec![3, 3]);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = make_toy_dataset(&spec, 10).unwrap();
        assert_ne!(a.train.images, c.train.images);
    }

    #[test]
    fn normalisation_centres_training_channels() {
        let t = make_toy_dataset(
            &ToyDatasetSpec {
                train_per_class: 20,
                test_per_class: 2,
                ..ToyDatasetSpec::default()
            },
            3,
        )
        .unwrap();
        let (mean, std) = channel_stats(&t.train.images);
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-9);
            assert!((std[c] - 1.0).abs() < 1e-9);
        }
    }
}
