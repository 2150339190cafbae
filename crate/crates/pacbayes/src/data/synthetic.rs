//! Deterministic ten-class image generator, written as genuine IDX files.
//!
//! Each class is a smooth random prototype; samples are shifted copies with
//! pixel noise. The files go through the same parser and variant transforms
//! as the canonical corpus, so the full pipeline can run end to end on a
//! machine that has no MNIST checkout.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::idx::{encode_idx, IdxTensor};
use crate::data::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use crate::error::Result;
use crate::rng::{purpose, stream};

const SIDE: usize = 28;
const CLASSES: usize = 10;
const COARSE: usize = 7;
/// Maximum absolute shift applied to a sample, in pixels.
const MAX_SHIFT: i64 = 1;
/// Pixel noise standard deviation, in byte units.
const NOISE_SD: f64 = 12.0;

/// Ten smooth prototypes: coarse random grids upsampled and blurred.
fn prototypes(seed: u64) -> Vec<[f64; SIDE * SIDE]> {
    let mut rng = stream(seed, &[purpose::DATA_SYNTH, 0]);
    (0..CLASSES)
        .map(|_| {
            let coarse: Vec<f64> = (0..COARSE * COARSE)
                .map(|_| rng.random_range(0.0..255.0))
                .collect();
            // Nearest-neighbor upsample to 28x28.
            let mut img = [0.0f64; SIDE * SIDE];
            for r in 0..SIDE {
                for c in 0..SIDE {
                    let cr = (r * COARSE / SIDE).min(COARSE - 1);
                    let cc = (c * COARSE / SIDE).min(COARSE - 1);
                    img[r * SIDE + c] = coarse[cr * COARSE + cc];
                }
            }
            // Two passes of 5x5 mean blur smooth the block edges out.
            for _ in 0..2 {
                let mut blurred = [0.0f64; SIDE * SIDE];
                for r in 0..SIDE {
                    for c in 0..SIDE {
                        let mut sum = 0.0;
                        let mut count = 0.0;
                        for dr in -2i64..=2 {
                            for dc in -2i64..=2 {
                                let rr = r as i64 + dr;
                                let cc = c as i64 + dc;
                                if (0..SIDE as i64).contains(&rr) && (0..SIDE as i64).contains(&cc)
                                {
                                    sum += img[rr as usize * SIDE + cc as usize];
                                    count += 1.0;
                                }
                            }
                        }
                        blurred[r * SIDE + c] = sum / count;
                    }
                }
                img = blurred;
            }
            // Stretch back to the full byte range; blurring compresses the
            // contrast and classes would drift together otherwise.
            let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1.0);
            for v in img.iter_mut() {
                *v = (*v - lo) / span * 255.0;
            }
            img
        })
        .collect()
}

/// Generates `n` labeled images, labels cycling through the ten classes in a
/// seeded random order per block of ten.
pub fn synthetic_digits(n: usize, seed: u64, split_tag: u64) -> (Vec<u8>, Vec<u8>) {
    let protos = prototypes(seed);
    let mut rng = stream(seed, &[purpose::DATA_SYNTH, split_tag]);
    let mut images = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % CLASSES) as u8;
        let proto = &protos[label as usize];
        let dr = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
        let dc = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
        for r in 0..SIDE {
            for c in 0..SIDE {
                let sr = r as i64 - dr;
                let sc = c as i64 - dc;
                let base = if (0..SIDE as i64).contains(&sr) && (0..SIDE as i64).contains(&sc) {
                    proto[sr as usize * SIDE + sc as usize]
                } else {
                    0.0
                };
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = (base + NOISE_SD * noise).clamp(0.0, 255.0);
                images.push(v as u8);
            }
        }
        labels.push(label);
    }
    (images, labels)
}

/// Writes train and test splits under the canonical IDX file names.
pub fn write_synthetic_mnist(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (train_images, train_labels) = synthetic_digits(n_train, seed, 1);
    let (test_images, test_labels) = synthetic_digits(n_test, seed, 2);
    let write = |name: &str, tensor: IdxTensor| -> Result<()> {
        std::fs::write(dir.join(name), encode_idx(&tensor)?)?;
        Ok(())
    };
    write(
        TRAIN_IMAGES,
        IdxTensor {
            dims: vec![n_train, SIDE, SIDE],
            data: train_images,
        },
    )?;
    write(
        TRAIN_LABELS,
        IdxTensor {
            dims: vec![n_train],
            data: train_labels,
        },
    )?;
    write(
        TEST_IMAGES,
        IdxTensor {
            dims: vec![n_test, SIDE, SIDE],
            data: test_images,
        },
    )?;
    write(
        TEST_LABELS,
        IdxTensor {
            dims: vec![n_test],
            data: test_labels,
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_mnist_dir, DatasetVariant, VariantKind};

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let (a_img, a_lab) = synthetic_digits(50, 9, 1);
        let (b_img, b_lab) = synthetic_digits(50, 9, 1);
        assert_eq!(a_img, b_img);
        assert_eq!(a_lab, b_lab);
        let (c_img, _) = synthetic_digits(50, 9, 2);
        assert_ne!(a_img, c_img);
        for class in 0..10u8 {
            assert_eq!(a_lab.iter().filter(|l| **l == class).count(), 5);
        }
    }

    #[test]
    fn written_files_load_through_the_idx_path() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_mnist(dir.path(), 40, 20, 5).unwrap();
        let variant = DatasetVariant {
            kind: VariantKind::Binary,
            half: true,
        };
        let (train, test) = load_mnist_dir(dir.path(), variant).unwrap();
        assert_eq!(train.n(), 20); // halving applies to the train split
        assert_eq!(test.n(), 20);
        assert_eq!(train.d(), 784);
        assert_eq!(train.k, 2);
        assert!(train.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
        let small = DatasetVariant {
            kind: VariantKind::Mnist14,
            half: false,
        };
        let (train14, _) = load_mnist_dir(dir.path(), small).unwrap();
        assert_eq!(train14.d(), 196);
        assert_eq!(train14.k, 10);
    }

    #[test]
    fn classes_are_visually_distinct() {
        // Mean inter-class L2 distance should dwarf the within-class spread.
        let (images, labels) = synthetic_digits(100, 3, 1);
        let img = |i: usize| &images[i * 784..(i + 1) * 784];
        let dist = |a: &[u8], b: &[u8]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = *x as f64 - *y as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        // Same class: samples 0 and 10 share label 0; different: 0 and 1.
        assert_eq!(labels[0], labels[10]);
        assert_ne!(labels[0], labels[1]);
        let within = dist(img(0), img(10));
        let between = dist(img(0), img(1));
        assert!(between > 1.5 * within, "between {between} within {within}");
    }
}
