//! Datasets: the seeded mini-shapes generator and the CIFAR-10 binary
//! record format.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, CHANNELS};
use crate::rng::substream;

pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const RECORD_LEN: usize = 1 + PLANE * CHANNELS;

pub const MINISHAPES_CLASSES: [&str; 4] = ["rectangle", "plus", "stripes", "checkerboard"];
pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sample count {0} is not a positive multiple of 4")]
    BadCount(usize),
    #[error("file length {0} is not a positive multiple of {RECORD_LEN}")]
    BadLength(usize),
    #[error("record {record} has label {label}, expected 0-9")]
    BadLabel { record: usize, label: u8 },
    #[error("image {index} is not 32x32")]
    BadImage { index: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn draw_color<R: Rng>(rng: &mut R, lo: u8, hi: u8) -> [u8; 3] {
    [
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    ]
}

fn scaled(rng: &mut impl Rng, base: f64) -> i64 {
    (base * rng.random_range(0.75..=1.25)).round() as i64
}

/// Draws one mini-shapes image of class `class`.
pub fn draw_shape<R: Rng>(class: usize, rng: &mut R) -> Image {
    let fg = draw_color(rng, 96, 255);
    let bg = draw_color(rng, 0, 64);
    let cx = 16 + rng.random_range(-6i64..=6);
    let cy = 16 + rng.random_range(-6i64..=6);
    let mut img = Image::filled(SIDE, SIDE, bg);
    let mut paint = |x: i64, y: i64| {
        if (0..SIDE as i64).contains(&x) && (0..SIDE as i64).contains(&y) {
            img.put(x as usize, y as usize, fg);
        }
    };
    match class {
        0 => {
            let (hw, hh) = (scaled(rng, 7.0), scaled(rng, 5.0));
            for y in cy - hh..=cy + hh {
                for x in cx - hw..=cx + hw {
                    paint(x, y);
                }
            }
        }
        1 => {
            let arm = scaled(rng, 8.0);
            let half_thick = 1;
            for d in -arm..=arm {
                for t in -half_thick..=half_thick {
                    paint(cx + d, cy + t);
                    paint(cx + t, cy + d);
                }
            }
        }
        2 => {
            let half = scaled(rng, 8.0);
            for y in cy - half..cy + half {
                if (y - (cy - half)) % 4 < 2 {
                    for x in cx - half..cx + half {
                        paint(x, y);
                    }
                }
            }
        }
        3 => {
            let cell = scaled(rng, 4.0).max(2);
            let x0 = cx - 2 * cell;
            let y0 = cy - 2 * cell;
            for j in 0..4 {
                for i in 0..4 {
                    if (i + j) % 2 == 0 {
                        for y in 0..cell {
                            for x in 0..cell {
                                paint(x0 + i * cell + x, y0 + j * cell + y);
                            }
                        }
                    }
                }
            }
        }
        _ => panic!("mini-shapes has 4 classes, got {class}"),
    }
    img
}

fn shapes_split(seed: u64, n: usize, split: Split) -> Dataset {
    let tag = match split {
        Split::Train => "minishapes-train",
        Split::Test => "minishapes-test",
    };
    let mut labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    labels.shuffle(&mut substream(seed, tag, &[u64::MAX]));
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &class)| draw_shape(class, &mut substream(seed, tag, &[i as u64])))
        .collect();
    Dataset {
        images,
        labels,
        class_names: MINISHAPES_CLASSES.iter().map(|s| s.to_string()).collect(),
        split,
    }
}

/// Balanced 4-class synthetic dataset; train and test come from disjoint
/// substreams of `seed`.
pub fn generate_minishapes(
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<(Dataset, Dataset), DataError> {
    for n in [n_train, n_test] {
        if n == 0 || n % 4 != 0 {
            return Err(DataError::BadCount(n));
        }
    }
    Ok((
        shapes_split(seed, n_train, Split::Train),
        shapes_split(seed, n_test, Split::Test),
    ))
}

/// Parses CIFAR-10 binary records: a label byte followed by the R, G and B
/// planes, each 32x32 row-major.
pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset, DataError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(DataError::BadLength(bytes.len()));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (record, chunk) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(DataError::BadLabel { record, label });
        }
        let planes = &chunk[1..];
        let mut pixels = vec![0u8; PLANE * CHANNELS];
        for i in 0..PLANE {
            for c in 0..CHANNELS {
                pixels[i * CHANNELS + c] = planes[c * PLANE + i];
            }
        }
        images.push(Image::from_raw(SIDE, SIDE, pixels).expect("record has 32x32x3 bytes"));
        labels.push(label as usize);
    }
    Ok(Dataset {
        images,
        labels,
        class_names: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        split,
    })
}

pub fn read_cifar10_batch(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let split = match path.file_name().and_then(|n| n.to_str()) {
        Some(name) if name.starts_with("test") => Split::Test,
        _ => Split::Train,
    };
    parse_cifar10(&fs::read(path)?, split)
}

/// Encodes a dataset in the CIFAR-10 record layout.
pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(ds.len() * RECORD_LEN);
    for (index, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        if img.width() != SIDE || img.height() != SIDE {
            return Err(DataError::BadImage { index });
        }
        let label = u8::try_from(label)
            .ok()
            .filter(|&l| l <= 9)
            .ok_or(DataError::BadLabel { record: index, label: u8::MAX })?;
        out.push(label);
        for c in 0..CHANNELS {
            out.extend(img.pixels().iter().skip(c).step_by(CHANNELS));
        }
    }
    Ok(out)
}

pub fn write_cifar10(ds: &Dataset, mut w: impl Write) -> Result<(), DataError> {
    w.write_all(&encode_cifar10(ds)?)?;
    Ok(())
}
