//! The twelve augmentation operators and seeded policy application.
//!
//! Every operator takes an intensity inside its declared range. Geometric
//! operators resample with nearest-neighbour lookups and a black fill; the
//! enhancement operators blend against a degenerate image (gray, mean gray,
//! blurred, black) and clamp back into bytes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{affine_inverse_sample, Image, InverseMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    HorizontalFlip,
    VerticalFlip,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Color,
    Solarize,
    Contrast,
    Sharpness,
    Brightness,
}

/// Closed interval of legal intensities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityRange {
    pub min: f64,
    pub max: f64,
}

impl IntensityRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

impl fmt::Display for IntensityRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.min, self.max)
    }
}

impl Operator {
    pub const ALL: [Operator; 12] = [
        Operator::HorizontalFlip,
        Operator::VerticalFlip,
        Operator::ShearX,
        Operator::ShearY,
        Operator::TranslateX,
        Operator::TranslateY,
        Operator::Rotate,
        Operator::Color,
        Operator::Solarize,
        Operator::Contrast,
        Operator::Sharpness,
        Operator::Brightness,
    ];

    pub const COUNT: usize = 12;

    pub fn name(self) -> &'static str {
        match self {
            Operator::HorizontalFlip => "HorizontalFlip",
            Operator::VerticalFlip => "VerticalFlip",
            Operator::ShearX => "ShearX",
            Operator::ShearY => "ShearY",
            Operator::TranslateX => "TranslateX",
            Operator::TranslateY => "TranslateY",
            Operator::Rotate => "Rotate",
            Operator::Color => "Color",
            Operator::Solarize => "Solarize",
            Operator::Contrast => "Contrast",
            Operator::Sharpness => "Sharpness",
            Operator::Brightness => "Brightness",
        }
    }

    /// Position in [`Operator::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn range(self) -> IntensityRange {
        match self {
            Operator::HorizontalFlip | Operator::VerticalFlip | Operator::Solarize => {
                IntensityRange::new(0.0, 1.0)
            }
            Operator::ShearX | Operator::ShearY => IntensityRange::new(0.0, 0.3),
            Operator::TranslateX | Operator::TranslateY => IntensityRange::new(0.0, 14.0),
            Operator::Rotate => IntensityRange::new(-30.0, 30.0),
            Operator::Color | Operator::Contrast | Operator::Sharpness | Operator::Brightness => {
                IntensityRange::new(0.1, 1.9)
            }
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown augmentation operator `{0}`")]
pub struct UnknownOperator(pub String);

impl FromStr for Operator {
    type Err = UnknownOperator;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Operator::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownOperator(s.to_string()))
    }
}

/// One `(operator, intensity)` pair of a policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gene {
    pub op: Operator,
    pub intensity: f64,
}

impl Gene {
    pub fn new(op: Operator, intensity: f64) -> Self {
        Self { op, intensity }
    }

    pub fn is_in_range(&self) -> bool {
        self.op.range().contains(self.intensity)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AugmentError {
    #[error("operator {0} appears more than once in the policy")]
    DuplicateOperator(Operator),
}

#[inline]
fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[inline]
fn luma(px: [u8; 3]) -> f64 {
    0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2])
}

fn flip_horizontal(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.put(x, y, img.get(w - 1 - x, y));
        }
    }
    out
}

fn flip_vertical(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.put(x, y, img.get(x, h - 1 - y));
        }
    }
    out
}

/// Per-channel blend `degenerate + f·(orig − degenerate)`.
fn blend(img: &Image, degenerate: &[f64], factor: f64) -> Image {
    let mut out = img.clone();
    for (o, (&v, &d)) in out
        .pixels_mut()
        .iter_mut()
        .zip(img.pixels().iter().zip(degenerate))
    {
        *o = to_byte(d + factor * (f64::from(v) - d));
    }
    out
}

fn color(img: &Image, factor: f64) -> Image {
    let degenerate: Vec<f64> = img
        .pixels()
        .chunks_exact(3)
        .flat_map(|px| {
            let g = luma([px[0], px[1], px[2]]);
            [g, g, g]
        })
        .collect();
    blend(img, &degenerate, factor)
}

fn contrast(img: &Image, factor: f64) -> Image {
    let n = (img.width() * img.height()).max(1) as f64;
    let mean = img
        .pixels()
        .chunks_exact(3)
        .map(|px| luma([px[0], px[1], px[2]]))
        .sum::<f64>()
        / n;
    let degenerate = vec![mean; img.pixels().len()];
    blend(img, &degenerate, factor)
}

fn sharpness(img: &Image, factor: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut smooth: Vec<f64> = img.pixels().iter().map(|&v| f64::from(v)).collect();
    if w >= 3 && h >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let weight = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                            acc += weight * f64::from(img.get(x + dx - 1, y + dy - 1)[c]);
                        }
                    }
                    smooth[(y * w + x) * 3 + c] = acc / 13.0;
                }
            }
        }
    }
    blend(img, &smooth, factor)
}

/// Applies one gene. Only the flips consume a draw from `rng`.
pub fn apply<R: Rng + ?Sized>(gene: &Gene, img: &Image, rng: &mut R) -> Image {
    let v = gene.intensity;
    let (w, h) = (img.width() as f64, img.height() as f64);
    match gene.op {
        Operator::HorizontalFlip => {
            if rng.random::<f64>() < v {
                flip_horizontal(img)
            } else {
                img.clone()
            }
        }
        Operator::VerticalFlip => {
            if rng.random::<f64>() < v {
                flip_vertical(img)
            } else {
                img.clone()
            }
        }
        Operator::ShearX => {
            affine_inverse_sample(img, &InverseMap([1.0, -v, 0.0, 0.0, 1.0, 0.0]), 0)
        }
        Operator::ShearY => {
            affine_inverse_sample(img, &InverseMap([1.0, 0.0, 0.0, -v, 1.0, 0.0]), 0)
        }
        Operator::TranslateX => {
            affine_inverse_sample(img, &InverseMap::translation(v.round(), 0.0), 0)
        }
        Operator::TranslateY => {
            affine_inverse_sample(img, &InverseMap::translation(0.0, v.round()), 0)
        }
        Operator::Rotate => {
            let map = InverseMap::rotation(v, (w - 1.0) / 2.0, (h - 1.0) / 2.0);
            affine_inverse_sample(img, &map, 0)
        }
        Operator::Color => color(img, v),
        Operator::Solarize => {
            let threshold = (v * 255.0).round() as u16;
            img.map_channels(|c| if u16::from(c) >= threshold { 255 - c } else { c })
        }
        Operator::Contrast => contrast(img, v),
        Operator::Sharpness => sharpness(img, v),
        Operator::Brightness => img.map_channels(|c| to_byte(v * f64::from(c))),
    }
}

/// Rejects policies that name an operator twice.
pub fn check_unique(policy: &[Gene]) -> Result<(), AugmentError> {
    let mut seen = [false; Operator::COUNT];
    for g in policy {
        if std::mem::replace(&mut seen[g.op.index()], true) {
            return Err(AugmentError::DuplicateOperator(g.op));
        }
    }
    Ok(())
}

/// Applies genes left to right, sharing one stream.
pub fn apply_policy<R: Rng + ?Sized>(
    policy: &[Gene],
    img: &Image,
    rng: &mut R,
) -> Result<Image, AugmentError> {
    check_unique(policy)?;
    let mut out = img.clone();
    for gene in policy {
        out = apply(gene, &out, rng);
    }
    Ok(out)
}
