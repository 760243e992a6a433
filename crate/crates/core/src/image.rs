//! Fixed-size 8-bit RGB rasters and their float conversion.

use thiserror::Error;

pub const CHANNELS: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("pixel buffer has {actual} bytes, expected {expected} for {width}x{height} RGB")]
    BadLength {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
}

/// Row-major, interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        let expected = width * height * CHANNELS;
        if pixels.len() != expected {
            return Err(ImageError::BadLength {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * CHANNELS
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Applies `f` to every channel value.
    pub fn map_channels(&self, mut f: impl FnMut(u8) -> u8) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Inverse affine map: takes output coordinates `(x, y)` to source
/// coordinates `(a*x + b*y + c, d*x + e*y + f)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseMap(pub [f64; 6]);

impl InverseMap {
    pub const IDENTITY: InverseMap = InverseMap([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    /// Inverse of moving content by `(dx, dy)` pixels (right / down).
    pub fn translation(dx: f64, dy: f64) -> Self {
        InverseMap([1.0, 0.0, -dx, 0.0, 1.0, -dy])
    }

    /// Inverse of a rotation by `degrees` about `(cx, cy)`.
    ///
    /// Positive angles turn content counter-clockwise as displayed (y axis
    /// pointing down).
    pub fn rotation(degrees: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        // source = R(θ)·(p − center) + center, with R expressed in the y-down frame
        InverseMap([c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy])
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }
}

/// Nearest-neighbour resampling through an inverse map. Samples falling
/// outside the raster take `fill` on every channel.
pub fn affine_inverse_sample(img: &Image, map: &InverseMap, fill: u8) -> Image {
    let (w, h) = (img.width, img.height);
    let mut out = Image::filled(w, h, [fill; 3]);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map.apply(x as f64, y as f64);
            let (sx, sy) = (sx.round(), sy.round());
            if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
                out.put(x, y, img.get(sx as usize, sy as usize));
            }
        }
    }
    out
}

/// Channel-planar float image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    /// `CHANNELS` planes of `width * height` values, R then G then B.
    pub values: Vec<f64>,
}

pub fn normalize(img: &Image) -> FloatImage {
    let plane = img.width * img.height;
    let mut values = vec![0.0; plane * CHANNELS];
    for (i, px) in img.pixels.chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            values[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    FloatImage {
        width: img.width,
        height: img.height,
        values,
    }
}

/// Writes the normalized values of `img` into `out` (length `w*h*3`),
/// avoiding an allocation in training loops.
pub fn normalize_into(img: &Image, out: &mut [f64]) {
    let plane = img.width * img.height;
    debug_assert_eq!(out.len(), plane * CHANNELS);
    for (i, px) in img.pixels.chunks_exact(CHANNELS).enumerate() {
        for c in 0..CHANNELS {
            out[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
}

pub fn denormalize(img: &FloatImage) -> Image {
    let plane = img.width * img.height;
    let mut pixels = vec![0u8; plane * CHANNELS];
    for i in 0..plane {
        for c in 0..CHANNELS {
            let v = (img.values[c * plane + i] * 255.0).round().clamp(0.0, 255.0);
            pixels[i * CHANNELS + c] = v as u8;
        }
    }
    Image {
        width: img.width,
        height: img.height,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), w * h * 3)
                .prop_map(move |px| Image::from_raw(w, h, px).unwrap())
        })
    }

    #[test]
    fn from_raw_rejects_wrong_length() {
        assert!(matches!(
            Image::from_raw(2, 2, vec![0; 11]),
            Err(ImageError::BadLength { expected: 12, .. })
        ));
    }

    #[test]
    fn translation_fully_out_of_bounds_is_fill() {
        let img = Image::filled(5, 4, [200, 100, 50]);
        let out = affine_inverse_sample(&img, &InverseMap::translation(5.0, 0.0), 0);
        assert!(out.pixels().iter().all(|&v| v == 0));
    }

    #[test]
    fn translation_by_one_shifts_right() {
        let a = [10, 20, 30];
        let b = [40, 50, 60];
        let mut img = Image::new(2, 1);
        img.put(0, 0, a);
        img.put(1, 0, b);
        let out = affine_inverse_sample(&img, &InverseMap::translation(1.0, 0.0), 0);
        assert_eq!(out.get(0, 0), [0, 0, 0]);
        assert_eq!(out.get(1, 0), a);
    }

    #[test]
    fn normalize_known_values() {
        assert!(normalize(&Image::new(3, 3)).values.iter().all(|&v| v == 0.0));
        assert!(normalize(&Image::filled(3, 3, [255; 3]))
            .values
            .iter()
            .all(|&v| v == 1.0));
        let f = normalize(&Image::filled(1, 1, [128, 0, 0]));
        assert!((f.values[0] - 0.50196).abs() < 1e-5);
        assert_eq!(f.values[0], 128.0 / 255.0);
    }

    #[test]
    fn normalize_is_channel_planar() {
        let mut img = Image::new(2, 1);
        img.put(0, 0, [255, 0, 0]);
        img.put(1, 0, [0, 0, 255]);
        let f = normalize(&img);
        assert_eq!(f.values, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn identity_map_is_identity(img in arb_image(), fill in any::<u8>()) {
            prop_assert_eq!(affine_inverse_sample(&img, &InverseMap::IDENTITY, fill), img);
        }

        #[test]
        fn normalize_round_trips(img in arb_image()) {
            let back = denormalize(&normalize(&img));
            prop_assert_eq!(back, img);
        }

        #[test]
        fn resampling_preserves_dimensions(img in arb_image(), deg in -30.0f64..30.0) {
            let map = InverseMap::rotation(deg, 2.0, 2.0);
            let out = affine_inverse_sample(&img, &map, 0);
            prop_assert_eq!((out.width(), out.height()), (img.width(), img.height()));
        }
    }
}
