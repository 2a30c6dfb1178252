use serde::{Deserialize, Serialize};

use super::ImageError;

/// Row-major raster of unit-interval intensities, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        if width == 0 || height == 0 {
            return Err(ImageError::Empty);
        }
        if data.len() != width * height * channels {
            return Err(ImageError::DataLength {
                expected: width * height * channels,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(ImageError::OutOfRange(*v));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image from arbitrary finite values, clamping into `[0, 1]`.
    pub fn from_clamped(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        let data = data
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { f64::NAN })
            .collect();
        Self::new(width, height, channels, data)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Clamps the new value into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let w = self.width;
        let ch = self.channels;
        self.data[(y * w + x) * ch + c] = v.clamp(0.0, 1.0);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            })
        }
    }

    /// Planar copy `[channel][y][x]`, the layout the networks consume.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, channels: usize, planar: &[f64]) -> Result<Self, ImageError> {
        let plane = width * height;
        if planar.len() != plane * channels {
            return Err(ImageError::DataLength {
                expected: plane * channels,
                actual: planar.len(),
            });
        }
        let mut data = vec![0.0; plane * channels];
        for c in 0..channels {
            for i in 0..plane {
                data[i * channels + c] = planar[c * plane + i];
            }
        }
        Self::from_clamped(width, height, channels, data)
    }

    /// Luma for 3-channel images, identity for grayscale.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Result<Image, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty);
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
                    let bottom = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
                    data.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
                }
            }
        }
        Image::new(width, height, self.channels, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel nonnegative difference field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DiffMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, ImageError> {
        if values.len() != width * height {
            return Err(ImageError::DataLength {
                expected: width * height,
                actual: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(ImageError::OutOfRange(*v));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        let w = self.width;
        self.values[y * w + x] = v.max(0.0);
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Rescales by `1 / scale` and clamps into `[0, 1]` for PNG export.
    pub fn to_image(&self, scale: f64) -> Image {
        let s = if scale > 0.0 { scale } else { 1.0 };
        let data = self.values.iter().map(|v| (v / s).clamp(0.0, 1.0)).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

/// `|candidate - reference|`, reduced across channels by per-pixel maximum.
pub fn abs_diff(candidate: &Image, reference: &Image) -> Result<DiffMap, ImageError> {
    candidate.check_same_shape(reference)?;
    let ch = candidate.channels();
    let values = candidate
        .data()
        .chunks_exact(ch)
        .zip(reference.data().chunks_exact(ch))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .collect();
    DiffMap::new(candidate.width(), candidate.height(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(matches!(Image::new(1, 1, 1, vec![1.5]), Err(ImageError::OutOfRange(_))));
        assert!(matches!(
            Image::new(2, 1, 1, vec![0.5]),
            Err(ImageError::DataLength { .. })
        ));
        assert!(matches!(
            Image::new(1, 1, 2, vec![0.5, 0.5]),
            Err(ImageError::Channels(2))
        ));
    }

    #[test]
    fn abs_diff_identical_is_zero() {
        let a = Image::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let d = abs_diff(&a, &a).unwrap();
        assert!(d.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn abs_diff_direct_value() {
        let a = Image::new(1, 1, 1, vec![0.8]).unwrap();
        let b = Image::new(1, 1, 1, vec![0.3]).unwrap();
        let d = abs_diff(&a, &b).unwrap();
        assert!((d.values()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn abs_diff_rgb_takes_channel_max() {
        let a = Image::new(1, 1, 3, vec![0.1, 0.9, 0.5]).unwrap();
        let b = Image::new(1, 1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        let d = abs_diff(&a, &b).unwrap();
        assert!((d.values()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn abs_diff_shape_mismatch() {
        let a = Image::filled(2, 2, 1, 0.0).unwrap();
        let b = Image::filled(3, 2, 1, 0.0).unwrap();
        assert!(matches!(abs_diff(&a, &b), Err(ImageError::ShapeMismatch { .. })));
    }

    #[test]
    fn planar_round_trip() {
        let a = Image::new(2, 1, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let p = a.to_planar();
        assert_eq!(p, vec![0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
        assert_eq!(Image::from_planar(2, 1, 3, &p).unwrap(), a);
    }

    fn image_pair() -> impl Strategy<Value = (Image, Image)> {
        (1usize..8, 1usize..8, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(w, h, c)| {
            let n = w * h * c;
            (
                proptest::collection::vec(0.0f64..=1.0, n),
                proptest::collection::vec(0.0f64..=1.0, n),
            )
                .prop_map(move |(a, b)| (Image::new(w, h, c, a).unwrap(), Image::new(w, h, c, b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn abs_diff_nonnegative_and_symmetric((a, b) in image_pair()) {
            let ab = abs_diff(&a, &b).unwrap();
            let ba = abs_diff(&b, &a).unwrap();
            prop_assert!(ab.values().iter().all(|v| *v >= 0.0));
            prop_assert_eq!(ab, ba);
        }
    }
}
