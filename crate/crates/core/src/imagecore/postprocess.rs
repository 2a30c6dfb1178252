use serde::{Deserialize, Serialize};

use super::{DiffMap, Image, ImageError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub blur_sigma: f64,
    pub threshold: f64,
    pub open_radius: usize,
    pub min_area: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            threshold: 0.2,
            open_radius: 1,
            min_area: 9,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<(), ImageError> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(ImageError::InvalidParameter(format!(
                "threshold {} not in (0, 1]",
                self.threshold
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(ImageError::InvalidParameter(format!(
                "blur_sigma {} < 0",
                self.blur_sigma
            )));
        }
        if self.min_area < 1 {
            return Err(ImageError::InvalidParameter("min_area must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub centroid: [f64; 2],
    pub area: usize,
    /// Inclusive `[x0, y0, x1, y1]`.
    pub bbox: [usize; 4],
}

/// Binary labels plus the 8-connected blobs that partition the true pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMask {
    width: usize,
    height: usize,
    labels: Vec<bool>,
    blobs: Vec<Blob>,
}

impl DetectionMask {
    /// Labels pixels and extracts every connected component (min area 1).
    pub fn from_labels(width: usize, height: usize, labels: Vec<bool>) -> Result<Self, ImageError> {
        if labels.len() != width * height {
            return Err(ImageError::DataLength {
                expected: width * height,
                actual: labels.len(),
            });
        }
        let (_, blobs) = label_components(width, height, &labels);
        Ok(Self {
            width,
            height,
            labels,
            blobs,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![false; width * height],
            blobs: Vec::new(),
        }
    }

    /// Thresholds a single-channel image at 0.5 (0/255 mask PNG convention).
    pub fn from_image(img: &Image) -> Result<Self, ImageError> {
        let g = img.to_gray();
        let labels = g.data().iter().map(|v| *v >= 0.5).collect();
        Self::from_labels(g.width(), g.height(), labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn blobs(&self) -> &[Blob] {
        &self.blobs
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.labels[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn to_image(&self) -> Image {
        let data = self.labels.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        Image::new(self.width, self.height, 1, data).expect("mask shape is valid")
    }
}

/// Integer offsets `(dx, dy)` with `dx² + dy² <= r²`.
pub fn disc_offsets(radius: usize) -> Vec<(i32, i32)> {
    let r = radius as i32;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Separable Gaussian with radius `ceil(3 sigma)` and edge replication.
pub fn gaussian_blur(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i32;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        let row = &values[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wgt) in kernel.iter().enumerate() {
                let sx = (x as i32 + k as i32 - radius).clamp(0, width as i32 - 1) as usize;
                acc += wgt * row[sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wgt) in kernel.iter().enumerate() {
                let sy = (y as i32 + k as i32 - radius).clamp(0, height as i32 - 1) as usize;
                acc += wgt * tmp[sy * width + x];
            }
            out[y * width + x] = acc.max(0.0);
        }
    }
    out
}

fn erode(mask: &[bool], width: usize, height: usize, se: &[(i32, i32)]) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height as i32 {
        for x in 0..width as i32 {
            // Out-of-image samples count as background.
            out[y as usize * width + x as usize] = se.iter().all(|(dx, dy)| {
                let (sx, sy) = (x + dx, y + dy);
                sx >= 0
                    && sy >= 0
                    && (sx as usize) < width
                    && (sy as usize) < height
                    && mask[sy as usize * width + sx as usize]
            });
        }
    }
    out
}

fn dilate(mask: &[bool], width: usize, height: usize, se: &[(i32, i32)]) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height as i32 {
        for x in 0..width as i32 {
            if !mask[y as usize * width + x as usize] {
                continue;
            }
            for (dx, dy) in se {
                let (sx, sy) = (x + dx, y + dy);
                if sx >= 0 && sy >= 0 && (sx as usize) < width && (sy as usize) < height {
                    out[sy as usize * width + sx as usize] = true;
                }
            }
        }
    }
    out
}

/// Morphological opening with a rasterized disc of the given radius.
pub fn open_binary(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let se = disc_offsets(radius);
    dilate(&erode(mask, width, height, &se), width, height, &se)
}

/// 8-connected labeling. Returns per-pixel label (0 = background, blobs
/// numbered from 1 in raster order of first pixel) and the blob list.
pub fn label_components(width: usize, height: usize, mask: &[bool]) -> (Vec<u32>, Vec<Blob>) {
    let mut labels = vec![0u32; mask.len()];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let id = blobs.len() as u32 + 1;
        labels[start] = id;
        stack.push(start);
        let (mut sx, mut sy, mut area) = (0.0, 0.0, 0usize);
        let mut bbox = [usize::MAX, usize::MAX, 0, 0];
        while let Some(i) = stack.pop() {
            let (x, y) = (i % width, i / width);
            sx += x as f64;
            sy += y as f64;
            area += 1;
            bbox = [bbox[0].min(x), bbox[1].min(y), bbox[2].max(x), bbox[3].max(y)];
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (nx, ny) = (x as i32 + dx, y as i32 + dy);
                    if nx < 0 || ny < 0 || nx as usize >= width || ny as usize >= height {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        blobs.push(Blob {
            centroid: [sx / area as f64, sy / area as f64],
            area,
            bbox,
        });
    }
    (labels, blobs)
}

/// Gaussian blur, binarize (`value > threshold`), disc opening, 8-connected
/// labeling, then drop blobs smaller than `min_area`.
pub fn postprocess(diff: &DiffMap, cfg: &PostprocessConfig) -> Result<DetectionMask, ImageError> {
    cfg.validate()?;
    let (w, h) = (diff.width(), diff.height());
    let blurred = gaussian_blur(diff.values(), w, h, cfg.blur_sigma);
    let binary: Vec<bool> = blurred.iter().map(|v| *v > cfg.threshold).collect();
    let opened = open_binary(&binary, w, h, cfg.open_radius);
    let (labels, blobs) = label_components(w, h, &opened);
    let keep: Vec<bool> = blobs.iter().map(|b| b.area >= cfg.min_area).collect();
    let final_labels = labels.iter().map(|l| *l != 0 && keep[*l as usize - 1]).collect();
    let blobs = blobs
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(b, _)| b)
        .collect();
    Ok(DetectionMask {
        width: w,
        height: h,
        labels: final_labels,
        blobs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(blur_sigma: f64, threshold: f64, open_radius: usize, min_area: usize) -> PostprocessConfig {
        PostprocessConfig {
            blur_sigma,
            threshold,
            open_radius,
            min_area,
        }
    }

    fn block_map() -> DiffMap {
        let mut d = DiffMap::zeros(20, 20);
        for y in 8..13 {
            for x in 8..13 {
                d.set(x, y, 1.0);
            }
        }
        d
    }

    #[test]
    fn zero_map_is_empty() {
        let m = postprocess(&DiffMap::zeros(16, 16), &PostprocessConfig::default()).unwrap();
        assert_eq!(m.count(), 0);
        assert!(m.blobs().is_empty());
    }

    #[test]
    fn single_block_hand_executed() {
        // No blur: binarized 5x5 block. Opening by the radius-1 cross erodes
        // to the 3x3 interior and dilates back to the block minus 4 corners.
        let m = postprocess(&block_map(), &cfg(0.0, 0.5, 1, 4)).unwrap();
        assert_eq!(m.blobs().len(), 1);
        let b = &m.blobs()[0];
        assert_eq!(b.area, 21);
        assert_eq!(b.centroid, [10.0, 10.0]);
        assert_eq!(b.bbox, [8, 8, 12, 12]);
        assert!(!m.get(8, 8) && m.get(9, 8));
    }

    #[test]
    fn single_block_with_blur() {
        let m = postprocess(&block_map(), &cfg(1.0, 0.5, 1, 4)).unwrap();
        assert_eq!(m.blobs().len(), 1);
        let b = &m.blobs()[0];
        assert!(b.area >= 9);
        assert!((b.centroid[0] - 10.0).abs() < 1e-9 && (b.centroid[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn isolated_spikes_removed() {
        let mut d = DiffMap::zeros(16, 16);
        d.set(3, 3, 1.0);
        d.set(10, 12, 1.0);
        let m = postprocess(&d, &cfg(0.0, 0.5, 1, 4)).unwrap();
        assert!(m.blobs().is_empty());
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn area_filter_and_diagonal_connectivity() {
        let labels: Vec<bool> = (0..25).map(|i| i == 0 || i == 6 || i == 12 || i == 24).collect();
        let m = DetectionMask::from_labels(5, 5, labels).unwrap();
        // (0,0), (1,1), (2,2) touch diagonally; (4,4) is separate.
        assert_eq!(m.blobs().len(), 2);
        assert_eq!(m.blobs()[0].area, 3);
        assert_eq!(m.blobs()[1].area, 1);
    }

    #[test]
    fn validation() {
        let d = DiffMap::zeros(4, 4);
        assert!(postprocess(&d, &cfg(1.0, 0.0, 1, 1)).is_err());
        assert!(postprocess(&d, &cfg(1.0, 1.5, 1, 1)).is_err());
        assert!(postprocess(&d, &cfg(-1.0, 0.5, 1, 1)).is_err());
        assert!(postprocess(&d, &cfg(1.0, 0.5, 1, 0)).is_err());
        assert!(postprocess(&d, &cfg(1.0, 1.0, 1, 1)).is_ok());
    }

    #[test]
    fn disc_counts() {
        assert_eq!(disc_offsets(1).len(), 5);
        assert_eq!(disc_offsets(4).len(), 49);
    }

    fn diffmap() -> impl Strategy<Value = DiffMap> {
        (4usize..14, 4usize..14).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0.0f64..1.0, w * h).prop_map(move |v| DiffMap::new(w, h, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn monotone_in_threshold(d in diffmap(), t1 in 0.05f64..0.95, dt in 0.0f64..0.5, radius in 0usize..2, min_area in 1usize..6) {
            let t2 = (t1 + dt).min(1.0);
            let lo = postprocess(&d, &cfg(0.7, t1, radius, min_area)).unwrap();
            let hi = postprocess(&d, &cfg(0.7, t2, radius, min_area)).unwrap();
            for (a, b) in lo.labels().iter().zip(hi.labels()) {
                prop_assert!(!*b || *a);
            }
        }

        #[test]
        fn blobs_partition_true_pixels(d in diffmap(), t in 0.1f64..0.9, min_area in 1usize..5) {
            let m = postprocess(&d, &cfg(0.0, t, 0, min_area)).unwrap();
            let total: usize = m.blobs().iter().map(|b| b.area).sum();
            prop_assert_eq!(total, m.count());
            prop_assert!(m.blobs().iter().all(|b| b.area >= min_area));
        }
    }
}
