use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DetectionMask, Image, ImageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectShape {
    Disc,
    Rectangle,
    Scratch,
}

/// Synthetic defect. `size` is the disc radius, the rectangle half-width,
/// or the scratch half-length. The seed drives the rectangle aspect ratio
/// and the scratch orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub shape: DefectShape,
    pub center: (i64, i64),
    pub size: u32,
    pub intensity_delta: f64,
    pub seed: u64,
}

impl DefectSpec {
    /// Signed pixel coordinates covered by the defect.
    pub fn footprint(&self) -> Vec<(i64, i64)> {
        let (cx, cy) = self.center;
        let r = self.size as i64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::new();
        match self.shape {
            DefectShape::Disc => {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx * dx + dy * dy <= r * r {
                            out.push((cx + dx, cy + dy));
                        }
                    }
                }
            }
            DefectShape::Rectangle => {
                let aspect: f64 = rng.random_range(0.5..=1.0);
                let hh = ((r as f64 * aspect).round() as i64).max(1);
                for dy in -hh..=hh {
                    for dx in -r..=r {
                        out.push((cx + dx, cy + dy));
                    }
                }
            }
            DefectShape::Scratch => {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let (ux, uy) = (angle.cos(), angle.sin());
                let half = r as f64;
                for dy in -r - 1..=r + 1 {
                    for dx in -r - 1..=r + 1 {
                        let (px, py) = (dx as f64, dy as f64);
                        let t = (px * ux + py * uy).clamp(-half, half);
                        let (qx, qy) = (px - t * ux, py - t * uy);
                        if qx * qx + qy * qy <= 1.0 {
                            out.push((cx + dx, cy + dy));
                        }
                    }
                }
            }
        }
        out
    }

    /// Largest distance from the center to any footprint pixel along an axis.
    pub fn extent(&self) -> i64 {
        self.size as i64 + 1
    }
}

/// Adds `intensity_delta` (clamped) over the footprint. The truth mask marks
/// exactly the footprint, even when the delta is zero.
pub fn inject_defect(clean: &Image, spec: &DefectSpec) -> Result<(Image, DetectionMask), ImageError> {
    if !(-1.0..=1.0).contains(&spec.intensity_delta) {
        return Err(ImageError::InvalidParameter(format!(
            "intensity delta {} outside [-1, 1]",
            spec.intensity_delta
        )));
    }
    let (w, h, c) = clean.shape();
    let footprint = spec.footprint();
    if let Some((x, y)) = footprint
        .iter()
        .find(|(x, y)| *x < 0 || *y < 0 || *x >= w as i64 || *y >= h as i64)
    {
        return Err(ImageError::OutOfBounds(format!(
            "pixel ({x}, {y}) outside {w}x{h} image"
        )));
    }
    let mut out = clean.clone();
    let mut labels = vec![false; w * h];
    for (x, y) in footprint {
        let (x, y) = (x as usize, y as usize);
        labels[y * w + x] = true;
        for ch in 0..c {
            out.set(x, y, ch, clean.get(x, y, ch) + spec.intensity_delta);
        }
    }
    Ok((out, DetectionMask::from_labels(w, h, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::abs_diff;

    fn gray(w: usize, h: usize) -> Image {
        Image::filled(w, h, 1, 0.5).unwrap()
    }

    fn disc(cx: i64, cy: i64, r: u32, delta: f64) -> DefectSpec {
        DefectSpec {
            shape: DefectShape::Disc,
            center: (cx, cy),
            size: r,
            intensity_delta: delta,
            seed: 3,
        }
    }

    #[test]
    fn zero_delta_keeps_image_marks_footprint() {
        let clean = gray(16, 16);
        let (d, truth) = inject_defect(&clean, &disc(8, 8, 3, 0.0)).unwrap();
        assert_eq!(d, clean);
        assert_eq!(truth.count(), 29);
    }

    #[test]
    fn disc_radius_four_pixel_count() {
        // Brute-force count of integer points with distance <= 4.
        let oracle = (-4i64..=4)
            .flat_map(|y| (-4i64..=4).map(move |x| (x, y)))
            .filter(|(x, y)| ((x * x + y * y) as f64).sqrt() <= 4.0)
            .count();
        let clean = gray(32, 32);
        let (d, truth) = inject_defect(&clean, &disc(16, 16, 4, 0.4)).unwrap();
        assert_eq!(truth.count(), oracle);
        assert_eq!(truth.count(), 49);
        assert_eq!(truth.blobs().len(), 1);
        assert!((d.get(16, 16, 0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn deterministic_for_all_shapes() {
        let clean = gray(40, 40);
        for shape in [DefectShape::Disc, DefectShape::Rectangle, DefectShape::Scratch] {
            let spec = DefectSpec {
                shape,
                center: (20, 20),
                size: 6,
                intensity_delta: -0.3,
                seed: 17,
            };
            let a = inject_defect(&clean, &spec).unwrap();
            let b = inject_defect(&clean, &spec).unwrap();
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
            assert_eq!(a.1.blobs().len(), 1, "{shape:?} footprint is connected");
        }
    }

    #[test]
    fn out_of_bounds_rejected() {
        let clean = gray(16, 16);
        assert!(matches!(
            inject_defect(&clean, &disc(2, 8, 4, 0.4)),
            Err(ImageError::OutOfBounds(_))
        ));
        assert!(inject_defect(&clean, &disc(8, 8, 2, 1.5)).is_err());
    }

    #[test]
    fn diff_support_equals_footprint() {
        let clean = gray(24, 24);
        let (d, truth) = inject_defect(&clean, &disc(12, 12, 5, 0.3)).unwrap();
        let diff = abs_diff(&d, &clean).unwrap();
        for (v, t) in diff.values().iter().zip(truth.labels()) {
            assert_eq!(*v > 0.0, *t);
        }
    }
}
