//! Procedural SEM-like textures. Rendering is a pure function of pixel
//! coordinates, so a translated rendering is exactly a shifted copy.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Stripes,
    Blobs,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Stripes {
        angle: f64,
        period: f64,
        phase: f64,
        base: f64,
        amplitude: f64,
    },
    Blobs {
        base: f64,
        /// `(x, y, sigma, amplitude)`
        blobs: Vec<(f64, f64, f64, f64)>,
    },
    Grid {
        period_x: f64,
        period_y: f64,
        phase_x: f64,
        phase_y: f64,
        base: f64,
        amplitude: f64,
    },
}

/// Square-ish wave with soft edges, in `[-1, 1]`.
fn soft_square(t: f64) -> f64 {
    const SHARPNESS: f64 = 3.0;
    (SHARPNESS * t.sin()).tanh() / SHARPNESS.tanh()
}

impl Texture {
    pub fn sample(kind: TextureKind, width: usize, height: usize, rng: &mut impl Rng) -> Texture {
        match kind {
            TextureKind::Stripes => Texture::Stripes {
                angle: rng.random_range(0.0..PI),
                period: rng.random_range(8.0..16.0),
                phase: rng.random_range(0.0..2.0 * PI),
                base: rng.random_range(0.28..0.36),
                amplitude: rng.random_range(0.10..0.16),
            },
            TextureKind::Blobs => {
                let margin = 12.0;
                let area = (width as f64 + 2.0 * margin) * (height as f64 + 2.0 * margin);
                let count = (area / 90.0).round() as usize;
                let blobs = (0..count)
                    .map(|_| {
                        (
                            rng.random_range(-margin..width as f64 + margin),
                            rng.random_range(-margin..height as f64 + margin),
                            rng.random_range(1.8..3.2),
                            rng.random_range(0.12..0.22),
                        )
                    })
                    .collect();
                Texture::Blobs {
                    base: rng.random_range(0.22..0.28),
                    blobs,
                }
            }
            TextureKind::Grid => Texture::Grid {
                period_x: rng.random_range(9.0..15.0),
                period_y: rng.random_range(9.0..15.0),
                phase_x: rng.random_range(0.0..2.0 * PI),
                phase_y: rng.random_range(0.0..2.0 * PI),
                base: rng.random_range(0.28..0.34),
                amplitude: rng.random_range(0.10..0.15),
            },
        }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        match self {
            Texture::Stripes {
                angle,
                period,
                phase,
                base,
                amplitude,
            } => {
                let t = 2.0 * PI * (x * angle.cos() + y * angle.sin()) / period + phase;
                base + amplitude * soft_square(t)
            }
            Texture::Blobs { base, blobs } => {
                let mut v = *base;
                for (bx, by, s, a) in blobs {
                    let d2 = (x - bx).powi(2) + (y - by).powi(2);
                    if d2 < 16.0 * s * s {
                        v += a * (-d2 / (2.0 * s * s)).exp();
                    }
                }
                v.min(0.6)
            }
            Texture::Grid {
                period_x,
                period_y,
                phase_x,
                phase_y,
                base,
                amplitude,
            } => {
                let sx = soft_square(2.0 * PI * x / period_x + phase_x);
                let sy = soft_square(2.0 * PI * y / period_y + phase_y);
                base + amplitude * sx.max(sy)
            }
        }
    }

    /// Renders `value(x - offset.0, y - offset.1)` for every pixel.
    pub fn render(&self, width: usize, height: usize, offset: (f64, f64)) -> Image {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(self.value(x as f64 - offset.0, y as f64 - offset.1).clamp(0.0, 1.0));
            }
        }
        Image::new(width, height, 1, data).expect("texture values are clamped")
    }
}
