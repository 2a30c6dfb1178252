use super::{Image, ImageError};

/// Result of integer translation registration.
#[derive(Debug, Clone)]
pub struct Registration {
    pub dx: i32,
    pub dy: i32,
    pub warped: Image,
    /// Normalized cross-correlation at the chosen shift.
    pub score: f64,
    /// Set when either image has no intensity variation; the shift is then zero.
    pub degenerate: bool,
}

/// `out(x, y) = image(x - dx, y - dy)` with edge replication.
pub fn shift_replicate(image: &Image, dx: i32, dy: i32) -> Image {
    let (w, h, c) = image.shape();
    let mut data = Vec::with_capacity(w * h * c);
    for y in 0..h as i32 {
        let sy = (y - dy).clamp(0, h as i32 - 1) as usize;
        for x in 0..w as i32 {
            let sx = (x - dx).clamp(0, w as i32 - 1) as usize;
            for ch in 0..c {
                data.push(image.get(sx, sy, ch));
            }
        }
    }
    Image::new(w, h, c, data).expect("shift preserves shape and range")
}

/// Finds the integer shift of `moving` that maximizes normalized
/// cross-correlation with `fixed` by exhaustive search over the overlap
/// region within `±max_shift`. Ties go to the smallest `|dx| + |dy|`.
pub fn register_translation(moving: &Image, fixed: &Image, max_shift: usize) -> Result<Registration, ImageError> {
    moving.check_same_shape(fixed)?;
    let (w, h, _) = moving.shape();
    if 4 * max_shift >= w.min(h) {
        return Err(ImageError::InvalidParameter(format!(
            "max_shift {max_shift} must be below min(width, height)/4"
        )));
    }
    let a = moving.to_gray();
    let b = fixed.to_gray();
    if is_constant(&a) || is_constant(&b) {
        log::warn!("registration on a constant image; reporting zero shift");
        return Ok(Registration {
            dx: 0,
            dy: 0,
            warped: moving.clone(),
            score: 0.0,
            degenerate: true,
        });
    }
    let m = max_shift as i32;
    let mut best: Option<(f64, i32, i32)> = None;
    for dy in -m..=m {
        for dx in -m..=m {
            let score = overlap_ncc(&a, &b, dx, dy);
            let better = match best {
                None => true,
                Some((s, bx, by)) => {
                    score > s + 1e-12 || ((score - s).abs() <= 1e-12 && dx.abs() + dy.abs() < bx.abs() + by.abs())
                }
            };
            if better {
                best = Some((score, dx, dy));
            }
        }
    }
    let (score, dx, dy) = best.expect("window is nonempty");
    Ok(Registration {
        dx,
        dy,
        warped: shift_replicate(moving, dx, dy),
        score,
        degenerate: false,
    })
}

fn is_constant(img: &Image) -> bool {
    let first = img.data()[0];
    img.data().iter().all(|v| (v - first).abs() < 1e-12)
}

/// NCC between `moving(x - dx, y - dy)` and `fixed(x, y)` over pixels where
/// the shifted sample lies inside `moving`.
fn overlap_ncc(moving: &Image, fixed: &Image, dx: i32, dy: i32) -> f64 {
    let (w, h) = (fixed.width() as i32, fixed.height() as i32);
    let x0 = dx.max(0);
    let x1 = (w + dx).min(w);
    let y0 = dy.max(0);
    let y1 = (h + dy).min(h);
    let n = ((x1 - x0) * (y1 - y0)) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            let va = moving.get((x - dx) as usize, (y - dy) as usize, 0);
            let vb = fixed.get(x as usize, y as usize, 0);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let cov = sab - sa * sb / n;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 1e-12 || vb <= 1e-12 {
        return -1.0;
    }
    cov / (va * vb).sqrt()
}
