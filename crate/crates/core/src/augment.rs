//! Random erasing of rectangular blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 100;

/// With probability `probability`, replaces one random rectangle covering an
/// area fraction drawn from `area_range` by uniform noise in [0, 1].
///
/// Rectangle sides are rounded to whole pixels, so the erased area is off
/// from the target by at most half a row or column.
pub fn random_erase<R: Rng + ?Sized>(
    image: &Tensor,
    probability: f64,
    area_range: (f64, f64),
    rng: &mut R,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::invalid(format!(
            "erase probability must be in [0, 1], got {probability}"
        )));
    }
    let (lo, hi) = area_range;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!(
            "erase area range must satisfy 0 < min ≤ max ≤ 1, got [{lo}, {hi}]"
        )));
    }
    let &[h, w, c] = image.shape() else {
        return Err(Error::shape(format!(
            "random_erase expects an H×W×C image, got {:?}",
            image.shape()
        )));
    };
    let mut out = image.clone();
    if probability == 0.0 || rng.random::<f64>() >= probability {
        return Ok(out);
    }
    let total = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let frac = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let target = frac * total;
        let aspect = rng.random_range((0.3f64).ln()..=(1.0 / 0.3f64).ln()).exp();
        let eh = ((target * aspect).sqrt().round() as usize).max(1);
        if eh > h {
            continue;
        }
        let ew = ((target / eh as f64).round() as usize).max(1);
        if ew > w {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        let data = out.data_mut();
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                for ch in 0..c {
                    data[(y * w + x) * c + ch] = rng.random::<f64>();
                }
            }
        }
        return Ok(out);
    }
    Ok(out)
}
