//! Square context crops resampled with bilinear interpolation.

use crate::error::{Error, Result};
use crate::nn::INPUT_SIZE;
use crate::tensor::Tensor;

pub const DEFAULT_SCALES: [f64; 3] = [1.0, 0.8, 0.6];

fn image_dims(image: &Tensor) -> Result<[usize; 3]> {
    match *image.shape() {
        [h, w, c] => Ok([h, w, c]),
        ref s => Err(Error::shape(format!("expected an H×W×C image, got {s:?}"))),
    }
}

/// Samples the axis-aligned window `[x0, x0 + side_w) × [y0, y0 + side_h)`
/// onto an `out_h × out_w` grid. Pixel centres sit at half-integer
/// coordinates; samples past the border clamp to the edge pixels.
fn sample_window(
    image: &Tensor,
    (x0, y0, side_w, side_h): (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let [h, w, c] = image_dims(image)?;
    let src = image.data();
    let axis = |len: usize, start: f64, side: f64, n: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|i| {
                let s = (start + (i as f64 + 0.5) * side / n as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = axis(h, y0, side_h, out_h);
    let xs = axis(w, x0, side_w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y_lo, y_hi, fy) in &ys {
        for &(x_lo, x_hi, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y_lo, x_lo) * (1.0 - fx) + at(y_lo, x_hi) * fx;
                let bottom = at(y_hi, x_lo) * (1.0 - fx) + at(y_hi, x_hi) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([out_h, out_w, c], out)
}

/// Bilinear resize of a whole image.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w, _] = image_dims(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    sample_window(image, (0.0, 0.0, w as f64, h as f64), out_h, out_w)
}

/// Square of side `scale · min(H, W)` centred on `center = (x, y)`, shifted
/// to lie inside the image, resized to `INPUT_SIZE × INPUT_SIZE`.
pub fn square_crop(image: &Tensor, center: (f64, f64), scale: f64) -> Result<Tensor> {
    let [h, w, _] = image_dims(image)?;
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(format!(
            "crop scale must be in (0, 1], got {scale}"
        )));
    }
    let side = scale * h.min(w) as f64;
    if side < 1.0 {
        return Err(Error::invalid(format!(
            "crop at scale {scale} of a {h}×{w} image covers less than one pixel"
        )));
    }
    let (cx, cy) = center;
    if !(cx.is_finite() && cy.is_finite()) {
        return Err(Error::invalid("crop centre must be finite"));
    }
    let x0 = (cx - side / 2.0).clamp(0.0, w as f64 - side);
    let y0 = (cy - side / 2.0).clamp(0.0, h as f64 - side);
    sample_window(image, (x0, y0, side, side), INPUT_SIZE, INPUT_SIZE)
}

/// One crop per scale, largest first.
pub fn three_scale_crops(image: &Tensor, center: (f64, f64), scales: [f64; 3]) -> Result<[Tensor; 3]> {
    if scales.windows(2).any(|p| p[0] < p[1]) {
        return Err(Error::invalid(format!(
            "crop scales must be descending, got {scales:?}"
        )));
    }
    let [a, b, c] = scales.map(|s| square_crop(image, center, s));
    Ok([a?, b?, c?])
}

/// Centre of an image in pixel coordinates.
pub fn image_center(image: &Tensor) -> Result<(f64, f64)> {
    let [h, w, _] = image_dims(image)?;
    Ok((w as f64 / 2.0, h as f64 / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_scale_on_matching_size_is_identity() {
        let img = Tensor::from_fn([64, 64, 3], |i| (i % 251) as f64 / 251.0).unwrap();
        let crops = three_scale_crops(&img, (32.0, 32.0), DEFAULT_SCALES).unwrap();
        assert_eq!(crops[0], img);
        assert_eq!(crops[1].shape(), &[64, 64, 3]);
    }

    #[test]
    fn constant_image_gives_constant_crops() {
        let img = Tensor::full([80, 100, 3], 0.25).unwrap();
        for crop in three_scale_crops(&img, (10.0, 70.0), DEFAULT_SCALES).unwrap() {
            assert!(crop.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn checkerboard_upsample() {
        // 2×2 board [[0, 1], [1, 0]] to 4×4: sample positions -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1.
        let img = Tensor::new([2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        let t = [0.0, 0.25, 0.75, 1.0];
        for (i, &fy) in t.iter().enumerate() {
            for (j, &fx) in t.iter().enumerate() {
                let expected = (1.0 - fy) * fx + fy * (1.0 - fx);
                assert!((out.data()[i * 4 + j] - expected).abs() < 1e-12);
            }
        }
        assert_eq!(out.data()[1], 0.25);
        assert_eq!(out.data()[5], 0.375);
    }

    #[test]
    fn crops_clamp_to_bounds() {
        let img = Tensor::from_fn([64, 64, 1], |i| (i / 64) as f64).unwrap();
        // A full-size crop centred at a corner is shifted back onto the image.
        let c = square_crop(&img, (0.0, 0.0), 1.0).unwrap();
        assert_eq!(c, img);
    }

    #[test]
    fn degenerate_crops_fail() {
        let img = Tensor::zeros([2, 2, 3]).unwrap();
        assert!(square_crop(&img, (1.0, 1.0), 0.25).is_err());
        assert!(square_crop(&img, (1.0, 1.0), 0.0).is_err());
        assert!(three_scale_crops(&img, (1.0, 1.0), [0.5, 0.8, 1.0]).is_err());
    }
}
