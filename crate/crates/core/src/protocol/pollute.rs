//! Simple pixel-space corruptions of `[3, H, W]` images.

use crate::numerics::Tensor;

use super::ProtocolError;

fn dims(image: &Tensor) -> Result<(usize, usize, usize), ProtocolError> {
    match *image.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        ref s => Err(ProtocolError::Input(format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

/// Mean over a `(2r+1)²` window, edges clamped.
pub fn box_blur(image: &Tensor, radius: usize) -> Result<Tensor, ProtocolError> {
    let (c, h, w) = dims(image)?;
    let src = image.data();
    let r = radius as isize;
    let at = |ch: usize, i: isize, j: isize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        src[(ch * h + i) * w + j]
    };
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    Ok(Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, rest) = (idx / (h * w), idx % (h * w));
        let (i, j) = ((rest / w) as isize, (rest % w) as isize);
        let mut s = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                s += at(ch, i + di, j + dj);
            }
        }
        s / norm
    }))
}

/// Cyclic translation by `dy` rows and `dx` columns.
pub fn shift(image: &Tensor, dy: isize, dx: isize) -> Result<Tensor, ProtocolError> {
    let (c, h, w) = dims(image)?;
    let src = image.data();
    Ok(Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, rest) = (idx / (h * w), idx % (h * w));
        let i = (rest / w) as isize - dy;
        let j = (rest % w) as isize - dx;
        let i = i.rem_euclid(h as isize) as usize;
        let j = j.rem_euclid(w as isize) as usize;
        src[(ch * h + i) * w + j]
    }))
}

/// Counter-clockwise rotation about the image center with nearest-neighbor
/// sampling; pixels from outside the frame are black.
pub fn rotate(image: &Tensor, degrees: f64) -> Result<Tensor, ProtocolError> {
    let (c, h, w) = dims(image)?;
    let src = image.data();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Ok(Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, rest) = (idx / (h * w), idx % (h * w));
        let y = (rest / w) as f64 - cy;
        let x = (rest % w) as f64 - cx;
        let sy = (cos * y - sin * x + cy).round();
        let sx = (sin * y + cos * x + cx).round();
        if sy < 0.0 || sx < 0.0 || sy >= h as f64 || sx >= w as f64 {
            0.0
        } else {
            src[(ch * h + sy as usize) * w + sx as usize]
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        Tensor::from_fn(&[3, 4, 5], |i| i as f64)
    }

    #[test]
    fn identities() {
        let x = ramp();
        assert_eq!(box_blur(&x, 0).unwrap(), x);
        assert_eq!(shift(&x, 4, -5).unwrap(), x);
        assert_eq!(rotate(&x, 0.0).unwrap(), x);
        assert_eq!(rotate(&rotate(&x, 180.0).unwrap(), 180.0).unwrap(), x);
    }

    #[test]
    fn blur_keeps_constants() {
        let x = Tensor::full(&[3, 6, 6], 0.25);
        assert!(box_blur(&x, 2).unwrap().max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn shift_moves_pixels() {
        let x = ramp();
        let y = shift(&x, 1, 2).unwrap();
        assert_eq!(y.data()[5 + 2], x.data()[0]);
        assert!(shift(&Tensor::zeros(&[4]), 1, 1).is_err());
    }
}
