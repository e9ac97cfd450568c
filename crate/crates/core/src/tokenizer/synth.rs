use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

/// A `[3, size, size]` image in `[0, 1]`: a colour gradient with a disc and
/// a rectangle drawn on top, all parameters drawn from `rng`.
pub fn synthetic_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let s = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
    let slope: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let disc_color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let (cx, cy) = (rng.gen_range(0.2..0.8) * s, rng.gen_range(0.2..0.8) * s);
    let radius = rng.gen_range(0.12..0.3) * s;
    let rect_color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
    let (rx0, ry0) = (rng.gen_range(0.0..0.6) * s, rng.gen_range(0.0..0.6) * s);
    let (rw, rh) = (rng.gen_range(0.15..0.4) * s, rng.gen_range(0.15..0.4) * s);

    Tensor::from_fn(&[3, size, size], |i| {
        let c = i / (size * size);
        let y = ((i / size) % size) as f64 + 0.5;
        let x = (i % size) as f64 + 0.5;
        let t = ((x * angle.cos() + y * angle.sin()) / s).clamp(-1.5, 1.5);
        let mut v = base[c] + slope[c] * t;
        if (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius {
            v = disc_color[c];
        }
        if x >= rx0 && x < rx0 + rw && y >= ry0 && y < ry0 + rh {
            v = 0.5 * v + 0.5 * rect_color[c];
        }
        v.clamp(0.0, 1.0)
    })
}

/// `count` images from one seeded stream.
pub fn synthetic_images(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synthetic_image(size, &mut rng)).collect()
}
