use rand::Rng;
use serde::{Deserialize, Serialize};

/// Augmentation magnitudes. Zero magnitudes disable the corresponding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Zero-padding before a random crop back to the original size.
    pub pad: usize,
    pub hflip: bool,
    /// Brightness offset and contrast factor are drawn from `±jitter`.
    pub jitter: f32,
    /// Maximum absolute rotation in degrees.
    pub max_rotation_deg: f32,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            pad: 0,
            hflip: false,
            jitter: 0.0,
            max_rotation_deg: 0.0,
        }
    }

    pub fn standard() -> Self {
        AugmentPolicy {
            pad: 2,
            hflip: true,
            jitter: 0.0,
            max_rotation_deg: 0.0,
        }
    }

    /// Standard scheme plus colour jitter and small rotations.
    pub fn exemplar() -> Self {
        AugmentPolicy {
            pad: 2,
            hflip: true,
            jitter: 0.2,
            max_rotation_deg: 10.0,
        }
    }
}

fn rotate_bilinear(img: &[f32], c: usize, h: usize, w: usize, degrees: f32) -> Vec<f32> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut out = vec![0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            // inverse map into the source image, clamped to the border
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f32);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f32);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            for ch in 0..c {
                let p = &img[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[ch * h * w + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Applies `policy` to one `[C,H,W]` image in `[0,1]`. Output is clamped to
/// `[0,1]`; the same generator state yields the same output.
pub fn augment<R: Rng>(image: &[f32], shape: [usize; 3], policy: &AugmentPolicy, rng: &mut R) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut img = image.to_vec();
    if policy.max_rotation_deg > 0.0 {
        let angle = rng.random_range(-policy.max_rotation_deg..=policy.max_rotation_deg);
        img = rotate_bilinear(&img, c, h, w, angle);
    }
    if policy.pad > 0 {
        let p = policy.pad;
        let oy = rng.random_range(0..=2 * p);
        let ox = rng.random_range(0..=2 * p);
        let mut out = vec![0f32; img.len()];
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + oy) as isize - p as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = (x + ox) as isize - p as isize;
                    if sx >= 0 && sx < w as isize {
                        out[ch * h * w + y * w + x] = img[ch * h * w + sy as usize * w + sx as usize];
                    }
                }
            }
        }
        img = out;
    }
    if policy.hflip && rng.random_bool(0.5) {
        for row in img.chunks_mut(w) {
            row.reverse();
        }
    }
    if policy.jitter > 0.0 {
        let j = policy.jitter;
        let brightness = rng.random_range(-j..=j);
        let contrast = 1.0 + rng.random_range(-j..=j);
        let mean = img.iter().sum::<f32>() / img.len() as f32;
        for v in &mut img {
            *v = (*v - mean) * contrast + mean + brightness;
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn image(seed: u64) -> Vec<f32> {
        let mut rng = SplitMix64::new(seed);
        (0..3 * 8 * 8).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn identity_policy_is_noop() {
        let img = image(1);
        let out = augment(&img, [3, 8, 8], &AugmentPolicy::identity(), &mut SplitMix64::new(5));
        assert_eq!(out, img);
    }

    #[test]
    fn deterministic_given_rng() {
        let img = image(2);
        let p = AugmentPolicy::exemplar();
        let a = augment(&img, [3, 8, 8], &p, &mut SplitMix64::new(5));
        let b = augment(&img, [3, 8, 8], &p, &mut SplitMix64::new(5));
        assert_eq!(a, b);
    }

    #[test]
    fn output_stays_in_unit_range() {
        let p = AugmentPolicy::exemplar();
        let mut rng = SplitMix64::new(77);
        for i in 0..10_000u64 {
            let img = image(i % 17);
            let out = augment(&img, [3, 8, 8], &p, &mut rng);
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_angle_rotation_is_exact() {
        let img = image(3);
        assert_eq!(rotate_bilinear(&img, 3, 8, 8, 0.0), img);
    }
}
