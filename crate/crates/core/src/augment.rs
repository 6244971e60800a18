//! Training-time augmentation.
//!
//! Geometric transforms (flip, pad-and-crop) are applied jointly to an image
//! and its clothes mask so the shielding and clothes views stay aligned with
//! the raw view. Random erasing only touches the view it is applied to.

use rand::Rng;

use crate::config::AugmentSection;
use crate::data::Image;
use crate::masking::BinaryMask;

/// Fill colour for erased rectangles: the encoder's mean pixel.
pub const ERASE_FILL: [u8; 3] = [123, 117, 104];

#[derive(Clone, Debug, PartialEq)]
pub struct Augmenter {
    pub hflip: bool,
    pub pad: usize,
    pub erasing_prob: f64,
}

impl Augmenter {
    pub fn from_config(cfg: &AugmentSection) -> Self {
        Self {
            hflip: cfg.hflip,
            pad: cfg.pad,
            erasing_prob: if cfg.random_erasing { cfg.erasing_prob } else { 0.0 },
        }
    }

    pub fn identity() -> Self {
        Self {
            hflip: false,
            pad: 0,
            erasing_prob: 0.0,
        }
    }

    /// Flip and pad-crop the image and mask together. Padding is black in
    /// the image and clothes-irrelevant in the mask.
    pub fn geometric(&self, image: &Image, mask: &BinaryMask, rng: &mut impl Rng) -> (Image, BinaryMask) {
        let (h, w) = image.size();
        let flip = self.hflip && rng.random_bool(0.5);
        let (dy, dx) = if self.pad > 0 {
            (rng.random_range(0..=2 * self.pad), rng.random_range(0..=2 * self.pad))
        } else {
            (0, 0)
        };
        let pad = self.pad as isize;
        let mut out = Image::filled(h, w, [0, 0, 0]);
        let mut m = vec![1u8; h * w];
        for y in 0..h {
            let sy = y as isize + dy as isize - pad;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let cx = x as isize + dx as isize - pad;
                if cx < 0 || cx >= w as isize {
                    continue;
                }
                let sx = if flip { w - 1 - cx as usize } else { cx as usize };
                out.set_pixel(y, x, image.pixel(sy as usize, sx));
                m[y * w + x] = mask.at(sy as usize, sx);
            }
        }
        let mask = BinaryMask::new(h, w, m).expect("mask values stay binary");
        (out, mask)
    }

    /// Random erasing with area fraction in [0.02, 0.4] and aspect ratio in
    /// [0.3, 1/0.3].
    pub fn erase(&self, image: &mut Image, rng: &mut impl Rng) {
        if self.erasing_prob <= 0.0 || !rng.random_bool(self.erasing_prob.min(1.0)) {
            return;
        }
        let (h, w) = image.size();
        let area = (h * w) as f64;
        for _ in 0..100 {
            let target = area * rng.random_range(0.02..0.4);
            let aspect: f64 = rng.random_range(0.3f64.ln()..(1.0 / 0.3f64).ln()).exp();
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= h || ew >= w {
                continue;
            }
            let y0 = rng.random_range(0..=h - eh);
            let x0 = rng.random_range(0..=w - ew);
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    image.set_pixel(y, x, ERASE_FILL);
                }
            }
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream_rng;

    fn ramp(h: usize, w: usize) -> (Image, BinaryMask) {
        let data = (0..h * w).flat_map(|i| [i as u8, (i * 3) as u8, 7]).collect();
        let mask = (0..h * w).map(|i| (i % 3 == 0) as u8).collect();
        (Image::new(h, w, data).unwrap(), BinaryMask::new(h, w, mask).unwrap())
    }

    #[test]
    fn identity_augmenter_is_noop() {
        let (img, mask) = ramp(8, 4);
        let (a, m) = Augmenter::identity().geometric(&img, &mask, &mut stream_rng(0, "a", &[]));
        assert_eq!(a, img);
        assert_eq!(m, mask);
    }

    #[test]
    fn image_and_mask_move_together() {
        let (img, mask) = ramp(16, 8);
        let aug = Augmenter {
            hflip: true,
            pad: 3,
            erasing_prob: 0.0,
        };
        for s in 0..20 {
            let (a, m) = aug.geometric(&img, &mask, &mut stream_rng(s, "a", &[]));
            for y in 0..16 {
                for x in 0..8 {
                    let px = a.pixel(y, x);
                    if px == [0, 0, 0] {
                        assert_eq!(m.at(y, x), 1);
                        continue;
                    }
                    let i = px[0] as usize;
                    assert_eq!(m.at(y, x), mask.values[i], "seed {s} at {y},{x}");
                }
            }
        }
    }

    #[test]
    fn erasing_fills_a_rectangle() {
        let mut img = Image::filled(32, 16, [1, 1, 1]);
        let aug = Augmenter {
            hflip: false,
            pad: 0,
            erasing_prob: 1.0,
        };
        aug.erase(&mut img, &mut stream_rng(3, "e", &[]));
        let erased = img.data.chunks(3).filter(|p| p == &ERASE_FILL).count();
        assert!(erased > 0 && erased < 32 * 16);
    }
}
