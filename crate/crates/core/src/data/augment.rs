//! Training-time augmentation: horizontal flip, zero-pad and random crop,
//! random erasing with uniform noise.

use rand::Rng;

use crate::tensor::Tensor;

use super::{PersonImage, Rect};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Zero padding on every side before the crop.
    pub pad: usize,
    pub erase_prob: f64,
    /// Bounds on erased area / image area.
    pub erase_area: (f64, f64),
    /// Bounds on erased height / width.
    pub erase_aspect: (f64, f64),
}

impl AugmentConfig {
    /// Ten pixels of padding at 256 rows, scaled to `height`.
    pub fn for_height(height: usize) -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            pad: (10.0 * height as f64 / 256.0).round() as usize,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 1.0 / 0.3),
        }
    }

    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            pad: 0,
            erase_prob: 0.0,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 1.0 / 0.3),
        }
    }
}

/// The random choices for one image, separated from their application so
/// each branch can be forced in tests.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub pad: usize,
    /// Crop offset into the padded image, each in `0..=2 * pad`.
    pub crop: (usize, usize),
    pub erase: Option<Rect>,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        AugmentPlan {
            flip: false,
            pad: 0,
            crop: (0, 0),
            erase: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop == (self.pad, self.pad) && self.erase.is_none()
    }

    pub fn sample<R: Rng>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Self {
        let flip = rng.gen_bool(cfg.flip_prob);
        let crop = (rng.gen_range(0..=2 * cfg.pad), rng.gen_range(0..=2 * cfg.pad));
        let erase = if rng.gen_bool(cfg.erase_prob) {
            sample_erase(cfg, h, w, rng)
        } else {
            None
        };
        AugmentPlan {
            flip,
            pad: cfg.pad,
            crop,
            erase,
        }
    }

    /// Erase noise is drawn from `rng` only when an erase region is present.
    pub fn apply<R: Rng>(&self, img: &PersonImage, rng: &mut R) -> PersonImage {
        if self.is_identity() {
            return img.clone();
        }
        let (h, w) = (img.height(), img.width());
        let src = img.pixels.data();
        let mut px = vec![0.0f32; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                // position in the padded (and flipped) source
                let py = (y + self.crop.0) as isize - self.pad as isize;
                let px_ = (x + self.crop.1) as isize - self.pad as isize;
                if py < 0 || px_ < 0 || py >= h as isize || px_ >= w as isize {
                    continue;
                }
                let sx = if self.flip { w - 1 - px_ as usize } else { px_ as usize };
                let s = (py as usize * w + sx) * 3;
                px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&src[s..s + 3]);
            }
        }
        if let Some(r) = self.erase {
            for y in r.top..r.top + r.height {
                for v in &mut px[(y * w + r.left) * 3..(y * w + r.left + r.width) * 3] {
                    *v = rng.gen_range(0.0f32..1.0);
                }
            }
        }
        PersonImage {
            pixels: Tensor::new(&[h, w, 3], px).expect("extent"),
            regions: None,
            ..img.clone()
        }
    }
}

fn sample_erase<R: Rng>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Option<Rect> {
    let area = (h * w) as f64;
    let (lo, hi) = cfg.erase_area;
    let (log_a, log_b) = (cfg.erase_aspect.0.ln(), cfg.erase_aspect.1.ln());
    for _ in 0..100 {
        let target = rng.gen_range(lo..=hi) * area;
        let aspect = rng.gen_range(log_a..=log_b).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        // rounding can push the realised fraction outside the bounds
        let frac = (eh * ew) as f64 / area;
        if frac < lo || frac > hi {
            continue;
        }
        return Some(Rect {
            top: rng.gen_range(0..=h - eh),
            left: rng.gen_range(0..=w - ew),
            height: eh,
            width: ew,
        });
    }
    None
}

pub fn augment<R: Rng>(img: &PersonImage, cfg: &AugmentConfig, rng: &mut R) -> PersonImage {
    let plan = AugmentPlan::sample(cfg, img.height(), img.width(), rng);
    plan.apply(img, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn image() -> PersonImage {
        synth_generate(&SynthConfig {
            num_identities: 1,
            images_per_identity: 1,
            ..SynthConfig::default()
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn pad_scales_with_height() {
        assert_eq!(AugmentConfig::for_height(256).pad, 10);
        assert_eq!(AugmentConfig::for_height(64).pad, 3);
    }

    #[test]
    fn no_op_branches_leave_image_unchanged() {
        let img = image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = AugmentPlan {
            flip: false,
            pad: 3,
            crop: (3, 3),
            erase: None,
        };
        assert_eq!(plan.apply(&img, &mut rng), img);
        assert_eq!(augment(&img, &AugmentConfig::disabled(), &mut rng), img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flip = AugmentPlan {
            flip: true,
            ..AugmentPlan::identity()
        };
        let twice = flip.apply(&flip.apply(&img, &mut rng), &mut rng);
        assert_eq!(twice.pixels, img.pixels);
        assert_ne!(flip.apply(&img, &mut rng).pixels, img.pixels);
    }

    #[test]
    fn crop_shifts_content() {
        let img = image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = AugmentPlan {
            flip: false,
            pad: 3,
            crop: (0, 0),
            erase: None,
        };
        let out = plan.apply(&img, &mut rng);
        let w = img.width();
        // output (y, x) comes from source (y - 3, x - 3)
        assert_eq!(out.pixels.data()[..3], [0.0; 3]);
        let (y, x) = (10, 10);
        assert_eq!(
            out.pixels.data()[(y * w + x) * 3..(y * w + x) * 3 + 3],
            img.pixels.data()[((y - 3) * w + x - 3) * 3..((y - 3) * w + x - 3) * 3 + 3]
        );
    }

    #[test]
    fn erase_fraction_within_bounds() {
        let cfg = AugmentConfig::for_height(64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = 0;
        for _ in 0..1000 {
            if let Some(r) = sample_erase(&cfg, 64, 32, &mut rng) {
                let f = r.area() as f64 / (64.0 * 32.0);
                assert!((0.02..=0.2).contains(&f), "{f}");
                assert!(r.top + r.height <= 64 && r.left + r.width <= 32);
                seen += 1;
            }
        }
        assert!(seen > 950);
    }

    #[test]
    fn pixels_stay_in_unit_range_and_rng_determines_output() {
        let img = image();
        let cfg = AugmentConfig::for_height(64);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = augment(&img, &cfg, &mut a);
            assert_eq!(x, augment(&img, &cfg, &mut b));
            assert!(x.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
