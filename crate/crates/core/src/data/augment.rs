use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!(
            "expected an image of shape [h,w] or [c,h,w], got {shape:?}"
        ))),
    }
}

/// Zeroes the `size × size` square whose center is pixel `(cy, cx)`,
/// clipped at the borders. The square spans rows `cy - size/2 ..
/// cy - size/2 + size`.
pub fn cutout_at(image: &Tensor, size: usize, cy: usize, cx: usize) -> Result<Tensor> {
    let (c, h, w) = spatial(image.shape())?;
    if size > h.min(w) {
        return Err(Error::contract(format!(
            "cutout size {size} exceeds image side {}",
            h.min(w)
        )));
    }
    let mut out = image.clone();
    if size == 0 {
        return Ok(out);
    }
    let y0 = cy as isize - (size / 2) as isize;
    let x0 = cx as isize - (size / 2) as isize;
    let (ys, ye) = (
        y0.max(0) as usize,
        ((y0 + size as isize).max(0) as usize).min(h),
    );
    let (xs, xe) = (
        x0.max(0) as usize,
        ((x0 + size as isize).max(0) as usize).min(w),
    );
    let data = out.data_mut();
    for ch in 0..c {
        for y in ys..ye {
            let row = ch * h * w + y * w;
            data[row + xs..row + xe].fill(0.0);
        }
    }
    Ok(out)
}

/// Cutout with the square's center drawn uniformly over all pixels.
pub fn cutout<R: Rng + ?Sized>(image: &Tensor, size: usize, rng: &mut R) -> Result<Tensor> {
    let (_, h, w) = spatial(image.shape())?;
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    cutout_at(image, size, cy, cx)
}

pub fn cutout_seeded(image: &Tensor, size: usize, seed: u64) -> Result<Tensor> {
    cutout(image, size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random horizontal flip, random shift with zero fill, then Cutout.
/// Applied per sample to a `[n, c, h, w]` batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub flip: bool,
    /// Maximum shift in pixels along each axis.
    pub max_shift: usize,
    /// Cutout square side; 0 disables it.
    pub cutout: usize,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            flip: true,
            max_shift: 2,
            cutout: 4,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Augmentation {
            flip: false,
            max_shift: 0,
            cutout: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.max_shift == 0 && self.cutout == 0
    }

    pub fn apply<R: Rng + ?Sized>(&self, batch: &Tensor, rng: &mut R) -> Result<Tensor> {
        let shape = batch.shape().to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::shape(format!(
                "augmentation expects [n,c,h,w], got {shape:?}"
            )));
        };
        if self.cutout > h.min(w) {
            return Err(Error::contract(format!(
                "cutout size {} exceeds image side {}",
                self.cutout,
                h.min(w)
            )));
        }
        let per = c * h * w;
        let mut out = Vec::with_capacity(n * per);
        let mut img = vec![0.0; per];
        for i in 0..n {
            let src = &batch.data()[i * per..(i + 1) * per];
            let flip = self.flip && rng.random::<bool>();
            let s = self.max_shift as i64;
            let (dy, dx) = if s > 0 {
                (
                    rng.random_range(-s..=s) as isize,
                    rng.random_range(-s..=s) as isize,
                )
            } else {
                (0, 0)
            };
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize - dy;
                        let sx0 = x as isize - dx;
                        let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                        img[ch * h * w + y * w + x] =
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                src[ch * h * w + sy as usize * w + sx as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
            if self.cutout > 0 {
                let t = Tensor::from_parts(vec![c, h, w], img.clone());
                out.extend_from_slice(cutout(&t, self.cutout, rng)?.data());
            } else {
                out.extend_from_slice(&img);
            }
        }
        Ok(Tensor::from_parts(shape, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ones(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![c, h, w], vec![1.0; c * h * w]).unwrap()
    }

    fn zeros_in(t: &Tensor) -> usize {
        t.data().iter().filter(|&&v| v == 0.0).count()
    }

    #[test]
    fn size_zero_is_identity() {
        let img = ones(3, 8, 8);
        assert_eq!(cutout_seeded(&img, 0, 4).unwrap(), img);
    }

    #[test]
    fn full_size_centered_zeroes_everything() {
        let img = ones(1, 32, 32);
        let out = cutout_at(&img, 32, 16, 16).unwrap();
        assert_eq!(zeros_in(&out), 32 * 32);
    }

    #[test]
    fn oversized_cut_rejected() {
        assert!(cutout_seeded(&ones(1, 4, 4), 5, 0).is_err());
    }

    #[test]
    fn zeroed_count_matches_enumerated_clipping() {
        // Oracle: count the clipped square's area directly for every center.
        let img = ones(1, 32, 32);
        let extent = |c: i64| ((c - 4).max(0)..(c + 4).min(32)).count();
        for cy in 0..32 {
            for cx in 0..32 {
                let out = cutout_at(&img, 8, cy, cx).unwrap();
                let n = zeros_in(&out);
                assert_eq!(n, extent(cy as i64) * extent(cx as i64));
                assert!((16..=64).contains(&n));
            }
        }
    }

    #[test]
    fn augmentation_none_is_identity() {
        let b = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| i as f64).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(Augmentation::none().apply(&b, &mut rng).unwrap(), b);
    }

    #[test]
    fn forced_flip_mirrors_rows() {
        let b = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let aug = Augmentation {
            flip: true,
            max_shift: 0,
            cutout: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seen: Vec<Vec<f64>> = (0..16)
            .map(|_| aug.apply(&b, &mut rng).unwrap().into_data())
            .collect();
        assert!(seen.contains(&vec![3.0, 2.0, 1.0]));
        assert!(seen.contains(&vec![1.0, 2.0, 3.0]));
    }

    proptest! {
        #[test]
        fn pixels_outside_square_untouched(seed in any::<u64>(), size in 0usize..=12, h in 12usize..20, w in 12usize..20) {
            let data: Vec<f64> = (0..2 * h * w).map(|i| 1.0 + i as f64).collect();
            let img = Tensor::new(vec![2, h, w], data.clone()).unwrap();
            let out = cutout_seeded(&img, size, seed).unwrap();
            let changed: Vec<(usize, usize)> = out
                .data()
                .iter()
                .zip(&data)
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .map(|(i, _)| ((i % (h * w)) / w, i % w))
                .collect();
            prop_assert!(out.data().iter().zip(&data).all(|(a, b)| *a == 0.0 || a == b));
            if let (Some(ymin), Some(ymax)) = (changed.iter().map(|p| p.0).min(), changed.iter().map(|p| p.0).max()) {
                let xmin = changed.iter().map(|p| p.1).min().unwrap();
                let xmax = changed.iter().map(|p| p.1).max().unwrap();
                prop_assert!(ymax - ymin < size && xmax - xmin < size);
                // every pixel of the bounding box is zeroed: it is one rectangle
                prop_assert_eq!(changed.len(), 2 * (ymax - ymin + 1) * (xmax - xmin + 1));
            }
        }
    }
}
