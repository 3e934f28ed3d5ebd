//! Synthetic alignment pairs and image-quality metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aligner::IMAGE_CHANNELS;
use crate::error::{Result, XabaError};
use crate::scalar::{lit, Scalar};
use crate::tensor::{resize, Direction, Shape, Tensor};

/// One training or evaluation example. `truth` is the target content placed
/// in the reference geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub reference: Tensor<T>,
    pub target: Tensor<T>,
    pub truth: Tensor<T>,
}

/// Smooth multi-octave RGB texture in `[0, 1]`, shape `(1, 3, h, w)`.
pub fn texture<T: Scalar>(height: usize, width: usize, rng: &mut impl Rng) -> Tensor<T> {
    let shape = Shape::new(1, IMAGE_CHANNELS, height, width);
    let mut acc = Tensor::<f64>::zeros(shape);
    let mut amplitude = 1.0;
    for cell in [16usize, 8, 4, 2, 1] {
        if !height.is_multiple_of(cell) || !width.is_multiple_of(cell) {
            continue;
        }
        let coarse = Tensor::from_fn(shape_div(shape, cell), |_, _, _, _| {
            rng.gen_range(-1.0..1.0)
        });
        let layer = resize(&coarse, cell, Direction::Up).expect("factor is nonzero");
        for (a, &v) in acc.data_mut().iter_mut().zip(layer.data()) {
            *a += amplitude * v;
        }
        amplitude *= 0.6;
    }
    let (lo, hi) = acc
        .data()
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);
    acc.map(|v| (v - lo) / span).cast()
}

fn shape_div(s: Shape, f: usize) -> Shape {
    Shape::new(s.batch, s.channels, s.height / f, s.width / f)
}

/// Circular shift of every `b×b` block by its own offset; `offset(block_row, block_col)`
/// gives `(dy, dx)`, the source displacement within the block.
pub fn shift_blocks<T: Scalar>(
    img: &Tensor<T>,
    block: usize,
    mut offset: impl FnMut(usize, usize) -> (isize, isize),
) -> Result<Tensor<T>> {
    let s = img.shape();
    if block == 0 || !s.height.is_multiple_of(block) || !s.width.is_multiple_of(block) {
        return Err(XabaError::precondition(format!(
            "{}x{} is not divisible into {block}px blocks",
            s.height, s.width
        )));
    }
    let offsets: Vec<Vec<(isize, isize)>> = (0..s.height / block)
        .map(|r| (0..s.width / block).map(|c| offset(r, c)).collect())
        .collect();
    let b = block as isize;
    Ok(Tensor::from_fn(s, |n, c, y, x| {
        let (dy, dx) = offsets[y / block][x / block];
        let (by, bx) = ((y / block * block) as isize, (x / block * block) as isize);
        let sy = by + (y as isize - by + dy).rem_euclid(b);
        let sx = bx + (x as isize - bx + dx).rem_euclid(b);
        img.at(n, c, sy as usize, sx as usize)
    }))
}

/// Whole-image circular shift by `(dy, dx)`.
pub fn roll<T: Scalar>(img: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let s = img.shape();
    Tensor::from_fn(s, |n, c, y, x| {
        let sy = (y as isize + dy).rem_euclid(s.height as isize) as usize;
        let sx = (x as isize + dx).rem_euclid(s.width as isize) as usize;
        img.at(n, c, sy, sx)
    })
}

/// Pairs whose target is the reference with every block circularly shifted
/// by an independent offset of at most `max_shift` px per axis.
pub fn block_shift_pairs<T: Scalar>(
    count: usize,
    size: usize,
    block: usize,
    max_shift: usize,
    seed: u64,
) -> Result<Vec<Pair<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = max_shift as isize;
    (0..count)
        .map(|_| {
            let reference: Tensor<T> = texture(size, size, &mut rng);
            let target = shift_blocks(&reference, block, |_, _| {
                (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
            })?;
            Ok(Pair {
                truth: reference.clone(),
                reference,
                target,
            })
        })
        .collect()
}

/// Pairs whose target is the whole reference rolled by up to `max_shift` px per axis.
pub fn global_shift_pairs<T: Scalar>(
    count: usize,
    size: usize,
    max_shift: usize,
    seed: u64,
) -> Vec<Pair<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = max_shift as isize;
    (0..count)
        .map(|_| {
            let reference: Tensor<T> = texture(size, size, &mut rng);
            let target = roll(&reference, rng.gen_range(-m..=m), rng.gen_range(-m..=m));
            Pair {
                truth: reference.clone(),
                reference,
                target,
            }
        })
        .collect()
}

/// Peak signal-to-noise ratio for signals with peak 1.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(XabaError::config(format!(
            "psnr: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Mean of per-image PSNR across the batch axis.
pub fn mean_psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let n = a.shape().batch;
    let mut total = 0.0;
    for i in 0..n {
        total += psnr(&a.item(i), &b.item(i))?;
    }
    Ok(total / n as f64)
}

/// Quantizes to 8-bit levels, as a PPM round trip would.
pub fn quantize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = lit::<T>(255.0);
    x.map(|v| (v.max(T::zero()).min(T::one()) * k + lit(0.5)).floor() / k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_range_and_determinism() {
        let a: Tensor<f32> = texture(80, 80, &mut ChaCha8Rng::seed_from_u64(1));
        let b: Tensor<f32> = texture(80, 80, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (lo, hi) = a
            .data()
            .iter()
            .fold((1.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(lo < 0.01 && hi > 0.99);
    }

    #[test]
    fn block_shift_is_a_per_block_permutation() {
        let img: Tensor<f32> = texture(40, 40, &mut ChaCha8Rng::seed_from_u64(2));
        let shifted = shift_blocks(&img, 20, |r, c| (r as isize * 3 - 2, c as isize + 5)).unwrap();
        let back =
            shift_blocks(&shifted, 20, |r, c| (2 - r as isize * 3, -(c as isize) - 5)).unwrap();
        assert_eq!(back, img);
        assert_eq!(shift_blocks(&img, 20, |_, _| (0, 0)).unwrap(), img);
        // Each block keeps its own pixels.
        let blk = |t: &Tensor<f32>| -> Vec<u32> {
            let mut v = Vec::new();
            for c in 0..3 {
                for y in 0..20 {
                    for x in 0..20 {
                        v.push(t.at(0, c, y, x).to_bits());
                    }
                }
            }
            v.sort_unstable();
            v
        };
        assert_eq!(blk(&img), blk(&shifted));
        assert!(shift_blocks(&img, 7, |_, _| (0, 0)).is_err());
    }

    #[test]
    fn datasets() {
        let pairs = block_shift_pairs::<f32>(3, 40, 20, 8, 5).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert_eq!(p.truth, p.reference);
            assert_eq!(p.target.shape(), Shape::new(1, 3, 40, 40));
        }
        assert_eq!(pairs, block_shift_pairs::<f32>(3, 40, 20, 8, 5).unwrap());
        let g = global_shift_pairs::<f32>(2, 40, 30, 1);
        assert_eq!(g[0].target.shape(), g[0].reference.shape());
    }

    #[test]
    fn roll_inverse() {
        let img: Tensor<f64> = texture(16, 24, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(roll(&roll(&img, 5, -30), -5, 30), img);
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        let b = Tensor::<f64>::full(a.shape(), 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let two = Tensor::stack(&[&a, &a]).unwrap();
        let other = Tensor::stack(&[&b, &Tensor::full(a.shape(), 0.01)]).unwrap();
        assert!((mean_psnr(&two, &other).unwrap() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn quantize_levels() {
        let x = Tensor::<f32>::new(Shape::new(1, 1, 1, 4), vec![-0.5, 0.0, 0.5, 2.0]).unwrap();
        let q = quantize(&x);
        assert_eq!(q.data(), &[0.0, 0.0, 128.0 / 255.0, 1.0]);
    }
}
