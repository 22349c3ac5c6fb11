//! Dense numerics shared by the model, the lenses and the trainer.
//!
//! Everything is row-major and generic over [`Real`] so the same code runs in
//! 32-bit for inference and 64-bit for finite-difference gradient checks.
//!
//! Randomness comes from ChaCha20 (a counter-based stream cipher). A
//! generator is identified by its 64-bit seed and its word position in the
//! stream, which makes draws portable across platforms.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point scalar used throughout the workbench.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A shaped, row-major array with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> RealTensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![F::zero(); n] }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[F] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let cols = self.shape[self.shape.len() - 1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn cast<G: Real>(&self) -> RealTensor<G> {
        RealTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::lit(x.as_f64())).collect(),
        }
    }
}

pub fn check_finite<F: Real>(xs: &[F], what: &str) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NumericDomain(format!("non-finite {what} entry at index {i}"))),
        None => Ok(()),
    }
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Row-wise linear map: `x` is `[rows × n_in]`, `w` is `[n_out × n_in]`,
/// the result is `[rows × n_out]` with `y[r] = w · x[r]`.
pub fn linear<F: Real>(x: &[F], w: &[F], n_out: usize, n_in: usize) -> Vec<F> {
    let rows = x.len() / n_in;
    let mut y = vec![F::zero(); rows * n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let yr = &mut y[r * n_out..(r + 1) * n_out];
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(&w[o * n_in..(o + 1) * n_in], xr);
        }
    }
    y
}

/// Backward of [`linear`]: accumulates into `dx` (when given) and `dw`.
pub fn linear_backward<F: Real>(
    dy: &[F],
    x: &[F],
    w: &[F],
    n_out: usize,
    n_in: usize,
    dx: Option<&mut [F]>,
    dw: &mut [F],
) {
    let rows = dy.len() / n_out;
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        for (o, &g) in dyr.iter().enumerate() {
            if g != F::zero() {
                axpy(g, xr, &mut dw[o * n_in..(o + 1) * n_in]);
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * n_out..(r + 1) * n_out];
            let dxr = &mut dx[r * n_in..(r + 1) * n_in];
            for (o, &g) in dyr.iter().enumerate() {
                if g != F::zero() {
                    axpy(g, &w[o * n_in..(o + 1) * n_in], dxr);
                }
            }
        }
    }
}

/// `1 / sqrt(mean(x²) + eps)`
pub fn inv_rms<F: Real>(x: &[F], eps: F) -> F {
    let ms = dot(x, x) / F::lit(x.len() as f64);
    F::one() / (ms + eps).sqrt()
}

/// `gain ⊙ x · scale`; the normalization step with an externally supplied scale.
pub fn scale_by<F: Real>(x: &[F], gain: &[F], scale: F) -> Vec<F> {
    x.iter().zip(gain).map(|(&xi, &gi)| gi * (xi * scale)).collect()
}

/// Root-mean-square normalization `gain ⊙ x / sqrt(mean(x²) + eps)`.
///
/// The zero vector maps to zero when `eps > 0`; with `eps = 0` it is a
/// numeric-domain error.
pub fn rms_norm<F: Real>(x: &[F], gain: &[F], eps: F) -> Result<Vec<F>> {
    if x.is_empty() || x.len() != gain.len() {
        return Err(Error::Shape(format!("rms_norm of {} values with {} gains", x.len(), gain.len())));
    }
    if eps < F::zero() {
        return Err(Error::NumericDomain("negative epsilon".into()));
    }
    check_finite(x, "rms_norm input")?;
    let scale = inv_rms(x, eps);
    if !scale.is_finite() {
        return Err(Error::NumericDomain("rms of zero vector with eps = 0".into()));
    }
    Ok(scale_by(x, gain, scale))
}

/// Softmax with max subtraction; `masked` indices receive exactly zero.
pub fn softmax_row<F: Real>(scores: &[F], masked: &[usize]) -> Result<Vec<F>> {
    let keep: Vec<bool> = (0..scores.len()).map(|i| !masked.contains(&i)).collect();
    if !keep.iter().any(|&k| k) {
        return Err(Error::DegenerateMask);
    }
    check_finite(scores, "softmax score")?;
    Ok(softmax_kept(scores, &keep))
}

fn softmax_kept<F: Real>(scores: &[F], keep: &[bool]) -> Vec<F> {
    let max = scores
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&s, _)| s)
        .fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = scores
        .iter()
        .zip(keep)
        .map(|(&s, &k)| if k { (s - max).exp() } else { F::zero() })
        .collect();
    let total: F = out.iter().copied().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// In-place causal softmax over the prefix `row[..=q]`; entries after `q` become zero.
pub fn causal_softmax_inplace<F: Real>(row: &mut [F], q: usize) {
    let max = row[..=q].iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in &mut row[..=q] {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in &mut row[..=q] {
        *v /= total;
    }
    for v in &mut row[q + 1..] {
        *v = F::zero();
    }
}

pub fn log_sum_exp<F: Real>(xs: &[F]) -> F {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn softmax<F: Real>(xs: &[F]) -> Vec<F> {
    softmax_kept(xs, &vec![true; xs.len()])
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax<F: Real>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Reproducible random stream: ChaCha20 keyed by `seed`, positioned by word offset.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha20Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    pub fn at(seed: u64, position: u64) -> Self {
        let mut s = Self::new(seed);
        s.rng.set_word_pos(position as u128);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Derive an independent stream, e.g. one per worker or per noise sample.
    pub fn fork(&self, tag: u64) -> Self {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)
            ^ self.position();
        Self::new(mixed)
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::gen_range(&mut self.rng, 0..n)
    }
}

/// `count` Gaussian draws with the given mean and standard deviation.
/// `std = 0` returns the constant mean without consuming randomness.
pub fn gaussian_draw<F: Real>(rng: &mut RngState, count: usize, mean: F, std: F) -> Vec<F> {
    if std == F::zero() {
        return vec![mean; count];
    }
    (0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng.rng);
            mean + std * F::lit(z)
        })
        .collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn rms_norm_of_ones_is_ones() {
        let y = rms_norm(&[1.0f64; 4], &[1.0; 4], 0.0).unwrap();
        assert_eq!(y, vec![1.0; 4]);
    }

    #[test]
    fn rms_norm_three_four() {
        // mean(9, 16) = 12.5
        let y = rms_norm(&[3.0f64, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert_abs_diff_eq!(y[0], 3.0 / 12.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 4.0 / 12.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(y[0], 0.8485, epsilon = 1e-4);
        assert_abs_diff_eq!(y[1], 1.1314, epsilon = 1e-4);
    }

    #[test]
    fn rms_norm_zero_vector() {
        let y = rms_norm(&[0.0f32, 0.0], &[2.0, 5.0], 1e-6).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        assert!(matches!(rms_norm(&[0.0f32, 0.0], &[1.0, 1.0], 0.0), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn rms_norm_rejects_nan() {
        assert!(matches!(rms_norm(&[f32::NAN, 1.0], &[1.0, 1.0], 1e-6), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_row(&[2.5f64, 2.5, 2.5], &[]).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let p = softmax_row(&[0.0f64, 2.0f64.ln()], &[]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 2.0 / 3.0, epsilon = 1e-12);

        let p = softmax_row(&[5.0f64, 9.0, 2.0], &[1]).unwrap();
        let e5 = 5.0f64.exp();
        let e2 = 2.0f64.exp();
        let expect = e5 / (e5 + e2);
        assert_abs_diff_eq!(p[0], expect, epsilon = 1e-12);
        assert_eq!(p[1], 0.0);
        assert_abs_diff_eq!(p[2], 1.0 - expect, epsilon = 1e-12);
    }

    #[test]
    fn softmax_all_masked() {
        assert!(matches!(softmax_row(&[1.0f32, 2.0], &[0, 1]), Err(Error::DegenerateMask)));
    }

    #[test]
    fn argmax_tie_goes_low() {
        let mut xs = vec![0.0f32; 12];
        xs[4] = 3.0;
        xs[9] = 3.0;
        assert_eq!(argmax(&xs), 4);
    }

    #[test]
    fn gaussian_zero_std() {
        let mut rng = RngState::new(7);
        assert_eq!(gaussian_draw(&mut rng, 3, 0.0f64, 0.0), vec![0.0; 3]);
        assert_eq!(rng.position(), 0);
    }

    #[test]
    fn gaussian_seed_42_golden() {
        let mut rng = RngState::new(42);
        let pair = gaussian_draw::<f64>(&mut rng, 2, 0.0, 1.0);
        // Frozen from ChaCha20(seed_from_u64(42)) + ziggurat StandardNormal.
        assert_eq!(pair.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), GOLDEN_SEED_42.to_vec());
        assert!(rng.position() > 0);
        let mut again = RngState::new(42);
        assert_eq!(gaussian_draw::<f64>(&mut again, 2, 0.0, 1.0), pair);
    }

    const GOLDEN_SEED_42: [u64; 2] = [4586599339267580678, 13821389916875028419];

    #[test]
    fn gaussian_resume_from_position() {
        let mut a = RngState::new(9);
        let _ = gaussian_draw::<f64>(&mut a, 5, 0.0, 1.0);
        let mut b = RngState::at(9, a.position());
        assert_eq!(gaussian_draw::<f64>(&mut a, 4, 0.0, 1.0), gaussian_draw::<f64>(&mut b, 4, 0.0, 1.0));
    }

    #[test]
    fn gaussian_sample_mean() {
        let mut rng = RngState::new(1234);
        let xs = gaussian_draw::<f64>(&mut rng, 1_000_000, 0.0, 1.0);
        let (m, s) = mean_std(&xs);
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((s - 1.0).abs() < 0.01, "std {s}");
    }

    #[test]
    fn tensor_validates() {
        assert!(RealTensor::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
        assert!(matches!(RealTensor::new(vec![2, 3], vec![0.0f32; 5]), Err(Error::Shape(_))));
        assert!(matches!(RealTensor::new(vec![1], vec![f32::INFINITY]), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn linear_backward_matches_transpose() {
        let x = [1.0f64, 2.0, -1.0, 0.5, 0.0, 3.0];
        let w = [0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
        let y = linear(&x, &w, 2, 3);
        assert_abs_diff_eq!(y[0], 0.1 + 0.4 - 0.3, epsilon = 1e-12);
        let dy = [1.0, 0.0, 0.0, 1.0];
        let mut dx = [0.0; 6];
        let mut dw = [0.0; 6];
        linear_backward(&dy, &x, &w, 2, 3, Some(&mut dx), &mut dw);
        assert_eq!(&dx[..3], &w[..3]);
        assert_eq!(&dx[3..], &w[3..]);
        assert_eq!(&dw[..3], &x[..3]);
        assert_eq!(&dw[3..], &x[3..]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_is_probability(scores in prop::collection::vec(-30.0f64..30.0, 1..24), mask_bits in any::<u32>()) {
            let n = scores.len();
            let mut masked: Vec<usize> = (0..n).filter(|i| mask_bits >> (i % 32) & 1 == 1).collect();
            if masked.len() == n {
                masked.pop();
            }
            let p = softmax_row(&scores, &masked).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            for (i, &v) in p.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&v));
                if masked.contains(&i) {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }

        #[test]
        fn rms_norm_scale_invariant(x in prop::collection::vec(-5.0f64..5.0, 1..32), alpha in 0.01f64..100.0) {
            prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
            let gain = vec![1.0; x.len()];
            let a = rms_norm(&x, &gain, 0.0).unwrap();
            let scaled: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            let b = rms_norm(&scaled, &gain, 0.0).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-5);
            }
        }

        #[test]
        fn gaussian_reproducible(seed in any::<u64>(), count in 1usize..64) {
            let a = gaussian_draw::<f32>(&mut RngState::new(seed), count, 0.5, 2.0);
            let b = gaussian_draw::<f32>(&mut RngState::new(seed), count, 0.5, 2.0);
            prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
