//! Two-dimensional discrete Fourier transforms over `[C, H, W]` maps.
//!
//! Forward transforms are unnormalized; inverse transforms carry the
//! `1/(H*W)` factor. Power-of-two extents use an iterative radix-2 kernel;
//! any other extent falls back to a direct O(n^2) DFT so that feature grids
//! such as 14x14 still work.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Complex tensor stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T> {
    shape: Vec<usize>,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        re.check_same_shape(&im)?;
        let shape = re.shape().to_vec();
        Ok(Self {
            shape,
            re: re.into_data(),
            im: im.into_data(),
        })
    }

    pub fn from_real(x: &Tensor<T>) -> Self {
        Self {
            shape: x.shape().to_vec(),
            re: x.data().to_vec(),
            im: vec![T::zero(); x.len()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            re: vec![T::zero(); n],
            im: vec![T::zero(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [T] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [T] {
        &mut self.im
    }

    pub fn get(&self, i: usize) -> Complex<T> {
        Complex::new(self.re[i], self.im[i])
    }

    pub fn set(&mut self, i: usize, z: Complex<T>) {
        self.re[i] = z.re;
        self.im[i] = z.im;
    }

    pub fn real_part(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.re.clone()).expect("shape invariant")
    }

    pub fn imag_part(&self) -> Tensor<T> {
        Tensor::new(self.shape.clone(), self.im.clone()).expect("shape invariant")
    }

    /// Pointwise modulus `|x|`, always non-negative.
    pub fn amplitude(&self) -> Tensor<T> {
        Tensor::from_fn(&self.shape, |i| self.re[i].hypot(self.im[i]))
    }

    /// Pointwise argument in `(-pi, pi]`.
    pub fn phase(&self) -> Tensor<T> {
        Tensor::from_fn(&self.shape, |i| {
            let p = self.im[i].atan2(self.re[i]);
            if p == -T::PI() {
                T::PI()
            } else {
                p
            }
        })
    }

    /// Sum of squared moduli.
    pub fn energy(&self) -> T {
        self.re.iter().zip(&self.im).map(|(&a, &b)| a * a + b * b).sum()
    }
}

/// In-place unnormalized 1-D transform. `inverse` flips the twiddle sign only.
pub fn fft1d<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        direct_dft(buf, inverse);
    }
}

fn twiddle<T: Scalar>(k: usize, n: usize, inverse: bool) -> Complex<T> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let angle = sign * 2.0 * std::f64::consts::PI * (k as f64) / (n as f64);
    Complex::new(T::lit(angle.cos()), T::lit(angle.sin()))
}

fn radix2<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        // twiddles for this stage, computed directly from the angle
        let tw: Vec<Complex<T>> = (0..half).map(|k| twiddle(k, len, inverse)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * tw[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn direct_dft<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    let tw: Vec<Complex<T>> = (0..n).map(|k| twiddle(k, n, inverse)).collect();
    let src = buf.to_vec();
    for (k, out) in buf.iter_mut().enumerate() {
        let mut acc = Complex::new(T::zero(), T::zero());
        for (j, &x) in src.iter().enumerate() {
            acc = acc + x * tw[(j * k) % n];
        }
        *out = acc;
    }
}

fn check_map_shape(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        [_, _, _] => Err(Error::EmptyDimension(shape.to_vec())),
        _ => Err(Error::Shape(format!("expected [C, H, W], got {shape:?}"))),
    }
}

/// Unnormalized 2-D transform of every channel of a complex `[C, H, W]` tensor,
/// in place. With `inverse` the twiddle sign flips but no scaling is applied.
pub fn fft2_complex_inplace<T: Scalar>(z: &mut ComplexTensor<T>, inverse: bool) -> Result<()> {
    let (c, h, w) = check_map_shape(z.shape())?;
    let mut row = vec![Complex::new(T::zero(), T::zero()); w];
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            let off = base + y * w;
            for (x, v) in row.iter_mut().enumerate() {
                *v = z.get(off + x);
            }
            fft1d(&mut row, inverse);
            for (x, v) in row.iter().enumerate() {
                z.set(off + x, *v);
            }
        }
        for x in 0..w {
            for (y, v) in col.iter_mut().enumerate() {
                *v = z.get(base + y * w + x);
            }
            fft1d(&mut col, inverse);
            for (y, v) in col.iter().enumerate() {
                z.set(base + y * w + x, *v);
            }
        }
    }
    Ok(())
}

/// Forward, unnormalized 2-D DFT of each channel of a real `[C, H, W]` map.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<ComplexTensor<T>> {
    check_map_shape(x.shape())?;
    let mut z = ComplexTensor::from_real(x);
    fft2_complex_inplace(&mut z, false)?;
    Ok(z)
}

/// Inverse 2-D DFT including the `1/(H*W)` factor, complex result.
pub fn ifft2_complex<T: Scalar>(x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let (_, h, w) = check_map_shape(x.shape())?;
    let mut z = x.clone();
    fft2_complex_inplace(&mut z, true)?;
    let s = T::one() / T::lit((h * w) as f64);
    z.re_mut().iter_mut().for_each(|v| *v = *v * s);
    z.im_mut().iter_mut().for_each(|v| *v = *v * s);
    Ok(z)
}

/// Inverse 2-D DFT of a spectrum that should be real-representable.
///
/// The imaginary residue must stay below `1e-6 * max(1, max|re|)`; anything
/// larger means the input spectrum was not conjugate-symmetric.
pub fn ifft2<T: Scalar>(x: &ComplexTensor<T>) -> Result<Tensor<T>> {
    let z = ifft2_complex(x)?;
    let peak = z.re().iter().fold(T::one(), |m, v| m.max(v.abs()));
    let residue = z.im().iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let tolerance = T::lit(1e-6) * peak;
    if residue > tolerance {
        return Err(Error::ImaginaryResidue {
            residue: residue.to_f64_lossy(),
            tolerance: tolerance.to_f64_lossy(),
        });
    }
    Ok(z.real_part())
}

/// Real part of the inverse transform, no residue check.
pub fn ifft2_real<T: Scalar>(x: &ComplexTensor<T>) -> Result<Tensor<T>> {
    Ok(ifft2_complex(x)?.real_part())
}
