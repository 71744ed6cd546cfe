//! Complex scalars, row-major complex tensors and the two linear operations
//! the network is made of: dense matrix-vector products and valid 3x3
//! convolutions.

use std::fmt::{Debug, Display};

use matrixmultiply::{cgemm, zgemm, CGemmOption};
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// A complex scalar. `re`/`im` are the two real components.
pub type ComplexValue<T> = num_complex::Complex<T>;

/// Spatial extent of every convolution kernel.
pub const KERNEL_SIZE: usize = 3;

/// Real scalar width used by the network. `f32` is the training precision;
/// `f64` exists for gradient checks.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Tag written into model files.
    const DTYPE: &'static str;

    /// `C <- A B + beta C` on complex matrices with arbitrary positive strides.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds of the matching pointer's allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const ComplexValue<Self>,
        rsa: isize,
        csa: isize,
        b: *const ComplexValue<Self>,
        rsb: isize,
        csb: isize,
        beta: ComplexValue<Self>,
        c: *mut ComplexValue<Self>,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const ComplexValue<f32>,
        rsa: isize,
        csa: isize,
        b: *const ComplexValue<f32>,
        rsb: isize,
        csb: isize,
        beta: ComplexValue<f32>,
        c: *mut ComplexValue<f32>,
        rsc: isize,
        csc: isize,
    ) {
        // Complex<f32> is repr(C) { re, im }, identical to [f32; 2].
        cgemm(
            CGemmOption::Standard,
            CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.cast(),
            rsa,
            csa,
            b.cast(),
            rsb,
            csb,
            [beta.re, beta.im],
            c.cast(),
            rsc,
            csc,
        )
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const ComplexValue<f64>,
        rsa: isize,
        csa: isize,
        b: *const ComplexValue<f64>,
        rsb: isize,
        csb: isize,
        beta: ComplexValue<f64>,
        c: *mut ComplexValue<f64>,
        rsc: isize,
        csc: isize,
    ) {
        zgemm(
            CGemmOption::Standard,
            CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.cast(),
            rsa,
            csa,
            b.cast(),
            rsb,
            csb,
            [beta.re, beta.im],
            c.cast(),
            rsc,
            csc,
        )
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Strided view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T: Real> {
    pub data: &'a [ComplexValue<T>],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Real> MatRef<'a, T> {
    pub fn row_major(data: &'a [ComplexValue<T>], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [ComplexValue<T>], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// `C <- A B + beta C` where `A` is `m x k`, `B` is `k x n` and `C` is a
/// row-major `m x n` block with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    accumulate: bool,
    c: &mut [ComplexValue<T>],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!((m - 1) * rsc + n <= c.len(), "output view out of bounds");
    assert!(rsc >= n, "output rows overlap");
    let beta = if accumulate {
        ComplexValue::new(T::one(), T::zero())
    } else {
        ComplexValue::new(T::zero(), T::zero())
    };
    if k == 0 {
        if !accumulate {
            for row in 0..m {
                c[row * rsc..row * rsc + n].fill(ComplexValue::default());
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above for the given
    // dimensions, and `c` is uniquely borrowed with non-aliasing strides.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

/// Complex product.
#[inline]
pub fn cmul<T: Real>(a: ComplexValue<T>, b: ComplexValue<T>) -> ComplexValue<T> {
    ComplexValue::new(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)
}

/// Unit phasor `e^{i theta}`.
#[inline]
pub fn phasor<T: Real>(theta: T) -> ComplexValue<T> {
    ComplexValue::new(theta.cos(), theta.sin())
}

/// Shaped, row-major array of complex values.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<ComplexValue<T>>,
}

impl<T: Real> ComplexTensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            data: vec![ComplexValue::default(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<ComplexValue<T>>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension {
                context: "tensor data length",
                expected: vec![len],
                actual: vec![data.len()],
            });
        }
        Ok(ComplexTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Unit phasors with the given phases, as a flat vector.
    pub fn from_phases(phases: &[T]) -> Self {
        ComplexTensor {
            shape: vec![phases.len()],
            data: phases.iter().map(|&p| phasor(p)).collect(),
        }
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

    pub fn data(&self) -> &[ComplexValue<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [ComplexValue<T>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<ComplexValue<T>> {
        self.data
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Dimension {
                context: "reshape",
                expected: self.shape.clone(),
                actual: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, e)| i >= e) {
            return Err(Error::Dimension {
                context: "tensor index",
                expected: self.shape.clone(),
                actual: index.to_vec(),
            });
        }
        Ok(index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| acc * extent + i))
    }

    /// Inverse of [`offset`](Self::offset).
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0; self.shape.len()];
        for (slot, &extent) in index.iter_mut().zip(&self.shape).rev() {
            *slot = offset % extent;
            offset /= extent;
        }
        index
    }

    pub fn get(&self, index: &[usize]) -> Result<ComplexValue<T>> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: ComplexValue<T>) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn phases(&self) -> Vec<T> {
        self.data.iter().map(|z| z.arg()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Dense affine map `W h + b` for `W: [M, N]`, `h: [N]`, `b: [M]`.
pub fn matvec<T: Real>(
    w: &ComplexTensor<T>,
    h: &ComplexTensor<T>,
    b: &ComplexTensor<T>,
) -> Result<ComplexTensor<T>> {
    let (m, n) = match *w.shape() {
        [m, n] => (m, n),
        _ => {
            return Err(Error::Dimension {
                context: "matvec weight rank",
                expected: vec![0, 0],
                actual: w.shape().to_vec(),
            })
        }
    };
    if h.len() != n {
        return Err(Error::Dimension {
            context: "matvec input",
            expected: vec![m, n],
            actual: h.shape().to_vec(),
        });
    }
    if b.len() != m {
        return Err(Error::Dimension {
            context: "matvec bias",
            expected: vec![m],
            actual: b.shape().to_vec(),
        });
    }
    let mut out = b.data().to_vec();
    gemm(
        m,
        n,
        1,
        MatRef::row_major(w.data(), n),
        MatRef::row_major(h.data(), 1),
        true,
        &mut out,
        1,
    );
    ComplexTensor::from_vec(&[m], out)
}

/// Output spatial extent of a valid 3x3 convolution.
pub fn conv_output_extent(extent: usize) -> usize {
    extent + 1 - KERNEL_SIZE
}

/// Unfolds a `[C, H, W]` input into a `[C*9, OH*OW]` patch matrix.
pub(crate) fn im2col<T: Real>(
    input: &[ComplexValue<T>],
    channels: usize,
    height: usize,
    width: usize,
    col: &mut [ComplexValue<T>],
) {
    let (oh, ow) = (conv_output_extent(height), conv_output_extent(width));
    let p = oh * ow;
    debug_assert_eq!(col.len(), channels * KERNEL_SIZE * KERNEL_SIZE * p);
    for c in 0..channels {
        let plane = &input[c * height * width..(c + 1) * height * width];
        for ky in 0..KERNEL_SIZE {
            for kx in 0..KERNEL_SIZE {
                let row = (c * KERNEL_SIZE + ky) * KERNEL_SIZE + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &plane[(oy + ky) * width + kx..(oy + ky) * width + kx + ow];
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
}

/// Scatter-adds a `[C*9, OH*OW]` patch-gradient matrix back onto `[C, H, W]`.
pub(crate) fn col2im_add<T: Real>(
    col: &[ComplexValue<T>],
    channels: usize,
    height: usize,
    width: usize,
    out: &mut [ComplexValue<T>],
) {
    let (oh, ow) = (conv_output_extent(height), conv_output_extent(width));
    let p = oh * ow;
    for c in 0..channels {
        let plane = &mut out[c * height * width..(c + 1) * height * width];
        for ky in 0..KERNEL_SIZE {
            for kx in 0..KERNEL_SIZE {
                let row = (c * KERNEL_SIZE + ky) * KERNEL_SIZE + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let dst = &mut plane[(oy + ky) * width + kx..(oy + ky) * width + kx + ow];
                    for (d, s) in dst.iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

/// Stride-1, unpadded 3x3 cross-correlation with complex multiply-accumulate.
///
/// `input: [C, H, W]`, `kernels: [F, C, 3, 3]`, `bias: [F]` gives
/// `[F, H-2, W-2]`.
pub fn conv2d_valid<T: Real>(
    input: &ComplexTensor<T>,
    kernels: &ComplexTensor<T>,
    bias: &ComplexTensor<T>,
) -> Result<ComplexTensor<T>> {
    let (c, h, w) = match *input.shape() {
        [c, h, w] if h >= KERNEL_SIZE && w >= KERNEL_SIZE => (c, h, w),
        _ => {
            return Err(Error::Dimension {
                context: "conv input must be [C, H>=3, W>=3]",
                expected: vec![0, KERNEL_SIZE, KERNEL_SIZE],
                actual: input.shape().to_vec(),
            })
        }
    };
    let f = match *kernels.shape() {
        [f, kc, KERNEL_SIZE, KERNEL_SIZE] if kc == c => f,
        _ => {
            return Err(Error::Dimension {
                context: "conv kernel channels",
                expected: vec![kernels.shape().first().copied().unwrap_or(0), c, 3, 3],
                actual: kernels.shape().to_vec(),
            })
        }
    };
    if bias.len() != f {
        return Err(Error::Dimension {
            context: "conv bias",
            expected: vec![f],
            actual: bias.shape().to_vec(),
        });
    }
    let (oh, ow) = (conv_output_extent(h), conv_output_extent(w));
    let p = oh * ow;
    let rows = c * KERNEL_SIZE * KERNEL_SIZE;
    let mut col = vec![ComplexValue::default(); rows * p];
    im2col(input.data(), c, h, w, &mut col);
    let mut out = Vec::with_capacity(f * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, p));
    }
    gemm(
        f,
        rows,
        p,
        MatRef::row_major(kernels.data(), rows),
        MatRef::row_major(&col, p),
        true,
        &mut out,
        p,
    );
    ComplexTensor::from_vec(&[f, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type C = ComplexValue<f64>;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> ComplexTensor<f64> {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ComplexTensor::from_vec(shape, data).unwrap()
    }

    fn close(a: C, b: C, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn cmul_identities() {
        let x = C::new(0.3, -1.7);
        assert_eq!(cmul(C::new(1.0, 0.0), x), x);
        assert_eq!(cmul(C::new(0.0, 1.0), C::new(0.0, 1.0)), C::new(-1.0, 0.0));
        let p = cmul(
            phasor(std::f64::consts::FRAC_PI_3),
            phasor(std::f64::consts::FRAC_PI_6),
        );
        assert!(close(p, C::new(0.0, 1.0), 1e-12));
    }

    #[test]
    fn matvec_identity_and_phase_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_tensor(&mut rng, &[4]);
        let mut eye = ComplexTensor::<f64>::zeros(&[4, 4]);
        for i in 0..4 {
            eye.set(&[i, i], C::new(1.0, 0.0)).unwrap();
        }
        let out = matvec(&eye, &h, &ComplexTensor::zeros(&[4])).unwrap();
        assert_eq!(out, h);

        let w = ComplexTensor::from_vec(&[1, 1], vec![phasor(0.4)]).unwrap();
        let x = ComplexTensor::from_vec(&[1], vec![phasor(1.1)]).unwrap();
        let out = matvec(&w, &x, &ComplexTensor::zeros(&[1])).unwrap();
        assert!(close(out.data()[0], phasor(1.5), 1e-12));
    }

    #[test]
    fn matvec_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_tensor(&mut rng, &[3, 4]);
        let h = random_tensor(&mut rng, &[4]);
        let b = random_tensor(&mut rng, &[3]);
        let out = matvec(&w, &h, &b).unwrap();
        for i in 0..3 {
            let mut acc = b.data()[i];
            for j in 0..4 {
                let wij = w.get(&[i, j]).unwrap();
                let hj = h.data()[j];
                acc = C::new(
                    acc.re + wij.re * hj.re - wij.im * hj.im,
                    acc.im + wij.re * hj.im + wij.im * hj.re,
                );
            }
            assert!(close(out.data()[i], acc, 1e-10));
        }
    }

    #[test]
    fn matvec_shape_errors_name_both_shapes() {
        let w = ComplexTensor::<f64>::zeros(&[3, 4]);
        let h = ComplexTensor::<f64>::zeros(&[5]);
        let err = matvec(&w, &h, &ComplexTensor::zeros(&[3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[5]"), "{msg}");
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, &[1, 3, 3]);
        let k = ComplexTensor::zeros(&[1, 1, 3, 3]);
        let beta = C::new(0.25, -2.0);
        let bias = ComplexTensor::from_vec(&[1], vec![beta]).unwrap();
        let out = conv2d_valid(&input, &k, &bias).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], beta);
    }

    #[test]
    fn conv_delta_kernel_crops_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_tensor(&mut rng, &[1, 6, 5]);
        let mut k = ComplexTensor::zeros(&[1, 1, 3, 3]);
        k.set(&[0, 0, 1, 1], C::new(1.0, 0.0)).unwrap();
        let out = conv2d_valid(&input, &k, &ComplexTensor::zeros(&[1])).unwrap();
        assert_eq!(out.shape(), &[1, 4, 3]);
        for y in 0..4 {
            for x in 0..3 {
                let expected = input.get(&[0, y + 1, x + 1]).unwrap();
                assert!(close(out.get(&[0, y, x]).unwrap(), expected, 1e-14));
            }
        }
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_tensor(&mut rng, &[2, 5, 5]);
        let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = random_tensor(&mut rng, &[3]);
        let out = conv2d_valid(&input, &k, &b).unwrap();
        for f in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let mut acc = b.data()[f];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let kv = k.get(&[f, c, ky, kx]).unwrap();
                                let iv = input.get(&[c, y + ky, x + kx]).unwrap();
                                acc = C::new(
                                    acc.re + kv.re * iv.re - kv.im * iv.im,
                                    acc.im + kv.re * iv.im + kv.im * iv.re,
                                );
                            }
                        }
                    }
                    assert!(close(out.get(&[f, y, x]).unwrap(), acc, 1e-10));
                }
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let input = ComplexTensor::<f64>::zeros(&[2, 5, 5]);
        let k = ComplexTensor::zeros(&[3, 1, 3, 3]);
        assert!(matches!(
            conv2d_valid(&input, &k, &ComplexTensor::zeros(&[3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for the real bilinear pairing.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, &[2, 5, 4]);
        let y = random_tensor(&mut rng, &[2 * 9 * 3 * 2]);
        let mut col = vec![C::default(); y.len()];
        im2col(x.data(), 2, 5, 4, &mut col);
        let lhs: C = col.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let mut back = vec![C::default(); x.len()];
        col2im_add(y.data(), 2, 5, 4, &mut back);
        let rhs: C = back.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!(close(lhs, rhs, 1e-12));
    }

    #[test]
    fn offset_round_trips() {
        let t = ComplexTensor::<f32>::zeros(&[3, 4, 5]);
        for off in 0..t.len() {
            assert_eq!(t.offset(&t.unravel(off)).unwrap(), off);
        }
        assert!(t.offset(&[3, 0, 0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cval() -> impl Strategy<Value = C> {
            (-1e3f64..1e3, -1e3f64..1e3).prop_map(|(a, b)| C::new(a, b))
        }

        proptest! {
            #[test]
            fn cmul_commutes(a in cval(), b in cval()) {
                prop_assert_eq!(cmul(a, b), cmul(b, a));
            }

            #[test]
            fn cmul_associates(a in cval(), b in cval(), c in cval()) {
                let l = cmul(cmul(a, b), c);
                let r = cmul(a, cmul(b, c));
                let scale = a.norm() * b.norm() * c.norm();
                prop_assert!((l - r).norm() <= 1e-14 * scale.max(1e-300));
            }

            #[test]
            fn cmul_magnitude_multiplies(a in cval(), b in cval()) {
                let m = cmul(a, b).norm();
                let expected = a.norm() * b.norm();
                prop_assert!((m - expected).abs() <= 1e-12 * expected.max(1e-300));
            }
        }
    }
}
