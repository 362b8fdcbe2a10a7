//! Single-channel images, 2-D convolution and the noise-robust Laplacian
//! used as the autofocus sharpness signal.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImagingError {
    #[error("kernel {kh}x{kw} does not fit image {rows}x{cols}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        rows: usize,
        cols: usize,
    },
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("kernel dimensions must be odd, got {0}x{1}")]
    EvenKernel(usize, usize),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Row-major 2-D scalar field.
#[derive(Clone, PartialEq)]
pub struct ImageBuffer<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageBuffer<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ImagingError> {
        if rows == 0 || cols == 0 {
            return Err(ImagingError::Invalid(format!("empty image {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(ImagingError::Invalid(format!(
                "{} values for {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics on zero dimensions.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| T::zero())
    }

    /// Panics on zero dimensions.
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Pixel at a possibly out-of-range coordinate, clamped to the border.
    #[inline]
    fn replicated(&self, r: isize, c: isize) -> T {
        let r = r.clamp(0, self.rows as isize - 1) as usize;
        let c = c.clamp(0, self.cols as isize - 1) as usize;
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "image shapes differ");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Plain text grid: a `rows cols` header line followed by one line of
    /// whitespace-separated values per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if c > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{}", self.get(r, c));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ImagingError>
    where
        T: FromStr,
    {
        let mut tokens = text.split_whitespace();
        let mut dim = |what: &str| -> Result<usize, ImagingError> {
            tokens
                .next()
                .ok_or_else(|| ImagingError::Parse(format!("missing {what}")))?
                .parse()
                .map_err(|_| ImagingError::Parse(format!("bad {what}")))
        };
        let rows = dim("rows")?;
        let cols = dim("cols")?;
        let data = tokens
            .map(|t| {
                t.parse::<T>()
                    .map_err(|_| ImagingError::Parse(format!("bad value {t:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rows, cols, data)
    }
}

impl<T: Scalar> fmt::Debug for ImageBuffer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.rows, self.cols)
    }
}

/// Convolution kernel with odd dimensions; the anchor is the center tap.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D<T> {
    height: usize,
    width: usize,
    taps: Vec<T>,
}

impl<T: Scalar> Kernel2D<T> {
    pub fn new(height: usize, width: usize, taps: Vec<T>) -> Result<Self, ImagingError> {
        if height.is_multiple_of(2) || width.is_multiple_of(2) {
            return Err(ImagingError::EvenKernel(height, width));
        }
        if taps.len() != height * width {
            return Err(ImagingError::Invalid(format!(
                "{} taps for {height}x{width} kernel",
                taps.len()
            )));
        }
        Ok(Self {
            height,
            width,
            taps,
        })
    }

    /// `col ⊗ row`: entry (i, j) is `col[i] * row[j]`.
    pub fn outer(col: &[T], row: &[T]) -> Result<Self, ImagingError> {
        let mut taps = Vec::with_capacity(col.len() * row.len());
        for &a in col {
            for &b in row {
                taps.push(a * b);
            }
        }
        Self::new(col.len(), row.len(), taps)
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self, ImagingError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let taps: Vec<T> = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(height, width, taps)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn taps(&self) -> &[T] {
        &self.taps
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.taps[i * self.width + j]
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Self {
            height: self.height,
            width: self.width,
            taps: self
                .taps
                .iter()
                .zip(&other.taps)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }
}

/// True 2-D convolution (kernel flipped) with replicate padding; the output
/// has the input's size.
pub fn conv2d<T: Scalar>(
    img: &ImageBuffer<T>,
    k: &Kernel2D<T>,
) -> Result<ImageBuffer<T>, ImagingError> {
    if k.height > img.rows || k.width > img.cols {
        return Err(ImagingError::KernelTooLarge {
            kh: k.height,
            kw: k.width,
            rows: img.rows,
            cols: img.cols,
        });
    }
    let ch = (k.height / 2) as isize;
    let cw = (k.width / 2) as isize;
    let mut out = Vec::with_capacity(img.rows * img.cols);
    for r in 0..img.rows as isize {
        for c in 0..img.cols as isize {
            let mut acc = T::zero();
            for i in 0..k.height {
                let rr = r + ch - i as isize;
                for j in 0..k.width {
                    let cc = c + cw - j as isize;
                    acc += k.get(i, j) * img.replicated(rr, cc);
                }
            }
            out.push(acc);
        }
    }
    Ok(ImageBuffer {
        rows: img.rows,
        cols: img.cols,
        data: out,
    })
}

/// 7-tap second-derivative taps (scaled by 1/16). Exact on polynomials up
/// to degree 3 and zero at the Nyquist frequency.
pub const SECOND_DERIVATIVE_TAPS: [f64; 7] = [1.0, 2.0, -1.0, -4.0, -1.0, 2.0, 1.0];
/// 5-tap binomial smoother (scaled by 1/16); unit DC gain, zero at Nyquist.
pub const SMOOTHER_TAPS: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
pub const TAP_SCALE: f64 = 16.0;

pub fn second_derivative_kernel<T: Scalar>() -> [T; 7] {
    SECOND_DERIVATIVE_TAPS.map(|x| T::lit(x / TAP_SCALE))
}

/// The smoother zero-padded to the derivative's length.
pub fn smoother_kernel<T: Scalar>() -> [T; 7] {
    let mut s = [T::zero(); 7];
    for (i, &x) in SMOOTHER_TAPS.iter().enumerate() {
        s[i + 1] = T::lit(x / TAP_SCALE);
    }
    s
}

/// Combined 7×7 kernel `S ⊗ Dxx + Dyy ⊗ S` (rows index y).
pub fn noise_robust_laplacian_kernel<T: Scalar>() -> Kernel2D<T> {
    let d = second_derivative_kernel::<T>();
    let s = smoother_kernel::<T>();
    let dxx = Kernel2D::outer(&s, &d).expect("odd");
    let dyy = Kernel2D::outer(&d, &s).expect("odd");
    dxx.add(&dyy)
}

/// Laplacian estimate that is exact on quadratics yet rejects Nyquist noise.
/// Both separable terms are folded into one kernel so that a single pass
/// produces the result.
pub fn noise_robust_laplacian<T: Scalar>(
    img: &ImageBuffer<T>,
) -> Result<ImageBuffer<T>, ImagingError> {
    conv2d(img, &noise_robust_laplacian_kernel())
}

/// Classical five-point Laplacian, the noisy baseline for comparisons.
pub fn reference_laplacian_kernel<T: Scalar>() -> Kernel2D<T> {
    let o = T::zero();
    let l = T::one();
    Kernel2D::from_rows(&[[o, l, o], [l, T::lit(-4.0), l], [o, l, o]]).expect("3x3")
}

pub fn reference_laplacian<T: Scalar>(
    img: &ImageBuffer<T>,
) -> Result<ImageBuffer<T>, ImagingError> {
    conv2d(img, &reference_laplacian_kernel())
}

/// Maximum absolute value of a Laplacian field.
pub fn sharpness<T: Scalar>(laplacian: &ImageBuffer<T>) -> T {
    laplacian.max_abs()
}

/// Separable Gaussian blur truncated at three standard deviations, with
/// replicate borders. `sigma <= 0` returns a copy.
pub fn gaussian_blur<T: Scalar>(img: &ImageBuffer<T>, sigma: T) -> ImageBuffer<T> {
    if !(sigma > T::zero()) {
        return img.clone();
    }
    let radius = (sigma * T::lit(3.0) + T::lit(0.5)).floor().to_f64_lossy() as isize;
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let mut w: Vec<T> = (-radius..=radius)
        .map(|k| {
            let k = T::lit(k as f64);
            (-(k * k) / two_s2).exp()
        })
        .collect();
    let total = w.iter().fold(T::zero(), |a, &b| a + b);
    for x in &mut w {
        *x /= total;
    }

    let mut tmp = ImageBuffer::zeros(img.rows, img.cols);
    for r in 0..img.rows {
        for c in 0..img.cols {
            let mut acc = T::zero();
            for (i, &wk) in w.iter().enumerate() {
                acc += wk * img.replicated(r as isize, c as isize + i as isize - radius);
            }
            tmp.set(r, c, acc);
        }
    }
    let mut out = ImageBuffer::zeros(img.rows, img.cols);
    for r in 0..img.rows {
        for c in 0..img.cols {
            let mut acc = T::zero();
            for (i, &wk) in w.iter().enumerate() {
                acc += wk * tmp.replicated(r as isize + i as isize - radius, c as isize);
            }
            out.set(r, c, acc);
        }
    }
    out
}

/// `(-1)^(r+c) * amplitude`, the highest-frequency pattern on the grid.
pub fn checkerboard<T: Scalar>(rows: usize, cols: usize, amplitude: T) -> ImageBuffer<T> {
    ImageBuffer::from_fn(rows, cols, |r, c| {
        if (r + c) % 2 == 0 {
            amplitude
        } else {
            -amplitude
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interior<T: Scalar>(img: &ImageBuffer<T>, margin: usize) -> Vec<T> {
        let mut v = Vec::new();
        for r in margin..img.rows() - margin {
            for c in margin..img.cols() - margin {
                v.push(img.get(r, c));
            }
        }
        v
    }

    #[test]
    fn identity_kernel() {
        let img = ImageBuffer::from_fn(5, 6, |r, c| (r * 7 + c) as f64);
        let k = Kernel2D::from_rows(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(conv2d(&img, &k).unwrap(), img);
    }

    #[test]
    fn box_on_one_hot() {
        let mut img = ImageBuffer::<f64>::zeros(7, 7);
        img.set(3, 3, 1.0);
        let k = Kernel2D::new(3, 3, vec![1.0 / 9.0; 9]).unwrap();
        let out = conv2d(&img, &k).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                let inside = (2..=4).contains(&r) && (2..=4).contains(&c);
                assert_eq!(out.get(r, c), if inside { 1.0 / 9.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn convolution_flips_the_kernel() {
        let mut img = ImageBuffer::<f64>::zeros(5, 5);
        img.set(2, 2, 1.0);
        let k = Kernel2D::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]).unwrap();
        let out = conv2d(&img, &k).unwrap();
        assert_eq!(out.get(2, 3), 1.0);
        assert_eq!(out.get(2, 1), 0.0);
    }

    #[test]
    fn oversized_kernel() {
        let img = ImageBuffer::<f64>::zeros(4, 4);
        assert!(matches!(
            noise_robust_laplacian(&img),
            Err(ImagingError::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn laplacian_exact_on_quadratics() {
        let img = ImageBuffer::from_fn(16, 16, |_, c| (c as f64).powi(2));
        for v in interior(&noise_robust_laplacian(&img).unwrap(), 3) {
            assert!((v - 2.0).abs() < 1e-9);
        }
        let img =
            ImageBuffer::from_fn(16, 16, |r, c| 0.5 * (r as f64).powi(2) + (c as f64).powi(2));
        for v in interior(&noise_robust_laplacian(&img).unwrap(), 3) {
            assert!((v - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_and_constant_rejected() {
        let img = ImageBuffer::from_fn(12, 12, |r, c| r as f64 + 2.0 * c as f64 - 3.0);
        for v in interior(&noise_robust_laplacian(&img).unwrap(), 3) {
            assert!(v.abs() <= 1e-12);
        }
        let flat = ImageBuffer::from_fn(9, 9, |_, _| 4.2);
        assert!(noise_robust_laplacian(&flat).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn checkerboard_attenuated() {
        let img = checkerboard::<f64>(16, 16, 1.0);
        let robust = interior(&noise_robust_laplacian(&img).unwrap(), 3);
        let classic = interior(&reference_laplacian(&img).unwrap(), 3);
        let r = robust.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let c = classic.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert_eq!(c, 8.0);
        assert!(r <= 0.25 * c);
    }

    #[test]
    fn sharpness_is_max_abs() {
        assert_eq!(sharpness(&ImageBuffer::<f64>::zeros(3, 3)), 0.0);
        let mut l = ImageBuffer::<f64>::zeros(3, 3);
        l.set(1, 2, -5.0);
        assert_eq!(sharpness(&l), 5.0);
    }

    #[test]
    fn blur_preserves_mean_of_constant() {
        let img = ImageBuffer::<f64>::from_fn(8, 8, |_, _| 2.0);
        let out = gaussian_blur(&img, 1.3);
        assert!(out.as_slice().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn text_round_trip() {
        let img = ImageBuffer::from_fn(2, 3, |r, c| r as f64 * 0.1 - c as f64 / 3.0);
        let back = ImageBuffer::<f64>::from_text(&img.to_text()).unwrap();
        assert_eq!(back, img);
        assert!(ImageBuffer::<f64>::from_text("2 2\n1 2 3").is_err());
    }

    #[test]
    fn works_in_f32() {
        let img = ImageBuffer::from_fn(12, 12, |_, c| (c as f32).powi(2));
        let l = noise_robust_laplacian(&img).unwrap();
        assert!((l.get(6, 6) - 2.0).abs() < 1e-4);
    }
}
