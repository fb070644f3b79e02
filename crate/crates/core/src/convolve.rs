//! Scale-space construction: every kernel of a bank convolved with one image.
//!
//! Two backends produce the same stack. [`BackendKind::Direct`] is a dense 2-D
//! spatial convolution whose cost grows with the kernel footprint.
//! [`BackendKind::Fft`] multiplies spectra and costs the same for any kernel
//! width that fits the transform.
//!
//! Both use reflect boundaries (`d c b a | a b c d | d c b a`). The FFT backend
//! gets them exactly by transforming the mirror-symmetric extension of the
//! image, which is periodic with period `2 * dim`, so the circular convolution
//! of that period equals the reflect-padded linear convolution for any radius.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::Image;
use crate::scale_space::KernelBank;

/// Upper bound on `width * height * n_levels` for a single stack.
pub const DEFAULT_MAX_STACK_ELEMENTS: usize = 1 << 30;

/// Floating point type a scale stack is computed in.
pub trait Real: FftNum + num_traits::Float + Default + Send + Sync {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Direct,
    #[default]
    Fft,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Direct => "direct",
            BackendKind::Fft => "fft",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" | "spatial" => Ok(BackendKind::Direct),
            "fft" => Ok(BackendKind::Fft),
            other => Err(Error::param(format!("unknown backend `{other}` (expected direct|fft)"))),
        }
    }
}

/// `levels[i]` is the image convolved with the Gaussian of scale `sigmas[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleStack<T = f32> {
    pub width: usize,
    pub height: usize,
    pub sigmas: Vec<f64>,
    pub levels: Vec<Vec<T>>,
}

impl<T: Real> ScaleStack<T> {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Largest elementwise absolute difference between two stacks of equal shape.
    pub fn max_abs_diff(&self, other: &ScaleStack<T>) -> f64 {
        assert_eq!(self.levels.len(), other.levels.len());
        self.levels
            .iter()
            .zip(&other.levels)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs()))
            .fold(0.0, f64::max)
    }
}

/// Index of the reflected sample for a possibly out-of-range coordinate.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

pub fn convolve_bank<T: Real>(img: &Image, bank: &KernelBank, backend: BackendKind) -> Result<ScaleStack<T>> {
    convolve_bank_with_limit(img, bank, backend, DEFAULT_MAX_STACK_ELEMENTS)
}

pub fn convolve_bank_with_limit<T: Real>(
    img: &Image,
    bank: &KernelBank,
    backend: BackendKind,
    max_elements: usize,
) -> Result<ScaleStack<T>> {
    check_stack_size(img, bank, max_elements)?;
    let levels = match backend {
        BackendKind::Direct => convolve_direct(img, bank),
        BackendKind::Fft => {
            let plan = fft_forward_plan::<T>(img.width(), img.height(), bank.max_width())?;
            let spectra = plan.kernel_spectra(bank);
            convolve_fft(img, &plan, &spectra)?
        }
    };
    Ok(ScaleStack {
        width: img.width(),
        height: img.height(),
        sigmas: bank.ladder().sigmas().to_vec(),
        levels,
    })
}

pub(crate) fn check_stack_size(img: &Image, bank: &KernelBank, max_elements: usize) -> Result<()> {
    let elements = img.len().saturating_mul(bank.len());
    if elements > max_elements {
        return Err(Error::ResourceLimit {
            what: "scale stack elements",
            value: elements,
            limit: max_elements,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// direct backend

/// Reflect-extended copy of the image with `pad` extra samples on every side.
struct Extended {
    data: Vec<f64>,
    stride: usize,
    pad: usize,
}

impl Extended {
    fn new(img: &Image, pad: usize) -> Self {
        let (w, h) = img.shape();
        let stride = w + 2 * pad;
        let cols: Vec<usize> = (0..stride)
            .map(|x| reflect_index(x as isize - pad as isize, w))
            .collect();
        let mut data = Vec::with_capacity(stride * (h + 2 * pad));
        for ey in 0..h + 2 * pad {
            let row = &img.data()[reflect_index(ey as isize - pad as isize, h) * w..][..w];
            data.extend(cols.iter().map(|&x| row[x] as f64));
        }
        Self { data, stride, pad }
    }

    #[inline]
    fn row(&self, y: isize) -> &[f64] {
        let start = (y + self.pad as isize) as usize * self.stride;
        &self.data[start..start + self.stride]
    }
}

/// One output level. `kernel` is square with side `kernel_width`, centred;
/// only the central `(2 * radius + 1)^2` block is visited.
///
/// Accumulates in f64 and folds the kernel's two mirror symmetries so each
/// tap pair (and row pair) shares one multiply.
fn direct_level(
    ext: &Extended,
    width: usize,
    height: usize,
    kernel: &[f64],
    kernel_width: usize,
    radius: usize,
) -> Vec<f64> {
    let center = kernel_width / 2;
    let span = width + 2 * radius;
    let x0 = ext.pad - radius;
    let mut out = vec![0.0f64; width * height];
    out.par_chunks_mut(width).enumerate().for_each_init(
        || vec![0.0f64; span],
        |rowsum, (y, acc)| {
            for ky in 0..=radius {
                let below = &ext.row(y as isize + ky as isize)[x0..x0 + span];
                if ky == 0 {
                    rowsum.copy_from_slice(below);
                } else {
                    let above = &ext.row(y as isize - ky as isize)[x0..x0 + span];
                    for ((s, &a), &b) in rowsum.iter_mut().zip(above).zip(below) {
                        *s = a + b;
                    }
                }
                let taps = &kernel[(center + ky) * kernel_width + center..][..=radius];
                let mid = &rowsum[radius..radius + width];
                let w0 = taps[0];
                for (a, &s) in acc.iter_mut().zip(mid) {
                    *a += w0 * s;
                }
                for (kx, &w) in taps.iter().enumerate().skip(1) {
                    let right = &rowsum[radius + kx..radius + kx + width];
                    let left = &rowsum[radius - kx..radius - kx + width];
                    for ((a, &r), &l) in acc.iter_mut().zip(right).zip(left) {
                        *a += w * (r + l);
                    }
                }
            }
        },
    );
    out
}

pub fn convolve_direct<T: Real>(img: &Image, bank: &KernelBank) -> Vec<Vec<T>> {
    let ext = Extended::new(img, bank.max_radius());
    (0..bank.len())
        .map(|i| {
            direct_level(
                &ext,
                img.width(),
                img.height(),
                bank.kernel(i),
                bank.max_width(),
                bank.radius(i),
            )
            .into_iter()
            .map(T::of_f64)
            .collect()
        })
        .collect()
}

/// Single-kernel reflect convolution used for preprocessing.
pub(crate) fn convolve_single(img: &Image, kernel: &[f64], radius: usize) -> Vec<f64> {
    let ext = Extended::new(img, radius);
    direct_level(&ext, img.width(), img.height(), kernel, 2 * radius + 1, radius)
}

// ---------------------------------------------------------------------------
// FFT backend

/// Transform length for one axis: a multiple of the mirror period `2 * dim`
/// that also covers `dim + max_width - 1`.
pub fn padded_len(dim: usize, max_width: usize) -> usize {
    let period = 2 * dim;
    let need = dim + max_width.max(1) - 1;
    period * need.div_ceil(period)
}

/// Reusable transforms for one image shape and kernel width.
///
/// Spectra are laid out column-major (`[kx][ky]`, `padded_height` contiguous
/// values per `kx`), which is how the forward transform leaves them.
pub struct FftPlan<T: Real> {
    width: usize,
    height: usize,
    max_width: usize,
    padded_width: usize,
    padded_height: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> fmt::Debug for FftPlan<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FftPlan")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("max_width", &self.max_width)
            .field("padded_width", &self.padded_width)
            .field("padded_height", &self.padded_height)
            .finish()
    }
}

pub fn fft_forward_plan<T: Real>(width: usize, height: usize, max_width: usize) -> Result<FftPlan<T>> {
    if width == 0 || height == 0 {
        return Err(Error::param(format!(
            "plan dimensions must be >= 1, got {width}x{height}"
        )));
    }
    let padded_width = padded_len(width, max_width);
    let padded_height = padded_len(height, max_width);
    let mut planner = FftPlanner::<T>::new();
    Ok(FftPlan {
        width,
        height,
        max_width,
        padded_width,
        padded_height,
        row_fwd: planner.plan_fft_forward(padded_width),
        row_inv: planner.plan_fft_inverse(padded_width),
        col_fwd: planner.plan_fft_forward(padded_height),
        col_inv: planner.plan_fft_inverse(padded_height),
    })
}

/// Real eigenvalues of each bank kernel under the plan's transform.
#[derive(Clone, Debug)]
pub struct KernelSpectra<T> {
    bank_id: u64,
    padded_width: usize,
    padded_height: usize,
    sigmas: Vec<f64>,
    values: Vec<Vec<T>>,
}

impl<T> KernelSpectra<T> {
    pub fn bank_id(&self) -> u64 {
        self.bank_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn run_rows<T: Real>(fft: &Arc<dyn Fft<T>>, data: &mut [Complex<T>], row_len: usize) {
    let scratch_len = fft.get_inplace_scratch_len();
    data.par_chunks_mut(row_len).for_each_init(
        || vec![Complex::default(); scratch_len],
        |scratch, row| fft.process_with_scratch(row, scratch),
    );
}

/// `dst[c][r] = src[r][c]` for `c < take_cols`; `src` is `rows x cols`.
fn transpose_into<T: Copy + Send + Sync>(src: &[T], rows: usize, cols: usize, take_cols: usize, dst: &mut [T]) {
    const BLOCK: usize = 32;
    dst.par_chunks_mut(rows * BLOCK).enumerate().for_each(|(bi, out)| {
        let c0 = bi * BLOCK;
        let c1 = (c0 + BLOCK).min(take_cols);
        for r0 in (0..rows).step_by(BLOCK) {
            let r1 = (r0 + BLOCK).min(rows);
            for c in c0..c1 {
                let line = &mut out[(c - c0) * rows..][..rows];
                for r in r0..r1 {
                    line[r] = src[r * cols + c];
                }
            }
        }
    });
}

impl<T: Real> FftPlan<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn max_width(&self) -> usize {
        self.max_width
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        (self.padded_width, self.padded_height)
    }

    /// Full forward transform of a row-major `padded_height x padded_width`
    /// grid, returned in spectrum layout.
    fn forward_grid(&self, mut grid: Vec<Complex<T>>) -> Vec<Complex<T>> {
        let (nx, ny) = self.padded_shape();
        run_rows(&self.row_fwd, &mut grid, nx);
        let mut spectrum = vec![Complex::default(); nx * ny];
        transpose_into(&grid, ny, nx, nx, &mut spectrum);
        run_rows(&self.col_fwd, &mut spectrum, ny);
        spectrum
    }

    /// Complex spectrum of one (centred, square) kernel, DC at index 0.
    pub fn kernel_spectrum(&self, kernel: &[f64], kernel_width: usize) -> Vec<Complex<T>> {
        let (nx, ny) = self.padded_shape();
        let r = (kernel_width / 2) as isize;
        let mut grid = vec![Complex::<T>::default(); nx * ny];
        for (ky, row) in kernel.chunks_exact(kernel_width).enumerate() {
            let gy = (ky as isize - r).rem_euclid(ny as isize) as usize;
            for (kx, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    let gx = (kx as isize - r).rem_euclid(nx as isize) as usize;
                    grid[gy * nx + gx].re = grid[gy * nx + gx].re + T::of_f64(v);
                }
            }
        }
        self.forward_grid(grid)
    }

    /// Precomputes every kernel's eigenvalues. Kernels are symmetric, so the
    /// spectra are real.
    pub fn kernel_spectra(&self, bank: &KernelBank) -> KernelSpectra<T> {
        let values = (0..bank.len())
            .map(|i| {
                self.kernel_spectrum(bank.kernel(i), bank.max_width())
                    .into_iter()
                    .map(|c| c.re)
                    .collect()
            })
            .collect();
        KernelSpectra {
            bank_id: bank.id(),
            padded_width: self.padded_width,
            padded_height: self.padded_height,
            sigmas: bank.ladder().sigmas().to_vec(),
            values,
        }
    }

    /// Spectrum of the mirror-extended image.
    pub fn image_spectrum(&self, img: &Image) -> Result<Vec<Complex<T>>> {
        if img.shape() != (self.width, self.height) {
            return Err(Error::ShapeMismatch(format!(
                "plan is for {}x{}, image is {}x{}",
                self.width,
                self.height,
                img.width(),
                img.height()
            )));
        }
        let (nx, ny) = self.padded_shape();
        let (w, h) = img.shape();
        // rows of the extension repeat the image rows, so only `h` distinct
        // row transforms are needed
        let cols: Vec<usize> = (0..nx).map(|x| reflect_index(x as isize, w)).collect();
        let mut rows = Vec::with_capacity(nx * h);
        for src in img.data().chunks_exact(w) {
            rows.extend(cols.iter().map(|&x| Complex::new(T::of_f64(src[x] as f64), T::zero())));
        }
        run_rows(&self.row_fwd, &mut rows, nx);

        let src_rows: Vec<usize> = (0..ny).map(|y| reflect_index(y as isize, h)).collect();
        let mut spectrum = vec![Complex::<T>::default(); nx * ny];
        spectrum.par_chunks_mut(ny).enumerate().for_each(|(kx, line)| {
            for (dst, &y) in line.iter_mut().zip(&src_rows) {
                *dst = rows[y * nx + kx];
            }
        });
        run_rows(&self.col_fwd, &mut spectrum, ny);
        Ok(spectrum)
    }

    /// Inverse of `spectrum * (a + i b)` yields level `a` in the real part and
    /// level `b` in the imaginary part, since both products are Hermitian.
    fn inverse_pair(&self, image: &[Complex<T>], a: &[T], b: Option<&[T]>) -> (Vec<T>, Option<Vec<T>>) {
        let (nx, ny) = self.padded_shape();
        let (w, h) = (self.width, self.height);
        let mut work: Vec<Complex<T>> = match b {
            Some(b) => image
                .par_iter()
                .zip(a.par_iter().zip(b.par_iter()))
                .map(|(&s, (&ka, &kb))| s * Complex::new(ka, kb))
                .collect(),
            None => image
                .par_iter()
                .zip(a.par_iter())
                .map(|(&s, &ka)| s.scale(ka))
                .collect(),
        };
        run_rows(&self.col_inv, &mut work, ny);
        // only the first `h` output rows survive the crop
        let mut rows = vec![Complex::<T>::default(); h * nx];
        transpose_into(&work, nx, ny, h, &mut rows);
        drop(work);
        run_rows(&self.row_inv, &mut rows, nx);

        let norm = T::of_f64(1.0 / (nx * ny) as f64);
        let mut re = Vec::with_capacity(w * h);
        let mut im = b.map(|_| Vec::with_capacity(w * h));
        for row in rows.chunks_exact(nx) {
            re.extend(row[..w].iter().map(|c| c.re * norm));
            if let Some(im) = im.as_mut() {
                im.extend(row[..w].iter().map(|c| c.im * norm));
            }
        }
        (re, im)
    }
}

pub fn convolve_fft<T: Real>(img: &Image, plan: &FftPlan<T>, spectra: &KernelSpectra<T>) -> Result<Vec<Vec<T>>> {
    if (spectra.padded_width, spectra.padded_height) != plan.padded_shape() {
        return Err(Error::ShapeMismatch(
            "kernel spectra were built for a different plan".into(),
        ));
    }
    let image = plan.image_spectrum(img)?;
    let pairs: Vec<(usize, Option<usize>)> = (0..spectra.len())
        .step_by(2)
        .map(|i| (i, (i + 1 < spectra.len()).then_some(i + 1)))
        .collect();
    let mut levels: Vec<Vec<T>> = vec![Vec::new(); spectra.len()];
    let results: Vec<_> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let out = plan.inverse_pair(&image, &spectra.values[a], b.map(|b| spectra.values[b].as_slice()));
            (a, b, out)
        })
        .collect();
    for (a, b, (re, im)) in results {
        levels[a] = re;
        if let (Some(b), Some(im)) = (b, im) {
            levels[b] = im;
        }
    }
    debug_assert_eq!(spectra.sigmas.len(), levels.len());
    Ok(levels)
}
