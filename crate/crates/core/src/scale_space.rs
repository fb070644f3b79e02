//! The sigma ladder and the uniformly padded Gaussian kernel bank.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRUNCATE: f64 = 5.0;
/// Largest kernel width a bank may be built with unless the caller raises it.
pub const DEFAULT_MAX_KERNEL_WIDTH: usize = 2049;

/// Arithmetic progression of `n_bin + 1` Gaussian scales from `min_sigma` to `max_sigma`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaLadder {
    min_sigma: f64,
    max_sigma: f64,
    n_bin: usize,
    delta_sigma: f64,
    sigmas: Vec<f64>,
}

impl SigmaLadder {
    pub fn new(min_sigma: f64, max_sigma: f64, n_bin: usize) -> Result<Self> {
        if !(min_sigma > 0.0 && min_sigma.is_finite()) {
            return Err(Error::param(format!("min_sigma must be positive, got {min_sigma}")));
        }
        if !max_sigma.is_finite() || max_sigma < min_sigma {
            return Err(Error::param(format!(
                "max_sigma ({max_sigma}) must be >= min_sigma ({min_sigma})"
            )));
        }
        if n_bin == 0 {
            return Err(Error::param("n_bin must be at least 1"));
        }
        if max_sigma == min_sigma {
            return Err(Error::param(
                "min_sigma == max_sigma gives a single scale; no adjacent difference can be formed",
            ));
        }
        let delta_sigma = (max_sigma - min_sigma) / n_bin as f64;
        let mut sigmas: Vec<f64> = (0..=n_bin).map(|i| min_sigma + i as f64 * delta_sigma).collect();
        // pin the endpoint against accumulated rounding
        sigmas[n_bin] = max_sigma;
        if sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("sigma ladder is not strictly increasing"));
        }
        Ok(Self {
            min_sigma,
            max_sigma,
            n_bin,
            delta_sigma,
            sigmas,
        })
    }

    pub fn min_sigma(&self) -> f64 {
        self.min_sigma
    }

    pub fn max_sigma(&self) -> f64 {
        self.max_sigma
    }

    pub fn n_bin(&self) -> usize {
        self.n_bin
    }

    pub fn delta_sigma(&self) -> f64 {
        self.delta_sigma
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// Blob radii `sqrt(2) * sigma_i`, one per scale.
    pub fn radii(&self) -> Vec<f64> {
        self.sigmas.iter().map(|s| std::f64::consts::SQRT_2 * s).collect()
    }
}

pub fn build_ladder(min_sigma: f64, max_sigma: f64, n_bin: usize) -> Result<SigmaLadder> {
    SigmaLadder::new(min_sigma, max_sigma, n_bin)
}

/// `ceil(truncate * sigma)`.
pub fn kernel_radius(sigma: f64, truncate: f64) -> usize {
    (truncate * sigma - 1e-9).ceil().max(0.0) as usize
}

/// Unit-sum isotropic Gaussian sampled on the integer grid, returned row-major
/// with its radius (width is `2 * radius + 1`).
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> (Vec<f64>, usize) {
    let radius = kernel_radius(sigma, truncate);
    let width = 2 * radius + 1;
    let r = radius as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    // separable sampling, exp(-(x^2+y^2)/2s^2) = exp(-x^2/2s^2) exp(-y^2/2s^2)
    let profile: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) * inv).exp()).collect();
    let mut kernel = Vec::with_capacity(width * width);
    for &py in &profile {
        kernel.extend(profile.iter().map(|&px| px * py));
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);
    (kernel, radius)
}

static NEXT_BANK_ID: AtomicU64 = AtomicU64::new(1);

/// Gaussian kernels for every scale of a ladder, all zero-padded to a common
/// odd width `max_width`.
#[derive(Clone, Debug)]
pub struct KernelBank {
    id: u64,
    ladder: SigmaLadder,
    truncate: f64,
    max_width: usize,
    radii: Vec<usize>,
    kernels: Vec<Vec<f64>>,
}

impl KernelBank {
    pub fn new(ladder: SigmaLadder, truncate: f64) -> Result<Self> {
        Self::with_width_cap(ladder, truncate, DEFAULT_MAX_KERNEL_WIDTH)
    }

    pub fn with_width_cap(ladder: SigmaLadder, truncate: f64, width_cap: usize) -> Result<Self> {
        if !(truncate > 0.0 && truncate.is_finite()) {
            return Err(Error::param(format!("truncate must be positive, got {truncate}")));
        }
        let radii: Vec<usize> = ladder.sigmas().iter().map(|&s| kernel_radius(s, truncate)).collect();
        let max_radius = *radii.iter().max().expect("ladder is non-empty");
        let max_width = 2 * max_radius + 1;
        if max_width > width_cap {
            return Err(Error::ResourceLimit {
                what: "kernel width",
                value: max_width,
                limit: width_cap,
            });
        }
        let kernels = ladder
            .sigmas()
            .iter()
            .map(|&sigma| {
                let (small, radius) = gaussian_kernel(sigma, truncate);
                pad_kernel(&small, 2 * radius + 1, max_width)
            })
            .collect();
        Ok(Self {
            id: NEXT_BANK_ID.fetch_add(1, Ordering::Relaxed),
            ladder,
            truncate,
            max_width,
            radii,
            kernels,
        })
    }

    /// Process-unique identity, used to key cached kernel spectra.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn ladder(&self) -> &SigmaLadder {
        &self.ladder
    }

    pub fn truncate(&self) -> f64 {
        self.truncate
    }

    pub fn max_width(&self) -> usize {
        self.max_width
    }

    pub fn max_radius(&self) -> usize {
        self.max_width / 2
    }

    /// Unpadded radius of kernel `i`; entries outside it are exactly zero.
    pub fn radius(&self, i: usize) -> usize {
        self.radii[i]
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Kernel `i`, row-major `max_width x max_width`.
    pub fn kernel(&self, i: usize) -> &[f64] {
        &self.kernels[i]
    }

    pub fn kernels(&self) -> &[Vec<f64>] {
        &self.kernels
    }

    #[inline]
    pub fn center_value(&self, i: usize) -> f64 {
        let c = self.max_width / 2;
        self.kernels[i][c * self.max_width + c]
    }
}

pub fn build_kernel_bank(ladder: SigmaLadder, truncate: f64) -> Result<KernelBank> {
    KernelBank::new(ladder, truncate)
}

fn pad_kernel(kernel: &[f64], width: usize, target: usize) -> Vec<f64> {
    let offset = (target - width) / 2;
    let mut out = vec![0.0; target * target];
    for (row, src) in kernel.chunks_exact(width).enumerate() {
        let start = (row + offset) * target + offset;
        out[start..start + width].copy_from_slice(src);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_examples() {
        let l = build_ladder(1.0, 3.0, 2).unwrap();
        assert_eq!(l.sigmas(), &[1.0, 2.0, 3.0]);
        assert_eq!(l.delta_sigma(), 1.0);

        let l = build_ladder(1.0, 10.0, 9).unwrap();
        assert_eq!(l.sigmas(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn ladder_rejects_degenerate_inputs() {
        assert!(build_ladder(2.0, 2.0, 1).is_err());
        assert!(build_ladder(0.0, 2.0, 1).is_err());
        assert!(build_ladder(-1.0, 2.0, 1).is_err());
        assert!(build_ladder(3.0, 2.0, 1).is_err());
        assert!(build_ladder(1.0, 2.0, 0).is_err());
        assert!(build_ladder(f64::NAN, 2.0, 1).is_err());
    }

    #[test]
    fn widths_follow_truncate_rule() {
        let bank = KernelBank::new(build_ladder(0.5, 2.0, 1).unwrap(), 5.0).unwrap();
        assert_eq!(bank.radius(0), 3);
        assert_eq!(bank.radius(1), 10);
        assert_eq!(bank.max_width(), 21);
        let k = bank.kernel(0);
        assert_eq!(k.len(), 21 * 21);
        // the sigma=0.5 kernel only occupies the central 7x7 block
        for y in 0..21 {
            for x in 0..21 {
                let inside = (7..14).contains(&x) && (7..14).contains(&y);
                assert_eq!(k[y * 21 + x] > 0.0, inside, "({x},{y})");
            }
        }
    }

    #[test]
    fn kernels_are_normalized_nonnegative_and_isotropic() {
        let bank = KernelBank::new(build_ladder(0.7, 4.3, 6).unwrap(), 5.0).unwrap();
        let w = bank.max_width();
        for k in bank.kernels() {
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(k.iter().all(|&v| v >= 0.0));
            for y in 0..w {
                for x in 0..w {
                    let v = k[y * w + x];
                    assert_eq!(v, k[x * w + y]);
                    assert_eq!(v, k[y * w + (w - 1 - x)]);
                    assert_eq!(v, k[(w - 1 - y) * w + x]);
                }
            }
        }
        for i in 1..bank.len() {
            assert!(bank.center_value(i) < bank.center_value(i - 1));
        }
    }

    #[test]
    fn sigma_one_center_matches_direct_evaluation() {
        let mut total = 0.0;
        for y in -5i32..=5 {
            for x in -5i32..=5 {
                total += (-((x * x + y * y) as f64) / 2.0).exp();
            }
        }
        let expected = 1.0 / total;
        let bank = KernelBank::new(build_ladder(1.0, 1.5, 1).unwrap(), 5.0).unwrap();
        assert!((bank.center_value(0) - expected).abs() < 1e-12);
        assert!((expected - 0.159_154_9).abs() < 1e-6);
    }

    #[test]
    fn width_cap_guards_memory() {
        let ladder = build_ladder(1.0, 300.0, 4).unwrap();
        match KernelBank::with_width_cap(ladder, 5.0, 1001) {
            Err(Error::ResourceLimit { value, .. }) => assert_eq!(value, 3001),
            other => panic!("expected resource limit, got {other:?}"),
        }
    }
}
