//! Synthetic droplet scenes: shaded spheres with known circles, plus a
//! shot-noise / read-noise camera model.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_core::Image;

pub const DEFAULT_POISSON_SCALE: f64 = 255.0;
pub const DEFAULT_GAUSSIAN_SIGMA: f64 = 0.01;

const SUPERSAMPLE: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthCircle {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

/// Radial intensity profile of a rendered sphere.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shading {
    /// `v0 * sqrt(1 - (d/r)^2)`, the projected thickness of a sphere.
    #[default]
    SphereCap,
    /// Uniform `v0` inside the disk.
    Flat,
}

impl Shading {
    #[inline]
    fn profile(self, d2: f64, r: f64) -> f64 {
        let r2 = r * r;
        if d2 >= r2 {
            return 0.0;
        }
        match self {
            Shading::SphereCap => (1.0 - d2 / r2).sqrt(),
            Shading::Flat => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub width: usize,
    pub height: usize,
    pub n_spheres: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub seed: u64,
    pub allow_overlap: bool,
    pub intensity: f64,
    pub shading: Shading,
}

impl RenderParams {
    pub fn new(width: usize, height: usize, n_spheres: usize, r_range: (f64, f64), seed: u64) -> Self {
        Self {
            width,
            height,
            n_spheres,
            r_min: r_range.0,
            r_max: r_range.1,
            seed,
            allow_overlap: false,
            intensity: 1.0,
            shading: Shading::SphereCap,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Expected photon count at unit intensity.
    pub poisson_scale: f64,
    pub gaussian_sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub truths: Vec<GroundTruthCircle>,
    pub seed: u64,
    pub noise: Option<NoiseParams>,
}

/// Draws circles into a black image; overlapping spheres combine by maximum.
/// Rim pixels are area-averaged over a 4x4 subpixel grid.
pub fn render_circles(
    width: usize,
    height: usize,
    circles: &[GroundTruthCircle],
    shading: Shading,
    intensity: f64,
) -> Result<Image> {
    let mut data = vec![0.0f32; width * height];
    let half_diag = std::f64::consts::FRAC_1_SQRT_2;
    for c in circles {
        if c.r.is_nan() || c.r <= 0.0 {
            return Err(Error::param(format!("circle radius must be positive, got {}", c.r)));
        }
        let x0 = (c.x - c.r - 1.0).floor().max(0.0) as usize;
        let y0 = (c.y - c.r - 1.0).floor().max(0.0) as usize;
        let x1 = ((c.x + c.r + 1.0).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        let y1 = ((c.y + c.r + 1.0).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        for py in y0..=y1 {
            for px in x0..=x1 {
                let (dx, dy) = (px as f64 - c.x, py as f64 - c.y);
                let d = (dx * dx + dy * dy).sqrt();
                let v = if d + half_diag < c.r {
                    shading.profile(d * d, c.r)
                } else if d - half_diag > c.r {
                    0.0
                } else {
                    let mut acc = 0.0;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let ox = dx + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                            let oy = dy + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                            acc += shading.profile(ox * ox + oy * oy, c.r);
                        }
                    }
                    acc / (SUPERSAMPLE * SUPERSAMPLE) as f64
                };
                let slot = &mut data[py * width + px];
                *slot = slot.max((intensity * v) as f32);
            }
        }
    }
    Image::new(width, height, data)
}

/// Noise-free scene of `n_spheres` randomly placed spheres, fully inside the image.
///
/// Without `allow_overlap`, centres are rejection-sampled so every pair is
/// separated by more than `r_i + r_j + 2`.
pub fn render_scene(params: &RenderParams) -> Result<Scene> {
    let RenderParams {
        width,
        height,
        n_spheres,
        r_min,
        r_max,
        seed,
        allow_overlap,
        ..
    } = *params;
    if !(r_min > 0.0 && r_max >= r_min && r_max.is_finite()) {
        return Err(Error::param(format!("invalid radius range [{r_min}, {r_max}]")));
    }
    if width == 0 || height == 0 {
        return Err(Error::param("scene dimensions must be positive"));
    }
    if 2.0 * r_max > (width.min(height) - 1) as f64 {
        return Err(Error::param(format!(
            "radius {r_max} does not fit in a {width}x{height} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truths: Vec<GroundTruthCircle> = Vec::with_capacity(n_spheres);
    for placed in 0..n_spheres {
        let r = if r_max > r_min {
            rng.random_range(r_min..=r_max)
        } else {
            r_min
        };
        let mut attempts = 0;
        let circle = loop {
            if attempts == PLACEMENT_ATTEMPTS {
                return Err(Error::Placement {
                    placed,
                    requested: n_spheres,
                });
            }
            attempts += 1;
            let x = rng.random_range(r..=(width - 1) as f64 - r);
            let y = rng.random_range(r..=(height - 1) as f64 - r);
            let candidate = GroundTruthCircle { x, y, r };
            if allow_overlap
                || truths
                    .iter()
                    .all(|t| ((t.x - x).powi(2) + (t.y - y).powi(2)).sqrt() > t.r + r + 2.0)
            {
                break candidate;
            }
        };
        truths.push(circle);
    }
    let image = render_circles(width, height, &truths, params.shading, params.intensity)?;
    Ok(Scene {
        image,
        truths,
        seed,
        noise: None,
    })
}

/// Poisson shot noise at `poisson_scale` photons per unit intensity, then
/// additive Gaussian noise; negative results clamp to zero.
pub fn add_noise(scene: &Scene, poisson_scale: f64, gaussian_sigma: f64, seed: u64) -> Result<Scene> {
    if !(poisson_scale > 0.0 && poisson_scale.is_finite()) {
        return Err(Error::param(format!(
            "poisson_scale must be positive, got {poisson_scale}"
        )));
    }
    if !(gaussian_sigma >= 0.0 && gaussian_sigma.is_finite()) {
        return Err(Error::param(format!(
            "gaussian_sigma must be >= 0, got {gaussian_sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, gaussian_sigma).map_err(|e| Error::param(e.to_string()))?;
    let data: Vec<f32> = scene
        .image
        .data()
        .iter()
        .map(|&v| {
            let lambda = poisson_scale * v.max(0.0) as f64;
            let shot = if lambda > 0.0 {
                let poisson = Poisson::new(lambda).expect("lambda is positive and finite");
                poisson.sample(&mut rng) / poisson_scale
            } else {
                0.0
            };
            let read = if gaussian_sigma > 0.0 {
                normal.sample(&mut rng)
            } else {
                0.0
            };
            (shot + read).max(0.0) as f32
        })
        .collect();
    Ok(Scene {
        image: Image::new(scene.image.width(), scene.image.height(), data)?,
        truths: scene.truths.clone(),
        seed: scene.seed,
        noise: Some(NoiseParams {
            poisson_scale,
            gaussian_sigma,
            seed,
        }),
    })
}

/// `# seed=N` comment line followed by `x,y,r` rows.
pub fn write_truths<W: Write>(mut out: W, truths: &[GroundTruthCircle], seed: u64) -> Result<()> {
    writeln!(out, "# seed={seed}").map_err(|e| Error::io("<truth csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "r"])?;
    for t in truths {
        w.write_record([t.x.to_string(), t.y.to_string(), t.r.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<truth csv>", e))?;
    Ok(())
}

pub fn read_truths<R: Read>(input: R) -> Result<Vec<GroundTruthCircle>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let t: GroundTruthCircle = row?;
        if t.r.is_nan() || t.r <= 0.0 {
            return Err(Error::param(format!("truth radius must be positive, got {}", t.r)));
        }
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_black() {
        let scene = render_scene(&RenderParams::new(32, 24, 0, (2.0, 4.0), 1)).unwrap();
        assert!(scene.truths.is_empty());
        assert!(scene.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sphere_profile() {
        let c = GroundTruthCircle {
            x: 32.0,
            y: 32.0,
            r: 10.0,
        };
        let img = render_circles(64, 64, &[c], Shading::SphereCap, 1.0).unwrap();
        let peak = img.data().iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(img.get(32, 32), peak);
        assert_eq!(peak, 1.0);
        for y in 0..64 {
            for x in 0..64 {
                let d = ((x as f64 - 32.0).powi(2) + (y as f64 - 32.0).powi(2)).sqrt();
                if d > 11.0 {
                    assert_eq!(img.get(x, y), 0.0);
                }
            }
        }
        // monotone fall-off along a ray
        for x in 32..43 {
            assert!(img.get(x + 1, 32) <= img.get(x, 32));
        }
    }

    #[test]
    fn rim_is_antialiased() {
        let c = GroundTruthCircle {
            x: 20.0,
            y: 20.0,
            r: 7.3,
        };
        let img = render_circles(40, 40, &[c], Shading::Flat, 1.0).unwrap();
        let rim = img.get(27, 20);
        assert!(rim > 0.0 && rim < 1.0, "{rim}");
    }

    #[test]
    fn scenes_are_deterministic_and_contained() {
        let params = RenderParams::new(300, 200, 25, (3.0, 12.0), 42);
        let a = render_scene(&params).unwrap();
        let b = render_scene(&params).unwrap();
        assert_eq!(a, b);
        for t in &a.truths {
            assert!(t.x - t.r >= 0.0 && t.x + t.r <= 299.0);
            assert!(t.y - t.r >= 0.0 && t.y + t.r <= 199.0);
        }
        for (i, s) in a.truths.iter().enumerate() {
            for t in &a.truths[i + 1..] {
                assert!(((s.x - t.x).powi(2) + (s.y - t.y).powi(2)).sqrt() > s.r + t.r + 2.0);
            }
        }
        let other = render_scene(&RenderParams { seed: 43, ..params }).unwrap();
        assert_ne!(a.truths, other.truths);
    }

    #[test]
    fn impossible_placement_reports() {
        let params = RenderParams::new(30, 30, 50, (6.0, 6.0), 1);
        match render_scene(&params) {
            Err(Error::Placement { placed, requested }) => {
                assert!(placed < requested);
                assert_eq!(requested, 50);
            }
            other => panic!("expected placement error, got {other:?}"),
        }
    }

    #[test]
    fn zero_image_without_read_noise_stays_zero() {
        let scene = render_scene(&RenderParams::new(16, 16, 0, (1.0, 2.0), 0)).unwrap();
        let noisy = add_noise(&scene, 255.0, 0.0, 9).unwrap();
        assert!(noisy.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_photon_counts_approach_the_signal() {
        let scene = render_scene(&RenderParams::new(200, 200, 12, (5.0, 15.0), 3)).unwrap();
        let noisy = add_noise(&scene, 1e6, 0.0, 4).unwrap();
        let clean = scene.image.sum();
        assert!(((noisy.image.sum() - clean) / clean).abs() < 0.01);
    }

    #[test]
    fn read_noise_on_black_is_clamped_normal() {
        let scene = render_scene(&RenderParams::new(400, 400, 0, (1.0, 2.0), 0)).unwrap();
        let sigma = 0.05;
        let noisy = add_noise(&scene, 255.0, sigma, 5).unwrap();
        let n = noisy.image.len() as f64;
        let mean = noisy.image.sum() / n;
        // E[max(X, 0)] for X ~ N(0, sigma^2)
        let expected = sigma / (2.0 * std::f64::consts::PI).sqrt();
        assert!((mean - expected).abs() < 5e-4, "{mean} vs {expected}");
        // E[x^2] of the clamped normal is sigma^2 / 2
        let second: f64 = noisy.image.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
        assert!((second - sigma * sigma / 2.0).abs() < 5e-5);
    }

    #[test]
    fn noise_is_seeded() {
        let scene = render_scene(&RenderParams::new(64, 64, 4, (3.0, 6.0), 8)).unwrap();
        let a = add_noise(&scene, 255.0, 0.01, 1).unwrap();
        let b = add_noise(&scene, 255.0, 0.01, 1).unwrap();
        let c = add_noise(&scene, 255.0, 0.01, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn truth_csv_roundtrip() {
        let truths = vec![
            GroundTruthCircle {
                x: 1.5,
                y: 2.25,
                r: 3.0,
            },
            GroundTruthCircle {
                x: 10.0,
                y: 0.125,
                r: 0.5,
            },
        ];
        let mut buf = Vec::new();
        write_truths(&mut buf, &truths, 77).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed=77\nx,y,r\n"));
        assert_eq!(read_truths(buf.as_slice()).unwrap(), truths);
    }
}
