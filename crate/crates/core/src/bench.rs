//! Runtime scaling sweeps over `n_bin` and `max_sigma`.
//!
//! The timed region is convolution, differencing and the extremum search on
//! an already preprocessed in-memory image. Pruning, I/O and serialization are
//! outside it. Run on an otherwise idle machine.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::convolve::BackendKind;
use crate::detector::{DetectionParams, Detector};
use crate::error::{Error, Result};
use crate::image_core::Image;

pub const MIN_TIMED_RUNS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NBin,
    MaxSigma,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_bin" | "n-bin" => Ok(SweepAxis::NBin),
            "max_sigma" | "max-sigma" => Ok(SweepAxis::MaxSigma),
            other => Err(Error::param(format!(
                "unknown sweep `{other}` (expected n_bin|max_sigma)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub backend: BackendKind,
    pub n_bin: usize,
    pub min_sigma: f64,
    pub max_sigma: f64,
    pub width: usize,
    pub height: usize,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub hardware: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup_runs: usize,
    pub timed_runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup_runs: 1,
            timed_runs: 5,
        }
    }
}

impl BenchConfig {
    pub fn new(warmup_runs: usize, timed_runs: usize) -> Result<Self> {
        if timed_runs < MIN_TIMED_RUNS {
            return Err(Error::param(format!(
                "at least {MIN_TIMED_RUNS} timed runs are required"
            )));
        }
        if warmup_runs == 0 {
            return Err(Error::param("at least one warmup run is required"));
        }
        Ok(Self {
            warmup_runs,
            timed_runs,
        })
    }
}

/// CPU model, logical core count, OS and architecture.
pub fn hardware_descriptor() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    format!(
        "{model}; {cores} threads; {}-{}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    sorted[crate::image_core::nearest_rank_index(sorted.len(), q)]
}

/// Times one configuration on a preprocessed image.
pub fn time_config(params: &DetectionParams, img: &Image, config: BenchConfig) -> Result<BenchRecord> {
    let config = BenchConfig::new(config.warmup_runs, config.timed_runs)?;
    let detector = Detector::new(params.clone())?;
    for _ in 0..config.warmup_runs {
        std::hint::black_box(detector.candidates(img)?);
    }
    let mut times = Vec::with_capacity(config.timed_runs);
    for _ in 0..config.timed_runs {
        let start = Instant::now();
        std::hint::black_box(detector.candidates(img)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchRecord {
        backend: params.backend,
        n_bin: params.n_bin,
        min_sigma: params.min_sigma,
        max_sigma: params.max_sigma,
        width: img.width(),
        height: img.height(),
        warmup_runs: config.warmup_runs,
        timed_runs: config.timed_runs,
        median_ms: percentile(&times, 0.5),
        p10_ms: percentile(&times, 0.1),
        p90_ms: percentile(&times, 0.9),
        hardware: hardware_descriptor(),
    })
}

fn bench_params(fixed: &DetectionParams, backend: BackendKind) -> DetectionParams {
    DetectionParams {
        backend,
        // pruning is identical for both backends and excluded from timing
        overlap: None,
        ..fixed.clone()
    }
}

pub fn sweep_n_bin(
    backend: BackendKind,
    n_bins: &[usize],
    fixed: &DetectionParams,
    img: &Image,
    config: BenchConfig,
) -> Result<Vec<BenchRecord>> {
    n_bins
        .iter()
        .map(|&n_bin| {
            let params = DetectionParams {
                n_bin,
                ..bench_params(fixed, backend)
            };
            time_config(&params, img, config)
        })
        .collect()
}

pub fn sweep_max_sigma(
    backend: BackendKind,
    max_sigmas: &[f64],
    fixed: &DetectionParams,
    img: &Image,
    config: BenchConfig,
) -> Result<Vec<BenchRecord>> {
    max_sigmas
        .iter()
        .map(|&max_sigma| {
            let params = DetectionParams {
                max_sigma,
                ..bench_params(fixed, backend)
            };
            time_config(&params, img, config)
        })
        .collect()
}

pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    backend: BackendKind,
    fixed: &DetectionParams,
    img: &Image,
    config: BenchConfig,
) -> Result<Vec<BenchRecord>> {
    match axis {
        SweepAxis::NBin => {
            let n_bins = values
                .iter()
                .map(|&v| {
                    if v >= 1.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::param(format!("n_bin values must be positive integers, got {v}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            sweep_n_bin(backend, &n_bins, fixed, img, config)
        }
        SweepAxis::MaxSigma => sweep_max_sigma(backend, values, fixed, img, config),
    }
}

pub fn write_records_csv<W: Write>(out: W, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<bench csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image() -> Image {
        Image::from_fn(48, 40, |x, y| (((x * 7 + y * 13) % 17) as f32) / 17.0).unwrap()
    }

    #[test]
    fn record_percentiles_are_ordered() {
        let params = DetectionParams::with_ladder(1.0, 3.0, 4);
        let rec = time_config(&params, &tiny_image(), BenchConfig::new(1, 5).unwrap()).unwrap();
        assert_eq!(rec.timed_runs, 5);
        assert!(rec.p10_ms <= rec.median_ms && rec.median_ms <= rec.p90_ms);
    }

    #[test]
    fn too_few_reps_rejected() {
        assert!(BenchConfig::new(1, 2).is_err());
        assert!(BenchConfig::new(0, 3).is_err());
    }

    #[test]
    fn sweep_produces_one_record_per_value() {
        let fixed = DetectionParams::with_ladder(1.0, 3.0, 2);
        let recs = sweep(
            SweepAxis::NBin,
            &[2.0, 3.0],
            BackendKind::Fft,
            &fixed,
            &tiny_image(),
            BenchConfig::new(1, 3).unwrap(),
        )
        .unwrap();
        assert_eq!(recs.iter().map(|r| r.n_bin).collect::<Vec<_>>(), vec![2, 3]);
        assert!(sweep(
            SweepAxis::NBin,
            &[2.5],
            BackendKind::Fft,
            &fixed,
            &tiny_image(),
            BenchConfig::default()
        )
        .is_err());

        let mut buf = Vec::new();
        write_records_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("backend,n_bin,min_sigma,max_sigma,width,height,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn axis_parse() {
        assert_eq!("n_bin".parse::<SweepAxis>().unwrap(), SweepAxis::NBin);
        assert_eq!("max_sigma".parse::<SweepAxis>().unwrap(), SweepAxis::MaxSigma);
        assert!("width".parse::<SweepAxis>().is_err());
    }
}
