//! Difference-of-Gaussians blob detection: adjacent differencing, 3-D max
//! filter extrema, thresholding, overlap coalescing and radius histograms.
//!
//! Slices are `sigma_i * (L_i - L_{i+1})` (narrower minus wider), which is
//! positive at the centre of bright blobs on a dark background, so a positive
//! response threshold selects bright droplets.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convolve::{
    check_stack_size, convolve_bank_with_limit, convolve_fft, fft_forward_plan, BackendKind, FftPlan, KernelSpectra,
    Real, ScaleStack, DEFAULT_MAX_STACK_ELEMENTS,
};
use crate::error::{Error, Result};
use crate::image_core::{preprocess, Image, DEFAULT_SATURATION, DEFAULT_SMOOTH_SIGMA};
use crate::scale_space::{KernelBank, SigmaLadder, DEFAULT_TRUNCATE};

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_OVERLAP: f64 = 0.5;
pub const DEFAULT_NEIGHBORHOOD: usize = 3;

// ---------------------------------------------------------------------------
// parameters

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub enabled: bool,
    pub smooth_sigma: f64,
    pub saturation: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            enabled: true,
            smooth_sigma: DEFAULT_SMOOTH_SIGMA,
            saturation: DEFAULT_SATURATION,
        }
    }
}

/// Everything that determines a detector run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    pub min_sigma: f64,
    pub max_sigma: f64,
    pub n_bin: usize,
    pub truncate: f64,
    pub threshold: f64,
    /// Normalized-overlap threshold for coalescing; `None` disables pruning.
    pub overlap: Option<f64>,
    pub neighborhood: usize,
    pub backend: BackendKind,
    pub preprocess: PreprocessParams,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            min_sigma: 2.0,
            max_sigma: 15.0,
            n_bin: 26,
            truncate: DEFAULT_TRUNCATE,
            threshold: DEFAULT_THRESHOLD,
            overlap: Some(DEFAULT_OVERLAP),
            neighborhood: DEFAULT_NEIGHBORHOOD,
            backend: BackendKind::Fft,
            preprocess: PreprocessParams::default(),
        }
    }
}

impl DetectionParams {
    pub fn with_ladder(min_sigma: f64, max_sigma: f64, n_bin: usize) -> Self {
        Self {
            min_sigma,
            max_sigma,
            n_bin,
            ..Self::default()
        }
    }

    pub fn ladder(&self) -> Result<SigmaLadder> {
        SigmaLadder::new(self.min_sigma, self.max_sigma, self.n_bin)
    }

    /// Compact JSON, also usable as a cache key.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("parameters always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.ladder()?;
        if !(self.truncate > 0.0 && self.truncate.is_finite()) {
            return Err(Error::param(format!(
                "truncate must be positive, got {}",
                self.truncate
            )));
        }
        if !self.threshold.is_finite() {
            return Err(Error::param("threshold must be finite"));
        }
        if let Some(o) = self.overlap {
            if !(0.0..=1.0).contains(&o) {
                return Err(Error::param(format!("overlap must be in [0, 1], got {o}")));
            }
        }
        if self.neighborhood == 0 || self.neighborhood.is_multiple_of(2) {
            return Err(Error::param(format!(
                "neighborhood must be odd and positive, got {}",
                self.neighborhood
            )));
        }
        let p = &self.preprocess;
        if !(p.smooth_sigma >= 0.0 && p.smooth_sigma.is_finite()) {
            return Err(Error::param("smooth_sigma must be >= 0"));
        }
        if !(0.0..0.5).contains(&p.saturation) {
            return Err(Error::param("saturation must be in [0, 0.5)"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// data types

/// Scale-normalized differences of adjacent scale-space levels.
#[derive(Clone, Debug, PartialEq)]
pub struct DoGStack<T = f32> {
    pub width: usize,
    pub height: usize,
    /// The lower scale of each pair, `sigma_1 .. sigma_n_bin`.
    pub sigmas: Vec<f64>,
    pub slices: Vec<Vec<T>>,
}

impl<T: Real> DoGStack<T> {
    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, i: usize) -> T {
        self.slices[i][y * self.width + x]
    }
}

/// A circular blob candidate centred on an integer pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub x: usize,
    pub y: usize,
    pub sigma: f64,
    pub radius: f64,
    pub response: f64,
    /// Set when the extremum sits on the first or last slice of the ladder.
    pub at_scale_boundary: bool,
}

impl Blob {
    pub fn new(x: usize, y: usize, sigma: f64, response: f64, at_scale_boundary: bool) -> Self {
        Self {
            x,
            y,
            sigma,
            radius: SQRT_2 * sigma,
            response,
            at_scale_boundary,
        }
    }

    fn set_radius(&mut self, radius: f64) {
        self.radius = radius;
        self.sigma = radius / SQRT_2;
    }
}

/// Descending response, then row-major position, then scale.
pub fn response_order(a: &Blob, b: &Blob) -> std::cmp::Ordering {
    b.response
        .total_cmp(&a.response)
        .then(a.y.cmp(&b.y))
        .then(a.x.cmp(&b.x))
        .then(a.sigma.total_cmp(&b.sigma))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSet {
    pub blobs: Vec<Blob>,
    pub source_shape: (usize, usize),
    pub params: DetectionParams,
}

/// Serialized form of a [`BlobSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSetDocument {
    pub image: String,
    pub params: DetectionParams,
    pub blobs: Vec<Blob>,
}

impl BlobSet {
    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn to_document(&self, image: impl Into<String>) -> BlobSetDocument {
        BlobSetDocument {
            image: image.into(),
            params: self.params.clone(),
            blobs: self.blobs.clone(),
        }
    }

    pub fn to_json(&self, image: impl Into<String>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document(image))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusHistogram {
    /// `sqrt(2) * sigma_i` for every ladder scale.
    pub bin_centers: Vec<f64>,
    pub counts: Vec<usize>,
    /// Sum of sphere volumes `4/3 pi r^3` of the blobs in each bin.
    pub volume_weights: Vec<f64>,
}

impl RadiusHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_center_px", "count", "volume_weight"])?;
        for ((c, n), v) in self.bin_centers.iter().zip(&self.counts).zip(&self.volume_weights) {
            w.write_record([c.to_string(), n.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<histogram csv>", e))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// stages

pub fn dog_stack<T: Real>(stack: &ScaleStack<T>, ladder: &SigmaLadder) -> Result<DoGStack<T>> {
    if stack.levels.len() != ladder.len() {
        return Err(Error::ShapeMismatch(format!(
            "stack has {} levels, ladder has {} scales",
            stack.levels.len(),
            ladder.len()
        )));
    }
    let sigmas = ladder.sigmas()[..ladder.n_bin()].to_vec();
    let slices = sigmas
        .par_iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let s = T::of_f64(sigma);
            stack.levels[i]
                .iter()
                .zip(&stack.levels[i + 1])
                .map(|(&narrow, &wide)| s * (narrow - wide))
                .collect()
        })
        .collect();
    Ok(DoGStack {
        width: stack.width,
        height: stack.height,
        sigmas,
        slices,
    })
}

/// Sliding maximum over a window of `2 * half + 1`; missing samples are ignored.
fn window_max<T: Real>(src: &[T], dst: &mut [T], half: usize) {
    let n = src.len();
    for (i, d) in dst.iter_mut().enumerate() {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(n);
        *d = src[lo..hi].iter().copied().fold(T::neg_infinity(), T::max);
    }
}

/// Box maximum filter of side `n` over the whole (x, y, scale) volume.
fn max_filter_3d<T: Real>(dog: &DoGStack<T>, n: usize) -> Vec<Vec<T>> {
    let (w, h) = (dog.width, dog.height);
    let half = n / 2;
    // x then y within each slice
    let planar: Vec<Vec<T>> = dog
        .slices
        .par_iter()
        .map(|slice| {
            let mut along_x = vec![T::zero(); w * h];
            for (src, dst) in slice.chunks_exact(w).zip(along_x.chunks_exact_mut(w)) {
                window_max(src, dst, half);
            }
            let mut out = vec![T::zero(); w * h];
            let mut column = vec![T::zero(); h];
            let mut column_max = vec![T::zero(); h];
            for x in 0..w {
                for y in 0..h {
                    column[y] = along_x[y * w + x];
                }
                window_max(&column, &mut column_max, half);
                for y in 0..h {
                    out[y * w + x] = column_max[y];
                }
            }
            out
        })
        .collect();
    let k = planar.len();
    (0..k)
        .into_par_iter()
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(k);
            let mut out = planar[lo].clone();
            for other in &planar[lo + 1..hi] {
                for (o, &v) in out.iter_mut().zip(other) {
                    *o = o.max(v);
                }
            }
            out
        })
        .collect()
}

/// Groups flagged pixels of one plane into 8-connected components and
/// returns each component's rounded centroid and one member index.
fn coalesce_plateaus(flags: &[bool], width: usize, height: usize) -> Vec<(usize, usize, usize)> {
    let mut seen = vec![false; flags.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..flags.len() {
        if !flags[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut sx, mut sy, mut count) = (0usize, 0usize, 0usize);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % width, idx / width);
            sx += x;
            sy += y;
            count += 1;
            for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    let n = ny * width + nx;
                    if flags[n] && !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        let cx = (sx as f64 / count as f64).round() as usize;
        let cy = (sy as f64 / count as f64).round() as usize;
        out.push((cx, cy, start));
    }
    out
}

fn check_neighborhood(neighborhood: usize) -> Result<()> {
    if neighborhood == 0 || neighborhood.is_multiple_of(2) {
        return Err(Error::param(format!(
            "neighborhood must be odd and positive, got {neighborhood}"
        )));
    }
    Ok(())
}

/// Voxels equal to the maximum of their `n x n x n` neighbourhood and above
/// `threshold`. Connected plateaus within a slice collapse to one blob at
/// their centroid. Returned in [`response_order`].
pub fn find_extrema<T: Real>(dog: &DoGStack<T>, threshold: f64, neighborhood: usize) -> Result<Vec<Blob>> {
    check_neighborhood(neighborhood)?;
    let maxed = max_filter_3d(dog, neighborhood);
    let last = dog.n_slices().saturating_sub(1);
    let mut blobs: Vec<Blob> = dog
        .slices
        .par_iter()
        .zip(&maxed)
        .enumerate()
        .flat_map_iter(|(i, (slice, maxima))| {
            let flags: Vec<bool> = slice
                .iter()
                .zip(maxima)
                .map(|(&d, &m)| d == m && d.as_f64() > threshold)
                .collect();
            coalesce_plateaus(&flags, dog.width, dog.height)
                .into_iter()
                .map(move |(x, y, member)| Blob::new(x, y, dog.sigmas[i], slice[member].as_f64(), i == 0 || i == last))
        })
        .collect();
    blobs.sort_by(response_order);
    Ok(blobs)
}

/// The projected form of the extremum search: per-pixel maximum over scale,
/// then 2-D local maxima of that projection. Agrees with [`find_extrema`] when
/// every blob is extremal at exactly one scale.
pub fn find_extrema_projected<T: Real>(dog: &DoGStack<T>, threshold: f64, neighborhood: usize) -> Result<Vec<Blob>> {
    check_neighborhood(neighborhood)?;
    let (w, h) = (dog.width, dog.height);
    let mut best = vec![T::neg_infinity(); w * h];
    let mut best_scale = vec![0usize; w * h];
    for (i, slice) in dog.slices.iter().enumerate() {
        for ((b, s), &v) in best.iter_mut().zip(best_scale.iter_mut()).zip(slice) {
            if v > *b {
                *b = v;
                *s = i;
            }
        }
    }
    let projected = DoGStack {
        width: w,
        height: h,
        sigmas: vec![0.0],
        slices: vec![best],
    };
    let maxima = max_filter_3d(&projected, neighborhood);
    let plane = &projected.slices[0];
    let flags: Vec<bool> = plane
        .iter()
        .zip(&maxima[0])
        .map(|(&d, &m)| d == m && d.as_f64() > threshold)
        .collect();
    let last = dog.n_slices() - 1;
    let mut blobs: Vec<Blob> = coalesce_plateaus(&flags, w, h)
        .into_iter()
        .map(|(x, y, member)| {
            let i = best_scale[member];
            Blob::new(x, y, dog.sigmas[i], plane[member].as_f64(), i == 0 || i == last)
        })
        .collect();
    blobs.sort_by(response_order);
    Ok(blobs)
}

/// Area of the intersection of two disks with radii `r1`, `r2` whose centres are `d` apart.
pub fn circle_intersection_area(r1: f64, r2: f64, d: f64) -> f64 {
    if d >= r1 + r2 {
        return 0.0;
    }
    let small = r1.min(r2);
    if d <= (r1 - r2).abs() {
        return PI * small * small;
    }
    let a1 = ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).clamp(-1.0, 1.0).acos();
    let a2 = ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).clamp(-1.0, 1.0).acos();
    let k = (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2);
    r1 * r1 * a1 + r2 * r2 * a2 - 0.5 * k.max(0.0).sqrt()
}

/// Intersection area divided by the area of the smaller disk.
pub fn normalized_overlap(a: &Blob, b: &Blob) -> f64 {
    let small = a.radius.min(b.radius);
    if small <= 0.0 {
        return 0.0;
    }
    let d = ((a.x as f64 - b.x as f64).powi(2) + (a.y as f64 - b.y as f64).powi(2)).sqrt();
    circle_intersection_area(a.radius, b.radius, d) / (PI * small * small)
}

/// Coalesces pairs whose normalized overlap exceeds `overlap_threshold`.
///
/// Pairs are visited in [`response_order`]; a merged blob keeps the stronger
/// blob's centre and response and takes the mean radius. Passes repeat until
/// no pair exceeds the threshold.
pub fn prune_overlaps(blobs: Vec<Blob>, overlap_threshold: f64) -> Result<Vec<Blob>> {
    if !(0.0..=1.0).contains(&overlap_threshold) {
        return Err(Error::param(format!(
            "overlap threshold must be in [0, 1], got {overlap_threshold}"
        )));
    }
    let mut slots: Vec<Option<Blob>> = {
        let mut sorted = blobs;
        sorted.sort_by(response_order);
        sorted.into_iter().map(Some).collect()
    };
    let n = slots.len();
    loop {
        let mut merged = false;
        for i in 0..n {
            let Some(mut keep) = slots[i].take() else { continue };
            let mut j = i + 1;
            while j < n {
                if let Some(other) = &slots[j] {
                    if normalized_overlap(&keep, other) > overlap_threshold {
                        keep.set_radius(0.5 * (keep.radius + other.radius));
                        slots[j] = None;
                        merged = true;
                        // the radius changed; earlier partners may now overlap
                        j = i + 1;
                        continue;
                    }
                }
                j += 1;
            }
            slots[i] = Some(keep);
        }
        if !merged {
            break;
        }
    }
    Ok(slots.into_iter().flatten().collect())
}

/// Nearest-centre histogram over the ladder radii. Midpoints go to the smaller bin.
pub fn histogram(blobs: &[Blob], ladder: &SigmaLadder) -> RadiusHistogram {
    let centers = ladder.radii();
    let mut counts = vec![0usize; centers.len()];
    let mut volume_weights = vec![0.0; centers.len()];
    for blob in blobs {
        let k = nearest_bin(&centers, blob.radius);
        counts[k] += 1;
        volume_weights[k] += 4.0 / 3.0 * PI * blob.radius.powi(3);
    }
    RadiusHistogram {
        bin_centers: centers,
        counts,
        volume_weights,
    }
}

fn nearest_bin(centers: &[f64], r: f64) -> usize {
    // first centre >= r
    let upper = centers.partition_point(|&c| c < r);
    if upper == 0 {
        return 0;
    }
    if upper == centers.len() {
        return centers.len() - 1;
    }
    let lower = upper - 1;
    if r <= 0.5 * (centers[lower] + centers[upper]) {
        lower
    } else {
        upper
    }
}

/// Scale-normalized Laplacian of the Gaussian-smoothed image, `sigma^2 * lap(g * I)`,
/// with a 5-point stencil and reflect boundaries. Reference for the DoG path.
pub fn log_reference_response(img: &Image, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    let (kernel, radius) = crate::scale_space::gaussian_kernel(sigma, DEFAULT_TRUNCATE);
    let smooth = crate::convolve::convolve_single(img, &kernel, radius);
    let (w, h) = img.shape();
    let at =
        |x: isize, y: isize| smooth[crate::convolve::reflect_index(y, h) * w + crate::convolve::reflect_index(x, w)];
    let s2 = sigma * sigma;
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let lap = at(x + 1, y) + at(x - 1, y) + at(x, y + 1) + at(x, y - 1) - 4.0 * at(x, y);
            out[y as usize * w + x as usize] = s2 * lap;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pipeline

/// Wall-clock milliseconds spent in each stage of one detection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess_ms: f64,
    pub convolve_ms: f64,
    pub extrema_ms: f64,
    pub prune_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Detection {
    pub blobs: BlobSet,
    pub histogram: RadiusHistogram,
    pub timings: StageTimings,
}

struct FftState {
    plan: FftPlan<f32>,
    spectra: KernelSpectra<f32>,
}

type FftCell = Arc<OnceLock<Arc<FftState>>>;

/// A configured detector. Immutable apart from its per-shape transform
/// cache, so one instance can serve many threads.
pub struct Detector {
    params: DetectionParams,
    bank: KernelBank,
    max_stack_elements: usize,
    fft_cache: Mutex<HashMap<(usize, usize), FftCell>>,
    plan_builds: AtomicUsize,
}

impl std::fmt::Debug for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Detector")
            .field("params", &self.params)
            .field("max_width", &self.bank.max_width())
            .finish()
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

impl Detector {
    pub fn new(params: DetectionParams) -> Result<Self> {
        params.validate()?;
        let bank = KernelBank::new(params.ladder()?, params.truncate)?;
        Ok(Self {
            params,
            bank,
            max_stack_elements: DEFAULT_MAX_STACK_ELEMENTS,
            fft_cache: Mutex::new(HashMap::new()),
            plan_builds: AtomicUsize::new(0),
        })
    }

    pub fn with_stack_limit(mut self, max_elements: usize) -> Self {
        self.max_stack_elements = max_elements;
        self
    }

    pub fn params(&self) -> &DetectionParams {
        &self.params
    }

    pub fn ladder(&self) -> &SigmaLadder {
        self.bank.ladder()
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }

    /// Number of FFT plans (with kernel spectra) built so far.
    pub fn plan_builds(&self) -> usize {
        self.plan_builds.load(Ordering::Relaxed)
    }

    fn fft_state(&self, width: usize, height: usize) -> Result<Arc<FftState>> {
        let cell = {
            let mut cache = self.fft_cache.lock().expect("fft cache poisoned");
            cache.entry((width, height)).or_default().clone()
        };
        if width == 0 || height == 0 {
            return Err(Error::param("image must be at least 1x1"));
        }
        // concurrent callers for the same shape block here until one build finishes
        Ok(cell
            .get_or_init(|| {
                self.plan_builds.fetch_add(1, Ordering::Relaxed);
                let plan =
                    fft_forward_plan::<f32>(width, height, self.bank.max_width()).expect("dimensions checked above");
                let spectra = plan.kernel_spectra(&self.bank);
                Arc::new(FftState { plan, spectra })
            })
            .clone())
    }

    /// Applies the configured preprocessing (or returns a copy when disabled).
    pub fn prepare(&self, img: &Image) -> Result<Image> {
        let p = &self.params.preprocess;
        if p.enabled {
            preprocess(img, p.smooth_sigma, p.saturation)
        } else {
            Ok(img.clone())
        }
    }

    pub fn scale_stack(&self, img: &Image) -> Result<ScaleStack<f32>> {
        match self.params.backend {
            BackendKind::Direct => {
                convolve_bank_with_limit(img, &self.bank, BackendKind::Direct, self.max_stack_elements)
            }
            BackendKind::Fft => {
                check_stack_size(img, &self.bank, self.max_stack_elements)?;
                let state = self.fft_state(img.width(), img.height())?;
                let levels = convolve_fft(img, &state.plan, &state.spectra)?;
                Ok(ScaleStack {
                    width: img.width(),
                    height: img.height(),
                    sigmas: self.ladder().sigmas().to_vec(),
                    levels,
                })
            }
        }
    }

    pub fn dog(&self, img: &Image) -> Result<DoGStack<f32>> {
        dog_stack(&self.scale_stack(img)?, self.ladder())
    }

    /// Convolution, differencing and extremum search on an already prepared
    /// image; no pruning.
    pub fn candidates(&self, img: &Image) -> Result<Vec<Blob>> {
        let dog = self.dog(img)?;
        find_extrema(&dog, self.params.threshold, self.params.neighborhood)
    }

    pub fn detect(&self, img: &Image) -> Result<Detection> {
        let start = Instant::now();
        let prepared = self.prepare(img)?;
        let preprocess_ms = elapsed_ms(start);

        let t = Instant::now();
        let stack = self.scale_stack(&prepared)?;
        let convolve_ms = elapsed_ms(t);

        let t = Instant::now();
        let dog = dog_stack(&stack, self.ladder())?;
        drop(stack);
        let raw = find_extrema(&dog, self.params.threshold, self.params.neighborhood)?;
        let extrema_ms = elapsed_ms(t);

        let t = Instant::now();
        let blobs = match self.params.overlap {
            Some(overlap) => prune_overlaps(raw, overlap)?,
            None => raw,
        };
        let histogram = histogram(&blobs, self.ladder());
        let prune_ms = elapsed_ms(t);

        Ok(Detection {
            blobs: BlobSet {
                blobs,
                source_shape: img.shape(),
                params: self.params.clone(),
            },
            histogram,
            timings: StageTimings {
                preprocess_ms,
                convolve_ms,
                extrema_ms,
                prune_ms,
                total_ms: elapsed_ms(start),
            },
        })
    }
}

/// preprocess -> convolve -> DoG -> extrema -> prune -> histogram.
pub fn detect(img: &Image, params: &DetectionParams) -> Result<(BlobSet, RadiusHistogram)> {
    let detection = Detector::new(params.clone())?.detect(img)?;
    Ok((detection.blobs, detection.histogram))
}
