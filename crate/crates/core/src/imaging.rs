//! Image substrate: the `Micrograph` container, normalization, dihedral
//! augmentation, probing-lattice coverage sampling, classical interpolators,
//! Gaussian blurring, and deterministic synthetic scan generation.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// Range an image's values are constrained to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// Values in [0, 1].
    Unit,
    /// Values in [-1, 1].
    SignedUnit,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::SignedUnit => (-1.0, 1.0),
        }
    }
}

/// A single-channel scan stored row-major as f64.
///
/// Values are finite and within the tagged range. Constructors clamp
/// floating-point excursions up to 1e-9 past the bounds and reject anything
/// larger.
#[derive(Debug, Clone, PartialEq)]
pub struct Micrograph {
    height: usize,
    width: usize,
    values: Vec<f64>,
    range: ValueRange,
}

const RANGE_SLACK: f64 = 1e-9;

impl Micrograph {
    pub fn new(height: usize, width: usize, mut values: Vec<f64>, range: ValueRange) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("micrograph dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {}x{}, got {}",
                height * width,
                height,
                width,
                values.len()
            )));
        }
        let (lo, hi) = range.bounds();
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(Error::invalid("micrograph values must be finite"));
            }
            if *v < lo {
                if *v < lo - RANGE_SLACK {
                    return Err(Error::invalid(format!("value {v} below range minimum {lo}")));
                }
                *v = lo;
            } else if *v > hi {
                if *v > hi + RANGE_SLACK {
                    return Err(Error::invalid(format!("value {v} above range maximum {hi}")));
                }
                *v = hi;
            }
        }
        Ok(Micrograph { height, width, values, range })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, value: f64, range: ValueRange) -> Result<Self> {
        Micrograph::new(height, width, vec![value; height * width], range)
    }

    pub fn from_fn(height: usize, width: usize, range: ValueRange, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Micrograph::new(height, width, values, range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    /// Side length of a square image.
    pub fn side(&self) -> usize {
        debug_assert!(self.is_square());
        self.height
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Mean squared difference between two same-shaped images.
    pub fn mse(&self, other: &Micrograph) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let n = self.values.len() as f64;
        let sum: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n)
    }

    /// Map [0,1] values to [-1,1].
    pub fn to_signed_unit(&self) -> Result<Micrograph> {
        match self.range {
            ValueRange::SignedUnit => Ok(self.clone()),
            ValueRange::Unit => Micrograph::new(
                self.height,
                self.width,
                self.values.iter().map(|v| 2.0 * v - 1.0).collect(),
                ValueRange::SignedUnit,
            ),
        }
    }
}

/// Probing-lattice coverage: step `s` between scanned locations and the
/// scanned fraction `1/s^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    step: usize,
    fraction: f64,
}

impl Coverage {
    pub fn from_step(step: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::invalid("coverage step must be >= 1"));
        }
        let fraction = 1.0 / ((step * step) as f64);
        Ok(Coverage { step, fraction })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }
}

/// Normalized, symmetric Gaussian kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    size: usize,
    sigma: f64,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

/// Samples a Gaussian at integer offsets and normalizes the grid to sum 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<BlurKernel> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::invalid(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("kernel sigma must be positive"));
    }
    let r = (size / 2) as isize;
    let mut weights = Vec::with_capacity(size * size);
    let denom = 2.0 * sigma * sigma;
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let w = (-((dy * dy + dx * dx) as f64) / denom).exp();
            weights.push(w);
            sum += w;
        }
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    Ok(BlurKernel { size, sigma, weights })
}

/// Linearly rescale a raw grid to [0, 1].
///
/// Non-finite entries become 0 before the min/max transform; a uniform grid
/// maps to 0.5 everywhere.
pub fn normalize_crop(height: usize, width: usize, raw: &[f64]) -> Result<Micrograph> {
    if height == 0 || width == 0 || raw.is_empty() {
        return Err(Error::invalid("cannot normalize an empty grid"));
    }
    if raw.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "expected {} values, got {}",
            height * width,
            raw.len()
        )));
    }
    let cleaned: Vec<f64> = raw.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
    let min = cleaned.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = cleaned.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        let span = max - min;
        cleaned.iter().map(|v| (v - min) / span).collect()
    } else {
        vec![0.5; cleaned.len()]
    };
    Micrograph::new(height, width, values, ValueRange::Unit)
}

/// One element of the dihedral group D4, applied as flips then quarter turns.
pub fn augment(m: &Micrograph, flip_h: bool, flip_v: bool, rot90_count: u8) -> Result<Micrograph> {
    if !m.is_square() {
        return Err(Error::invalid("augmentation requires a square image"));
    }
    let n = m.side();
    let mut cur: Vec<f64> = m.values().to_vec();
    if flip_h {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = cur[i * n + (n - 1 - j)];
            }
        }
        cur = out;
    }
    if flip_v {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = cur[(n - 1 - i) * n + j];
            }
        }
        cur = out;
    }
    for _ in 0..(rot90_count % 4) {
        // 90 degrees counterclockwise: out[i][j] = in[j][n-1-i]
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = cur[j * n + (n - 1 - i)];
            }
        }
        cur = out;
    }
    Micrograph::new(n, n, cur, m.range())
}

/// Keep only the probing locations {0, s, 2s, ...} along each axis.
///
/// The output side is ceil(side / s), so a 512-pixel scan at s = 5/7/10
/// yields 103/74/52 pixels.
pub fn downsample_nearest(m: &Micrograph, cov: Coverage) -> Micrograph {
    let s = cov.step();
    let oh = m.height().div_ceil(s);
    let ow = m.width().div_ceil(s);
    let mut values = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            values.push(m.get(i * s, j * s));
        }
    }
    Micrograph::new(oh, ow, values, m.range()).expect("subset of valid values")
}

/// Replicate each probing value over its block; inverse of
/// [`downsample_nearest`] on the small grid.
pub fn upsample_nearest(m: &Micrograph, target_side: usize) -> Result<Micrograph> {
    if target_side < m.height() || target_side < m.width() {
        return Err(Error::invalid(format!(
            "target side {} smaller than input {}x{}",
            target_side,
            m.height(),
            m.width()
        )));
    }
    // Probing step implied by the ceil convention: s = ceil(target / side)
    // recovers the step whenever the input side came from downsampling, and
    // indices are clamped for sizes with no exactly consistent step.
    let sy = target_side.div_ceil(m.height());
    let sx = target_side.div_ceil(m.width());
    let mut values = Vec::with_capacity(target_side * target_side);
    for i in 0..target_side {
        let si = (i / sy).min(m.height() - 1);
        for j in 0..target_side {
            let sj = (j / sx).min(m.width() - 1);
            values.push(m.get(si, sj));
        }
    }
    Micrograph::new(target_side, target_side, values, m.range())
}

/// Resampling methods named by the evaluation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterpMethod {
    Nearest,
    Area,
    Bilinear,
    Bicubic,
    Lanczos,
}

impl InterpMethod {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "nearest" => InterpMethod::Nearest,
            "area" => InterpMethod::Area,
            "bilinear" => InterpMethod::Bilinear,
            "bicubic" => InterpMethod::Bicubic,
            "lanczos" => InterpMethod::Lanczos,
            other => return Err(Error::invalid(format!("unknown interpolation method '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            InterpMethod::Nearest => "nearest",
            InterpMethod::Area => "area",
            InterpMethod::Bilinear => "bilinear",
            InterpMethod::Bicubic => "bicubic",
            InterpMethod::Lanczos => "lanczos",
        }
    }

    pub fn all() -> [InterpMethod; 5] {
        [
            InterpMethod::Nearest,
            InterpMethod::Area,
            InterpMethod::Bilinear,
            InterpMethod::Bicubic,
            InterpMethod::Lanczos,
        ]
    }
}

fn catmull_rom(t: f64) -> f64 {
    // Cubic convolution with a = -0.5.
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn lanczos3(t: f64) -> f64 {
    let t = t.abs();
    if t < 1e-12 {
        return 1.0;
    }
    if t >= 3.0 {
        return 0.0;
    }
    let pt = std::f64::consts::PI * t;
    3.0 * (pt.sin() * (pt / 3.0).sin()) / (pt * pt)
}

/// Resample one axis; returns (tap index, weight) lists per output position.
fn axis_taps(src: usize, dst: usize, method: InterpMethod) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let clamp = |i: isize| -> usize { i.clamp(0, src as isize - 1) as usize };
    (0..dst)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale - 0.5;
            match method {
                InterpMethod::Nearest => {
                    vec![(clamp(center.round() as isize), 1.0)]
                }
                InterpMethod::Area => {
                    // Box integration of the source footprint [d*scale, (d+1)*scale).
                    let lo = d as f64 * scale;
                    let hi = (d as f64 + 1.0) * scale;
                    let first = lo.floor() as isize;
                    let last = (hi - 1e-12).floor() as isize;
                    let mut taps = Vec::new();
                    let mut total = 0.0;
                    for i in first..=last {
                        let cell_lo = (i as f64).max(lo);
                        let cell_hi = ((i + 1) as f64).min(hi);
                        let w = (cell_hi - cell_lo).max(0.0);
                        if w > 0.0 {
                            taps.push((clamp(i), w));
                            total += w;
                        }
                    }
                    for t in taps.iter_mut() {
                        t.1 /= total;
                    }
                    taps
                }
                InterpMethod::Bilinear => {
                    let x0 = center.floor();
                    let f = center - x0;
                    let i0 = x0 as isize;
                    if f.abs() < 1e-12 {
                        vec![(clamp(i0), 1.0)]
                    } else {
                        vec![(clamp(i0), 1.0 - f), (clamp(i0 + 1), f)]
                    }
                }
                InterpMethod::Bicubic | InterpMethod::Lanczos => {
                    let (reach, f): (isize, fn(f64) -> f64) = match method {
                        InterpMethod::Bicubic => (2, catmull_rom),
                        _ => (3, lanczos3),
                    };
                    let x0 = center.floor() as isize;
                    let mut taps = Vec::new();
                    let mut total = 0.0;
                    for i in (x0 - reach + 1)..=(x0 + reach) {
                        let w = f(center - i as f64);
                        if w != 0.0 {
                            taps.push((clamp(i), w));
                            total += w;
                        }
                    }
                    for t in taps.iter_mut() {
                        t.1 /= total;
                    }
                    taps
                }
            }
        })
        .collect()
}

/// Separable resampling to `target_side` x `target_side`.
///
/// Bicubic uses the Catmull-Rom coefficient a = -0.5 and Lanczos a 3-lobe
/// window; outputs are clamped back to the image's tagged range (bicubic and
/// Lanczos overshoot on sharp steps).
pub fn interpolate(m: &Micrograph, target_side: usize, method: InterpMethod) -> Result<Micrograph> {
    if target_side == 0 {
        return Err(Error::invalid("target side must be positive"));
    }
    let (h, w) = (m.height(), m.width());
    let col_taps = axis_taps(w, target_side, method);
    let row_taps = axis_taps(h, target_side, method);

    // Horizontal pass.
    let mut mid = vec![0.0f64; h * target_side];
    for i in 0..h {
        for (j, taps) in col_taps.iter().enumerate() {
            let mut acc = 0.0;
            for &(sj, wt) in taps {
                acc += wt * m.get(i, sj);
            }
            mid[i * target_side + j] = acc;
        }
    }
    // Vertical pass.
    let (lo, hi) = m.range().bounds();
    let mut out = vec![0.0f64; target_side * target_side];
    for (i, taps) in row_taps.iter().enumerate() {
        for j in 0..target_side {
            let mut acc = 0.0;
            for &(si, wt) in taps {
                acc += wt * mid[si * target_side + j];
            }
            out[i * target_side + j] = acc.clamp(lo, hi);
        }
    }
    Micrograph::new(target_side, target_side, out, m.range())
}

/// Mirror an index into [0, n) without repeating the edge sample.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = ((i % period) + period) % period;
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// 2-D correlation with `k` under reflect padding, on raw row-major values.
/// Shared by [`blur`] and the deconvolution solvers so the two sides see the
/// same operator bit for bit.
pub(crate) fn correlate_reflect(values: &[f64], h: usize, w: usize, k: &BlurKernel) -> Vec<f64> {
    let r = k.radius();
    let size = k.size();
    let mut out = vec![0.0f64; h * w];
    for i in 0..h {
        let interior_row = i >= r && i + r < h;
        for j in 0..w {
            let mut acc = 0.0;
            if interior_row && j >= r && j + r < w {
                let mut kw = 0usize;
                for ky in 0..size {
                    let base = (i + ky - r) * w + j - r;
                    let row = &values[base..base + size];
                    for &x in row {
                        acc += k.weights[kw] * x;
                        kw += 1;
                    }
                }
            } else {
                for ky in 0..size {
                    let sy = reflect_index(i as isize + ky as isize - r as isize, h);
                    for kx in 0..size {
                        let sx = reflect_index(j as isize + kx as isize - r as isize, w);
                        acc += k.weight(ky, kx) * values[sy * w + sx];
                    }
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Adjoint of [`correlate_reflect`]: scatter each output contribution back
/// through the same reflected index map.
pub(crate) fn correlate_reflect_adjoint(values: &[f64], h: usize, w: usize, k: &BlurKernel) -> Vec<f64> {
    let r = k.radius();
    let size = k.size();
    let mut out = vec![0.0f64; h * w];
    for i in 0..h {
        let interior_row = i >= r && i + r < h;
        for j in 0..w {
            let g = values[i * w + j];
            if interior_row && j >= r && j + r < w {
                let mut kw = 0usize;
                for ky in 0..size {
                    let base = (i + ky - r) * w + j - r;
                    let row = &mut out[base..base + size];
                    for x in row {
                        *x += k.weights[kw] * g;
                        kw += 1;
                    }
                }
            } else {
                for ky in 0..size {
                    let sy = reflect_index(i as isize + ky as isize - r as isize, h);
                    for kx in 0..size {
                        let sx = reflect_index(j as isize + kx as isize - r as isize, w);
                        out[sy * w + sx] += k.weight(ky, kx) * g;
                    }
                }
            }
        }
    }
    out
}

/// 2-D correlation with `k` under reflect padding.
pub fn blur(m: &Micrograph, k: &BlurKernel) -> Micrograph {
    let (h, w) = (m.height(), m.width());
    let out = correlate_reflect(m.values(), h, w, k);
    Micrograph::new(h, w, out, m.range()).expect("convex combination stays in range")
}

/// Styles for the synthetic stand-in corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthStyle {
    Flat,
    Gradient,
    GaussianField,
    Lattice,
}

impl SynthStyle {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "flat" => SynthStyle::Flat,
            "gradient" => SynthStyle::Gradient,
            "gaussian_field" => SynthStyle::GaussianField,
            "lattice" => SynthStyle::Lattice,
            other => return Err(Error::invalid(format!("unknown synth style '{other}'"))),
        })
    }
}

/// Generator parameters, versioned so runs stay reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub version: u32,
    /// 1/e autocorrelation length of the gaussian_field style, in px.
    pub field_corr_len: f64,
    /// Lattice spacing in px.
    pub lattice_spacing: f64,
    /// Blob standard deviation in px.
    pub lattice_sigma: f64,
    /// Mean counts at intensity 1.0 for the shot-noise model.
    pub shot_dose: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            version: 1,
            field_corr_len: 6.0,
            lattice_spacing: 9.0,
            lattice_sigma: 2.4,
            shot_dose: 400.0,
        }
    }
}

/// Deterministic synthetic micrograph in [0, 1].
pub fn synth_micrograph(seed: u64, side: usize, style: SynthStyle) -> Result<Micrograph> {
    synth_micrograph_with(seed, side, style, &SynthConfig::default())
}

pub fn synth_micrograph_with(seed: u64, side: usize, style: SynthStyle, cfg: &SynthConfig) -> Result<Micrograph> {
    if side < 16 {
        return Err(Error::invalid("synthetic side must be >= 16"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    match style {
        SynthStyle::Flat => Micrograph::constant(side, side, 0.5, ValueRange::Unit),
        SynthStyle::Gradient => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (c, s) = (theta.cos(), theta.sin());
            let n = side as f64;
            let raw: Vec<f64> = (0..side * side)
                .map(|idx| {
                    let (i, j) = ((idx / side) as f64, (idx % side) as f64);
                    c * (j / n) + s * (i / n)
                })
                .collect();
            normalize_crop(side, side, &raw)
        }
        SynthStyle::GaussianField => {
            let sigma = cfg.field_corr_len / 2.0;
            // Radius 4*sigma: tighter truncation leaves sidelobe energy at
            // mid frequencies, which matters to downstream deconvolution.
            let ksize = {
                let k = (8.0 * sigma).ceil() as usize | 1;
                k.max(3)
            };
            let kernel = gaussian_kernel(ksize, sigma)?;
            // White noise, smoothed; generated with padding so the
            // correlation structure is stationary across the crop.
            let pad = kernel.radius();
            let big = side + 2 * pad;
            let noise: Vec<f64> = (0..big * big).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let noise_img = normalize_crop(big, big, &noise)?;
            let smooth = blur(&noise_img, &kernel);
            let mut crop = Vec::with_capacity(side * side);
            for i in 0..side {
                for j in 0..side {
                    crop.push(smooth.get(i + pad, j + pad));
                }
            }
            normalize_crop(side, side, &crop)
        }
        SynthStyle::Lattice => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
            let (ct, st) = (theta.cos(), theta.sin());
            let spacing = cfg.lattice_spacing * rng.gen_range(0.85..1.15);
            let sig2 = 2.0 * cfg.lattice_sigma * cfg.lattice_sigma;
            let (ox, oy): (f64, f64) = (rng.gen_range(0.0..spacing), rng.gen_range(0.0..spacing));
            let mut raw = Vec::with_capacity(side * side);
            for i in 0..side {
                for j in 0..side {
                    // Rotated lattice coordinates.
                    let x = ct * j as f64 + st * i as f64 + ox;
                    let y = -st * j as f64 + ct * i as f64 + oy;
                    let (u, v) = (x / spacing, y / spacing);
                    let (u0, v0) = (u.floor(), v.floor());
                    let mut val = 0.0;
                    for du in -1..=2 {
                        for dv in -1..=2 {
                            let px = (u0 + du as f64) * spacing;
                            let py = (v0 + dv as f64) * spacing;
                            let d2 = (x - px) * (x - px) + (y - py) * (y - py);
                            val += (-d2 / sig2).exp();
                        }
                    }
                    raw.push(0.15 + 0.7 * val.min(1.0));
                }
            }
            // Shot noise: counts drawn per pixel at the configured dose.
            let mut noisy = Vec::with_capacity(raw.len());
            for &intensity in &raw {
                let lambda = (intensity * cfg.shot_dose).max(1e-9);
                let pois = Poisson::new(lambda).expect("positive lambda");
                let counts: f64 = pois.sample(&mut rng);
                noisy.push((counts / cfg.shot_dose).clamp(0.0, 1.0));
            }
            normalize_crop(side, side, &noisy)
        }
    }
}

/// Random smooth texture synthesized directly in the cosine eigenbasis of
/// the reflect-padded correlation operator, with no content above `f_cut`
/// cycles/px. Such crops are exactly recoverable from a finite Gaussian
/// blur, which makes them the right fixture for deconvolution oracles.
pub fn synth_bandlimited(seed: u64, side: usize, f_cut: f64) -> Result<Micrograph> {
    if side < 16 {
        return Err(Error::invalid("synthetic side must be >= 16"));
    }
    if !(f_cut > 0.0 && f_cut <= 0.5) {
        return Err(Error::invalid("f_cut must lie in (0, 0.5]"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = side;
    // DCT-I mode k has frequency k / (2 (n - 1)) cycles/px.
    let kmax = (f_cut * 2.0 * (n as f64 - 1.0)).floor() as usize;
    let kmax = kmax.min(n - 1);
    let mut coeffs = Vec::new();
    for ky in 0..=kmax {
        for kx in 0..=kmax {
            if ky == 0 && kx == 0 {
                continue;
            }
            let f = ((ky * ky + kx * kx) as f64).sqrt() / (2.0 * (n as f64 - 1.0));
            if f > f_cut {
                continue;
            }
            // Soft 1/(1 + (f/f0)^2) envelope for a natural-looking falloff.
            let env = 1.0 / (1.0 + (f / (0.4 * f_cut)).powi(2));
            let amp: f64 = rng.gen_range(-1.0..1.0) * env;
            coeffs.push((ky, kx, amp));
        }
    }
    let denom = std::f64::consts::PI / (n as f64 - 1.0);
    let mut raw = vec![0.0f64; n * n];
    for &(ky, kx, amp) in &coeffs {
        for i in 0..n {
            let cy = (denom * ky as f64 * i as f64).cos();
            for j in 0..n {
                let cx = (denom * kx as f64 * j as f64).cos();
                raw[i * n + j] += amp * cy * cx;
            }
        }
    }
    normalize_crop(n, n, &raw)
}
