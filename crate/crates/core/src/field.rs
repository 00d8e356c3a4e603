//! Dense grid containers and the elementwise arithmetic the guidance and
//! sampler modules are built from.
//!
//! Latent fields are stored channel-major, then row, then column:
//! element `(c, y, x)` lives at `c * H * W + y * W + x`.

use crate::error::{invalid, Error, Result};

/// A `C × H × W` grid of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentField {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(invalid(format!(
                "latent dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} elements"),
                got: format!("{} elements", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("latent element {i} is not finite")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty latent");
        assert!(value.is_finite());
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Builds a field from per-pixel channel vectors given in row-major pixel order.
    pub fn from_pixels(height: usize, width: usize, pixels: &[Vec<f64>]) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels", height * width),
                got: format!("{} pixels", pixels.len()),
            });
        }
        let channels = pixels.first().map_or(0, Vec::len);
        let plane = height * width;
        let mut data = vec![0.0; channels * plane];
        for (p, px) in pixels.iter().enumerate() {
            if px.len() != channels {
                return Err(Error::ShapeMismatch {
                    expected: format!("{channels} channels"),
                    got: format!("{} channels at pixel {p}", px.len()),
                });
            }
            for (c, v) in px.iter().enumerate() {
                data[c * plane + p] = *v;
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Wraps raw data without the finiteness check. Used on hot paths whose
    /// callers check finiteness themselves.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    /// Channel vector at flat pixel index `p = y * W + x`.
    pub fn pixel(&self, p: usize) -> Vec<f64> {
        let plane = self.pixel_count();
        (0..self.channels).map(|c| self.data[c * plane + p]).collect()
    }

    pub(crate) fn pixel_into(&self, p: usize, out: &mut [f64]) {
        let plane = self.pixel_count();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.data[c * plane + p];
        }
    }

    pub(crate) fn set_pixel(&mut self, p: usize, values: &[f64]) {
        let plane = self.pixel_count();
        for (c, v) in values.iter().enumerate() {
            self.data[c * plane + p] = *v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &LatentField) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.dims()),
                got: format!("{:?}", other.dims()),
            });
        }
        Ok(())
    }

    pub fn sub(&self, other: &LatentField) -> Result<LatentField> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &LatentField) -> Result<LatentField> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, k: f64) -> LatentField {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentField {
        Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| f(*v)).collect(),
        )
    }

    pub fn zip_with(&self, other: &LatentField, f: impl Fn(f64, f64) -> f64) -> Result<LatentField> {
        self.ensure_same_shape(other)?;
        Ok(Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        ))
    }

    pub fn max_abs_diff(&self, other: &LatentField) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Read access to an `H × W` scalar grid.
pub trait SpatialMap {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn values(&self) -> &[f64];

    fn at(&self, y: usize, x: usize) -> f64 {
        self.values()[y * self.width() + x]
    }

    fn min_value(&self) -> f64 {
        self.values().iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn max_value(&self) -> f64 {
        self.values().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn mean_value(&self) -> f64 {
        self.values().iter().sum::<f64>() / self.values().len() as f64
    }
}

/// Per-pixel guidance energy (raw, smoothed, or normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl EnergyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("energy map dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} elements", height * width),
                got: format!("{} elements", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("energy map contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

impl SpatialMap for EnergyMap {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Per-pixel guidance scale, bounded to `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl OmegaMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(invalid(format!("omega bounds must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} elements", height * width),
                got: format!("{} elements", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(invalid(format!("omega value {v} outside [{lo}, {hi}]")));
        }
        Ok(Self {
            height,
            width,
            data,
            lo,
            hi,
        })
    }

    pub fn constant(height: usize, width: usize, omega: f64) -> Result<Self> {
        Self::new(height, width, vec![omega; height * width], omega, omega)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }
}

impl SpatialMap for OmegaMap {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
}

/// `out(x) = (1/C) Σ_c f(c, x)²`.
pub fn channel_mean_square(f: &LatentField) -> EnergyMap {
    let plane = f.pixel_count();
    let mut out = vec![0.0; plane];
    for c in 0..f.channels() {
        let chan = &f.data()[c * plane..(c + 1) * plane];
        for (o, v) in out.iter_mut().zip(chan) {
            *o += v * v;
        }
    }
    let inv = 1.0 / f.channels() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    EnergyMap {
        height: f.height(),
        width: f.width(),
        data: out,
    }
}

/// Spatial min/max normalization of a single map:
/// `(e - min) / (max - min + tau)`.
pub fn minmax_normalize(e: &EnergyMap, tau: f64) -> Result<EnergyMap> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    let lo = e.min_value();
    let hi = e.max_value();
    let denom = hi - lo + tau;
    Ok(EnergyMap {
        height: e.height,
        width: e.width,
        data: e.data.iter().map(|v| (v - lo) / denom).collect(),
    })
}

/// Multiplies every channel of `f` by the spatial map `m`.
pub fn broadcast_scale<M: SpatialMap>(f: &LatentField, m: &M) -> Result<LatentField> {
    if f.height() != m.height() || f.width() != m.width() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", f.height(), f.width()),
            got: format!("{}x{}", m.height(), m.width()),
        });
    }
    let plane = f.pixel_count();
    let scale = m.values();
    let data = f
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * scale[i % plane])
        .collect();
    Ok(LatentField::from_raw(f.channels(), f.height(), f.width(), data))
}

/// Maps an out-of-range index back into `0..n` by mirror reflection about
/// the outer edge of the border pixel (`d c b a | a b c d | d c b a`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Uniform `k × k` mean filter with reflect padding. `k = 1` is the identity.
pub fn box_smooth(e: &EnergyMap, k: usize) -> Result<EnergyMap> {
    if k == 0 || k % 2 == 0 {
        return Err(invalid(format!("smoothing kernel must be odd and positive, got {k}")));
    }
    if k == 1 {
        return Ok(e.clone());
    }
    let (h, w) = (e.height, e.width);
    let r = (k / 2) as isize;

    // separable: rows then columns
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dx in -r..=r {
                acc += e.data[y * w + reflect_index(x as isize + dx, w)];
            }
            rows[y * w + x] = acc;
        }
    }
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -r..=r {
                acc += rows[reflect_index(y as isize + dy, h) * w + x];
            }
            out[y * w + x] = acc * norm;
        }
    }
    Ok(EnergyMap {
        height: h,
        width: w,
        data: out,
    })
}
