//! Sparse-view parallel-beam tomography: discrete Radon transform (Joseph's
//! driving-axis interpolation), its exact matrix transpose, and filtered
//! backprojection with a band-limited Ram-Lak ramp filter.

use std::f64::consts::PI;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::grid::{Grid, Image, Sinogram, DEFAULT_DETECTOR_EXTENT};

#[derive(Debug, Error)]
pub enum TomoError {
    #[error("geometry expects image side {expected}, got {got}")]
    ImageSizeMismatch { expected: usize, got: usize },
    #[error("geometry expects sinogram {expected:?}, got {got:?}")]
    SinogramSizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

/// Parallel-beam acquisition geometry. Angles are equidistant on the
/// half-open interval [0, pi) so that angle k = k*pi/n_angles; detector bins
/// are equidistant signed distances covering `detector_extent` endpoint to
/// endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    n_angles: usize,
    n_detectors: usize,
    image_side: usize,
    detector_extent: (f64, f64),
}

impl Geometry {
    pub fn new(
        n_angles: usize,
        n_detectors: usize,
        image_side: usize,
    ) -> Result<Self, TomoError> {
        if n_angles < 1 {
            return Err(TomoError::InvalidGeometry("n_angles must be >= 1".into()));
        }
        if n_detectors < 2 {
            return Err(TomoError::InvalidGeometry(
                "n_detectors must be >= 2".into(),
            ));
        }
        if image_side < 8 {
            return Err(TomoError::InvalidGeometry("image side must be >= 8".into()));
        }
        Ok(Geometry {
            n_angles,
            n_detectors,
            image_side,
            detector_extent: DEFAULT_DETECTOR_EXTENT,
        })
    }

    /// 60 angles and ceil(1.5*n) detectors, matching pixel sampling density
    /// over the default detector range.
    pub fn sparse_view(image_side: usize) -> Self {
        Self::new(60, default_detectors(image_side), image_side).unwrap()
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }
    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }
    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn angle(&self, k: usize) -> f64 {
        k as f64 * PI / self.n_angles as f64
    }

    pub fn detector_spacing(&self) -> f64 {
        let (lo, hi) = self.detector_extent;
        (hi - lo) / (self.n_detectors - 1) as f64
    }

    pub fn detector_position(&self, j: usize) -> f64 {
        self.detector_extent.0 + j as f64 * self.detector_spacing()
    }

    fn check_image(&self, u: &Image) -> Result<(), TomoError> {
        if u.side() != self.image_side {
            return Err(TomoError::ImageSizeMismatch {
                expected: self.image_side,
                got: u.side(),
            });
        }
        Ok(())
    }

    fn check_sinogram(&self, y: &Sinogram) -> Result<(), TomoError> {
        if y.shape() != (self.n_angles, self.n_detectors) {
            return Err(TomoError::SinogramSizeMismatch {
                expected: (self.n_angles, self.n_detectors),
                got: y.shape(),
            });
        }
        Ok(())
    }
}

pub fn default_detectors(image_side: usize) -> usize {
    (image_side as f64 * 1.5).ceil() as usize
}

/// Enumerate the (pixel, weight) footprint of the ray L(s, phi) through the
/// pixel grid. Joseph's method: step along the dominant axis, interpolate
/// linearly in the transverse axis, weight by the step length along the line.
#[inline]
fn for_each_ray_weight(n: usize, angle: f64, s: f64, mut visit: impl FnMut(usize, f64)) {
    let h = 2.0 / n as f64;
    let (sin_a, cos_a) = angle.sin_cos();
    if sin_a.abs() >= cos_a.abs() {
        // drive along x (columns); y = (s - x cos) / sin
        let step = h / sin_a.abs();
        for j in 0..n {
            let x = -1.0 + (j as f64 + 0.5) * h;
            let y = (s - x * cos_a) / sin_a;
            let r = (y + 1.0) / h - 0.5;
            let r0 = r.floor();
            let frac = r - r0;
            let r0 = r0 as isize;
            if r0 >= 0 && (r0 as usize) < n {
                visit(r0 as usize * n + j, (1.0 - frac) * step);
            }
            let r1 = r0 + 1;
            if r1 >= 0 && (r1 as usize) < n && frac > 0.0 {
                visit(r1 as usize * n + j, frac * step);
            }
        }
    } else {
        // drive along y (rows); x = (s - y sin) / cos
        let step = h / cos_a.abs();
        for i in 0..n {
            let y = -1.0 + (i as f64 + 0.5) * h;
            let x = (s - y * sin_a) / cos_a;
            let c = (x + 1.0) / h - 0.5;
            let c0 = c.floor();
            let frac = c - c0;
            let c0 = c0 as isize;
            if c0 >= 0 && (c0 as usize) < n {
                visit(i * n + c0 as usize, (1.0 - frac) * step);
            }
            let c1 = c0 + 1;
            if c1 >= 0 && (c1 as usize) < n && frac > 0.0 {
                visit(i * n + c1 as usize, frac * step);
            }
        }
    }
}

fn forward_angle(u: &[f64], g: &Geometry, k: usize, out_row: &mut [f64]) {
    let angle = g.angle(k);
    for (j, bin) in out_row.iter_mut().enumerate() {
        let s = g.detector_position(j);
        let mut acc = 0.0;
        for_each_ray_weight(g.image_side, angle, s, |idx, w| acc += u[idx] * w);
        *bin = acc;
    }
}

fn adjoint_angle(row: &[f64], g: &Geometry, k: usize, out: &mut [f64]) {
    let angle = g.angle(k);
    for (j, &v) in row.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let s = g.detector_position(j);
        for_each_ray_weight(g.image_side, angle, s, |idx, w| out[idx] += v * w);
    }
}

/// Discrete Radon transform of `u`: one line integral per (angle, detector).
pub fn radon_forward(u: &Image, g: &Geometry) -> Result<Sinogram, TomoError> {
    g.check_image(u)?;
    let mut sino = Sinogram::zeros(g.n_angles, g.n_detectors);
    let nd = g.n_detectors;
    let rows = sino.values_mut().chunks_mut(nd);
    #[cfg(feature = "parallel")]
    {
        let rows: Vec<&mut [f64]> = rows.collect();
        rows.into_par_iter()
            .enumerate()
            .for_each(|(k, row)| forward_angle(u.values(), g, k, row));
    }
    #[cfg(not(feature = "parallel"))]
    for (k, row) in rows.enumerate() {
        forward_angle(u.values(), g, k, row);
    }
    Ok(sino)
}

/// Single-threaded Radon transform, kept public for benchmarking against the
/// data-parallel path.
pub fn radon_forward_seq(u: &Image, g: &Geometry) -> Result<Sinogram, TomoError> {
    g.check_image(u)?;
    let mut sino = Sinogram::zeros(g.n_angles, g.n_detectors);
    for k in 0..g.n_angles {
        forward_angle(u.values(), g, k, sino.row_mut(k));
    }
    Ok(sino)
}

/// Exact transpose of [`radon_forward`]: accumulates the same interpolation
/// weights, so the inner-product identity <Ku, y> = <u, K^T y> holds to
/// machine precision.
pub fn radon_adjoint(y: &Sinogram, g: &Geometry) -> Result<Image, TomoError> {
    g.check_sinogram(y)?;
    let n = g.image_side;
    // per-angle partial images, reduced in fixed angle order so the result
    // is independent of the degree of parallelism
    let partial = |k: usize| {
        let mut buf = vec![0.0; n * n];
        adjoint_angle(y.row(k), g, k, &mut buf);
        buf
    };
    #[cfg(feature = "parallel")]
    let partials: Vec<Vec<f64>> = (0..g.n_angles).into_par_iter().map(partial).collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<Vec<f64>> = (0..g.n_angles).map(partial).collect();
    let mut out = vec![0.0; n * n];
    for p in &partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    Image::from_values(n, out).map_err(|e| TomoError::InvalidGeometry(e.to_string()))
}

pub fn radon_adjoint_seq(y: &Sinogram, g: &Geometry) -> Result<Image, TomoError> {
    g.check_sinogram(y)?;
    let n = g.image_side;
    let mut out = vec![0.0; n * n];
    // per-angle partial followed by a fixed-order reduction, matching the
    // parallel path bit for bit
    let mut partial = vec![0.0; n * n];
    for k in 0..g.n_angles {
        partial.fill(0.0);
        adjoint_angle(y.row(k), g, k, &mut partial);
        for (o, v) in out.iter_mut().zip(&partial) {
            *o += v;
        }
    }
    Image::from_values(n, out).map_err(|e| TomoError::InvalidGeometry(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbpFilter {
    /// Band-limited ramp (exact spatial-domain kernel of the ideal ramp).
    RamLak,
    /// Ram-Lak apodized by a Hann window, for noisy data.
    Hann,
}

impl std::str::FromStr for FbpFilter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ram-lak" => Ok(FbpFilter::RamLak),
            "hann" => Ok(FbpFilter::Hann),
            other => Err(format!("unknown filter `{other}` (ram-lak|hann)")),
        }
    }
}

/// Frequency response of the discrete ramp filter on a circular buffer of
/// length `m`. Built by transforming the exact spatial-domain Ram-Lak kernel
/// h[0] = 1/(4 ds^2), h[k] = -1/(pi^2 k^2 ds^2) for odd k, 0 for even k,
/// which avoids the DC bias of sampling |w| directly.
fn ramp_response(m: usize, ds: f64, filter: FbpFilter, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); m];
    kernel[0].re = 1.0 / (4.0 * ds * ds);
    let mut k = 1usize;
    while k <= m / 2 {
        let v = -1.0 / (PI * PI * (k * k) as f64 * ds * ds);
        kernel[k].re = v;
        kernel[m - k].re = v;
        k += 2;
    }
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut kernel);
    let mut response: Vec<f64> = kernel.iter().map(|c| c.re).collect();
    if filter == FbpFilter::Hann {
        for (i, r) in response.iter_mut().enumerate() {
            // frequency index folded to [0, m/2]
            let f = i.min(m - i) as f64 / (m / 2) as f64;
            *r *= 0.5 * (1.0 + (PI * f).cos());
        }
    }
    response
}

fn filtered_rows(y: &Sinogram, g: &Geometry, filter: FbpFilter) -> Vec<Vec<f64>> {
    let nd = g.n_detectors;
    let m = (2 * nd).next_power_of_two();
    let ds = g.detector_spacing();
    let mut planner = FftPlanner::new();
    let response = ramp_response(m, ds, filter, &mut planner);
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let filter_row = |row: &[f64]| -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); m];
        for (b, &v) in buf.iter_mut().zip(row) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, &r) in buf.iter_mut().zip(&response) {
            *b *= r;
        }
        inv.process(&mut buf);
        // convolution theorem with rustfft's unnormalized inverse; the ds
        // factor is the quadrature weight of the discrete convolution
        buf[..nd].iter().map(|c| c.re * ds / m as f64).collect()
    };
    let fwd_ref = &filter_row;
    #[cfg(feature = "parallel")]
    {
        let rows: Vec<&[f64]> = (0..g.n_angles).map(|k| y.row(k)).collect();
        rows.par_iter().map(|r| fwd_ref(r)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    (0..g.n_angles).map(|k| fwd_ref(y.row(k))).collect()
}

fn backproject(filtered: &[Vec<f64>], g: &Geometry) -> Image {
    let n = g.image_side;
    let h = 2.0 / n as f64;
    let ds = g.detector_spacing();
    let s0 = g.detector_position(0);
    let weight = PI / g.n_angles as f64;
    let trig: Vec<(f64, f64)> = (0..g.n_angles).map(|k| g.angle(k).sin_cos()).collect();
    let fill_row = |i: usize, out_row: &mut [f64]| {
        let yc = -1.0 + (i as f64 + 0.5) * h;
        for (j, o) in out_row.iter_mut().enumerate() {
            let xc = -1.0 + (j as f64 + 0.5) * h;
            let mut acc = 0.0;
            for (k, &(sin_a, cos_a)) in trig.iter().enumerate() {
                let s = xc * cos_a + yc * sin_a;
                let t = (s - s0) / ds;
                let t0 = t.floor();
                let frac = t - t0;
                let t0 = t0 as isize;
                let q = &filtered[k];
                let nd = q.len() as isize;
                let a = if t0 >= 0 && t0 < nd { q[t0 as usize] } else { 0.0 };
                let b = if t0 + 1 >= 0 && t0 + 1 < nd {
                    q[(t0 + 1) as usize]
                } else {
                    0.0
                };
                acc += (1.0 - frac) * a + frac * b;
            }
            *o = acc * weight;
        }
    };
    let mut out = Image::zeros(n);
    #[cfg(feature = "parallel")]
    {
        let rows: Vec<&mut [f64]> = out.values_mut().chunks_mut(n).collect();
        rows.into_par_iter()
            .enumerate()
            .for_each(|(i, row)| fill_row(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    for (i, row) in out.values_mut().chunks_mut(n).enumerate() {
        fill_row(i, row);
    }
    out
}

/// Filtered backprojection: ramp-filter each projection in the frequency
/// domain (zero-padded to the next power of two >= 2*n_detectors), then
/// backproject with bilinear interpolation and angular weight pi/n_angles.
/// Approximates the Moore-Penrose inverse of the Radon transform.
pub fn fbp(y: &Sinogram, g: &Geometry, filter: FbpFilter) -> Result<Image, TomoError> {
    g.check_sinogram(y)?;
    let filtered = filtered_rows(y, g, filter);
    Ok(backproject(&filtered, g))
}

pub fn fbp_seq(y: &Sinogram, g: &Geometry, filter: FbpFilter) -> Result<Image, TomoError> {
    g.check_sinogram(y)?;
    let nd = g.n_detectors;
    let m = (2 * nd).next_power_of_two();
    let mut planner = FftPlanner::new();
    let response = ramp_response(m, g.detector_spacing(), filter, &mut planner);
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut filtered = Vec::with_capacity(g.n_angles);
    for k in 0..g.n_angles {
        let mut buf = vec![Complex::new(0.0, 0.0); m];
        for (b, &v) in buf.iter_mut().zip(y.row(k)) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, &r) in buf.iter_mut().zip(&response) {
            *b *= r;
        }
        inv.process(&mut buf);
        filtered.push(
            buf[..nd]
                .iter()
                .map(|c| c.re * g.detector_spacing() / m as f64)
                .collect::<Vec<f64>>(),
        );
    }
    let n = g.image_side;
    let mut out = Image::zeros(n);
    for i in 0..n {
        let mut row = vec![0.0; n];
        backproject_row_seq(&filtered, g, i, &mut row);
        out.values_mut()[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    Ok(out)
}

fn backproject_row_seq(filtered: &[Vec<f64>], g: &Geometry, i: usize, out_row: &mut [f64]) {
    let n = g.image_side;
    let h = 2.0 / n as f64;
    let ds = g.detector_spacing();
    let s0 = g.detector_position(0);
    let weight = PI / g.n_angles as f64;
    let yc = -1.0 + (i as f64 + 0.5) * h;
    for (j, o) in out_row.iter_mut().enumerate() {
        let xc = -1.0 + (j as f64 + 0.5) * h;
        let mut acc = 0.0;
        for (k, q) in filtered.iter().enumerate() {
            let (sin_a, cos_a) = g.angle(k).sin_cos();
            let s = xc * cos_a + yc * sin_a;
            let t = (s - s0) / ds;
            let t0 = t.floor();
            let frac = t - t0;
            let t0 = t0 as isize;
            let nd = q.len() as isize;
            let a = if t0 >= 0 && t0 < nd { q[t0 as usize] } else { 0.0 };
            let b = if t0 + 1 >= 0 && t0 + 1 < nd {
                q[(t0 + 1) as usize]
            } else {
                0.0
            };
            acc += (1.0 - frac) * a + frac * b;
        }
        *o = acc * weight;
    }
}
