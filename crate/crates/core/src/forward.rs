//! Discrete 2D photoacoustic forward model.
//!
//! Every pixel is treated as a point source. Its intensity, divided by the
//! pixel-to-sensor distance, is deposited into the two time bins bracketing
//! the time of flight with linear-interpolation weights (a discrete circular
//! mean). A central-difference time derivative follows. Both stages are
//! sparse and linear, and the adjoint applies their transposes in reverse
//! order.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{distance, subsample_sensors, ImageGrid, ImageSequence, SensorGeometry};

/// Pressure traces stored as sensor x sample x frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub data: Array3<f64>,
    pub geometry: SensorGeometry,
    pub frame_times: Vec<f64>,
}

impl Sinogram {
    pub fn new(data: Array3<f64>, geometry: SensorGeometry, frame_times: Vec<f64>) -> Result<Self> {
        let (s, f, t) = data.dim();
        if s != geometry.num_sensors() || f != geometry.num_samples {
            return Err(Error::DimensionMismatch(format!(
                "sinogram is {s}x{f}, geometry has {} sensors x {} samples",
                geometry.num_sensors(),
                geometry.num_samples
            )));
        }
        if t != frame_times.len() || t == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{t} frames but {} frame times",
                frame_times.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("sinogram contains non-finite values".into()));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self { data, geometry, frame_times })
    }

    pub fn num_frames(&self) -> usize {
        self.frame_times.len()
    }

    /// Trace of sensor `s` in frame `t`.
    pub fn trace(&self, s: usize, t: usize) -> Vec<f64> {
        self.data.slice(s![s, .., t]).to_vec()
    }

    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.num_frames()) {
            return Err(Error::DimensionMismatch(format!(
                "frame {bad} out of range for {} frames",
                self.num_frames()
            )));
        }
        let data = self.data.select(Axis(2), indices);
        let times = indices.iter().map(|&i| self.frame_times[i]).collect();
        Self::new(data, self.geometry.clone(), times)
    }

    /// Keeps every `S / keep`-th sensor trace, matching [`subsample_sensors`].
    pub fn subsample(&self, keep: usize) -> Result<Self> {
        let geometry = subsample_sensors(&self.geometry, keep)?;
        let stride = self.geometry.num_sensors() / keep;
        let idx: Vec<usize> = (0..keep).map(|k| k * stride).collect();
        Self::new(self.data.select(Axis(0), &idx), geometry, self.frame_times.clone())
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    bin: u32,
    /// weight of `bin`
    w0: f64,
    /// weight of `bin + 1`; zero when the arrival falls on a bin center
    w1: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOperator {
    grid: ImageGrid,
    geometry: SensorGeometry,
    with_derivative: bool,
    /// sensor-major: `taps[s * n_pixels + j]`
    taps: Vec<Tap>,
}

impl ForwardOperator {
    pub fn new(grid: &ImageGrid, geometry: &SensorGeometry) -> Result<Self> {
        Self::with_options(grid, geometry, true)
    }

    /// `with_derivative = false` leaves out the temporal derivative and
    /// models the circular mean alone.
    pub fn with_options(grid: &ImageGrid, geometry: &SensorGeometry, with_derivative: bool) -> Result<Self> {
        geometry.validate()?;
        geometry.check_covers(grid)?;
        let n_pix = grid.num_pixels();
        let last = geometry.num_samples - 1;
        let mut taps = Vec::with_capacity(n_pix * geometry.num_sensors());
        for (s, q) in geometry.positions.iter().enumerate() {
            for j in 0..n_pix {
                let p = grid.pixel_center(j / grid.n, j % grid.n);
                let d = distance(p, *q);
                let u = geometry.sample_index(d);
                let bin = u.floor();
                let frac = u - bin;
                let bin = bin as usize;
                if u < 0.0 || bin > last || (bin == last && frac > 0.0) {
                    return Err(Error::TimeOfFlight(format!(
                        "pixel {j} to sensor {s}: sample index {u:.3} outside [0, {last}]"
                    )));
                }
                taps.push(Tap { bin: bin as u32, w0: (1.0 - frac) / d, w1: frac / d });
            }
        }
        Ok(Self {
            grid: grid.clone(),
            geometry: geometry.clone(),
            with_derivative,
            taps,
        })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.geometry
    }

    pub fn with_derivative(&self) -> bool {
        self.with_derivative
    }

    /// Interpolation weights `(bin, w_bin, w_bin_plus_one)` of pixel `j`
    /// seen from sensor `s`.
    pub fn weights(&self, j: usize, s: usize) -> (usize, f64, f64) {
        let tap = self.taps[s * self.grid.num_pixels() + j];
        (tap.bin as usize, tap.w0, tap.w1)
    }

    pub fn apply(&self, frames: &ImageSequence) -> Result<Sinogram> {
        if frames.grid != self.grid {
            return Err(Error::DimensionMismatch("image grid differs from the operator grid".into()));
        }
        let data = self.forward_casorati(frames.casorati())?;
        Sinogram::new(data, self.geometry.clone(), frames.frame_times.clone())
    }

    pub fn adjoint(&self, sino: &Sinogram) -> Result<ImageSequence> {
        if sino.geometry != self.geometry {
            return Err(Error::DimensionMismatch("sinogram geometry differs from the operator".into()));
        }
        let img = self.adjoint_casorati(sino.data.view())?;
        let n = self.grid.n;
        let t = sino.num_frames();
        let data = img.into_shape_with_order((n, n, t)).expect("contiguous");
        ImageSequence::new(data, self.grid.clone(), sino.frame_times.clone())
    }

    /// Forward model on a pixels x frames matrix; returns sensor x sample x frame.
    pub fn forward_casorati(&self, x: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
        let n_pix = self.grid.num_pixels();
        let (rows, frames) = x.dim();
        if rows != n_pix {
            return Err(Error::DimensionMismatch(format!(
                "casorati has {rows} rows, grid has {n_pix} pixels"
            )));
        }
        let (n_s, n_f) = (self.geometry.num_sensors(), self.geometry.num_samples);
        let mut out = Array3::<f64>::zeros((n_s, n_f, frames));
        let fs = self.geometry.sample_rate;
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(s, mut slab)| {
                let taps = &self.taps[s * n_pix..(s + 1) * n_pix];
                let mut raw = Array2::<f64>::zeros((n_f, frames));
                for (j, tap) in taps.iter().enumerate() {
                    let xj = x.row(j);
                    let b = tap.bin as usize;
                    raw.row_mut(b).scaled_add(tap.w0, &xj);
                    if tap.w1 != 0.0 {
                        raw.row_mut(b + 1).scaled_add(tap.w1, &xj);
                    }
                }
                if self.with_derivative {
                    differentiate(raw.view(), slab.view_mut(), fs);
                } else {
                    slab.assign(&raw);
                }
            });
        Ok(out)
    }

    /// Exact transpose of [`Self::forward_casorati`].
    pub fn adjoint_casorati(&self, y: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        let (n_s, n_f, frames) = y.dim();
        if n_s != self.geometry.num_sensors() || n_f != self.geometry.num_samples {
            return Err(Error::DimensionMismatch(format!(
                "sinogram is {n_s}x{n_f}, operator expects {}x{}",
                self.geometry.num_sensors(),
                self.geometry.num_samples
            )));
        }
        let fs = self.geometry.sample_rate;
        let filtered: Vec<Array2<f64>> = y
            .axis_iter(Axis(0))
            .into_par_iter()
            .map(|slab| {
                if self.with_derivative {
                    let mut r = Array2::zeros((n_f, frames));
                    differentiate_transpose(slab, r.view_mut(), fs);
                    r
                } else {
                    slab.to_owned()
                }
            })
            .collect();

        let n_pix = self.grid.num_pixels();
        let mut out = Array2::<f64>::zeros((n_pix, frames));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(j, mut row)| {
                for (s, r) in filtered.iter().enumerate() {
                    let tap = self.taps[s * n_pix + j];
                    let b = tap.bin as usize;
                    row.scaled_add(tap.w0, &r.row(b));
                    if tap.w1 != 0.0 {
                        row.scaled_add(tap.w1, &r.row(b + 1));
                    }
                }
            });
        Ok(out)
    }
}

/// Nonzero entries `(column, coefficient)` of row `i` of the derivative
/// matrix: central differences inside, one-sided at both ends.
fn derivative_row(i: usize, len: usize, fs: f64) -> [(usize, f64); 2] {
    if i == 0 {
        [(0, -fs), (1, fs)]
    } else if i == len - 1 {
        [(len - 2, -fs), (len - 1, fs)]
    } else {
        [(i - 1, -0.5 * fs), (i + 1, 0.5 * fs)]
    }
}

/// `out[i, :] = sum_k D[i, k] * q[k, :]` along the sample axis.
pub(crate) fn differentiate(q: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>, fs: f64) {
    let len = q.nrows();
    for i in 0..len {
        let [(a, ca), (b, cb)] = derivative_row(i, len, fs);
        Zip::from(out.row_mut(i))
            .and(q.row(a))
            .and(q.row(b))
            .for_each(|o, &qa, &qb| *o = ca * qa + cb * qb);
    }
}

/// `out = D^T p` along the sample axis.
fn differentiate_transpose(p: ArrayView2<'_, f64>, mut out: ArrayViewMut2<'_, f64>, fs: f64) {
    let len = p.nrows();
    out.fill(0.0);
    for i in 0..len {
        for (k, c) in derivative_row(i, len, fs) {
            out.row_mut(k).scaled_add(c, &p.row(i));
        }
    }
}

/// Central-difference derivative of a single trace (same stencil as the
/// forward model).
pub fn trace_derivative(trace: &[f64], fs: f64) -> Vec<f64> {
    let len = trace.len();
    (0..len)
        .map(|i| {
            let [(a, ca), (b, cb)] = derivative_row(i, len, fs);
            ca * trace[a] + cb * trace[b]
        })
        .collect()
}

/// Adds white Gaussian noise at the requested SNR (dB, relative to the mean
/// signal power). `f64::INFINITY` returns the input unchanged.
pub fn add_noise(sino: &Sinogram, snr_db: f64, seed: u64) -> Result<Sinogram> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidParameter(format!("snr_db {snr_db} is not usable")));
    }
    if snr_db == f64::INFINITY {
        return Ok(sino.clone());
    }
    let power = sino.energy() / sino.data.len() as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(0.0))
        .map_err(|e| Error::InvalidParameter(format!("noise distribution: {e}")))?;
    let mut out = sino.clone();
    for v in out.data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}
