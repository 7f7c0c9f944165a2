//! Frame-by-frame back-projection baselines: delay-and-sum (DAS) and
//! universal back-projection (UBP).

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{differentiate, Sinogram};
use crate::geometry::{distance, ImageGrid, ImageSequence, SensorGeometry};

/// Which signal DAS delays and sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DasSignal {
    /// Running time integral of the recorded pressure. A compact absorber
    /// produces a unipolar pulse here, so DAS peaks on the absorber.
    #[default]
    Integrated,
    /// The recorded pressure traces as they are.
    Pressure,
}

/// Back-projected sequence clamped at zero, with the signed range seen
/// before clamping.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: ImageSequence,
    /// Unclamped back-projection; linear in the sinogram.
    pub signed: ImageSequence,
    pub raw_min: f64,
    pub raw_max: f64,
}

pub fn reconstruct_das(sino: &Sinogram, grid: &ImageGrid) -> Result<Reconstruction> {
    reconstruct_das_with(sino, grid, DasSignal::default())
}

pub fn reconstruct_das_with(sino: &Sinogram, grid: &ImageGrid, signal: DasSignal) -> Result<Reconstruction> {
    let geom = &sino.geometry;
    let fs = geom.sample_rate;
    let traces: Vec<Array2<f64>> = sino
        .data
        .axis_iter(Axis(0))
        .map(|slab| match signal {
            DasSignal::Pressure => slab.to_owned(),
            DasSignal::Integrated => cumulative_trapezoid(slab, fs),
        })
        .collect();
    let weights = vec![1.0 / geom.num_sensors() as f64; geom.num_sensors()];
    backproject(&traces, &weights, sino, grid)
}

/// UBP with the filtered quantity `b(t) = 2 p(t) - 2 t dp/dt` and
/// angular-coverage weights (equal to `1/S` on a uniform ring).
pub fn reconstruct_ubp(sino: &Sinogram, grid: &ImageGrid) -> Result<Reconstruction> {
    let geom = &sino.geometry;
    let fs = geom.sample_rate;
    let (_, n_f, frames) = sino.data.dim();
    let traces: Vec<Array2<f64>> = sino
        .data
        .axis_iter(Axis(0))
        .map(|slab| {
            let mut dp = Array2::zeros((n_f, frames));
            differentiate(slab, dp.view_mut(), fs);
            let mut b = Array2::zeros((n_f, frames));
            for i in 0..n_f {
                let t = geom.sample_time(i);
                let mut row = b.row_mut(i);
                row.scaled_add(2.0, &slab.row(i));
                row.scaled_add(-2.0 * t, &dp.row(i));
            }
            b
        })
        .collect();
    backproject(&traces, &angular_weights(geom), sino, grid)
}

/// Fraction of the full angle covered by each sensor (half the gap to each
/// angular neighbour).
pub fn angular_weights(geom: &SensorGeometry) -> Vec<f64> {
    let s = geom.num_sensors();
    let mut order: Vec<(usize, f64)> = (0..s)
        .map(|k| (k, geom.sensor_angle(k).rem_euclid(2.0 * PI)))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut w = vec![0.0; s];
    for i in 0..s {
        let prev = order[(i + s - 1) % s].1;
        let next = order[(i + 1) % s].1;
        let here = order[i].1;
        let gap_prev = (here - prev).rem_euclid(2.0 * PI);
        let gap_next = (next - here).rem_euclid(2.0 * PI);
        w[order[i].0] = 0.5 * (gap_prev + gap_next) / (2.0 * PI);
    }
    w
}

fn cumulative_trapezoid(p: ArrayView2<'_, f64>, fs: f64) -> Array2<f64> {
    let mut q = Array2::zeros(p.raw_dim());
    let half_dt = 0.5 / fs;
    for i in 1..p.nrows() {
        let (done, mut rest) = q.view_mut().split_at(Axis(0), i);
        let mut row = rest.row_mut(0);
        row.assign(&done.row(i - 1));
        row.scaled_add(half_dt, &p.row(i - 1));
        row.scaled_add(half_dt, &p.row(i));
    }
    q
}

fn backproject(
    traces: &[Array2<f64>],
    weights: &[f64],
    sino: &Sinogram,
    grid: &ImageGrid,
) -> Result<Reconstruction> {
    let geom = &sino.geometry;
    geom.check_covers(grid)?;
    let frames = sino.num_frames();
    let n = grid.n;
    let last = geom.num_samples - 1;
    let mut out = Array2::<f64>::zeros((n * n, frames));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .try_for_each(|(j, mut row)| {
            let p = grid.pixel_center(j / n, j % n);
            for (s, q) in geom.positions.iter().enumerate() {
                let u = geom.sample_index(distance(p, *q));
                let b = u.floor();
                let frac = u - b;
                let b = b as usize;
                if u < 0.0 || b > last {
                    return Err(Error::TimeOfFlight(format!("pixel {j}, sensor {s}: index {u:.3}")));
                }
                let tr = &traces[s];
                row.scaled_add(weights[s] * (1.0 - frac), &tr.row(b));
                if frac > 0.0 {
                    row.scaled_add(weights[s] * frac, &tr.row(b + 1));
                }
            }
            Ok(())
        })?;
    let raw_min = out.iter().copied().fold(f64::INFINITY, f64::min);
    let raw_max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data: Array3<f64> = out.into_shape_with_order((n, n, frames)).expect("contiguous");
    let signed = ImageSequence::new(data, grid.clone(), sino.frame_times.clone())?;
    let mut image = signed.clone();
    image.data.mapv_inplace(|v| v.max(0.0));
    Ok(Reconstruction { image, signed, raw_min, raw_max })
}

/// Full width at half maximum of a 1D profile around `peak`, using linear
/// interpolation between samples. Returns `None` when the profile never
/// drops to half maximum on one side.
pub fn fwhm(profile: ArrayView2<'_, f64>, row: usize, peak: usize) -> Option<f64> {
    let line = profile.row(row);
    let half = 0.5 * line[peak];
    let mut left = None;
    for i in (0..peak).rev() {
        if line[i] <= half {
            let t = (line[i + 1] - half) / (line[i + 1] - line[i]);
            left = Some(i as f64 + 1.0 - t);
            break;
        }
    }
    let mut right = None;
    for i in peak + 1..line.len() {
        if line[i] <= half {
            let t = (line[i - 1] - half) / (line[i - 1] - line[i]);
            right = Some(i as f64 - 1.0 + t);
            break;
        }
    }
    Some(right? - left?)
}
