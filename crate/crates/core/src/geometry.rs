//! Imaging grids, ring-shaped sensor arrays and deterministic dynamic phantoms.
//!
//! Coordinates are physical (meters). Pixel `(row, col)` of an [`ImageGrid`]
//! has its center at `origin + (col, row) * pitch`, so rows run along +y and
//! columns along +x.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Tolerance for sensor positions lying on the ring.
const RING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub n: usize,
    pub pitch: f64,
    pub origin: Point,
}

impl ImageGrid {
    pub fn new(n: usize, pitch: f64, origin: Point) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("grid side n = {n} must be >= 2")));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(Error::InvalidParameter(format!("pitch {pitch} must be positive")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("grid origin must be finite".into()));
        }
        Ok(Self { n, pitch, origin })
    }

    /// An `n x n` grid of side `field_of_view` meters centered on `center`.
    pub fn centered(n: usize, field_of_view: f64, center: Point) -> Result<Self> {
        if !(field_of_view > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "field of view {field_of_view} must be positive"
            )));
        }
        let pitch = field_of_view / n as f64;
        let half = 0.5 * (n as f64 - 1.0) * pitch;
        Self::new(n, pitch, [center[0] - half, center[1] - half])
    }

    pub fn num_pixels(&self) -> usize {
        self.n * self.n
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> Point {
        [
            self.origin[0] + col as f64 * self.pitch,
            self.origin[1] + row as f64 * self.pitch,
        ]
    }

    /// Physical bounds `(x_min, x_max, y_min, y_max)` of the pixel edges.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let half = 0.5 * self.pitch;
        let span = (self.n as f64 - 1.0) * self.pitch;
        (
            self.origin[0] - half,
            self.origin[0] + span + half,
            self.origin[1] - half,
            self.origin[1] + span + half,
        )
    }

    /// Continuous (row, col) pixel coordinates of a physical point.
    pub fn to_pixel(&self, p: Point) -> (f64, f64) {
        (
            (p[1] - self.origin[1]) / self.pitch,
            (p[0] - self.origin[0]) / self.pitch,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub positions: Vec<Point>,
    pub radius: f64,
    pub center: Point,
    pub sound_speed: f64,
    pub sample_rate: f64,
    pub num_samples: usize,
    /// Time of the first recorded sample, seconds.
    pub t_start: f64,
}

impl SensorGeometry {
    pub fn num_sensors(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 sensors, got {}",
                self.positions.len()
            )));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("radius {} must be positive", self.radius)));
        }
        if !(self.sound_speed > 0.0 && self.sound_speed.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sound speed {} must be positive",
                self.sound_speed
            )));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sample rate {} must be positive",
                self.sample_rate
            )));
        }
        if self.num_samples < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 samples per trace, got {}",
                self.num_samples
            )));
        }
        if !self.t_start.is_finite() || self.t_start < 0.0 {
            return Err(Error::InvalidParameter(format!("t_start {} must be >= 0", self.t_start)));
        }
        for (k, p) in self.positions.iter().enumerate() {
            let r = distance(*p, self.center);
            if (r - self.radius).abs() > RING_TOLERANCE {
                return Err(Error::InvalidParameter(format!(
                    "sensor {k} lies {r} m from the center, ring radius is {}",
                    self.radius
                )));
            }
        }
        Ok(())
    }

    /// Fractional sample index at which a wave travelling `dist` meters arrives.
    pub fn sample_index(&self, dist: f64) -> f64 {
        (dist / self.sound_speed - self.t_start) * self.sample_rate
    }

    pub fn sample_time(&self, index: usize) -> f64 {
        self.t_start + index as f64 / self.sample_rate
    }

    /// Checks that every pixel of `grid` lies strictly inside the ring and
    /// that its time of flight to every sensor falls inside the recorded window.
    pub fn check_covers(&self, grid: &ImageGrid) -> Result<()> {
        let (x0, x1, y0, y1) = grid.extent();
        for corner in [[x0, y0], [x0, y1], [x1, y0], [x1, y1]] {
            if distance(corner, self.center) >= self.radius {
                return Err(Error::InvalidParameter(format!(
                    "grid corner ({:.4e}, {:.4e}) is not strictly inside the ring of radius {}",
                    corner[0], corner[1], self.radius
                )));
            }
        }
        let last = (self.num_samples - 1) as f64;
        for row in 0..grid.n {
            for col in 0..grid.n {
                let p = grid.pixel_center(row, col);
                for (s, q) in self.positions.iter().enumerate() {
                    let u = self.sample_index(distance(p, *q));
                    if !(0.0..=last).contains(&u) {
                        return Err(Error::TimeOfFlight(format!(
                            "pixel ({row}, {col}) to sensor {s}: sample index {u:.3} outside [0, {last}]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sensor_angle(&self, k: usize) -> f64 {
        let p = self.positions[k];
        (p[1] - self.center[1]).atan2(p[0] - self.center[0])
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Equally spaced ring array; sensor `k` sits at angle `2 pi k / S` from +x.
/// The recording window starts at `t = 0`; see [`fit_time_window`] to trim it.
pub fn make_ring_array(
    num_sensors: usize,
    radius: f64,
    center: Point,
    sound_speed: f64,
    sample_rate: f64,
    num_samples: usize,
) -> Result<SensorGeometry> {
    if num_sensors < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 sensors, got {num_sensors}"
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!("radius {radius} must be positive")));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::InvalidParameter(format!("sample rate {sample_rate} must be positive")));
    }
    let positions = (0..num_sensors)
        .map(|k| {
            let angle = 2.0 * PI * k as f64 / num_sensors as f64;
            [center[0] + radius * angle.cos(), center[1] + radius * angle.sin()]
        })
        .collect();
    let geom = SensorGeometry {
        positions,
        radius,
        center,
        sound_speed,
        sample_rate,
        num_samples,
        t_start: 0.0,
    };
    geom.validate()?;
    Ok(geom)
}

/// Chooses `t_start` and `num_samples` so the window covers every
/// pixel-to-sensor time of flight of `grid` with `margin` spare samples on
/// each side.
pub fn fit_time_window(geom: &SensorGeometry, grid: &ImageGrid, margin: usize) -> Result<SensorGeometry> {
    let mut d_min = f64::INFINITY;
    let mut d_max = 0.0_f64;
    for row in 0..grid.n {
        for col in 0..grid.n {
            let p = grid.pixel_center(row, col);
            for q in &geom.positions {
                let d = distance(p, *q);
                d_min = d_min.min(d);
                d_max = d_max.max(d);
            }
        }
    }
    let fs = geom.sample_rate;
    let first = ((d_min / geom.sound_speed * fs).floor() - margin as f64).max(0.0);
    let last = (d_max / geom.sound_speed * fs).ceil() + margin as f64;
    let mut out = geom.clone();
    out.t_start = first / fs;
    out.num_samples = (last - first) as usize + 1;
    out.validate()?;
    out.check_covers(grid)?;
    Ok(out)
}

/// Keeps every `S / keep`-th sensor starting from index 0.
pub fn subsample_sensors(geom: &SensorGeometry, keep: usize) -> Result<SensorGeometry> {
    let total = geom.num_sensors();
    if keep < 2 {
        return Err(Error::InvalidParameter(format!("keep = {keep} must be >= 2")));
    }
    if total % keep != 0 {
        return Err(Error::InvalidParameter(format!(
            "keep = {keep} does not divide the sensor count {total}"
        )));
    }
    let stride = total / keep;
    let mut out = geom.clone();
    out.positions = geom.positions.iter().step_by(stride).copied().collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShapeKind {
    Disc { radius: f64 },
    /// Semi-axes along x and y, rotated counter-clockwise by `angle` radians.
    Ellipse { rx: f64, ry: f64, #[serde(default)] angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trajectory {
    Static,
    Linear { velocity: Point },
    /// Rigid circular motion of the shape center about `pivot`.
    Orbit { pivot: Point, angular_rate: f64 },
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory::Static
    }
}

impl Trajectory {
    pub fn position(&self, start: Point, time: f64) -> Point {
        match *self {
            Trajectory::Static => start,
            Trajectory::Linear { velocity } => {
                [start[0] + velocity[0] * time, start[1] + velocity[1] * time]
            }
            Trajectory::Orbit { pivot, angular_rate } => {
                let (s, c) = (angular_rate * time).sin_cos();
                let dx = start[0] - pivot[0];
                let dy = start[1] - pivot[1];
                [pivot[0] + c * dx - s * dy, pivot[1] + s * dx + c * dy]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    #[serde(flatten)]
    pub kind: ShapeKind,
    pub intensity: f64,
    pub center: Point,
    #[serde(default)]
    pub trajectory: Trajectory,
}

impl Shape {
    /// Half-widths of the axis-aligned bounding box.
    fn half_extent(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Disc { radius } => (radius, radius),
            ShapeKind::Ellipse { rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                (
                    ((rx * c).powi(2) + (ry * s).powi(2)).sqrt(),
                    ((rx * s).powi(2) + (ry * c).powi(2)).sqrt(),
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shapes: Vec<Shape>,
    pub num_frames: usize,
    pub frame_interval: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 1 {
            return Err(Error::InvalidParameter("phantom needs at least one frame".into()));
        }
        if !(self.frame_interval > 0.0 && self.frame_interval.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "frame interval {} must be positive",
                self.frame_interval
            )));
        }
        for (i, shape) in self.shapes.iter().enumerate() {
            if !(0.0..=1.0).contains(&shape.intensity) {
                return Err(Error::InvalidParameter(format!(
                    "shape {i}: intensity {} outside [0, 1]",
                    shape.intensity
                )));
            }
            let ok = match shape.kind {
                ShapeKind::Disc { radius } => radius > 0.0,
                ShapeKind::Ellipse { rx, ry, .. } => rx > 0.0 && ry > 0.0,
            };
            if !ok {
                return Err(Error::InvalidParameter(format!("shape {i}: radii must be positive")));
            }
        }
        Ok(())
    }

    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.num_frames).map(|t| t as f64 * self.frame_interval).collect()
    }

    /// Two discs: one drifting diagonally, one orbiting the field center.
    /// `seed` perturbs the orbit phase and drift direction reproducibly.
    pub fn two_disc(field_of_view: f64, num_frames: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let fov = field_of_view;
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        let tilt: f64 = rng.gen_range(-0.25..0.25);
        let frame_interval = 0.01;
        let duration = frame_interval * (num_frames.max(2) - 1) as f64;
        let travel = 0.2 * fov;
        let orbit_r = 0.2 * fov;
        Self {
            shapes: vec![
                Shape {
                    kind: ShapeKind::Disc { radius: 0.12 * fov },
                    intensity: 1.0,
                    center: [-0.22 * fov, -0.1 * fov],
                    trajectory: Trajectory::Linear {
                        velocity: [
                            travel * tilt.cos() / duration,
                            travel * tilt.sin() / duration,
                        ],
                    },
                },
                Shape {
                    kind: ShapeKind::Disc { radius: 0.08 * fov },
                    intensity: 0.6,
                    center: [orbit_r * phase.cos(), orbit_r * phase.sin() + 0.05 * fov],
                    trajectory: Trajectory::Orbit {
                        pivot: [0.0, 0.05 * fov],
                        angular_rate: 0.5 * PI / duration,
                    },
                },
            ],
            num_frames,
            frame_interval,
            seed,
        }
    }

    /// One unit-intensity disc crossing the field on a straight line,
    /// covering `0.4 * fov` in x and `0.2 * fov` in y over the sequence.
    pub fn moving_disc(field_of_view: f64, num_frames: usize) -> Self {
        let fov = field_of_view;
        let frame_interval = 0.01;
        let duration = frame_interval * (num_frames.max(2) - 1) as f64;
        Self {
            shapes: vec![Shape {
                kind: ShapeKind::Disc { radius: 0.12 * fov },
                intensity: 1.0,
                center: [-0.2 * fov, -0.1 * fov],
                trajectory: Trajectory::Linear { velocity: [0.4 * fov / duration, 0.2 * fov / duration] },
            }],
            num_frames,
            frame_interval,
            seed: 0,
        }
    }
}

/// An `n x n x T` stack stored row, column, frame. The memory layout is the
/// Casorati matrix (pixels x frames) in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    pub data: Array3<f64>,
    pub grid: ImageGrid,
    pub frame_times: Vec<f64>,
}

impl ImageSequence {
    pub fn new(data: Array3<f64>, grid: ImageGrid, frame_times: Vec<f64>) -> Result<Self> {
        let (r, c, t) = data.dim();
        if r != grid.n || c != grid.n {
            return Err(Error::DimensionMismatch(format!(
                "image data is {r}x{c}, grid is {n}x{n}",
                n = grid.n
            )));
        }
        if t != frame_times.len() || t == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{t} frames but {} frame times",
                frame_times.len()
            )));
        }
        if frame_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("frame times must be strictly increasing".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("image data contains non-finite values".into()));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self { data, grid, frame_times })
    }

    pub fn zeros(grid: ImageGrid, frame_times: Vec<f64>) -> Result<Self> {
        let n = grid.n;
        Self::new(Array3::zeros((n, n, frame_times.len())), grid, frame_times)
    }

    pub fn num_frames(&self) -> usize {
        self.frame_times.len()
    }

    pub fn frame(&self, t: usize) -> Array2<f64> {
        self.data.index_axis(Axis(2), t).to_owned()
    }

    /// Pixels x frames view, pixel index `row * n + col`.
    pub fn casorati(&self) -> ArrayView2<'_, f64> {
        let n = self.grid.n;
        self.data
            .view()
            .into_shape_with_order((n * n, self.num_frames()))
            .expect("standard layout")
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
        Self::new(data, self.grid.clone(), times)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Renders a phantom on `grid`. Discs use exact pixel-area coverage,
/// ellipses a 4x4 supersampled estimate; overlaps take the maximum.
pub fn render_phantom(spec: &PhantomSpec, grid: &ImageGrid) -> Result<ImageSequence> {
    spec.validate()?;
    let times = spec.frame_times();
    let (gx0, gx1, gy0, gy1) = grid.extent();
    for (i, shape) in spec.shapes.iter().enumerate() {
        let (hx, hy) = shape.half_extent();
        for (t, &time) in times.iter().enumerate() {
            let c = shape.trajectory.position(shape.center, time);
            if c[0] - hx < gx0 || c[0] + hx > gx1 || c[1] - hy < gy0 || c[1] + hy > gy1 {
                return Err(Error::ShapeOutOfGrid(format!(
                    "shape {i} at frame {t} centered ({:.4e}, {:.4e}) exceeds the grid",
                    c[0], c[1]
                )));
            }
        }
    }

    let frames: Vec<Array2<f64>> = times
        .par_iter()
        .map(|&time| render_frame(spec, grid, time))
        .collect();
    let n = grid.n;
    let mut data = Array3::zeros((n, n, times.len()));
    for (t, frame) in frames.iter().enumerate() {
        data.index_axis_mut(Axis(2), t).assign(frame);
    }
    ImageSequence::new(data, grid.clone(), times)
}

fn render_frame(spec: &PhantomSpec, grid: &ImageGrid, time: f64) -> Array2<f64> {
    let n = grid.n;
    let h = grid.pitch;
    let mut frame = Array2::<f64>::zeros((n, n));
    for shape in &spec.shapes {
        let c = shape.trajectory.position(shape.center, time);
        let (hx, hy) = shape.half_extent();
        let (r_lo, c_lo) = grid.to_pixel([c[0] - hx, c[1] - hy]);
        let (r_hi, c_hi) = grid.to_pixel([c[0] + hx, c[1] + hy]);
        let clamp = |v: f64| (v.max(0.0) as usize).min(n - 1);
        let (r0, r1) = (clamp(r_lo.floor()), clamp(r_hi.ceil()));
        let (c0, c1) = (clamp(c_lo.floor()), clamp(c_hi.ceil()));
        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = grid.pixel_center(row, col);
                let (x0, x1) = (p[0] - 0.5 * h - c[0], p[0] + 0.5 * h - c[0]);
                let (y0, y1) = (p[1] - 0.5 * h - c[1], p[1] + 0.5 * h - c[1]);
                let coverage = match shape.kind {
                    ShapeKind::Disc { radius } => disc_rect_area(radius, x0, x1, y0, y1) / (h * h),
                    ShapeKind::Ellipse { rx, ry, angle } => {
                        ellipse_coverage(rx, ry, angle, x0, y0, h)
                    }
                };
                let value = (shape.intensity * coverage).clamp(0.0, 1.0);
                let cell = &mut frame[[row, col]];
                if value > *cell {
                    *cell = value;
                }
            }
        }
    }
    frame
}

/// Area of the disc of radius `r` centered at the origin intersected with
/// the rectangle `[x0, x1] x [y0, y1]`.
pub fn disc_rect_area(r: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let a = corner_area(r, x1, y1) - corner_area(r, x0, y1) - corner_area(r, x1, y0)
        + corner_area(r, x0, y0);
    a.max(0.0)
}

/// Area of the disc intersected with the quadrant `{x <= qx, y <= qy}`.
fn corner_area(r: f64, qx: f64, qy: f64) -> f64 {
    if qx <= -r || qy <= -r {
        return 0.0;
    }
    let xe = qx.min(r);
    // antiderivative of sqrt(r^2 - x^2)
    let prim = |x: f64| {
        let x = x.clamp(-r, r);
        0.5 * (x * (r * r - x * x).max(0.0).sqrt() + r * r * (x / r).asin())
    };
    let full = |a: f64, b: f64| if b > a { 2.0 * (prim(b) - prim(a)) } else { 0.0 };
    if qy >= r {
        return full(-r, xe);
    }
    let xy = (r * r - qy * qy).sqrt();
    let mut area = 0.0;
    // |x| > xy: the chord lies entirely above or below y = qy
    if qy > 0.0 {
        area += full(-r, xe.min(-xy));
        area += full(xy, xe);
    }
    // |x| <= xy: the chord is cut at y = qy
    let (a, b) = (-xy, xe.min(xy));
    if b > a {
        area += qy * (b - a) + prim(b) - prim(a);
    }
    area
}

fn ellipse_coverage(rx: f64, ry: f64, angle: f64, x0: f64, y0: f64, h: f64) -> f64 {
    const SUB: usize = 4;
    let (s, c) = angle.sin_cos();
    let mut inside = 0usize;
    for i in 0..SUB {
        for j in 0..SUB {
            let x = x0 + (j as f64 + 0.5) * h / SUB as f64;
            let y = y0 + (i as f64 + 0.5) * h / SUB as f64;
            let u = c * x + s * y;
            let v = -s * x + c * y;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                inside += 1;
            }
        }
    }
    inside as f64 / (SUB * SUB) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn supersampled_area(r: f64, x0: f64, x1: f64, y0: f64, y1: f64, k: usize) -> f64 {
        let (dx, dy) = ((x1 - x0) / k as f64, (y1 - y0) / k as f64);
        let mut hits = 0usize;
        for i in 0..k {
            for j in 0..k {
                let x = x0 + (j as f64 + 0.5) * dx;
                let y = y0 + (i as f64 + 0.5) * dy;
                if x * x + y * y <= r * r {
                    hits += 1;
                }
            }
        }
        hits as f64 * dx * dy
    }

    #[test]
    fn ring_of_four() {
        let g = make_ring_array(4, 0.03, [0.0, 0.0], 1500.0, 40e6, 1000).unwrap();
        let expected = [[0.03, 0.0], [0.0, 0.03], [-0.03, 0.0], [0.0, -0.03]];
        for (p, e) in g.positions.iter().zip(expected) {
            assert_abs_diff_eq!(p[0], e[0], epsilon = 1e-15);
            assert_abs_diff_eq!(p[1], e[1], epsilon = 1e-15);
        }
    }

    #[test]
    fn ring_of_128_on_circle() {
        let g = make_ring_array(128, 0.03, [0.001, -0.002], 1500.0, 40e6, 1000).unwrap();
        for p in &g.positions {
            assert!((distance(*p, g.center) - 0.03).abs() < 1e-12);
        }
    }

    #[test]
    fn default_rig_covers_twenty_mm_field() {
        let grid = ImageGrid::centered(64, 0.02, [0.0, 0.0]).unwrap();
        let dmax = 0.03 + 0.01 * 2f64.sqrt();
        let f = (dmax / 1500.0 * 40e6).ceil() as usize + 2;
        let g = make_ring_array(128, 0.03, [0.0, 0.0], 1500.0, 40e6, f).unwrap();
        g.check_covers(&grid).unwrap();
        let tight = fit_time_window(&g, &grid, 4).unwrap();
        assert!(tight.num_samples < f);
        tight.check_covers(&grid).unwrap();
    }

    #[test]
    fn ring_rejects_bad_parameters() {
        assert!(make_ring_array(1, 0.03, [0.0, 0.0], 1500.0, 40e6, 100).is_err());
        assert!(make_ring_array(8, 0.0, [0.0, 0.0], 1500.0, 40e6, 100).is_err());
        assert!(make_ring_array(8, 0.03, [0.0, 0.0], 1500.0, -1.0, 100).is_err());
    }

    #[test]
    fn window_too_short_is_rejected() {
        let grid = ImageGrid::centered(16, 0.02, [0.0, 0.0]).unwrap();
        let g = make_ring_array(8, 0.03, [0.0, 0.0], 1500.0, 40e6, 100).unwrap();
        assert!(matches!(g.check_covers(&grid), Err(Error::TimeOfFlight(_))));
    }

    #[test]
    fn subsampling_strides() {
        let g = make_ring_array(128, 0.03, [0.0, 0.0], 1500.0, 40e6, 10).unwrap();
        let half = subsample_sensors(&g, 64).unwrap();
        assert_eq!(half.num_sensors(), 64);
        for (k, p) in half.positions.iter().enumerate() {
            assert_eq!(*p, g.positions[2 * k]);
        }
        assert_eq!(subsample_sensors(&g, 128).unwrap(), g);

        let g8 = make_ring_array(8, 0.03, [0.0, 0.0], 1500.0, 40e6, 10).unwrap();
        let four = subsample_sensors(&g8, 4).unwrap();
        let idx: Vec<_> = [0, 2, 4, 6].iter().map(|&i| g8.positions[i]).collect();
        assert_eq!(four.positions, idx);
        assert!(subsample_sensors(&g8, 3).is_err());
        assert!(subsample_sensors(&g8, 1).is_err());
    }

    #[test]
    fn rotating_positions_shifts_labels() {
        let g = make_ring_array(16, 0.03, [0.0, 0.0], 1500.0, 40e6, 10).unwrap();
        let step = 2.0 * PI / 16.0;
        let (s, c) = step.sin_cos();
        for k in 0..16 {
            let p = g.positions[k];
            let rotated = [c * p[0] - s * p[1], s * p[0] + c * p[1]];
            let next = g.positions[(k + 1) % 16];
            assert!(distance(rotated, next) < 1e-15);
        }
    }

    #[test]
    fn disc_area_matches_supersampling() {
        let r = 1.3;
        let cases = [
            (-0.5, 0.5, -0.5, 0.5),
            (0.9, 1.9, 0.2, 1.2),
            (-1.6, -0.6, 0.7, 1.7),
            (1.2, 2.2, -0.4, 0.6),
            (-3.0, 3.0, -3.0, 3.0),
            (2.0, 3.0, 2.0, 3.0),
        ];
        for (x0, x1, y0, y1) in cases {
            let exact = disc_rect_area(r, x0, x1, y0, y1);
            let approx = supersampled_area(r, x0, x1, y0, y1, 2000);
            let tol = 2e-5 * ((x1 - x0) * (y1 - y0)).max(1.0);
            assert!((exact - approx).abs() < tol, "{x0},{y0}: {exact} vs {approx}");
        }
        assert_abs_diff_eq!(disc_rect_area(r, -3.0, 3.0, -3.0, 3.0), PI * r * r, epsilon = 1e-12);
    }

    fn one_disc(trajectory: Trajectory, frames: usize) -> PhantomSpec {
        PhantomSpec {
            shapes: vec![Shape {
                kind: ShapeKind::Disc { radius: 0.003 },
                intensity: 0.8,
                center: [-0.002, 0.001],
                trajectory,
            }],
            num_frames: frames,
            frame_interval: 0.05,
            seed: 0,
        }
    }

    #[test]
    fn static_disc_frames_identical() {
        let grid = ImageGrid::centered(32, 0.02, [0.0, 0.0]).unwrap();
        let seq = render_phantom(&one_disc(Trajectory::Static, 5), &grid).unwrap();
        let first = seq.frame(0);
        for t in 1..5 {
            assert_eq!(seq.frame(t), first);
        }
    }

    #[test]
    fn linear_motion_moves_centroid_by_velocity() {
        let grid = ImageGrid::centered(48, 0.02, [0.0, 0.0]).unwrap();
        let v = [0.02, -0.01];
        let spec = one_disc(Trajectory::Linear { velocity: v }, 3);
        let seq = render_phantom(&spec, &grid).unwrap();
        let centroid = |t: usize| {
            let f = seq.frame(t);
            let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for ((row, col), &w) in f.indexed_iter() {
                let p = grid.pixel_center(row, col);
                m += w;
                sx += w * p[0];
                sy += w * p[1];
            }
            [sx / m, sy / m]
        };
        let (a, b) = (centroid(0), centroid(1));
        // pixel-center centroids carry a small sub-pixel bias
        let tol = 2e-3 * grid.pitch;
        assert_abs_diff_eq!(b[0] - a[0], v[0] * spec.frame_interval, epsilon = tol);
        assert_abs_diff_eq!(b[1] - a[1], v[1] * spec.frame_interval, epsilon = tol);
    }

    #[test]
    fn two_disc_render_is_deterministic_and_bounded() {
        let grid = ImageGrid::centered(64, 0.02, [0.0, 0.0]).unwrap();
        let spec = PhantomSpec::two_disc(0.02, 8, 7);
        let a = render_phantom(&spec, &grid).unwrap();
        let b = render_phantom(&spec, &grid).unwrap();
        assert_eq!(a.data, b.data);
        let (lo, hi) = a.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert_eq!(a.frame_times, (0..8).map(|t| t as f64 * 0.01).collect::<Vec<_>>());
    }

    #[test]
    fn translating_disc_conserves_mass() {
        let grid = ImageGrid::centered(40, 0.02, [0.0, 0.0]).unwrap();
        let spec = one_disc(Trajectory::Linear { velocity: [0.013, 0.007] }, 6);
        let seq = render_phantom(&spec, &grid).unwrap();
        let m0 = seq.frame(0).sum();
        for t in 1..6 {
            assert!((seq.frame(t).sum() - m0).abs() < 0.01 * m0);
        }
    }

    #[test]
    fn shape_leaving_grid_rejected() {
        let grid = ImageGrid::centered(32, 0.02, [0.0, 0.0]).unwrap();
        let spec = one_disc(Trajectory::Linear { velocity: [0.1, 0.0] }, 5);
        assert!(matches!(render_phantom(&spec, &grid), Err(Error::ShapeOutOfGrid(_))));
    }

    #[test]
    fn ellipse_renders_inside_bounds() {
        let grid = ImageGrid::centered(32, 0.02, [0.0, 0.0]).unwrap();
        let spec = PhantomSpec {
            shapes: vec![Shape {
                kind: ShapeKind::Ellipse { rx: 0.004, ry: 0.002, angle: 0.3 },
                intensity: 1.0,
                center: [0.0, 0.0],
                trajectory: Trajectory::Orbit { pivot: [0.001, 0.0], angular_rate: 3.0 },
            }],
            num_frames: 4,
            frame_interval: 0.1,
            seed: 1,
        };
        let seq = render_phantom(&spec, &grid).unwrap();
        let area = seq.frame(0).sum() * grid.pitch * grid.pitch;
        assert!((area - PI * 0.004 * 0.002).abs() < 0.05 * area);
    }

    #[test]
    fn phantom_spec_json_roundtrip() {
        let spec = PhantomSpec::two_disc(0.02, 8, 3);
        let text = serde_json::to_string_pretty(&spec).unwrap();
        let back: PhantomSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn casorati_view_matches_layout() {
        let grid = ImageGrid::centered(4, 0.01, [0.0, 0.0]).unwrap();
        let data = Array3::from_shape_fn((4, 4, 3), |(r, c, t)| (r * 100 + c * 10 + t) as f64);
        let seq = ImageSequence::new(data, grid, vec![0.0, 1.0, 2.0]).unwrap();
        let cas = seq.casorati();
        assert_eq!(cas.dim(), (16, 3));
        assert_eq!(cas[[2 * 4 + 3, 1]], 231.0);
    }
}
