use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynpact::baselines::{reconstruct_das, reconstruct_ubp};
use dynpact::forward::{ForwardOperator, Sinogram};
use dynpact::geometry::{
    fit_time_window, make_ring_array, render_phantom, ImageGrid, ImageSequence, PhantomSpec, SensorGeometry, Shape,
    ShapeKind, Trajectory,
};
use dynpact::inr::{CoordinateBatch, FourierEncoder, InrModel};
use dynpact::io::{read_images, read_sinogram, write_images, write_sinogram};
use dynpact::metrics::{normalize, psnr, ssim};
use dynpact::regularizers::{dc_loss, nuclear_norm, temporal_tv};
use dynpact::trainer::{lr_at, AdamState, TrainConfig};

fn grid(n: usize) -> ImageGrid {
    ImageGrid::centered(n, 0.02, [0.0, 0.0]).unwrap()
}

fn ring(grid: &ImageGrid, sensors: usize) -> SensorGeometry {
    let r = make_ring_array(sensors, 0.03, [0.0, 0.0], 1500.0, 20e6, 2).unwrap();
    fit_time_window(&r, grid, 4).unwrap()
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(0.0..1.0))
}

fn random_sequence(n: usize, t: usize, seed: u64) -> ImageSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array3::from_shape_fn((n, n, t), |_| rng.gen_range(0.0..1.0));
    ImageSequence::new(data, grid(n), (0..t).map(|k| k as f64 * 0.01).collect()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ring_rotation_shifts_labels(sensors in 2usize..80, radius in 0.01f64..0.1) {
        let g = make_ring_array(sensors, radius, [0.001, -0.002], 1500.0, 40e6, 16).unwrap();
        let (s, c) = (2.0 * PI / sensors as f64).sin_cos();
        for k in 0..sensors {
            let p = g.positions[k];
            let (dx, dy) = (p[0] - g.center[0], p[1] - g.center[1]);
            let rotated = [g.center[0] + c * dx - s * dy, g.center[1] + s * dx + c * dy];
            let next = g.positions[(k + 1) % sensors];
            prop_assert!((rotated[0] - next[0]).abs() < 1e-12 && (rotated[1] - next[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn phantom_intensities_bounded_and_deterministic(
        r in 0.0005f64..0.004,
        rx in 0.0005f64..0.003,
        ry in 0.0005f64..0.003,
        angle in 0.0f64..PI,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        cx in -0.004f64..0.004,
        cy in -0.004f64..0.004,
    ) {
        let spec = PhantomSpec {
            shapes: vec![
                Shape { kind: ShapeKind::Disc { radius: r }, intensity: a, center: [cx, cy], trajectory: Trajectory::Static },
                Shape {
                    kind: ShapeKind::Ellipse { rx, ry, angle },
                    intensity: b,
                    center: [-cx, cy],
                    trajectory: Trajectory::Orbit { pivot: [0.0, 0.0], angular_rate: 3.0 },
                },
            ],
            num_frames: 3,
            frame_interval: 0.01,
            seed: 0,
        };
        let g = grid(24);
        let first = render_phantom(&spec, &g).unwrap();
        prop_assert!(first.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let second = render_phantom(&spec, &g).unwrap();
        prop_assert!(first.data.iter().zip(second.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn translating_disc_conserves_mass(vx in -0.1f64..0.1, vy in -0.1f64..0.1, r in 0.001f64..0.003) {
        let spec = PhantomSpec {
            shapes: vec![Shape {
                kind: ShapeKind::Disc { radius: r },
                intensity: 0.8,
                center: [0.0, 0.0],
                trajectory: Trajectory::Linear { velocity: [vx, vy] },
            }],
            num_frames: 5,
            frame_interval: 0.01,
            seed: 0,
        };
        let seq = render_phantom(&spec, &grid(32)).unwrap();
        let sums: Vec<f64> = seq.data.axis_iter(Axis(2)).map(|f| f.sum()).collect();
        for s in &sums {
            prop_assert!((s - sums[0]).abs() <= 0.01 * sums[0]);
        }
    }

    #[test]
    fn forward_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let g = grid(8);
        let op = ForwardOperator::new(&g, &ring(&g, 8)).unwrap();
        let x = random_matrix(64, 2, seed);
        let z = random_matrix(64, 2, seed ^ 0x55);
        let combo = &x * alpha + &z * beta;
        let lhs = op.forward_casorati(combo.view()).unwrap();
        let rhs = op.forward_casorati(x.view()).unwrap() * alpha + op.forward_casorati(z.view()).unwrap() * beta;
        prop_assert!(max_rel(lhs.as_slice().unwrap(), rhs.as_slice().unwrap()) < 1e-10);
    }

    #[test]
    fn forward_adjoint_identity(seed in any::<u64>(), sensors in prop::sample::select(vec![4usize, 8, 12, 16])) {
        let g = grid(10);
        let geom = ring(&g, sensors);
        let op = ForwardOperator::new(&g, &geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((100, 3), |_| rng.gen_range(-1.0..1.0));
        let y = Array3::from_shape_fn((sensors, geom.num_samples, 3), |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = op.forward_casorati(x.view()).unwrap().iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(op.adjoint_casorati(y.view()).unwrap().iter()).map(|(a, b)| a * b).sum();
        prop_assert!(rel(lhs, rhs) < 1e-10);
    }

    #[test]
    fn point_source_peaks_at_time_of_flight(row in 0usize..16, col in 0usize..16) {
        let g = grid(16);
        let geom = ring(&g, 16);
        let op = ForwardOperator::new(&g, &geom).unwrap();
        let mut img = Array3::zeros((16, 16, 1));
        img[[row, col, 0]] = 1.0;
        let sino = op.apply(&ImageSequence::new(img, g.clone(), vec![0.0]).unwrap()).unwrap();
        let src = g.pixel_center(row, col);
        for s in 0..16 {
            let trace = sino.trace(s, 0);
            let peak = trace.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let u = geom.sample_index(dynpact::geometry::distance(src, geom.positions[s]));
            let near = trace
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() == peak)
                .any(|(i, _)| (i as f64 - u).abs() <= 1.0);
            prop_assert!(near, "sensor {}: no peak within one sample of {}", s, u);
        }
    }

    #[test]
    fn quarter_turn_permutes_traces(row in 0usize..12, col in 0usize..12, quarter in 1usize..4) {
        let n = 12;
        let g = grid(n);
        let sensors = 16;
        let geom = ring(&g, sensors);
        let op = ForwardOperator::new(&g, &geom).unwrap();
        let shot = |r: usize, c: usize| {
            let mut img = Array3::zeros((n, n, 1));
            img[[r, c, 0]] = 1.0;
            op.apply(&ImageSequence::new(img, g.clone(), vec![0.0]).unwrap()).unwrap()
        };
        // counter-clockwise quarter turn about the grid center: (x, y) -> (-y, x)
        let (mut r, mut c) = (row, col);
        for _ in 0..quarter {
            let (nr, nc) = (c, n - 1 - r);
            r = nr;
            c = nc;
        }
        let a = shot(row, col);
        let b = shot(r, c);
        let shift = quarter * sensors / 4;
        for s in 0..sensors {
            let ta = a.trace(s, 0);
            let tb = b.trace((s + shift) % sensors, 0);
            let scale = ta.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (x, y) in ta.iter().zip(&tb) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn baselines_are_linear(seed in any::<u64>(), alpha in -2.0f64..2.0) {
        let g = grid(8);
        let geom = ring(&g, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| {
            let d = Array3::from_shape_fn((8, geom.num_samples, 2), |_| rng.gen_range(-1.0..1.0));
            Sinogram::new(d, geom.clone(), vec![0.0, 0.01]).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let combo = Sinogram::new(&a.data * alpha + &b.data, geom.clone(), vec![0.0, 0.01]).unwrap();
        for recon in [reconstruct_das, reconstruct_ubp] {
            let lhs = recon(&combo, &g).unwrap().signed.data;
            let rhs = recon(&a, &g).unwrap().signed.data * alpha + recon(&b, &g).unwrap().signed.data;
            prop_assert!(max_rel(lhs.as_slice().unwrap(), rhs.as_slice().unwrap()) < 1e-10);
        }
    }

    #[test]
    fn baselines_treat_frames_independently(seed in any::<u64>()) {
        let g = grid(8);
        let geom = ring(&g, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((8, geom.num_samples, 3), |_| rng.gen_range(-1.0..1.0));
        let times = vec![0.0, 0.01, 0.02];
        let sino = Sinogram::new(data.clone(), geom.clone(), times.clone()).unwrap();
        let order = [2usize, 0, 1];
        let permuted = Sinogram::new(data.select(Axis(2), &order), geom.clone(), times).unwrap();
        for recon in [reconstruct_das, reconstruct_ubp] {
            let base = recon(&sino, &g).unwrap().signed;
            let perm = recon(&permuted, &g).unwrap().signed;
            for (k, &src) in order.iter().enumerate() {
                prop_assert_eq!(perm.frame(k), base.frame(src));
            }
        }
    }

    #[test]
    fn loss_terms_nonnegative(seed in any::<u64>()) {
        let g = grid(6);
        let op = ForwardOperator::new(&g, &ring(&g, 6)).unwrap();
        let x = random_matrix(36, 3, seed);
        let truth = random_matrix(36, 3, seed.wrapping_add(1));
        let y = op.forward_casorati(truth.view()).unwrap();
        let (dc, _) = dc_loss(&op, x.view(), y.view()).unwrap();
        let (dc_exact, _) = dc_loss(&op, truth.view(), y.view()).unwrap();
        prop_assert!(dc > 0.0);
        prop_assert_eq!(dc_exact, 0.0);
        prop_assert!(temporal_tv(x.view(), 1e-8).unwrap().0 >= 0.0);
        prop_assert!(nuclear_norm(x.view(), None).unwrap().0 >= 0.0);
    }

    #[test]
    fn tv_ignores_pixel_order_and_time_direction(seed in any::<u64>()) {
        let x = random_matrix(30, 6, seed);
        let (base, _) = temporal_tv(x.view(), 1e-8).unwrap();
        let mut rows: Vec<usize> = (0..30).collect();
        rows.reverse();
        rows.swap(3, 17);
        let (perm, _) = temporal_tv(x.select(Axis(0), &rows).view(), 1e-8).unwrap();
        let rev: Vec<usize> = (0..6).rev().collect();
        let (back, _) = temporal_tv(x.select(Axis(1), &rev).view(), 1e-8).unwrap();
        prop_assert!(rel(base, perm) < 1e-12);
        prop_assert!(rel(base, back) < 1e-12);
    }

    #[test]
    fn nuclear_norm_is_rotation_invariant(seed in any::<u64>()) {
        let x = random_matrix(40, 5, seed);
        let q = DMatrix::from_fn(5, 5, |i, j| random_matrix(5, 5, seed ^ 0xabc)[[i, j]]).qr().q();
        let xq = Array2::from_shape_fn((40, 5), |(i, j)| (0..5).map(|k| x[[i, k]] * q[(k, j)]).sum());
        let (a, _) = nuclear_norm(x.view(), None).unwrap();
        let (b, _) = nuclear_norm(xq.view(), None).unwrap();
        prop_assert!(rel(a, b) < 1e-10);
    }

    #[test]
    fn nuclear_norm_of_static_sequence(seed in any::<u64>(), frames in 1usize..9) {
        let v = random_matrix(50, 1, seed);
        let x = Array2::from_shape_fn((50, frames), |(i, _)| v[[i, 0]]);
        let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
        let (value, _) = nuclear_norm(x.view(), None).unwrap();
        prop_assert!(rel(value, norm * (frames as f64).sqrt()) < 1e-10);
    }

    #[test]
    fn fourier_features_on_unit_circle(x in -1.0f64..2.0, y in -1.0f64..2.0, t in -1.0f64..2.0, seed in 0u64..50) {
        let enc = FourierEncoder::new(seed, 32, 10.0).unwrap();
        let f = enc.encode([x, y, t]);
        prop_assert_eq!(f.len(), 64);
        for k in 0..32 {
            prop_assert!(f[k].abs() <= 1.0 && f[k + 32].abs() <= 1.0);
            prop_assert!((f[k] * f[k] + f[k + 32] * f[k + 32] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn network_output_in_open_unit_interval(seed in 0u64..1000) {
        let model = InrModel::new(seed, 16, 10.0).unwrap();
        let batch = CoordinateBatch::casorati(5, &[0.0, 0.5, 1.0]);
        for v in model.predict(&batch) {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn metric_symmetry(seed in any::<u64>()) {
        let a = random_sequence(8, 3, seed);
        let b = random_sequence(8, 3, seed ^ 7);
        prop_assert_eq!(psnr(&a, &b).unwrap().per_frame, psnr(&b, &a).unwrap().per_frame);
        let (s1, s2) = (ssim(&a, &b).unwrap().per_frame, ssim(&b, &a).unwrap().per_frame);
        for (x, y) in s1.iter().zip(&s2) {
            prop_assert!((x - y).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(x));
        }
        prop_assert!(ssim(&a, &a).unwrap().per_frame.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>()) {
        let y = random_sequence(8, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
        let noise = Array3::from_shape_fn(y.data.raw_dim(), |_| rng.gen_range(-1.0..1.0));
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = ImageSequence::new(&y.data + &(&noise * amp), y.grid.clone(), y.frame_times.clone()).unwrap();
            let m = psnr(&y, &noisy).unwrap().mean;
            prop_assert!(m < last);
            last = m;
        }
    }

    #[test]
    fn normalization_is_affine_invariant(seed in any::<u64>(), scale in 0.1f64..10.0, offset in -5.0f64..5.0) {
        let y = random_sequence(6, 2, seed);
        let moved = ImageSequence::new(y.data.mapv(|v| scale * v + offset), y.grid.clone(), y.frame_times.clone()).unwrap();
        let (a, _) = normalize(&y).unwrap();
        let (b, _) = normalize(&moved).unwrap();
        for (p, q) in a.data.iter().zip(b.data.iter()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn containers_round_trip(n in 2usize..12, frames in 1usize..5, sensors in 2usize..9, samples in 2usize..40, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grid(n);
        let times: Vec<f64> = (0..frames).map(|k| k as f64 * 0.01 + 0.003).collect();
        let seq = ImageSequence::new(
            Array3::from_shape_fn((n, n, frames), |_| rng.gen::<f32>() as f64),
            g,
            times.clone(),
        ).unwrap();
        let ipath = dir.path().join("i.dpc");
        write_images(&ipath, &seq).unwrap();
        prop_assert_eq!(read_images(&ipath).unwrap(), seq);

        let geom = make_ring_array(sensors, 0.03, [0.0, 0.0], 1500.0, 40e6, samples).unwrap();
        let sino = Sinogram::new(
            Array3::from_shape_fn((sensors, samples, frames), |_| rng.gen_range(-1e6f32..1e6f32) as f64),
            geom,
            times,
        ).unwrap();
        let spath = dir.path().join("s.dpc");
        write_sinogram(&spath, &sino).unwrap();
        prop_assert_eq!(read_sinogram(&spath).unwrap(), sino);
    }

    #[test]
    fn adam_zero_gradient_keeps_weights(params in prop::collection::vec(-10.0f64..10.0, 1..50), lr in 1e-6f64..1.0) {
        let mut p = params.clone();
        let mut adam = AdamState::new(p.len(), 0.9, 0.999, 1e-8);
        adam.step(&mut p, &vec![0.0; params.len()], lr).unwrap();
        prop_assert_eq!(p, params);
    }

    #[test]
    fn schedule_is_geometric(start in 1e-4f64..1e-1, ratio in 1e-4f64..1.0, iterations in 2usize..5000) {
        let cfg = TrainConfig { lr_start: start, lr_end: start * ratio, iterations, ..TrainConfig::default() };
        prop_assert!(rel(lr_at(&cfg, 0).unwrap(), start) < 1e-15);
        prop_assert!(rel(lr_at(&cfg, iterations - 1).unwrap(), start * ratio) < 1e-12);
        let mut last = f64::INFINITY;
        for i in (0..iterations).step_by((iterations / 17).max(1)) {
            let lr = lr_at(&cfg, i).unwrap();
            prop_assert!(lr <= last);
            last = lr;
        }
    }
}
