use ndarray::Array2;

use dynpact::forward::{ForwardOperator, Sinogram};
use dynpact::geometry::{fit_time_window, make_ring_array, render_phantom, ImageGrid, PhantomSpec};
use dynpact::inr::{CoordinateBatch, InrModel};
use dynpact::trainer::{fit, fit_from, lr_at, normalized_trained_times, AdamState, Lambda, TrainConfig};
use dynpact::Error;

fn setup(n: usize, sensors: usize) -> ForwardOperator {
    let grid = ImageGrid::centered(n, 0.02, [0.0, 0.0]).unwrap();
    let ring = make_ring_array(sensors, 0.03, [0.0, 0.0], 1500.0, 20e6, 2).unwrap();
    ForwardOperator::new(&grid, &fit_time_window(&ring, &grid, 4).unwrap()).unwrap()
}

/// Measurements that the given model explains exactly.
fn realizable(op: &ForwardOperator, model: &InrModel, times: &[f64]) -> Sinogram {
    let n = op.grid().n;
    let batch = CoordinateBatch::casorati(n, &normalized_trained_times(times));
    let x = Array2::from_shape_vec((n * n, times.len()), model.predict(&batch)).unwrap();
    Sinogram::new(op.forward_casorati(x.view()).unwrap(), op.geometry().clone(), times.to_vec()).unwrap()
}

fn quiet(iterations: usize) -> TrainConfig {
    TrainConfig { iterations, log_every: 0, ..TrainConfig::default() }
}

const TIMES: [f64; 3] = [0.0, 0.01, 0.02];

#[test]
fn self_consistent_start_has_zero_data_loss() {
    let op = setup(8, 16);
    let init = InrModel::new(0, 256, 10.0).unwrap();
    let y = realizable(&op, &init, &TIMES);

    // auto weights scale with the initial data loss, so nothing moves
    let still = fit_from(init.clone(), &y, &op, &quiet(3), &mut |_, _| Ok(())).unwrap();
    assert_eq!(still.log[0].dc, 0.0);
    assert_eq!(still.lambda_d, 0.0);
    assert_eq!(still.model.params(), init.params());

    // with a fixed temporal weight only the regularizer gradient drives the first step
    let cfg = TrainConfig { lambda_d: Lambda::Fixed(1.0), lambda_l: Lambda::Fixed(0.0), ..quiet(1) };
    let moved = fit_from(init.clone(), &y, &op, &cfg, &mut |_, _| Ok(())).unwrap();
    assert_eq!(moved.log[0].dc, 0.0);
    assert_ne!(moved.model.params(), init.params());
}

#[test]
fn training_is_bitwise_deterministic() {
    let op = setup(8, 16);
    let truth = InrModel::new(5, 256, 10.0).unwrap();
    let y = realizable(&op, &truth, &TIMES);
    let cfg = quiet(15);
    let a = fit(&y, &op, &cfg).unwrap();
    let b = fit(&y, &op, &cfg).unwrap();
    assert!(a.model.params().iter().zip(b.model.params()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(a.log, b.log);
}

#[test]
fn divergence_guard_stops_runaway_loss() {
    let op = setup(8, 16);
    let init = InrModel::new(0, 256, 10.0).unwrap();
    let y = realizable(&op, &init, &TIMES);
    // a tiny regularizer loss at the start, then Adam's first step moves every
    // weight by about the learning rate and the data term explodes
    let cfg = TrainConfig {
        lambda_d: Lambda::Fixed(1e-6),
        lambda_l: Lambda::Fixed(0.0),
        divergence_patience: 5,
        ..quiet(50)
    };
    match fit_from(init, &y, &op, &cfg, &mut |_, _| Ok(())) {
        Err(Error::Diverged { iteration, factor, .. }) => {
            assert_eq!(iteration, 5);
            assert_eq!(factor, 10.0);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn unregularized_fit_solves_realizable_problem() {
    let op = setup(8, 16);
    let truth = InrModel::new(11, 256, 10.0).unwrap();
    let y = realizable(&op, &truth, &TIMES);
    let cfg = TrainConfig {
        lambda_d: Lambda::Fixed(0.0),
        lambda_l: Lambda::Fixed(0.0),
        ..quiet(2000)
    };
    let result = fit(&y, &op, &cfg).unwrap();
    let first = result.log[0].dc;
    let last = result.log.last().unwrap().dc;
    assert!(last < 1e-6 * first, "dc {first:e} -> {last:e}");
}

#[test]
fn network_fits_high_frequency_pattern() {
    let n = 32;
    let mut model = InrModel::new(0, 256, 10.0).unwrap();
    let batch = CoordinateBatch::casorati(n, &[0.0]);
    let target: Vec<f64> = batch
        .coords
        .iter()
        .map(|[x, y, _]| {
            0.5 + 0.2 * (2.0 * std::f64::consts::PI * 6.0 * x).sin() + 0.2 * (2.0 * std::f64::consts::PI * 4.0 * y).cos()
        })
        .collect();
    let features = model.encoder.encode_batch(&batch);
    let cfg = quiet(2000);
    let mut adam = AdamState::new(model.param_count(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let count = target.len() as f64;
    let mut mse = f64::INFINITY;
    for it in 0..cfg.iterations {
        let pass = model.forward(features.view());
        let out = pass.output();
        mse = out.iter().zip(&target).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / count;
        if mse < 1e-3 {
            break;
        }
        let grad: Vec<f64> = out.iter().zip(&target).map(|(o, t)| 2.0 * (o - t) / count).collect();
        let g = model.backward(features.view(), &pass, &grad).unwrap();
        adam.step(model.params_mut(), &g, lr_at(&cfg, it).unwrap()).unwrap();
    }
    assert!(mse < 1e-3, "mse {mse:e}");
}

#[test]
fn two_disc_data_loss_falls_tenfold() {
    let op = setup(32, 32);
    let spec = PhantomSpec::two_disc(0.02, 8, 0);
    let truth = render_phantom(&spec, op.grid()).unwrap();
    let y = op.apply(&truth).unwrap();
    let result = fit(&y, &op, &quiet(1000)).unwrap();
    let dc: Vec<f64> = result.log.iter().map(|r| r.dc).collect();
    assert!(dc[999] <= 0.1 * dc[0], "dc {:e} -> {:e}", dc[0], dc[999]);

    let windows: Vec<f64> = dc.chunks_exact(100).map(|w| w.iter().sum::<f64>() / 100.0).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0] * 1.01, "windowed data loss rose: {windows:?}");
    }
}
