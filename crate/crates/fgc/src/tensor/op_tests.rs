use super::ops::{self, RunningStats};
use super::{Mode, Tape, Tensor};
use crate::error::Error;
use crate::gradcheck::{central_difference, relative_error};
use crate::rng::Rng;

fn randn(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * scale).collect()
}

#[test]
fn matmul_identity_case() {
    let tape = Tape::inference();
    let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = ops::matmul(&tape, &eye, &m).unwrap();
    assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_row_times_column() {
    let tape = Tape::inference();
    let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
    let y = ops::matmul(&tape, &a, &b).unwrap();
    assert_eq!(y.to_vec(), vec![11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::inference();
    let a = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
    let b = Tensor::new(&[4, 2], vec![0.0; 8]).unwrap();
    let err = ops::matmul(&tape, &a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from(123);
    let a0 = randn(&mut rng, 12, 0.5);
    let b0 = randn(&mut rng, 8, 0.5);

    let tape = Tape::new();
    let a = Tensor::param(&[3, 4], a0.clone()).unwrap();
    let b = Tensor::param(&[4, 2], b0.clone()).unwrap();
    let y = ops::matmul(&tape, &a, &b).unwrap();
    let loss = ops::sum(&tape, &ops::mul(&tape, &y, &y).unwrap()).unwrap();
    tape.backward(&loss).unwrap();

    let f_a = |v: &[f64]| {
        let t = Tape::inference();
        let a = Tensor::new(&[3, 4], v.to_vec()).unwrap();
        let b = Tensor::new(&[4, 2], b0.clone()).unwrap();
        let y = ops::matmul(&t, &a, &b).unwrap();
        ops::sum(&t, &ops::mul(&t, &y, &y).unwrap()).unwrap().item().unwrap()
    };
    let f_b = |v: &[f64]| {
        let t = Tape::inference();
        let a = Tensor::new(&[3, 4], a0.clone()).unwrap();
        let b = Tensor::new(&[4, 2], v.to_vec()).unwrap();
        let y = ops::matmul(&t, &a, &b).unwrap();
        ops::sum(&t, &ops::mul(&t, &y, &y).unwrap()).unwrap().item().unwrap()
    };
    assert!(relative_error(&a.grad(), &central_difference(f_a, &a0, 1e-6)) < 1e-6);
    assert!(relative_error(&b.grad(), &central_difference(f_b, &b0, 1e-6)) < 1e-6);
}

#[test]
fn conv_unit_kernel_is_identity() {
    let tape = Tape::inference();
    let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let y = ops::conv2d(&tape, &x, &w, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn conv_zero_input_zero_output_and_zero_weight_grad() {
    let tape = Tape::new();
    let x = Tensor::new(&[1, 2, 4, 4], vec![0.0; 32]).unwrap();
    let w = Tensor::param(&[3, 2, 3, 3], vec![0.5; 54]).unwrap();
    let y = ops::conv2d(&tape, &x, &w, 1, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let loss = ops::sum(&tape, &y).unwrap();
    tape.backward(&loss).unwrap();
    assert!(w.grad().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_non_integral_extent_is_a_config_error() {
    let tape = Tape::inference();
    let x = Tensor::new(&[1, 1, 5, 5], vec![0.0; 25]).unwrap();
    let w = Tensor::new(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
    // (5 - 2) % 2 != 0
    let err = ops::conv2d(&tape, &x, &w, 2, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from(321);
    let x0 = randn(&mut rng, 2 * 5 * 5, 0.5);
    let w0 = randn(&mut rng, 2 * 2 * 3 * 3, 0.5);

    let run = |xv: &[f64], wv: &[f64], tape: &Tape, as_params: bool| {
        let x = if as_params {
            Tensor::param(&[1, 2, 5, 5], xv.to_vec()).unwrap()
        } else {
            Tensor::new(&[1, 2, 5, 5], xv.to_vec()).unwrap()
        };
        let w = if as_params {
            Tensor::param(&[2, 2, 3, 3], wv.to_vec()).unwrap()
        } else {
            Tensor::new(&[2, 2, 3, 3], wv.to_vec()).unwrap()
        };
        let y = ops::conv2d(tape, &x, &w, 1, 1).unwrap();
        let loss = ops::sum(tape, &ops::mul(tape, &y, &y).unwrap()).unwrap();
        (x, w, loss)
    };

    let tape = Tape::new();
    let (x, w, loss) = run(&x0, &w0, &tape, true);
    tape.backward(&loss).unwrap();

    let fd_x = central_difference(
        |v| {
            let t = Tape::inference();
            run(v, &w0, &t, false).2.item().unwrap()
        },
        &x0,
        1e-6,
    );
    let fd_w = central_difference(
        |v| {
            let t = Tape::inference();
            run(&x0, v, &t, false).2.item().unwrap()
        },
        &w0,
        1e-6,
    );
    assert!(relative_error(&x.grad(), &fd_x) < 1e-6);
    assert!(relative_error(&w.grad(), &fd_w) < 1e-6);
}

#[test]
fn relu_and_gap_conventions() {
    let tape = Tape::inference();
    let x = Tensor::new(&[1, 2], vec![-1.0, 2.0]).unwrap();
    let y = ops::relu(&tape, &x).unwrap();
    assert_eq!(y.to_vec(), vec![0.0, 2.0]);

    let c = Tensor::new(&[1, 2, 2, 2], vec![3.0, 3.0, 3.0, 3.0, -1.5, -1.5, -1.5, -1.5]).unwrap();
    let p = ops::global_avg_pool(&tape, &c).unwrap();
    assert_eq!(p.to_vec(), vec![3.0, -1.5]);
}

#[test]
fn batchnorm_standardizes_batch_statistics() {
    let mut rng = Rng::seed_from(7);
    let (n, c, h, w) = (8, 3, 4, 4);
    let tape = Tape::inference();
    let x = Tensor::new(&[n, c, h, w], randn(&mut rng, n * c * h * w, 2.0)).unwrap();
    let gamma = Tensor::new(&[c], vec![1.0; c]).unwrap();
    let beta = Tensor::new(&[c], vec![0.0; c]).unwrap();
    let running = RunningStats::new(c);
    let y = ops::batchnorm(&tape, &x, &gamma, &beta, &running, Mode::Train).unwrap();

    let yd = y.data();
    let m = (n * h * w) as f64;
    for ch in 0..c {
        let mut mean = 0.0;
        for i in 0..n {
            for j in 0..h * w {
                mean += yd[(i * c + ch) * h * w + j];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for i in 0..n {
            for j in 0..h * w {
                let d = yd[(i * c + ch) * h * w + j] - mean;
                var += d * d;
            }
        }
        var /= m;
        assert!(mean.abs() < 1e-10, "channel {ch} mean {mean}");
        // Normalized with eps, so the variance sits just below 1.
        assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
    }
}

#[test]
fn batchnorm_rejects_batch_of_one_in_train_mode() {
    let tape = Tape::inference();
    let x = Tensor::new(&[1, 2, 2, 2], vec![0.5; 8]).unwrap();
    let gamma = Tensor::new(&[2], vec![1.0; 2]).unwrap();
    let beta = Tensor::new(&[2], vec![0.0; 2]).unwrap();
    let running = RunningStats::new(2);
    let err = ops::batchnorm(&tape, &x, &gamma, &beta, &running, Mode::Train).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    // Eval mode accepts the same batch.
    assert!(ops::batchnorm(&tape, &x, &gamma, &beta, &running, Mode::Eval).is_ok());
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from(55);
    let (n, c, hw) = (4, 2, 4);
    let x0 = randn(&mut rng, n * c * hw, 1.0);
    let g0 = vec![1.2, 0.8];
    let b0 = vec![0.1, -0.2];
    // A loss that weighs each output differently; sum(y^2) would be almost
    // invariant (batch statistics are pinned) and leave only eps-scale
    // gradients below finite-difference resolution.
    let weights = Tensor::new(&[n, c, 2, 2], randn(&mut rng, n * c * hw, 1.0)).unwrap();

    let forward = |xv: &[f64], gv: &[f64], bv: &[f64]| {
        let t = Tape::inference();
        let x = Tensor::new(&[n, c, 2, 2], xv.to_vec()).unwrap();
        let gamma = Tensor::new(&[c], gv.to_vec()).unwrap();
        let beta = Tensor::new(&[c], bv.to_vec()).unwrap();
        let running = RunningStats::new(c);
        let y = ops::batchnorm(&t, &x, &gamma, &beta, &running, Mode::Train).unwrap();
        ops::sum(&t, &ops::mul(&t, &y, &weights).unwrap()).unwrap().item().unwrap()
    };

    let tape = Tape::new();
    let x = Tensor::param(&[n, c, 2, 2], x0.clone()).unwrap();
    let gamma = Tensor::param(&[c], g0.clone()).unwrap();
    let beta = Tensor::param(&[c], b0.clone()).unwrap();
    let running = RunningStats::new(c);
    let y = ops::batchnorm(&tape, &x, &gamma, &beta, &running, Mode::Train).unwrap();
    let loss = ops::sum(&tape, &ops::mul(&tape, &y, &weights).unwrap()).unwrap();
    tape.backward(&loss).unwrap();

    let fd_x = central_difference(|v| forward(v, &g0, &b0), &x0, 1e-6);
    let fd_g = central_difference(|v| forward(&x0, v, &b0), &g0, 1e-6);
    let fd_b = central_difference(|v| forward(&x0, &g0, v), &b0, 1e-6);
    assert!(relative_error(&x.grad(), &fd_x) < 1e-6);
    assert!(relative_error(&gamma.grad(), &fd_g) < 1e-6);
    assert!(relative_error(&beta.grad(), &fd_b) < 1e-6);
}

#[test]
fn backward_of_sum_is_ones() {
    let tape = Tape::new();
    let x = Tensor::param(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
    let loss = ops::sum(&tape, &x).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad(), vec![1.0; 4]);
}

#[test]
fn backward_of_square_is_twice_input() {
    let tape = Tape::new();
    let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let loss = ops::sum(&tape, &ops::mul(&tape, &x, &x).unwrap()).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad(), vec![2.0, -4.0, 1.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::new();
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let y = ops::scale(&tape, &x, 2.0).unwrap();
    assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
}

#[test]
fn backward_twice_without_rerecording_is_an_error() {
    let tape = Tape::new();
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let loss = ops::sum(&tape, &x).unwrap();
    tape.backward(&loss).unwrap();
    let err = tape.backward(&loss).unwrap_err();
    assert!(err.to_string().contains("twice"));
}

#[test]
fn every_recorded_node_replays_exactly_once() {
    let tape = Tape::new();
    let x = Tensor::param(&[3], vec![0.3, -0.4, 0.9]).unwrap();
    // Diamond: x feeds two branches that rejoin; x itself is used twice.
    let a = ops::sigmoid(&tape, &x).unwrap();
    let b = ops::mul(&tape, &x, &a).unwrap();
    let c = ops::add(&tape, &a, &b).unwrap();
    let loss = ops::sum(&tape, &c).unwrap();
    let recorded = tape.num_recorded();
    tape.backward(&loss).unwrap();
    assert_eq!(recorded, 4);
    assert_eq!(tape.num_replayed(), recorded);
}

#[test]
fn unreachable_parameters_hold_zero_gradient() {
    let tape = Tape::new();
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let unused = Tensor::param(&[2], vec![5.0, 6.0]).unwrap();
    let _side = ops::scale(&tape, &unused, 3.0).unwrap();
    let loss = ops::sum(&tape, &x).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(unused.grad(), vec![0.0, 0.0]);
}

#[test]
fn forward_results_are_deterministic() {
    let mut rng = Rng::seed_from(99);
    let x0 = randn(&mut rng, 24, 1.0);
    let w0 = randn(&mut rng, 8, 1.0);
    let once = || {
        let t = Tape::inference();
        let x = Tensor::new(&[6, 4], x0.clone()).unwrap();
        let w = Tensor::new(&[4, 2], w0.clone()).unwrap();
        ops::matmul(&t, &x, &w).unwrap().to_vec()
    };
    let a = once();
    let b = once();
    // Bitwise identical, not merely close.
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn non_finite_results_surface_as_numeric_errors() {
    let tape = Tape::inference();
    let x = Tensor::new(&[1], vec![800.0]).unwrap();
    let err = ops::exp(&tape, &x).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }));

    let neg = Tensor::new(&[1], vec![-1.0]).unwrap();
    assert!(matches!(ops::log(&tape, &neg), Err(Error::Numeric { .. })));
}

#[test]
fn elementwise_primitive_gradients_match_finite_differences() {
    let mut rng = Rng::seed_from(2024);
    // Keep inputs away from relu/clamp kinks by sampling in safe bands.
    let x0: Vec<f64> = (0..10).map(|_| rng.uniform() * 0.8 + 0.1).collect();

    type OpFn = fn(&Tape, &Tensor) -> crate::error::Result<Tensor>;
    let cases: Vec<(&str, OpFn)> = vec![
        ("relu", ops::relu as OpFn),
        ("sigmoid", ops::sigmoid as OpFn),
        ("exp", ops::exp as OpFn),
        ("log", ops::log as OpFn),
        ("clamp_unit", ops::clamp_unit as OpFn),
    ];
    for (name, op) in cases {
        let tape = Tape::new();
        let x = Tensor::param(&[10], x0.clone()).unwrap();
        let y = op(&tape, &x).unwrap();
        let loss = ops::sum(&tape, &ops::mul(&tape, &y, &y).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        let fd = central_difference(
            |v| {
                let t = Tape::inference();
                let x = Tensor::new(&[10], v.to_vec()).unwrap();
                let y = op(&t, &x).unwrap();
                ops::sum(&t, &ops::mul(&t, &y, &y).unwrap()).unwrap().item().unwrap()
            },
            &x0,
            1e-6,
        );
        let err = relative_error(&x.grad(), &fd);
        assert!(err < 1e-6, "{name}: relative error {err}");
    }
}
