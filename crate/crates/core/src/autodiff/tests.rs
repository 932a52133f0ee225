use std::f64::consts::LN_2;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `sum(v * r)` with fixed random `r`, so every output entry reaches the loss.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(&mut rng, tape.shape(v).to_vec(), -1.0, 1.0);
    let r = tape.constant(r);
    let m = tape.mul(v, r)?;
    tape.sum(m)
}

fn eval<F>(params: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.value(loss).item()
}

/// Relative error `||analytic - fd|| / ||fd||` over all parameter entries.
fn fd_error<F>(params: Vec<Tensor>, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = gradient(&tape, loss, &vars).unwrap();
    let step = 1e-6;
    let (mut diff, mut norm) = (0.0, 0.0);
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let mut plus = params.clone();
            plus[pi].data_mut()[j] += step;
            let mut minus = params.clone();
            minus[pi].data_mut()[j] -= step;
            let fd = (eval(&plus, &build) - eval(&minus, &build)) / (2.0 * step);
            let an = grads[pi].data()[j];
            diff += (an - fd).powi(2);
            norm += fd * fd;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

fn assert_fd<F>(name: &str, params: Vec<Tensor>, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let err = fd_error(params, build);
    assert!(err < 1e-5, "{name}: relative gradient error {err:e}");
}

#[test]
fn log2_1p_derivative_at_one() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.0));
    let y = tape.log2_1p(x).unwrap();
    let g = gradient(&tape, y, &[x]).unwrap();
    assert!((g[0].item() - 1.0 / (2.0 * LN_2)).abs() < 1e-15);
}

#[test]
fn abs_sq_gradient() {
    let mut tape = Tape::new();
    let z = tape.param(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let y = tape.abs_sq(z).unwrap();
    assert_eq!(tape.value(y).item(), 25.0);
    let g = gradient(&tape, y, &[z]).unwrap();
    assert_eq!(g[0].data(), &[6.0, 8.0]);
}

#[test]
fn elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, vec![3, 4], 0.5, 2.0);
    let b = random(&mut rng, vec![3, 4], 0.5, 2.0);
    let x = random(&mut rng, vec![3, 4], -2.0, 2.0);
    let away: Vec<f64> = x.data().iter().map(|v| if v.abs() < 1e-2 { v + 0.1 } else { *v }).collect();
    let x = Tensor::new(vec![3, 4], away).unwrap();
    type Unary = fn(&mut Tape, Var) -> Result<Var>;

    assert_fd("add", vec![a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 9)
    });
    assert_fd("sub", vec![a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 9)
    });
    assert_fd("mul", vec![a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 9)
    });
    assert_fd("div", vec![a.clone(), b.clone()], |t, v| {
        let y = t.div(v[0], v[1])?;
        project(t, y, 9)
    });
    assert_fd("square", vec![x.clone()], |t, v| {
        let y = t.mul(v[0], v[0])?;
        project(t, y, 9)
    });
    let positive: [(&str, Unary); 3] = [
        ("log2_1p", |t, v| t.log2_1p(v)),
        ("sqrt", |t, v| t.sqrt(v)),
        ("recip", |t, v| t.recip(v)),
    ];
    for (name, f) in positive {
        assert_fd(name, vec![a.clone()], move |t, v| {
            let y = f(t, v[0])?;
            project(t, y, 9)
        });
    }
    let signed: [(&str, Unary); 5] = [
        ("relu", |t, v| t.relu(v)),
        ("sigmoid", |t, v| t.sigmoid(v)),
        ("abs", |t, v| t.abs(v)),
        ("scale", |t, v| t.scale(v, -1.7)),
        ("add_scalar", |t, v| t.add_scalar(v, 0.3)),
    ];
    for (name, f) in signed {
        assert_fd(name, vec![x.clone()], move |t, v| {
            let y = f(t, v[0])?;
            project(t, y, 9)
        });
    }
}

#[test]
fn reductions_and_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, vec![2, 3, 4], -1.0, 1.0);
    let y = random(&mut rng, vec![2, 1, 4], -1.0, 1.0);
    assert_fd("sum", vec![x.clone()], |t, v| {
        let s = t.sum(v[0])?;
        t.mul(s, s)
    });
    assert_fd("mean", vec![x.clone()], |t, v| {
        let s = t.mean(v[0])?;
        t.mul(s, s)
    });
    assert_fd("sum_last", vec![x.clone()], |t, v| {
        let s = t.sum_last(v[0])?;
        project(t, s, 3)
    });
    assert_fd("min_last", vec![x.clone()], |t, v| {
        let s = t.min_last(v[0])?;
        project(t, s, 3)
    });
    assert_fd("concat", vec![x.clone(), y.clone()], |t, v| {
        let s = t.concat(&[v[0], v[1], v[0]], 1)?;
        project(t, s, 3)
    });
    assert_fd("gather", vec![x.clone()], |t, v| {
        let s = t.gather(v[0], vec![5, 0, 5, 23, 11, 11], vec![3, 2])?;
        project(t, s, 3)
    });
    assert_fd("reshape", vec![x.clone()], |t, v| {
        let s = t.reshape(v[0], vec![6, 4])?;
        project(t, s, 3)
    });
    assert_fd("scale_to_power", vec![x.clone()], |t, v| {
        let s = t.scale_to_power(v[0], 5.0)?;
        project(t, s, 3)
    });
}

#[test]
fn dense_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, vec![3, 5], -1.0, 1.0);
    let b = random(&mut rng, vec![5, 2], -1.0, 1.0);
    let w = random(&mut rng, vec![4, 5], -1.0, 1.0);
    let bias = random(&mut rng, vec![4], -1.0, 1.0);
    assert_fd("matmul", vec![a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 4)
    });
    assert_fd("affine", vec![a, w, bias], |t, v| {
        let y = t.affine(v[0], v[1], v[2])?;
        project(t, y, 4)
    });
}

#[test]
fn complex_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&mut rng, vec![2, 3, 4, 2], -1.0, 1.0);
    let b = random(&mut rng, vec![2, 4, 2, 2], -1.0, 1.0);
    let c = random(&mut rng, vec![2, 3, 2, 2], -1.0, 1.0);
    let h = random(&mut rng, vec![2, 3, 4, 2], -1.0, 1.0);
    let w = random(&mut rng, vec![2, 4], 0.1, 1.0);
    let mu = random(&mut rng, vec![2], 0.1, 1.0);
    assert_fd("complex_matmul", vec![a.clone(), b], |t, v| {
        let y = t.complex_matmul(v[0], v[1], false)?;
        project(t, y, 5)
    });
    assert_fd("complex_matmul adjoint", vec![a.clone(), c.clone()], |t, v| {
        let y = t.complex_matmul(v[0], v[1], true)?;
        project(t, y, 5)
    });
    assert_fd("complex_mul", vec![c.clone(), c.clone()], |t, v| {
        let y = t.complex_mul(v[0], v[1])?;
        project(t, y, 5)
    });
    assert_fd("abs_sq", vec![c], |t, v| {
        let y = t.abs_sq(v[0])?;
        project(t, y, 5)
    });
    assert_fd("weighted_gram", vec![w, mu], move |t, v| {
        let y = t.weighted_gram(&h, v[0], v[1])?;
        project(t, y, 5)
    });
}

/// `M^H M + I`, Hermitian positive definite for any `M`.
fn spd(t: &mut Tape, m: Var, n: usize, batch: usize) -> Result<Var> {
    let g = t.complex_matmul(m, m, true)?;
    let mut eye = Tensor::zeros(vec![batch, n, n, 2]);
    for b in 0..batch {
        for i in 0..n {
            eye.data_mut()[((b * n + i) * n + i) * 2] = 1.0;
        }
    }
    let eye = t.constant(eye);
    t.add(g, eye)
}

#[test]
fn hermitian_solve_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random(&mut rng, vec![2, 4, 4, 2], -1.0, 1.0);
    let b = random(&mut rng, vec![2, 4, 3, 2], -1.0, 1.0);
    assert_fd("hermitian_solve", vec![m, b], |t, v| {
        let a = spd(t, v[0], 4, 2)?;
        let x = t.hermitian_solve(a, v[1])?;
        project(t, x, 6)
    });
}

fn to_cmatrix(t: &Tensor, rows: usize, cols: usize) -> DMatrix<Complex64> {
    let d = t.data();
    DMatrix::from_fn(rows, cols, |i, j| Complex64::new(d[2 * (i * cols + j)], d[2 * (i * cols + j) + 1]))
}

#[test]
fn hermitian_solve_backward_matches_explicit_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 4;
    let m = to_cmatrix(&random(&mut rng, vec![n, n, 2], -1.0, 1.0), n, n);
    let a = m.adjoint() * &m + DMatrix::identity(n, n).map(|x: f64| Complex64::new(x, 0.0));
    let b_t = random(&mut rng, vec![1, n, 2, 2], -1.0, 1.0);
    let g_t = random(&mut rng, vec![1, n, 2, 2], -1.0, 1.0);
    let mut a_data = Vec::new();
    for i in 0..n {
        for j in 0..n {
            a_data.extend([a[(i, j)].re, a[(i, j)].im]);
        }
    }
    let mut tape = Tape::new();
    let av = tape.param(Tensor::new(vec![1, n, n, 2], a_data).unwrap());
    let bv = tape.param(b_t.clone());
    let x = tape.hermitian_solve(av, bv).unwrap();
    let gv = tape.constant(g_t.clone());
    let prod = tape.mul(x, gv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = gradient(&tape, loss, &[av, bv]).unwrap();

    let inv = a.clone().try_inverse().unwrap();
    let bm = to_cmatrix(&b_t, n, 2);
    let gm = to_cmatrix(&g_t, n, 2);
    let xm = &inv * &bm;
    let gb = inv.adjoint() * &gm;
    let ga = -(&gb * xm.adjoint());
    let close = |t: &Tensor, m: &DMatrix<Complex64>, cols: usize| {
        let got = to_cmatrix(t, n, cols);
        (got - m).norm() / m.norm()
    };
    assert!(close(&grads[1], &gb, 2) < 1e-8);
    assert!(close(&grads[0], &ga, n) < 1e-8);
}

#[test]
fn composed_graph_with_solve_and_min() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = random(&mut rng, vec![3, 3, 3, 2], -1.0, 1.0);
    let b = random(&mut rng, vec![3, 3, 2, 2], -1.0, 1.0);
    let w = random(&mut rng, vec![2, 6], -1.0, 1.0);
    let bias = random(&mut rng, vec![2], -1.0, 1.0);
    assert_fd("composed", vec![m, b, w, bias], |t, v| {
        let a = spd(t, v[0], 3, 3)?;
        let x = t.hermitian_solve(a, v[1])?;
        let p = t.scale_to_power(x, 2.0)?;
        let e = t.abs_sq(p)?;
        let f = t.reshape(e, vec![3, 6])?;
        let h = t.affine(f, v[2], v[3])?;
        let s = t.sigmoid(h)?;
        let r = t.log2_1p(s)?;
        let lo = t.min_last(r)?;
        let sq = t.sqrt(lo)?;
        t.mean(sq)
    });
}

#[test]
fn gradient_of_sum_is_ones_and_unreached_is_zero() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let q = tape.param(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
    let s = tape.sum(p).unwrap();
    let g = gradient(&tape, s, &[p, q]).unwrap();
    assert_eq!(g[0].data(), &[1.0, 1.0, 1.0]);
    assert_eq!(g[1], Tensor::zeros(vec![2, 2]));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = tape.scale(p, 2.0).unwrap();
    assert!(matches!(gradient(&tape, y, &[p]), Err(Error::InvalidInput(_))));
}

#[test]
fn non_finite_forward_names_node() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::from_vec(vec![1.0, -1.0]));
    let err = tape.sqrt(p).unwrap_err();
    assert!(matches!(err, Error::NonFinite { node: 1, op: "sqrt" }), "{err}");
    assert_eq!(tape.len(), 1);
}

#[test]
fn shape_mismatch_rejected() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(vec![2, 3]));
    let b = tape.param(Tensor::zeros(vec![3, 2]));
    assert!(matches!(tape.add(a, b), Err(Error::DimensionMismatch { .. })));
    assert!(tape.matmul(a, a).is_err());
    assert!(tape.complex_matmul(a, b, false).is_err());
}

#[test]
fn not_positive_definite_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, 1, 2], vec![-1.0, 0.0]).unwrap());
    let b = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(tape.hermitian_solve(a, b), Err(Error::NotPositiveDefinite)));
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::scalar(3.0));
    let d = tape.detach(p);
    let y = tape.mul(p, d).unwrap();
    let g = gradient(&tape, y, &[p]).unwrap();
    assert_eq!(g[0].item(), 3.0);
}

#[test]
fn replay_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random(&mut rng, vec![2, 3, 3, 2], -1.0, 1.0);
        let b = random(&mut rng, vec![2, 3, 1, 2], -1.0, 1.0);
        let mut tape = Tape::new();
        let (mv, bv) = (tape.param(m), tape.param(b));
        let a = spd(&mut tape, mv, 3, 2).unwrap();
        let x = tape.hermitian_solve(a, bv).unwrap();
        let l = project(&mut tape, x, 1).unwrap();
        let g = gradient(&tape, l, &[mv, bv]).unwrap();
        (tape.value(l).item(), g)
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut params = vec![Tensor::from_vec(vec![1.0, -2.0])];
    let before = params.clone();
    let mut state = AdamState::new(&params);
    let grads = vec![Tensor::zeros(vec![2])];
    for _ in 0..3 {
        adam_step(&mut params, &grads, &mut state, &AdamConfig::new(0.1)).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn adam_first_step_by_hand() {
    let mut params = vec![Tensor::scalar(1.0)];
    let mut state = AdamState::new(&params);
    let g = 0.5;
    adam_step(&mut params, &[Tensor::scalar(g)], &mut state, &AdamConfig::new(0.01)).unwrap();
    // m = 0.1 g, v = 0.001 g^2; bias correction restores g and g^2
    let expected = 1.0 - 0.01 * g / (g + 1e-8);
    assert!((params[0].item() - expected).abs() < 1e-15);
    assert_eq!(state.steps(), 1);
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut params = vec![Tensor::from_vec(vec![0.3, -0.7, 1.1])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::new(0.05);
        let mut trace = Vec::new();
        for _ in 0..20 {
            let grads: Vec<Tensor> = params
                .iter()
                .map(|p| Tensor::from_vec(p.data().iter().map(|x| 2.0 * x - x.sin()).collect()))
                .collect();
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            trace.push(params[0].clone());
        }
        trace
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut params = vec![Tensor::from_vec(vec![1.0, 2.0])];
    let mut state = AdamState::new(&params);
    let grads = vec![Tensor::from_vec(vec![1.0])];
    assert!(adam_step(&mut params, &grads, &mut state, &AdamConfig::new(0.1)).is_err());
}
