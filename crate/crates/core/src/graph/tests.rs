use super::*;
use crate::gradcheck::{numerical_gradient, relative_error, STEP, TOLERANCE};
use crate::nn::GruParams;
use crate::rng::stream;
use proptest::prelude::*;
use rand::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = stream(seed, &[99]);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    t(shape, &data)
}

/// Checks `build` end to end: its output is contracted with fixed random
/// weights into a scalar, and every input gradient is compared with central
/// differences.
fn check_op<F>(inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.param(v.clone())).collect();
        let out = build(&mut g, &vars);
        let w = rand_t(g.shape(out), 7);
        let wv = g.constant(w.reshape(g.shape(out).to_vec()).unwrap());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).item().unwrap();
        let mut grads = vec![];
        if want_grads {
            g.backward(loss).unwrap();
            grads = vars
                .iter()
                .zip(vals)
                .map(|(&v, t)| {
                    g.grad(v)
                        .map(|gr| gr.data().to_vec())
                        .unwrap_or_else(|| vec![0.0; t.len()])
                })
                .collect();
        }
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    for (k, input) in inputs.iter().enumerate() {
        let numeric = numerical_gradient(
            |x| {
                let mut vals = inputs.to_vec();
                vals[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
                eval(&vals, false).0
            },
            input.data(),
            STEP,
        );
        for (a, n) in analytic[k].iter().zip(&numeric) {
            let e = relative_error(*a, *n);
            assert!(e <= TOLERANCE, "input {}: analytic {} numeric {} rel {}", k, a, n, e);
        }
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p).data(), [1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), [11.0]);

    let z = g.zeros(2, 3);
    let any = g.constant(rand_t(&[3, 2], 3));
    let p = g.matmul(z, any).unwrap();
    assert_eq!(g.value(p).shape(), [2, 2]);
    assert!(g.value(p).data().iter().all(|&v| v == 0.0));

    assert!(matches!(g.matmul(a, a), Err(Error::Dimension { .. })));
}

#[test]
fn activation_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), [0.0, 0.0, 2.0]);

    let zero = g.zeros(1, 2);
    let s = g.softmax(zero).unwrap();
    assert_eq!(g.value(s).data(), [0.5, 0.5]);
    let th = g.tanh(zero);
    assert_eq!(g.value(th).data(), [0.0, 0.0]);
    let sg = g.sigmoid(zero);
    assert_eq!(g.value(sg).data(), [0.5, 0.5]);

    let empty = g.zeros(2, 0);
    assert!(matches!(g.softmax(empty), Err(Error::Dimension { .. })));
}

#[test]
fn backward_of_square() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), [6.0]);
}

#[test]
fn backward_accumulates_until_reset() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.square(x);
    g.backward(y).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), [12.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[1, 2], &[1.0, 2.0]));
    let c = g.constant(t(&[1, 2], &[3.0, 4.0]));
    let y = g.mul(x, c).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), [3.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[1, 2], &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn mean_relu_linear_matches_finite_differences() {
    let w = rand_t(&[3, 4], 1);
    let x = rand_t(&[4, 2], 2);
    let eval = |wv: &[f64], grads: bool| {
        let mut g = Graph::<f64>::new();
        let wv = g.param(Tensor::new(vec![3, 4], wv.to_vec()).unwrap());
        let xv = g.constant(x.clone());
        let p = g.matmul(wv, xv).unwrap();
        let r = g.relu(p);
        let l = g.mean(r).unwrap();
        let val = g.value(l).item().unwrap();
        if grads {
            g.backward(l).unwrap();
            return (val, g.grad(wv).unwrap().data().to_vec());
        }
        (val, vec![])
    };
    let (_, analytic) = eval(w.data(), true);
    let numeric = numerical_gradient(|v| eval(v, false).0, w.data(), STEP);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(relative_error(*a, *n) <= TOLERANCE, "{} vs {}", a, n);
    }
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let a = rand_t(&[3, 4], 11);
    let b = rand_t(&[3, 4], 12);
    let w = rand_t(&[4, 5], 13);
    let bias = rand_t(&[5], 14);
    let col = rand_t(&[3, 1], 15);
    let pos = t(&[2, 2], &[0.5, 1.5, 2.0, 0.25]);

    check_op(&[a.clone(), w.clone()], |g, v| g.matmul(v[0], v[1]).unwrap());
    check_op(&[a.clone(), w.clone(), bias], |g, v| g.affine(v[0], v[1], v[2]).unwrap());
    check_op(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    check_op(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check_op(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    check_op(&[a.clone(), col], |g, v| g.mul_col(v[0], v[1]).unwrap());
    check_op(std::slice::from_ref(&a), |g, v| g.scale(v[0], -2.5));
    check_op(std::slice::from_ref(&a), |g, v| g.add_scalar(v[0], 0.75));
    check_op(std::slice::from_ref(&a), |g, v| g.relu(v[0]));
    check_op(std::slice::from_ref(&a), |g, v| g.tanh(v[0]));
    check_op(std::slice::from_ref(&a), |g, v| g.sigmoid(v[0]));
    check_op(std::slice::from_ref(&a), |g, v| g.exp(v[0]));
    check_op(std::slice::from_ref(&a), |g, v| g.square(v[0]));
    check_op(&[pos], |g, v| g.sqrt(v[0]));
    check_op(std::slice::from_ref(&a), |g, v| g.softmax(v[0]).unwrap());
    check_op(&[a.clone(), b.clone()], |g, v| g.concat(&[v[0], v[1], v[0]]).unwrap());
    check_op(std::slice::from_ref(&a), |g, v| g.slice_cols(v[0], 1, 3).unwrap());
    check_op(std::slice::from_ref(&a), |g, v| g.row_sum(v[0]).unwrap());
    check_op(std::slice::from_ref(&a), |g, v| g.sum(v[0]));
    check_op(std::slice::from_ref(&a), |g, v| g.mean(v[0]).unwrap());
    check_op(std::slice::from_ref(&a), |g, v| g.tile(v[0], 3).unwrap());
    check_op(&[rand_t(&[6, 2], 16)], |g, v| g.unstack(v[0], 3).unwrap());
    check_op(&[a], |g, v| g.row_min(v[0]).unwrap().0);
}

#[test]
fn gru_gradients_match_finite_differences() {
    let (b, d, h) = (2, 3, 4);
    let p = GruParams::<f64>::init(d, h, &mut stream(5, &[]));
    let mut inputs = vec![rand_t(&[b, d], 21), rand_t(&[b, h], 22)];
    inputs.extend([p.w_z, p.w_r, p.w_n, p.u_z, p.u_r, p.u_n]);
    inputs.extend([rand_t(&[h], 23), rand_t(&[h], 24), rand_t(&[h], 25)]);
    check_op(&inputs, |g, v| {
        let vars = GruVars {
            w_z: v[2],
            w_r: v[3],
            w_n: v[4],
            u_z: v[5],
            u_r: v[6],
            u_n: v[7],
            b_z: v[8],
            b_r: v[9],
            b_n: v[10],
        };
        let h1 = g.gru_cell(v[0], v[1], &vars).unwrap();
        // Second step exercises gradient flow through the hidden state.
        g.gru_cell(v[0], h1, &vars).unwrap()
    });
}

#[test]
fn gru_zero_params_halves_hidden() {
    let mut g = Graph::<f64>::new();
    let p = GruParams::<f64>::zeros(2, 3).bind(&mut g);
    let x = g.constant(rand_t(&[2, 2], 1));
    let h = g.constant(t(&[2, 3], &[0.4, -0.2, 0.9, 1.0, 0.0, -0.6]));
    let out = g.gru_cell(x, h, &p).unwrap();
    assert_eq!(g.value(out).data(), [0.2, -0.1, 0.45, 0.5, 0.0, -0.3]);

    let x0 = g.zeros(1, 2);
    let h0 = g.zeros(1, 3);
    let out = g.gru_cell(x0, h0, &p).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_scalar_hand_evaluation() {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (wz, wr, wn, uz, ur, un, bz, br, bn) = (0.5, -0.3, 0.8, 0.2, 0.7, -0.4, 0.1, -0.2, 0.05);
    let (x, h) = (1.2, -0.6);
    let z = sig(wz * x + uz * h + bz);
    let r = sig(wr * x + ur * h + br);
    let cand = (wn * x + un * (r * h) + bn).tanh();
    let expected = (1.0 - z) * h + z * cand;

    let s = |v: f64| t(&[1, 1], &[v]);
    let p = GruParams {
        w_z: s(wz),
        w_r: s(wr),
        w_n: s(wn),
        u_z: s(uz),
        u_r: s(ur),
        u_n: s(un),
        b_z: t(&[1], &[bz]),
        b_r: t(&[1], &[br]),
        b_n: t(&[1], &[bn]),
    };
    let mut g = Graph::<f64>::new();
    let pv = p.bind(&mut g);
    let xv = g.constant(s(x));
    let hv = g.constant(s(h));
    let out = g.gru_cell(xv, hv, &pv).unwrap();
    assert!((g.value(out).data()[0] - expected).abs() < 1e-15);
}

#[test]
fn gru_rejects_bad_shapes() {
    let mut g = Graph::<f64>::new();
    let p = GruParams::<f64>::zeros(2, 3).bind(&mut g);
    let x = g.zeros(1, 4);
    let h = g.zeros(1, 3);
    assert!(matches!(g.gru_cell(x, h, &p), Err(Error::Dimension { .. })));
}

#[test]
fn row_min_ties_pick_lowest_index() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2, 3], &[2.0, 1.0, 1.0, 0.5, 0.5, 0.5]));
    let (m, idx) = g.row_min(x).unwrap();
    assert_eq!(idx, vec![1, 0]);
    let l = g.sum(m);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), [0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn tile_and_unstack_layouts() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 1], &[1.0, 2.0]));
    let tiled = g.tile(x, 3).unwrap();
    assert_eq!(g.value(tiled).data(), [1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    let y = g.constant(t(&[4, 1], &[10.0, 11.0, 20.0, 21.0]));
    let u = g.unstack(y, 2).unwrap();
    assert_eq!(g.value(u).shape(), [2, 2]);
    assert_eq!(g.value(u).data(), [10.0, 20.0, 11.0, 21.0]);
}

#[test]
fn injected_fault_breaks_tanh_gradient() {
    let build = |fault: Option<Fault>| {
        let mut g = Graph::<f64>::new();
        g.inject_fault(fault);
        let x = g.param(t(&[1, 1], &[0.3]));
        let y = g.tanh(x);
        let l = g.sum(y);
        g.backward(l).unwrap();
        g.grad(x).unwrap().data()[0]
    };
    let exact = 1.0 - 0.3f64.tanh().powi(2);
    assert!((build(None) - exact).abs() < 1e-15);
    assert!(relative_error(build(Some(Fault::TanhSlope)), exact) > 5e-3);
}

#[test]
fn branch_pattern_tracks_rectifiers_and_minima() {
    let pattern = |shift: f64| {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![-1.0 + shift, 0.5, 2.0]).unwrap());
        let r = g.relu(x);
        g.row_min(r).unwrap();
        g.branch_pattern()
    };
    assert_eq!(pattern(0.0), vec![0, 1, 1, 0]);
    assert_eq!(pattern(0.9), pattern(0.0));
    assert_eq!(pattern(1.2), vec![1, 1, 1, 0]);
    assert_eq!(pattern(1.6), vec![1, 1, 1, 1]);
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let p = GruParams::<f32>::init(3, 4, &mut stream(9, &[])).bind(&mut g);
        let x = g.constant(rand_t(&[5, 3], 4).cast());
        let h0 = g.zeros(5, 4);
        let h1 = g.gru_cell(x, h0, &p).unwrap();
        let h2 = g.gru_cell(x, h1, &p).unwrap();
        let l = g.mean(h2).unwrap();
        g.backward(l).unwrap();
        (g.value(h2).clone(), g.grad(p.u_n).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&ga), bits(&gb));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[rows, cols], &vals[..rows * cols]));
        let s = g.softmax(x).unwrap();
        for r in g.value(s).data().chunks(cols) {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn gru_output_stays_in_open_unit_interval(seed in 0u64..500, scale in 0.1f64..5.0) {
        let mut g = Graph::<f64>::new();
        let mut p = GruParams::<f64>::init(3, 4, &mut stream(seed, &[]));
        for w in [&mut p.w_z, &mut p.w_n, &mut p.u_n] {
            w.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let pv = p.bind(&mut g);
        let x = g.constant(rand_t(&[3, 3], seed).cast::<f64>());
        let h: Vec<f64> = rand_t(&[3, 4], seed + 1).data().iter().map(|v| v * 0.999).collect();
        let h = g.constant(t(&[3, 4], &h));
        let out = g.gru_cell(x, h, &pv).unwrap();
        prop_assert!(g.value(out).data().iter().all(|v| v.abs() < 1.0));
    }
}
