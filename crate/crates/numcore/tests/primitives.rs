use numcore::gradcheck::{finite_difference, relative_error};
use numcore::{Conv1dGeometry, Primitive, Reduce, RngStream, Tape, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n)).unwrap()
}

/// Scalar objective `Σ y ⊙ c` for a fixed random weighting `c`, so every
/// output element contributes a distinct amount.
fn weighted_sum(t: &mut Tape, y: Var, c: &Tensor) -> Var {
    let c = t.constant(c.clone());
    let p = t.mul(y, c).unwrap();
    t.sum(p, Reduce::All)
}

/// Checks the tape gradient of every input against central differences.
fn check(prim: Primitive, inputs: Vec<Tensor>, rng: &mut RngStream) {
    let out_shape = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let y = t.forward_primitive(prim, &vs).unwrap();
        t.value(y).shape().to_vec()
    };
    let weights = rand_tensor(rng, &out_shape);
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = t.forward_primitive(prim, &vs).unwrap();
        let l = weighted_sum(&mut t, y, &weights);
        t.value(l).item()
    };
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let y = t.forward_primitive(prim, &vs).unwrap();
    let l = weighted_sum(&mut t, y, &weights);
    let g = t.backward(l).unwrap();
    for (i, v) in vs.iter().enumerate() {
        let fd = finite_difference(
            |x| {
                let mut xs = inputs.clone();
                xs[i] = x.clone();
                eval(&xs)
            },
            &inputs[i],
            H,
        );
        let err = relative_error(g.wrt(*v).unwrap(), &fd, 1e-8);
        assert!(err <= TOL, "{prim:?} input {i}: relative error {err}");
    }
}

#[test]
fn every_primitive_matches_finite_differences_on_100_draws() {
    let mut rng = RngStream::new(2024);
    for _ in 0..100 {
        let (m, k, n) = (1 + rng.index(4), 1 + rng.index(4), 1 + rng.index(4));
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        check(Primitive::MatMul, vec![a.clone(), b], &mut rng);

        let same = rand_tensor(&mut rng, &[m, k]);
        let row = rand_tensor(&mut rng, &[k]);
        let col = rand_tensor(&mut rng, &[m, 1]);
        let s = rand_tensor(&mut rng, &[]);
        for other in [&same, &row, &col, &s] {
            check(Primitive::Add, vec![a.clone(), other.clone()], &mut rng);
            check(Primitive::Mul, vec![a.clone(), other.clone()], &mut rng);
        }

        let geom = Conv1dGeometry { length: 7 + rng.index(4), in_channels: 2, kernel: 3, stride: 1 + rng.index(2) };
        let x = rand_tensor(&mut rng, &[2, geom.length * geom.in_channels]);
        let w = rand_tensor(&mut rng, &[geom.patch_len(), 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        check(Primitive::Conv1d(geom), vec![x, w, bias], &mut rng);

        // Keep relu inputs away from the kink where differences are undefined.
        let r = rand_tensor(&mut rng, &[m, k]).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
        check(Primitive::Relu, vec![r], &mut rng);
        check(Primitive::Tanh, vec![a.clone()], &mut rng);
        check(Primitive::Exp, vec![a.clone()], &mut rng);
        check(Primitive::Log, vec![a.map(|v| v.abs() + 0.5)], &mut rng);
        check(Primitive::Softplus, vec![a.clone()], &mut rng);
        for red in [Reduce::All, Reduce::Last] {
            check(Primitive::Sum(red), vec![a.clone()], &mut rng);
            check(Primitive::Mean(red), vec![a.clone()], &mut rng);
        }
        check(Primitive::L2Norm, vec![a.map(|v| v + 0.1)], &mut rng);
        check(Primitive::Concat, vec![a.clone(), same.clone(), rand_tensor(&mut rng, &[m, 2])], &mut rng);
        let start = rng.index(k);
        check(Primitive::Slice { start, end: k }, vec![a.clone()], &mut rng);
    }
}

#[test]
fn small_worked_examples() {
    let mut t = Tape::new();
    let i = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let y = t.matmul(i, v).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 4.0]);
    assert_eq!(t.value(y).shape(), &[2, 1]);

    let r = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = t.relu(r);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);

    let n = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = t.l2norm(n);
    assert_eq!(t.value(y).item(), 5.0);
}

#[test]
fn derivative_of_square() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 6.0);
}

#[test]
fn stop_gradient_blocks_exactly() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = t.leaf(Tensor::vector(vec![0.5, -3.0]));
    let sx = t.stop_gradient(x);
    assert_eq!(t.value(sx).data(), &[1.0, 2.0]);
    let p = t.mul(sx, y).unwrap();
    let l = t.sum(p, Reduce::All);
    let g = t.backward(l).unwrap();
    assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(g.wrt(y).unwrap().data(), &[1.0, 2.0]);

    // sg(x)·x at x = 2: only the live factor contributes.
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.0));
    let s = t.stop_gradient(x);
    let l = t.mul(s, x).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 2.0);
}

#[test]
fn stop_gradient_freezes_entire_subgraph() {
    let mut rng = RngStream::new(5);
    let mut t = Tape::new();
    let a = t.leaf(rand_tensor(&mut rng, &[3, 4]));
    let w = t.leaf(rand_tensor(&mut rng, &[4, 4]));
    let h = t.matmul(a, w).unwrap();
    let h = t.tanh(h);
    let frozen = t.stop_gradient(h);
    let live = t.leaf(rand_tensor(&mut rng, &[3, 4]));
    let p = t.mul(frozen, live).unwrap();
    let e = t.exp(p);
    let l = t.mean(e, Reduce::All);
    let g = t.backward(l).unwrap();
    assert!(g.wrt(a).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(g.wrt(w).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(g.wrt(live).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn unreachable_leaves_get_zero_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let unused = t.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
    let l = t.sum(x, Reduce::All);
    let g = t.backward(l).unwrap();
    assert_eq!(g.wrt(unused).unwrap(), &Tensor::zeros(&[2, 2]));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(t.backward(x).is_err());
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let e = t.matmul(a, b).unwrap_err().to_string();
    assert!(e.contains("matmul") && e.contains("[2, 3]"), "{e}");
    let c = t.constant(Tensor::zeros(&[4]));
    let e = t.add(a, c).unwrap_err().to_string();
    assert!(e.contains("add"), "{e}");
}

#[test]
fn conv1d_matches_direct_loop() {
    let mut rng = RngStream::new(11);
    let geom = Conv1dGeometry { length: 9, in_channels: 3, kernel: 4, stride: 2 };
    let x = rand_tensor(&mut rng, &[2, 27]);
    let w = rand_tensor(&mut rng, &[12, 5]);
    let b = rand_tensor(&mut rng, &[5]);
    let mut t = Tape::new();
    let (vx, vw, vb) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv1d(vx, vw, vb, geom).unwrap();
    let lout = geom.out_length();
    assert_eq!(lout, 3);
    for bi in 0..2 {
        for to in 0..lout {
            for co in 0..5 {
                let mut acc = b.data()[co];
                for kk in 0..4 {
                    for ci in 0..3 {
                        let xi = x.data()[bi * 27 + (to * 2 + kk) * 3 + ci];
                        acc += xi * w.data()[(kk * 3 + ci) * 5 + co];
                    }
                }
                let got = t.value(y).data()[bi * lout * 5 + to * 5 + co];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn grad_tracking_does_not_change_values(data in prop::collection::vec(-3.0f64..3.0, 6)) {
        let x = Tensor::matrix(2, 3, data).unwrap();
        let run = |track: bool| {
            let mut t = Tape::new();
            let v = if track { t.leaf(x.clone()) } else { t.constant(x.clone()) };
            let a = t.tanh(v);
            let b = t.softplus(a);
            let n = t.l2norm(b);
            let s = t.mul(b, n).unwrap();
            t.value(s).clone()
        };
        prop_assert_eq!(run(true), run(false));
    }

    #[test]
    fn softplus_is_finite_and_positive(x in -800.0f64..800.0) {
        let mut t = Tape::new();
        let v = t.constant(Tensor::scalar(x));
        let y = t.softplus(v);
        let y = t.value(y).item();
        prop_assert!(y.is_finite() && y >= 0.0);
    }
}
