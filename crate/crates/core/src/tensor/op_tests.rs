use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::sigmoid;
use super::*;

const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces an op output to a scalar through a fixed random projection.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let shape = tape.shape(out).to_vec();
    // coefficients bounded away from zero so no coordinate's gradient vanishes
    let mut r = rand_tensor(&mut rng, &shape, 0.5, 1.5);
    for v in r.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn check_op<G>(seeds: u64, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, op: G)
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = inputs(&mut rng);
        let report = finite_diff_check(
            |tape, vars| {
                let out = op(tape, vars)?;
                project(tape, out, seed)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_error <= TOL,
            "seed {seed}: rel err {} at {:?} (analytic {}, numeric {})",
            report.max_rel_error,
            report.worst,
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn add_componentwise() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]).unwrap());
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn incompatible_broadcast_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let msg = tape.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
}

#[test]
fn square_sum_gradient_matches_two_point_differences() {
    let x0 = [1.0, 2.0, 3.0];
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_vec(x0.to_vec()).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    let grad = tape.grad(x).unwrap().to_vec();
    // independent oracle: plain two-point central differences
    let f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let eps = 1e-6;
    for i in 0..3 {
        let mut hi = x0;
        let mut lo = x0;
        hi[i] += eps;
        lo[i] -= eps;
        let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
        assert!((fd - grad[i]).abs() < 1e-6);
    }
    assert_eq!(grad, vec![2.0, 4.0, 6.0]);
}

#[test]
fn scalar_identity_loss_has_unit_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(0.7));
    tape.backward(x).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0]);
}

#[test]
fn matvec_sum_gradient_is_broadcast_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w0 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let v0 = rand_tensor(&mut rng, &[4, 1], -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let w = tape.param(w0.clone());
    let v = tape.constant(v0.clone());
    let wv = tape.matmul(w, v).unwrap();
    let loss = tape.sum(wv);
    tape.backward(loss).unwrap();
    let g = tape.grad(w).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            assert!((g[i * 4 + j] - v0.data()[j]).abs() < 1e-15);
        }
    }
    let report = finite_diff_check(
        |t, vars| {
            let v = t.constant(v0.clone());
            let wv = t.matmul(vars[0], v)?;
            Ok(t.sum(wv))
        },
        &[w0],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8);
}

#[test]
fn silu_derivative_at_zero_is_half() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.silu(x);
    assert_eq!(tape.value(y).data(), &[0.0]);
    tape.backward(y).unwrap();
    assert!((tape.grad(x).unwrap()[0] - 0.5).abs() < 1e-15);
    let fd = |e: f64| (e * sigmoid(e) - (-e) * sigmoid(-e)) / (2.0 * e);
    assert!((fd(1e-6) - 0.5).abs() < 1e-9);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn empty_tape_backward_is_an_error() {
    let mut tape = Tape::<f64>::new();
    assert!(tape.backward(Var(0)).is_err());
}

#[test]
fn repeated_backward_accumulates_and_zero_grad_resets() {
    let build = |tape: &mut Tape<f64>| {
        let x = tape.param(Tensor::from_vec(vec![0.3, -1.2]).unwrap());
        let e = tape.exp(x);
        let l = tape.sum(e);
        (x, l)
    };
    let mut tape = Tape::new();
    let (x, l) = build(&mut tape);
    tape.backward(l).unwrap();
    let once = tape.grad(x).unwrap().to_vec();
    tape.backward(l).unwrap();
    let twice = tape.grad(x).unwrap().to_vec();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grad();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), once.as_slice());

    let mut fresh = Tape::new();
    let (x2, l2) = build(&mut fresh);
    fresh.backward(l2).unwrap();
    assert_eq!(fresh.grad(x2).unwrap(), once.as_slice());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::<f64>::new();
        let x = tape.param(rand_tensor(&mut rng, &[5, 6], -1.0, 1.0));
        let w = tape.param(rand_tensor(&mut rng, &[4, 6], -1.0, 1.0));
        let y = tape.linear(x, w, None).unwrap();
        let s = tape.softmax(y);
        let l = project(&mut tape, s, 3).unwrap();
        tape.backward(l).unwrap();
        (tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn gradcheck_of_square_is_tight() {
    let report = finite_diff_check(
        |t, v| Ok(t.unary(UnaryOp::Square, v[0])),
        &[Tensor::scalar(3.0)],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
    assert!((report.analytic - 6.0).abs() < 1e-12);
}

#[test]
fn gradcheck_reports_non_finite_coordinate() {
    let err = finite_diff_check(
        |t, v| {
            let l = t.ln(v[0]);
            Ok(t.sum(l))
        },
        &[Tensor::from_vec(vec![1.0, 1e-7]).unwrap()],
        1e-6,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { param: 0, coordinate: 1 }), "{err}");
}

#[test]
fn gradcheck_binary_broadcasts() {
    for (bshape, name) in [(vec![3, 4], "same"), (vec![4], "suffix"), (vec![3, 1], "prefix"), (vec![1], "scalar")] {
        let _ = name;
        let bs = bshape.clone();
        check_op(10, |r| vec![rand_tensor(r, &[3, 4], -2.0, 2.0), rand_tensor(r, &bs, 0.5, 2.0)], |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[1])?;
            let m = t.mul(s, v[1])?;
            let d = t.div(m, v[1])?;
            t.mul(d, v[1])
        });
    }
}

#[test]
fn gradcheck_general_broadcast() {
    check_op(10, |r| vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[3, 1], -1.0, 1.0)], |t, v| {
        t.mul(v[0], v[1])
    });
}

#[test]
fn gradcheck_unary_ops() {
    let smooth = [UnaryOp::Neg, UnaryOp::Exp, UnaryOp::Sigmoid, UnaryOp::Silu, UnaryOp::Square, UnaryOp::Tanh];
    for kind in smooth {
        check_op(10, |r| vec![rand_tensor(r, &[4, 3], -2.0, 2.0)], move |t, v| Ok(t.unary(kind, v[0])));
    }
    check_op(10, |r| vec![rand_tensor(r, &[4, 3], 0.2, 3.0)], |t, v| Ok(t.ln(v[0])));
    // kinked ops sampled away from zero
    for kind in [UnaryOp::Abs, UnaryOp::Relu] {
        check_op(
            10,
            |r| {
                let x = rand_tensor(r, &[4, 3], 0.1, 2.0);
                let signs = rand_tensor(r, &[4, 3], -1.0, 1.0);
                vec![Tensor::new(vec![4, 3], x.data().iter().zip(signs.data()).map(|(a, s)| a * s.signum()).collect()).unwrap()]
            },
            move |t, v| Ok(t.unary(kind, v[0])),
        );
    }
    check_op(10, |r| vec![rand_tensor(r, &[4, 3], -2.0, 2.0)], |t, v| Ok(t.affine(v[0], 1.7, -0.3)));
}

#[test]
fn gradcheck_matmul_linear_transpose() {
    check_op(10, |r| vec![rand_tensor(r, &[3, 5], -1.0, 1.0), rand_tensor(r, &[5, 2], -1.0, 1.0)], |t, v| {
        t.matmul(v[0], v[1])
    });
    check_op(
        10,
        |r| vec![rand_tensor(r, &[6, 5], -1.0, 1.0), rand_tensor(r, &[3, 5], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    );
    check_op(10, |r| vec![rand_tensor(r, &[3, 5], -1.0, 1.0)], |t, v| {
        let tr = t.transpose(v[0])?;
        t.reshape(tr, &[15])
    });
}

#[test]
fn gradcheck_reductions_softmax_layernorm() {
    check_op(10, |r| vec![rand_tensor(r, &[3, 5], -1.0, 1.0)], |t, v| {
        let s = t.sum(v[0]);
        let m = t.mean(v[0]);
        t.mul(s, m)
    });
    check_op(10, |r| vec![rand_tensor(r, &[4, 6], -3.0, 3.0)], |t, v| Ok(t.softmax(v[0])));
    check_op(
        10,
        |r| vec![rand_tensor(r, &[5, 6], -2.0, 2.0), rand_tensor(r, &[6], 0.5, 1.5), rand_tensor(r, &[6], -0.5, 0.5)],
        |t, v| t.layer_norm(v[0], v[1], v[2]),
    );
}

#[test]
fn gradcheck_conv1d_dilations() {
    for (k, dil) in [(1, 1), (3, 1), (3, 2), (5, 3), (3, 6)] {
        check_op(
            10,
            |r| vec![rand_tensor(r, &[9, 3], -1.0, 1.0), rand_tensor(r, &[2, 3, k], -1.0, 1.0), rand_tensor(r, &[2], -1.0, 1.0)],
            move |t, v| t.conv1d(v[0], v[1], Some(v[2]), dil),
        );
    }
}

#[test]
fn gradcheck_structural_ops() {
    check_op(10, |r| vec![rand_tensor(r, &[4, 6], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)], |t, v| {
        let a = t.slice_cols(v[0], 1, 3)?;
        let b = t.concat_cols(&[a, v[1], a])?;
        let c = t.concat_rows(&[b, b])?;
        t.gather_rows(c, &[0, 7, 3, 3])
    });
    for rows in [1, 4, 7] {
        check_op(10, move |r| vec![rand_tensor(r, &[rows, 3], -1.0, 1.0)], |t, v| t.avg_pool2(v[0]));
    }
    check_op(10, |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0)], |t, v| {
        t.row_affine(v[0], &[0.5, -2.0, 1.5], &[0.1, 0.2, 0.3])
    });
}

fn away_from_grid(p: f64, len: usize) -> bool {
    let t = p * (len - 1) as f64;
    (t - t.round()).abs() > 1e-3 && p > 1e-3 && p < 1.0 - 1e-3
}

#[test]
fn gradcheck_deform_aggregate() {
    let (heads, points, dim) = (2, 3, 4);
    let lens = [7usize, 4];
    let nq = 3;
    let per = heads * lens.len() * points;
    check_op(
        10,
        |r| {
            let mut pos = rand_tensor(r, &[nq, per], -0.1, 1.1);
            // keep positions off integer sampling coordinates (interpolation kinks)
            for q in 0..nq {
                for m in 0..heads {
                    for (l, &len) in lens.iter().enumerate() {
                        for k in 0..points {
                            let idx = q * per + (m * lens.len() + l) * points + k;
                            while !(away_from_grid(pos.data()[idx], len) || pos.data()[idx] < -0.01 || pos.data()[idx] > 1.01) {
                                pos.data_mut()[idx] = r.random_range(-0.1..1.1);
                            }
                        }
                    }
                }
            }
            vec![
                rand_tensor(r, &[lens[0], dim], -1.0, 1.0),
                rand_tensor(r, &[lens[1], dim], -1.0, 1.0),
                pos,
                rand_tensor(r, &[nq, per], 0.0, 1.0),
            ]
        },
        |t, v| t.deform_aggregate(&[v[0], v[1]], v[2], v[3], heads, points),
    );
}

#[test]
fn gradcheck_focal_and_segment_losses() {
    check_op(
        10,
        |r| vec![rand_tensor(r, &[4, 3], -4.0, 4.0)],
        |t, v| {
            let targets = Tensor::new(vec![4, 3], (0..12).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect())?;
            t.focal_loss(v[0], &targets, 0.25, 2.0)
        },
    );
    let target = Tensor::new(vec![3, 2], vec![0.3, 0.2, 0.6, 0.1, 0.5, 0.4]).unwrap();
    for kind in [SegmentLossKind::Giou, SegmentLossKind::LogRatio] {
        let tg = target.clone();
        check_op(
            10,
            |r| {
                let mut p = rand_tensor(r, &[3, 2], 0.05, 0.9);
                // nudge off the piecewise boundaries of min/max and |·|
                for v in p.data_mut().iter_mut() {
                    *v += 1e-3;
                }
                vec![p]
            },
            move |t, v| t.segment_loss(v[0], &tg, kind),
        );
    }
}

#[test]
fn gradcheck_reference_refinement() {
    let base = Tensor::new(vec![3, 2], vec![0.2, 0.1, 0.5, 0.3, 0.7, 0.05]).unwrap();
    check_op(10, |r| vec![rand_tensor(r, &[3, 2], -0.15, 0.15)], move |t, v| t.refine_refs(v[0], &base));
}

#[test]
fn refinement_clamps_to_valid_range() {
    let mut tape = Tape::<f64>::new();
    let delta = tape.constant(Tensor::new(vec![2, 2], vec![5.0, 10.0, -5.0, -50.0]).unwrap());
    let base = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
    let out = tape.refine_refs(delta, &base).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 1.0, 0.0, ops::MIN_WIDTH]);
}
