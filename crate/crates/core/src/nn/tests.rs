use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{Tape, Tensor};
use crate::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn layer_norm_of(rows: Vec<Vec<f64>>) -> Tensor<f64> {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", rows[0].len());
    let mut g = Graph::frozen(&store);
    let x = g.constant(Tensor::from_rows(&rows).unwrap());
    let y = ln.forward(&mut g, x).unwrap();
    g.value(y).clone()
}

#[test]
fn layer_norm_two_values() {
    let y = layer_norm_of(vec![vec![1.0, 3.0]]);
    assert!((y.data()[0] + 1.0).abs() < 1e-4);
    assert!((y.data()[1] - 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let y = layer_norm_of(vec![vec![4.5; 7]]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..16).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let y = layer_norm_of(rows);
    for r in 0..y.rows() {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn activations_at_zero() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::from_vec(vec![0.0, 0.0]).unwrap());
    let s = t.silu(z);
    let sg = t.sigmoid(z);
    let sm = t.softmax(z);
    assert_eq!(t.value(s).data(), &[0.0, 0.0]);
    assert_eq!(t.value(sg).data(), &[0.5, 0.5]);
    assert_eq!(t.value(sm).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::<f64>::new();
    let x = rand_tensor(&mut rng, &[20, 9]).map(|v| v * 30.0);
    let x = t.constant(x);
    let y = t.softmax(x);
    let y = t.value(y);
    for r in 0..20 {
        assert!(y.row(r).iter().all(|&p| p > 0.0 && p < 1.0));
        assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

/// Direct-sum reference for `[T, Cin]` input and `[Cout, Cin, k]` kernel.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, dilation: usize) -> Vec<f64> {
    let (t_len, cin) = (x.rows(), x.cols());
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let half = (k / 2) as isize;
    let mut out = vec![0.0; t_len * cout];
    for t in 0..t_len {
        for o in 0..cout {
            let mut acc = 0.0;
            for j in 0..k {
                let src = t as isize + (j as isize - half) * dilation as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                for c in 0..cin {
                    acc += w.data()[(o * cin + c) * k + j] * x.at(src as usize, c);
                }
            }
            out[t * cout + o] = acc;
        }
    }
    out
}

fn run_conv(x: &Tensor<f64>, w: Tensor<f64>, dilation: usize) -> Tensor<f64> {
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let wv = t.constant(w);
    let y = t.conv1d(xv, wv, None, dilation).unwrap();
    t.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[12, 1]);
    let w = Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(run_conv(&x, w, 1).data(), x.data());
}

#[test]
fn conv_impulse_taps_dilation_two() {
    let mut x = Tensor::zeros(&[11, 1]);
    x.data_mut()[5] = 1.0;
    let w = Tensor::new(vec![1, 1, 3], vec![1.0 / 3.0; 3]).unwrap();
    let y = run_conv(&x, w.clone(), 2);
    assert_eq!(y.data(), conv_oracle(&x, &w, 2).as_slice());
    let nonzero: Vec<isize> = (0..11).filter(|&t| y.data()[t] != 0.0).map(|t| t as isize - 5).collect();
    assert_eq!(nonzero, vec![-2, 0, 2]);
}

#[test]
fn conv_zero_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[9, 3]);
    let y = run_conv(&x, Tensor::zeros(&[2, 3, 5]), 3);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_oracle_and_preserves_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in [3, 5, 7, 9] {
        for d in 1..=8 {
            for t_len in [1, 5, 16, 33] {
                let x = rand_tensor(&mut rng, &[t_len, 2]);
                let w = rand_tensor(&mut rng, &[3, 2, k]);
                let y = run_conv(&x, w.clone(), d);
                assert_eq!(y.shape(), &[t_len, 3]);
                for (a, b) in y.data().iter().zip(conv_oracle(&x, &w, d)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_even_kernel_rejected() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        Conv1d::new(&mut store, "c", 2, 2, 4, 1, &mut rng),
        Err(Error::Config(_))
    ));
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[4, 1]));
    let w = t.constant(Tensor::zeros(&[1, 1, 2]));
    assert!(t.conv1d(x, w, None, 1).is_err());
}

#[test]
fn attention_single_position_is_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let attn = MultiHeadSelfAttention::new(&mut store, "sa", 8, 2, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[1, 8]);
    let mut g = Graph::frozen(&store);
    let xv = g.constant(x);
    let y = attn.forward(&mut g, xv, None).unwrap();
    let v = attn.v.forward(&mut g, xv).unwrap();
    let expect = attn.out.forward(&mut g, v).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(expect).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let attn = MultiHeadSelfAttention::new(&mut store, "sa", 8, 4, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[6, 8]);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut g = Graph::frozen(&store);
    let xv = g.constant(x.clone());
    let y = attn.forward(&mut g, xv, None).unwrap();
    let xp = g.gather_rows(xv, &perm).unwrap();
    let yp = attn.forward(&mut g, xp, None).unwrap();
    let (y, yp) = (g.value(y), g.value(yp));
    for (i, &src) in perm.iter().enumerate() {
        for (a, b) in yp.row(i).iter().zip(y.row(src)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    assert!(matches!(
        MultiHeadSelfAttention::new(&mut store, "sa", 10, 4, &mut rng),
        Err(Error::Config(_))
    ));
}

#[test]
fn sample_linear_cases() {
    let f = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 5.0], vec![4.0, -1.0]]).unwrap();
    assert_eq!(sample_linear(&f, 0.5), vec![2.0, 5.0]);
    assert_eq!(sample_linear(&f, 0.25), vec![1.0, 3.0]);
    assert_eq!(sample_linear(&f, 1.7), sample_linear(&f, 1.0));
    assert_eq!(sample_linear(&f, -0.3), vec![0.0, 1.0]);
    let single = Tensor::from_rows(&[vec![7.0]]).unwrap();
    assert_eq!(sample_linear(&single, 0.4), vec![7.0]);
}

fn deform(
    cfg: DeformAttnConfig,
    init: OffsetInit,
    seed: u64,
) -> (ParamStore<f64>, DeformableAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let da = DeformableAttention::new(&mut store, "ca", 8, cfg, init, &mut rng).unwrap();
    (store, da)
}

#[test]
fn deform_zero_offsets_samples_center() {
    let cfg = DeformAttnConfig {
        heads: 1,
        points: 1,
        levels: 1,
    };
    let (store, da) = deform(cfg, OffsetInit::Central { scale: 0.0 }, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let level = rand_tensor(&mut rng, &[9, 8]);
    let q = rand_tensor(&mut rng, &[1, 8]);
    let refs = Tensor::from_rows(&[vec![0.37, 0.2]]).unwrap();
    let mut g = Graph::frozen(&store);
    let lv = g.constant(level.clone());
    let qv = g.constant(q);
    let (y, pos) = da.forward(&mut g, qv, &refs, &[lv]).unwrap();
    assert_eq!(g.value(pos).data(), &[0.37]);
    let sampled = g.constant(Tensor::new(vec![1, 8], sample_linear(&level, 0.37)).unwrap());
    let v = da.value.forward(&mut g, sampled).unwrap();
    let expect = da.out.forward(&mut g, v).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(expect).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn deform_offset_arithmetic() {
    let cfg = DeformAttnConfig {
        heads: 1,
        points: 2,
        levels: 1,
    };
    let (mut store, da) = deform(cfg, OffsetInit::Central { scale: 1.0 }, 2);
    store.set(da.offsets.bias.unwrap(), Tensor::from_vec(vec![1.0, -1.0]).unwrap()).unwrap();
    let mut g = Graph::frozen(&store);
    let q = g.constant(Tensor::full(&[1, 8], 0.3));
    let refs = Tensor::from_rows(&[vec![0.5, 0.2]]).unwrap();
    let pos = da.sampling_positions(&mut g, q, &refs).unwrap();
    let p = g.value(pos).data();
    assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.4).abs() < 1e-15);
}

#[test]
fn deform_zero_weight_and_bias_sample_at_center_everywhere() {
    let cfg = DeformAttnConfig {
        heads: 4,
        points: 4,
        levels: 3,
    };
    let (store, da) = deform(cfg, OffsetInit::Central { scale: 0.0 }, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = rand_tensor(&mut rng, &[5, 8]);
    let refs = Tensor::from_rows(
        &(0..5)
            .map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.01..1.0)])
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let mut g = Graph::frozen(&store);
    let qv = g.constant(q);
    let pos = da.sampling_positions(&mut g, qv, &refs).unwrap();
    let pos = g.value(pos);
    for r in 0..5 {
        assert!(pos.row(r).iter().all(|&p| p == refs.at(r, 0)));
    }
}

#[test]
fn deform_rejects_nonpositive_width() {
    let cfg = DeformAttnConfig {
        heads: 2,
        points: 2,
        levels: 1,
    };
    let (store, da) = deform(cfg, OffsetInit::Adjacent, 4);
    let mut g = Graph::frozen(&store);
    let q = g.constant(Tensor::zeros(&[1, 8]));
    let refs = Tensor::from_rows(&[vec![0.5, 0.0]]).unwrap();
    assert!(matches!(
        da.sampling_positions(&mut g, q, &refs),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn adjacent_init_needs_even_points() {
    let cfg = DeformAttnConfig {
        heads: 2,
        points: 3,
        levels: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        OffsetInit::Adjacent.bias::<f64, _>(&cfg, &mut rng),
        Err(Error::Config(_))
    ));
}

#[test]
fn init_bias_ranges() {
    let cfg = DeformAttnConfig {
        heads: 3,
        points: 4,
        levels: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b: Tensor<f64> = OffsetInit::Adjacent.bias(&cfg, &mut rng).unwrap();
    for (i, &v) in b.data().iter().enumerate() {
        if i % 4 < 2 {
            assert!((-1.5..=-0.5).contains(&v));
        } else {
            assert!((0.5..=1.5).contains(&v));
        }
    }
    let b: Tensor<f64> = OffsetInit::Central { scale: 2.0 }.bias(&cfg, &mut rng).unwrap();
    assert!(b.data().iter().all(|v: &f64| v.abs() <= 2.0));
}

#[test]
fn position_encoding_shape_and_range() {
    let refs = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.9, 0.05]]).unwrap();
    let pe: Tensor<f64> = sine_position_encoding(&refs, 16).unwrap();
    assert_eq!(pe.shape(), &[2, 16]);
    assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    assert!(sine_position_encoding(&refs, 6).is_err());
}

#[test]
fn gradcheck_self_attention_with_positions() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let attn = MultiHeadSelfAttention::new(&mut store, "sa", 8, 2, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, &[4, 8]);
        let pos = rand_tensor(&mut rng, &[4, 8]);
        let r = rand_tensor(&mut rng, &[4, 8]);
        let report = check_param_gradients(&store, 1e-5, |g| {
            let xv = g.constant(x.clone());
            let pv = g.constant(pos.clone());
            let y = attn.forward(g, xv, Some(pv))?;
            let rv = g.constant(r.clone());
            let y = g.mul(y, rv)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }
}

#[test]
fn gradcheck_deformable_attention() {
    let cfg = DeformAttnConfig {
        heads: 2,
        points: 2,
        levels: 2,
    };
    for seed in 0..3 {
        let (mut store, da) = deform(cfg, OffsetInit::Adjacent, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        // non-zero offset weights so gradients reach the query path
        let w = rand_tensor(&mut rng, &[8, 8]).map(|v| 0.3 * v);
        store.set(da.offsets.weight, w).unwrap();
        let w = rand_tensor(&mut rng, &[8, 8]);
        store.set(da.weights.weight, w).unwrap();
        let levels = [rand_tensor(&mut rng, &[9, 8]), rand_tensor(&mut rng, &[5, 8])];
        let q = rand_tensor(&mut rng, &[3, 8]);
        let refs = Tensor::from_rows(&[vec![0.31, 0.2], vec![0.52, 0.33], vec![0.77, 0.15]]).unwrap();
        let r = rand_tensor(&mut rng, &[3, 8]);
        {
            // keep sampling positions away from interpolation kinks
            let mut g = Graph::frozen(&store);
            let qv = g.constant(q.clone());
            let pos = da.sampling_positions(&mut g, qv, &refs).unwrap();
            let pos = g.value(pos);
            for (j, &p) in pos.data().iter().enumerate() {
                let level = (j / cfg.points) % cfg.levels;
                let t = p * (levels[level].rows() - 1) as f64;
                assert!(p > 0.0 && p < 1.0 && (t - t.round()).abs() > 1e-3, "kink at {p}");
            }
        }
        let report = check_param_gradients(&store, 1e-5, |g| {
            let lv: Vec<_> = levels.iter().map(|l| g.constant(l.clone())).collect();
            let qv = g.constant(q.clone());
            let (y, _) = da.forward(g, qv, &refs, &lv)?;
            let rv = g.constant(r.clone());
            let y = g.mul(y, rv)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "seed {seed}: {report:?}");
    }
}
