use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use digit::analysis::{linear_cka, offset_statistics};
use digit::decoder::{positions, select_queries, SelectionMode};
use digit::encoder::{Encoder, EncoderConfig, EncoderVariant};
use digit::loss::{segment_giou, total_loss, LossConfig, Target};
use digit::matching::hungarian_match;
use digit::metrics::{average_precision, mean_ap, nms, temporal_iou, EvalConfig, GroundTruth, ScoredSegment};
use digit::model::{DigitModel, ModelConfig};
use digit::nn::{Graph, ParamStore};
use digit::synth::{generate_dataset, generate_video, prototypes, SynthConfig};
use digit::tensor::{Tape, Tensor};

fn segment() -> impl Strategy<Value = (f64, f64)> {
    (0.0..20.0f64, 0.2..6.0f64).prop_map(|(s, w)| (s, s + w))
}

fn detections(max: usize) -> impl Strategy<Value = Vec<ScoredSegment>> {
    prop::collection::vec((segment(), 0..2usize, 0..4u32, 0..2usize), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|((start, end), video, score, class)| ScoredSegment {
                video,
                start,
                end,
                class,
                score: f64::from(score) / 3.0,
            })
            .collect()
    })
}

fn ground_truth(max: usize) -> impl Strategy<Value = Vec<GroundTruth>> {
    prop::collection::vec((segment(), 0..2usize, 0..2usize), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|((start, end), video, class)| GroundTruth { video, start, end, class })
            .collect()
    })
}

fn matrix(seed: u64, rows: usize, cols: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matching_follows_query_permutation(
        seed in any::<u64>(),
        n in 1..5usize,
        extra in 0..3usize,
    ) {
        let m = n + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..5.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted: Vec<Vec<f64>> = cost.iter().map(|row| perm.iter().map(|&j| row[j]).collect()).collect();
        let a = hungarian_match(&cost, m).unwrap();
        let b = hungarian_match(&permuted, m).unwrap();
        prop_assert!((a.total_cost(&cost) - b.total_cost(&permuted)).abs() < 1e-9);
        for (&(ga, qa), &(gb, qb)) in a.pairs.iter().zip(&b.pairs) {
            prop_assert_eq!(ga, gb);
            prop_assert_eq!(qa, perm[qb]);
        }
        prop_assert_eq!(a.unmatched.len(), m - n);
    }

    #[test]
    fn average_precision_is_a_probability(dets in detections(10), gts in ground_truth(6), thr in 0.1..0.9f64) {
        let ap = average_precision(&dets, &gts, thr);
        prop_assert!((0.0..=1.0).contains(&ap), "AP {}", ap);
    }

    #[test]
    fn nms_keeps_a_separated_subset(dets in detections(14), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr);
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.video == b.video && a.class == b.class {
                    prop_assert!(temporal_iou((a.start, a.end), (b.start, b.end)).unwrap() <= thr);
                }
            }
        }
    }

    #[test]
    fn map_does_not_increase_with_threshold(dets in detections(12), gts in ground_truth(6)) {
        let cfg = EvalConfig { iou_thresholds: vec![0.1, 0.3, 0.5, 0.7, 0.9], ..EvalConfig::default() };
        let report = mean_ap(&dets, &gts, 2, &cfg);
        for pair in report.map.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12, "{:?}", report.map);
        }
    }

    #[test]
    fn giou_grows_with_overlap(w in 0.5..5.0f64, near in 0.0..6.0f64, gap in 0.01..4.0f64) {
        let a = (0.0, w);
        let close = segment_giou(a, (near, near + w)).unwrap();
        let far = segment_giou(a, (near + gap, near + gap + w)).unwrap();
        prop_assert!(close >= far);
        prop_assert!(close > -1.0 && close <= 1.0);
    }

    // logit gaps stay below ~36 so 1 - p remains representable in f64
    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1..6usize, cols in 1..9usize, scale in 0.1..15.0f64) {
        let mut tape = Tape::new();
        let x = tape.constant(matrix(seed, rows, cols).map(|v| v * scale));
        let y = tape.softmax(x);
        let out = tape.value(y);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 || cols == 1 && p == 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn dilated_conv_preserves_length(seed in any::<u64>(), t in 1..40usize, half in 1..4usize, dilation in 1..9usize) {
        let k = 2 * half + 1;
        let mut tape = Tape::new();
        let x = tape.constant(matrix(seed, t, 2));
        let w = tape.constant(matrix(seed ^ 1, 3, 2 * k).reshape(&[3, 2, k]).unwrap());
        let y = tape.conv1d(x, w, None, dilation).unwrap();
        prop_assert_eq!(tape.shape(y), &[t, 3]);
    }

    #[test]
    fn cka_is_bounded_and_symmetric(seed in any::<u64>(), n in 2..30usize, d1 in 1..8usize, d2 in 1..8usize) {
        let x = matrix(seed, n, d1);
        let y = matrix(seed ^ 7, n, d2);
        let xy = linear_cka(&x, &y).unwrap();
        let yx = linear_cka(&y, &x).unwrap();
        prop_assert!((0.0..=1.0).contains(&xy.value));
        prop_assert!((xy.value - yx.value).abs() <= 1e-12);
    }

    #[test]
    fn selection_ignores_input_order_among_ties(seed in any::<u64>(), t1 in 4..20usize, nq in 1..8usize) {
        let lengths = digit::decoder::level_lengths(t1, 3).unwrap();
        let pos = positions(&lengths);
        prop_assume!(nq <= pos.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // three distinct score values force many ties
        let scores: Vec<f64> = (0..pos.len()).map(|_| f64::from(rng.random_range(0..3u8))).collect();
        let mut perm: Vec<usize> = (0..pos.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let pos2: Vec<_> = perm.iter().map(|&i| pos[i]).collect();
        let scores2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        for mode in [SelectionMode::TopK, SelectionMode::UniformBins] {
            let key = |p: &[digit::decoder::Position], sel: Vec<usize>| {
                let mut k: Vec<(usize, usize)> = sel.into_iter().map(|i| (p[i].level, p[i].index)).collect();
                k.sort_unstable();
                k
            };
            let a = key(&pos, select_queries(&scores, &pos, nq, mode).unwrap());
            let b = key(&pos2, select_queries(&scores2, &pos2, nq, mode).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn synthetic_instances_are_disjoint(seed in any::<u64>(), index in 0..1000usize, max_instances in 1..6usize) {
        let cfg = SynthConfig { seed, max_instances, min_length: 48, max_length: 96, ..SynthConfig::default() };
        let protos = prototypes(&cfg);
        let (seq, ann) = generate_video(&cfg, &protos, index).unwrap();
        prop_assert_eq!(seq.video_id.clone(), ann.video_id.clone());
        prop_assert!((cfg.min_length..=cfg.max_length).contains(&seq.len()));
        let step = 1.0 / cfg.fps;
        let mut inst = ann.instances.clone();
        inst.sort_by(|a, b| a.start.total_cmp(&b.start));
        for a in &inst {
            prop_assert!(a.start >= 0.0 && a.start < a.end && a.end <= ann.duration + 1e-9);
            prop_assert!(a.class < cfg.num_classes);
        }
        for pair in inst.windows(2) {
            prop_assert!(pair[0].end + step <= pair[1].start + 1e-9, "{:?}", pair);
        }
    }

    #[test]
    fn encoder_is_translation_equivariant(seed in any::<u64>(), shift in 1..6usize) {
        let cfg = EncoderConfig { dim: 8, hidden: 12, num_dilations: 3, kernel_size: 3, layers: 2, variant: EncoderVariant::Mdge };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        let radius = cfg.receptive_radius();
        let t = 4 * radius + 10;
        let x = matrix(seed, t + shift, cfg.dim);
        let head = Tensor::new(vec![t, cfg.dim], x.data()[..t * cfg.dim].to_vec()).unwrap();
        let tail = Tensor::new(vec![t, cfg.dim], x.data()[shift * cfg.dim..].to_vec()).unwrap();
        let run = |input: Tensor<f64>| {
            let mut g = Graph::frozen(&store);
            let v = g.constant(input);
            let out = enc.forward(&mut g, v).unwrap();
            g.value(out).clone()
        };
        let (a, b) = (run(head), run(tail));
        for r in radius + shift..t - radius {
            for (p, q) in a.row(r).iter().zip(b.row(r - shift)) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_is_nonnegative(seed in any::<u64>(), n in 0..4usize) {
        let cfg = ModelConfig {
            input_dim: 3, dim: 8, hidden: 8, num_dilations: 2, kernel_size: 3,
            encoder_layers: 1, decoder_layers: 2, levels: 2, num_queries: 6,
            heads: 2, points: 2, num_classes: 3, ..ModelConfig::default()
        };
        let model = DigitModel::<f64>::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = matrix(seed, 20, 3);
        let targets: Vec<Target> = (0..n)
            .map(|_| {
                let s: f64 = rng.random_range(0.0..4.0);
                Target::from_seconds(s, s + rng.random_range(0.3..1.0), rng.random_range(0..3), 5.0)
            })
            .collect();
        let mut g = Graph::frozen(&model.params);
        let out = model.forward(&mut g, &x, None).unwrap();
        let loss = total_loss(&mut g, &out, &targets, 3, &LossConfig::default(), None).unwrap();
        let p = loss.parts;
        prop_assert!(p.total >= 0.0 && p.cls >= 0.0 && p.giou >= 0.0 && p.lr >= 0.0 && p.encoder >= 0.0);
        prop_assert!((g.value(loss.total).data()[0] - p.total).abs() <= 1e-9 * p.total.max(1.0));
    }
}

#[test]
fn noise_free_centers_match_their_prototype() {
    let cfg = SynthConfig { noise_sigma: 0.0, num_train: 40, num_eval: 0, ..SynthConfig::default() };
    let protos = prototypes(&cfg);
    let (train, _) = generate_dataset(&cfg).unwrap();
    let mut checked = 0;
    for (seq, ann) in train.features.iter().zip(&train.annotations.videos) {
        for a in &ann.instances {
            let center = ((a.start + a.end) * 0.5 * ann.fps) as usize;
            let f = seq.features.row(center);
            let nearest = (0..cfg.num_classes)
                .min_by(|&i, &j| {
                    let d = |c: usize| f.iter().zip(protos.row(c)).map(|(x, p)| (x - p).powi(2)).sum::<f32>();
                    d(i).total_cmp(&d(j))
                })
                .unwrap();
            assert_eq!(nearest, a.class, "{} at {}", ann.video_id, a.start);
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn offsets_at_init_lie_in_their_bands() {
    let (_, eval) = generate_dataset(&SynthConfig { num_train: 1, num_eval: 3, ..SynthConfig::default() }).unwrap();
    let model = DigitModel::<f32>::new(ModelConfig::default(), 2).unwrap();
    let report = offset_statistics(&model, &eval).unwrap();
    let cross_per_layer = 2;
    let att = model.config.decoder().attention;
    assert_eq!(report.stats.len(), model.config.decoder_layers * cross_per_layer * att.samples_per_query());
    for s in &report.stats {
        let (lo, hi) = s.init_band(report.points);
        assert!(s.min >= lo - 1e-12 && s.max <= hi + 1e-12, "{s:?} outside [{lo}, {hi}]");
        // W = 0: every query samples its point at the same relative offset
        assert!(s.std < 1e-9, "{s:?}");
    }
}
