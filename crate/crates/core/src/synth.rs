//! Planted-action synthetic dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ActionInstance, AnnotationSet, FeatureSequence, Split, VideoAnnotation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of an instance, at each end, over which the envelope ramps.
pub const RAMP_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_eval: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Instance length bounds as fractions of the video length.
    pub min_action_fraction: f64,
    pub max_action_fraction: f64,
    pub noise_sigma: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_train: 200,
            num_eval: 50,
            num_classes: 3,
            feature_dim: 16,
            min_length: 64,
            max_length: 128,
            min_instances: 1,
            max_instances: 4,
            min_action_fraction: 0.05,
            max_action_fraction: 0.25,
            noise_sigma: 1.0,
            fps: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data.synth.{m}")));
        if self.num_train + self.num_eval == 0 {
            return bad("num_train + num_eval must be positive");
        }
        if self.num_classes == 0 || self.feature_dim == 0 {
            return bad("num_classes and feature_dim must be positive");
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return bad("length range must be nonempty and positive");
        }
        if self.min_instances > self.max_instances {
            return bad("instance range must be nonempty");
        }
        if !(self.min_action_fraction > 0.0 && self.min_action_fraction <= self.max_action_fraction && self.max_action_fraction <= 1.0) {
            return bad("action fractions must satisfy 0 < min <= max <= 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be nonnegative");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent stream for video `index` of the dataset seeded by `seed`.
pub fn video_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(1).wrapping_mul(0xd6e8_feb8_6659_fd93)))
}

/// Unit-RMS class directions, one row per class.
pub fn prototypes(cfg: &SynthConfig) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x5052_4f54_4f54_5950));
    let c = cfg.feature_dim;
    let mut data = Vec::with_capacity(cfg.num_classes * c);
    for _ in 0..cfg.num_classes {
        let row: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / c as f64).sqrt().max(1e-12);
        data.extend(row.iter().map(|v| (v / rms) as f32));
    }
    Tensor::new(vec![cfg.num_classes, c], data).expect("prototype shape")
}

/// Envelope of snippet `t` inside an instance covering snippets `[a, a + len)`.
pub fn envelope(t: usize, a: usize, len: usize) -> f64 {
    let u = (t as f64 + 0.5 - a as f64) / len as f64;
    (u / RAMP_FRACTION).min((1.0 - u) / RAMP_FRACTION).clamp(0.0, 1.0)
}

/// Picks instance `(first snippet, length, class)` triples without overlap.
fn place_instances(cfg: &SynthConfig, t0: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize, usize)>> {
    let n = rng.random_range(cfg.min_instances..=cfg.max_instances);
    if n == 0 {
        return Ok(Vec::new());
    }
    let lo = ((cfg.min_action_fraction * t0 as f64).round() as usize).max(1);
    let hi = ((cfg.max_action_fraction * t0 as f64).round() as usize).max(lo);
    // instances are separated by at least one background snippet
    if n * lo + (n - 1) > t0 {
        return Err(Error::Config(format!(
            "cannot pack {n} instances of at least {lo} snippets into {t0} snippets"
        )));
    }
    for _ in 0..1000 {
        let lens: Vec<usize> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
        let used: usize = lens.iter().sum::<usize>() + (n - 1);
        if used > t0 {
            continue;
        }
        let free = t0 - used;
        let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=free)).collect();
        cuts.sort_unstable();
        let mut out = Vec::with_capacity(n);
        let mut cursor = 0;
        let mut prev_cut = 0;
        for (i, (&len, &cut)) in lens.iter().zip(&cuts).enumerate() {
            cursor += cut - prev_cut + usize::from(i > 0);
            prev_cut = cut;
            out.push((cursor, len, rng.random_range(0..cfg.num_classes)));
            cursor += len;
        }
        return Ok(out);
    }
    Err(Error::Config(format!(
        "could not pack {n} instances into {t0} snippets after 1000 attempts"
    )))
}

pub fn generate_video(cfg: &SynthConfig, protos: &Tensor<f32>, index: usize) -> Result<(FeatureSequence, VideoAnnotation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, index as u64));
    let t0 = rng.random_range(cfg.min_length..=cfg.max_length);
    let c = cfg.feature_dim;
    let placed = place_instances(cfg, t0, &mut rng)?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut data: Vec<f32> = (0..t0 * c).map(|_| noise.sample(&mut rng) as f32).collect();
    let mut instances = Vec::with_capacity(placed.len());
    for &(a, len, class) in &placed {
        for t in a..a + len {
            let e = envelope(t, a, len) as f32;
            for (x, p) in data[t * c..(t + 1) * c].iter_mut().zip(protos.row(class)) {
                *x += p * e;
            }
        }
        instances.push(ActionInstance {
            start: a as f64 / cfg.fps,
            end: (a + len) as f64 / cfg.fps,
            class,
        });
    }
    let video_id = format!("video_{index:05}");
    let duration = t0 as f64 / cfg.fps;
    Ok((
        FeatureSequence {
            video_id: video_id.clone(),
            features: Tensor::new(vec![t0, c], data)?,
            fps: cfg.fps,
            duration,
        },
        VideoAnnotation {
            video_id,
            duration,
            fps: cfg.fps,
            instances,
        },
    ))
}

/// Train and eval splits; eval videos follow train videos in index order.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<(Split, Split)> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let make = |range: std::ops::Range<usize>| -> Result<Split> {
        let mut features = Vec::with_capacity(range.len());
        let mut videos = Vec::with_capacity(range.len());
        for i in range {
            let (f, a) = generate_video(cfg, &protos, i)?;
            features.push(f);
            videos.push(a);
        }
        Ok(Split {
            features,
            annotations: AnnotationSet {
                num_classes: cfg.num_classes,
                videos,
            },
        })
    };
    let train = make(0..cfg.num_train)?;
    let eval = make(cfg.num_train..cfg.num_train + cfg.num_eval)?;
    Ok((train, eval))
}
