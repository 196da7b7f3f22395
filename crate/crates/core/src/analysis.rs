//! Representation diagnostics: level CKA, cosine similarity, sampling offsets.

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::decoder::SublayerKind;
use crate::error::{Error, Result};
use crate::model::DigitModel;
use crate::nn::{sample_linear, Graph};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cka {
    pub value: f64,
    /// Set when either input has zero variance; `value` is then 0.
    pub degenerate: bool,
}

fn centered(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    x.clone().map_rows(|row| {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    })
}

trait MapRows {
    fn map_rows(self, f: impl Fn(&mut [f64])) -> Self;
}

impl MapRows for Tensor<f64> {
    fn map_rows(mut self, f: impl Fn(&mut [f64])) -> Self {
        let d = self.cols();
        for row in self.data_mut().chunks_exact_mut(d) {
            f(row);
        }
        self
    }
}

fn frob_sq(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// Linear CKA between `x: [n, d₁]` and `y: [n, d₂]`, columns centered internally.
pub fn linear_cka(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<Cka> {
    if x.ndim() != 2 || y.ndim() != 2 || x.rows() != y.rows() {
        return Err(Error::ShapeMismatch {
            op: "linear_cka",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::InvalidArgument("linear_cka needs at least two rows".into()));
    }
    let (xc, yc) = (centered(x), centered(y));
    let (xt, yt) = (xc.transpose()?, yc.transpose()?);
    let cross = frob_sq(&yt.matmul(&xc)?);
    let xx = frob_sq(&xt.matmul(&xc)?).sqrt();
    let yy = frob_sq(&yt.matmul(&yc)?).sqrt();
    let denom = xx * yy;
    if !(denom > 0.0) || !denom.is_finite() {
        return Ok(Cka {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cka {
        value: (cross / denom).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Cosine similarity between rows of `z: [T, D]`; zero rows give 0 entries.
pub fn cosine_similarity_matrix(z: &Tensor<f64>) -> Tensor<f64> {
    let t = z.rows();
    let norms: Vec<f64> = (0..t).map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut out = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum();
            out.data_mut()[i * t + j] = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
        }
    }
    out
}

/// Linear-interpolation resampling of `[T, D]` rows to `[len, D]`.
pub fn resample(x: &Tensor<f64>, len: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(len * x.cols());
    for i in 0..len {
        let p = if len == 1 { 0.0 } else { i as f64 / (len - 1) as f64 };
        data.extend(sample_linear(x, p));
    }
    Tensor::new(vec![len, x.cols()], data).expect("resample shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreEncoder,
    PostEncoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub kind: String,
    pub stage: Option<Stage>,
    pub video: Option<String>,
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub degenerate: bool,
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.matrix) {
            s.push_str(l);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn to_f64(t: &Tensor<f32>) -> Tensor<f64> {
    t.cast()
}

/// Adapter levels for one video, each resampled to the finest length.
fn video_levels(model: &DigitModel<f32>, features: &Tensor<f32>, stage: Stage) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::frozen(&model.params);
    let out = model.forward(&mut g, features, None)?;
    let levels = match stage {
        Stage::PostEncoder => out.multiscale.levels.clone(),
        Stage::PreEncoder => model.adapter.forward(&mut g, out.embedded)?.levels,
    };
    let t1 = out.multiscale.lengths[0];
    Ok(levels.iter().map(|&v| resample(&to_f64(g.value(v)), t1)).collect())
}

/// Pairwise CKA between adapter levels, rows pooled over every video of `split`.
pub fn level_cka_report(model: &DigitModel<f32>, split: &Split, stage: Stage) -> Result<SimilarityReport> {
    let l = model.config.levels;
    let mut stacked: Vec<Vec<f64>> = vec![Vec::new(); l];
    let mut rows = 0;
    for seq in &split.features {
        let levels = video_levels(model, &seq.features, stage)?;
        rows += levels[0].rows();
        for (acc, lv) in stacked.iter_mut().zip(&levels) {
            acc.extend_from_slice(lv.data());
        }
    }
    let d = model.config.dim;
    let mats = stacked
        .into_iter()
        .map(|data| Tensor::new(vec![rows, d], data))
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = vec![vec![0.0; l]; l];
    let mut degenerate = false;
    for i in 0..l {
        for j in i..l {
            let c = if i == j { Cka { value: 1.0, degenerate: false } } else { linear_cka(&mats[i], &mats[j])? };
            degenerate |= c.degenerate;
            matrix[i][j] = c.value;
            matrix[j][i] = c.value;
        }
    }
    Ok(SimilarityReport {
        kind: "cka".into(),
        stage: Some(stage),
        video: None,
        labels: (1..=l).map(|i| format!("level{i}")).collect(),
        matrix,
        degenerate,
    })
}

/// Mean CKA between consecutive adapter levels.
pub fn adjacent_level_cka(report: &SimilarityReport) -> f64 {
    let l = report.matrix.len();
    if l < 2 {
        return 1.0;
    }
    (0..l - 1).map(|i| report.matrix[i][i + 1]).sum::<f64>() / (l - 1) as f64
}

/// `T × T` cosine similarity of one video's encoder output.
pub fn cosine_report(model: &DigitModel<f32>, split: &Split, video: usize) -> Result<SimilarityReport> {
    let seq = split
        .features
        .get(video)
        .ok_or_else(|| Error::InvalidArgument(format!("video index {video} out of range ({} videos)", split.len())))?;
    let mut g = Graph::frozen(&model.params);
    let out = model.forward(&mut g, &seq.features, None)?;
    let m = cosine_similarity_matrix(&to_f64(g.value(out.encoded)));
    let t = m.rows();
    Ok(SimilarityReport {
        kind: "cosine".into(),
        stage: Some(Stage::PostEncoder),
        video: Some(seq.video_id.clone()),
        labels: (0..t).map(|i| format!("t{i}")).collect(),
        matrix: (0..t).map(|i| m.row(i).to_vec()).collect(),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetStat {
    pub layer: usize,
    /// Position of the cross-attention sublayer within the decoder layer.
    pub sublayer: usize,
    pub kind: String,
    /// Initial central scale for `cca`; `None` for `aca`.
    pub scale: Option<f64>,
    pub head: usize,
    pub level: usize,
    pub point: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl OffsetStat {
    /// Band the point was initialized in, as `(lo, hi)` in reference units.
    pub fn init_band(&self, points: usize) -> (f64, f64) {
        match self.scale {
            Some(s) => (-0.5 * s, 0.5 * s),
            None if self.point < points / 2 => (-0.75, -0.25),
            None => (0.25, 0.75),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetReport {
    pub points: usize,
    pub stats: Vec<OffsetStat>,
}

impl OffsetReport {
    pub const CSV_HEADER: &'static str = "layer,sublayer,kind,head,level,point,mean,std,min,max,count";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for o in &self.stats {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                o.layer, o.sublayer, o.kind, o.head, o.level, o.point, o.mean, o.std, o.min, o.max, o.count
            ));
        }
        s
    }
}

/// Statistics of `(p − c)/d` per decoder layer, cross-attention and `(head, level, point)`.
pub fn offset_statistics(model: &DigitModel<f32>, split: &Split) -> Result<OffsetReport> {
    let att = model.config.decoder().attention;
    let (m, l, k) = (att.heads, att.levels, att.points);
    let per = m * l * k;
    // (layer, cross index) -> per-sample accumulators
    let mut acc: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut keys: Vec<(usize, usize, SublayerKind)> = Vec::new();
    // f64 keeps `(p − c)/d` free of the cancellation f32 shows for narrow references
    let model = model.cast::<f64>();
    for seq in &split.features {
        let mut g = Graph::frozen(&model.params);
        let out = model.forward(&mut g, &seq.features.cast(), None)?;
        let mut slot = 0;
        for (li, layer) in out.layers.iter().enumerate() {
            let subs: Vec<usize> = model.decoder.layers[li]
                .sublayers
                .iter()
                .enumerate()
                .filter(|(_, s)| s.cross_attention().is_some())
                .map(|(i, _)| i)
                .collect();
            for (ci, (kind, pos)) in layer.samples.iter().enumerate() {
                if slot == acc.len() {
                    acc.push(vec![Vec::new(); per]);
                    keys.push((li, subs[ci], *kind));
                }
                let p = g.value(*pos);
                for q in 0..p.rows() {
                    let (c, d) = (layer.refs_in.at(q, 0), layer.refs_in.at(q, 1));
                    for (j, &v) in p.row(q).iter().enumerate() {
                        acc[slot][j].push((v - c) / d);
                    }
                }
                slot += 1;
            }
        }
    }
    let mut stats = Vec::new();
    for ((layer, sublayer, kind), samples) in keys.into_iter().zip(acc) {
        for (j, xs) in samples.into_iter().enumerate() {
            let n = xs.len().max(1) as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let (kind_name, scale) = match kind {
                SublayerKind::Central(s) => ("cca", Some(s)),
                _ => ("aca", None),
            };
            stats.push(OffsetStat {
                layer,
                sublayer,
                kind: kind_name.into(),
                scale,
                head: j / (l * k),
                level: (j / k) % l,
                point: j % k,
                mean,
                std: var.sqrt(),
                min: xs.iter().copied().fold(f64::INFINITY, f64::min),
                max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                count: xs.len(),
            });
        }
    }
    Ok(OffsetReport { points: k, stats })
}
