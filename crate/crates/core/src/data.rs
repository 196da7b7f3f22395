//! Feature sequences, annotations and their on-disk formats.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Target;
use crate::tensor::Tensor;

const FEATURE_MAGIC: &[u8; 4] = b"DGTF";
const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 4 + 4 + 4 + 4 + 8 + 8;

/// One video's snippet features `[T₀, C]` plus timing.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub features: Tensor<f32>,
    pub fps: f64,
    pub duration: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.numel() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub duration: f64,
    pub fps: f64,
    pub instances: Vec<ActionInstance>,
}

impl VideoAnnotation {
    pub fn targets(&self) -> Vec<Target> {
        self.instances
            .iter()
            .map(|a| Target::from_seconds(a.start, a.end, a.class, self.duration))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub num_classes: usize,
    pub videos: Vec<VideoAnnotation>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Format("num_classes: must be positive".into()));
        }
        for (v, video) in self.videos.iter().enumerate() {
            if video.video_id.is_empty() {
                return Err(Error::Format(format!("videos[{v}].video_id: must not be empty")));
            }
            if !(video.duration > 0.0 && video.duration.is_finite()) {
                return Err(Error::Format(format!("videos[{v}].duration: must be positive")));
            }
            if !(video.fps > 0.0 && video.fps.is_finite()) {
                return Err(Error::Format(format!("videos[{v}].fps: must be positive")));
            }
            for (i, a) in video.instances.iter().enumerate() {
                let at = format!("videos[{v}].instances[{i}]");
                if !(a.start < a.end) {
                    return Err(Error::Format(format!("{at}.start: must be less than end")));
                }
                if a.start < 0.0 {
                    return Err(Error::Format(format!("{at}.start: must be nonnegative")));
                }
                if a.end > video.duration {
                    return Err(Error::Format(format!("{at}.end: exceeds video duration")));
                }
                if a.class >= self.num_classes {
                    return Err(Error::Format(format!(
                        "{at}.class: id {} outside vocabulary of {}",
                        a.class, self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn feature_bytes(seq: &FeatureSequence) -> Result<Vec<u8>> {
    if seq.is_empty() || seq.features.ndim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "video {}: refusing to save an empty feature sequence",
            seq.video_id
        )));
    }
    let (t, c) = (seq.features.rows(), seq.features.cols());
    let mut out = Vec::with_capacity(FEATURE_HEADER + 4 * t * c);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&seq.fps.to_le_bytes());
    out.extend_from_slice(&seq.duration.to_le_bytes());
    for v in seq.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn parse_features(video_id: &str, bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < FEATURE_HEADER {
        return Err(Error::Format(format!(
            "feature file truncated: {} bytes, header needs {FEATURE_HEADER}",
            bytes.len()
        )));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature version {version}")));
    }
    let (t, c) = (u32_at(8) as usize, u32_at(12) as usize);
    if t == 0 || c == 0 {
        return Err(Error::Format(format!("feature file declares empty shape {t}x{c}")));
    }
    let (fps, duration) = (f64_at(16), f64_at(24));
    let expected = FEATURE_HEADER + 4 * t * c;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "feature file has {} bytes, expected {expected} for {t}x{c}",
            bytes.len()
        )));
    }
    let data = bytes[FEATURE_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(FeatureSequence {
        video_id: video_id.to_string(),
        features: Tensor::new(vec![t, c], data)?,
        fps,
        duration,
    })
}

pub fn save_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let bytes = feature_bytes(seq)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Loads a feature file; the video id is the file stem.
pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    parse_features(id, &fs::read(path)?)
}

pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    set.validate()?;
    fs::write(path, serde_json::to_string_pretty(set)?)?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path)?;
    let set: AnnotationSet = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    set.validate()?;
    Ok(set)
}

/// Features and annotations for one split, aligned by index.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub features: Vec<FeatureSequence>,
    pub annotations: AnnotationSet,
}

impl Split {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn split_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.json")), dir.join(name))
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>/<video_id>.dgtf`.
pub fn save_split(dir: &Path, name: &str, split: &Split) -> Result<()> {
    let (ann, feat_dir) = split_paths(dir, name);
    fs::create_dir_all(&feat_dir)?;
    save_annotations(&ann, &split.annotations)?;
    for seq in &split.features {
        save_features(&feat_dir.join(format!("{}.dgtf", seq.video_id)), seq)?;
    }
    Ok(())
}

pub fn load_split(dir: &Path, name: &str) -> Result<Split> {
    let (ann, feat_dir) = split_paths(dir, name);
    let annotations = load_annotations(&ann)?;
    let mut features = Vec::with_capacity(annotations.videos.len());
    for v in &annotations.videos {
        let seq = load_features(&feat_dir.join(format!("{}.dgtf", v.video_id)))?;
        features.push(seq);
    }
    Ok(Split { features, annotations })
}
