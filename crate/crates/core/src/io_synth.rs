//! Feature-bundle files, annotation files and a synthetic untrimmed-video
//! generator.
//!
//! A bundle file is the 8-byte signature `ABNFEAT\0`, a `u32` format version,
//! a `u64` manifest length, the UTF-8 JSON manifest and a payload of
//! little-endian `f32` values: the `T x C` global features followed by every
//! snippet's `A_t x C` agent features, all row-major.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container;
use crate::data_model::{ActionInstance, FeatureBundle, VideoRecord};
use crate::error::{Error, Result};

const BUNDLE_MAGIC: &[u8; 8] = b"ABNFEAT\0";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    video_id: String,
    snippets: usize,
    feature_dim: usize,
    agent_counts: Vec<usize>,
    /// Byte offset of the global block in the payload.
    global_offset: usize,
    /// Byte offset of each snippet's agent block.
    agent_offsets: Vec<usize>,
}

fn manifest_for(b: &FeatureBundle) -> Manifest {
    let c = b.feature_dim();
    let t = b.snippets();
    let counts = b.agent_counts();
    let mut offsets = Vec::with_capacity(t);
    let mut at = 4 * c * t;
    for &a in &counts {
        offsets.push(at);
        at += 4 * c * a;
    }
    Manifest {
        format_version: BUNDLE_VERSION,
        video_id: b.video_id.clone(),
        snippets: t,
        feature_dim: c,
        agent_counts: counts,
        global_offset: 0,
        agent_offsets: offsets,
    }
}

pub fn bundle_bytes(bundle: &FeatureBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let header = serde_json::to_vec(&manifest_for(bundle)).expect("plain data");
    let payload = bundle
        .global_feats
        .iter()
        .copied()
        .chain(bundle.agent_feats.iter().flat_map(|a| a.iter().copied()));
    Ok(container::encode(BUNDLE_MAGIC, BUNDLE_VERSION, &header, payload))
}

pub fn write_bundle(bundle: &FeatureBundle, path: &Path) -> Result<()> {
    container::write_file(path, &bundle_bytes(bundle)?)
}

pub fn read_bundle(path: &Path) -> Result<FeatureBundle> {
    parse_bundle(path, &container::read_file(path)?)
}

pub fn parse_bundle(path: &Path, bytes: &[u8]) -> Result<FeatureBundle> {
    let (header, payload) = container::decode(path, bytes, BUNDLE_MAGIC, BUNDLE_VERSION)?;
    let m: Manifest = serde_json::from_slice(header).map_err(|e| Error::json(path, e))?;
    let bad = |reason: String| Error::Manifest {
        path: path.into(),
        reason,
    };
    if m.format_version != BUNDLE_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: m.format_version,
            expected: BUNDLE_VERSION,
        });
    }
    if m.snippets == 0 || m.feature_dim == 0 {
        return Err(bad("empty feature dimensions".into()));
    }
    if m.agent_counts.len() != m.snippets {
        return Err(bad(format!("{} agent counts for {} snippets", m.agent_counts.len(), m.snippets)));
    }
    let (t, c) = (m.snippets, m.feature_dim);
    let total = c * (t + m.agent_counts.iter().sum::<usize>());
    let values = container::floats(path, payload, total)?;
    let reference = Manifest {
        video_id: m.video_id.clone(),
        ..manifest_for_counts(t, c, &m.agent_counts)
    };
    if reference != m {
        return Err(bad("payload offsets disagree with the agent counts".into()));
    }
    let global = Array2::from_shape_vec((t, c), values[..t * c].to_vec()).expect("sized");
    let agents = m
        .agent_counts
        .iter()
        .zip(&m.agent_offsets)
        .map(|(&a, &off)| {
            let start = off / 4;
            Array2::from_shape_vec((a, c), values[start..start + a * c].to_vec()).expect("sized")
        })
        .collect();
    FeatureBundle::new(m.video_id, global, agents)
}

fn manifest_for_counts(t: usize, c: usize, counts: &[usize]) -> Manifest {
    let agents = counts.iter().map(|&a| Array2::zeros((a, c))).collect();
    let b = FeatureBundle {
        video_id: String::new(),
        global_feats: Array2::zeros((t, c)),
        agent_feats: agents,
    };
    manifest_for(&b)
}

/// File name used for a video's bundle inside a feature directory.
pub fn bundle_file_name(video_id: &str) -> String {
    format!("{video_id}.abnf")
}

/// Reads the bundle of every listed video from `dir`.
pub fn read_bundles(dir: &Path, ids: impl IntoIterator<Item = impl AsRef<str>>) -> Result<Vec<FeatureBundle>> {
    ids.into_iter()
        .map(|id| read_bundle(&dir.join(bundle_file_name(id.as_ref()))))
        .collect()
}

#[derive(Debug, Deserialize)]
struct RawVideo {
    duration_seconds: f64,
    fps: f64,
    #[serde(default)]
    frame_count: Option<u64>,
    #[serde(default)]
    subset: Option<String>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Debug, Deserialize)]
struct RawAnnotation {
    #[serde(default)]
    label: Option<Value>,
    segment: [f64; 2],
}

/// Parses `{video_id: {duration_seconds, fps, annotations: [{label, segment}]}}`.
///
/// Integer labels are used as class ids. String labels get ids by sorted
/// order of the distinct names in the file. Segment ends up to one frame past
/// the duration are clamped; anything further is rejected.
pub fn parse_annotations(path: &Path) -> Result<Vec<VideoRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(path, &text)
}

pub fn parse_annotations_str(path: &Path, text: &str) -> Result<Vec<VideoRecord>> {
    let raw: BTreeMap<String, RawVideo> = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
    let err = |id: &str, reason: String| Error::Annotation {
        path: path.into(),
        reason: format!("{id}: {reason}"),
    };
    let mut names: Vec<&str> = raw
        .values()
        .flat_map(|v| v.annotations.iter())
        .filter_map(|a| a.label.as_ref()?.as_str())
        .collect();
    names.sort_unstable();
    names.dedup();

    let mut out = Vec::with_capacity(raw.len());
    for (id, v) in &raw {
        if !(v.fps > 0.0) || !(v.duration_seconds > 0.0) {
            return Err(err(id, "duration and fps must be positive".into()));
        }
        let frames = v.frame_count.unwrap_or_else(|| (v.duration_seconds * v.fps).round().max(1.0) as u64);
        let mut actions = Vec::with_capacity(v.annotations.len());
        for a in &v.annotations {
            let [s, e] = a.segment;
            if !(e > s) || s < 0.0 {
                return Err(err(id, format!("segment [{s}, {e}] is empty or negative")));
            }
            if e > v.duration_seconds + 1.0 / v.fps {
                return Err(err(id, format!("segment [{s}, {e}] exceeds duration {}", v.duration_seconds)));
            }
            let mut inst = ActionInstance::new(s, e.min(v.duration_seconds)).map_err(|x| err(id, x.to_string()))?;
            match &a.label {
                None | Some(Value::Null) => {}
                Some(Value::String(name)) => {
                    inst.label = Some(names.binary_search(&name.as_str()).expect("collected") as u32);
                }
                Some(Value::Number(n)) => {
                    let l = n
                        .as_u64()
                        .and_then(|l| u32::try_from(l).ok())
                        .ok_or_else(|| err(id, format!("label {n} is not a class id")))?;
                    inst.label = Some(l);
                }
                Some(other) => return Err(err(id, format!("unsupported label {other}"))),
            }
            actions.push(inst);
        }
        let mut rec =
            VideoRecord::new(id.clone(), v.duration_seconds, v.fps, frames, actions).map_err(|x| err(id, x.to_string()))?;
        rec.subset = v.subset.clone();
        out.push(rec);
    }
    Ok(out)
}

pub fn annotations_to_json(records: &[VideoRecord]) -> Value {
    let mut map = serde_json::Map::new();
    for r in records {
        let anns: Vec<Value> = r
            .actions
            .iter()
            .map(|a| {
                let mut o = serde_json::json!({ "segment": [a.start, a.end] });
                if let Some(l) = a.label {
                    o["label"] = l.into();
                }
                o
            })
            .collect();
        let mut v = serde_json::json!({
            "duration_seconds": r.duration_seconds,
            "fps": r.fps,
            "frame_count": r.frame_count,
            "annotations": anns,
        });
        if let Some(s) = &r.subset {
            v["subset"] = s.clone().into();
        }
        map.insert(r.video_id.clone(), v);
    }
    Value::Object(map)
}

pub fn write_annotations(records: &[VideoRecord], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&annotations_to_json(records)).expect("plain data");
    container::write_file(path, text.as_bytes())
}

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub train_videos: usize,
    pub val_videos: usize,
    /// Snippets per video.
    pub snippets: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    /// Action length range in snippets.
    pub min_length: f64,
    pub max_length: f64,
    /// Mean agents per snippet.
    pub agent_rate: f64,
    /// Class-pattern amplitude over noise in the global features.
    pub env_snr: f64,
    /// Class-pattern amplitude over noise in the acting agent.
    pub agent_snr: f64,
    pub fps: f64,
    pub seconds_per_snippet: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train_videos: 20,
            val_videos: 10,
            snippets: 50,
            feature_dim: 32,
            classes: 4,
            min_actions: 1,
            max_actions: 3,
            min_length: 4.0,
            max_length: 15.0,
            agent_rate: 2.0,
            env_snr: 2.0,
            agent_snr: 2.0,
            fps: 8.0,
            seconds_per_snippet: 2.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Weak environment signal, strong acting-agent signal.
    pub fn agent_signal() -> Self {
        SynthSpec {
            env_snr: 0.35,
            agent_snr: 3.0,
            ..SynthSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |k: &str, r: &str| Err(Error::config(format!("synth.{k}"), r));
        if self.train_videos + self.val_videos == 0 {
            return cfg("train_videos", "at least one video is required");
        }
        if self.snippets == 0 || self.feature_dim == 0 {
            return cfg("snippets", "snippets and feature_dim must be positive");
        }
        if self.classes == 0 || self.classes > self.feature_dim {
            return cfg("classes", "must be in 1..=feature_dim for orthogonal patterns");
        }
        if self.min_actions > self.max_actions {
            return cfg("min_actions", "must not exceed max_actions");
        }
        if !(self.min_length > 0.0 && self.min_length <= self.max_length) {
            return cfg("min_length", "must be positive and at most max_length");
        }
        if !(self.agent_rate >= 0.0 && self.agent_rate.is_finite()) {
            return cfg("agent_rate", "must be finite and >= 0");
        }
        if !(self.env_snr > 0.0) || !(self.agent_snr > 0.0) {
            return cfg("env_snr", "signal-to-noise ratios must be positive");
        }
        if !(self.fps > 0.0) || !(self.seconds_per_snippet > 0.0) {
            return cfg("fps", "fps and seconds_per_snippet must be positive");
        }
        Ok(())
    }

    pub fn total_videos(&self) -> usize {
        self.train_videos + self.val_videos
    }

    pub fn duration_seconds(&self) -> f64 {
        self.snippets as f64 * self.seconds_per_snippet
    }
}

/// One orthonormal direction per class, scaled to unit RMS per dimension.
pub fn class_patterns(spec: &SynthSpec) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.feature_dim;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while basis.len() < spec.classes {
        let mut v: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let scale = (c as f64).sqrt();
    Array2::from_shape_fn((spec.classes, c), |(k, j)| basis[k][j] * scale)
}

/// Places `lengths` without overlap, separating actions by at least one
/// snippet. Returns `None` when they cannot fit.
fn pack(lengths: &[f64], span: f64, rng: &mut ChaCha8Rng) -> Option<Vec<(f64, f64)>> {
    let gap = 1.0;
    let used: f64 = lengths.iter().sum::<f64>() + gap * lengths.len().saturating_sub(1) as f64;
    let free = span - used;
    if free < 0.0 {
        return None;
    }
    // Random split of the free space into len + 1 slots.
    let mut cuts: Vec<f64> = (0..lengths.len()).map(|_| rng.gen_range(0.0..=free)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(lengths.len());
    let mut cursor = 0.0;
    let mut prev_cut = 0.0;
    for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut + if i > 0 { gap } else { 0.0 };
        prev_cut = cut;
        out.push((cursor, cursor + len));
        cursor += len;
    }
    Some(out)
}

fn noisy(pattern: Option<ndarray::ArrayView1<f64>>, c: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..c)
        .map(|j| {
            let base = pattern.map_or(0.0, |p| p[j]);
            let noise = if std > 0.0 { normal.sample(rng) } else { 0.0 };
            (base + noise) as f32
        })
        .collect()
}

/// Builds one synthetic video. Snippet `n` is inside an action when its
/// centre lies in the action's snippet-coordinate interval.
fn generate_video(spec: &SynthSpec, patterns: &Array2<f64>, index: usize) -> Result<(FeatureBundle, VideoRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + index as u64);
    let id = format!("synth_{index:04}");
    let t = spec.snippets;
    let c = spec.feature_dim;
    let span = t as f64;
    let count = rng.gen_range(spec.min_actions..=spec.max_actions);
    let class = rng.gen_range(0..spec.classes);
    let lengths: Vec<f64> = (0..count)
        .map(|_| rng.gen_range(spec.min_length..=spec.max_length).min(span))
        .collect();
    let segments = pack(&lengths, span, &mut rng).ok_or_else(|| {
        Error::config(
            "synth.max_actions",
            format!("{id}: {count} actions of total length {:.1} do not fit in {t} snippets", lengths.iter().sum::<f64>()),
        )
    })?;

    let env_std = 1.0 / spec.env_snr;
    let agent_std = 1.0 / spec.agent_snr;
    let poisson = (spec.agent_rate > 0.0).then(|| Poisson::new(spec.agent_rate).expect("positive rate"));
    let pattern = patterns.row(class);
    let mut global = Array2::<f32>::zeros((t, c));
    let mut agents = Vec::with_capacity(t);
    for n in 0..t {
        let centre = n as f64;
        let acting = segments.iter().any(|&(s, e)| centre >= s && centre <= e);
        let row = noisy(acting.then_some(pattern), c, env_std, &mut rng);
        global.row_mut(n).assign(&ndarray::ArrayView1::from(&row));
        let drawn = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let a = if acting { drawn.max(1) } else { drawn };
        let actor = if acting { Some(rng.gen_range(0..a)) } else { None };
        let mut block = Array2::<f32>::zeros((a, c));
        for k in 0..a {
            let p = (actor == Some(k)).then_some(pattern);
            let row = noisy(p, c, agent_std, &mut rng);
            block.row_mut(k).assign(&ndarray::ArrayView1::from(&row));
        }
        agents.push(block);
    }
    let bundle = FeatureBundle::new(id.clone(), global, agents)?;

    let sps = spec.seconds_per_snippet;
    let duration = spec.duration_seconds();
    let frames = (duration * spec.fps).round() as u64;
    let actions = segments
        .iter()
        .map(|&(s, e)| Ok(ActionInstance::new(s * sps, (e * sps).min(duration))?.with_label(class as u32)))
        .collect::<Result<Vec<_>>>()?;
    let subset = if index < spec.train_videos { "training" } else { "validation" };
    let record = VideoRecord::new(id, duration, spec.fps, frames, actions)?.with_subset(subset);
    Ok((bundle, record))
}

/// Deterministic synthetic dataset: the first `train_videos` records are in
/// the `training` subset, the rest in `validation`.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<FeatureBundle>, Vec<VideoRecord>)> {
    spec.validate()?;
    let patterns = class_patterns(spec);
    let mut bundles = Vec::with_capacity(spec.total_videos());
    let mut records = Vec::with_capacity(spec.total_videos());
    for i in 0..spec.total_videos() {
        let (b, r) = generate_video(spec, &patterns, i)?;
        bundles.push(b);
        records.push(r);
    }
    Ok((bundles, records))
}

/// Records of one subset.
pub fn subset(records: &[VideoRecord], name: &str) -> Vec<VideoRecord> {
    records.iter().filter(|r| r.subset.as_deref() == Some(name)).cloned().collect()
}

/// Random proposals: `count` intervals per video with uniform centres,
/// log-uniform lengths and uniform scores. A reference point for chance-level
/// recall.
pub fn random_proposals(records: &[VideoRecord], count: usize, seed: u64) -> crate::inference::ProposalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .map(|r| {
            let dur = r.duration_seconds;
            let props = (0..count)
                .map(|_| {
                    let len = dur * (rng.gen_range((0.01f64).ln()..=0.0)).exp();
                    let centre = rng.gen_range(0.0..=dur);
                    let s = (centre - len / 2.0).max(0.0);
                    let e = (centre + len / 2.0).min(dur);
                    let score = rng.gen_range(0.0..1.0);
                    ActionInstance::new(s, e.max(s + dur * 1e-6)).expect("ordered").with_score(score)
                })
                .collect();
            (r.video_id.clone(), props)
        })
        .collect()
}
