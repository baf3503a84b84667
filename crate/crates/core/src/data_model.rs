//! Domain types shared by every stage of the pipeline.
//!
//! Coordinates: times on a [`VideoRecord`] are seconds. Inside the network a
//! video is rescaled to `T` snippets and positions are continuous reals in
//! `[0, T]`; snippet index `n` covers the region `[n - 1/2, n + 1/2]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A temporal segment, in seconds for ground truth and predictions read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl ActionInstance {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end <= start {
            return Err(Error::Invalid(format!("action [{start}, {end}] must satisfy 0 <= start < end")));
        }
        Ok(ActionInstance {
            start,
            end,
            label: None,
            score: None,
        })
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// An annotated untrimmed video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub duration_seconds: f64,
    pub fps: f64,
    pub frame_count: u64,
    pub actions: Vec<ActionInstance>,
    /// Dataset split ("training", "validation", ...), if the annotation file carries one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
}

impl VideoRecord {
    pub fn new(
        video_id: impl Into<String>,
        duration_seconds: f64,
        fps: f64,
        frame_count: u64,
        actions: Vec<ActionInstance>,
    ) -> Result<Self> {
        let rec = VideoRecord {
            video_id: video_id.into(),
            duration_seconds,
            fps,
            frame_count,
            actions,
            subset: None,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn with_subset(mut self, subset: impl Into<String>) -> Self {
        self.subset = Some(subset.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Invalid(format!("{}: fps must be positive", self.video_id)));
        }
        if self.frame_count == 0 {
            return Err(Error::Invalid(format!("{}: frame count must be positive", self.video_id)));
        }
        if !(self.duration_seconds.is_finite() && self.duration_seconds > 0.0) {
            return Err(Error::Invalid(format!("{}: duration must be positive", self.video_id)));
        }
        let frame = 1.0 / self.fps;
        if (self.duration_seconds - self.frame_count as f64 / self.fps).abs() > frame + 1e-9 {
            return Err(Error::Invalid(format!(
                "{}: duration {}s disagrees with {} frames at {} fps",
                self.video_id, self.duration_seconds, self.frame_count, self.fps
            )));
        }
        for a in &self.actions {
            if !(a.start >= 0.0 && a.start < a.end && a.end <= self.duration_seconds) {
                return Err(Error::Invalid(format!(
                    "{}: action [{}, {}] outside [0, {}]",
                    self.video_id, a.start, a.end, self.duration_seconds
                )));
            }
        }
        Ok(())
    }

    /// Mean ground-truth action length as a fraction of the video length.
    pub fn mean_action_ratio(&self) -> Option<f64> {
        if self.actions.is_empty() {
            return None;
        }
        let mean = self.actions.iter().map(ActionInstance::length).sum::<f64>() / self.actions.len() as f64;
        Some(mean / self.duration_seconds)
    }

    /// Seconds covered by one of `temporal_scale` rescaled snippets.
    pub fn seconds_per_snippet(&self, temporal_scale: usize) -> f64 {
        self.frame_count as f64 / (self.fps * temporal_scale as f64)
    }

    /// Most frequent ground-truth class, ties broken toward the smaller id.
    pub fn top_class(&self) -> Option<u32> {
        let mut counts = std::collections::BTreeMap::new();
        for a in &self.actions {
            if let Some(l) = a.label {
                *counts.entry(l).or_insert(0usize) += 1;
            }
        }
        counts
            .into_iter()
            .fold(None, |best: Option<(u32, usize)>, (l, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((l, c)),
            })
            .map(|(l, _)| l)
    }
}

/// Precomputed per-snippet features of one video.
///
/// `global_feats` is `T x C`; `agent_feats[t]` is `A_t x C` and may have zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub video_id: String,
    pub global_feats: Array2<f32>,
    pub agent_feats: Vec<Array2<f32>>,
}

impl FeatureBundle {
    pub fn new(video_id: impl Into<String>, global_feats: Array2<f32>, agent_feats: Vec<Array2<f32>>) -> Result<Self> {
        let b = FeatureBundle {
            video_id: video_id.into(),
            global_feats,
            agent_feats,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn snippets(&self) -> usize {
        self.global_feats.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.global_feats.ncols()
    }

    pub fn agent_counts(&self) -> Vec<usize> {
        self.agent_feats.iter().map(|a| a.nrows()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (t, c) = self.global_feats.dim();
        if t == 0 || c == 0 {
            return Err(Error::Invalid(format!("{}: empty feature bundle ({t}x{c})", self.video_id)));
        }
        if self.agent_feats.len() != t {
            return Err(Error::shape("feature bundle agent lists", t, self.agent_feats.len()));
        }
        for a in &self.agent_feats {
            if a.ncols() != c {
                return Err(Error::shape("agent feature dimension", c, a.ncols()));
            }
        }
        let finite = self.global_feats.iter().all(|v| v.is_finite())
            && self.agent_feats.iter().all(|a| a.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Invalid(format!("{}: non-finite feature values", self.video_id)));
        }
        Ok(())
    }

    /// Resamples the bundle to `target` snippets.
    ///
    /// Global features are linearly interpolated at snippet centres; each output
    /// snippet takes the agent set of the nearest source snippet.
    pub fn rescale(&self, target: usize) -> FeatureBundle {
        let src = self.snippets();
        if src == target {
            return self.clone();
        }
        let c = self.feature_dim();
        let mut global = Array2::<f32>::zeros((target, c));
        let mut agents = Vec::with_capacity(target);
        let scale = src as f64 / target as f64;
        for t in 0..target {
            let pos = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let w = (pos - lo as f64) as f32;
            for j in 0..c {
                global[[t, j]] = (1.0 - w) * self.global_feats[[lo, j]] + w * self.global_feats[[hi, j]];
            }
            let nearest = ((t as f64 + 0.5) * scale).floor().min((src - 1) as f64) as usize;
            agents.push(self.agent_feats[nearest].clone());
        }
        FeatureBundle {
            video_id: self.video_id.clone(),
            global_feats: global,
            agent_feats: agents,
        }
    }
}

/// Converts an action in seconds to continuous snippet coordinates `s * fps * T / L`.
pub fn seconds_to_snippets(action: &ActionInstance, rec: &VideoRecord, temporal_scale: usize) -> Result<(f64, f64)> {
    if rec.frame_count == 0 || !(rec.fps > 0.0) {
        return Err(Error::Invalid(format!("{}: frame count and fps must be positive", rec.video_id)));
    }
    let scale = rec.fps * temporal_scale as f64 / rec.frame_count as f64;
    Ok((action.start * scale, action.end * scale))
}

/// Inverse of [`seconds_to_snippets`] for a single coordinate.
pub fn snippet_to_seconds(pos: f64, rec: &VideoRecord, temporal_scale: usize) -> f64 {
    pos * rec.frame_count as f64 / (rec.fps * temporal_scale as f64)
}

/// Temporal intersection over union. Zero-length or disjoint pairs give 0.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
