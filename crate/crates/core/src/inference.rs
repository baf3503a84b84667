//! From boundary probabilities and confidence maps to a ranked, de-duplicated
//! proposal list.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boundary_net::BoundaryOutputs;
use crate::config::{InferConfig, NmsKind};
use crate::data_model::{tiou, ActionInstance, VideoRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalCandidate {
    /// Start snippet index.
    pub t_s: usize,
    /// End snippet index, `t_s < t_e <= T`.
    pub t_e: usize,
    pub score: f64,
    pub start_sec: f64,
    pub end_sec: f64,
}

impl ProposalCandidate {
    fn interval(&self) -> (f64, f64) {
        (self.t_s as f64, self.t_e as f64)
    }

    pub fn to_action(&self) -> ActionInstance {
        ActionInstance {
            start: self.start_sec,
            end: self.end_sec,
            label: None,
            score: Some(self.score),
        }
    }
}

/// Indices that are strict local maxima (one-sided at the ends) or reach
/// `tau_rel` times the global maximum.
pub fn pick_peaks(p: &[f64], tau_rel: f64) -> Vec<usize> {
    let n = p.len();
    if n == 0 {
        return Vec::new();
    }
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..n)
        .filter(|&t| {
            let left = t == 0 || p[t] > p[t - 1];
            let right = t + 1 == n || p[t] > p[t + 1];
            (left && right) || p[t] >= tau_rel * max
        })
        .collect()
}

/// Every start/end peak pair with `0 < t_e - t_s <= max_duration`, scored
/// `P_S[t_s] * P_E[t_e] * sqrt(P_cc[d, t_s] * P_cr[d, t_s])` with `d = t_e - t_s`.
pub fn pair_and_score(
    starts: &[usize],
    ends: &[usize],
    out: &BoundaryOutputs,
    max_duration: usize,
    seconds_per_snippet: f64,
) -> Vec<ProposalCandidate> {
    let max_d = max_duration.min(out.max_duration());
    let mut props = Vec::new();
    for &t_s in starts {
        for &t_e in ends {
            if t_e <= t_s || t_e - t_s > max_d {
                continue;
            }
            let d = t_e - t_s;
            let score = out.p_start[t_s] * out.p_end[t_e] * (out.cc(d, t_s) * out.cr(d, t_s)).sqrt();
            props.push(ProposalCandidate {
                t_s,
                t_e,
                score,
                start_sec: t_s as f64 * seconds_per_snippet,
                end_sec: t_e as f64 * seconds_per_snippet,
            });
        }
    }
    props
}

fn by_score_desc(props: &mut [ProposalCandidate]) {
    props.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.t_s.cmp(&b.t_s))
            .then(a.t_e.cmp(&b.t_e))
    });
}

fn argmax(props: &[ProposalCandidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in props.iter().enumerate() {
        match best {
            Some(b) if props[b].score >= p.score => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Gaussian Soft-NMS: repeatedly keep the best proposal and decay the rest by
/// `exp(-tiou^2 / sigma)`, dropping anything under `score_floor`.
pub fn soft_nms(props: &[ProposalCandidate], sigma: f64, score_floor: f64, top_k: usize) -> Vec<ProposalCandidate> {
    let mut pool = props.to_vec();
    by_score_desc(&mut pool);
    let mut kept = Vec::new();
    while kept.len() < top_k {
        let Some(i) = argmax(&pool) else { break };
        let best = pool.remove(i);
        for p in &mut pool {
            let iou = tiou(best.interval(), p.interval());
            p.score *= (-(iou * iou) / sigma).exp();
        }
        pool.retain(|p| p.score >= score_floor);
        kept.push(best);
    }
    kept
}

/// Greedy NMS: drop any proposal overlapping a kept one at `tiou >= iou_thresh`.
pub fn hard_nms(props: &[ProposalCandidate], iou_thresh: f64, top_k: usize) -> Vec<ProposalCandidate> {
    let mut pool = props.to_vec();
    by_score_desc(&mut pool);
    let mut kept: Vec<ProposalCandidate> = Vec::new();
    for p in pool {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|k| tiou(k.interval(), p.interval()) < iou_thresh) {
            kept.push(p);
        }
    }
    kept
}

/// Full post-processing of one video's network outputs.
pub fn generate_proposals(out: &BoundaryOutputs, rec: &VideoRecord, cfg: &InferConfig) -> Vec<ProposalCandidate> {
    let t = out.temporal_scale();
    let starts = pick_peaks(out.p_start.as_slice().expect("contiguous"), cfg.tau_rel);
    let ends = pick_peaks(out.p_end.as_slice().expect("contiguous"), cfg.tau_rel);
    let candidates = pair_and_score(&starts, &ends, out, out.max_duration(), rec.seconds_per_snippet(t));
    match cfg.nms {
        NmsKind::Soft => soft_nms(&candidates, cfg.soft_nms_sigma, cfg.score_floor, cfg.top_k),
        NmsKind::Hard => hard_nms(&candidates, cfg.hard_nms_iou, cfg.top_k),
    }
}

/// Per-video proposals in seconds, keyed by video id.
pub type ProposalSet = BTreeMap<String, Vec<ActionInstance>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProposalEntry {
    segment: [f64; 2],
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u32>,
}

fn sorted_desc(actions: &[ActionInstance]) -> Vec<ActionInstance> {
    let mut v = actions.to_vec();
    v.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
    v
}

pub fn proposals_to_json(set: &ProposalSet) -> serde_json::Value {
    let map: BTreeMap<&String, Vec<ProposalEntry>> = set
        .iter()
        .map(|(id, acts)| {
            let entries = sorted_desc(acts)
                .into_iter()
                .map(|a| ProposalEntry {
                    segment: [a.start, a.end],
                    score: a.score.unwrap_or(0.0),
                    label: a.label,
                })
                .collect();
            (id, entries)
        })
        .collect();
    serde_json::to_value(map).expect("plain data")
}

pub fn write_proposals(set: &ProposalSet, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&proposals_to_json(set)).expect("plain data");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_proposals(path: &Path) -> Result<ProposalSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, Vec<ProposalEntry>> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let mut set = ProposalSet::new();
    for (id, entries) in raw {
        let mut acts = Vec::with_capacity(entries.len());
        for e in entries {
            let [s, t] = e.segment;
            if !(s.is_finite() && t.is_finite() && s < t) {
                return Err(Error::Annotation {
                    path: path.to_path_buf(),
                    reason: format!("{id}: proposal segment [{s}, {t}] is empty"),
                });
            }
            acts.push(ActionInstance {
                start: s,
                end: t,
                label: e.label,
                score: Some(e.score),
            });
        }
        set.insert(id, sorted_desc(&acts));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;

    fn cand(t_s: usize, t_e: usize, score: f64) -> ProposalCandidate {
        ProposalCandidate {
            t_s,
            t_e,
            score,
            start_sec: t_s as f64,
            end_sec: t_e as f64,
        }
    }

    fn outputs(t: usize, d: usize) -> BoundaryOutputs {
        BoundaryOutputs {
            p_start: Array1::from_elem(t, 1.0),
            p_end: Array1::from_elem(t, 1.0),
            p_cc: Array2::from_elem((d, t), 1.0),
            p_cr: Array2::from_elem((d, t), 1.0),
            valid_mask: Array2::from_shape_fn((d, t), |(r, c)| c + r < t),
        }
    }

    #[test]
    fn peak_examples() {
        assert_eq!(pick_peaks(&[0.1, 0.7, 0.3, 0.8, 0.2], 0.5), vec![1, 3]);
        assert_eq!(pick_peaks(&[0.1, 0.2, 0.3, 0.4], 1.0), vec![3]);
        assert_eq!(pick_peaks(&[0.3; 4], 0.5), vec![0, 1, 2, 3]);
        assert_eq!(pick_peaks(&[0.1, 0.2, 0.3, 0.4], 0.5), vec![1, 2, 3]);
    }

    #[test]
    fn fused_score_examples() {
        let mut out = outputs(6, 4);
        let props = pair_and_score(&[1], &[3], &out, 4, 1.0);
        assert_eq!(props[0].score, 1.0);

        out.p_start[1] = 0.8;
        out.p_end[3] = 0.9;
        out.p_cc[[1, 1]] = 0.64;
        out.p_cr[[1, 1]] = 0.25;
        let props = pair_and_score(&[1], &[3], &out, 4, 1.0);
        assert!((props[0].score - 0.288).abs() < 1e-12);

        out.p_cr[[1, 1]] = 0.0;
        assert_eq!(pair_and_score(&[1], &[3], &out, 4, 1.0)[0].score, 0.0);
    }

    #[test]
    fn pairing_respects_order_and_range() {
        let out = outputs(10, 3);
        let props = pair_and_score(&[0, 2, 5], &[1, 4, 9], &out, 3, 2.0);
        let pairs: Vec<(usize, usize)> = props.iter().map(|p| (p.t_s, p.t_e)).collect();
        assert_eq!(pairs, vec![(0, 1), (2, 4)]);
        assert_eq!(props[1].start_sec, 4.0);
        assert_eq!(props[1].end_sec, 8.0);
    }

    #[test]
    fn soft_nms_examples() {
        let disjoint = vec![cand(0, 2, 0.9), cand(3, 5, 0.7), cand(6, 9, 0.5)];
        assert_eq!(soft_nms(&disjoint, 0.4, 0.001, 10), disjoint);

        let dup = vec![cand(1, 4, 0.9), cand(1, 4, 0.8)];
        let out = soft_nms(&dup, 0.4, 0.001, 10);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-1.0f64 / 0.4).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.0657).abs() < 1e-4);

        assert_eq!(soft_nms(&disjoint, 0.4, 0.001, 1), vec![cand(0, 2, 0.9)]);
    }

    #[test]
    fn hard_nms_examples() {
        let disjoint = vec![cand(0, 2, 0.9), cand(3, 5, 0.7)];
        assert_eq!(hard_nms(&disjoint, 0.65, 10), disjoint);
        let dup = vec![cand(1, 4, 0.6), cand(1, 4, 0.8)];
        assert_eq!(hard_nms(&dup, 0.65, 10), vec![cand(1, 4, 0.8)]);

        // Shifts of 3 on length 17: neighbours overlap at 14/20 = 0.7, ends at 11/23.
        let chain = vec![cand(0, 17, 0.9), cand(3, 20, 0.8), cand(6, 23, 0.7)];
        assert_eq!(hard_nms(&chain, 0.65, 10), vec![cand(0, 17, 0.9), cand(6, 23, 0.7)]);
        // Shifts of 1 on length 10: the ends still overlap at 8/12 >= 0.65.
        let chain = vec![cand(0, 10, 0.9), cand(1, 11, 0.8), cand(2, 12, 0.7)];
        assert_eq!(hard_nms(&chain, 0.65, 10), vec![cand(0, 10, 0.9)]);
    }

    proptest! {
        #[test]
        fn nms_invariants(raw in prop::collection::vec((0usize..30, 1usize..10, 0.01..1.0f64), 1..25)) {
            let props: Vec<_> = raw.iter().map(|&(s, l, sc)| cand(s, s + l, sc)).collect();
            let best = props.iter().map(|p| p.score).fold(0.0, f64::max);
            let soft = soft_nms(&props, 0.4, 0.0, 100);
            prop_assert_eq!(soft[0].score, best);
            for p in &soft {
                let orig = props.iter().filter(|q| q.t_s == p.t_s && q.t_e == p.t_e).map(|q| q.score).fold(0.0, f64::max);
                prop_assert!(p.score <= orig);
            }
            let hard = hard_nms(&props, 0.65, 100);
            for i in 0..hard.len() {
                for j in i + 1..hard.len() {
                    prop_assert!(tiou(hard[i].interval(), hard[j].interval()) < 0.65);
                }
            }
        }
    }

    #[test]
    fn proposal_json_roundtrip_sorted() {
        let mut set = ProposalSet::new();
        set.insert(
            "v1".into(),
            vec![
                ActionInstance::new(1.0, 2.0).unwrap().with_score(0.2),
                ActionInstance::new(0.5, 3.0).unwrap().with_score(0.9),
            ],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        write_proposals(&set, &path).unwrap();
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(json["v1"][0]["segment"], serde_json::json!([0.5, 3.0]));
        assert_eq!(json["v1"][0]["score"], serde_json::json!(0.9));
        let back = read_proposals(&path).unwrap();
        assert_eq!(back["v1"][0].score, Some(0.9));
        assert_eq!(back["v1"].len(), 2);
    }
}
