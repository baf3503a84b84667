//! Proposal metrics (average recall at a proposal budget, area under the AR
//! curve) and detection metrics (mAP at tIoU thresholds).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, ProposalBudget};
use crate::data_model::{tiou, ActionInstance, VideoRecord};
use crate::error::{Error, Result};
use crate::inference::ProposalSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AR at selected average numbers of proposals, keyed by AN.
    pub ar_at_an: BTreeMap<usize, f64>,
    /// AR at AN = 1..=max_an.
    pub ar_curve: Vec<f64>,
    /// Area under the AR-AN curve, percent.
    pub auc: f64,
    /// mAP keyed by tIoU threshold.
    pub map_at_tiou: BTreeMap<String, f64>,
    pub average_map: f64,
}

/// Ground-truth intervals of one video plus its proposals sorted by descending score.
#[derive(Debug, Clone)]
struct VideoEntry<'a> {
    gts: Vec<(f64, f64)>,
    props: Vec<&'a ActionInstance>,
}

fn score_of(a: &ActionInstance) -> f64 {
    a.score.unwrap_or(0.0)
}

fn sorted_by_score(props: &[ActionInstance]) -> Vec<&ActionInstance> {
    let mut v: Vec<&ActionInstance> = props.iter().collect();
    v.sort_by(|a, b| score_of(b).total_cmp(&score_of(a)));
    v
}

fn entries<'a>(gts: &BTreeMap<String, Vec<ActionInstance>>, props: &'a ProposalSet) -> Result<Vec<VideoEntry<'a>>> {
    let total: usize = gts.values().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Invalid("recall is undefined without ground-truth actions".into()));
    }
    Ok(gts
        .iter()
        .map(|(id, g)| VideoEntry {
            gts: g.iter().map(ActionInstance::interval).collect(),
            props: props.get(id).map(|p| sorted_by_score(p)).unwrap_or_default(),
        })
        .collect())
}

/// Greedy one-to-one matching: each proposal, in order, claims the unmatched
/// ground truth with the highest tIoU at or above `threshold`.
fn matched_count(gts: &[(f64, f64)], props: &[&ActionInstance], threshold: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut count = 0;
    for p in props {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] {
                continue;
            }
            let iou = tiou(p.interval(), *g);
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            count += 1;
        }
    }
    count
}

fn recall_with_budget(videos: &[VideoEntry], budgets: &[usize], thresholds: &[f64]) -> f64 {
    let total: usize = videos.iter().map(|v| v.gts.len()).sum();
    let mut sum = 0.0;
    for &th in thresholds {
        let hit: usize = videos
            .iter()
            .zip(budgets)
            .map(|(v, &b)| matched_count(&v.gts, &v.props[..b.min(v.props.len())], th))
            .sum();
        sum += hit as f64 / total as f64;
    }
    sum / thresholds.len() as f64
}

/// Per-video proposal budgets for a dataset-wide cap of `an * videos`
/// proposals taken in global score order.
fn global_budgets(videos: &[VideoEntry], an: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = videos
        .iter()
        .enumerate()
        .flat_map(|(i, v)| v.props.iter().map(move |p| (score_of(p), i)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut budgets = vec![0; videos.len()];
    for &(_, i) in all.iter().take(an * videos.len()) {
        budgets[i] += 1;
    }
    budgets
}

fn budgets_for(videos: &[VideoEntry], an: usize, mode: ProposalBudget) -> Vec<usize> {
    match mode {
        ProposalBudget::PerVideo => vec![an; videos.len()],
        ProposalBudget::Global => global_budgets(videos, an),
    }
}

/// Average recall over `thresholds` keeping the top `an` proposals of every video.
pub fn average_recall(
    gts: &BTreeMap<String, Vec<ActionInstance>>,
    props: &ProposalSet,
    an: usize,
    thresholds: &[f64],
    mode: ProposalBudget,
) -> Result<f64> {
    if an == 0 {
        return Err(Error::Invalid("average number of proposals must be at least 1".into()));
    }
    let videos = entries(gts, props)?;
    Ok(recall_with_budget(&videos, &budgets_for(&videos, an, mode), thresholds))
}

/// AR at every AN in `1..=max_an`.
pub fn recall_curve(
    gts: &BTreeMap<String, Vec<ActionInstance>>,
    props: &ProposalSet,
    max_an: usize,
    thresholds: &[f64],
    mode: ProposalBudget,
) -> Result<Vec<f64>> {
    let videos = entries(gts, props)?;
    Ok((1..=max_an)
        .map(|an| recall_with_budget(&videos, &budgets_for(&videos, an, mode), thresholds))
        .collect())
}

/// Trapezoidal area under an AR curve sampled at AN = 1, 2, ..., divided by
/// the largest AN and expressed in percent.
pub fn auc_from_curve(curve: &[f64]) -> f64 {
    if curve.len() < 2 {
        return 0.0;
    }
    let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    100.0 * area / curve.len() as f64
}

pub fn auc(
    gts: &BTreeMap<String, Vec<ActionInstance>>,
    props: &ProposalSet,
    thresholds: &[f64],
    mode: ProposalBudget,
) -> Result<f64> {
    Ok(auc_from_curve(&recall_curve(gts, props, 100, thresholds, mode)?))
}

/// All-point interpolated area under a precision/recall sequence.
fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut mprec = Vec::with_capacity(precision.len() + 2);
    mprec.push(0.0);
    mprec.extend_from_slice(precision);
    mprec.push(0.0);
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    for i in (0..mprec.len() - 1).rev() {
        mprec[i] = mprec[i].max(mprec[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mprec[i])
        .sum()
}

/// Average precision of one class at one threshold.
fn class_ap(gts: &[(usize, (f64, f64))], dets: &[(usize, &ActionInstance)], threshold: f64, videos: usize) -> f64 {
    let mut by_video: Vec<Vec<(f64, f64)>> = vec![Vec::new(); videos];
    for &(v, g) in gts {
        by_video[v].push(g);
    }
    let mut used: Vec<Vec<bool>> = by_video.iter().map(|g| vec![false; g.len()]).collect();
    let mut order: Vec<&(usize, &ActionInstance)> = dets.iter().collect();
    order.sort_by(|a, b| score_of(b.1).total_cmp(&score_of(a.1)));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, &&(v, det)) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in by_video[v].iter().enumerate() {
            if used[v][j] {
                continue;
            }
            let iou = tiou(det.interval(), *g);
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[v][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    interpolated_ap(&precision, &recall)
}

/// mAP per threshold over the classes present in the labelled ground truth.
/// Detections of classes absent from the ground truth are ignored.
pub fn map_at_tiou(
    gts: &BTreeMap<String, Vec<ActionInstance>>,
    dets: &ProposalSet,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    let ids: Vec<&String> = gts.keys().collect();
    let mut classes = BTreeSet::new();
    let mut gt_by_class: BTreeMap<u32, Vec<(usize, (f64, f64))>> = BTreeMap::new();
    for (v, id) in ids.iter().enumerate() {
        for g in &gts[*id] {
            let label = g
                .label
                .ok_or_else(|| Error::Invalid(format!("{id}: ground truth without a class label")))?;
            classes.insert(label);
            gt_by_class.entry(label).or_default().push((v, g.interval()));
        }
    }
    let mut det_by_class: BTreeMap<u32, Vec<(usize, &ActionInstance)>> = BTreeMap::new();
    for (v, id) in ids.iter().enumerate() {
        for d in dets.get(*id).map(Vec::as_slice).unwrap_or_default() {
            if let Some(label) = d.label {
                det_by_class.entry(label).or_default().push((v, d));
            }
        }
    }
    Ok(thresholds
        .iter()
        .map(|&th| {
            if classes.is_empty() {
                return 0.0;
            }
            let total: f64 = classes
                .iter()
                .map(|c| {
                    let d = det_by_class.get(c).map(Vec::as_slice).unwrap_or_default();
                    class_ap(&gt_by_class[c], d, th, ids.len())
                })
                .sum();
            total / classes.len() as f64
        })
        .collect())
}

pub fn ground_truth_map(records: &[VideoRecord]) -> BTreeMap<String, Vec<ActionInstance>> {
    records.iter().map(|r| (r.video_id.clone(), r.actions.clone())).collect()
}

/// Labels every proposal of a video with the video's majority ground-truth class.
pub fn label_with_video_class(records: &[VideoRecord], props: &ProposalSet) -> ProposalSet {
    let class: BTreeMap<&str, Option<u32>> = records.iter().map(|r| (r.video_id.as_str(), r.top_class())).collect();
    props
        .iter()
        .map(|(id, list)| {
            let label = class.get(id.as_str()).copied().flatten();
            let list = list
                .iter()
                .map(|a| ActionInstance {
                    label,
                    ..a.clone()
                })
                .collect();
            (id.clone(), list)
        })
        .collect()
}

fn key(x: f64) -> String {
    let s = format!("{x:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Every proposal and detection metric for the annotated videos in `records`.
pub fn evaluate(records: &[VideoRecord], props: &ProposalSet, cfg: &EvalConfig) -> Result<EvalReport> {
    let gts = ground_truth_map(records);
    let thresholds = cfg.preset.recall_thresholds();
    let curve = recall_curve(&gts, props, cfg.max_an, &thresholds, cfg.budget)?;
    let ar_at_an = cfg
        .report_an
        .iter()
        .filter(|&&an| an >= 1 && an <= curve.len())
        .map(|&an| (an, curve[an - 1]))
        .collect();
    let auc = auc_from_curve(&curve);

    let labelled = records.iter().all(|r| r.actions.iter().all(|a| a.label.is_some()));
    let (map_at_tiou, average_map) = if labelled {
        let dets = label_with_video_class(records, props);
        let det_thresholds = cfg.preset.detection_thresholds();
        let maps = map_at_tiou(&gts, &dets, &det_thresholds)?;
        let avg = maps.iter().sum::<f64>() / maps.len() as f64;
        (det_thresholds.iter().map(|&t| key(t)).zip(maps).collect(), avg)
    } else {
        (BTreeMap::new(), 0.0)
    };
    Ok(EvalReport {
        ar_at_an,
        ar_curve: curve,
        auc,
        map_at_tiou,
        average_map,
    })
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("plain data");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
