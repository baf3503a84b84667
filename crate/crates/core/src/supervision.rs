//! Training targets: start/end labels per snippet and duration labels per
//! proposal cell.

use ndarray::{Array1, Array2};

use crate::config::{ModelConfig, OverlapAggregate, OverlapNorm};
use crate::data_model::{seconds_to_snippets, tiou, VideoRecord};
use crate::error::{Error, Result};

/// Half-width of the start/end regions around a boundary, in snippets.
pub const BOUNDARY_HALF_WIDTH: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionTargets {
    /// Binary start labels, length `T`.
    pub l_start: Array1<f64>,
    /// Binary end labels, length `T`.
    pub l_end: Array1<f64>,
    /// Binary duration labels, `D x T` (row `d - 1`).
    pub l_duration: Array2<f64>,
    /// Max tIoU of each proposal cell with any ground truth, `D x T`.
    pub g_iou: Array2<f64>,
    pub valid_mask: Array2<bool>,
}

/// Boundary overlap settings for [`boundary_labels`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlapRule {
    pub norm: OverlapNorm,
    pub aggregate: OverlapAggregate,
}

impl Default for OverlapRule {
    fn default() -> Self {
        OverlapRule {
            norm: OverlapNorm::Snippet,
            aggregate: OverlapAggregate::Max,
        }
    }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

fn region_labels(points: impl Iterator<Item = f64> + Clone, temporal_scale: usize, rule: OverlapRule) -> Array1<f64> {
    Array1::from_shape_fn(temporal_scale, |n| {
        let snippet = (n as f64 - 0.5, n as f64 + 0.5);
        let ratios = points.clone().map(|p| {
            let region = (p - BOUNDARY_HALF_WIDTH, p + BOUNDARY_HALF_WIDTH);
            let inter = overlap(snippet, region);
            match rule.norm {
                OverlapNorm::Snippet => inter / (snippet.1 - snippet.0),
                OverlapNorm::Region => inter / (region.1 - region.0),
            }
        });
        let score = match rule.aggregate {
            OverlapAggregate::Max => ratios.fold(0.0, f64::max),
            OverlapAggregate::Sum => ratios.sum(),
        };
        if score >= 0.5 {
            1.0
        } else {
            0.0
        }
    })
}

/// Start and end labels for actions in snippet coordinates.
///
/// Snippet `n` is positive when its region `[n - 1/2, n + 1/2]` overlaps the
/// width-3 region around a boundary by at least half.
pub fn boundary_labels(actions: &[(f64, f64)], temporal_scale: usize, rule: OverlapRule) -> Result<(Array1<f64>, Array1<f64>)> {
    if actions.is_empty() {
        return Err(Error::Invalid("boundary labels need at least one action".into()));
    }
    let starts = actions.iter().map(|a| a.0);
    let ends = actions.iter().map(|a| a.1);
    Ok((
        region_labels(starts, temporal_scale, rule),
        region_labels(ends, temporal_scale, rule),
    ))
}

/// Dense IoU map and binary local-maximum labels over the `(d, t)` grid.
///
/// Cell `(d, t)` is the proposal `[t, t + d]`. A valid cell is positive when its
/// IoU is non-zero and no valid 8-neighbour has a strictly larger IoU.
pub fn duration_labels(
    actions: &[(f64, f64)],
    temporal_scale: usize,
    max_duration: usize,
) -> Result<(Array2<f64>, Array2<f64>, Array2<bool>)> {
    if max_duration == 0 || max_duration > temporal_scale {
        return Err(Error::config("model.max_duration", format!("must be in 1..={temporal_scale}")));
    }
    let shape = (max_duration, temporal_scale);
    let valid = Array2::from_shape_fn(shape, |(r, t)| t + r + 1 <= temporal_scale);
    let g_iou = Array2::from_shape_fn(shape, |(r, t)| {
        if !valid[[r, t]] {
            return 0.0;
        }
        let cell = (t as f64, (t + r + 1) as f64);
        actions.iter().map(|&a| tiou(cell, a)).fold(0.0, f64::max)
    });
    let mut bin = Array2::zeros(shape);
    for r in 0..max_duration {
        for t in 0..temporal_scale {
            let v = g_iou[[r, t]];
            if !valid[[r, t]] || v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for dr in -1isize..=1 {
                for dt in -1isize..=1 {
                    if dr == 0 && dt == 0 {
                        continue;
                    }
                    let (rr, tt) = (r as isize + dr, t as isize + dt);
                    if rr < 0 || tt < 0 || rr >= max_duration as isize || tt >= temporal_scale as isize {
                        continue;
                    }
                    let (rr, tt) = (rr as usize, tt as usize);
                    if valid[[rr, tt]] && g_iou[[rr, tt]] > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                bin[[r, t]] = 1.0;
            }
        }
    }
    Ok((bin, g_iou, valid))
}

/// Rescales a record's actions to snippet coordinates and builds every target.
pub fn build_targets(rec: &VideoRecord, cfg: &ModelConfig) -> Result<SupervisionTargets> {
    if rec.actions.is_empty() {
        return Err(Error::Invalid(format!("{}: no ground-truth actions to train on", rec.video_id)));
    }
    let t = cfg.temporal_scale;
    let actions = rec
        .actions
        .iter()
        .map(|a| seconds_to_snippets(a, rec, t))
        .collect::<Result<Vec<_>>>()?;
    let rule = OverlapRule {
        norm: cfg.overlap_norm,
        aggregate: cfg.overlap_aggregate,
    };
    let (l_start, l_end) = boundary_labels(&actions, t, rule)?;
    let (l_duration, g_iou, valid_mask) = duration_labels(&actions, t, cfg.max_duration)?;
    Ok(SupervisionTargets {
        l_start,
        l_end,
        l_duration,
        g_iou,
        valid_mask,
    })
}
