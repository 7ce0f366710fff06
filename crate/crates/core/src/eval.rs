//! Detection evaluation: greedy IoU matching and all-points interpolated
//! average precision per (class, threshold), with class means per threshold
//! and threshold-range averages.

use std::collections::BTreeMap;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Detection, GtInstance};
use crate::proposals::iou_raw;

/// Detections and ground truth for one corpus, keyed by video id.
pub type DetectionMap = BTreeMap<String, Vec<Detection>>;
pub type GtMap = BTreeMap<String, Vec<GtInstance>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub class_names: Vec<String>,
    /// `per_class_ap[class][threshold]`; `None` marks classes without ground
    /// truth, which are excluded from the means.
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    /// Mean AP over classes with ground truth, per threshold.
    pub map_per_threshold: Vec<f64>,
    /// Named threshold-range averages of `map_per_threshold`.
    pub average_map: BTreeMap<String, f64>,
    pub excluded_classes: Vec<usize>,
    /// AP is averaged over classes per threshold first, then over
    /// thresholds.
    pub averaging_order: String,
}

impl EvalReport {
    pub fn average(&self, key: &str) -> Option<f64> {
        self.average_map.get(key).copied()
    }
}

/// All-points interpolated AP from a ranked TP/FP sequence.
fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let n = hits.len();
    if n == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope from the right.
    for k in (0..n - 1).rev() {
        precisions[k] = precisions[k].max(precisions[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        if recalls[k] > prev_recall {
            ap += (recalls[k] - prev_recall) * precisions[k];
            prev_recall = recalls[k];
        }
    }
    ap
}

/// AP of one class at one IoU threshold over all videos.
fn class_ap(
    dets: &DetectionMap,
    gts: &GtMap,
    class: usize,
    threshold: f64,
) -> Option<f64> {
    let n_gt: usize = gts
        .values()
        .map(|v| v.iter().filter(|g| g.label == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    // Rank detections by confidence; ties by video id, start, end.
    let mut ranked: Vec<(&String, &Detection)> = Vec::new();
    for (vid, ds) in dets {
        for d in ds.iter().filter(|d| d.label == class) {
            ranked.push((vid, d));
        }
    }
    ranked.sort_by(|(va, a), (vb, b)| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then_with(|| va.cmp(vb))
            .then(a.start.partial_cmp(&b.start).unwrap())
            .then(a.end.partial_cmp(&b.end).unwrap())
    });

    // Greedy matching: each detection takes the unmatched gt with highest
    // IoU (first index on ties); a match below the threshold is a FP.
    let mut matched: BTreeMap<&String, Vec<bool>> = BTreeMap::new();
    let mut hits = Vec::with_capacity(ranked.len());
    for (vid, d) in &ranked {
        let video_gts = gts.get(*vid);
        let mut best: Option<(usize, f64)> = None;
        if let Some(video_gts) = video_gts {
            let taken = matched
                .entry(vid)
                .or_insert_with(|| vec![false; video_gts.len()]);
            for (gi, g) in video_gts.iter().enumerate() {
                if g.label != class || taken[gi] {
                    continue;
                }
                let iou = iou_raw((d.start, d.end), (g.start, g.end));
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
        }
        match best {
            Some((gi, iou)) if iou >= threshold => {
                matched.get_mut(vid).unwrap()[gi] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    Some(average_precision(&hits, n_gt))
}

/// Standard threshold-range averages reported when the threshold grid
/// contains the whole range.
const AVERAGE_RANGES: [(&str, f64, f64); 3] = [
    ("0.1:0.5", 0.1, 0.5),
    ("0.3:0.7", 0.3, 0.7),
    ("0.1:0.7", 0.1, 0.7),
];

pub fn evaluate_map(
    dets: &DetectionMap,
    gts: &GtMap,
    class_names: &[String],
    thresholds: &[f64],
) -> EvalReport {
    let num_classes = class_names.len();
    let cells: Vec<((usize, usize), Option<f64>)> = (0..num_classes)
        .flat_map(|c| (0..thresholds.len()).map(move |ti| (c, ti)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(c, ti)| (((c, ti)), class_ap(dets, gts, c, thresholds[ti])))
        .collect();
    let mut per_class_ap = vec![vec![None; thresholds.len()]; num_classes];
    for ((c, ti), ap) in cells {
        per_class_ap[c][ti] = ap;
    }

    let excluded_classes: Vec<usize> = (0..num_classes)
        .filter(|&c| per_class_ap[c].iter().all(Option::is_none))
        .collect();
    for &c in &excluded_classes {
        info!(
            "class {c} ('{}') has no ground-truth instances; excluded from means",
            class_names.get(c).map(String::as_str).unwrap_or("?")
        );
    }

    let map_per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|ti| {
            let aps: Vec<f64> = (0..num_classes)
                .filter_map(|c| per_class_ap[c][ti])
                .collect();
            if aps.is_empty() {
                0.0
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            }
        })
        .collect();

    let mut average_map = BTreeMap::new();
    for (name, lo, hi) in AVERAGE_RANGES {
        let members: Vec<f64> = thresholds
            .iter()
            .zip(map_per_threshold.iter())
            .filter(|(&t, _)| t >= lo - 1e-9 && t <= hi + 1e-9)
            .map(|(_, &m)| m)
            .collect();
        let span_covered = thresholds.iter().any(|&t| (t - lo).abs() < 1e-9)
            && thresholds.iter().any(|&t| (t - hi).abs() < 1e-9);
        if span_covered && !members.is_empty() {
            average_map.insert(
                name.to_string(),
                members.iter().sum::<f64>() / members.len() as f64,
            );
        }
    }

    EvalReport {
        thresholds: thresholds.to_vec(),
        class_names: class_names.to_vec(),
        per_class_ap,
        map_per_threshold,
        average_map,
        excluded_classes,
        averaging_order: "classes per threshold, then thresholds".to_string(),
    }
}

/// Parses `lo:hi:step` (inclusive ends) or a comma list into thresholds.
pub fn parse_thresholds(text: &str) -> crate::error::Result<Vec<f64>> {
    let bad = |m: String| crate::error::Error::Config(m);
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(bad(format!("expected lo:hi:step, got '{text}'")));
        }
        let lo: f64 = parts[0].parse().map_err(|_| bad(format!("bad lo in '{text}'")))?;
        let hi: f64 = parts[1].parse().map_err(|_| bad(format!("bad hi in '{text}'")))?;
        let step: f64 = parts[2]
            .parse()
            .map_err(|_| bad(format!("bad step in '{text}'")))?;
        if step <= 0.0 || hi < lo {
            return Err(bad(format!("invalid range '{text}'")));
        }
        let n = ((hi - lo) / step + 0.5).round() as usize;
        Ok((0..=n).map(|i| lo + i as f64 * step).collect())
    } else {
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad threshold '{s}'")))
            })
            .collect()
    }
}
