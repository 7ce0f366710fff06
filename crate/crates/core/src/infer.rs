//! Detection assembly: per-class candidates, score/boundary refinement when
//! instance heads are available, and class-wise soft suppression.

use rayon::prelude::*;

use crate::data::{Config, Detection, VideoRecord};
use crate::error::Result;
use crate::instance::{completeness_value, refine_proposal, regression_value, InstanceHeads};
use crate::memory::PrototypeMemory;
use crate::model::{snippet_outputs, SnippetNet};
use crate::proposals::{candidate_proposals, iou_raw, video_level_classes};

/// Gaussian-decay soft suppression over one class's detections: repeatedly
/// keep the highest-confidence detection and multiply every remaining
/// confidence by `exp(-iou^2 / sigma)`; detections falling below `min_score`
/// are dropped. Ties break toward the earlier start, then earlier end, then
/// input order. Output confidences are non-increasing.
pub fn soft_nms(dets: &[Detection], sigma: f64, min_score: f64) -> Vec<Detection> {
    assert!(sigma > 0.0);
    let mut pool: Vec<(Detection, usize)> = dets.iter().cloned().zip(0..).collect();
    let mut keep = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let (a, ai) = (&pool[i].0, pool[i].1);
            let (b, bi) = (&pool[best].0, pool[best].1);
            let better = a.confidence > b.confidence
                || (a.confidence == b.confidence
                    && (a.start < b.start
                        || (a.start == b.start
                            && (a.end < b.end || (a.end == b.end && ai < bi)))));
            if better {
                best = i;
            }
        }
        let (top, _) = pool.swap_remove(best);
        for (d, _) in pool.iter_mut() {
            let iou = iou_raw((d.start, d.end), (top.start, top.end));
            d.confidence *= (-iou * iou / sigma).exp();
        }
        pool.retain(|(d, _)| d.confidence >= min_score);
        keep.push(top);
    }
    keep
}

/// Applies [`soft_nms`] independently per class label.
pub fn soft_nms_by_class(dets: Vec<Detection>, sigma: f64, min_score: f64) -> Vec<Detection> {
    let mut labels: Vec<usize> = dets.iter().map(|d| d.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut out = Vec::with_capacity(dets.len());
    for label in labels {
        let class_dets: Vec<Detection> =
            dets.iter().filter(|d| d.label == label).cloned().collect();
        out.extend(soft_nms(&class_dets, sigma, min_score));
    }
    out.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.start.partial_cmp(&b.start).unwrap())
            .then(a.end.partial_cmp(&b.end).unwrap())
            .then(a.label.cmp(&b.label))
    });
    out
}

/// Detections for one video. With instance heads, every candidate yields a
/// score-refined detection `(s, e, c, oic + completeness)` and - when the
/// regression head is trained - a boundary-refined one
/// `(s_r, e_r, c, oic + completeness-of-refined)`; without heads, candidates
/// are emitted with their OIC score alone. Class-wise soft suppression runs
/// over the union.
pub fn infer_video(
    record: &VideoRecord,
    net: &SnippetNet,
    memory: &PrototypeMemory,
    heads: Option<&InstanceHeads>,
    config: &Config,
) -> Result<Vec<Detection>> {
    let outs = snippet_outputs(
        net,
        &record.features,
        memory.prototypes(),
        config.enable_rab,
    );
    let t_len = record.num_snippets();
    let classes = video_level_classes(&outs.fused, config.video_cls_threshold);
    let mut dets: Vec<Detection> = Vec::new();
    for &c in &classes {
        let seq: Vec<f64> = outs.fused.column(c).to_vec();
        let candidates = candidate_proposals(&seq, &config.theta_p, c, config.epsilon)?;
        for cand in candidates {
            match heads {
                Some(h) => {
                    let p_comp = if h.score_trained {
                        completeness_value(&outs.x_rab, h, cand.start, cand.end, config.epsilon)?
                    } else {
                        0.0
                    };
                    dets.push(Detection {
                        start: cand.start,
                        end: cand.end,
                        label: c,
                        confidence: cand.score_oic + p_comp,
                    });
                    if h.reg_trained {
                        let (ds, de) =
                            regression_value(&outs.x_rab, h, cand.start, cand.end, config.epsilon)?;
                        let (refined, _) = refine_proposal(&cand, ds, de, t_len);
                        let p_r = if h.score_trained {
                            completeness_value(
                                &outs.x_rab,
                                h,
                                refined.start,
                                refined.end,
                                config.epsilon,
                            )?
                        } else {
                            0.0
                        };
                        dets.push(Detection {
                            start: refined.start,
                            end: refined.end,
                            label: c,
                            confidence: cand.score_oic + p_r,
                        });
                    }
                }
                None => dets.push(Detection {
                    start: cand.start,
                    end: cand.end,
                    label: c,
                    confidence: cand.score_oic,
                }),
            }
        }
    }
    Ok(soft_nms_by_class(
        dets,
        config.nms_sigma,
        config.nms_min_score,
    ))
}

/// Parallel inference over a corpus; output order follows the input.
pub fn infer_corpus(
    videos: &[VideoRecord],
    net: &SnippetNet,
    memory: &PrototypeMemory,
    heads: Option<&InstanceHeads>,
    config: &Config,
) -> Result<Vec<(String, Vec<Detection>)>> {
    videos
        .par_iter()
        .map(|v| {
            infer_video(v, net, memory, heads, config)
                .map(|dets| (v.video_id.clone(), dets))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(start: f64, end: f64, label: usize, confidence: f64) -> Detection {
        Detection {
            start,
            end,
            label,
            confidence,
        }
    }

    #[test]
    fn disjoint_detections_keep_their_confidence() {
        let dets = vec![det(0.0, 5.0, 0, 0.9), det(10.0, 15.0, 0, 0.8)];
        let out = soft_nms(&dets, 0.4, 1e-3);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].confidence, 0.9);
        assert_eq!(out[1].confidence, 0.8);
    }

    #[test]
    fn identical_spans_gaussian_decay_value() {
        let dets = vec![det(3.0, 9.0, 0, 0.9), det(3.0, 9.0, 0, 0.9)];
        let out = soft_nms(&dets, 0.4, 1e-3);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].confidence, 0.9);
        let expect = 0.9 * (-1.0f64 / 0.4).exp();
        assert!((out[1].confidence - expect).abs() < 1e-12);
        assert!((out[1].confidence - 0.0739).abs() < 1e-4);
    }

    #[test]
    fn popped_confidences_are_non_increasing() {
        let mut rng_state = 99u64;
        let mut next = || {
            rng_state = rng_state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (rng_state >> 33) as f64 / (1u64 << 31) as f64
        };
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..12)
                .map(|_| {
                    let s = next() * 30.0;
                    det(s, s + 1.0 + next() * 10.0, 0, next())
                })
                .collect();
            let out = soft_nms(&dets, 0.4, 1e-3);
            for w in out.windows(2) {
                assert!(w[0].confidence >= w[1].confidence - 1e-12);
            }
        }
    }

    #[test]
    fn tiny_sigma_approaches_hard_suppression() {
        // With sigma -> 0+, every detection overlapping a kept one (iou
        // bounded away from zero) is suppressed below min_score.
        let dets = vec![
            det(0.0, 10.0, 0, 0.9),
            det(1.0, 11.0, 0, 0.8),
            det(3.0, 12.0, 0, 0.7),
            det(50.0, 60.0, 0, 0.6),
        ];
        let out = soft_nms(&dets, 1e-6, 1e-3);
        let spans: Vec<(f64, f64)> = out.iter().map(|d| (d.start, d.end)).collect();
        assert_eq!(spans, vec![(0.0, 10.0), (50.0, 60.0)]);
    }

    #[test]
    fn suppression_is_class_wise() {
        let dets = vec![det(0.0, 10.0, 0, 0.9), det(0.0, 10.0, 1, 0.8)];
        let out = soft_nms_by_class(dets, 0.4, 1e-3);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|d| d.confidence >= 0.8));
    }
}
