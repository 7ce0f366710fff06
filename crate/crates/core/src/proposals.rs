//! From snippet scores to instances: video-level class selection,
//! multi-threshold candidate grouping, outer-inner-contrast reliability
//! scoring, and ranking into reliable / positive / negative proposals.

use log::warn;

use crate::data::{PointAnnotation, Proposal, ProposalTag};
use crate::error::{Error, Result};

/// Temporal intersection-over-union of two half-open spans.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(s < e) {
            return Err(Error::DegenerateSpan { start: s, end: e });
        }
    }
    Ok(iou_raw(a, b))
}

pub(crate) fn iou_raw(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    inter / union
}

/// Classes whose top-k mean fused score clears `threshold`, k = max(1, T/8).
/// Falls back to the single best class (smallest index on ties) when none
/// clears it.
pub fn video_level_classes(fused: &ndarray::Array2<f64>, threshold: f64) -> Vec<usize> {
    let t = fused.nrows();
    let c = fused.ncols();
    if t == 0 || c == 0 {
        return Vec::new();
    }
    let k = (t / 8).max(1);
    let mut scores = Vec::with_capacity(c);
    for col in 0..c {
        let mut vals: Vec<f64> = fused.column(col).to_vec();
        vals.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
        let topk = &vals[..k.min(vals.len())];
        scores.push(topk.iter().sum::<f64>() / topk.len() as f64);
    }
    let selected: Vec<usize> = (0..c).filter(|&i| scores[i] >= threshold).collect();
    if !selected.is_empty() {
        return selected;
    }
    let mut best = 0;
    for i in 1..c {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    vec![best]
}

/// Maximal runs of `seq[t] > theta` for each threshold, unioned with exact
/// duplicates removed. Spans are half-open `(start, end)` in snippets.
pub fn generate_candidates(seq: &[f64], thresholds: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &theta in thresholds {
        let mut run_start: Option<usize> = None;
        for (t, &v) in seq.iter().enumerate() {
            if v > theta {
                run_start.get_or_insert(t);
            } else if let Some(s) = run_start.take() {
                out.push((s, t));
            }
        }
        if let Some(s) = run_start {
            out.push((s, seq.len()));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Outer-inner-contrast score: mean of `seq` inside `[start, end)` minus the
/// mean over the two flanking regions of `ceil(len * inflation)` snippets
/// (clipped to the video; both flanks empty means outer = 0).
pub fn oic_score(seq: &[f64], start: usize, end: usize, inflation: f64) -> Result<f64> {
    if start >= end || end > seq.len() {
        return Err(Error::DegenerateSpan {
            start: start as f64,
            end: end as f64,
        });
    }
    let len = end - start;
    let flank = ((len as f64 * inflation).ceil() as usize).max(1);
    let inner: f64 = seq[start..end].iter().sum::<f64>() / len as f64;
    let left_lo = start.saturating_sub(flank);
    let right_hi = (end + flank).min(seq.len());
    let outer_count = (start - left_lo) + (right_hi - end);
    let outer = if outer_count == 0 {
        0.0
    } else {
        let sum: f64 = seq[left_lo..start].iter().sum::<f64>()
            + seq[end..right_hi].iter().sum::<f64>();
        sum / outer_count as f64
    };
    Ok(inner - outer)
}

/// Candidate proposals of one class from its fused score sequence, each
/// scored with the outer-inner contrast on that same sequence.
pub fn candidate_proposals(
    seq: &[f64],
    thresholds: &[f64],
    label: usize,
    inflation: f64,
) -> Result<Vec<Proposal>> {
    generate_candidates(seq, thresholds)
        .into_iter()
        .map(|(s, e)| {
            Ok(Proposal::candidate(
                s as f64,
                e as f64,
                label,
                oic_score(seq, s, e, inflation)?,
            ))
        })
        .collect()
}

/// Proposals ranked by reliability.
#[derive(Debug, Clone, Default)]
pub struct RankedProposals {
    /// Per point: the highest-OIC candidate of the point's class containing
    /// it. Deduplicated when one candidate covers several points.
    pub rp: Vec<Proposal>,
    /// All remaining candidates.
    pub pp: Vec<Proposal>,
    /// Low-attention spans; class-agnostic (their `label` is meaningless and
    /// set to 0). OIC here is computed on the attention sequence, for
    /// diagnostics only.
    pub np: Vec<Proposal>,
}

impl RankedProposals {
    pub fn n_p(&self) -> usize {
        self.pp.len()
    }

    pub fn n_n(&self) -> usize {
        self.np.len()
    }
}

/// Splits candidates into reliable and positive proposals and mines negative
/// proposals from low-attention runs.
pub fn rank_proposals(
    candidates: Vec<Proposal>,
    points: &[PointAnnotation],
    attention: &[f64],
    theta_a: &[f64],
    inflation: f64,
) -> RankedProposals {
    let mut is_rp = vec![false; candidates.len()];
    for p in points {
        let mut best: Option<usize> = None;
        for (i, cand) in candidates.iter().enumerate() {
            if cand.label != p.label || !cand.contains_point(p.t) {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(j) => {
                    let (a, b) = (&candidates[i], &candidates[j]);
                    let better = a.score_oic > b.score_oic
                        || (a.score_oic == b.score_oic
                            && (a.len() > b.len()
                                || (a.len() == b.len() && a.start < b.start)));
                    Some(if better { i } else { j })
                }
            };
        }
        match best {
            Some(i) => is_rp[i] = true,
            None => warn!(
                "point t={} label={} is covered by no candidate; no reliable proposal",
                p.t, p.label
            ),
        }
    }

    let mut rp = Vec::new();
    let mut pp = Vec::new();
    for (i, mut cand) in candidates.into_iter().enumerate() {
        if is_rp[i] {
            cand.tag = ProposalTag::Rp;
            rp.push(cand);
        } else {
            cand.tag = ProposalTag::Pp;
            pp.push(cand);
        }
    }

    let np = generate_negative_proposals(attention, theta_a, inflation);
    RankedProposals { rp, pp, np }
}

/// Runs of attention strictly below each threshold, deduplicated.
fn generate_negative_proposals(
    attention: &[f64],
    theta_a: &[f64],
    inflation: f64,
) -> Vec<Proposal> {
    let mut spans = Vec::new();
    for &theta in theta_a {
        let mut run_start: Option<usize> = None;
        for (t, &a) in attention.iter().enumerate() {
            if a < theta {
                run_start.get_or_insert(t);
            } else if let Some(s) = run_start.take() {
                spans.push((s, t));
            }
        }
        if let Some(s) = run_start {
            spans.push((s, attention.len()));
        }
    }
    spans.sort_unstable();
    spans.dedup();
    spans
        .into_iter()
        .map(|(s, e)| {
            let score = oic_score(attention, s, e, inflation).unwrap_or(0.0);
            Proposal {
                start: s as f64,
                end: e as f64,
                label: 0,
                score_oic: score,
                score_comp: None,
                tag: ProposalTag::Np,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_reference_values() {
        assert_eq!(temporal_iou((2.0, 9.0), (2.0, 9.0)).unwrap(), 1.0);
        let v = temporal_iou((0.0, 10.0), (5.0, 15.0)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(temporal_iou((0.0, 2.0), (5.0, 7.0)).unwrap(), 0.0);
        assert!(temporal_iou((3.0, 3.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn video_classes_basic_and_fallback() {
        let mut fused = ndarray::Array2::zeros((8, 3));
        fused.column_mut(1).fill(1.0);
        assert_eq!(video_level_classes(&fused, 0.5), vec![1]);

        let flat = ndarray::Array2::from_elem((8, 3), 0.4);
        assert_eq!(video_level_classes(&flat, 0.5), vec![0]);
    }

    #[test]
    fn video_classes_top_k_mean() {
        // T=8 -> k=1; a single 0.6 peak suffices.
        let mut fused = ndarray::Array2::zeros((8, 2));
        fused[[3, 1]] = 0.6;
        assert_eq!(video_level_classes(&fused, 0.5), vec![1]);
    }

    #[test]
    fn candidate_grouping_single_threshold() {
        let spans = generate_candidates(&[0.9, 0.9, 0.1, 0.8], &[0.5]);
        assert_eq!(spans, vec![(0, 2), (3, 4)]);
        assert!(generate_candidates(&[0.0, 0.0], &[0.1, 0.5]).is_empty());
    }

    #[test]
    fn candidate_grouping_multi_threshold_dedup() {
        let spans = generate_candidates(&[0.3, 0.9, 0.9, 0.3], &[0.25, 0.5]);
        assert_eq!(spans, vec![(0, 4), (1, 3)]);
    }

    #[test]
    fn candidate_union_is_monotone_in_threshold_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let seq: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
            let a = rng.gen_range(0.0..1.0);
            let b = rng.gen_range(0.0..1.0);
            let single = generate_candidates(&seq, &[a]);
            let double = generate_candidates(&seq, &[a.min(b), a.max(b)]);
            for span in &single {
                assert!(double.contains(span), "{span:?} lost when adding a threshold");
            }
        }
    }

    #[test]
    fn oic_reference_values() {
        let flat = [0.7; 10];
        assert!(oic_score(&flat, 2, 6, 0.25).unwrap().abs() < 1e-12);

        let mut step = vec![0.0; 10];
        for v in step[3..7].iter_mut() {
            *v = 1.0;
        }
        assert!((oic_score(&step, 3, 7, 0.25).unwrap() - 1.0).abs() < 1e-12);

        let seq = [0.2, 0.8, 0.8, 0.2];
        let v = oic_score(&seq, 1, 3, 0.25).unwrap();
        assert!((v - 0.6).abs() < 1e-12);

        assert!(oic_score(&seq, 2, 2, 0.25).is_err());
    }

    #[test]
    fn oic_whole_video_has_zero_outer() {
        let seq = [0.5, 0.6, 0.7];
        let v = oic_score(&seq, 0, 3, 0.25).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
    }

    #[test]
    fn oic_matches_brute_force_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t = rng.gen_range(2..40);
            let seq: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..1.0)).collect();
            let start = rng.gen_range(0..t - 1);
            let end = rng.gen_range(start + 1..=t);
            let inflation = rng.gen_range(0.05..0.9);
            let got = oic_score(&seq, start, end, inflation).unwrap();

            // Brute force: materialize the three regions.
            let flank = ((end - start) as f64 * inflation).ceil().max(1.0) as usize;
            let inner: Vec<f64> = seq[start..end].to_vec();
            let mut outer: Vec<f64> = Vec::new();
            for t_o in (start as i64 - flank as i64)..(start as i64) {
                if t_o >= 0 {
                    outer.push(seq[t_o as usize]);
                }
            }
            for t_o in end..(end + flank) {
                if t_o < seq.len() {
                    outer.push(seq[t_o]);
                }
            }
            let inner_mean = inner.iter().sum::<f64>() / inner.len() as f64;
            let outer_mean = if outer.is_empty() {
                0.0
            } else {
                outer.iter().sum::<f64>() / outer.len() as f64
            };
            let want = inner_mean - outer_mean;
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    fn cand(s: f64, e: f64, label: usize, oic: f64) -> Proposal {
        Proposal::candidate(s, e, label, oic)
    }

    #[test]
    fn single_covering_candidate_becomes_rp() {
        let points = [PointAnnotation { t: 3, label: 0 }];
        let ranked = rank_proposals(
            vec![cand(2.0, 5.0, 0, 0.4)],
            &points,
            &[1.0; 8],
            &[],
            0.25,
        );
        assert_eq!(ranked.rp.len(), 1);
        assert_eq!(ranked.rp[0].tag, ProposalTag::Rp);
        assert!(ranked.pp.is_empty());
    }

    #[test]
    fn higher_oic_candidate_wins_rp() {
        let points = [PointAnnotation { t: 3, label: 0 }];
        let ranked = rank_proposals(
            vec![cand(2.0, 5.0, 0, 0.9), cand(1.0, 6.0, 0, 0.4)],
            &points,
            &[1.0; 8],
            &[],
            0.25,
        );
        assert_eq!(ranked.rp.len(), 1);
        assert_eq!(ranked.rp[0].score_oic, 0.9);
        assert_eq!(ranked.pp.len(), 1);
        assert_eq!(ranked.pp[0].score_oic, 0.4);
    }

    #[test]
    fn oic_tie_prefers_longer_then_earlier() {
        let points = [PointAnnotation { t: 4, label: 0 }];
        let ranked = rank_proposals(
            vec![
                cand(4.0, 6.0, 0, 0.5),
                cand(2.0, 6.0, 0, 0.5),
                cand(3.0, 7.0, 0, 0.5),
            ],
            &points,
            &[1.0; 10],
            &[],
            0.25,
        );
        assert_eq!(ranked.rp.len(), 1);
        assert_eq!((ranked.rp[0].start, ranked.rp[0].end), (2.0, 6.0));
    }

    #[test]
    fn uncovered_point_yields_no_rp() {
        let points = [PointAnnotation { t: 7, label: 0 }];
        let ranked = rank_proposals(
            vec![cand(0.0, 3.0, 0, 0.8)],
            &points,
            &[1.0; 8],
            &[],
            0.25,
        );
        assert!(ranked.rp.is_empty());
        assert_eq!(ranked.pp.len(), 1);
    }

    #[test]
    fn wrong_class_candidate_ignored_for_rp() {
        let points = [PointAnnotation { t: 3, label: 1 }];
        let ranked = rank_proposals(
            vec![cand(2.0, 5.0, 0, 0.9)],
            &points,
            &[1.0; 8],
            &[],
            0.25,
        );
        assert!(ranked.rp.is_empty());
    }

    #[test]
    fn negative_proposals_from_low_attention_runs() {
        let attention = [0.0, 0.0, 0.9, 0.0];
        let ranked = rank_proposals(vec![], &[], &attention, &[0.05], 0.25);
        let spans: Vec<(f64, f64)> = ranked.np.iter().map(|p| (p.start, p.end)).collect();
        assert_eq!(spans, vec![(0.0, 2.0), (3.0, 4.0)]);
        assert!(ranked.np.iter().all(|p| p.tag == ProposalTag::Np));
    }

    #[test]
    fn candidates_partition_into_rp_and_pp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(0..12);
            let candidates: Vec<Proposal> = (0..n)
                .map(|_| {
                    let s = rng.gen_range(0..20) as f64;
                    let e = s + rng.gen_range(1..6) as f64;
                    cand(s, e, rng.gen_range(0..3), rng.gen_range(-0.5..1.0))
                })
                .collect();
            let points: Vec<PointAnnotation> = (0..rng.gen_range(0..4))
                .map(|i| PointAnnotation {
                    t: 2 + i * 6,
                    label: rng.gen_range(0..3),
                })
                .collect();
            let total = candidates.len();
            let ranked = rank_proposals(candidates, &points, &[0.5; 26], &[0.1], 0.25);
            assert_eq!(ranked.rp.len() + ranked.pp.len(), total);
        }
    }

    #[test]
    fn np_spans_avoid_attention_above_max_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let attention: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
        let theta_a: Vec<f64> = (0..=10).map(|i| i as f64 / 100.0).collect();
        let ranked = rank_proposals(vec![], &[], &attention, &theta_a, 0.25);
        let max_theta = 0.10;
        for np in &ranked.np {
            for t in np.start as usize..np.end as usize {
                assert!(attention[t] < max_theta);
            }
        }
    }

    #[test]
    fn whole_video_proposal_from_zero_threshold() {
        // Sigmoid outputs are strictly positive, so theta = 0 yields [0, T).
        let fused = array![[0.1], [0.2], [0.3]];
        let spans = generate_candidates(&fused.column(0).to_vec(), &[0.0]);
        assert_eq!(spans, vec![(0, 3)]);
    }
}
