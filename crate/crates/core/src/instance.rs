//! Instance-level completeness learning: boundary-sensitive proposal
//! features, the completeness score head, the boundary regression head, and
//! their losses against reliable-proposal targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::data::{Proposal, ProposalTag};
use crate::error::{Error, Result};
use crate::model::Linear;
use crate::proposals::iou_raw;

/// Score and regression heads. Each is two dense layers with a ReLU between
/// (a kernel-1 temporal convolution pair applied to one pooled feature
/// vector). The score head maps the 3D-dim boundary-sensitive feature to a
/// completeness probability; the regression head maps the 2D-dim flank
/// feature to boundary offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceHeads {
    pub score1: Linear,
    pub score2: Linear,
    pub reg1: Linear,
    pub reg2: Linear,
    pub d: usize,
    /// Whether each head went through training; untrained heads contribute
    /// nothing at inference.
    pub score_trained: bool,
    pub reg_trained: bool,
}

impl InstanceHeads {
    pub fn new(seed: u64, d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InstanceHeads {
            score1: Linear::xavier(&mut rng, 3 * d, d),
            score2: Linear::xavier(&mut rng, d, 1),
            reg1: Linear::xavier(&mut rng, 2 * d, d),
            reg2: Linear::xavier(&mut rng, d, 2),
            d,
            score_trained: false,
            reg_trained: false,
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.score1.w,
            &self.score1.b,
            &self.score2.w,
            &self.score2.b,
            &self.reg1.w,
            &self.reg1.b,
            &self.reg2.w,
            &self.reg2.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.score1.w,
            &mut self.score1.b,
            &mut self.score2.w,
            &mut self.score2.b,
            &mut self.reg1.w,
            &mut self.reg1.b,
            &mut self.reg2.w,
            &mut self.reg2.b,
        ]
    }
}

pub struct BoundInstanceHeads<'t> {
    pub score1: crate::model::BoundLinear<'t>,
    pub score2: crate::model::BoundLinear<'t>,
    pub reg1: crate::model::BoundLinear<'t>,
    pub reg2: crate::model::BoundLinear<'t>,
    pub param_vars: Vec<Var<'t>>,
}

pub fn bind_instance_heads<'t>(tape: &'t Tape, heads: &InstanceHeads) -> BoundInstanceHeads<'t> {
    let bind = |l: &Linear, vars: &mut Vec<Var<'t>>| {
        let w = tape.leaf(l.w.clone());
        let b = tape.leaf(l.b.clone());
        vars.push(w);
        vars.push(b);
        crate::model::BoundLinear { w, b }
    };
    let mut vars = Vec::new();
    BoundInstanceHeads {
        score1: bind(&heads.score1, &mut vars),
        score2: bind(&heads.score2, &mut vars),
        reg1: bind(&heads.reg1, &mut vars),
        reg2: bind(&heads.reg2, &mut vars),
        param_vars: vars,
    }
}

/// Integer snippet ranges of the three proposal regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionSpans {
    pub start: (usize, usize),
    pub center: (usize, usize),
    pub end: (usize, usize),
}

/// Snaps a (possibly fractional) span to snippet regions: the center covers
/// `[floor(start), ceil(end))`, each flank covers `ceil(epsilon * len)`
/// snippets (at least one), clipped to the video; an empty flank at a video
/// edge falls back to the adjacent center snippet.
pub fn proposal_regions(
    t_len: usize,
    start: f64,
    end: f64,
    epsilon: f64,
) -> Result<RegionSpans> {
    if !(start < end) || t_len == 0 {
        return Err(Error::DegenerateSpan { start, end });
    }
    let cs = (start.floor().max(0.0) as usize).min(t_len - 1);
    let ce = (end.ceil() as usize).clamp(cs + 1, t_len);
    let flank = (((end - start) * epsilon).ceil() as usize).max(1);
    let start_region = if cs == 0 {
        (cs, cs + 1)
    } else {
        (cs.saturating_sub(flank), cs)
    };
    let end_region = if ce == t_len {
        (ce - 1, ce)
    } else {
        (ce, (ce + flank).min(t_len))
    };
    Ok(RegionSpans {
        start: start_region,
        center: (cs, ce),
        end: end_region,
    })
}

/// Region feature matrices and their temporal max-pools.
#[derive(Debug, Clone)]
pub struct ProposalFeatures {
    pub region_start: Matrix,
    pub region_center: Matrix,
    pub region_end: Matrix,
    pub pooled_start: Vec<f64>,
    pub pooled_center: Vec<f64>,
    pub pooled_end: Vec<f64>,
}

fn pool_cols(m: &Matrix) -> Vec<f64> {
    (0..m.ncols())
        .map(|c| m.column(c).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Extracts start/center/end region features of a proposal from the T x D
/// feature matrix.
pub fn proposal_features(
    x: &Matrix,
    start: f64,
    end: f64,
    epsilon: f64,
) -> Result<ProposalFeatures> {
    let spans = proposal_regions(x.nrows(), start, end, epsilon)?;
    let slice = |(a, b): (usize, usize)| x.slice(ndarray::s![a..b, ..]).to_owned();
    let region_start = slice(spans.start);
    let region_center = slice(spans.center);
    let region_end = slice(spans.end);
    Ok(ProposalFeatures {
        pooled_start: pool_cols(&region_start),
        pooled_center: pool_cols(&region_center),
        pooled_end: pool_cols(&region_end),
        region_start,
        region_center,
        region_end,
    })
}

/// Tape-side pooled region features (each 1 x D).
fn pooled_vars<'t>(x: Var<'t>, spans: RegionSpans) -> (Var<'t>, Var<'t>, Var<'t>) {
    let pool = |(a, b): (usize, usize)| x.slice_rows(a, b).max_pool_cols();
    (pool(spans.start), pool(spans.center), pool(spans.end))
}

/// Completeness score of one proposal: the score head applied to
/// `[center - start ; center ; center - end]` pooled features.
pub fn completeness_forward<'t>(
    x: Var<'t>,
    spans: RegionSpans,
    heads: &BoundInstanceHeads<'t>,
) -> Var<'t> {
    let (s, c, e) = pooled_vars(x, spans);
    let input = c.sub(s).concat_cols(c).concat_cols(c.sub(e));
    heads
        .score2
        .apply(heads.score1.apply(input).relu())
        .sigmoid()
}

/// Boundary offsets `(ds, de)` of one proposal: the regression head applied
/// to `[start ; end]` pooled features. Returns a 1 x 2 var.
pub fn regression_forward<'t>(
    x: Var<'t>,
    spans: RegionSpans,
    heads: &BoundInstanceHeads<'t>,
) -> Var<'t> {
    let (s, _, e) = pooled_vars(x, spans);
    let input = s.concat_cols(e);
    heads.reg2.apply(heads.reg1.apply(input).relu())
}

/// Applies predicted offsets to a proposal span: `s - ds*w`, `e - de*w`,
/// clipped to `[0, T]`. A refinement that collapses the span is rejected and
/// the original span kept (`refined = false` in the result).
pub fn refine_proposal(p: &Proposal, ds: f64, de: f64, t_len: usize) -> (Proposal, bool) {
    let w = p.end - p.start;
    let s_r = (p.start - ds * w).clamp(0.0, t_len as f64);
    let e_r = (p.end - de * w).clamp(0.0, t_len as f64);
    if s_r >= e_r {
        return (p.clone(), false);
    }
    let mut out = p.clone();
    out.start = s_r;
    out.end = e_r;
    (out, true)
}

/// Highest temporal IoU between the proposal and any same-class reliable
/// proposal; 0 when none exists.
pub fn match_to_rp(p: &Proposal, rps: &[Proposal]) -> f64 {
    best_rp(p.label, (p.start, p.end), rps)
        .map(|(_, iou)| iou)
        .unwrap_or(0.0)
}

/// Index and IoU of the best same-class reliable proposal (first index on
/// ties, which also pins the disjoint all-zero case).
pub fn best_rp(label: usize, span: (f64, f64), rps: &[Proposal]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, rp) in rps.iter().enumerate() {
        if rp.label != label {
            continue;
        }
        let iou = iou_raw(span, (rp.start, rp.end));
        match best {
            Some((_, b)) if iou <= b => {}
            _ => best = Some((i, iou)),
        }
    }
    best
}

/// One scored training sample: a proposal span with a completeness target.
#[derive(Debug, Clone)]
pub struct ScoreSample {
    pub span: (f64, f64),
    pub target: f64,
}

/// Builds the score-loss sample set from positive and negative proposals.
/// Positives target their IoU against the best same-class reliable proposal;
/// negatives are paired with each video-level class and (almost always)
/// target zero. With `rp_matching` off the targets fall back to 1 for
/// positives and 0 for negatives.
pub fn score_samples(
    pps: &[Proposal],
    nps: &[Proposal],
    rps: &[Proposal],
    video_classes: &[usize],
    rp_matching: bool,
    include_np: bool,
) -> Vec<ScoreSample> {
    let mut out = Vec::new();
    for pp in pps {
        debug_assert_eq!(pp.tag, ProposalTag::Pp);
        let target = if rp_matching { match_to_rp(pp, rps) } else { 1.0 };
        out.push(ScoreSample {
            span: (pp.start, pp.end),
            target,
        });
    }
    if include_np {
        for np in nps {
            for &c in video_classes {
                let target = if rp_matching {
                    best_rp(c, (np.start, np.end), rps)
                        .map(|(_, iou)| iou)
                        .unwrap_or(0.0)
                } else {
                    0.0
                };
                out.push(ScoreSample {
                    span: (np.start, np.end),
                    target,
                });
            }
        }
    }
    out
}

/// Mean smooth-L1 between predicted completeness and targets over the
/// sample set; zero when the set is empty.
pub fn loss_score<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    heads: &BoundInstanceHeads<'t>,
    samples: &[ScoreSample],
    epsilon: f64,
) -> Result<Var<'t>> {
    if samples.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let t_len = x.shape().0;
    let mut acc = tape.scalar(0.0);
    for sample in samples {
        let spans = proposal_regions(t_len, sample.span.0, sample.span.1, epsilon)?;
        let pred = completeness_forward(x, spans, heads);
        let term = pred.add_scalar(-sample.target).smooth_l1();
        acc = acc.add(term);
    }
    Ok(acc.mul_scalar(1.0 / samples.len() as f64))
}

/// Differentiable IoU between the refined span (driven by offset vars) and a
/// fixed target span, clipped to the video. Disjoint configurations have
/// zero gradient.
pub fn refined_iou<'t>(
    tape: &'t Tape,
    ds: Var<'t>,
    de: Var<'t>,
    span: (f64, f64),
    target: (f64, f64),
    t_len: usize,
) -> Var<'t> {
    let w = span.1 - span.0;
    let t_max = t_len as f64;
    let s_r = ds.mul_scalar(-w).add_scalar(span.0).clamp(0.0, t_max);
    let e_r = de.mul_scalar(-w).add_scalar(span.1).clamp(0.0, t_max);
    let t_start = tape.scalar(target.0);
    let t_end = tape.scalar(target.1);
    let inter = e_r.min_elem(t_end).sub(s_r.max_elem(t_start)).relu();
    let len_r = e_r.sub(s_r).relu();
    let union = len_r.add_scalar(target.1 - target.0).sub(inter);
    inter.div(union)
}

/// Mean smooth-L1 pulling the refined-vs-target IoU of each positive
/// proposal toward 1. Positives without a same-class reliable proposal are
/// skipped; with `rp_matching` off each positive regresses toward its own
/// span. Zero when nothing matches.
pub fn loss_reg<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    heads: &BoundInstanceHeads<'t>,
    pps: &[Proposal],
    rps: &[Proposal],
    epsilon: f64,
    rp_matching: bool,
) -> Result<Var<'t>> {
    let t_len = x.shape().0;
    let mut acc = tape.scalar(0.0);
    let mut count = 0usize;
    for pp in pps {
        let target = if rp_matching {
            match best_rp(pp.label, (pp.start, pp.end), rps) {
                Some((idx, _)) => (rps[idx].start, rps[idx].end),
                None => continue,
            }
        } else {
            (pp.start, pp.end)
        };
        let spans = proposal_regions(t_len, pp.start, pp.end, epsilon)?;
        let deltas = regression_forward(x, spans, heads);
        let ds = deltas.gather_elems(&[(0, 0)]);
        let de = deltas.gather_elems(&[(0, 1)]);
        let iou = refined_iou(tape, ds, de, (pp.start, pp.end), target, t_len);
        acc = acc.add(iou.add_scalar(-1.0).smooth_l1());
        count += 1;
    }
    if count == 0 {
        return Ok(tape.scalar(0.0));
    }
    Ok(acc.mul_scalar(1.0 / count as f64))
}

/// Plain-value completeness score of a span (used at inference).
pub fn completeness_value(
    x: &Matrix,
    heads: &InstanceHeads,
    start: f64,
    end: f64,
    epsilon: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = bind_instance_heads(&tape, heads);
    let xv = tape.leaf(x.clone());
    let spans = proposal_regions(x.nrows(), start, end, epsilon)?;
    Ok(completeness_forward(xv, spans, &bound).scalar_value())
}

/// Plain-value regression offsets of a span (used at inference).
pub fn regression_value(
    x: &Matrix,
    heads: &InstanceHeads,
    start: f64,
    end: f64,
    epsilon: f64,
) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let bound = bind_instance_heads(&tape, heads);
    let xv = tape.leaf(x.clone());
    let spans = proposal_regions(x.nrows(), start, end, epsilon)?;
    let d = regression_forward(xv, spans, &bound).value();
    Ok((d[[0, 0]], d[[0, 1]]))
}
