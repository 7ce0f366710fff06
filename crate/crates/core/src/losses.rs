//! Snippet-stage losses: focal supervision on mined pseudo snippets and the
//! prototype-contrastive term.

use std::collections::BTreeMap;

use crate::autograd::{Matrix, Tape, Var};
use crate::mining::PseudoSnippets;

/// Probabilities are clamped here before logs.
pub const PROB_FLOOR: f64 = 1e-7;
/// Norm floor for L2 normalization in the contrastive similarity.
pub const NORM_FLOOR: f64 = 1e-12;

/// Focal term `-(1 - p)^gamma * ln(p)` on a clamped probability.
pub fn focal_term(p: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0);
    if gamma == 0.0 {
        return -p.ln();
    }
    -(1.0 - p).powf(gamma) * p.ln()
}

/// Tape version of [`focal_term`], elementwise over a k x 1 column.
fn focal_nll<'t>(p: Var<'t>, gamma: f64) -> Var<'t> {
    let p = p.clamp(PROB_FLOOR, 1.0);
    let log_p = p.log();
    if gamma == 0.0 {
        return log_p.neg();
    }
    let one_minus = p.mul_scalar(-1.0).add_scalar(1.0);
    one_minus.powf(gamma).mul(log_p).neg()
}

/// Focal loss over pseudo snippets: action terms push the fused prediction
/// of the snippet's class toward 1, background terms push attention toward 0.
/// Each side is averaged over its own member count; an empty side contributes
/// zero.
pub fn loss_base<'t>(
    tape: &'t Tape,
    fused: Var<'t>,
    attention: Var<'t>,
    ps: &PseudoSnippets,
    gamma: f64,
) -> Var<'t> {
    let mut total: Option<Var<'t>> = None;
    if !ps.action.is_empty() {
        let probs = fused.gather_elems(&ps.action);
        let term = focal_nll(probs, gamma)
            .sum_all()
            .mul_scalar(1.0 / ps.n_act() as f64);
        total = Some(term);
    }
    if !ps.background.is_empty() {
        let elems: Vec<(usize, usize)> = ps.background.iter().map(|&t| (t, 0)).collect();
        let att = attention.gather_elems(&elems);
        let not_action = att.mul_scalar(-1.0).add_scalar(1.0);
        let term = focal_nll(not_action, gamma)
            .sum_all()
            .mul_scalar(1.0 / ps.n_bkg() as f64);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    total.unwrap_or_else(|| tape.scalar(0.0))
}

fn normalize_rows_plain(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.mapv_inplace(|x| x / norm);
    }
    out
}

/// Prototype-contrastive loss over pseudo-action snippets.
///
/// For a snippet of class `c`, two fractions are formed from the similarity
/// `s(x, m) = exp(cos(x, m) / tau)`: the share of `s(x, m_c)` against all
/// class prototypes, and the share of `s(x, m_c)` against the background
/// snippets' similarity to `m_c`. With `split_logs` false the fractions are
/// summed inside one log (so the optimum sits at `-ln 2`); with it true each
/// fraction gets its own log term.
///
/// Per-snippet terms are averaged within each class and the class means are
/// averaged over all `num_classes` classes, which keeps the loss bounded
/// below by `-ln 2` regardless of how many snippets were mined. Prototypes
/// enter as constants: no gradient reaches the memory.
pub fn loss_contra<'t>(
    tape: &'t Tape,
    features: Var<'t>,
    prototypes: &Matrix,
    ps: &PseudoSnippets,
    tau: f64,
    split_logs: bool,
) -> Var<'t> {
    assert!(tau > 0.0, "temperature must be positive");
    let num_classes = prototypes.nrows();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(t, c) in &ps.action {
        groups.entry(c).or_default().push(t);
    }
    if groups.is_empty() {
        return tape.scalar(0.0);
    }

    let protos = tape.leaf(normalize_rows_plain(prototypes));
    let xn = features.normalize_rows(NORM_FLOOR);
    // T x C matrix of exp(cos / tau) against every prototype.
    let sims = xn.matmul(protos.transpose()).mul_scalar(1.0 / tau).exp();
    let bkg_colsum = if ps.background.is_empty() {
        None
    } else {
        Some(sims.select_rows(&ps.background).sum_cols())
    };

    let mut acc = tape.scalar(0.0);
    for (&c, ts) in &groups {
        let rows = sims.select_rows(ts);
        let elems: Vec<(usize, usize)> = (0..ts.len()).map(|i| (i, c)).collect();
        let numer = rows.gather_elems(&elems);
        let f_proto = numer.div(rows.sum_rows());
        let f_bkg = match bkg_colsum {
            Some(b) => {
                let bc = b.gather_elems(&[(0, c)]);
                numer.div(numer.add(bc))
            }
            None => numer.div(numer),
        };
        let term = if split_logs {
            f_proto.log().add(f_bkg.log())
        } else {
            f_proto.add(f_bkg).log()
        };
        let class_mean = term.sum_all().mul_scalar(1.0 / ts.len() as f64);
        acc = acc.add(class_mean);
    }
    acc.mul_scalar(-1.0 / num_classes as f64)
}

/// Video-level classification loss: binary cross-entropy between the top-k
/// mean of each class's fused scores (k = max(1, T/8)) and the video's class
/// set derived from its point annotations. This is the suppression signal
/// that keeps absent classes' activations down; the per-snippet losses only
/// ever push the annotated class up.
pub fn loss_video<'t>(
    tape: &'t Tape,
    fused: Var<'t>,
    present_classes: &[usize],
) -> Var<'t> {
    let (t_len, num_classes) = fused.shape();
    if t_len == 0 || num_classes == 0 {
        return tape.scalar(0.0);
    }
    let k = (t_len / 8).max(1);
    let values = fused.value();
    let mut acc = tape.scalar(0.0);
    for c in 0..num_classes {
        // Indices of the k largest entries of column c (selection is
        // data-dependent, like a max-pool subgradient).
        let mut idx: Vec<usize> = (0..t_len).collect();
        idx.sort_unstable_by(|&a, &b| {
            values[[b, c]]
                .partial_cmp(&values[[a, c]])
                .unwrap()
                .then(a.cmp(&b))
        });
        let elems: Vec<(usize, usize)> = idx[..k].iter().map(|&t| (t, c)).collect();
        let v = fused
            .gather_elems(&elems)
            .sum_all()
            .mul_scalar(1.0 / k as f64)
            .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let term = if present_classes.contains(&c) {
            v.log().neg()
        } else {
            v.neg().add_scalar(1.0).log().neg()
        };
        acc = acc.add(term);
    }
    acc.mul_scalar(1.0 / num_classes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_term_reference_values() {
        assert_eq!(focal_term(1.0, 2.0), 0.0);
        let v = focal_term(0.5, 2.0);
        assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        let nll = focal_term(0.3, 0.0);
        assert!((nll + 0.3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_base_zero_on_perfect_separation() {
        let tape = Tape::new();
        let fused = tape.leaf(array![[1.0, 0.0], [1.0, 0.0], [0.2, 0.2]]);
        let attention = tape.leaf(array![[1.0], [1.0], [0.0]]);
        let ps = PseudoSnippets {
            action: vec![(0, 0), (1, 0)],
            background: vec![2],
        };
        let l = loss_base(&tape, fused, attention, &ps, 2.0);
        assert!(l.scalar_value().abs() < 1e-9);
    }

    #[test]
    fn loss_base_single_action_term() {
        let tape = Tape::new();
        let fused = tape.leaf(array![[0.5]]);
        let attention = tape.leaf(array![[0.9]]);
        let ps = PseudoSnippets {
            action: vec![(0, 0)],
            background: vec![],
        };
        let l = loss_base(&tape, fused, attention, &ps, 2.0);
        assert!((l.scalar_value() - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_base_empty_sets_is_zero() {
        let tape = Tape::new();
        let fused = tape.leaf(array![[0.5]]);
        let attention = tape.leaf(array![[0.5]]);
        let l = loss_base(&tape, fused, attention, &PseudoSnippets::default(), 2.0);
        assert_eq!(l.scalar_value(), 0.0);
    }

    #[test]
    fn loss_base_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let t_len = rng.gen_range(3..10);
            let c_len = rng.gen_range(1..4);
            let fused_val =
                Matrix::from_shape_fn((t_len, c_len), |_| rng.gen_range(0.05..0.95));
            let att_val = Matrix::from_shape_fn((t_len, 1), |_| rng.gen_range(0.05..0.95));
            let mut action = Vec::new();
            let mut background = Vec::new();
            for t in 0..t_len {
                if rng.gen_bool(0.4) {
                    action.push((t, rng.gen_range(0..c_len)));
                } else if rng.gen_bool(0.5) {
                    background.push(t);
                }
            }
            if action.is_empty() {
                action.push((0, 0));
            }
            let ps = PseudoSnippets { action, background };

            let eval = |f: &Matrix, a: &Matrix| {
                let tape = Tape::new();
                let fv = tape.leaf(f.clone());
                let av = tape.leaf(a.clone());
                loss_base(&tape, fv, av, &ps, 2.0).scalar_value()
            };

            let tape = Tape::new();
            let fv = tape.leaf(fused_val.clone());
            let av = tape.leaf(att_val.clone());
            let loss = loss_base(&tape, fv, av, &ps, 2.0);
            let grads = tape.backward(loss);
            let h = 1e-5;

            let gf = grads.wrt(fv);
            for r in 0..t_len {
                for c in 0..c_len {
                    let mut plus = fused_val.clone();
                    plus[[r, c]] += h;
                    let mut minus = fused_val.clone();
                    minus[[r, c]] -= h;
                    let num = (eval(&plus, &att_val) - eval(&minus, &att_val)) / (2.0 * h);
                    let ana = gf[[r, c]];
                    let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                    assert!(rel < 1e-4, "fused ({r},{c}): {ana} vs {num}");
                }
            }
            let ga = grads.wrt(av);
            for r in 0..t_len {
                let mut plus = att_val.clone();
                plus[[r, 0]] += h;
                let mut minus = att_val.clone();
                minus[[r, 0]] -= h;
                let num = (eval(&fused_val, &plus) - eval(&fused_val, &minus)) / (2.0 * h);
                let ana = ga[[r, 0]];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "attention ({r}): {ana} vs {num}");
            }
        }
    }

    #[test]
    fn contra_equal_similarity_value() {
        // One class, one action and one background snippet, all with the
        // same similarity to the prototype: the term is -ln(1 + 1/2).
        let tape = Tape::new();
        let features = tape.leaf(array![[2.0, 0.0], [0.5, 0.0]]);
        let protos = array![[3.0, 0.0]];
        let ps = PseudoSnippets {
            action: vec![(0, 0)],
            background: vec![1],
        };
        let l = loss_contra(&tape, features, &protos, &ps, 0.1, false);
        assert!((l.scalar_value() - (-(1.5f64.ln()))).abs() < 1e-9);
    }

    #[test]
    fn contra_lower_bound_holds_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let bound = -std::f64::consts::LN_2 - 1e-12;
        for _ in 0..1000 {
            let t_len = rng.gen_range(2..12);
            let d = rng.gen_range(2..6);
            let c_len = rng.gen_range(1..4);
            let feats = Matrix::from_shape_fn((t_len, d), |_| rng.gen_range(-2.0..2.0));
            let protos = Matrix::from_shape_fn((c_len, d), |_| rng.gen_range(-2.0..2.0));
            let mut action = Vec::new();
            let mut background = Vec::new();
            for t in 0..t_len {
                if rng.gen_bool(0.5) {
                    action.push((t, rng.gen_range(0..c_len)));
                } else if rng.gen_bool(0.4) {
                    background.push(t);
                }
            }
            let ps = PseudoSnippets { action, background };
            let tape = Tape::new();
            let fv = tape.leaf(feats);
            let l = loss_contra(&tape, fv, &protos, &ps, 0.1, false).scalar_value();
            assert!(l >= bound, "loss {l} below -ln 2");
            assert!(l.is_finite());
        }
    }

    #[test]
    fn contra_perfect_separation_approaches_bound() {
        // Cross-class and background similarities pushed toward zero with
        // every class populated: the loss approaches -ln 2.
        let tape = Tape::new();
        let features = tape.leaf(array![[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]);
        let protos = array![[1.0, 0.0], [0.0, 1.0]];
        let ps = PseudoSnippets {
            action: vec![(0, 0), (1, 1)],
            background: vec![2],
        };
        // tau small: cos gaps become huge similarity ratios.
        let l = loss_contra(&tape, features, &protos, &ps, 0.02, false).scalar_value();
        assert!((l + std::f64::consts::LN_2).abs() < 1e-6, "loss {l}");
    }

    #[test]
    fn contra_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for split in [false, true] {
            let t_len = 6;
            let d = 4;
            let feats = Matrix::from_shape_fn((t_len, d), |_| rng.gen_range(-1.0..1.0));
            let protos = Matrix::from_shape_fn((2, d), |_| rng.gen_range(-1.0..1.0));
            let ps = PseudoSnippets {
                action: vec![(0, 0), (2, 1), (3, 0)],
                background: vec![1, 5],
            };
            let eval = |f: &Matrix| {
                let tape = Tape::new();
                let fv = tape.leaf(f.clone());
                loss_contra(&tape, fv, &protos, &ps, 0.1, split).scalar_value()
            };
            let tape = Tape::new();
            let fv = tape.leaf(feats.clone());
            let loss = loss_contra(&tape, fv, &protos, &ps, 0.1, split);
            let grads = tape.backward(loss);
            let g = grads.wrt(fv);
            let h = 1e-5;
            for r in 0..t_len {
                for c in 0..d {
                    let mut plus = feats.clone();
                    plus[[r, c]] += h;
                    let mut minus = feats.clone();
                    minus[[r, c]] -= h;
                    let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let ana = g[[r, c]];
                    let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                    assert!(rel < 1e-4, "({r},{c}) split={split}: {ana} vs {num}");
                }
            }
        }
    }

    #[test]
    fn contra_no_background_fraction_is_one() {
        // C=1 and no background: both fractions are 1, term = -ln 2 exactly.
        let tape = Tape::new();
        let features = tape.leaf(array![[0.3, 0.4]]);
        let protos = array![[5.0, 1.0]];
        let ps = PseudoSnippets {
            action: vec![(0, 0)],
            background: vec![],
        };
        let l = loss_contra(&tape, features, &protos, &ps, 0.1, false).scalar_value();
        assert!((l + std::f64::consts::LN_2).abs() < 1e-12);
    }
}
