//! Pseudo snippet mining from the class-agnostic attention sequence and the
//! point annotations.
//!
//! For each annotated point, the scan walks outward (left toward the
//! previous point, right toward the next, exclusive of neighbor points but
//! inclusive of video edges). Snippets whose attention exceeds `theta1`
//! become pseudo-action snippets until the first failure stops that
//! direction. Independently, every snippet in the scan range whose attention
//! is below `theta2`, plus the attention argmin of each side range, becomes
//! a pseudo-background snippet. Action membership wins collisions.

use std::collections::BTreeSet;

use crate::data::PointAnnotation;

/// Mined snippet sets. `action` holds `(snippet, class)` pairs; a snippet
/// between two points of different classes can carry both labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PseudoSnippets {
    pub action: Vec<(usize, usize)>,
    pub background: Vec<usize>,
}

impl PseudoSnippets {
    pub fn n_act(&self) -> usize {
        self.action.len()
    }

    pub fn n_bkg(&self) -> usize {
        self.background.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action.is_empty() && self.background.is_empty()
    }

    /// Forces the annotated snippets themselves into the action set (they are
    /// ground-truth action regardless of the current attention), keeping the
    /// sets disjoint. The training loop applies this so optimization has a
    /// signal before the attention ever crosses `theta1`.
    pub fn seeded_with_points(mut self, points: &[PointAnnotation]) -> Self {
        let mut action: BTreeSet<(usize, usize)> = self.action.into_iter().collect();
        for p in points {
            action.insert((p.t, p.label));
        }
        let action_ts: BTreeSet<usize> = action.iter().map(|&(t, _)| t).collect();
        self.background.retain(|t| !action_ts.contains(t));
        self.action = action.into_iter().collect();
        self
    }
}

/// First index of the minimum attention value over `range`.
fn argmin_first(attention: &[f64], range: std::ops::RangeInclusive<usize>) -> usize {
    let mut best = *range.start();
    for t in range {
        if attention[t] < attention[best] {
            best = t;
        }
    }
    best
}

/// Mines pseudo action and background snippets from one video's attention.
/// `points` must be sorted by snippet index. Empty points yield empty sets.
pub fn generate_pseudo_snippets(
    attention: &[f64],
    points: &[PointAnnotation],
    theta1: f64,
    theta2: f64,
) -> PseudoSnippets {
    let t_len = attention.len();
    debug_assert!(points.windows(2).all(|w| w[0].t < w[1].t));
    let mut action: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut background: BTreeSet<usize> = BTreeSet::new();

    for (i, p) in points.iter().enumerate() {
        debug_assert!(p.t < t_len);
        let lo = if i == 0 { 0 } else { points[i - 1].t + 1 };
        let hi = if i + 1 == points.len() {
            t_len - 1
        } else {
            points[i + 1].t - 1
        };

        // Action expansion: leftward then rightward, each until the first
        // snippet at or below theta1.
        for t in (lo..=p.t).rev() {
            if attention[t] > theta1 {
                action.insert((t, p.label));
            } else {
                break;
            }
        }
        for t in p.t..=hi {
            if attention[t] > theta1 {
                action.insert((t, p.label));
            } else {
                break;
            }
        }

        // Background selection over the full side ranges.
        for (side_lo, side_hi) in [(lo, p.t), (p.t, hi)] {
            let amin = argmin_first(attention, side_lo..=side_hi);
            for t in side_lo..=side_hi {
                if attention[t] < theta2 || t == amin {
                    background.insert(t);
                }
            }
        }
    }

    let action_ts: BTreeSet<usize> = action.iter().map(|&(t, _)| t).collect();
    PseudoSnippets {
        action: action.into_iter().collect(),
        background: background
            .into_iter()
            .filter(|t| !action_ts.contains(t))
            .collect(),
    }
}
