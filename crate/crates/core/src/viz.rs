//! Static SVG timeline of a video: fused score curves, ground-truth spans,
//! and detections.

use std::fmt::Write as _;

use crate::data::{Detection, VideoRecord};
use crate::model::SnippetOutputs;

const LANE_H: f64 = 26.0;
const CURVE_H: f64 = 90.0;
const PAD: f64 = 40.0;
const PX_PER_SNIPPET: f64 = 6.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn color(label: usize) -> &'static str {
    PALETTE[label % PALETTE.len()]
}

/// Renders up to `max_dets` highest-confidence detections beneath the
/// ground-truth lane and the per-class fused score curves above both.
pub fn render_timeline(
    record: &VideoRecord,
    outputs: &SnippetOutputs,
    detections: &[Detection],
    class_names: &[String],
    max_dets: usize,
) -> String {
    let t_len = record.num_snippets();
    let width = PAD * 2.0 + t_len as f64 * PX_PER_SNIPPET;
    let mut dets: Vec<&Detection> = detections.iter().collect();
    dets.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    dets.truncate(max_dets);

    let mut labels: Vec<usize> = dets.iter().map(|d| d.label).collect();
    if let Some(gts) = record.gt_instances() {
        labels.extend(gts.iter().map(|g| g.label));
    }
    labels.sort_unstable();
    labels.dedup();

    let det_lane_y = PAD + CURVE_H + 20.0;
    let gt_lane_y = det_lane_y + LANE_H + 14.0;
    let height = gt_lane_y + LANE_H + PAD;
    let x_of = |t: f64| PAD + t * PX_PER_SNIPPET;
    let curve_y = |v: f64| PAD + CURVE_H * (1.0 - v.clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = write!(
        svg,
        r#"<rect width="100%" height="100%" fill="white"/><text x="{PAD}" y="20" font-family="monospace" font-size="13">{} (T={t_len}, {:.2}s/snippet)</text>"#,
        record.video_id, record.snippet_duration_sec
    );
    // Curve frame.
    let _ = write!(
        svg,
        r##"<rect x="{}" y="{}" width="{:.1}" height="{CURVE_H}" fill="none" stroke="#ccc"/>"##,
        PAD,
        PAD,
        t_len as f64 * PX_PER_SNIPPET
    );
    for &label in &labels {
        let mut points = String::new();
        for t in 0..t_len {
            let v = outputs.fused[[t, label]];
            let _ = write!(points, "{:.1},{:.1} ", x_of(t as f64 + 0.5), curve_y(v));
        }
        let _ = write!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            points.trim_end(),
            color(label)
        );
    }
    // Legend.
    for (i, &label) in labels.iter().enumerate() {
        let name = class_names
            .get(label)
            .map(String::as_str)
            .unwrap_or("unknown");
        let _ = write!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}" font-family="monospace" font-size="11">{}</text>"#,
            width - 150.0,
            PAD + i as f64 * 16.0,
            color(label),
            width - 135.0,
            PAD + i as f64 * 16.0 + 9.0,
            name
        );
    }
    // Detections.
    let _ = write!(
        svg,
        r#"<text x="{PAD}" y="{:.1}" font-family="monospace" font-size="11">detections</text>"#,
        det_lane_y - 4.0
    );
    for d in &dets {
        let opacity = (0.25 + 0.75 * d.confidence.clamp(0.0, 2.0) / 2.0).min(1.0);
        let _ = write!(
            svg,
            r#"<rect x="{:.1}" y="{det_lane_y:.1}" width="{:.1}" height="{LANE_H}" fill="{}" fill-opacity="{opacity:.2}"><title>[{:.1}, {:.1}) conf {:.3}</title></rect>"#,
            x_of(d.start),
            (d.end - d.start) * PX_PER_SNIPPET,
            color(d.label),
            d.start,
            d.end,
            d.confidence
        );
    }
    // Ground truth.
    let _ = write!(
        svg,
        r#"<text x="{PAD}" y="{:.1}" font-family="monospace" font-size="11">ground truth</text>"#,
        gt_lane_y - 4.0
    );
    if let Some(gts) = record.gt_instances() {
        for g in gts {
            let _ = write!(
                svg,
                r##"<rect x="{:.1}" y="{gt_lane_y:.1}" width="{:.1}" height="{LANE_H}" fill="{}" stroke="#333"/>"##,
                x_of(g.start),
                (g.end - g.start) * PX_PER_SNIPPET,
                color(g.label)
            );
        }
    }
    // Point annotations as vertical ticks over the gt lane.
    for p in &record.points {
        let _ = write!(
            svg,
            r##"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="#5e2ca5" stroke-width="2"/>"##,
            x_of(p.t as f64 + 0.5),
            gt_lane_y - 6.0,
            gt_lane_y + LANE_H + 6.0
        );
    }
    svg.push_str("</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GtInstance, PointAnnotation};
    use ndarray::Array2;

    #[test]
    fn renders_well_formed_svg() {
        let record = crate::data::VideoRecord::new(
            "v0",
            Array2::zeros((20, 4)),
            0.64,
            vec![PointAnnotation { t: 5, label: 0 }],
            Some(vec![GtInstance {
                start: 3.0,
                end: 9.0,
                label: 0,
            }]),
        );
        let outputs = SnippetOutputs {
            x_rab: Array2::zeros((20, 4)),
            x_embed: Array2::zeros((20, 4)),
            cas: Array2::from_elem((20, 2), 0.4),
            attention: vec![0.5; 20],
            fused: Array2::from_elem((20, 2), 0.2),
        };
        let dets = vec![Detection {
            start: 3.0,
            end: 8.0,
            label: 0,
            confidence: 1.4,
        }];
        let svg = render_timeline(&record, &outputs, &dets, &["a".into(), "b".into()], 10);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("ground truth"));
        assert!(svg.matches("<rect").count() >= 3);
    }
}
