//! CSV and SVG renderings of evaluation results.

use std::fmt::Write as _;

use contour_marl::environment::EpisodeResult;
use contour_marl::geometry::{BinaryMask, Contour};
use contour_marl::metrics::boundary_pixels;
use contour_marl::sac::EvalOutcome;

const SCALE: f64 = 8.0;

/// One row per eval object with initial and final metrics.
pub fn object_csv(out: &EvalOutcome) -> String {
    let mut csv = String::from("id,iou_0,dice_0,boundf_0,iou,dice,boundf\n");
    for ((id, b), m) in out.ids.iter().zip(&out.baseline.per_object).zip(&out.report.per_object) {
        let _ = writeln!(csv, "{id},{},{},{},{},{},{}", b.iou, b.dice, b.boundf, m.iou, m.dice, m.boundf);
    }
    let (b, m) = (&out.baseline, &out.report);
    let _ = writeln!(csv, "mean,{},{},{},{},{},{}", b.miou, b.mdice, b.mboundf, m.miou, m.mdice, m.mboundf);
    csv
}

/// Metrics and reward terms after every step of one episode.
pub fn steps_csv(res: &EpisodeResult) -> String {
    let mut csv = String::from("step,iou,dice,boundf,region,boundary,coop_mean\n");
    for s in &res.trace {
        let m = s.metrics;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            s.step, m.iou, m.dice, m.boundf, s.region, s.boundary, s.coop_mean
        );
    }
    csv
}

fn coords(c: &Contour, close: bool) -> String {
    let pts = c.points();
    let mut s = String::new();
    for p in pts.iter().chain(pts.first().filter(|_| close)) {
        let _ = write!(s, "{:.3},{:.3} ", p.x * SCALE, p.y * SCALE);
    }
    s.pop();
    s
}

/// Ground-truth boundary pixels, the initial octagon, and one polyline per
/// step, fading from light to dark.
pub fn svg(gt: &BinaryMask, res: &EpisodeResult) -> String {
    let (w, h) = gt.dims();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        w as f64 * SCALE,
        h as f64 * SCALE,
        w as f64 * SCALE,
        h as f64 * SCALE
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let edge = boundary_pixels(gt);
    let _ = writeln!(s, r##"<g fill="#bbbbbb">"##);
    for r in 0..h {
        for c in 0..w {
            if edge.get(c, r) {
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{SCALE}" height="{SCALE}"/>"#,
                    c as f64 * SCALE,
                    r as f64 * SCALE
                );
            }
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r##"<polygon points="{}" fill="none" stroke="#1f77b4" stroke-dasharray="4 3"/>"##,
        coords(&res.initial_contour, false)
    );
    let n = res.trace.len().max(1) as f64;
    for (k, step) in res.trace.iter().enumerate() {
        let shade = (200.0 * (1.0 - (k + 1) as f64 / n)) as u8;
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#{:02x}{:02x}{:02x}" stroke-width="1.5"><title>step {}</title></polyline>"##,
            coords(&step.contour, true),
            255u8.saturating_sub(55).max(shade),
            shade,
            shade,
            step.step
        );
    }
    s.push_str("</svg>\n");
    s
}
