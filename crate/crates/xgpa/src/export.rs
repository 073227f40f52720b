//! Explanation export: a JSON document keyed by node ids and timestamps,
//! and a small SVG with a spatial bar heatmap and a delay stem plot.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use xgpa_core::{Explanation, XgpaConfig};

use crate::csvio::format_time;
use crate::data::{TrafficDataset, WindowSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedWeight {
    pub node_id: String,
    pub weight: f64,
}

/// One selected delay with its position mapped back to wall-clock time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayEntry {
    pub delay: usize,
    pub score: f64,
    /// Blend weight of the level position read; 1 on level 0.
    pub tap: f64,
    pub level_step: usize,
    /// Steps between the forecast target and the first input step behind
    /// `level_step`.
    pub lag_steps: usize,
    pub lag_hours: f64,
    pub source_time: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub graph_layers: usize,
    pub patch_levels: usize,
    pub cam_weight: f64,
    pub cam_share: f64,
    pub spatial: Vec<NamedWeight>,
    pub temporal: Vec<DelayEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationDoc {
    pub node_id: String,
    /// 1-based, as in the forecast CSV.
    pub horizon_step: usize,
    pub origin_time: String,
    pub target_time: String,
    pub resolution_min: u32,
    pub node_ids: Vec<String>,
    pub seed: u64,
    pub config: XgpaConfig,
    pub window: WindowSpec,
    pub summary: Vec<CellSummary>,
    /// Full explanation with node and step indices.
    pub explanation: Explanation,
}

/// Wraps `ex` (computed at forecast origin `origin`) with names and times.
pub fn explanation_doc(
    ex: &Explanation,
    ds: &TrafficDataset,
    config: &XgpaConfig,
    window: &WindowSpec,
    origin: usize,
) -> ExplanationDoc {
    let ids = ds.ids();
    let input_steps = window.input_steps(origin);
    let ratios = config.ratios();
    let target = origin + ex.horizon_step;
    let res_h = ds.resolution_min() as f64 / 60.0;
    let summary = ex
        .cells
        .iter()
        .zip(&ex.cam_share)
        .map(|(c, &share)| {
            let r = ratios[c.patch_levels];
            CellSummary {
                graph_layers: c.graph_layers,
                patch_levels: c.patch_levels,
                cam_weight: c.cam_weight,
                cam_share: share,
                spatial: c
                    .spatial
                    .iter()
                    .map(|&(l, w)| NamedWeight {
                        node_id: ids[l].clone(),
                        weight: w,
                    })
                    .collect(),
                temporal: c
                    .temporal
                    .iter()
                    .map(|t| {
                        let src = input_steps[(t.level_step * r).min(input_steps.len() - 1)];
                        let lag = target - src;
                        DelayEntry {
                            delay: t.delay,
                            score: t.score,
                            tap: t.tap,
                            level_step: t.level_step,
                            lag_steps: lag,
                            lag_hours: lag as f64 * res_h,
                            source_time: format_time(ds.timestamp(src)),
                        }
                    })
                    .collect(),
            }
        })
        .collect();
    ExplanationDoc {
        node_id: ids[ex.target_node].clone(),
        horizon_step: ex.horizon_step + 1,
        origin_time: format_time(ds.timestamp(origin)),
        target_time: format_time(ds.timestamp(target)),
        resolution_min: ds.resolution_min(),
        node_ids: ids.to_vec(),
        seed: config.seed,
        config: config.clone(),
        window: window.clone(),
        summary,
        explanation: ex.clone(),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Blue ramp from white at 0 to dark at 1.
fn shade(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let c = |lo: f64, hi: f64| (lo + (hi - lo) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(255.0, 8.0), c(255.0, 48.0), c(255.0, 107.0))
}

/// Spatial panel: CAM-weighted α over every node, one shaded bar per node.
/// Temporal panel: CAM-weighted delay scores as stems over lag hours.
pub fn render_svg(doc: &ExplanationDoc) -> String {
    let n = doc.node_ids.len();
    let mut spatial = vec![0.0; n];
    let mut stems: Vec<(f64, f64)> = Vec::new();
    for c in &doc.summary {
        for w in &c.spatial {
            if let Some(i) = doc.node_ids.iter().position(|id| *id == w.node_id) {
                spatial[i] += c.cam_share * w.weight;
            }
        }
        for t in &c.temporal {
            match stems.iter_mut().find(|(h, _)| (*h - t.lag_hours).abs() < 1e-9) {
                Some(s) => s.1 += c.cam_share * t.tap * t.score,
                None => stems.push((t.lag_hours, c.cam_share * t.tap * t.score)),
            }
        }
    }
    stems.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (w, pad) = (640.0, 40.0);
    let bar_h = 18.0;
    let top_h = 30.0 + n as f64 * bar_h;
    let plot_h = 180.0;
    let h = top_h + plot_h + 2.0 * pad + 30.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="20" font-size="13">Spatial attention for {} at {} (step {})</text>"#,
        escape(&doc.node_id),
        escape(&doc.target_time),
        doc.horizon_step
    );
    let max_sp = spatial.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let bar_w = w - 2.0 * pad - 120.0;
    for (i, (id, v)) in doc.node_ids.iter().zip(&spatial).enumerate() {
        let y = 30.0 + i as f64 * bar_h;
        let _ = writeln!(s, r#"<text x="{pad}" y="{}">{}</text>"#, y + 13.0, escape(id));
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{y}" width="{:.2}" height="{}" fill="{}" stroke="#999"><title>{v:.6}</title></rect>"##,
            pad + 80.0,
            bar_w * v / max_sp,
            bar_h - 2.0,
            shade(v / max_sp)
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}">{v:.3}</text>"#, pad + 84.0 + bar_w * v / max_sp, y + 13.0);
    }

    let base = top_h + pad + plot_h;
    let _ = writeln!(s, r#"<text x="{pad}" y="{}" font-size="13">Temporal attention (lag hours)</text>"#, top_h + pad - 10.0);
    let _ = writeln!(
        s,
        r##"<line x1="{pad}" y1="{base}" x2="{}" y2="{base}" stroke="#000"/>"##,
        w - pad
    );
    let max_lag = stems.iter().map(|t| t.0).fold(1.0f64, f64::max);
    let max_sc = stems.iter().map(|t| t.1).fold(0.0f64, f64::max).max(1e-12);
    for &(lag, sc) in &stems {
        let x = pad + (w - 2.0 * pad) * lag / max_lag;
        let y = base - plot_h * sc / max_sc;
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{base}" x2="{x:.2}" y2="{y:.2}" stroke="#08306b"/>"##);
        let _ = writeln!(
            s,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#08306b"><title>{lag:.2} h: {sc:.6}</title></circle>"##
        );
    }
    let _ = writeln!(s, r#"<text x="{pad}" y="{}">0 h</text>"#, base + 15.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{max_lag:.1} h</text>"#, w - pad, base + 15.0);
    s.push_str("</svg>\n");
    s
}
