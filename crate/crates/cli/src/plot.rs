//! CSV tables and hand-written SVG for the three figure kinds.

use std::fmt::Write;

use brnlab::data::{Detection, VideoAnnotation};
use brnlab::train::EpochLog;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Figure {
    pub csv: String,
    pub svg: String,
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn loss_curve(log: &[EpochLog]) -> Figure {
    let mut csv = String::from("epoch,l_cls,l_reg,total,lr\n");
    for e in log {
        let _ = writeln!(csv, "{},{},{},{},{}", e.epoch, e.l_cls, e.l_reg, e.total, e.lr);
    }
    let (w, h, m) = (640.0, 360.0, 48.0);
    let max_epoch = log.last().map_or(1, |e| e.epoch.max(1)) as f64;
    let max_y = log.iter().map(|e| e.total.max(e.l_cls).max(e.l_reg)).fold(0.0, f64::max).max(1e-12);
    let px = |epoch: usize| m + (w - 2.0 * m) * epoch as f64 / max_epoch;
    let py = |v: f64| h - m - (h - 2.0 * m) * v / max_y;
    let mut svg = svg_open(w, h);
    let _ = writeln!(svg, "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - m, w - m, h - m);
    let _ = writeln!(svg, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>", h - m);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>", w / 2.0, h - 12.0);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{max_y:.3}</text>", m - 4.0, m + 4.0);
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text>", m - 4.0, h - m + 4.0);
    let series: [(&str, fn(&EpochLog) -> f64); 3] =
        [("total", |e| e.total), ("l_cls", |e| e.l_cls), ("l_reg", |e| e.l_reg)];
    for (i, (name, get)) in series.iter().enumerate() {
        let points: Vec<String> = log.iter().map(|e| format!("{:.2},{:.2}", px(e.epoch), py(get(e)))).collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            PALETTE[i],
            points.join(" ")
        );
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" fill=\"{}\">{name}</text>", w - m - 60.0, m + 14.0 * i as f64, PALETTE[i]);
    }
    svg.push_str("</svg>\n");
    Figure { csv, svg }
}

/// `weights` is `(scales * time) x branches`, scale-major.
pub fn selection_weights(weights: &[Vec<f64>], scales: usize, time: usize, branch_names: &[String]) -> Figure {
    let mut csv = String::from("scale,time");
    for b in branch_names {
        let _ = write!(csv, ",{b}");
    }
    csv.push('\n');
    for (row, w) in weights.iter().enumerate() {
        let _ = write!(csv, "{},{}", row / time, row % time);
        for v in w {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let cell_w = (480.0 / time as f64).max(1.0);
    let cell_h = 14.0;
    let panel_h = cell_h * scales as f64 + 28.0;
    let (w, h) = (cell_w * time as f64 + 90.0, panel_h * branch_names.len() as f64 + 10.0);
    let mut svg = svg_open(w, h);
    for (b, name) in branch_names.iter().enumerate() {
        let top = panel_h * b as f64 + 18.0;
        let _ = writeln!(svg, "<text x=\"4\" y=\"{}\">{}</text>", top - 4.0, escape(name));
        for (row, wv) in weights.iter().enumerate() {
            let (s, t) = (row / time, row % time);
            // White at 0, saturated blue at 1.
            let v = wv[b].clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{cell_h}\" fill=\"rgb({shade},{shade},255)\"/>",
                80.0 + cell_w * t as f64,
                top + cell_h * s as f64,
                cell_w
            );
        }
        for s in 0..scales {
            let _ = writeln!(svg, "<text x=\"76\" y=\"{:.2}\" text-anchor=\"end\">s{}</text>", top + cell_h * (s as f64 + 0.8), s + 1);
        }
    }
    svg.push_str("</svg>\n");
    Figure { csv, svg }
}

/// Ground truth on the first row, then one row per detection source.
pub fn timeline(video: &VideoAnnotation, sources: &[(String, Vec<Detection>)]) -> Figure {
    let mut csv = String::from("source,start,end,label,score\n");
    for inst in &video.instances {
        let _ = writeln!(csv, "ground_truth,{},{},{},1", inst.interval.start(), inst.interval.end(), inst.label);
    }
    for (name, dets) in sources {
        for d in dets {
            let _ = writeln!(csv, "{},{},{},{},{}", name, d.interval.start(), d.interval.end(), d.label, d.score);
        }
    }
    let (w, left, lane) = (720.0, 110.0, 8.0);
    let span = w - left - 20.0;
    let x = |t: f64| left + span * t;
    let mut rows: Vec<(String, Vec<(f64, f64, usize, f64)>)> = vec![(
        "ground truth".into(),
        video.instances.iter().map(|i| (i.interval.start(), i.interval.end(), i.label, 1.0)).collect(),
    )];
    rows.extend(sources.iter().map(|(n, d)| {
        (n.clone(), d.iter().map(|d| (d.interval.start(), d.interval.end(), d.label, d.score)).collect())
    }));
    let heights: Vec<f64> = rows.iter().map(|(_, items)| 16.0 + lane * items.len().max(1) as f64).collect();
    let h = heights.iter().sum::<f64>() + 40.0;
    let mut svg = svg_open(w, h);
    let mut top = 10.0;
    for ((name, items), rh) in rows.iter().zip(&heights) {
        let _ = writeln!(svg, "<text x=\"4\" y=\"{:.1}\">{}</text>", top + 12.0, escape(name));
        for (k, &(a, b, label, score)) in items.iter().enumerate() {
            let color = PALETTE[label % PALETTE.len()];
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{}\" fill=\"{color}\" fill-opacity=\"{:.3}\"><title>class {label} score {score:.3}</title></rect>",
                x(a),
                top + 4.0 + lane * k as f64,
                (x(b) - x(a)).max(0.5),
                lane - 1.0,
                0.25 + 0.75 * score.clamp(0.0, 1.0)
            );
        }
        top += rh;
    }
    let _ = writeln!(svg, "<line x1=\"{left}\" y1=\"{top:.1}\" x2=\"{:.1}\" y2=\"{top:.1}\" stroke=\"black\"/>", left + span);
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t:.2}</text>", x(t), top + 14.0);
    }
    svg.push_str("</svg>\n");
    Figure { csv, svg }
}

#[cfg(test)]
mod tests {
    use super::*;
    use brnlab::data::{ActionInstance, Interval};

    #[test]
    fn loss_curve_has_one_csv_row_per_epoch() {
        let log: Vec<EpochLog> =
            (0..5).map(|e| EpochLog { epoch: e, l_cls: 1.0 / (e + 1) as f64, l_reg: 0.5, total: 1.5, lr: 1e-3 }).collect();
        let f = loss_curve(&log);
        assert_eq!(f.csv.lines().count(), 6);
        assert_eq!(f.svg.matches("<polyline").count(), 3);
    }

    #[test]
    fn heatmap_cells_and_rows() {
        let weights = vec![vec![0.25; 4]; 6];
        let names: Vec<String> = (0..4).map(|i| format!("b{i}")).collect();
        let f = selection_weights(&weights, 2, 3, &names);
        assert_eq!(f.csv.lines().count(), 7);
        assert_eq!(f.svg.matches("<rect x=").count(), 24);
    }

    #[test]
    fn timeline_rows() {
        let video = VideoAnnotation {
            video_id: "v".into(),
            duration_seconds: 1.0,
            instances: vec![ActionInstance { interval: Interval::new(0.1, 0.2).unwrap(), label: 1 }],
        };
        let det = Detection { video_id: "v".into(), interval: Interval::new(0.1, 0.3).unwrap(), label: 1, score: 0.5 };
        let f = timeline(&video, &[("a<b".into(), vec![det])]);
        assert_eq!(f.csv.lines().count(), 3);
        assert!(f.svg.contains("a&lt;b"));
    }
}
