//! Rendering of a timing trace as a four-lane chart.

use std::fmt::Write;

use serde::Serialize;

use super::timing::{ColorClass, Trace};
use crate::hw::OpType;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimelineFormat {
    Svg,
    Json,
}

impl ColorClass {
    pub fn color(self) -> &'static str {
        match self {
            ColorClass::LoadActivation => "#87cefa",
            ColorClass::LoadWeight => "#000000",
            ColorClass::Conv | ColorClass::Save => "#800080",
            ColorClass::ConvInit => "#d62728",
            ColorClass::Pool => "#2ca02c",
            ColorClass::Eltwise => "#e6c229",
            ColorClass::Move => "#808080",
            ColorClass::Noop => "#dddddd",
        }
    }
}

const LANES: [OpType; 4] = [OpType::Load, OpType::Conv, OpType::Misc, OpType::Save];

#[derive(Serialize)]
struct Bar {
    index: usize,
    start: u64,
    end: u64,
    class: ColorClass,
    color: &'static str,
}

#[derive(Serialize)]
struct Lane {
    name: &'static str,
    bars: Vec<Bar>,
}

#[derive(Serialize)]
struct Chart {
    makespan: u64,
    lanes: Vec<Lane>,
}

fn chart(trace: &Trace) -> Chart {
    let lanes = LANES
        .iter()
        .map(|&q| Lane {
            name: q.name(),
            bars: trace
                .events
                .iter()
                .filter(|e| e.queue == q && e.duration > 0)
                .map(|e| Bar { index: e.index, start: e.start, end: e.end(), class: e.color, color: e.color.color() })
                .collect(),
        })
        .collect();
    Chart { makespan: trace.makespan, lanes }
}

/// Lanes LOAD, CONV, MISC and SAVE from top to bottom, time left to right.
pub fn emit_timeline(trace: &Trace, format: TimelineFormat) -> String {
    let c = chart(trace);
    match format {
        TimelineFormat::Json => serde_json::to_string_pretty(&c).expect("chart serializes"),
        TimelineFormat::Svg => {
            let (width, lane_h, label) = (1600.0, 40.0, 60.0);
            let scale = if c.makespan == 0 { 0.0 } else { (width - label) / c.makespan as f64 };
            let height = lane_h * LANES.len() as f64 + 20.0;
            let mut s = String::new();
            let _ = writeln!(
                s,
                r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">"#
            );
            for (k, lane) in c.lanes.iter().enumerate() {
                let y = k as f64 * lane_h;
                let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, y + lane_h / 2.0 + 4.0, lane.name);
                for b in &lane.bars {
                    let x = label + b.start as f64 * scale;
                    let w = ((b.end - b.start) as f64 * scale).max(0.5);
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x:.2}" y="{:.1}" width="{w:.2}" height="{:.1}" fill="{}"><title>#{} {}..{}</title></rect>"#,
                        y + 4.0,
                        lane_h - 8.0,
                        b.color,
                        b.index,
                        b.start,
                        b.end
                    );
                }
            }
            let _ = writeln!(s, r#"<text x="{label}" y="{}">0 .. {} cycles</text>"#, height - 4.0, c.makespan);
            s.push_str("</svg>\n");
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::timing::TraceEvent;

    fn trace() -> Trace {
        let ev = |index, queue, start, duration, color| TraceEvent { index, queue, issue: 0, start, duration, color };
        Trace {
            events: vec![
                ev(0, OpType::Load, 0, 10, ColorClass::LoadWeight),
                ev(1, OpType::Conv, 10, 20, ColorClass::ConvInit),
                ev(2, OpType::Save, 30, 5, ColorClass::Save),
            ],
            makespan: 35,
            ..Default::default()
        }
    }

    #[test]
    fn json_has_four_lanes_in_order() {
        let v: serde_json::Value = serde_json::from_str(&emit_timeline(&trace(), TimelineFormat::Json)).unwrap();
        let names: Vec<_> = v["lanes"].as_array().unwrap().iter().map(|l| l["name"].as_str().unwrap()).collect();
        assert_eq!(names, ["LOAD", "CONV", "MISC", "SAVE"]);
        assert_eq!(v["lanes"][1]["bars"][0]["color"], "#d62728");
    }

    #[test]
    fn svg_draws_one_rect_per_bar() {
        let s = emit_timeline(&trace(), TimelineFormat::Svg);
        assert!(s.starts_with("<svg"));
        assert_eq!(s.matches("<rect").count(), 3);
    }
}
