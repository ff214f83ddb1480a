//! Text renderings of metrics, reliability diagrams and trajectories.
//!
//! Values are fractions printed with 6 decimals; with `percent` they are
//! scaled by 100 and printed with 4 decimals. Absent values are empty CSV
//! fields (`-` in summaries). Column orders are fixed.

use std::fmt::Write as _;

use crate::dynamics::{StateReport, TrajectoryPoint};
use crate::metrics::{MetricsReport, ReliabilityBin};

pub const METRICS_COLUMNS: &str = "n,acc,conf,ece,conf_pos,conf_neg,cerr_pos,cerr_neg,mean_entropy";
pub const RELIABILITY_COLUMNS: &str = "bin,lo,hi,count,mean_conf,accuracy,gap";
pub const TRAJECTORY_COLUMNS: &str = "step,acc,conf,ece,cerr_pos,cerr_neg,state";

fn fmt_value(v: f64, percent: bool) -> String {
    if percent {
        format!("{:.4}", v * 100.0)
    } else {
        format!("{v:.6}")
    }
}

fn fmt_opt(v: Option<f64>, percent: bool, missing: &str) -> String {
    v.map_or_else(|| missing.to_string(), |x| fmt_value(x, percent))
}

pub fn metrics_summary(m: &MetricsReport, percent: bool) -> String {
    format!(
        "n={} acc={} conf={} ece={} conf_pos={} conf_neg={} cerr_pos={} cerr_neg={} entropy={:.6}",
        m.n,
        fmt_value(m.acc, percent),
        fmt_value(m.conf, percent),
        fmt_value(m.ece, percent),
        fmt_opt(m.conf_pos, percent, "-"),
        fmt_opt(m.conf_neg, percent, "-"),
        fmt_opt(m.cerr_pos, percent, "-"),
        fmt_opt(m.cerr_neg, percent, "-"),
        m.mean_entropy,
    )
}

/// Header plus one row. Entropy stays in nats regardless of `percent`.
pub fn metrics_csv(m: &MetricsReport, percent: bool) -> String {
    format!(
        "{METRICS_COLUMNS}\n{},{},{},{},{},{},{},{},{:.6}\n",
        m.n,
        fmt_value(m.acc, percent),
        fmt_value(m.conf, percent),
        fmt_value(m.ece, percent),
        fmt_opt(m.conf_pos, percent, ""),
        fmt_opt(m.conf_neg, percent, ""),
        fmt_opt(m.cerr_pos, percent, ""),
        fmt_opt(m.cerr_neg, percent, ""),
        m.mean_entropy,
    )
}

pub fn reliability_csv(bins: &[ReliabilityBin], percent: bool) -> String {
    let mut out = format!("{RELIABILITY_COLUMNS}\n");
    for (i, b) in bins.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{}",
            fmt_value(b.lo, percent),
            fmt_value(b.hi, percent),
            b.count,
            fmt_value(b.mean_conf, percent),
            fmt_value(b.accuracy, percent),
            fmt_value(b.gap(), percent),
        );
    }
    out
}

pub fn trajectory_csv(points: &[TrajectoryPoint], states: Option<&StateReport>, percent: bool) -> String {
    let mut out = format!("{TRAJECTORY_COLUMNS}\n");
    for (i, p) in points.iter().enumerate() {
        let state = states.map_or(String::new(), |s| s.labels[i].to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{state}",
            p.step,
            fmt_value(p.acc, percent),
            fmt_value(p.conf, percent),
            fmt_value(p.ece, percent),
            fmt_opt(p.cerr_pos, percent, ""),
            fmt_opt(p.cerr_neg, percent, ""),
        );
    }
    out
}

/// Bar chart of per-bin accuracy against mean confidence, with the diagonal.
pub fn reliability_svg(bins: &[ReliabilityBin]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let plot = SIZE - 2.0 * PAD;
    let x = |v: f64| PAD + v * plot;
    let y = |v: f64| SIZE - PAD - v * plot;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    for b in bins {
        // equal-mass bins can be zero-width; give them a visible sliver
        let (lo, hi) = if b.hi - b.lo < 0.002 {
            ((b.mean_conf - 0.001).max(0.0), (b.mean_conf + 0.001).min(1.0))
        } else {
            (b.lo, b.hi)
        };
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4477aa" fill-opacity="0.7" stroke="#223355" stroke-width="0.5"/>"##,
            x(lo),
            y(b.accuracy),
            (x(hi) - x(lo)).max(0.5),
            y(0.0) - y(b.accuracy),
        );
    }
    let _ = writeln!(
        out,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#cc3311" stroke-dasharray="4 3"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{PAD}" y="{PAD}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">confidence</text>"#,
        SIZE / 2.0,
        SIZE - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="12" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {:.1})">accuracy</text>"#,
        SIZE / 2.0,
        SIZE / 2.0
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        MetricsReport {
            n: 2,
            acc: 0.5,
            conf: 0.85,
            ece: 0.35,
            conf_pos: Some(0.9),
            conf_neg: Some(0.8),
            cerr_pos: Some(0.1),
            cerr_neg: Some(0.8),
            mean_entropy: 0.4,
        }
    }

    #[test]
    fn csv_layout() {
        let csv = metrics_csv(&report(), false);
        assert_eq!(
            csv,
            "n,acc,conf,ece,conf_pos,conf_neg,cerr_pos,cerr_neg,mean_entropy\n2,0.500000,0.850000,0.350000,0.900000,0.800000,0.100000,0.800000,0.400000\n"
        );
        let pct = metrics_csv(&report(), true);
        assert!(pct.lines().nth(1).unwrap().starts_with("2,50.0000,85.0000,35.0000,"));
    }

    #[test]
    fn missing_values_are_blank() {
        let mut m = report();
        m.conf_neg = None;
        m.cerr_neg = None;
        let row = metrics_csv(&m, false).lines().nth(1).unwrap().to_string();
        assert!(row.contains(",,"), "{row}");
        assert!(metrics_summary(&m, false).contains("cerr_neg=-"));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let bins = vec![ReliabilityBin {
            lo: 0.5,
            hi: 0.7,
            count: 3,
            mean_conf: 0.6,
            accuracy: 0.4,
        }];
        let svg = reliability_svg(&bins);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 3);
    }
}
