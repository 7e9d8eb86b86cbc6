//! Critical-difference style rank diagrams as standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::stats::ComparisonResult;

const WIDTH: f64 = 640.0;
const MARGIN: f64 = 140.0;
const AXIS_Y: f64 = 60.0;
const ROW: f64 = 22.0;
const BAR_GAP: f64 = 10.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Axis of ranks 1..k from left to right, labels for the better half on the
/// left and the rest on the right, and one thick bar per clique with more
/// than one member.
pub fn render_cd_diagram(result: &ComparisonResult) -> String {
    let mut models: Vec<(&str, f64)> = result
        .models
        .iter()
        .map(|m| (m.as_str(), result.average_ranks.get(m).copied().unwrap_or(f64::NAN)))
        .collect();
    models.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    let k = models.len().max(2);
    let span = WIDTH - 2.0 * MARGIN;
    let x = |rank: f64| MARGIN + (rank - 1.0) / (k as f64 - 1.0) * span;
    let bars: Vec<(f64, f64)> = result
        .cliques
        .iter()
        .filter(|c| c.len() > 1)
        .map(|c| {
            let rs = c.iter().filter_map(|m| result.average_ranks.get(m).copied());
            let (lo, hi) = rs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(r), h.max(r)));
            (lo, hi)
        })
        .collect();
    let left = models.len().div_ceil(2);
    let label_top = AXIS_Y + BAR_GAP * (bars.len() as f64 + 1.0) + 10.0;
    let rows = left.max(models.len() - left);
    let height = label_top + ROW * rows as f64 + 20.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{AXIS_Y:.2}" x2="{:.2}" y2="{AXIS_Y:.2}" stroke="black"/>"#,
        x(1.0),
        x(k as f64)
    );
    for r in 1..=k {
        let xr = x(r as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{xr:.2}" y1="{:.2}" x2="{xr:.2}" y2="{AXIS_Y:.2}" stroke="black"/>"#,
            AXIS_Y - 6.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{xr:.2}" y="{:.2}" text-anchor="middle">{r}</text>"#,
            AXIS_Y - 10.0
        );
    }
    for (i, (lo, hi)) in bars.iter().enumerate() {
        let y = AXIS_Y + BAR_GAP * (i as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<line class="clique" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-width="4"/>"#,
            x(*lo) - 3.0,
            x(*hi) + 3.0
        );
    }
    for (i, (name, rank)) in models.iter().enumerate() {
        let on_left = i < left;
        let row = if on_left { i } else { models.len() - 1 - i };
        let y = label_top + ROW * row as f64;
        let xr = x(*rank);
        let xe = if on_left { MARGIN - 10.0 } else { WIDTH - MARGIN + 10.0 };
        let _ = writeln!(
            s,
            r#"<polyline points="{xr:.2},{AXIS_Y:.2} {xr:.2},{y:.2} {xe:.2},{y:.2}" fill="none" stroke="black"/>"#
        );
        let (anchor, xt) = if on_left { ("end", xe - 4.0) } else { ("start", xe + 4.0) };
        let _ = writeln!(
            s,
            r#"<text x="{xt:.2}" y="{:.2}" text-anchor="{anchor}">{} ({rank:.2})</text>"#,
            y + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_cd_diagram(result: &ComparisonResult, path: &Path) -> Result<()> {
    std::fs::write(path, render_cd_diagram(result)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn result(cliques: Vec<Vec<&str>>) -> ComparisonResult {
        let ranks: BTreeMap<String, f64> = [("a", 1.25), ("b", 1.75)]
            .iter()
            .map(|(m, r)| (m.to_string(), *r))
            .collect();
        ComparisonResult {
            models: vec!["a".into(), "b".into()],
            cells: 4,
            alpha: 0.05,
            friedman_statistic: 1.0,
            friedman_p: 0.3,
            average_ranks: ranks,
            pairwise_p: vec![],
            cliques: cliques
                .into_iter()
                .map(|c| c.into_iter().map(String::from).collect())
                .collect(),
        }
    }

    #[test]
    fn one_bar_for_a_shared_clique() {
        let svg = render_cd_diagram(&result(vec![vec!["a", "b"]]));
        assert_eq!(svg.matches(r#"class="clique""#).count(), 1);
        assert!(svg.contains(">a (1.25)<") && svg.contains(">b (1.75)<"));
    }

    #[test]
    fn singletons_draw_no_bar() {
        let svg = render_cd_diagram(&result(vec![vec!["a"], vec!["b"]]));
        assert_eq!(svg.matches(r#"class="clique""#).count(), 0);
    }

    #[test]
    fn labels_are_escaped() {
        let mut r = result(vec![]);
        r.models[0] = "a<b".into();
        r.average_ranks.insert("a<b".into(), 1.0);
        assert!(render_cd_diagram(&r).contains("a&lt;b"));
    }
}
