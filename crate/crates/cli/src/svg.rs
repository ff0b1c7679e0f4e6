//! Minimal SVG rendering of a contour grid: marching-squares iso-lines, the
//! critical level drawn red and dashed, and optional benchmark markers.

use std::collections::HashMap;
use std::fmt::Write;

use ndarray::Array2;
use ovbound::sensitivity::ContourGrid;

/// Grid edge identifier: horizontal edge from `(i, j)` to `(i, j+1)` or
/// vertical edge from `(i, j)` to `(i+1, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Edge {
    H(usize, usize),
    V(usize, usize),
}

/// Iso-lines of `z` (rows indexed by `y`, columns by `x`) at `level`, as
/// polylines in data coordinates.
pub fn iso_lines(x: &[f64], y: &[f64], z: &Array2<f64>, level: f64) -> Vec<Vec<(f64, f64)>> {
    let (ny, nx) = z.dim();
    if nx < 2 || ny < 2 {
        return Vec::new();
    }
    let point = |e: Edge| -> (f64, f64) {
        let (a, b, pa, pb) = match e {
            Edge::H(i, j) => (z[[i, j]], z[[i, j + 1]], (x[j], y[i]), (x[j + 1], y[i])),
            Edge::V(i, j) => (z[[i, j]], z[[i + 1, j]], (x[j], y[i]), (x[j], y[i + 1])),
        };
        let t = if b == a { 0.5 } else { ((level - a) / (b - a)).clamp(0.0, 1.0) };
        (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1))
    };
    let mut segments: Vec<(Edge, Edge)> = Vec::new();
    for i in 0..ny - 1 {
        for j in 0..nx - 1 {
            let c = [z[[i, j]], z[[i, j + 1]], z[[i + 1, j + 1]], z[[i + 1, j]]];
            if c.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let bit = |k: usize| usize::from(c[k] >= level);
            let case = bit(0) | bit(1) << 1 | bit(2) << 2 | bit(3) << 3;
            let (bottom, right, top, left) = (Edge::H(i, j), Edge::V(i, j + 1), Edge::H(i + 1, j), Edge::V(i, j));
            let centre_high = c.iter().sum::<f64>() / 4.0 >= level;
            let segs: &[(Edge, Edge)] = match case {
                0 | 15 => &[],
                1 | 14 => &[(left, bottom)],
                2 | 13 => &[(bottom, right)],
                3 | 12 => &[(left, right)],
                4 | 11 => &[(right, top)],
                6 | 9 => &[(bottom, top)],
                7 | 8 => &[(left, top)],
                5 if centre_high => &[(left, top), (bottom, right)],
                5 => &[(left, bottom), (right, top)],
                10 if centre_high => &[(left, bottom), (right, top)],
                _ => &[(left, top), (bottom, right)],
            };
            segments.extend_from_slice(segs);
        }
    }
    chain(segments).into_iter().map(|line| line.into_iter().map(point).collect()).collect()
}

/// Joins segments sharing an edge into polylines.
fn chain(segments: Vec<(Edge, Edge)>) -> Vec<Vec<Edge>> {
    let mut by_edge: HashMap<Edge, Vec<usize>> = HashMap::new();
    for (k, (a, b)) in segments.iter().enumerate() {
        by_edge.entry(*a).or_default().push(k);
        by_edge.entry(*b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let next = |edge: Edge, used: &[bool]| by_edge[&edge].iter().copied().find(|&k| !used[k]);
    // Start from open ends first so open lines come out whole.
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by_key(|&k| {
        let (a, b) = segments[k];
        usize::from(by_edge[&a].len() > 1 && by_edge[&b].len() > 1)
    });
    for start in order {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let (first, mut tail) = if by_edge[&b].len() == 1 { (b, a) } else { (a, b) };
        let mut line = vec![first, tail];
        while let Some(k) = next(tail, &used) {
            used[k] = true;
            let (p, q) = segments[k];
            tail = if p == tail { q } else { p };
            line.push(tail);
        }
        lines.push(line);
    }
    lines
}

/// A labelled point drawn on top of the contours.
#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub label: String,
    pub eta_d2: f64,
    pub eta_y2: f64,
}

const W: f64 = 640.0;
const H: f64 = 540.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;

fn span(v: &[f64]) -> (f64, f64) {
    let lo = v.first().copied().unwrap_or(0.0);
    let hi = v.last().copied().unwrap_or(1.0);
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1e-9)
    }
}

pub fn render(grid: &ContourGrid, levels: usize, markers: &[Marker]) -> String {
    let z = grid.values(grid.quantity);
    let (x0, x1) = span(&grid.eta_d2);
    let (y0, y1) = span(&grid.eta_y2);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="28" text-anchor="middle" font-size="15">{} (|rho| = {:.2}, threshold {})</text>"#,
        W / 2.0,
        grid.quantity.as_str(),
        grid.rho_abs,
        grid.threshold
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="black"/><text x="{0:.1}" y="{3:.1}" text-anchor="middle">{4:.3}</text>"#,
            px(fx),
            H - BOTTOM,
            H - BOTTOM + 5.0,
            H - BOTTOM + 20.0,
            fx
        );
        let _ = writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="black"/><text x="{3:.1}" y="{4:.1}" text-anchor="end">{5:.3}</text>"#,
            LEFT,
            py(fy),
            LEFT - 5.0,
            LEFT - 8.0,
            py(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">partial R2 of treatment with confounders (eta_d2)</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 25.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(22,{:.1}) rotate(-90)" text-anchor="middle">partial R2 of outcome with confounders (eta_y2)</text>"#,
        TOP + (H - TOP - BOTTOM) / 2.0
    );

    let finite: Vec<f64> = z.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let path = |lines: &[Vec<(f64, f64)>]| -> String {
        let mut d = String::new();
        for line in lines {
            for (k, (x, y)) in line.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, px(*x), py(*y));
            }
        }
        d.trim_end().to_string()
    };
    if hi > lo && levels > 0 {
        for k in 1..=levels {
            let level = lo + (hi - lo) * k as f64 / (levels + 1) as f64;
            let lines = iso_lines(&grid.eta_d2, &grid.eta_y2, &z, level);
            if lines.is_empty() {
                continue;
            }
            let _ = writeln!(s, r##"<path d="{}" fill="none" stroke="#777" stroke-width="1"/>"##, path(&lines));
            if let Some(&(x, y)) = lines[0].get(lines[0].len() / 2) {
                let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" fill="#555" font-size="10">{level:.3}</text>"##, px(x) + 3.0, py(y) - 3.0);
            }
        }
    }
    let critical = iso_lines(&grid.eta_d2, &grid.eta_y2, &z, grid.threshold);
    if !critical.is_empty() {
        let _ = writeln!(
            s,
            r##"<path d="{}" fill="none" stroke="#d62728" stroke-width="2" stroke-dasharray="6,4"/>"##,
            path(&critical)
        );
    }
    for m in markers {
        let (x, y) = (px(m.eta_d2.clamp(x0, x1)), py(m.eta_y2.clamp(y0, y1)));
        let _ = writeln!(
            s,
            r#"<path d="M{:.1},{:.1} L{:.1},{:.1} L{:.1},{:.1} Z" fill="black"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            x,
            y - 5.0,
            x - 4.5,
            y + 3.5,
            x + 4.5,
            y + 3.5,
            x + 7.0,
            y - 6.0,
            escape(&m.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
