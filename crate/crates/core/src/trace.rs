//! Per-layer preservation traces and their text exports.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Which positions entered each layer. Row 0 is the full sequence; row `l`
/// is the set left after `l` selections. A finished trace has
/// `n_layers + 1` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreservationTrace {
    seq_len: usize,
    n_layers: usize,
    kept: Vec<Vec<bool>>,
}

impl PreservationTrace {
    pub fn new(seq_len: usize, n_layers: usize) -> Self {
        PreservationTrace {
            seq_len,
            n_layers,
            kept: Vec::with_capacity(n_layers + 1),
        }
    }

    pub fn from_rows(seq_len: usize, n_layers: usize, rows: Vec<Vec<bool>>) -> Result<Self> {
        let mut t = Self::new(seq_len, n_layers);
        for r in &rows {
            t.push_layer(r)?;
        }
        Ok(t)
    }

    pub fn push_layer(&mut self, row: &[bool]) -> Result<()> {
        if row.len() != self.seq_len {
            return Err(Error::Trace(format!("row of {} positions in a trace of {}", row.len(), self.seq_len)));
        }
        if self.kept.len() > self.n_layers {
            return Err(Error::Trace(format!("trace already holds {} rows", self.kept.len())));
        }
        self.kept.push(row.to_vec());
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.kept
    }

    pub fn kept(&self, row: usize, pos: usize) -> bool {
        self.kept[row][pos]
    }

    /// Kept totals per row.
    pub fn counts(&self) -> Vec<usize> {
        self.kept.iter().map(|r| r.iter().filter(|&&k| k).count()).collect()
    }

    /// True when every row is a subset of the one before it.
    pub fn is_subset_chain(&self) -> bool {
        self.kept
            .windows(2)
            .all(|w| w[1].iter().zip(&w[0]).all(|(&now, &before)| !now || before))
    }

    /// The matrix the exports draw: one row per layer, holding the positions
    /// that layer processes.
    pub fn layer_grid(&self) -> Vec<Vec<bool>> {
        self.kept.iter().take(self.n_layers).cloned().collect()
    }

    fn check_complete(&self) -> Result<()> {
        if self.kept.len() < self.n_layers {
            return Err(Error::Trace(format!("trace has {} of {} layer rows", self.kept.len(), self.n_layers)));
        }
        Ok(())
    }
}

pub fn export_csv(trace: &PreservationTrace) -> Result<String> {
    trace.check_complete()?;
    let mut s = String::from("layer,position,kept\n");
    for (l, row) in trace.layer_grid().iter().enumerate() {
        for (p, &k) in row.iter().enumerate() {
            writeln!(s, "{},{},{}", l + 1, p, u8::from(k)).expect("write to string");
        }
    }
    Ok(s)
}

/// Inverse of [`export_csv`]: one `Vec<bool>` per layer.
pub fn parse_csv(text: &str) -> Result<Vec<Vec<bool>>> {
    let mut lines = text.lines();
    if lines.next() != Some("layer,position,kept") {
        return Err(Error::Trace("missing csv header".into()));
    }
    let mut grid: Vec<Vec<bool>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::Trace(format!("bad csv row {}: {line:?}", i + 2));
        let mut f = line.split(',');
        let (Some(l), Some(p), Some(k), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        let l: usize = l.parse().map_err(|_| bad())?;
        let p: usize = p.parse().map_err(|_| bad())?;
        let k = match k {
            "0" => false,
            "1" => true,
            _ => return Err(bad()),
        };
        if l == 0 || l > grid.len() + 1 {
            return Err(bad());
        }
        if l == grid.len() + 1 {
            grid.push(Vec::new());
        }
        let row = &mut grid[l - 1];
        if p != row.len() {
            return Err(bad());
        }
        row.push(k);
    }
    Ok(grid)
}

pub fn export_pgm(trace: &PreservationTrace) -> Result<String> {
    trace.check_complete()?;
    let mut s = format!("P2\n{} {}\n255\n", trace.seq_len, trace.n_layers);
    for row in trace.layer_grid() {
        let px: Vec<&str> = row.iter().map(|&k| if k { "0" } else { "255" }).collect();
        s.push_str(&px.join(" "));
        s.push('\n');
    }
    Ok(s)
}

/// Inverse of [`export_pgm`]; any pixel darker than mid-grey counts as kept.
pub fn parse_pgm(text: &str) -> Result<Vec<Vec<bool>>> {
    let mut tok = text.split_ascii_whitespace();
    if tok.next() != Some("P2") {
        return Err(Error::Trace("not a plain PGM".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        tok.next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Trace(format!("bad pgm {what}")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max == 0 {
        return Err(Error::Trace("pgm maxval 0".into()));
    }
    let mut grid = Vec::with_capacity(h);
    for _ in 0..h {
        let mut row = Vec::with_capacity(w);
        for _ in 0..w {
            let v = num("pixel")?;
            row.push(2 * v < max);
        }
        grid.push(row);
    }
    if tok.next().is_some() {
        return Err(Error::Trace("trailing pgm data".into()));
    }
    Ok(grid)
}

/// One evaluated point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub series: String,
    pub alpha: f64,
    pub speedup: f64,
    pub metric: f64,
    pub memory_ratio: f64,
}

pub fn export_sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("alpha,speedup_macs,metric,memory_ratio\n");
    for p in points {
        writeln!(s, "{},{:.6},{:.6},{:.6}", p.alpha, p.speedup, p.metric, p.memory_ratio).expect("write to string");
    }
    s
}

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Three side-by-side panels against MAC speedup: the metric, the memory
/// ratio and α. One polyline per series.
pub fn export_sweep_svg(points: &[SweepPoint], metric_name: &str) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Trace("sweep table is empty".into()));
    }
    let mut series: Vec<&str> = Vec::new();
    for p in points {
        if !series.contains(&p.series.as_str()) {
            series.push(&p.series);
        }
    }
    let width = 3.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 16.0 * series.len() as f64;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    )
    .expect("write to string");
    let panels: [(&str, fn(&SweepPoint) -> f64); 3] = [
        (metric_name, |p| p.metric),
        ("memory ratio", |p| p.memory_ratio),
        ("alpha", |p| p.alpha),
    ];
    let (x_lo, x_hi) = range(points.iter().map(|p| p.speedup));
    for (i, (label, get)) in panels.iter().enumerate() {
        let ox = MARGIN + i as f64 * (PANEL_W + MARGIN);
        let oy = MARGIN;
        let (y_lo, y_hi) = range(points.iter().map(get));
        let px = |x: f64| ox + (x - x_lo) / (x_hi - x_lo) * PANEL_W;
        let py = |y: f64| oy + PANEL_H - (y - y_lo) / (y_hi - y_lo) * PANEL_H;
        writeln!(
            s,
            r#"<g><rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#
        )
        .expect("write to string");
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">speedup (MACs)</text>"#,
            ox + PANEL_W / 2.0,
            oy + PANEL_H + 32.0
        )
        .expect("write to string");
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">{}</text>"#,
            ox - 30.0,
            oy + PANEL_H / 2.0,
            ox - 30.0,
            oy + PANEL_H / 2.0,
            escape(label)
        )
        .expect("write to string");
        for (v, anchor, x, y) in [
            (x_lo, "start", ox, oy + PANEL_H + 14.0),
            (x_hi, "end", ox + PANEL_W, oy + PANEL_H + 14.0),
        ] {
            writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.2}</text>"#).expect("write to string");
        }
        for (v, y) in [(y_lo, oy + PANEL_H), (y_hi, oy + 10.0)] {
            writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{v:.3}</text>"#, ox - 4.0).expect("write to string");
        }
        for (k, name) in series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let mut pts: Vec<&SweepPoint> = points.iter().filter(|p| p.series == *name).collect();
            pts.sort_by(|a, b| a.speedup.total_cmp(&b.speedup));
            let coords: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.speedup), py(get(p)))).collect();
            if coords.len() > 1 {
                writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    coords.join(" ")
                )
                .expect("write to string");
            }
            for p in &pts {
                writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    px(p.speedup),
                    py(get(p))
                )
                .expect("write to string");
            }
        }
        s.push_str("</g>\n");
    }
    for (k, name) in series.iter().enumerate() {
        let y = PANEL_H + 2.0 * MARGIN + 16.0 * k as f64;
        writeln!(
            s,
            r#"<text x="{MARGIN}" y="{y}" fill="{}">{}</text>"#,
            COLORS[k % COLORS.len()],
            escape(name)
        )
        .expect("write to string");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PreservationTrace {
        PreservationTrace::from_rows(
            4,
            2,
            vec![vec![true; 4], vec![true, false, true, true], vec![false, false, true, true]],
        )
        .unwrap()
    }

    #[test]
    fn csv_tiny() {
        let t = PreservationTrace::from_rows(2, 1, vec![vec![true, true], vec![true, true]]).unwrap();
        assert_eq!(export_csv(&t).unwrap(), "layer,position,kept\n1,0,1\n1,1,1\n");
    }

    #[test]
    fn csv_and_pgm_agree() {
        let t = small();
        let csv = export_csv(&t).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 4);
        assert_eq!(parse_csv(&csv).unwrap(), t.layer_grid());
        assert_eq!(parse_pgm(&export_pgm(&t).unwrap()).unwrap(), t.layer_grid());
    }

    #[test]
    fn pgm_header_and_pixels() {
        let pgm = export_pgm(&small()).unwrap();
        let tok: Vec<&str> = pgm.split_ascii_whitespace().collect();
        assert_eq!(&tok[..4], ["P2", "4", "2", "255"]);
        assert_eq!(&tok[4..], ["0", "0", "0", "0", "0", "255", "0", "0"]);
    }

    #[test]
    fn counts_and_chain() {
        let t = small();
        assert_eq!(t.counts(), vec![4, 3, 2]);
        assert!(t.is_subset_chain());
        let bad = PreservationTrace::from_rows(2, 1, vec![vec![true, false], vec![false, true]]).unwrap();
        assert!(!bad.is_subset_chain());
    }

    #[test]
    fn row_width_checked() {
        let mut t = PreservationTrace::new(3, 1);
        assert!(t.push_layer(&[true]).is_err());
    }

    #[test]
    fn empty_sweep_rejected() {
        assert!(export_sweep_svg(&[], "accuracy").is_err());
    }
}
