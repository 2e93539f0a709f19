//! Plot data as CSV, with optional self-contained SVG renderings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use htp_core::geo::{GridSpec, LonLat};

use crate::error::{HtpError, Result};

/// Points per trajectory, counted per length.
pub fn length_histogram(trajs: &[&[LonLat]]) -> Vec<(usize, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for t in trajs {
        *counts.entry(t.len()).or_insert(0usize) += 1;
    }
    counts.into_iter().collect()
}

/// Row-major point counts over the grid; points outside are dropped.
pub fn density(trajs: &[&[LonLat]], grid: &GridSpec) -> Vec<usize> {
    let mut cells = vec![0usize; grid.rows * grid.cols];
    for p in trajs.iter().flat_map(|t| t.iter()) {
        if let Some(rc) = grid.index(*p) {
            cells[grid.cell_id(rc)] += 1;
        }
    }
    cells
}

fn csv_err(path: &Path, e: csv::Error) -> HtpError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HtpError::io(path, io),
        other => HtpError::data(format!("{}: {other:?}", path.display())),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HtpError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HtpError::io(path, e))
}

fn histogram_svg(real: &[(usize, usize)], gen: &[(usize, usize)]) -> String {
    let lo = real.iter().chain(gen).map(|r| r.0).min().unwrap_or(0);
    let hi = real.iter().chain(gen).map(|r| r.0).max().unwrap_or(0);
    let frac = |h: &[(usize, usize)]| {
        let n: usize = h.iter().map(|r| r.1).sum();
        let mut v = vec![0.0; hi - lo + 1];
        for &(len, c) in h {
            v[len - lo] = c as f64 / n.max(1) as f64;
        }
        v
    };
    let (fr, fg) = (frac(real), frac(gen));
    let top = fr.iter().chain(&fg).cloned().fold(1e-12, f64::max);
    let (w, h, pad) = (640.0, 320.0, 30.0);
    let bw = (w - 2.0 * pad) / fr.len() as f64;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    for (i, (a, b)) in fr.iter().zip(&fg).enumerate() {
        let x = pad + i as f64 * bw;
        for (j, (v, color)) in [(a, "#1f77b4"), (b, "#ff7f0e")].into_iter().enumerate() {
            let bh = v / top * (h - 2.0 * pad);
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"{color}\" fill-opacity=\"0.7\"/>",
                x + j as f64 * bw / 2.0,
                h - pad - bh,
                bw / 2.0
            );
        }
    }
    let _ = writeln!(
        s,
        "<text x=\"{pad}\" y=\"18\" font-size=\"12\">points per trajectory {lo}..{hi}: real (blue), generated (orange)</text>"
    );
    s.push_str("</svg>\n");
    s
}

fn heatmap_svg(cells: &[usize], grid: &GridSpec, title: &str) -> String {
    let px = 4usize;
    let (w, h) = (grid.cols * px, grid.rows * px + 20);
    let top = cells.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"black\"/>");
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let v = cells[grid.cell_id((r, c))];
            if v == 0 {
                continue;
            }
            // Log scale so sparse cells remain visible.
            let t = (1.0 + v as f64).ln() / (1.0 + top).ln();
            let g = (255.0 * t) as u8;
            let y = 20 + (grid.rows - 1 - r) * px;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{y}\" width=\"{px}\" height=\"{px}\" fill=\"rgb(255,{g},0)\"/>",
                c * px
            );
        }
    }
    let _ = writeln!(s, "<text x=\"4\" y=\"14\" font-size=\"12\" fill=\"white\">{title}</text>");
    s.push_str("</svg>\n");
    s
}

/// Writes the histogram and density CSVs (and SVGs when asked); returns the
/// paths written.
pub fn write_all(dir: &Path, real: &[&[LonLat]], gen: &[&[LonLat]], grid: &GridSpec, svg: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| HtpError::io(dir, e))?;
    let mut out = Vec::new();
    let (hr, hg) = (length_histogram(real), length_histogram(gen));
    let lens: std::collections::BTreeSet<usize> = hr.iter().chain(&hg).map(|r| r.0).collect();
    let get = |h: &[(usize, usize)], l: usize| h.iter().find(|r| r.0 == l).map_or(0, |r| r.1);
    let p = dir.join("length_hist.csv");
    write_csv(
        &p,
        &["length", "real", "generated"],
        lens.iter()
            .map(|&l| vec![l.to_string(), get(&hr, l).to_string(), get(&hg, l).to_string()]),
    )?;
    out.push(p);
    for (name, set) in [("real", real), ("generated", gen)] {
        let cells = density(set, grid);
        let p = dir.join(format!("density_{name}.csv"));
        write_csv(
            &p,
            &["row", "col", "count"],
            (0..grid.rows).flat_map(|r| (0..grid.cols).map(move |c| (r, c))).map(|(r, c)| {
                vec![r.to_string(), c.to_string(), cells[grid.cell_id((r, c))].to_string()]
            }),
        )?;
        out.push(p);
        if svg {
            let p = dir.join(format!("density_{name}.svg"));
            write_text(&p, &heatmap_svg(&cells, grid, &format!("{name} point density")))?;
            out.push(p);
        }
    }
    if svg {
        let p = dir.join("length_hist.svg");
        write_text(&p, &histogram_svg(&hr, &hg))?;
        out.push(p);
    }
    Ok(out)
}
