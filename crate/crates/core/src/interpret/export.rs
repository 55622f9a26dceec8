use std::fmt::Write as _;
use std::io::Write;

use super::{FeatureMap, ImportanceMatrix, ImportanceRanking};
use crate::error::{Error, Result};

fn check_names(op: &'static str, names: &[String], n: usize) -> Result<()> {
    if names.len() != n {
        return Err(Error::shape(op, &[&[names.len()], &[n]]));
    }
    Ok(())
}

/// One row per variable, one column per timestep.
pub fn write_importance_csv<W: Write>(m: &ImportanceMatrix, names: &[String], writer: W) -> Result<()> {
    check_names("importance_csv", names, m.n_vars)?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["variable".to_string()];
    header.extend((0..m.timesteps).map(|t| format!("t{t}")));
    w.write_record(&header)?;
    for (j, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend(m.row(j).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<importance csv>", e))?;
    Ok(())
}

pub fn write_ranking_csv<W: Write>(r: &ImportanceRanking, names: &[String], writer: W) -> Result<()> {
    check_names("ranking_csv", names, r.values.len())?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rank", "variable", "importance"])?;
    for (k, &j) in r.order.iter().enumerate() {
        w.write_record(&[(k + 1).to_string(), names[j].clone(), r.values[j].to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<ranking csv>", e))?;
    Ok(())
}

/// Plain-text ranking, most important first.
pub fn ranking_table(r: &ImportanceRanking, names: &[String]) -> Result<String> {
    check_names("ranking_table", names, r.values.len())?;
    let width = names.iter().map(String::len).max().unwrap_or(8).max(8);
    let mut out = format!("{:<4} {:<width$} {:>14}\n", "rank", "variable", "importance");
    for (k, &j) in r.order.iter().enumerate() {
        let _ = writeln!(out, "{:<4} {:<width$} {:>14.6}", k + 1, names[j], r.values[j]);
    }
    Ok(out)
}

/// Dark grey at 0 to bright yellow at 1.
fn color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(24.0, 255.0), lerp(24.0, 236.0), lerp(24.0, 96.0))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Heatmap with one rectangle per cell, variables down the side and
/// timesteps along the bottom.
pub fn render_heatmap_svg(map: &FeatureMap, names: &[String], title: &str) -> Result<String> {
    check_names("heatmap_svg", names, map.n_vars)?;
    const CELL: usize = 14;
    let label_w = names.iter().map(|s| s.len()).max().unwrap_or(4) * 7 + 12;
    let top = 28;
    let width = label_w + map.timesteps * CELL + 10;
    let height = top + map.n_vars * CELL + 30;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{label_w}" y="16">{}</text>"#, escape(title));
    for (j, name) in names.iter().enumerate() {
        let y = top + j * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            label_w - 4,
            y + CELL - 3,
            escape(name)
        );
        for t in 0..map.timesteps {
            let v = map.get(j, t);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>{name} t={t}: {v:.4}</title></rect>"#,
                label_w + t * CELL,
                color(v),
                name = escape(name)
            );
        }
    }
    let axis_y = top + map.n_vars * CELL + 14;
    let step = (map.timesteps / 8).max(1);
    for t in (0..map.timesteps).step_by(step) {
        let _ = writeln!(s, r#"<text x="{}" y="{axis_y}">{t}</text>"#, label_w + t * CELL);
    }
    let _ = writeln!(
        s,
        r#"<text x="{label_w}" y="{}">timestep</text>"#,
        axis_y + 14
    );
    s.push_str("</svg>\n");
    Ok(s)
}
