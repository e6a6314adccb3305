//! Attention exports: per-instance CSV, per-task mean matrix CSV and an SVG heatmap.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::EvalReport;

/// Task-by-prompt matrix of mean attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub tasks: Vec<String>,
    /// Column labels; the final column is the target prompt when present.
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl AttentionMatrix {
    /// One row per report, each the mean of that report's instance vectors.
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        let first = reports
            .iter()
            .find(|r| !r.instance_attention.is_empty())
            .ok_or_else(|| Error::Data("no attention weights to export".into()))?;
        let labels = first.attention_labels.clone();
        let mut tasks = Vec::new();
        let mut values = Vec::new();
        for r in reports {
            let Some(mean) = &r.mean_attention else {
                continue;
            };
            if mean.len() != labels.len() {
                return Err(Error::Compatibility(format!(
                    "task {} has {} attention columns, expected {}",
                    r.task_id,
                    mean.len(),
                    labels.len()
                )));
            }
            tasks.push(r.task_id.clone());
            values.push(mean.clone());
        }
        Ok(Self { tasks, labels, values })
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// Rows of `instance_id, task_id, a_1..a_k`.
pub fn write_instance_csv<W: std::io::Write>(out: W, reports: &[EvalReport]) -> Result<()> {
    let k = reports
        .iter()
        .find_map(|r| r.instance_attention.first().map(Vec::len))
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["instance_id".to_string(), "task_id".to_string()];
    header.extend((1..=k).map(|j| format!("a_{j}")));
    w.write_record(&header)?;
    for r in reports {
        for (i, a) in r.instance_attention.iter().enumerate() {
            if a.len() != k {
                return Err(Error::Compatibility(format!(
                    "task {} has {} attention columns, expected {k}",
                    r.task_id,
                    a.len()
                )));
            }
            let mut row = vec![i.to_string(), r.task_id.clone()];
            row.extend(a.iter().map(|v| format!("{v:.9}")));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_matrix_csv<W: std::io::Write>(out: W, m: &AttentionMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("task_id").chain(m.labels.iter().map(String::as_str)))?;
    for (task, row) in m.tasks.iter().zip(&m.values) {
        let mut rec = vec![task.clone()];
        rec.extend(row.iter().map(|v| format!("{v:.9}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

const LIGHT: [f64; 3] = [255.0, 255.0, 255.0];
const DARK: [f64; 3] = [8.0, 48.0, 107.0];
const CELL: usize = 40;
const MARGIN_LEFT: usize = 120;
const MARGIN_TOP: usize = 80;

/// Linear white-to-navy ramp; `t` is clamped to [0, 1].
pub fn shade(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    std::array::from_fn(|c| (LIGHT[c] + (DARK[c] - LIGHT[c]) * t).round() as u8)
}

/// Relative luminance of an sRGB colour, used to compare darkness.
pub fn luminance(rgb: [u8; 3]) -> f64 {
    0.2126 * rgb[0] as f64 + 0.7152 * rgb[1] as f64 + 0.0722 * rgb[2] as f64
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone heatmap. Shading is scaled to the matrix maximum.
pub fn heatmap_svg(m: &AttentionMatrix) -> String {
    let (rows, cols) = (m.tasks.len(), m.labels.len());
    let width = MARGIN_LEFT + cols * CELL + 10;
    let height = MARGIN_TOP + rows * CELL + 10;
    let max = m.max_value();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    for (j, label) in m.labels.iter().enumerate() {
        let x = MARGIN_LEFT + j * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" transform="rotate(-45 {x} {})">{}</text>"#,
            MARGIN_TOP - 6,
            MARGIN_TOP - 6,
            escape(label)
        );
    }
    for (i, (task, row)) in m.tasks.iter().zip(&m.values).enumerate() {
        let y = MARGIN_TOP + i * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 6,
            y + CELL / 2 + 4,
            escape(task)
        );
        for (j, &v) in row.iter().enumerate() {
            let t = if max > 0.0 { v / max } else { 0.0 };
            let fill = hex::encode(shade(t));
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="#{fill}" data-value="{v:.9}"><title>{}: {v:.4}</title></rect>"##,
                MARGIN_LEFT + j * CELL,
                escape(&m.labels[j])
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `attention_instances.csv`, `attention_matrix.csv` and optionally `attention_heatmap.svg`.
pub fn export_all(dir: &Path, reports: &[EvalReport], svg: bool) -> Result<AttentionMatrix> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let open = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map_err(|e| Error::io(p, e))
    };
    write_instance_csv(open("attention_instances.csv")?, reports)?;
    let m = AttentionMatrix::from_reports(reports)?;
    write_matrix_csv(open("attention_matrix.csv")?, &m)?;
    if svg {
        let p = dir.join("attention_heatmap.svg");
        fs::write(&p, heatmap_svg(&m)).map_err(|e| Error::io(p, e))?;
    }
    Ok(m)
}

/// Cell values and fills recovered from a heatmap produced by [`heatmap_svg`].
pub fn parse_heatmap_cells(svg: &str) -> Result<Vec<(f64, [u8; 3])>> {
    let attr = |tag: &str, key: &str| -> Option<String> {
        let start = tag.find(&format!(" {key}=\""))? + key.len() + 3;
        let end = tag[start..].find('"')? + start;
        Some(tag[start..end].to_string())
    };
    let bad = |m: &str| Error::Data(format!("malformed heatmap: {m}"));
    svg.split("<rect")
        .skip(1)
        .map(|tag| {
            let fill = attr(tag, "fill").ok_or_else(|| bad("missing fill"))?;
            let value = attr(tag, "data-value").ok_or_else(|| bad("missing data-value"))?;
            let rgb: [u8; 3] = hex::decode(fill.trim_start_matches('#'))
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| bad("fill is not #rrggbb"))?;
            let value = value.parse().map_err(|_| bad("value is not a number"))?;
            Ok((value, rgb))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn report(task: &str, rows: Vec<Vec<f64>>) -> EvalReport {
        let k = rows[0].len();
        let mean = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect();
        EvalReport {
            task_id: task.into(),
            split: Split::Dev,
            n: rows.len(),
            exact_match: 0.0,
            attention_labels: vec!["copy".into(), "sort".into(), "target".into()],
            mean_attention: Some(mean),
            instance_attention: rows,
        }
    }

    fn reports() -> Vec<EvalReport> {
        vec![
            report("reverse", vec![vec![0.2, 0.3, 0.5], vec![0.4, 0.1, 0.5]]),
            report("rotate", vec![vec![0.7, 0.2, 0.1]]),
        ]
    }

    #[test]
    fn instance_csv_has_t_plus_three_columns() {
        let mut buf = Vec::new();
        write_instance_csv(&mut buf, &reports()).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(rd.headers().unwrap().len(), 2 + 3);
        let rows: Vec<_> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!(r.len(), 5);
            let s: f64 = (2..5).map(|j| r[j].parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(&rows[2][1], "rotate");
    }

    #[test]
    fn matrix_rows_sum_to_one() {
        let m = AttentionMatrix::from_reports(&reports()).unwrap();
        assert_eq!(m.tasks, ["reverse", "rotate"]);
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &m).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), ["task_id", "copy", "sort", "target"]);
        for r in rd.records() {
            let r = r.unwrap();
            let s: f64 = (1..4).map(|j| r[j].parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn heatmap_is_darker_for_larger_values() {
        let m = AttentionMatrix::from_reports(&reports()).unwrap();
        let cells = parse_heatmap_cells(&heatmap_svg(&m)).unwrap();
        assert_eq!(cells.len(), 6);
        for a in &cells {
            for b in &cells {
                if a.0 > b.0 {
                    assert!(luminance(a.1) <= luminance(b.1), "{a:?} lighter than {b:?}");
                }
            }
        }
        let darkest = cells.iter().max_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
        assert_eq!(darkest.1, shade(1.0));
    }

    #[test]
    fn shade_ramp_is_monotone() {
        let l: Vec<f64> = (0..=100).map(|i| luminance(shade(i as f64 / 100.0))).collect();
        assert!(l.windows(2).all(|w| w[1] <= w[0]));
        assert!(l[0] > l[100]);
    }

    #[test]
    fn export_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        export_all(dir.path(), &reports(), true).unwrap();
        for f in ["attention_instances.csv", "attention_matrix.csv", "attention_heatmap.svg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn nothing_to_export_is_an_error() {
        let mut r = reports();
        for x in &mut r {
            x.instance_attention.clear();
            x.mean_attention = None;
        }
        assert!(matches!(AttentionMatrix::from_reports(&r), Err(Error::Data(_))));
    }
}
