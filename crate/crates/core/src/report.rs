//! Robustness tables and SVG charts.
//!
//! A [`ResultsTable`] has one row per `(δ, steps)` and one column per model;
//! cells hold adversarial mIoU, with the benign value on the `steps = 0`
//! row. CSV is the canonical form:
//!
//! ```text
//! delta,steps,STL,MTL(0.2)
//! 0.1,0,0.7412,0.7388
//! 0.1,50,0.1301,0.1544
//! ```
//!
//! Chart markers carry `data-model`, `data-steps`, `data-miou` (or
//! `data-frame`, `data-iou`) attributes so plotted values can be read back.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub delta: f64,
    pub steps: usize,
    pub cells: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub models: Vec<String>,
    pub rows: Vec<ResultsRow>,
}

/// Column label of a model trained with keypoint weight `lambda_k`.
pub fn model_label(lambda_k: f64) -> String {
    if lambda_k == 0.0 {
        "STL".to_string()
    } else {
        format!("MTL({lambda_k})")
    }
}

impl ResultsTable {
    pub fn new(models: Vec<String>) -> Self {
        Self {
            models,
            rows: Vec::new(),
        }
    }

    pub fn cell_count(&self) -> usize {
        self.rows.iter().map(|r| r.cells.len()).sum()
    }

    pub fn push(&mut self, delta: f64, steps: usize, cells: Vec<f64>) -> Result<()> {
        if cells.len() != self.models.len() {
            return Err(Error::Shape(format!(
                "row has {} cells for {} models",
                cells.len(),
                self.models.len()
            )));
        }
        self.rows.push(ResultsRow {
            delta,
            steps,
            cells,
        });
        Ok(())
    }

    pub fn get(&self, delta: f64, steps: usize, model: &str) -> Option<f64> {
        let col = self.models.iter().position(|m| m == model)?;
        self.rows
            .iter()
            .find(|r| r.delta == delta && r.steps == steps)
            .map(|r| r.cells[col])
    }

    /// Distinct δ values in row order.
    pub fn deltas(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.delta) {
                out.push(r.delta);
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        let mut header = vec!["delta".to_string(), "steps".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.delta.to_string(), r.steps.to_string()];
            rec.extend(r.cells.iter().map(|c| c.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() < 2 || &header[0] != "delta" || &header[1] != "steps" {
            return Err(Error::Data(
                "results csv must start with delta,steps columns".into(),
            ));
        }
        let mut table = Self::new(header.iter().skip(2).map(String::from).collect());
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |what: &str| Error::Data(format!("results csv row {}: bad {what}", i + 1));
            let delta = rec[0].parse().map_err(|_| bad("delta"))?;
            let steps = rec[1].parse().map_err(|_| bad("steps"))?;
            let cells = rec
                .iter()
                .skip(2)
                .map(|c| c.parse::<f64>().map_err(|_| bad("cell")))
                .collect::<Result<Vec<_>>>()?;
            table.push(delta, steps, cells)?;
        }
        Ok(table)
    }

    /// The CSV contents as a padded, human-readable table.
    pub fn to_text(&self) -> String {
        let mut grid: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["delta".to_string(), "steps".to_string()];
        header.extend(self.models.iter().cloned());
        grid.push(header);
        for r in &self.rows {
            let mut line = vec![
                r.delta.to_string(),
                if r.steps == 0 {
                    "benign".into()
                } else {
                    r.steps.to_string()
                },
            ];
            line.extend(r.cells.iter().map(|c| format!("{:.2}", 100.0 * c)));
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| {
                grid.iter()
                    .map(|row| row[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:>w$}"))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&rule.join("  "));
                out.push('\n');
            }
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

const STL_COLOR: &str = "#8c8c8c";
const MTL_COLORS: [&str; 5] = ["#f28e2b", "#e15759", "#d37295", "#b07aa1", "#9c755f"];

struct Frame {
    width: f64,
    height: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    x_max: f64,
}

impl Frame {
    fn new(width: u32, height: u32, x_max: f64) -> Self {
        Self {
            width: width as f64,
            height: height as f64,
            left: 56.0,
            right: 150.0,
            top: 36.0,
            bottom: 44.0,
            x_max: if x_max > 0.0 { x_max } else { 1.0 },
        }
    }

    fn x(&self, v: f64) -> f64 {
        self.left + v / self.x_max * (self.width - self.left - self.right)
    }

    fn y(&self, v: f64) -> f64 {
        self.height - self.bottom - v.clamp(0.0, 1.0) * (self.height - self.top - self.bottom)
    }

    fn open(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (w, h) = (self.width, self.height);
        writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            w / 2.0,
            escape(title)
        )
        .unwrap();
        let (x0, x1) = (self.x(0.0), self.x(self.x_max));
        for i in 0..=5 {
            let v = i as f64 / 5.0;
            let y = self.y(v);
            writeln!(
                out,
                r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#e0e0e0"/>"##
            )
            .unwrap();
            writeln!(
                out,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
                x0 - 6.0,
                y + 4.0
            )
            .unwrap();
        }
        let ticks: Vec<f64> = if self.x_max <= 10.0 && self.x_max.fract() == 0.0 {
            (0..=self.x_max as usize).map(|v| v as f64).collect()
        } else {
            (0..=5)
                .map(|i| (self.x_max * i as f64 / 5.0).round())
                .collect()
        };
        for v in ticks {
            let x = self.x(v);
            writeln!(
                out,
                r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v}</text>"#,
                h - self.bottom + 16.0
            )
            .unwrap();
        }
        let y_axis = (self.y(0.0), self.y(1.0));
        writeln!(
            out,
            r#"<line x1="{x0}" y1="{}" x2="{x1}" y2="{}" stroke="black"/>"#,
            y_axis.0, y_axis.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<line x1="{x0}" y1="{}" x2="{x0}" y2="{}" stroke="black"/>"#,
            y_axis.0, y_axis.1
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            h - 8.0,
            escape(x_label)
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
            (y_axis.0 + y_axis.1) / 2.0,
            escape(y_label)
        )
        .unwrap();
    }

    fn legend(&self, out: &mut String, i: usize, label: &str, color: &str, dashed: bool) {
        let x = self.width - self.right + 16.0;
        let y = self.top + 10.0 + 18.0 * i as f64;
        let dash = if dashed {
            r#" stroke-dasharray="5 3""#
        } else {
            ""
        };
        writeln!(
            out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
            x + 18.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}">{}</text>"#,
            x + 24.0,
            y + 4.0,
            escape(label)
        )
        .unwrap();
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// mIoU against attack steps for one δ: the single-task baseline as a gray
/// line, each multi-task model as colored dots.
pub fn steps_chart(table: &ResultsTable, delta: f64, width: u32, height: u32) -> Result<String> {
    let mut rows: Vec<&ResultsRow> = table.rows.iter().filter(|r| r.delta == delta).collect();
    if rows.is_empty() {
        return Err(Error::Data(format!("no rows for delta {delta}")));
    }
    rows.sort_by_key(|r| r.steps);
    let x_max = rows.iter().map(|r| r.steps).max().unwrap_or(0) as f64;
    let frame = Frame::new(width, height, x_max);
    let mut out = String::new();
    frame.open(
        &mut out,
        &format!("mIoU vs attack steps (delta = {delta})"),
        "attack steps",
        "mIoU",
    );
    let mut mtl = 0;
    for (col, model) in table.models.iter().enumerate() {
        let is_stl = model == "STL";
        let color = if is_stl {
            STL_COLOR
        } else {
            mtl += 1;
            MTL_COLORS[(mtl - 1) % MTL_COLORS.len()]
        };
        let points: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (frame.x(r.steps as f64), frame.y(r.cells[col])))
            .collect();
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        let style = if is_stl {
            ""
        } else {
            r#" stroke-dasharray="5 3" stroke-opacity="0.6""#
        };
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{style}/>"#,
            path.join(" ")
        )
        .unwrap();
        for (r, (x, y)) in rows.iter().zip(&points) {
            writeln!(
                out,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}" data-model="{}" data-delta="{delta}" data-steps="{}" data-miou="{}"/>"#,
                escape(model),
                r.steps,
                r.cells[col]
            )
            .unwrap();
        }
        frame.legend(&mut out, col, model, color, !is_stl);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Per-frame IoU of a benign and an attacked run of one sequence.
pub fn iou_chart(
    title: &str,
    benign: &[f64],
    adversarial: &[f64],
    width: u32,
    height: u32,
) -> String {
    let n = benign.len().max(adversarial.len());
    let frame = Frame::new(width, height, n.saturating_sub(1).max(1) as f64);
    let mut out = String::new();
    frame.open(&mut out, title, "frame", "IoU");
    for (i, (label, ious, color)) in [
        ("benign", benign, "#4e79a7"),
        ("adversarial", adversarial, "#e15759"),
    ]
    .into_iter()
    .enumerate()
    {
        let pts: Vec<String> = ious
            .iter()
            .enumerate()
            .map(|(t, v)| format!("{:.2},{:.2}", frame.x(t as f64), frame.y(*v)))
            .collect();
        writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        )
        .unwrap();
        for (t, v) in ious.iter().enumerate() {
            writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" data-series="{label}" data-frame="{t}" data-iou="{v}"/>"#,
                frame.x(t as f64),
                frame.y(*v)
            )
            .unwrap();
        }
        frame.legend(&mut out, i, label, color, false);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ResultsTable {
        let mut t = ResultsTable::new(vec!["STL".into(), model_label(0.2)]);
        t.push(0.1, 0, vec![0.75, 0.74]).unwrap();
        t.push(0.1, 50, vec![0.125, 1.0 / 3.0]).unwrap();
        t.push(0.2, 0, vec![0.75, 0.74]).unwrap();
        t
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = table();
        let csv = t.to_csv().unwrap();
        assert!(csv.starts_with("delta,steps,STL,MTL(0.2)\n"));
        assert_eq!(ResultsTable::from_csv(&csv).unwrap(), t);
        assert_eq!(t.cell_count(), 6);
        assert_eq!(t.get(0.1, 50, "MTL(0.2)"), Some(1.0 / 3.0));
        assert_eq!(t.deltas(), vec![0.1, 0.2]);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(ResultsTable::from_csv("a,b\n1,2\n").is_err());
        assert!(ResultsTable::from_csv("delta,steps,STL\n0.1,x,0.5\n").is_err());
        assert!(ResultsTable::from_csv("delta,steps,STL\n0.1,1,0.5,0.6\n").is_err());
    }

    #[test]
    fn text_table_is_aligned() {
        let text = table().to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[2].contains("benign") && lines[2].contains("75.00"));
        assert!(lines[3].ends_with("33.33"));
        // right-aligned columns end at the same offset
        assert_eq!(lines[2].len(), lines[3].len());
    }

    #[test]
    fn row_width_must_match_models() {
        let mut t = ResultsTable::new(vec!["STL".into()]);
        assert!(t.push(0.1, 0, vec![0.1, 0.2]).is_err());
    }

    #[test]
    fn charts_are_well_formed() {
        let svg = steps_chart(&table(), 0.1, 640, 400).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(steps_chart(&table(), 0.3, 640, 400).is_err());
        let svg = iou_chart("seq <a>", &[1.0, 0.5], &[1.0, 0.0], 640, 400);
        assert_eq!(svg.matches("data-iou").count(), 4);
        assert!(svg.contains("seq &lt;a&gt;"));
    }
}
