//! Input-gradient saliency maps and their CSV/SVG export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::dataset::EncodedSegment;
use crate::error::{Error, Result};
use crate::model::{compute_loss, ForwardOptions, Model};
use crate::train::targets_for;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyRow {
    /// Predicted position within the segment.
    pub position: usize,
    pub target: String,
    /// Whether the model's top-1 prediction equals the target.
    pub correct: bool,
    /// L2 norm of the loss gradient at each input embedding.
    pub cells: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub inputs: Vec<String>,
    pub rows: Vec<SaliencyRow>,
}

/// One forward pass, then one backward pass per predicted position with the
/// loss restricted to that position. `labels` names each segment token.
pub fn saliency_map(
    model: &Model<f32>,
    seg: &EncodedSegment,
    positions: &[usize],
    labels: &[String],
) -> Result<SaliencyMap> {
    let n = seg.input.len();
    if labels.len() != n {
        return Err(Error::invalid("one label per segment token is required"));
    }
    let targets = targets_for(model.config().kind, seg);
    for &p in positions {
        if p == 0 || p >= n || !targets.weights[p - 1] {
            return Err(Error::invalid(format!("position {p} is not a scored position")));
        }
    }
    let mut g = Graph::new(model.params());
    let out = model.forward(&mut g, &seg.input, ForwardOptions::default())?;
    let mut rows = Vec::with_capacity(positions.len());
    for &p in positions {
        let loss = compute_loss(&mut g, out.logits, &targets.only_position(p))?;
        let grads = g.backward(loss)?;
        let d = grads.get(out.embeddings).ok_or_else(|| Error::invalid("no gradient reached the inputs"))?;
        let cells = (0..n)
            .map(|j| d.row(j).iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt())
            .collect();
        let logits = g.value(out.logits).row(p - 1);
        let correct = crate::eval::full_rank(logits, targets.targets[p - 1]) == Some(1);
        rows.push(SaliencyRow {
            position: p,
            target: labels[p].clone(),
            correct,
            cells,
        });
    }
    Ok(SaliencyMap {
        inputs: labels.to_vec(),
        rows,
    })
}

impl SaliencyMap {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["target".to_owned()];
        header.extend(self.inputs.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.target.clone()];
            rec.extend(r.cells.iter().map(|c| c.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Self-contained SVG. Cell shading is relative to the row maximum;
    /// row labels are green for correct predictions and red otherwise.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 18;
        const LABEL_W: usize = 120;
        const HEAD_H: usize = 110;
        let cols = self.inputs.len();
        let width = LABEL_W + CELL * cols + 10;
        let height = HEAD_H + CELL * self.rows.len() + 10;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
        for (j, label) in self.inputs.iter().enumerate() {
            let x = LABEL_W + j * CELL + CELL / 2;
            let _ = writeln!(
                s,
                r#"<text transform="translate({x},{}) rotate(-60)">{}</text>"#,
                HEAD_H - 4,
                escape(label)
            );
        }
        for (i, row) in self.rows.iter().enumerate() {
            let y = HEAD_H + i * CELL;
            let colour = if row.correct { "#1a7f37" } else { "#cf222e" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end" fill="{colour}">{}</text>"#,
                LABEL_W - 4,
                y + CELL - 5,
                escape(&row.target)
            );
            let max = row.cells.iter().copied().fold(0.0, f64::max);
            for (j, &c) in row.cells.iter().enumerate() {
                let t = if max > 0.0 { c / max } else { 0.0 };
                let _ = writeln!(
                    s,
                    r##"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="#ddd" data-v="{t:.6}"/>"##,
                    LABEL_W + j * CELL,
                    shade(t)
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// White at 0 to dark blue at 1.
fn shade(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(255.0, 8.0), mix(255.0, 48.0), mix(255.0, 107.0))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes `saliency.csv` and `saliency.svg` into `dir`.
pub fn export_heatmap(map: &SaliencyMap, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if map.rows.is_empty() || map.inputs.is_empty() {
        return Err(Error::invalid("saliency map is empty"));
    }
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("saliency.csv");
    let svg = dir.join("saliency.svg");
    std::fs::write(&csv, map.to_csv()?)?;
    std::fs::write(&svg, map.to_svg())?;
    Ok((csv, svg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> SaliencyMap {
        SaliencyMap {
            inputs: vec!["a".into(), "b,c".into()],
            rows: vec![
                SaliencyRow { position: 1, target: "b".into(), correct: true, cells: vec![0.5, 0.0] },
                SaliencyRow { position: 2, target: "c".into(), correct: false, cells: vec![0.25, 1.0] },
            ],
        }
    }

    #[test]
    fn csv_has_header_and_parses_back() {
        let text = two_by_two().to_csv().unwrap();
        assert_eq!(text.lines().count(), 3);
        let mut r = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(r.headers().unwrap().get(2), Some("b,c"));
        let rows: Vec<Vec<f64>> = r
            .records()
            .map(|rec| rec.unwrap().iter().skip(1).map(|x| x.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows, vec![vec![0.5, 0.0], vec![0.25, 1.0]]);
    }

    #[test]
    fn svg_is_row_normalized() {
        let svg = two_by_two().to_svg();
        assert!(svg.contains(r#"data-v="1.000000""#));
        assert!(svg.contains(r#"data-v="0.250000""#));
        assert!(svg.contains("#1a7f37") && svg.contains("#cf222e"));
        let mut scaled = two_by_two();
        scaled.rows[1].cells = vec![2.5, 10.0];
        assert_eq!(scaled.to_svg(), svg);
    }

    #[test]
    fn empty_map_rejected() {
        let m = SaliencyMap { inputs: vec![], rows: vec![] };
        assert!(export_heatmap(&m, Path::new("/tmp/never")).is_err());
    }
}
