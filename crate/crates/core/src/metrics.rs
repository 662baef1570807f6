use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Confusion matrix (rows true, columns predicted) and the scores derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_confusion(classes: Vec<String>, confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = classes.len();
        if confusion.len() != c || confusion.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension {
                op: "confusion matrix",
                lhs: vec![c, c],
                rhs: vec![confusion.len(), confusion.first().map_or(0, Vec::len)],
            });
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::EmptySequence("evaluation split"));
        }
        let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassScores> = (0..c)
            .map(|k| {
                let tp = confusion[k][k];
                let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
                let support: u64 = confusion[k].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassScores {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
        Ok(EvalReport {
            accuracy: ratio(trace, total),
            macro_precision: mean(|s| s.precision),
            macro_recall: mean(|s| s.recall),
            macro_f1: mean(|s| s.f1),
            per_class,
            classes,
            confusion,
        })
    }

    /// Scores class-index pairs.
    pub fn from_predictions(classes: Vec<String>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Dimension {
                op: "evaluate",
                lhs: vec![truth.len()],
                rhs: vec![predicted.len()],
            });
        }
        let c = classes.len();
        let mut confusion = vec![vec![0u64; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            let bad = if t >= c { Some(t) } else if p >= c { Some(p) } else { None };
            if let Some(index) = bad {
                return Err(Error::Index {
                    what: "class",
                    index,
                    bound: c,
                });
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(classes, confusion)
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Comma-separated grid with a header row of predicted labels.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for name in &self.classes {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.confusion) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Row-normalized heatmap as a standalone SVG document.
    pub fn confusion_svg(&self, title: &str) -> String {
        const CELL: usize = 80;
        const MARGIN: usize = 110;
        let c = self.classes.len();
        let size = MARGIN + c * CELL + 20;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            size + 20
        );
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            size / 2,
            xml_escape(title)
        ));
        for (i, name) in self.classes.iter().enumerate() {
            let centre = MARGIN + i * CELL + CELL / 2;
            svg.push_str(&format!(
                "<text x=\"{centre}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                MARGIN - 10,
                xml_escape(name)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
                MARGIN - 10,
                centre + 4,
                xml_escape(name)
            ));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            let support: u64 = row.iter().sum();
            for (j, &v) in row.iter().enumerate() {
                let share = ratio(v, support);
                let shade = (255.0 * (1.0 - share)).round() as u8;
                let ink = if share > 0.5 { "white" } else { "black" };
                let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
                svg.push_str(&format!(
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#888\"/>\n"
                ));
                svg.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\">{v} ({:.2})</text>\n",
                    x + CELL / 2,
                    y + CELL / 2 + 4,
                    share
                ));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">predicted</text>\n",
            MARGIN + c * CELL / 2,
            size + 10
        ));
        svg.push_str("</svg>\n");
        svg
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
