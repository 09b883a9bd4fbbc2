//! Report types, multi-split aggregation, and CSV / Markdown / SVG output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, Metric};

/// The six headline metrics, in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map_l: f64,
    pub map_i: f64,
    pub rec_l: f64,
    pub prec_l: f64,
    pub rec_i: f64,
    pub prec_i: f64,
}

impl Metrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::MapL => self.map_l,
            Metric::MapI => self.map_i,
            Metric::RecL => self.rec_l,
            Metric::PrecL => self.prec_l,
            Metric::RecI => self.rec_i,
            Metric::PrecI => self.prec_i,
        }
    }

    fn from_fn(f: impl Fn(Metric) -> f64) -> Self {
        Metrics {
            map_l: f(Metric::MapL),
            map_i: f(Metric::MapI),
            rec_l: f(Metric::RecL),
            prec_l: f(Metric::PrecL),
            rec_i: f(Metric::RecI),
            prec_i: f(Metric::PrecI),
        }
    }
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        Metrics::from_fn(|m| r.metric(m))
    }
}

/// Mean and unbiased standard deviation (`None` for a single value).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// One method's results across splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub name: String,
    pub per_split: Vec<Metrics>,
    pub mean: Metrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<Metrics>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl Row {
    pub fn aggregate(name: impl Into<String>, per_split: Vec<Metrics>) -> Self {
        assert!(!per_split.is_empty(), "aggregating zero splits");
        let stats = |m: Metric| mean_std(&per_split.iter().map(|x| x.get(m)).collect::<Vec<_>>());
        let mean = Metrics::from_fn(|m| stats(m).0);
        let std = (per_split.len() > 1).then(|| Metrics::from_fn(|m| stats(m).1.unwrap_or(0.0)));
        Row {
            name: name.into(),
            per_split,
            mean,
            std,
            notes: Vec::new(),
        }
    }

    fn cell(&self, m: Metric) -> String {
        match &self.std {
            Some(s) => format!("{:.2} ± {:.2}", self.mean.get(m), s.get(m)),
            None => format!("{:.2}", self.mean.get(m)),
        }
    }
}

/// A table of rows plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub experiment: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub rows: Vec<Row>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl Bundle {
    pub fn row(&self, name: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("| Method |");
        for m in Metric::TABLE_ORDER {
            let _ = write!(s, " {} |", m.name());
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(Metric::TABLE_ORDER.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.name);
            for m in Metric::TABLE_ORDER {
                let _ = write!(s, " {} |", r.cell(m));
            }
            s.push('\n');
        }
        s
    }

    /// One line per (row, statistic) with every metric as a column.
    pub fn csv(&self) -> String {
        let mut s = String::from("method,stat");
        for m in Metric::TABLE_ORDER {
            let _ = write!(s, ",{}", m.name());
        }
        s.push('\n');
        for r in &self.rows {
            let mut line = |stat: &str, v: &Metrics| {
                let _ = write!(s, "{},{stat}", csv_field(&r.name));
                for m in Metric::TABLE_ORDER {
                    let _ = write!(s, ",{:.4}", v.get(m));
                }
                s.push('\n');
            };
            line("mean", &r.mean);
            if let Some(std) = &r.std {
                line("std", std);
            }
            for (i, v) in r.per_split.iter().enumerate() {
                line(&format!("split{i}"), v);
            }
        }
        s
    }

    /// Writes `<experiment>.json`, `.csv` and `.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(format!("{}.json", self.experiment)), self)?;
        write_text(&dir.join(format!("{}.csv", self.experiment)), &self.csv())?;
        write_text(&dir.join(format!("{}.md", self.experiment)), &self.markdown())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            record: 0,
            message: e.to_string(),
        })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    write_text(path, &(text + "\n"))
}

/// A named polyline for [`line_plot`].
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A minimal standalone SVG line chart. Non-finite points are skipped.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let finite = || {
        series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|p| p.0.is_finite() && p.1.is_finite())
    };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in finite() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        w / 2.0,
        esc(title)
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>",
        h - pad,
        w - pad
    );
    for i in 0..=4 {
        let t = f64::from(i) / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xv:.3}</text>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{yv:.3}</text>",
            sx(xv),
            h - pad + 18.0,
            pad - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        w / 2.0,
        h - 14.0,
        esc(x_label),
        h / 2.0,
        h / 2.0,
        esc(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            pts.join(" "),
            w - pad + 4.0 - 120.0,
            pad + 16.0 * i as f64,
            esc(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
