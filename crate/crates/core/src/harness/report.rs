use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rate::RateFit;
use crate::error::{Error, Result};

/// Which columns to draw: `y` against `x` on log-log axes, one series per
/// distinct value of `series`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub x: String,
    pub y: String,
    pub series: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub experiment: String,
    /// Free-form header lines, written as `#` comments.
    pub meta: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Rate fits keyed by series label.
    pub fits: Vec<(String, RateFit)>,
    /// One message per failed cell.
    pub failures: Vec<String>,
    pub plot: Option<PlotSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Svg,
}

impl ResultTable {
    pub fn new(experiment: &str, columns: &[&str]) -> Self {
        ResultTable {
            experiment: experiment.to_string(),
            meta: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            fits: Vec::new(),
            failures: Vec::new(),
            plot: None,
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Values of one column, in row order.
    pub fn values(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column(name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }

    /// Header comment lines, rows in shortest round-trip float formatting.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for line in &self.meta {
            for part in line.split('\n') {
                if part.is_empty() {
                    writeln!(out, "#")?;
                } else {
                    writeln!(out, "# {part}")?;
                }
            }
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses what [`ResultTable::write_csv`] produced. Fits, failures and
    /// the plot spec are not stored in the CSV body and come back empty.
    pub fn read_csv<R: Read>(mut input: R, experiment: &str) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut meta = Vec::new();
        let mut body = String::new();
        for line in text.lines() {
            match line.strip_prefix("# ") {
                Some(m) => meta.push(m.to_string()),
                None if line == "#" => meta.push(String::new()),
                None => {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let columns: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number {s:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != columns.len() {
                return Err(Error::Format("row length differs from header".into()));
            }
            rows.push(row);
        }
        Ok(ResultTable { experiment: experiment.to_string(), meta, columns, rows, fits: Vec::new(), failures: Vec::new(), plot: None })
    }

    pub fn to_svg(&self) -> String {
        svg(self)
    }

    pub fn emit(&self, format: Format, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        match format {
            Format::Csv => self.write_csv(&mut out)?,
            Format::Svg => out.write_all(self.to_svg().as_bytes())?,
        }
        out.flush()?;
        Ok(())
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn collect_series(t: &ResultTable, p: &PlotSpec) -> Vec<Series> {
    let (Some(xi), Some(yi)) = (t.column(&p.x), t.column(&p.y)) else {
        return Vec::new();
    };
    let si = p.series.as_ref().and_then(|s| t.column(s));
    let mut out: Vec<(f64, Series)> = Vec::new();
    for row in &t.rows {
        let (x, y) = (row[xi], row[yi]);
        if !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()) {
            continue;
        }
        let key = si.map_or(0.0, |j| row[j]);
        let pos = match out.iter().position(|(k, _)| k.to_bits() == key.to_bits()) {
            Some(i) => i,
            None => {
                let label = match (&p.series, si) {
                    (Some(name), Some(_)) => format!("{name}={key}"),
                    _ => p.y.clone(),
                };
                out.push((key, Series { label, points: Vec::new() }));
                out.len() - 1
            }
        };
        out[pos].1.points.push((x, y));
    }
    out.into_iter().map(|(_, s)| s).collect()
}

fn svg(t: &ResultTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, WIDTH / 2.0, t.experiment);
    let series = match &t.plot {
        Some(p) => collect_series(t, p),
        None => Vec::new(),
    };
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let lx: Vec<f64> = all.iter().map(|p| p.0.log10()).collect();
    let ly: Vec<f64> = all.iter().map(|p| p.1.log10()).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = span(&lx);
    let (y0, y1) = span(&ly);
    let px = |x: f64| MARGIN + (x.log10() - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y.log10() - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let (l, r, top, bot) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<line x1="{l}" y1="{bot}" x2="{r}" y2="{bot}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{l}" y1="{bot}" x2="{l}" y2="{top}" stroke="black"/>"#);
    if let Some(p) = &t.plot {
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">log {}</text>"#, WIDTH / 2.0, HEIGHT - 20.0, p.x);
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">log {}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            p.y
        );
    }
    let _ = writeln!(s, r#"<text x="{l}" y="{}" font-family="sans-serif" font-size="10">{:.3e}</text>"#, bot + 14.0, 10f64.powf(x0));
    let _ = writeln!(s, r#"<text x="{r}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{:.3e}</text>"#, bot + 14.0, 10f64.powf(x1));
    let _ = writeln!(s, r#"<text x="{}" y="{bot}" font-family="sans-serif" font-size="10" text-anchor="end">{:.3e}</text>"#, l - 4.0, 10f64.powf(y0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{:.3e}</text>"#, l - 4.0, top + 8.0, 10f64.powf(y1));
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for (x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(*x), py(*y));
        }
        let fit = t.fits.iter().find(|(label, _)| *label == ser.label).map(|(_, f)| f);
        let xmin = ser.points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let xmax = ser.points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let d = match fit {
            Some(f) => format!("M {:.2} {:.2} L {:.2} {:.2}", px(xmin), py(f.predict(xmin)), px(xmax), py(f.predict(xmax))),
            None => {
                let mut d = String::new();
                for (j, (x, y)) in ser.points.iter().enumerate() {
                    let _ = write!(d, "{}{:.2} {:.2}", if j == 0 { "M " } else { " L " }, px(*x), py(*y));
                }
                d
            }
        };
        let _ = writeln!(s, r#"<path d="{d}" stroke="{color}" fill="none" stroke-width="1.5"/>"#);
        let note = match fit {
            Some(f) => format!("{}: slope {:.3} (r2 {:.3})", ser.label, f.slope, f.r2),
            None => format!("{}: no fit", ser.label),
        };
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{note}</text>"#,
            l + 10.0,
            top + 16.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_table_is_header_only() {
        let t = ResultTable::new("x", &["n", "mean"]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "n,mean\n");
    }

    #[test]
    fn meta_survives_round_trip() {
        let mut t = ResultTable::new("x", &["a"]);
        t.meta = vec!["experiment = \"iid_rate\"".into(), "".into(), "fit d=1: slope -0.5".into()];
        t.rows.push(vec![1.5]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = ResultTable::read_csv(buf.as_slice(), "x").unwrap();
        assert_eq!(back.meta, t.meta);
        assert_eq!(back.rows, t.rows);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(rows in proptest::collection::vec(proptest::collection::vec(-1e300f64..1e300, 3), 0..20)) {
            let mut t = ResultTable::new("x", &["a", "b", "c"]);
            t.rows = rows;
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            let back = ResultTable::read_csv(buf.as_slice(), "x").unwrap();
            prop_assert_eq!(back.columns, t.columns);
            prop_assert_eq!(back.rows.len(), t.rows.len());
            for (r, s) in back.rows.iter().zip(&t.rows) {
                for (a, b) in r.iter().zip(s) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
