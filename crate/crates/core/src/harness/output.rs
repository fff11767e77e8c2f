use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{RunRecord, SweepResult};
use crate::error::{Error, Result};
use crate::metrics::{resilience_curve, TargetGrid};
use crate::protocol::EpisodeRow;

pub const CSV_HEADER: &str = "episode,protocol,goodput,loss,epsilon,switched";
pub const SWEEP_HEADER: &str = "T_M,seed,switch_episode,meta_resilience";
pub const TRAIN_LOG_HEADER: &str = "episode,step,loss,epsilon,goodput";

#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub dir: PathBuf,
    /// File stem, e.g. `t3npm-seed0`.
    pub stem: String,
    pub svg: bool,
}

impl OutputPaths {
    pub fn new(dir: impl Into<PathBuf>, stem: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            stem: stem.into(),
            svg: false,
        }
    }

    pub fn episodes_csv(&self) -> PathBuf {
        self.dir.join(format!("{}.csv", self.stem))
    }

    pub fn train_log_csv(&self) -> PathBuf {
        self.dir.join(format!("{}.train.csv", self.stem))
    }

    pub fn summary_json(&self) -> PathBuf {
        self.dir.join(format!("{}.summary.json", self.stem))
    }

    pub fn curve_csv(&self) -> PathBuf {
        self.dir.join(format!("{}.curve.csv", self.stem))
    }

    pub fn goodput_svg(&self) -> PathBuf {
        self.dir.join(format!("{}.goodput.svg", self.stem))
    }

    pub fn curve_svg(&self) -> PathBuf {
        self.dir.join(format!("{}.curve.svg", self.stem))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[EpisodeRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.episode,
            r.protocol,
            r.goodput,
            opt(r.loss),
            opt(r.epsilon),
            u8::from(r.switched)
        );
    }
    s
}

/// Parses a per-episode CSV written by [`rows_to_csv`].
pub fn read_rows_csv(text: &str) -> Result<Vec<EpisodeRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Payload("unexpected episode CSV header".into()));
    }
    let bad = |line: &str| Error::Payload(format!("malformed episode row {line:?}"));
    let num = |s: &str, line: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(line))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            Ok(EpisodeRow {
                episode: f[0].parse().map_err(|_| bad(line))?,
                protocol: f[1].parse()?,
                goodput: f[2].parse().map_err(|_| bad(line))?,
                loss: num(f[3], line)?,
                epsilon: num(f[4], line)?,
                switched: match f[5] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(line)),
                },
            })
        })
        .collect()
}

/// One line per training step; `goodput` is the tested goodput of the
/// step's episode.
pub fn train_log_to_csv(record: &RunRecord) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for st in &record.steps {
        let g = record.rows.iter().find(|r| r.episode == st.episode).map(|r| r.goodput);
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            st.episode,
            st.step,
            st.loss,
            st.epsilon,
            g.map(|g| g.to_string()).unwrap_or_default()
        );
    }
    s
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the episode CSV, summary JSON and resilience-curve CSV, plus SVG
/// plots when requested. Returns the written paths.
pub fn emit_results(record: &RunRecord, grid: &TargetGrid, paths: &OutputPaths) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let csv = paths.episodes_csv();
    write(&csv, &rows_to_csv(&record.rows))?;
    written.push(csv);

    let summary = paths.summary_json();
    write(&summary, &(serde_json::to_string_pretty(&record.summary)? + "\n"))?;
    written.push(summary);

    let series = record.goodputs();
    let curve = resilience_curve(&series, grid)?;
    let mut s = String::from("target,resilience\n");
    for (g, r) in &curve {
        let _ = writeln!(s, "{g},{r}");
    }
    let curve_path = paths.curve_csv();
    write(&curve_path, &s)?;
    written.push(curve_path);

    if !record.steps.is_empty() {
        let p = paths.train_log_csv();
        write(&p, &train_log_to_csv(record))?;
        written.push(p);
    }

    if paths.svg {
        let pts: Vec<(f64, f64)> = series.iter().enumerate().map(|(n, g)| (n as f64, *g)).collect();
        let p = paths.goodput_svg();
        write(&p, &svg_plot(&record.summary.protocol.to_string(), "episode", "goodput", &pts))?;
        written.push(p);
        let p = paths.curve_svg();
        write(&p, &svg_plot(&record.summary.protocol.to_string(), "target goodput", "resilience", &curve))?;
        written.push(p);
    }
    Ok(written)
}

/// Minimal line plot with the y axis fixed to [0, 1].
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let x_max = points.iter().map(|p| p.0).fold(f64::MIN, f64::max);
    let x_min = points.iter().map(|p| p.0).fold(f64::MAX, f64::min);
    let span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let px = |x: f64| m + (x - x_min) / span * (w - 2.0 * m);
    let py = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m},{m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        path.join(" ")
    );
    let _ = writeln!(s, r#"<text x="{}" y="25" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{y_label}</text>"#,
        h / 2.0,
        h / 2.0
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `sweep.csv` and `sweep.summary.json` into `dir`.
pub fn write_sweep(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in &result.rows {
        let sw = r.switch_episode.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.t_m, r.seed, sw, r.meta_resilience);
    }
    let csv = dir.join("sweep.csv");
    write(&csv, &s)?;
    let summary = serde_json::json!({
        "means": result.means.iter().map(|(t_m, m)| serde_json::json!({"T_M": t_m, "meta_resilience": m})).collect::<Vec<_>>(),
        "interior_best": result.interior_best,
    });
    let json = dir.join("sweep.summary.json");
    write(&json, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(vec![csv, json])
}
