//! Summaries, tables and plots computed from the artifacts of a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use sdlab::curvature::{CurvatureReport, Spectrum};

use crate::error::CliError;
use crate::layout::{
    display_name, slots, RecordFile, RunManifest, SlotKind, MANIFEST_FILE, PER_SEED_FILE,
    REPORT_DIR, SUMMARY_FILE,
};
use crate::run::write_file;
use crate::svg::{bar_chart, contour_plot, line_chart, Series};

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { n, mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Up,
    Down,
    None,
}

impl Marker {
    fn compare(value: f64, reference: f64) -> Marker {
        if value > reference {
            Marker::Up
        } else if value < reference {
            Marker::Down
        } else {
            Marker::None
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Marker::Up => "↑",
            Marker::Down => "↓",
            Marker::None => "",
        }
    }
}

/// Values of one table column for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRow {
    pub seed: u64,
    pub label: String,
    pub record: RecordFile,
    pub curvature: Option<CurvatureReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub label: String,
    pub name: String,
    pub test_accuracy: Stat,
    pub test_loss: Stat,
    pub heldout_accuracy: Stat,
    pub discrepancy: Option<Stat>,
    pub trace: Option<Stat>,
    pub lambda_max: Option<Stat>,
    /// Test accuracy relative to the teacher column.
    pub marker: Marker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub experiment: String,
    pub rows: Vec<SeedRow>,
    pub columns: Vec<Column>,
    /// Written files, relative to the run directory.
    pub files: Vec<PathBuf>,
}

impl Report {
    pub fn column(&self, label: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.label == label)
    }

    /// The accuracy table as CSV: one column per model, cells are
    /// `mean ± std` test accuracy in percent.
    pub fn accuracy_table(&self) -> String {
        let mut s = String::from("experiment");
        for c in &self.columns {
            let _ = write!(s, ",{}", c.name);
        }
        s.push('\n');
        s.push_str(&self.experiment);
        for c in &self.columns {
            let a = c.test_accuracy;
            let _ = write!(s, ",{:.2} ± {:.2}", 100.0 * a.mean, 100.0 * a.std);
            if c.marker != Marker::None {
                let _ = write!(s, " {}", c.marker.symbol());
            }
        }
        s.push('\n');
        s
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::artifact(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Reads every record of a completed run and (re)writes `summary.csv`,
/// `per_seed.csv` and the `report/` directory. Output depends only on the
/// artifacts, so rebuilding is byte-for-byte reproducible.
pub fn build(run_dir: &Path) -> Result<Report, CliError> {
    let manifest_path = run_dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(CliError::MissingArtifacts(vec![manifest_path]));
    }
    let run: RunManifest = read_json(&manifest_path)?;
    let m = &run.manifest;

    let missing: Vec<PathBuf> = run
        .seeds
        .iter()
        .flat_map(|&seed| slots(m, seed))
        .flat_map(|slot| slot.required_files(m))
        .map(|p| run_dir.join(p))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingArtifacts(missing));
    }

    let mut rows = Vec::new();
    for &seed in &run.seeds {
        for slot in slots(m, seed)
            .into_iter()
            .filter(|s| s.kind != SlotKind::Member)
        {
            let dir = run_dir.join(&slot.dir);
            let record: RecordFile = read_json(&dir.join("record.json"))?;
            let curvature = if slot.kind == SlotKind::Model && m.curvature.is_some() {
                Some(read_json::<CurvatureReport>(&dir.join("curvature.json"))?)
            } else {
                None
            };
            rows.push(SeedRow {
                seed,
                label: slot.label,
                record,
                curvature,
            });
        }
    }

    let labels: Vec<String> = match run.seeds.first() {
        Some(&s) => slots(m, s)
            .into_iter()
            .filter(|s| s.kind != SlotKind::Member)
            .map(|s| s.label)
            .collect(),
        None => Vec::new(),
    };
    let mut columns = Vec::new();
    for label in &labels {
        let of = |f: &dyn Fn(&SeedRow) -> Option<f64>| {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| &r.label == label)
                .filter_map(f)
                .collect();
            Stat::of(&xs)
        };
        let some =
            |s: Option<Stat>| s.ok_or_else(|| CliError::Runtime(format!("no records for {label}")));
        columns.push(Column {
            label: label.clone(),
            name: display_name(label),
            test_accuracy: some(of(&|r| Some(r.record.test.accuracy)))?,
            test_loss: some(of(&|r| Some(r.record.test.loss)))?,
            heldout_accuracy: some(of(&|r| Some(r.record.heldout.accuracy)))?,
            discrepancy: of(&|r| r.record.discrepancy),
            trace: of(&|r| r.curvature.as_ref().map(|c| c.trace_estimate)),
            lambda_max: of(&|r| r.curvature.as_ref().map(|c| c.lambda_max)),
            marker: Marker::None,
        });
    }
    if let Some(t) = columns
        .iter()
        .find(|c| c.label == "T")
        .map(|c| c.test_accuracy.mean)
    {
        for c in columns.iter_mut().filter(|c| c.label != "T") {
            c.marker = Marker::compare(c.test_accuracy.mean, t);
        }
    }

    let mut report = Report {
        experiment: m.describe(),
        rows,
        columns,
        files: Vec::new(),
    };
    write_outputs(run_dir, &mut report)?;
    Ok(report)
}

fn write_outputs(run_dir: &Path, report: &mut Report) -> Result<(), CliError> {
    let mut files: Vec<(PathBuf, String)> = Vec::new();

    let mut per_seed = String::from(
        "seed,label,test_accuracy,test_loss,heldout_accuracy,discrepancy,trace,trace_stderr,lambda_max\n",
    );
    for r in &report.rows {
        let c = r.curvature.as_ref();
        let _ = writeln!(
            per_seed,
            "{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.label,
            r.record.test.accuracy,
            r.record.test.loss,
            r.record.heldout.accuracy,
            opt(r.record.discrepancy),
            opt(c.map(|c| c.trace_estimate)),
            opt(c.map(|c| c.trace_stderr)),
            opt(c.map(|c| c.lambda_max)),
        );
    }
    files.push((PER_SEED_FILE.into(), per_seed));

    let mut summary = String::from("label,metric,n,mean,std\n");
    for c in &report.columns {
        let metrics = [
            ("test_accuracy", Some(c.test_accuracy)),
            ("test_loss", Some(c.test_loss)),
            ("heldout_accuracy", Some(c.heldout_accuracy)),
            ("discrepancy", c.discrepancy),
            ("trace", c.trace),
            ("lambda_max", c.lambda_max),
        ];
        for (name, stat) in metrics {
            if let Some(s) = stat {
                let _ = writeln!(summary, "{},{name},{},{},{}", c.label, s.n, s.mean, s.std);
            }
        }
    }
    files.push((SUMMARY_FILE.into(), summary));

    let rep = PathBuf::from(REPORT_DIR);
    files.push((rep.join("accuracy_table.csv"), report.accuracy_table()));

    let curved: Vec<&Column> = report
        .columns
        .iter()
        .filter(|c| c.trace.is_some())
        .collect();
    if !curved.is_empty() {
        let mut bars =
            String::from("label,n,trace_mean,trace_std,lambda_max_mean,lambda_max_std\n");
        for c in &curved {
            let (t, l) = (c.trace.unwrap(), c.lambda_max.unwrap());
            let _ = writeln!(
                bars,
                "{},{},{},{},{},{}",
                c.label, t.n, t.mean, t.std, l.mean, l.std
            );
        }
        files.push((rep.join("curvature_bars.csv"), bars));
        let labels: Vec<String> = curved.iter().map(|c| c.label.clone()).collect();
        for (file, title, pick) in [
            (
                "trace_bars.svg",
                "Hessian trace",
                (|c: &Column| c.trace.unwrap()) as fn(&Column) -> Stat,
            ),
            (
                "lambda_max_bars.svg",
                "Top Hessian eigenvalue",
                |c: &Column| c.lambda_max.unwrap(),
            ),
        ] {
            let stats: Vec<Stat> = curved.iter().map(|c| pick(c)).collect();
            let means: Vec<f64> = stats.iter().map(|s| s.mean).collect();
            let stds: Vec<f64> = stats.iter().map(|s| s.std).collect();
            files.push((
                rep.join(file),
                bar_chart(title, title, &labels, &means, &stds),
            ));
        }
        if let Some(svg) = spectrum_plot(report) {
            files.push((rep.join("spectrum.svg"), svg));
        }
        for (label, svg) in slice_plots(run_dir, report)? {
            files.push((rep.join(format!("slice_{label}.svg")), svg));
        }
    }

    for (path, contents) in &files {
        write_file(&run_dir.join(path), contents)?;
    }
    report.files = files.into_iter().map(|(p, _)| p).collect();
    Ok(())
}

/// Smoothed spectral densities of the first seed, one line per model.
fn spectrum_plot(report: &Report) -> Option<String> {
    let first = report.rows.first()?.seed;
    let spectra: Vec<(String, Spectrum)> = report
        .rows
        .iter()
        .filter(|r| r.seed == first)
        .filter_map(|r| {
            let c = r.curvature.as_ref()?;
            Some((
                r.label.clone(),
                Spectrum {
                    nodes: c.spectrum.clone(),
                    probes: 0,
                    lanczos_steps: c.lanczos_steps,
                },
            ))
        })
        .collect();
    let nodes = spectra
        .iter()
        .flat_map(|(_, s)| s.nodes.iter().map(|n| n.node));
    let (lo, hi) = nodes.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    if !lo.is_finite() {
        return None;
    }
    let sigma = ((hi - lo) * 0.02).max(1e-3 * hi.abs().max(1.0));
    let (a, b) = (lo - 4.0 * sigma, hi + 4.0 * sigma);
    let xs: Vec<f64> = (0..=200).map(|i| a + (b - a) * i as f64 / 200.0).collect();
    let series: Vec<Series> = spectra
        .iter()
        .map(|(label, s)| Series {
            name: label.clone(),
            ys: s.density(&xs, sigma),
            xs: xs.clone(),
        })
        .collect();
    Some(line_chart(
        &format!("Hessian spectral density (seed {first})"),
        "eigenvalue",
        "density",
        &series,
    ))
}

fn slice_plots(run_dir: &Path, report: &Report) -> Result<Vec<(String, String)>, CliError> {
    let Some(first) = report.rows.first().map(|r| r.seed) else {
        return Ok(Vec::new());
    };
    let run: RunManifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for slot in slots(&run.manifest, first) {
        let path = run_dir.join(&slot.dir).join("slice.csv");
        if slot.kind != SlotKind::Model || !path.is_file() {
            continue;
        }
        let (coords, values) = read_slice(&path)?;
        let title = format!("Loss surface of {} (seed {first})", slot.label);
        out.push((
            slot.label.clone(),
            contour_plot(&title, &coords, &values, 10),
        ));
    }
    Ok(out)
}

/// Parses `a,b,loss` rows written in grid order.
pub fn read_slice(path: &Path) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut a_vals = Vec::new();
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<f64> = line
            .split(',')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::artifact(path, format!("line {}: {e}", i + 1)))?;
        if f.len() != 3 {
            return Err(CliError::artifact(
                path,
                format!("line {}: expected 3 fields", i + 1),
            ));
        }
        a_vals.push(f[0]);
        values.push(f[2]);
    }
    let r = (values.len() as f64).sqrt().round() as usize;
    if r < 2 || r * r != values.len() {
        return Err(CliError::artifact(path, "grid is not square"));
    }
    let coords = a_vals.iter().step_by(r).copied().collect();
    Ok((coords, values))
}
