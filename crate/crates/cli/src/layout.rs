//! Where each record of a run lives and what files it must contain.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use sdlab::distill::SplitMetrics;

use crate::manifest::{ExperimentKind, Manifest};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILED_FILE: &str = "FAILED";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PER_SEED_FILE: &str = "per_seed.csv";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotKind {
    /// A trained model that appears in the summary tables.
    Model,
    /// An ensemble member: stored, but not a table column.
    Member,
    /// A prediction rule over several models (BAN, ensemble teacher).
    Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub label: String,
    pub kind: SlotKind,
    /// Relative to the run directory.
    pub dir: PathBuf,
}

impl Slot {
    pub fn required_files(&self, m: &Manifest) -> Vec<PathBuf> {
        let mut names = vec!["record.json"];
        if self.kind != SlotKind::Aggregate {
            names.extend(["model.ckpt", "metrics.csv"]);
        }
        if self.kind == SlotKind::Model {
            if let Some(c) = &m.curvature {
                names.extend(["curvature.json", "spectrum.csv"]);
                if c.slice.is_some() {
                    names.push("slice.csv");
                }
            }
        }
        names.into_iter().map(|n| self.dir.join(n)).collect()
    }
}

pub fn seed_dir(seed: u64) -> PathBuf {
    PathBuf::from(format!("seed-{seed}"))
}

pub fn round_label(n: usize) -> String {
    if n == 0 {
        "T".into()
    } else {
        format!("S{n}")
    }
}

/// Ensemble sizes in training order, duplicates removed.
pub fn ensemble_sizes(m: &Manifest) -> Vec<usize> {
    let mut s = m.ensemble.sizes.clone();
    s.sort_unstable();
    s.dedup();
    s
}

/// Every record one seed produces, in table column order.
pub fn slots(m: &Manifest, seed: u64) -> Vec<Slot> {
    let base = seed_dir(seed);
    let slot = |label: String, kind, dir: PathBuf| Slot { label, kind, dir };
    let mut out: Vec<Slot> = (0..m.chain_length())
        .map(|n| {
            slot(
                round_label(n),
                SlotKind::Model,
                base.join(format!("round-{n}")),
            )
        })
        .collect();
    if m.kind == ExperimentKind::Ban {
        out.push(slot("BAN".into(), SlotKind::Aggregate, base.join("ban")));
    }
    if m.kind == ExperimentKind::EnsembleTeacher {
        let sizes = ensemble_sizes(m);
        let largest = sizes.last().copied().unwrap_or(0);
        for i in 0..largest {
            out.push(slot(
                format!("M{i}"),
                SlotKind::Member,
                base.join("members").join(format!("member-{i}")),
            ));
        }
        for s in sizes {
            let dir = base.join(format!("ensemble-{s}"));
            out.push(slot(format!("E{s}"), SlotKind::Aggregate, dir.clone()));
            out.push(slot(format!("D{s}"), SlotKind::Model, dir.join("student")));
        }
    }
    if m.trains_sam() {
        out.push(slot("SAM".into(), SlotKind::Model, base.join("sam")));
    }
    out
}

/// Column heading for a record label.
pub fn display_name(label: &str) -> String {
    match label {
        "T" => "Teacher".into(),
        "BAN" | "SAM" => label.into(),
        _ => {
            let (head, n) = label.split_at(1);
            match head {
                "S" => format!("Round {n}"),
                "E" => format!("Ensemble {n}"),
                "D" => format!("Student of {n}"),
                _ => label.into(),
            }
        }
    }
}

/// Contents of `record.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFile {
    pub label: String,
    pub seed: u64,
    pub kind: SlotKind,
    pub round: Option<usize>,
    pub checkpoint_epoch: Option<usize>,
    pub epochs_completed: Option<usize>,
    pub discrepancy: Option<f64>,
    pub train: Option<SplitMetrics>,
    pub heldout: SplitMetrics,
    pub test: SplitMetrics,
}

/// Contents of the top-level `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seeds: Vec<u64>,
    pub manifest: Manifest,
}
