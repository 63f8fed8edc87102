//! Executes a manifest and writes every artifact of the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sdlab::curvature::{analyze, slice_model, CurvatureConfig, CurvatureProblem, Spectrum};
use sdlab::data::DataSplits;
use sdlab::distill::{
    ban_predict, distill_from_ensemble, ensemble_logits, score, self_distill_with, train_ensemble,
    train_round, DistillConfig, Ensemble, EpochMetrics, RoundRecord,
};
use sdlab::models::write_checkpoint;
use sdlab::optim::SamConfig;

use crate::error::CliError;
use crate::layout::{
    ensemble_sizes, round_label, slots, RecordFile, RunManifest, Slot, SlotKind, FAILED_FILE,
    MANIFEST_FILE,
};
use crate::manifest::{ExperimentKind, Manifest};
use crate::report::{self, Report};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Replace an existing run directory.
    pub force: bool,
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn prepare_output(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() {
            // Only ever delete something that looks like a previous run.
            if !force || !dir.join(MANIFEST_FILE).is_file() {
                return Err(CliError::OutputExists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Validates, trains every seed, then builds the report. On a runtime
/// failure the completed records stay on disk and a `FAILED` file holds
/// the error message.
pub fn run(manifest: &Manifest, opts: RunOptions) -> Result<(PathBuf, Report), CliError> {
    let issues = manifest.validate();
    if !issues.is_empty() {
        return Err(CliError::Validation(issues));
    }
    let dir = manifest.output_path();
    prepare_output(&dir, opts.force)?;
    let resolved = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: manifest.seeds.clone(),
        manifest: manifest.clone(),
    };
    let json = serde_json::to_string_pretty(&resolved).map_err(sdlab::Error::from)?;
    write_file(&dir.join(MANIFEST_FILE), json + "\n")?;

    let outcome = manifest
        .seeds
        .iter()
        .try_for_each(|&seed| run_seed(manifest, seed, &dir))
        .and_then(|()| report::build(&dir));
    match outcome {
        Ok(rep) => Ok((dir, rep)),
        Err(e) => {
            write_file(&dir.join(FAILED_FILE), format!("{e}\n"))?;
            Err(e)
        }
    }
}

struct SeedRun<'a> {
    manifest: &'a Manifest,
    seed: u64,
    root: &'a Path,
    slots: Vec<Slot>,
    data: DataSplits,
    curvature: Option<(CurvatureConfig, CurvatureProblem)>,
}

impl SeedRun<'_> {
    fn slot(&self, label: &str) -> &Slot {
        self.slots
            .iter()
            .find(|s| s.label == label)
            .expect("layout and runner agree on labels")
    }

    fn persist_model(&self, label: &str, rec: &RoundRecord) -> Result<(), CliError> {
        let slot = self.slot(label);
        let dir = self.root.join(&slot.dir);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_checkpoint(&rec.model, &dir.join("model.ckpt"))?;
        write_file(&dir.join("metrics.csv"), metrics_csv(&rec.history))?;
        let at = rec.checkpoint_metrics();
        self.write_record(
            slot,
            RecordFile {
                label: label.into(),
                seed: self.seed,
                kind: slot.kind,
                round: Some(rec.round),
                checkpoint_epoch: Some(rec.checkpoint_epoch),
                epochs_completed: Some(rec.history.len()),
                discrepancy: rec.discrepancy,
                train: Some(at.train),
                heldout: at.heldout,
                test: at.test,
            },
        )?;
        if slot.kind == SlotKind::Model {
            if let Some((cfg, problem)) = &self.curvature {
                let report = analyze(&rec.model, problem, cfg)?;
                let spectrum = Spectrum {
                    nodes: report.spectrum.clone(),
                    probes: cfg.slq_probes,
                    lanczos_steps: report.lanczos_steps,
                };
                let json = serde_json::to_string_pretty(&report).map_err(sdlab::Error::from)?;
                write_file(&dir.join("curvature.json"), json + "\n")?;
                write_file(&dir.join("spectrum.csv"), spectrum.to_csv())?;
                if let Some(grid) = slice_model(&rec.model, problem, cfg)? {
                    write_file(&dir.join("slice.csv"), grid.to_csv())?;
                }
            }
        }
        Ok(())
    }

    fn persist_aggregate(
        &self,
        label: &str,
        predict: impl Fn(&sdlab::diffcore::Tensor) -> sdlab::Result<sdlab::diffcore::Tensor>,
    ) -> Result<(), CliError> {
        let slot = self.slot(label);
        let heldout = score(
            &predict(self.data.heldout.inputs())?,
            self.data.heldout.labels(),
        )?;
        let test = score(&predict(self.data.test.inputs())?, self.data.test.labels())?;
        self.write_record(
            slot,
            RecordFile {
                label: label.into(),
                seed: self.seed,
                kind: slot.kind,
                round: None,
                checkpoint_epoch: None,
                epochs_completed: None,
                discrepancy: None,
                train: None,
                heldout,
                test,
            },
        )
    }

    fn write_record(&self, slot: &Slot, rec: RecordFile) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(&rec).map_err(sdlab::Error::from)?;
        write_file(&self.root.join(&slot.dir).join("record.json"), json + "\n")
    }

    fn persist_partial(&self, label: &str, history: &[EpochMetrics]) -> Result<(), CliError> {
        let dir = self.root.join(&self.slot(label).dir);
        write_file(&dir.join("metrics.csv"), metrics_csv(history))
    }
}

fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,split,accuracy,loss\n");
    for h in history {
        for (name, m) in [("train", h.train), ("heldout", h.heldout), ("test", h.test)] {
            let _ = writeln!(s, "{},{name},{},{}", h.epoch, m.accuracy, m.loss);
        }
    }
    s
}

fn run_seed(manifest: &Manifest, seed: u64, root: &Path) -> Result<(), CliError> {
    let (data, spec) = manifest.prepare(seed)?;
    let curvature = match &manifest.curvature {
        Some(c) => {
            let cfg = CurvatureConfig {
                seed: c.seed.wrapping_add(seed),
                ..c.clone()
            };
            let problem = CurvatureProblem::cross_entropy(
                &spec,
                &data.train,
                "train",
                cfg.subsample,
                cfg.seed,
            )?;
            Some((cfg, problem))
        }
        None => None,
    };
    let cfg = manifest.distill_config(spec, seed);
    let run = SeedRun {
        manifest,
        seed,
        root,
        slots: slots(manifest, seed),
        data,
        curvature,
    };

    let mut persist_error = None;
    let chain = self_distill_with(&cfg, &run.data, |rec| {
        run.persist_model(&round_label(rec.round), rec)
            .map_err(|e| {
                let msg = e.to_string();
                persist_error = Some(e);
                sdlab::Error::Contract(msg)
            })
    });
    let chain = match chain {
        Ok(records) => records,
        Err(failure) => {
            if let Some(e) = persist_error {
                return Err(e);
            }
            let f = &failure.failure;
            run.persist_partial(&round_label(f.round), &f.history)?;
            return Err(CliError::Runtime(format!("seed {seed}: {failure}")));
        }
    };

    if run.manifest.kind == ExperimentKind::Ban {
        run.persist_aggregate("BAN", |x| ban_predict(&chain, x))?;
    }
    if run.manifest.kind == ExperimentKind::EnsembleTeacher {
        run_ensembles(&run, &cfg)?;
    }
    if run.manifest.trains_sam() {
        let mut sam_cfg = cfg.clone();
        sam_cfg.optim.sam = Some(SamConfig {
            rho: run.manifest.sam.rho,
        });
        let rec = train_round(None, &sam_cfg, &run.data).map_err(|f| {
            let _ = run.persist_partial("SAM", &f.history);
            CliError::Runtime(format!("seed {seed}: SAM model: {f}"))
        })?;
        run.persist_model("SAM", &rec)?;
    }
    Ok(())
}

fn run_ensembles(run: &SeedRun<'_>, cfg: &DistillConfig) -> Result<(), CliError> {
    let sizes = ensemble_sizes(run.manifest);
    let largest = sizes.last().copied().unwrap_or(0);
    let members = train_ensemble(cfg, &run.data, largest)
        .map_err(|f| CliError::Runtime(format!("seed {}: ensemble member: {f}", run.seed)))?;
    for (i, m) in members.iter().enumerate() {
        run.persist_model(&format!("M{i}"), m)?;
    }
    for s in sizes {
        let ens = Ensemble::new(members[..s].iter().map(|r| r.model.clone()).collect())?;
        run.persist_aggregate(&format!("E{s}"), |x| ensemble_logits(&ens, x))?;
        let student = distill_from_ensemble(&ens, cfg, &run.data).map_err(|f| {
            let _ = run.persist_partial(&format!("D{s}"), &f.history);
            CliError::Runtime(format!("seed {}: student of ensemble {s}: {f}", run.seed))
        })?;
        run.persist_model(&format!("D{s}"), &student)?;
    }
    Ok(())
}
