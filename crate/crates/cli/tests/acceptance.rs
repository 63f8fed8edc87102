//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use sdlab::diffcore::{value, ParameterVector, Quadratic, SegmentSpec, Tensor};
use sdlab::distill::{ban_predict, ensemble_logits, Ensemble, RoundRecord};
use sdlab::models::{Model, ModelSpec};
use sdlab::objectives::{argmax, cross_entropy, kd_kl, kd_loss, one_hot, softmax, KDWeights};
use sdlab::optim::{cosine_lr, sam_step, sgd_step, OptimConfig, OptimState, SamConfig, Schedule};
use sdlab::oracle::{check_curvature_families, check_model_families};
use sdlab_cli::layout::RecordFile;
use sdlab_cli::report::Marker;
use sdlab_cli::{build_report, run, Manifest, RunOptions};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let fams = match check_model_families(20, 7) {
        Ok(f) => f,
        Err(e) => return outcome(false, e.to_string()),
    };
    let worst = fams
        .iter()
        .flat_map(|f| [&f.cross_entropy, &f.distillation])
        .fold(0.0f64, |m, d| {
            m.max(d.max_grad_rel_err).max(d.max_hvp_rel_err)
        });
    let small = fams.iter().all(|f| f.params <= 200);
    let full = fams
        .iter()
        .all(|f| f.cross_entropy.trials == 20 && f.distillation.trials == 20);
    let el = t.elapsed();
    outcome(
        worst < 1e-4 && small && full && within(el, 60),
        format!(
            "{} families, worst gradient/HVP rel err {worst:.2e}, {:.1}s",
            fams.len(),
            el.as_secs_f64()
        ),
    )
}

fn dense_hessian_oracle() -> Outcome {
    let t = Instant::now();
    let checks = match check_curvature_families(100, 3) {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let z = checks.iter().map(|c| c.trace_z_score()).fold(0.0, f64::max);
    let lam = checks.iter().map(|c| c.lambda_rel_err).fold(0.0, f64::max);
    let ritz = checks.iter().map(|c| c.ritz_rel_err).fold(0.0, f64::max);
    let el = t.elapsed();
    outcome(
        z <= 3.0 && lam < 1e-3 && ritz < 1e-8 && within(el, 300),
        format!(
            "max trace z {z:.2}, lambda_max rel err {lam:.1e}, Ritz rel err {ritz:.1e}, {:.1}s",
            el.as_secs_f64()
        ),
    )
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn loss_identities() -> Outcome {
    let t = Instant::now();
    let logits = (2usize..12).prop_flat_map(|k| {
        (
            vec(-30.0f64..30.0, k),
            vec(-30.0f64..30.0, k),
            0usize..k,
            0.1f64..20.0,
            -50.0f64..50.0,
        )
    });
    let result = runner(10_000).run(&logits, |(zs, zt, label, tau, c)| {
        let k = zs.len();
        let kl = kd_kl(&zs, &zt, tau).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(kd_kl(&zs, &zs, tau).unwrap().abs() <= 1e-9);

        let y = one_hot(label, k).unwrap();
        let at = |alpha| kd_loss(&zs, &y, &zt, KDWeights { alpha, tau }).unwrap();
        prop_assert_eq!(at(1.0).to_bits(), cross_entropy(&zs, &y).unwrap().to_bits());
        prop_assert_eq!(at(0.0).to_bits(), kl.to_bits());

        let scaled: Vec<f64> = zs.iter().map(|z| z / tau).collect();
        let a = softmax(&zs, tau).unwrap();
        let b = softmax(&scaled, 1.0).unwrap();
        for (p, q) in a.probs().iter().zip(b.probs()) {
            prop_assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
        }

        let uniform = vec![c; k];
        let ce = cross_entropy(&uniform, &y).unwrap();
        prop_assert!((ce - (k as f64).ln()).abs() <= 1e-12);
        Ok(())
    });
    let el = t.elapsed();
    match result {
        Ok(()) => outcome(
            within(el, 60),
            format!("10000 cases, {:.1}s", el.as_secs_f64()),
        ),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn flat(values: Vec<f64>) -> ParameterVector {
    ParameterVector::from_flat(vec![SegmentSpec::new("theta", vec![values.len()])], values).unwrap()
}

/// `Q diag(λ) Qᵀ` with a Householder reflection `Q`, so the matrix is dense.
fn dense_spd(eigs: &[f64]) -> Quadratic {
    let d = eigs.len();
    let w: Vec<f64> = (1..=d).map(|i| i as f64).collect();
    let ww: f64 = w.iter().map(|x| x * x).sum();
    let q = |i: usize, j: usize| f64::from(u8::from(i == j)) - 2.0 * w[i] * w[j] / ww;
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|l| q(i, l) * eigs[l] * q(j, l)).sum();
        }
    }
    Quadratic::dense(d, a).unwrap()
}

fn optimizer_contracts() -> Outcome {
    let t = Instant::now();
    let mut notes = Vec::new();

    let endpoints =
        cosine_lr(0, 0.025, 0.001, 300) == 0.025 && cosine_lr(300, 0.025, 0.001, 300) == 0.001;
    notes.push(format!(
        "cosine endpoints {}",
        if endpoints { "exact" } else { "WRONG" }
    ));

    let plain = OptimConfig {
        lr0: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
        clip_norm: Some(5.0),
        batch_size: 1,
        schedule: Schedule::Constant,
        sam: None,
    };
    let clip = runner(2_000).run(&(vec(-1e3f64..1e3, 1..40), 1e-3f64..1.0), |(g, lr)| {
        let mut p = flat(vec![0.0; g.len()]);
        let mut st = OptimState::new(&p);
        let info = sgd_step(&mut p, &flat(g), &mut st, &plain, lr).unwrap();
        // The applied update, measured from the parameters themselves.
        let applied = p.norm() / lr;
        prop_assert!(info.grad_norm <= 5.0 + 1e-9);
        prop_assert!(applied <= 5.0 + 1e-9, "applied gradient norm {applied}");
        Ok(())
    });
    notes.push(format!(
        "clip {}",
        if clip.is_ok() { "ok" } else { "FAILED" }
    ));

    let rho = 0.05;
    let sam_cfg = OptimConfig {
        sam: Some(SamConfig { rho }),
        clip_norm: None,
        ..plain.clone()
    };
    let perturb = runner(1_000).run(
        &(vec(0.1f64..10.0, 10), vec(-5.0f64..5.0, 10)),
        |(eigs, start)| {
            prop_assume!(start.iter().any(|x| x.abs() > 1e-6));
            let q = Quadratic::diagonal(&eigs).unwrap();
            let lr = 0.01;
            let mut p = q.point(start.clone()).unwrap();
            let mut st = OptimState::new(&p);
            let (_, info) = sam_step(&mut p, &q, &mut st, &sam_cfg, lr).unwrap();
            prop_assert!((info.perturbation_norm - rho).abs() <= 1e-12 * rho);
            // The update is lr·A(θ + ε); solve for ε coordinate-wise.
            let eps: f64 = (0..10)
                .map(|i| ((start[i] - p.flatten()[i]) / (lr * eigs[i]) - start[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            prop_assert!(
                (eps - rho).abs() <= 1e-9,
                "recovered perturbation norm {eps}"
            );
            Ok(())
        },
    );
    notes.push(format!(
        "SAM perturbation {}",
        if perturb.is_ok() { "= rho" } else { "FAILED" }
    ));

    let eigs: Vec<f64> = (1..=10).map(f64::from).collect();
    let q = dense_spd(&eigs);
    let mut p = q
        .point((0..10).map(|i| 1.0 - 0.2 * i as f64).collect())
        .unwrap();
    let cfg = OptimConfig {
        lr0: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        clip_norm: None,
        batch_size: 1,
        schedule: Schedule::Cosine {
            t_max: Some(500),
            lr_min: 0.0,
        },
        sam: Some(SamConfig { rho }),
    };
    let mut st = OptimState::new(&p);
    let mut reached = None;
    for step in 0..500u64 {
        sam_step(&mut p, &q, &mut st, &cfg, cfg.lr_at(step, 500)).unwrap();
        if reached.is_none() && value(&q, &p).unwrap() < 1e-6 {
            reached = Some(step + 1);
        }
    }
    let final_loss = value(&q, &p).unwrap();
    notes.push(match reached {
        Some(s) => format!("SAM quadratic < 1e-6 at step {s} (final {final_loss:.1e})"),
        None => format!("SAM quadratic final loss {final_loss:.1e}"),
    });

    let el = t.elapsed();
    outcome(
        endpoints && clip.is_ok() && perturb.is_ok() && reached.is_some() && within(el, 60),
        format!("{}, {:.1}s", notes.join(", "), el.as_secs_f64()),
    )
}

const DIRECTIONAL: &str = r#"
kind = "curvature-sweep"
seeds = [0, 1, 2, 3, 4]
output_dir = "directional"

[model]
kind = "mlp"
widths = [32]

[data]
source = "multiview"
classes = 4
views_per_class = 3
feature_dim = 32
noise_std = 1.0
signal = 2.0
single_view_fraction = 0.1
n_train = 4000
n_test = 2000

[distill]
alpha = 0.5
tau = 4.0
rounds = 4
epochs = 50
checkpoint = "last"

[optim]
lr0 = 0.05
weight_decay = 3e-4

[curvature]
trace_probes = 100
power_iters = 20
lanczos_steps = 16
slq_probes = 1
subsample = 512
"#;

fn manifest_in(dir: &Path, text: &str) -> Manifest {
    let mut m = Manifest::parse(text).unwrap();
    m.output_dir = dir.join(&m.output_dir);
    m
}

fn directional(dir: &Path) -> (Outcome, Option<PathBuf>) {
    let t = Instant::now();
    let m = manifest_in(dir, DIRECTIONAL);
    let (out, report) = match run(&m, RunOptions::default()) {
        Ok(r) => r,
        Err(e) => return (outcome(false, e.to_string()), None),
    };
    let get = |seed: u64, label: &str| {
        report
            .rows
            .iter()
            .find(|r| r.seed == seed && r.label == label)
            .expect("every seed has T and S1")
    };
    let (mut acc, mut trace) = (0, 0);
    for &s in &m.seeds {
        let (t0, s1) = (get(s, "T"), get(s, "S1"));
        if s1.record.heldout.accuracy >= t0.record.heldout.accuracy {
            acc += 1;
        }
        let tr = |r: &sdlab_cli::report::SeedRow| r.curvature.as_ref().unwrap().trace_estimate;
        if tr(s1) < tr(t0) {
            trace += 1;
        }
    }
    let el = t.elapsed();
    (
        outcome(
            acc >= 3 && trace >= 4 && within(el, 900),
            format!(
                "student heldout acc >= teacher in {acc}/5 seeds, student trace < teacher in {trace}/5 seeds, {:.0}s",
                el.as_secs_f64()
            ),
        ),
        Some(out),
    )
}

/// Independent of the report code: reads `per_seed.csv` and the table.
fn rounds_and_markers(run_dir: &Path) -> Outcome {
    let mut problems = Vec::new();
    for seed in 0..5u64 {
        for n in 0..4 {
            let dir = run_dir.join(format!("seed-{seed}/round-{n}"));
            let rows = fs::read_to_string(dir.join("metrics.csv"))
                .map(|s| s.lines().count() - 1)
                .unwrap_or(0);
            let rec: Option<RecordFile> = fs::read_to_string(dir.join("record.json"))
                .ok()
                .and_then(|s| serde_json::from_str(&s).ok());
            if rows != 50 * 3 || rec.is_none() {
                problems.push(format!("seed {seed} round {n} incomplete"));
            }
        }
    }

    let per_seed = fs::read_to_string(run_dir.join("per_seed.csv")).unwrap_or_default();
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in per_seed.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        acc.entry(f[1].to_string())
            .or_default()
            .push(f[2].parse().unwrap());
    }
    let mean = |l: &str| acc[l].iter().sum::<f64>() / acc[l].len() as f64;
    let table = fs::read_to_string(run_dir.join("report/accuracy_table.csv")).unwrap_or_default();
    let lines: Vec<&str> = table.lines().collect();
    let header: Vec<&str> = lines
        .first()
        .map(|l| l.split(',').collect())
        .unwrap_or_default();
    let cells: Vec<&str> = lines
        .get(1)
        .map(|l| l.split(',').collect())
        .unwrap_or_default();
    if header != ["experiment", "Teacher", "Round 1", "Round 2", "Round 3"] {
        problems.push(format!("unexpected columns {header:?}"));
    }
    let mut shown = Vec::new();
    for (i, label) in ["S1", "S2", "S3"].iter().enumerate() {
        let (Some(cell), true) = (cells.get(i + 2), acc.contains_key(*label)) else {
            problems.push(format!("{label} missing"));
            continue;
        };
        let diff = mean(label) - mean("T");
        let want = if diff > 0.0 {
            Marker::Up
        } else if diff < 0.0 {
            Marker::Down
        } else {
            Marker::None
        };
        let has_up = cell.ends_with('↑');
        let has_down = cell.ends_with('↓');
        let ok = match want {
            Marker::Up => has_up,
            Marker::Down => has_down,
            Marker::None => !has_up && !has_down,
        };
        if !ok {
            problems.push(format!("{label}: cell {cell:?} but mean diff {diff:+.5}"));
        }
        shown.push(format!("{label} {cell}"));
    }
    if cells
        .get(1)
        .is_some_and(|c| c.ends_with('↑') || c.ends_with('↓'))
    {
        problems.push("teacher cell carries a marker".into());
    }
    let rebuilt = build_report(run_dir)
        .map(|r| r.accuracy_table() == table)
        .unwrap_or(false);
    if !rebuilt {
        problems.push("report rebuild differs".into());
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("4 rounds x 5 seeds recorded; {}", shown.join(", "))
        } else {
            problems.join("; ")
        },
    )
}

fn tiny_models(k: usize, m: usize) -> Vec<Model> {
    let spec = ModelSpec::mlp(5, vec![6], k);
    (0..m)
        .map(|i| Model::init(&spec, 100 + i as u64).unwrap().eval())
        .collect()
}

fn ensemble_algebra() -> Outcome {
    let t = Instant::now();
    let x = Tensor::new(
        vec![7, 5],
        (0..35)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
            .collect(),
    )
    .unwrap();
    let mut worst = 0.0f64;
    for m in 1..=4 {
        let models = tiny_models(3, m);
        let outs: Vec<Tensor> = models.iter().map(|md| md.forward(&x).unwrap()).collect();
        let mut hand = vec![0.0; outs[0].len()];
        for o in &outs {
            for (h, v) in hand.iter_mut().zip(o.data()) {
                *h += v;
            }
        }
        hand.iter_mut().for_each(|h| *h /= m as f64);

        let ens = ensemble_logits(&Ensemble::new(models.clone()).unwrap(), &x).unwrap();
        let records: Vec<RoundRecord> = models
            .into_iter()
            .enumerate()
            .map(|(round, model)| RoundRecord {
                round,
                model,
                history: Vec::new(),
                checkpoint_epoch: 1,
                discrepancy: None,
            })
            .collect();
        let ban = ban_predict(&records, &x).unwrap();
        for got in [ens.data(), ban.data()] {
            for (g, h) in got.iter().zip(&hand) {
                worst = worst.max((g - h).abs());
            }
        }
    }

    let shift = runner(1_000).run(
        &(vec(vec(-10.0f64..10.0, 5), 1..5), -100.0f64..100.0),
        |(members, c)| {
            let k = members[0].len();
            let mean: Vec<f64> = (0..k)
                .map(|j| members.iter().map(|z| z[j]).sum::<f64>() / members.len() as f64)
                .collect();
            let shifted: Vec<f64> = (0..k)
                .map(|j| members.iter().map(|z| z[j] + c).sum::<f64>() / members.len() as f64)
                .collect();
            let gap = {
                let mut s = mean.clone();
                s.sort_by(f64::total_cmp);
                s[k - 1] - s[k - 2]
            };
            // A near-tie can legitimately flip under roundoff of the shift.
            prop_assume!(gap > 1e-9 * (1.0 + c.abs()));
            prop_assert_eq!(argmax(&mean), argmax(&shifted));
            Ok(())
        },
    );
    let el = t.elapsed();
    outcome(
        worst <= 1e-12 && shift.is_ok() && within(el, 60),
        format!(
            "max deviation from hand means {worst:.1e}, shift invariance {} over 1000 cases, {:.1}s",
            if shift.is_ok() { "held" } else { "FAILED" },
            el.as_secs_f64()
        ),
    )
}

/// Covers image augmentation, ensembles, SAM and curvature in one run.
const REPRO: &str = r#"
kind = "ensemble-teacher"
seeds = [3, 4]
output_dir = "repro"

[model]
kind = "small-cnn"
widths = [3]

[data]
source = "csv"
train = "csv/train.csv"
test = "csv/test.csv"
image_shape = [1, 4, 4]

[distill]
epochs = 3

[distill.augmentation]
flip = true
max_shift = 1
cutout = 2

[ensemble]
sizes = [1, 2]

[sam]
baseline = true

[curvature]
trace_probes = 4
power_iters = 5
lanczos_steps = 6
slq_probes = 2
subsample = 60

[curvature.slice]
resolution = 5
"#;

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn reproducibility(dir: &Path) -> Outcome {
    let csv_dir = dir.join("csv");
    fs::create_dir_all(&csv_dir).unwrap();
    let header: Vec<String> = (0..16).map(|j| format!("f{j}")).collect();
    let mut train = format!("label,{}\n", header.join(","));
    let mut test = train.clone();
    for i in 0..150usize {
        let label = i % 3;
        let row: Vec<String> = (0..16)
            .map(|j| format!("{}", ((i * 7 + j * 13 + label * 5) % 17) as f64 / 16.0))
            .collect();
        let line = format!("{label},{}\n", row.join(","));
        if i < 110 {
            train.push_str(&line);
        } else {
            test.push_str(&line);
        }
    }
    fs::write(csv_dir.join("train.csv"), train).unwrap();
    fs::write(csv_dir.join("test.csv"), test).unwrap();
    let manifest = REPRO;
    let path = dir.join("repro.toml");
    fs::write(&path, manifest).unwrap();

    let exe = env!("CARGO_BIN_EXE_sdlab");
    let run_once = || {
        Command::new(exe)
            .arg("run")
            .arg(&path)
            .arg("--force")
            .env("RAYON_NUM_THREADS", "1")
            .env("SDLAB_OUTPUT_ROOT", dir)
            .output()
            .unwrap()
    };
    let first = run_once();
    if !first.status.success() {
        return outcome(false, String::from_utf8_lossy(&first.stderr).into_owned());
    }
    let a = snapshot(&dir.join("repro"));
    let second = run_once();
    if !second.status.success() {
        return outcome(false, String::from_utf8_lossy(&second.stderr).into_owned());
    }
    let b = snapshot(&dir.join("repro"));
    let ckpts = a.keys().filter(|p| p.ends_with("model.ckpt")).count();
    let metrics = a.keys().filter(|p| p.ends_with("metrics.csv")).count();
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    outcome(
        differing.is_empty() && ckpts > 0 && ckpts == metrics,
        if differing.is_empty() {
            format!(
                "{} files identical across two single-threaded runs ({ckpts} checkpoints)",
                a.len()
            )
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let work = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient/HVP oracle", gradient_oracle()),
        (2, "dense-Hessian oracle", dense_hessian_oracle()),
        (3, "loss identities", loss_identities()),
        (4, "optimizer contracts", optimizer_contracts()),
    ];
    let (dir5, run_dir) = directional(work.path());
    results.push((5, "directional self-distillation", dir5));
    let o6 = match &run_dir {
        Some(d) => rounds_and_markers(d),
        None => outcome(false, "no run directory from criterion 5"),
    };
    results.push((6, "non-monotonic rounds and markers", o6));
    results.push((7, "ensemble/BAN algebra", ensemble_algebra()));
    results.push((8, "reproducibility", reproducibility(work.path())));

    let mut failed = 0;
    for (n, name, o) in &results {
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {n} [{name}]: {verdict} ({})", o.detail);
        failed += usize::from(!o.passed);
    }
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
