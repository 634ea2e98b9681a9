//! End-to-end orchestration: data → train → prune-channels → lacd →
//! finetune → (baseline) → report, with content-addressed stage artifacts.
//!
//! Every stage has a key hashed from its configuration and its upstream
//! keys; artifact file names carry the first 16 hex digits of that key.
//! `manifest.json` in the output directory records, per stage, the key and
//! the SHA-256 of every file so reuse can verify both.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::baselines::{l1_channel_prune, probe_layer_prune, random_layer_prune, BaselineMethod};
use crate::config::ExperimentConfig;
use crate::data::{generate_dataset, ingest_external, SignalDataset, Split};
use crate::error::{FcosError, Result};
use crate::fusion::{prune_model_channels, PrunePlan};
use crate::lacd::{diagnose_collapse, lacd_stage, probe_profile, CollapseDiagnosis};
use crate::metrics::{
    count_params_flops, emit_report, evaluate, read_curve_csv, write_curve_csv, CurvePoint, PruneReport,
};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, TrainingMeta};
use crate::model::{build_model, hex, ModelGraph};
use crate::train::{fit, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Train,
    PruneChannels,
    Lacd,
    Finetune,
    Baseline,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::Train,
        Stage::PruneChannels,
        Stage::Lacd,
        Stage::Finetune,
        Stage::Baseline,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::PruneChannels => "prune-channels",
            Stage::Lacd => "lacd",
            Stage::Finetune => "finetune",
            Stage::Baseline => "baseline",
            Stage::Report => "report",
        }
    }

    fn seed_salt(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = FcosError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| FcosError::Usage(format!("unknown stage '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    pub files: BTreeMap<String, FileRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| FcosError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| FcosError::Malformed(format!("{}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| FcosError::io(&path, e))
    }

    /// Absolute path of a stage artifact, when recorded.
    pub fn artifact(&self, dir: &Path, stage: Stage, role: &str) -> Option<PathBuf> {
        self.stages
            .get(stage.name())
            .and_then(|r| r.files.get(role))
            .map(|f| dir.join(&f.path))
    }
}

/// Which stages to run and how to treat existing artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Last stage to run (inclusive).
    pub stop: Stage,
    /// Stages before this one must be reused from `out` (a missing
    /// artifact or a key mismatch is an error); it and later stages are
    /// recomputed.
    pub start: Option<Stage>,
    /// Without `start`: reuse any existing artifact whose key matches.
    pub reuse: bool,
    /// Rayon worker threads; 0 keeps the global pool.
    pub workers: usize,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        RunOptions {
            out: out.into(),
            stop: Stage::Report,
            start: None,
            reuse: false,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub out: PathBuf,
    pub manifest: Manifest,
    /// Rows computed in this run; empty when the report stage was reused.
    pub reports: Vec<PruneReport>,
    /// Stages taken from existing artifacts instead of being recomputed.
    pub reused: BTreeSet<Stage>,
}

impl PipelineOutcome {
    pub fn artifact(&self, stage: Stage, role: &str) -> Option<PathBuf> {
        self.manifest.artifact(&self.out, stage, role)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| FcosError::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn key_of(v: serde_json::Value) -> String {
    hex(&Sha256::digest(v.to_string().as_bytes()))
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    if stage == Stage::Train {
        seed
    } else {
        seed ^ (stage.seed_salt() + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
    manifest: Manifest,
    reused: BTreeSet<Stage>,
}

type Roles = BTreeMap<&'static str, PathBuf>;

impl Runner<'_> {
    fn dir(&self) -> &Path {
        &self.opts.out
    }

    /// Ensures the artifacts of `stage` exist for `key`, computing them
    /// with `compute` unless a verified copy can be reused. File names are
    /// templates where `{k}` stands for the short key.
    fn obtain(
        &mut self,
        stage: Stage,
        key: &str,
        roles: &[(&'static str, &str)],
        compute: impl FnOnce(&Roles) -> Result<()>,
    ) -> Result<Roles> {
        let short = &key[..16];
        let paths: Roles = roles
            .iter()
            .map(|&(role, name)| (role, self.dir().join(name.replace("{k}", short))))
            .collect();
        let must = self.opts.start.is_some_and(|s| stage < s);
        if must || (self.opts.reuse && self.opts.start.is_none()) {
            match self.manifest.stages.get(stage.name()) {
                Some(rec) if rec.key == key => {
                    for (role, f) in &rec.files {
                        let path = self.dir().join(&f.path);
                        if !path.exists() {
                            return Err(FcosError::Usage(format!(
                                "{stage} artifact {role} is missing at {}",
                                path.display()
                            )));
                        }
                        let found = file_sha256(&path)?;
                        if found != f.sha256 {
                            return Err(FcosError::HashMismatch {
                                path,
                                expected: f.sha256.clone(),
                                found,
                            });
                        }
                    }
                    info!("{stage}: reusing artifacts {short}");
                    self.reused.insert(stage);
                    let mut out = Roles::new();
                    for &(role, _) in roles {
                        let f = rec.files.get(role).ok_or_else(|| {
                            FcosError::Malformed(format!("manifest lacks {stage} artifact {role}"))
                        })?;
                        out.insert(role, self.dir().join(&f.path));
                    }
                    return Ok(out);
                }
                Some(rec) if must => {
                    return Err(FcosError::HashMismatch {
                        path: self.dir().join(Manifest::FILE),
                        expected: key.to_string(),
                        found: rec.key.clone(),
                    })
                }
                None if must => {
                    return Err(FcosError::Usage(format!(
                        "cannot resume: stage {stage} has no artifacts in {}",
                        self.dir().display()
                    )))
                }
                _ => {}
            }
        }
        info!("{stage}: computing {short}");
        compute(&paths)?;
        let mut files = BTreeMap::new();
        for (role, path) in &paths {
            files.insert(
                role.to_string(),
                FileRecord {
                    path: path
                        .file_name()
                        .expect("artifact has a file name")
                        .to_string_lossy()
                        .into_owned(),
                    sha256: file_sha256(path)?,
                },
            );
        }
        self.manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                key: key.to_string(),
                files,
            },
        );
        self.manifest.save(self.dir())?;
        Ok(paths)
    }

    fn train_cfg(&self, epochs: usize, stage: Stage) -> TrainConfig {
        TrainConfig {
            epochs,
            seed: stage_seed(self.cfg.train.seed, stage),
            ..self.cfg.train
        }
    }
}

fn meta(stage: &str, epochs: usize, seed: u64, ds: &SignalDataset) -> TrainingMeta {
    TrainingMeta {
        stage: stage.to_string(),
        epochs_run: epochs,
        seed,
        dataset_fingerprint: ds.fingerprint(),
    }
}

/// Trains and saves; on a numeric failure the last finite weights are
/// written to `aborted` before the error is returned.
fn train_and_save(
    model: &mut ModelGraph<f32>,
    ds: &SignalDataset,
    tc: &TrainConfig,
    stage: &str,
    ckpt: &Path,
    curve: &Path,
    aborted: &Path,
) -> Result<Vec<CurvePoint>> {
    match fit(model, ds, tc, stage) {
        Ok(out) => {
            save_checkpoint(model, &meta(stage, out.epochs_run, tc.seed, ds), ckpt)?;
            write_curve_csv(&out.curve, curve)?;
            Ok(out.curve)
        }
        Err(e @ FcosError::NumericFailure { .. }) => {
            warn!("{stage}: {e}; saving last finite weights to {}", aborted.display());
            save_checkpoint(model, &meta(&format!("{stage}-aborted"), 0, tc.seed, ds), aborted)?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// Runs the configured stages up to `opts.stop`.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if opts.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| FcosError::Usage(format!("cannot start {} workers: {e}", opts.workers)))?;
        pool.install(|| run_inner(cfg, opts))
    } else {
        run_inner(cfg, opts)
    }
}

fn run_inner(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PipelineOutcome> {
    let dir = opts.out.clone();
    fs::create_dir_all(&dir).map_err(|e| FcosError::io(&dir, e))?;
    let mut r = Runner {
        cfg,
        opts,
        manifest: Manifest::load(&dir)?,
        reused: BTreeSet::new(),
    };

    // data
    let data_key = match &cfg.dataset.ingest {
        Some(p) => key_of(json!({"stage": "gen-data", "ingest": file_sha256(p)?})),
        None => key_of(json!({"stage": "gen-data", "dataset": cfg.dataset.gen()})),
    };
    let data = r.obtain(Stage::GenData, &data_key, &[("dataset", "dataset-{k}.fcos")], |p| {
        let ds = match &cfg.dataset.ingest {
            Some(path) => ingest_external(path)?,
            None => generate_dataset(&cfg.dataset.gen())?,
        };
        ds.export(&p["dataset"])
    })?;
    let ds = ingest_external(&data["dataset"])?;
    let resolved = cfg.resolved(ds.classes(), ds.length());
    let snap = dir.join("config.resolved.toml");
    fs::write(&snap, resolved.to_toml()).map_err(|e| FcosError::io(&snap, e))?;
    let mut outcome_reports = Vec::new();
    let finish = |r: Runner, reports| {
        Ok(PipelineOutcome {
            out: dir.clone(),
            manifest: r.manifest,
            reports,
            reused: r.reused,
        })
    };
    if opts.stop == Stage::GenData {
        return finish(r, outcome_reports);
    }

    // train
    let arch = cfg.arch(ds.classes(), ds.length());
    let train_key = key_of(json!({"up": data_key, "arch": arch, "train": cfg.train}));
    let tc = r.train_cfg(cfg.train.epochs, Stage::Train);
    let aborted = dir.join(format!("aborted-train-{}.fcos", &train_key[..16]));
    let trained = r.obtain(
        Stage::Train,
        &train_key,
        &[("model", "model-train-{k}.fcos"), ("curve", "curve-train-{k}.csv")],
        |p| {
            let mut model = build_model(&arch)?;
            train_and_save(&mut model, &ds, &tc, "train", &p["model"], &p["curve"], &aborted)?;
            Ok(())
        },
    )?;
    if opts.stop == Stage::Train {
        return finish(r, outcome_reports);
    }

    // stage 1
    let fusion = cfg.fusion();
    let prune_key = key_of(json!({"up": train_key, "fusion": fusion}));
    let stage1 = r.obtain(
        Stage::PruneChannels,
        &prune_key,
        &[("model", "model-stage1-{k}.fcos"), ("plan", "plan-{k}.fcos")],
        |p| {
            let (model, m) = load_checkpoint(&trained["model"])?;
            let (pruned, plan) = prune_model_channels(&model, &fusion)?;
            save_checkpoint(&pruned, &TrainingMeta { stage: "stage1".into(), ..m }, &p["model"])?;
            plan.save(&p["plan"])
        },
    )?;
    if opts.stop == Stage::PruneChannels {
        return finish(r, outcome_reports);
    }

    // lacd
    let lc = cfg.lacd();
    let lacd_key = key_of(json!({
        "up": prune_key,
        "enabled": cfg.fcos.lacd,
        "beta": lc.beta,
        "warm": lc.warm_epochs,
        "probe": lc.probe,
    }));
    let wc = r.train_cfg(lc.warm_epochs, Stage::Lacd);
    let lacd = r.obtain(
        Stage::Lacd,
        &lacd_key,
        &[
            ("model", "model-lacd-{k}.fcos"),
            ("probe", "probe-{k}.csv"),
            ("diagnosis", "lacd-{k}.json"),
            ("curve", "curve-lacd-{k}.csv"),
        ],
        |p| {
            let (model, _) = load_checkpoint(&stage1["model"])?;
            let (out, profile, diagnosis, removed, curve) = if cfg.fcos.lacd {
                let s = lacd_stage(&model, &ds, &lc, &wc)?;
                (s.model, s.profile, s.diagnosis, s.removed, s.curve)
            } else {
                let mut warm = model.clone();
                let o = fit(&mut warm, &ds, &wc, "lacd-warm")?;
                let profile = probe_profile(&warm, &ds, &lc.probe, wc.seed)?;
                let d = diagnose_collapse(&profile, lc.beta)?;
                (warm, profile, d, BTreeSet::new(), o.curve)
            };
            save_checkpoint(&out, &meta("lacd", lc.warm_epochs, wc.seed, &ds), &p["model"])?;
            profile.write_csv(Some(&diagnosis), &p["probe"])?;
            let record = LacdRecord {
                diagnosis,
                removed,
            };
            let text = serde_json::to_string_pretty(&record).expect("record serializes");
            fs::write(&p["diagnosis"], text).map_err(|e| FcosError::io(&p["diagnosis"], e))?;
            write_curve_csv(&curve, &p["curve"])
        },
    )?;
    if opts.stop == Stage::Lacd {
        return finish(r, outcome_reports);
    }

    // final fine-tune
    let final_key = key_of(json!({"up": lacd_key, "final": lc.final_epochs}));
    let fc = r.train_cfg(lc.final_epochs, Stage::Finetune);
    let aborted = dir.join(format!("aborted-final-{}.fcos", &final_key[..16]));
    let fin = r.obtain(
        Stage::Finetune,
        &final_key,
        &[("model", "model-final-{k}.fcos"), ("curve", "curve-final-{k}.csv")],
        |p| {
            let (mut model, _) = load_checkpoint(&lacd["model"])?;
            train_and_save(&mut model, &ds, &fc, "final", &p["model"], &p["curve"], &aborted)?;
            Ok(())
        },
    )?;
    if opts.stop == Stage::Finetune {
        return finish(r, outcome_reports);
    }

    // baseline
    let mut baseline_art: Option<(Roles, BaselineMethod)> = None;
    let mut baseline_key = String::new();
    if let Some(b) = cfg.baseline {
        baseline_key = key_of(json!({"up": train_key, "baseline": b, "final": lc.final_epochs, "probe": lc.probe}));
        let bc = r.train_cfg(lc.final_epochs, Stage::Baseline);
        let aborted = dir.join(format!("aborted-baseline-{}.fcos", &baseline_key[..16]));
        let art = r.obtain(
            Stage::Baseline,
            &baseline_key,
            &[("model", "model-baseline-{k}.fcos"), ("curve", "curve-baseline-{k}.csv")],
            |p| {
                let (model, _) = load_checkpoint(&trained["model"])?;
                let mut pruned = match b.method {
                    BaselineMethod::L1Channel => l1_channel_prune(&model, b.keep_ratio.expect("validated"))?,
                    BaselineMethod::RandomLayer => random_layer_prune(&model, b.count.expect("validated"), b.seed)?,
                    BaselineMethod::ProbeLayer => {
                        probe_layer_prune(&model, &ds, b.count.expect("validated"), &lc.probe, b.seed)?.0
                    }
                };
                train_and_save(&mut pruned, &ds, &bc, "baseline", &p["model"], &p["curve"], &aborted)?;
                Ok(())
            },
        )?;
        baseline_art = Some((art, b.method));
    } else if opts.stop == Stage::Baseline {
        return Err(FcosError::Config("no [baseline] section in the config".into()));
    }
    if opts.stop == Stage::Baseline {
        return finish(r, outcome_reports);
    }

    // report
    let report_key = key_of(json!({"up": final_key, "baseline": baseline_key}));
    let mut reports = Vec::new();
    r.obtain(
        Stage::Report,
        &report_key,
        &[
            ("report", "report-{k}.csv"),
            ("markdown", "report-{k}.md"),
            ("per-snr", "report-{k}_per_snr.csv"),
            ("curves", "curves-{k}.csv"),
        ],
        |p| {
            let len = ds.length();
            let (orig, _) = load_checkpoint(&trained["model"])?;
            let (p0, f0) = count_params_flops(&orig, len)?;
            let acc0 = evaluate(&orig, &ds, Split::Test)?.accuracy;
            let row = |model: &ModelGraph<f32>, method: &str, kind: &str, stage: &str| -> Result<PruneReport> {
                let e = evaluate(model, &ds, Split::Test)?;
                let (p1, f1) = count_params_flops(model, len)?;
                Ok(PruneReport {
                    method: method.into(),
                    pruning_type: kind.into(),
                    stage: stage.into(),
                    original_params: p0,
                    pruned_params: p1,
                    original_flops: f0,
                    pruned_flops: f1,
                    original_acc: acc0,
                    acc: e.accuracy,
                    per_snr: e.per_snr,
                })
            };
            let mut list = vec![
                row(&load_checkpoint(&stage1["model"])?.0, "FCOS stage 1", "Channel", "stage1")?,
                row(&load_checkpoint(&fin["model"])?.0, "FCOS", "Channel+Layer", "final")?,
            ];
            let mut curves = read_curve_csv(&trained["curve"])?;
            curves.extend(read_curve_csv(&lacd["curve"])?);
            curves.extend(read_curve_csv(&fin["curve"])?);
            if let Some((art, method)) = &baseline_art {
                let (m, _) = load_checkpoint(&art["model"])?;
                list.push(row(&m, method.label(), method.pruning_type(), "baseline")?);
                curves.extend(read_curve_csv(&art["curve"])?);
            }
            let stem = format!("report-{}", &report_key[..16]);
            let files = emit_report(&list, &dir, &stem)?;
            debug_assert_eq!(files.csv, p["report"]);
            write_curve_csv(&curves, &p["curves"])?;
            reports = list;
            Ok(())
        },
    )?;
    outcome_reports = reports;
    finish(r, outcome_reports)
}

/// Stored next to the LaCD checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LacdRecord {
    pub diagnosis: CollapseDiagnosis,
    pub removed: BTreeSet<usize>,
}

/// Loads a stage-1 prune plan written by the pipeline.
pub fn load_plan(path: &Path) -> Result<PrunePlan> {
    PrunePlan::load(path)
}
