use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::config::ExperimentConfig;
use crate::attacks::{train_universal_perturbation, Perturbation};
use crate::audiofeat::container::write_atomic;
use crate::audiofeat::{synthesize_dataset, Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{compare_reports, evaluate, Comparison, EvalReport, ReportMeta};
use crate::models::{file_hash, load_checkpoint, save_checkpoint, train, Checkpoint, Model, RngState};

/// Default artifact locations under a work directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("train").join("checkpoint.avck")
    }

    pub fn perturbation(&self) -> PathBuf {
        self.root.join("attack").join("perturbation.avfb")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(format!("{name}.json"))
    }

    pub fn comparison(&self) -> PathBuf {
        self.root.join("report").join("comparison.csv")
    }
}

/// Writes the resolved config next to an artifact so the run can be replayed.
pub fn write_resolved_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("config.ini"), cfg.to_text().as_bytes())
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

/// Synthesizes the dataset into `out` (default `<workdir>/data`).
pub fn cmd_synth(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<DatasetManifest> {
    let dir = out.map_or_else(|| Workspace::new(&cfg.workdir).data_dir(), Path::to_path_buf);
    let spec = cfg.dataset_spec()?;
    info!("synthesizing {} clips of {} classes into {}", spec.clips, spec.bank.len(), dir.display());
    let ds = synthesize_dataset(&spec)?;
    let manifest = ds.write(&dir)?;
    let mut spec_json = serde_json::to_string_pretty(&spec)?;
    spec_json.push('\n');
    write_atomic(&dir.join("dataset.json"), spec_json.as_bytes())?;
    write_resolved_config(&dir, cfg)?;
    Ok(manifest)
}

pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    if !manifest.is_file() {
        return Err(Error::validation(format!(
            "manifest {} does not exist (run synth first)",
            manifest.display()
        )));
    }
    Dataset::load(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub losses: Vec<f64>,
}

/// Trains a fresh model on the train split and saves the checkpoint plus
/// `loss.csv` beside it.
pub fn cmd_train(cfg: &ExperimentConfig, manifest: Option<&Path>, out: Option<&Path>) -> Result<TrainArtifacts> {
    let ws = Workspace::new(&cfg.workdir);
    let manifest = manifest.map_or_else(|| ws.manifest(), Path::to_path_buf);
    let out = out.map_or_else(|| ws.checkpoint(), Path::to_path_buf);
    let ds = load_dataset(&manifest)?;
    let model_cfg = cfg.model.to_model_config(ds.n_classes())?;
    let mut model = Model::new(&model_cfg, cfg.train.seed)?;
    let clips = ds.split(Split::Train);
    info!(
        "training {} ({}) on {} clips for {} epochs",
        match model_cfg {
            crate::models::ModelConfig::Csn(_) => "csn",
            crate::models::ModelConfig::Resnet(_) => "resnet",
        },
        model.fusion(),
        clips.len(),
        cfg.train.epochs
    );
    let outcome = train(&mut model, &clips, &cfg.train)?;
    let mut ck = Checkpoint::new(model);
    ck.step = outcome.steps() as u64;
    ck.rng_state = Some(RngState::capture(&outcome.rng));
    ck.adam = Some(outcome.adam);
    let dir = parent(&out);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_checkpoint(&out, &ck)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    write_atomic(&dir.join("loss.csv"), csv.as_bytes())?;
    write_resolved_config(&dir, cfg)?;
    let hash = file_hash(&out)?;
    info!("checkpoint {} ({hash})", out.display());
    Ok(TrainArtifacts {
        checkpoint: out,
        hash,
        losses: outcome.losses,
    })
}

/// Trains a universal perturbation on the train split against a saved model.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    out: Option<&Path>,
) -> Result<Perturbation> {
    let ws = Workspace::new(&cfg.workdir);
    let checkpoint = checkpoint.map_or_else(|| ws.checkpoint(), Path::to_path_buf);
    let manifest = manifest.map_or_else(|| ws.manifest(), Path::to_path_buf);
    let out = out.map_or_else(|| ws.perturbation(), Path::to_path_buf);
    let ck = load_checkpoint(&checkpoint)?;
    let ds = load_dataset(&manifest)?;
    let attack = cfg.attack_config()?;
    let manifest_hash = DatasetManifest::read(&manifest)?.hash()?;
    info!(
        "attack {} eps={} alpha={} steps={} against {}",
        attack.norm,
        attack.epsilon,
        attack.alpha,
        attack.steps,
        checkpoint.display()
    );
    let p = train_universal_perturbation(&ck.model, &ds.split(Split::Train), &attack, &manifest_hash)?;
    let dir = parent(&out);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    p.save(&out)?;
    write_resolved_config(&dir, cfg)?;
    Ok(p)
}

/// Evaluates a saved model on the eval split, optionally under a saved
/// perturbation, and writes the report (default `<workdir>/eval/{clean,attacked}.json`).
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    perturbation: Option<&Path>,
    manifest: Option<&Path>,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let ws = Workspace::new(&cfg.workdir);
    let checkpoint = checkpoint.map_or_else(|| ws.checkpoint(), Path::to_path_buf);
    let manifest = manifest.map_or_else(|| ws.manifest(), Path::to_path_buf);
    let out = out.map_or_else(
        || ws.report(if perturbation.is_some() { "attacked" } else { "clean" }),
        Path::to_path_buf,
    );
    let ck = load_checkpoint(&checkpoint)?;
    let ds = load_dataset(&manifest)?;
    let clips = ds.split(Split::Eval);
    let pert = perturbation.map(Perturbation::load).transpose()?;
    if let (Some(p), Some(c)) = (&pert, clips.first()) {
        if p.delta.shape() != c.features.tensor().shape() {
            return Err(Error::validation(format!(
                "perturbation shape {:?} does not match feature geometry {:?}",
                p.delta.shape(),
                c.features.tensor().shape()
            )));
        }
    }
    let meta = ReportMeta {
        checkpoint: file_hash(&checkpoint)?,
        perturbation: match perturbation {
            Some(p) => file_hash(p)?,
            None => "clean".into(),
        },
        seed: pert.as_ref().map_or(cfg.train.seed, |p| p.config.seed),
    };
    let report = evaluate(&ck.model, &clips, &ds.class_names(), pert.as_ref().map(|p| &p.delta), meta)?;
    info!(
        "mAP {:.4} AUC {:.4} d' {:.4}",
        report.aggregate.map, report.aggregate.auc, report.aggregate.dprime
    );
    let dir = parent(&out);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    report.save(&out)?;
    Ok(report)
}

/// Compares two saved reports and writes the class-wise CSV.
pub fn cmd_report(clean: &Path, attacked: &Path, out: &Path) -> Result<Comparison> {
    let c = compare_reports(&EvalReport::load(clean)?, &EvalReport::load(attacked)?)?;
    let dir = parent(out);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    c.write_csv(out)?;
    Ok(c)
}
