use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};

use super::commands::{cmd_attack, cmd_eval, cmd_synth, cmd_train, write_resolved_config, Workspace};
use super::config::{Arch, ExperimentConfig};
use crate::attacks::{Norm, Range};
use crate::audiofeat::container::write_atomic;
use crate::error::{Error, Result};
use crate::metrics::{csv_field, EvalReport};
use crate::models::FusionStage;

/// The single axis a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Fusion,
    Frequency,
    Temporal,
    Epsilon,
    Architecture,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fusion" => Ok(Axis::Fusion),
            "freq" | "frequency" => Ok(Axis::Frequency),
            "time" | "temporal" => Ok(Axis::Temporal),
            "eps" | "epsilon" => Ok(Axis::Epsilon),
            "arch" | "architecture" => Ok(Axis::Architecture),
            _ => Err(Error::config(format!(
                "unknown sweep axis {s:?} (fusion, freq, time, eps or arch)"
            ))),
        }
    }
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Fusion => "fusion",
            Axis::Frequency => "freq",
            Axis::Temporal => "time",
            Axis::Epsilon => "eps",
            Axis::Architecture => "arch",
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            Axis::Fusion | Axis::Architecture => "model,attack,map,auc,dprime",
            Axis::Frequency => "freq_mask,epsilon,norm,alpha,map,auc,dprime",
            Axis::Temporal => "temporal_mask,epsilon,norm,alpha,map,auc,dprime",
            Axis::Epsilon => "epsilon,norm,alpha,map,auc,dprime",
        }
    }
}

/// What one sweep cell changes relative to the base config.
#[derive(Debug, Clone, PartialEq)]
pub enum CellDelta {
    Fusion { stage: FusionStage, attacked: bool },
    Arch { arch: Arch, attacked: bool },
    Mask { mask: Option<Range>, epsilon: f64 },
    Epsilon(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub delta: CellDelta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub axis: Axis,
    pub cells: Vec<Cell>,
    /// Emit a leading unattacked row (mask and ε sweeps).
    pub clean_row: bool,
}

fn mask_label(m: Option<Range>) -> String {
    m.map_or("No".into(), |r| format!("{}-{}", r.lo, r.hi))
}

impl SweepPlan {
    pub fn new(axis: Axis, cells: Vec<Cell>, clean_row: bool) -> Result<Self> {
        let mut labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("sweep labels must be unique"));
        }
        for c in &cells {
            let ok = matches!(
                (axis, &c.delta),
                (Axis::Fusion, CellDelta::Fusion { .. })
                    | (Axis::Architecture, CellDelta::Arch { .. })
                    | (Axis::Frequency | Axis::Temporal, CellDelta::Mask { .. })
                    | (Axis::Epsilon, CellDelta::Epsilon(_))
            );
            if !ok {
                return Err(Error::config(format!(
                    "cell {:?} does not belong to a {} sweep",
                    c.label,
                    axis.as_str()
                )));
            }
        }
        Ok(Self { axis, cells, clean_row })
    }

    pub fn empty(axis: Axis) -> Self {
        Self {
            axis,
            cells: vec![],
            clean_row: false,
        }
    }

    /// Every mask crossed with every ε, after one clean row.
    pub fn masks(axis: Axis, masks: &[Option<Range>], eps: &[f64]) -> Result<Self> {
        if !matches!(axis, Axis::Frequency | Axis::Temporal) {
            return Err(Error::config("mask plans need the freq or time axis"));
        }
        let cells = masks
            .iter()
            .flat_map(|&m| {
                eps.iter().map(move |&e| Cell {
                    label: format!("{}@{e}", mask_label(m)),
                    delta: CellDelta::Mask { mask: m, epsilon: e },
                })
            })
            .collect();
        Self::new(axis, cells, true)
    }

    /// Each fusion stage clean and attacked.
    pub fn fusion(stages: &[FusionStage]) -> Result<Self> {
        let cells = stages
            .iter()
            .flat_map(|&stage| {
                [false, true].map(|attacked| Cell {
                    label: format!("{stage}{}", if attacked { "+attack" } else { "" }),
                    delta: CellDelta::Fusion { stage, attacked },
                })
            })
            .collect();
        Self::new(Axis::Fusion, cells, false)
    }

    pub fn architecture(archs: &[Arch]) -> Result<Self> {
        let cells = archs
            .iter()
            .flat_map(|&arch| {
                [false, true].map(|attacked| Cell {
                    label: format!("{}{}", arch.as_str(), if attacked { "+attack" } else { "" }),
                    delta: CellDelta::Arch { arch, attacked },
                })
            })
            .collect();
        Self::new(Axis::Architecture, cells, false)
    }

    pub fn epsilon(eps: &[f64]) -> Result<Self> {
        let cells = eps
            .iter()
            .map(|&e| Cell {
                label: format!("eps{e}"),
                delta: CellDelta::Epsilon(e),
            })
            .collect();
        Self::new(Axis::Epsilon, cells, true)
    }

    /// The layouts used by default for each axis.
    pub fn default_for(axis: Axis, eps: &[f64]) -> Result<Self> {
        let r = |lo, hi| Some(Range { lo, hi });
        match axis {
            Axis::Frequency => Self::masks(axis, &[None, r(0, 20), r(20, 40), r(40, 64)], eps),
            Axis::Temporal => Self::masks(axis, &[r(0, 200), r(200, 400)], eps),
            Axis::Fusion => Self::fusion(&[FusionStage::Early, FusionStage::Mid1, FusionStage::Mid2, FusionStage::Late]),
            Axis::Architecture => Self::architecture(&[Arch::Csn, Arch::Resnet]),
            Axis::Epsilon => Self::epsilon(eps),
        }
    }

    /// Rows the CSV will hold.
    pub fn row_count(&self) -> usize {
        if self.cells.is_empty() {
            0
        } else {
            self.cells.len() + usize::from(self.clean_row)
        }
    }

    /// Config for one cell and whether it is attacked.
    fn apply(&self, base: &ExperimentConfig, cell: &Cell) -> (ExperimentConfig, bool) {
        let mut cfg = base.clone();
        let attacked = match cell.delta {
            CellDelta::Fusion { stage, attacked } => {
                cfg.model.csn.fusion = stage;
                attacked
            }
            CellDelta::Arch { arch, attacked } => {
                cfg.model.arch = arch;
                attacked
            }
            CellDelta::Mask { mask, epsilon } => {
                match self.axis {
                    Axis::Frequency => cfg.attack.freq_mask = mask,
                    _ => cfg.attack.time_mask = mask,
                }
                cfg.attack.epsilon = epsilon;
                true
            }
            CellDelta::Epsilon(e) => {
                cfg.attack.epsilon = e;
                true
            }
        };
        (cfg, attacked)
    }
}

fn norm_label(n: Norm) -> &'static str {
    match n {
        Norm::L1 => "1",
        Norm::L2 => "2",
        Norm::Linf => "inf",
    }
}

fn metrics_cols(r: &EvalReport) -> String {
    format!("{},{},{}", r.aggregate.map, r.aggregate.auc, fmt_dprime(r.aggregate.dprime))
}

fn fmt_dprime(d: f64) -> String {
    if d.is_finite() {
        d.to_string()
    } else if d > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// One finished sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub label: String,
    pub attacked: bool,
    pub report: EvalReport,
    /// Saved perturbation, for attacked cells.
    pub perturbation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub clean: Option<EvalReport>,
    pub cells: Vec<CellResult>,
    pub csv: String,
}

fn model_variant(cfg: &ExperimentConfig) -> String {
    match cfg.model.arch {
        Arch::Csn => format!("csn-{}", cfg.model.csn.fusion),
        Arch::Resnet => "resnet".into(),
    }
}

/// Synthesizes the dataset unless `<workdir>/data` already holds one built
/// from the same settings.
pub fn ensure_dataset(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ws = Workspace::new(&cfg.workdir);
    let spec = cfg.dataset_spec()?;
    let mut want = serde_json::to_string_pretty(&spec)?;
    want.push('\n');
    let have = fs::read_to_string(ws.data_dir().join("dataset.json")).ok();
    if have.as_deref() != Some(want.as_str()) || !ws.manifest().is_file() {
        cmd_synth(cfg, None)?;
    } else {
        info!("reusing dataset in {}", ws.data_dir().display());
    }
    Ok(ws.manifest())
}

/// Trains the model variant of `cfg` unless a checkpoint from identical
/// dataset, model and train settings already exists.
pub fn ensure_checkpoint(cfg: &ExperimentConfig, manifest: &Path) -> Result<PathBuf> {
    let dir = cfg.workdir.join("models").join(model_variant(cfg));
    let ck = dir.join("checkpoint.avck");
    let mut key = cfg.clone();
    key.attack = Default::default();
    let want = key.to_text();
    let have = fs::read_to_string(dir.join("model.ini")).ok();
    if have.as_deref() == Some(want.as_str()) && ck.is_file() {
        info!("reusing checkpoint {}", ck.display());
        return Ok(ck);
    }
    cmd_train(cfg, Some(manifest), Some(&ck))?;
    write_atomic(&dir.join("model.ini"), want.as_bytes())?;
    Ok(ck)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Runs every cell of `plan` in order and writes the table to `out`
/// (default `<workdir>/sweep/<axis>.csv`). Victim models are trained once
/// per variant and shared across cells. If a cell fails, the rows finished
/// so far are still written, the failure goes to `<out>.failures.log`, and
/// the error is returned.
pub fn cmd_sweep(plan: &SweepPlan, base: &ExperimentConfig, out: Option<&Path>) -> Result<SweepOutcome> {
    let out = out.map_or_else(
        || base.workdir.join("sweep").join(format!("{}.csv", plan.axis.as_str())),
        Path::to_path_buf,
    );
    let mut csv = String::from(plan.axis.header());
    csv.push('\n');
    let mut outcome = SweepOutcome {
        clean: None,
        cells: vec![],
        csv: String::new(),
    };
    let result = run_cells(plan, base, &out, &mut csv, &mut outcome);
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_atomic(&out, csv.as_bytes())?;
    outcome.csv = csv;
    if let Err(e) = result {
        let mut log_path = out.clone().into_os_string();
        log_path.push(".failures.log");
        let msg = format!("{e}\n");
        write_atomic(Path::new(&log_path), msg.as_bytes())?;
        warn!("sweep stopped: {e}");
        return Err(e);
    }
    Ok(outcome)
}

fn run_cells(
    plan: &SweepPlan,
    base: &ExperimentConfig,
    out: &Path,
    csv: &mut String,
    outcome: &mut SweepOutcome,
) -> Result<()> {
    if plan.cells.is_empty() {
        return Ok(());
    }
    base.validate()?;
    let manifest = ensure_dataset(base)?;
    let cell_root = out.with_extension("");
    let mut clean_reports: HashMap<String, EvalReport> = HashMap::new();
    let mut clean_for = |cfg: &ExperimentConfig, ck: &Path| -> Result<EvalReport> {
        let variant = model_variant(cfg);
        if let Some(r) = clean_reports.get(&variant) {
            return Ok(r.clone());
        }
        let path = ck.with_file_name("clean.json");
        let r = cmd_eval(cfg, Some(ck), None, Some(&manifest), Some(&path))?;
        clean_reports.insert(variant, r.clone());
        Ok(r)
    };
    if plan.clean_row {
        let ck = ensure_checkpoint(base, &manifest)?;
        let r = clean_for(base, &ck)?;
        let _ = writeln!(
            csv,
            "{}{}",
            match plan.axis {
                Axis::Epsilon => "-,-,-,".to_string(),
                _ => "No,-,-,-,".to_string(),
            },
            metrics_cols(&r)
        );
        outcome.clean = Some(r);
    }
    for cell in &plan.cells {
        let (cfg, attacked) = plan.apply(base, cell);
        cfg.validate()?;
        let ck = ensure_checkpoint(&cfg, &manifest)?;
        let dir = cell_root.join(sanitize(&cell.label));
        let (report, pert) = if attacked {
            let p = dir.join("perturbation.avfb");
            cmd_attack(&cfg, Some(&ck), Some(&manifest), Some(&p))?;
            let r = cmd_eval(&cfg, Some(&ck), Some(&p), Some(&manifest), Some(&dir.join("report.json")))?;
            (r, Some(p))
        } else {
            let r = clean_for(&cfg, &ck)?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            r.save(&dir.join("report.json"))?;
            (r, None)
        };
        write_resolved_config(&dir, &cfg)?;
        let a = &cfg.attack;
        let prefix = match (&cell.delta, plan.axis) {
            (CellDelta::Fusion { stage, attacked }, _) => {
                format!("{},{}", stage, if *attacked { "Yes" } else { "No" })
            }
            (CellDelta::Arch { arch, attacked }, _) => {
                format!("{},{}", arch.as_str(), if *attacked { "Yes" } else { "No" })
            }
            (CellDelta::Mask { mask, epsilon }, _) => format!(
                "{},{epsilon},{},{}",
                csv_field(&mask_label(*mask)),
                norm_label(a.norm),
                a.alpha
            ),
            (CellDelta::Epsilon(e), _) => format!("{e},{},{}", norm_label(a.norm), a.alpha),
        };
        let _ = writeln!(csv, "{prefix},{}", metrics_cols(&report));
        info!("cell {}: mAP {:.4}", cell.label, report.aggregate.map);
        outcome.cells.push(CellResult {
            label: cell.label.clone(),
            attacked,
            report,
            perturbation: pert,
        });
    }
    Ok(())
}
