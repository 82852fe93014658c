//! `[section]` / `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attacks::{AttackConfig, Direction, LinfStep, Mask, Norm, Range};
use crate::audiofeat::{ClassBank, ClassSpec, DatasetSpec, SynthParams, Timbre};
use crate::error::{Error, Result};
use crate::models::{CsnConfig, FusionStage, ModelConfig, ResNetConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub classes: usize,
    pub clips: usize,
    pub eval_fraction: f64,
    pub clip_seconds: f64,
    pub max_labels: usize,
    pub seed: u64,
    pub noise_level: f64,
    pub event_gain: (f64, f64),
    pub event_seconds: (f64, f64),
    pub video_dim: usize,
    pub video_windows: usize,
    pub video_noise: f64,
    /// Explicit per-class bands; `None` uses the default three-region layout.
    pub bands: Option<Vec<Range>>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SynthParams::default();
        Self {
            classes: 10,
            clips: 2000,
            eval_fraction: 0.2,
            clip_seconds: 10.0,
            max_labels: 2,
            seed: 0,
            noise_level: s.noise_level,
            event_gain: s.event_gain,
            event_seconds: s.event_seconds,
            video_dim: 16,
            video_windows: 10,
            video_noise: 1.0,
            bands: None,
        }
    }
}

impl DatasetSection {
    pub fn to_spec(&self, n_mels: usize) -> Result<DatasetSpec> {
        let bank = match &self.bands {
            None => ClassBank::default_for(self.classes, n_mels)?,
            Some(bands) => {
                if bands.len() != self.classes {
                    return Err(Error::config(format!(
                        "{} bands given for {} classes",
                        bands.len(),
                        self.classes
                    )));
                }
                let classes = bands
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let timbre = Timbre::ALL[i % Timbre::ALL.len()];
                        ClassSpec {
                            name: format!("c{i:02}_{}_{}_{}", timbre.name(), r.lo, r.hi),
                            band: (r.lo, r.hi),
                            timbre,
                        }
                    })
                    .collect();
                ClassBank::new(classes, n_mels)?
            }
        };
        Ok(DatasetSpec {
            bank,
            clips: self.clips,
            eval_fraction: self.eval_fraction,
            clip_seconds: self.clip_seconds,
            max_labels: self.max_labels,
            seed: self.seed,
            synth: SynthParams {
                noise_level: self.noise_level,
                event_gain: self.event_gain,
                event_seconds: self.event_seconds,
                ..SynthParams::default()
            },
            video_dim: self.video_dim,
            video_windows: self.video_windows,
            video_noise: self.video_noise,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Csn,
    Resnet,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csn" => Ok(Arch::Csn),
            "resnet" => Ok(Arch::Resnet),
            _ => Err(Error::config(format!("unknown architecture {s:?} (csn or resnet)"))),
        }
    }
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Csn => "csn",
            Arch::Resnet => "resnet",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub arch: Arch,
    pub csn: CsnConfig,
    pub resnet_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::Csn,
            csn: CsnConfig::default(),
            resnet_channels: ResNetConfig::default().channels,
        }
    }
}

impl ModelSection {
    /// The model for a dataset with `classes` classes.
    pub fn to_model_config(&self, classes: usize) -> Result<ModelConfig> {
        let cfg = match self.arch {
            Arch::Csn => ModelConfig::Csn(CsnConfig {
                classes,
                ..self.csn.clone()
            }),
            Arch::Resnet => ModelConfig::Resnet(ResNetConfig {
                n_mels: self.csn.n_mels,
                channels: self.resnet_channels,
                classes,
                ..ResNetConfig::default()
            }),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSection {
    pub norm: Norm,
    pub epsilon: f64,
    pub alpha: f64,
    /// `None` means `⌈ε/α⌉`.
    pub steps: Option<usize>,
    pub freq_mask: Option<Range>,
    pub time_mask: Option<Range>,
    pub seed: u64,
    pub batch: usize,
    pub direction: Direction,
    pub linf_step: LinfStep,
    pub random_start: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            norm: Norm::L2,
            epsilon: 0.3,
            alpha: 0.01,
            steps: None,
            freq_mask: None,
            time_mask: None,
            seed: 0,
            batch: 32,
            direction: Direction::Ascent,
            linf_step: LinfStep::Sign,
            random_start: false,
        }
    }
}

impl AttackSection {
    pub fn to_attack_config(&self) -> Result<AttackConfig> {
        let mut cfg = AttackConfig::new(self.norm, self.epsilon, self.alpha)?;
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        cfg.mask = Mask {
            freq: self.freq_mask,
            time: self.time_mask,
        };
        cfg.seed = self.seed;
        cfg.batch = self.batch;
        cfg.direction = self.direction;
        cfg.linf_step = self.linf_step;
        cfg.random_start = self.random_start;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub workdir: PathBuf,
}

impl ExperimentConfig {
    /// All defaults, rooted at `workdir`.
    pub fn with_workdir(workdir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: default_train(),
            attack: AttackSection::default(),
            workdir: workdir.into(),
        }
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        self.dataset.to_spec(self.model.csn.n_mels)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.to_model_config(self.dataset.classes)
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        self.attack.to_attack_config()
    }

    /// Checks every section without building anything expensive.
    pub fn validate(&self) -> Result<()> {
        self.dataset_spec()?;
        self.model_config()?;
        self.attack_config()?;
        if self.train.batch == 0 || self.train.epochs == 0 || !(self.train.lr > 0.0) {
            return Err(Error::config("train needs epochs >= 1, batch >= 1 and lr > 0"));
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, section) in SECTIONS.iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "[{}]", section.name);
            for key in section.keys {
                let _ = writeln!(s, "{key} = {}", self.get(section.name, key));
            }
        }
        s
    }

    fn get(&self, section: &str, key: &str) -> String {
        let d = &self.dataset;
        let m = &self.model;
        let c = &m.csn;
        let t = &self.train;
        let a = &self.attack;
        let pair = |p: (f64, f64)| format!("{}:{}", p.0, p.1);
        let range = |r: Option<Range>| r.map_or("none".to_string(), |r| r.to_string());
        match (section, key) {
            ("dataset", "classes") => d.classes.to_string(),
            ("dataset", "clips") => d.clips.to_string(),
            ("dataset", "eval_fraction") => d.eval_fraction.to_string(),
            ("dataset", "clip_seconds") => d.clip_seconds.to_string(),
            ("dataset", "max_labels") => d.max_labels.to_string(),
            ("dataset", "seed") => d.seed.to_string(),
            ("dataset", "noise_level") => d.noise_level.to_string(),
            ("dataset", "event_gain") => pair(d.event_gain),
            ("dataset", "event_seconds") => pair(d.event_seconds),
            ("dataset", "video_dim") => d.video_dim.to_string(),
            ("dataset", "video_windows") => d.video_windows.to_string(),
            ("dataset", "video_noise") => d.video_noise.to_string(),
            ("dataset", "bands") => d.bands.as_ref().map_or("default".to_string(), |b| {
                b.iter().map(Range::to_string).collect::<Vec<_>>().join(",")
            }),
            ("model", "arch") => m.arch.as_str().to_string(),
            ("model", "fusion") => c.fusion.as_str().to_string(),
            ("model", "n_mels") => c.n_mels.to_string(),
            ("model", "channels") => join(&c.channels),
            ("model", "convs_per_block") => c.convs_per_block.to_string(),
            ("model", "pools") => c
                .pools
                .iter()
                .map(|(a, b)| format!("{a}x{b}"))
                .collect::<Vec<_>>()
                .join(","),
            ("model", "transformer_blocks") => c.transformer_blocks.to_string(),
            ("model", "heads") => c.heads.to_string(),
            ("model", "d_model") => c.d_model.to_string(),
            ("model", "ff_hidden") => c.ff_hidden.to_string(),
            ("model", "dropout") => c.dropout.to_string(),
            ("model", "video_bins") => c.video_bins.to_string(),
            ("model", "video_width") => c.video_width.to_string(),
            ("model", "late_audio_weight") => c.late_audio_weight.to_string(),
            ("model", "resnet_channels") => m.resnet_channels.to_string(),
            ("train", "epochs") => t.epochs.to_string(),
            ("train", "batch") => t.batch.to_string(),
            ("train", "lr") => t.lr.to_string(),
            ("train", "seed") => t.seed.to_string(),
            ("train", "balance") => t.balance.to_string(),
            ("train", "max_steps") => t.max_steps.map_or("none".to_string(), |s| s.to_string()),
            ("attack", "norm") => a.norm.as_str().to_string(),
            ("attack", "epsilon") => a.epsilon.to_string(),
            ("attack", "alpha") => a.alpha.to_string(),
            ("attack", "steps") => a.steps.map_or("auto".to_string(), |s| s.to_string()),
            ("attack", "freq_mask") => range(a.freq_mask),
            ("attack", "time_mask") => range(a.time_mask),
            ("attack", "seed") => a.seed.to_string(),
            ("attack", "batch") => a.batch.to_string(),
            ("attack", "direction") => match a.direction {
                Direction::Ascent => "ascent".into(),
                Direction::Descent => "descent".into(),
            },
            ("attack", "linf_step") => match a.linf_step {
                LinfStep::Sign => "sign".into(),
                LinfStep::Literal => "literal".into(),
            },
            ("attack", "random_start") => a.random_start.to_string(),
            ("paths", "workdir") => self.workdir.display().to_string(),
            _ => unreachable!("unknown key {section}.{key}"),
        }
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.dataset;
        let m = &mut self.model;
        let t = &mut self.train;
        let a = &mut self.attack;
        match (section, key) {
            ("dataset", "classes") => d.classes = num(v)?,
            ("dataset", "clips") => d.clips = num(v)?,
            ("dataset", "eval_fraction") => d.eval_fraction = unit(v)?,
            ("dataset", "clip_seconds") => d.clip_seconds = positive(v)?,
            ("dataset", "max_labels") => d.max_labels = num(v)?,
            ("dataset", "seed") => d.seed = num(v)?,
            ("dataset", "noise_level") => d.noise_level = non_negative(v)?,
            ("dataset", "event_gain") => d.event_gain = pair(v)?,
            ("dataset", "event_seconds") => d.event_seconds = pair(v)?,
            ("dataset", "video_dim") => d.video_dim = num(v)?,
            ("dataset", "video_windows") => d.video_windows = num(v)?,
            ("dataset", "video_noise") => d.video_noise = non_negative(v)?,
            ("dataset", "bands") => {
                d.bands = if v == "default" {
                    None
                } else {
                    Some(
                        v.split(',')
                            .map(|r| r.trim().parse::<Range>().map_err(|e| e.to_string()))
                            .collect::<std::result::Result<_, _>>()?,
                    )
                }
            }
            ("model", "arch") => m.arch = v.parse().map_err(|e: Error| e.to_string())?,
            ("model", "fusion") => m.csn.fusion = v.parse().map_err(|e: Error| e.to_string())?,
            ("model", "n_mels") => m.csn.n_mels = num(v)?,
            ("model", "channels") => m.csn.channels = list(v)?,
            ("model", "convs_per_block") => m.csn.convs_per_block = num(v)?,
            ("model", "pools") => {
                m.csn.pools = v
                    .split(',')
                    .map(|p| {
                        let (a, b) = p
                            .trim()
                            .split_once('x')
                            .ok_or_else(|| format!("pool {p:?} is not AxB"))?;
                        Ok((num(a)?, num(b)?))
                    })
                    .collect::<std::result::Result<_, String>>()?
            }
            ("model", "transformer_blocks") => m.csn.transformer_blocks = num(v)?,
            ("model", "heads") => m.csn.heads = num(v)?,
            ("model", "d_model") => m.csn.d_model = num(v)?,
            ("model", "ff_hidden") => m.csn.ff_hidden = num(v)?,
            ("model", "dropout") => {
                let p: f64 = float(v)?;
                if !(0.0..1.0).contains(&p) {
                    return Err(format!("dropout {p} must be in [0, 1)"));
                }
                m.csn.dropout = p;
            }
            ("model", "video_bins") => m.csn.video_bins = num(v)?,
            ("model", "video_width") => m.csn.video_width = num(v)?,
            ("model", "late_audio_weight") => m.csn.late_audio_weight = unit(v)?,
            ("model", "resnet_channels") => m.resnet_channels = num(v)?,
            ("train", "epochs") => t.epochs = num(v)?,
            ("train", "batch") => t.batch = num(v)?,
            ("train", "lr") => t.lr = positive(v)?,
            ("train", "seed") => t.seed = num(v)?,
            ("train", "balance") => t.balance = boolean(v)?,
            ("train", "max_steps") => t.max_steps = if v == "none" { None } else { Some(num(v)?) },
            ("attack", "norm") => a.norm = v.parse().map_err(|e: Error| e.to_string())?,
            ("attack", "epsilon") => a.epsilon = positive(v)?,
            ("attack", "alpha") => a.alpha = positive(v)?,
            ("attack", "steps") => a.steps = if v == "auto" { None } else { Some(num(v)?) },
            ("attack", "freq_mask") => a.freq_mask = opt_range(v)?,
            ("attack", "time_mask") => a.time_mask = opt_range(v)?,
            ("attack", "seed") => a.seed = num(v)?,
            ("attack", "batch") => a.batch = num(v)?,
            ("attack", "direction") => {
                a.direction = match v {
                    "ascent" => Direction::Ascent,
                    "descent" => Direction::Descent,
                    _ => return Err(format!("direction {v:?} must be ascent or descent")),
                }
            }
            ("attack", "linf_step") => {
                a.linf_step = match v {
                    "sign" => LinfStep::Sign,
                    "literal" => LinfStep::Literal,
                    _ => return Err(format!("linf_step {v:?} must be sign or literal")),
                }
            }
            ("attack", "random_start") => a.random_start = boolean(v)?,
            ("paths", "workdir") => self.workdir = PathBuf::from(v),
            _ => return Err(format!("unknown key {key:?} in [{section}]")),
        }
        Ok(())
    }
}

fn default_train() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    }
}

struct Section {
    name: &'static str,
    keys: &'static [&'static str],
}

const SECTIONS: &[Section] = &[
    Section {
        name: "dataset",
        keys: &[
            "classes",
            "clips",
            "eval_fraction",
            "clip_seconds",
            "max_labels",
            "seed",
            "noise_level",
            "event_gain",
            "event_seconds",
            "video_dim",
            "video_windows",
            "video_noise",
            "bands",
        ],
    },
    Section {
        name: "model",
        keys: &[
            "arch",
            "fusion",
            "n_mels",
            "channels",
            "convs_per_block",
            "pools",
            "transformer_blocks",
            "heads",
            "d_model",
            "ff_hidden",
            "dropout",
            "video_bins",
            "video_width",
            "late_audio_weight",
            "resnet_channels",
        ],
    },
    Section {
        name: "train",
        keys: &["epochs", "batch", "lr", "seed", "balance", "max_steps"],
    },
    Section {
        name: "attack",
        keys: &[
            "norm",
            "epsilon",
            "alpha",
            "steps",
            "freq_mask",
            "time_mask",
            "seed",
            "batch",
            "direction",
            "linf_step",
            "random_start",
        ],
    },
    Section {
        name: "paths",
        keys: &["workdir"],
    },
];

/// A parsed config plus the `section.key` names that fell back to defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub config: ExperimentConfig,
    pub defaulted: Vec<String>,
}

/// Parses config text. `[paths]` is required; every other section and key
/// is optional and falls back to its default.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_verbose(text).map(|p| p.config)
}

pub fn parse_config_verbose(text: &str) -> Result<Parsed> {
    let mut cfg = ExperimentConfig::with_workdir(".");
    let mut current: Option<&'static Section> = None;
    let mut seen: Vec<(&str, &str)> = Vec::new();
    let mut seen_sections: Vec<&str> = Vec::new();
    let line_err = |line: usize, message: String| Error::ConfigLine { line, message };
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| line_err(n, format!("malformed section header {line:?}")))?
                .trim();
            let sec = SECTIONS
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| line_err(n, format!("unknown section [{name}]")))?;
            if seen_sections.contains(&sec.name) {
                return Err(line_err(n, format!("section [{name}] appears twice")));
            }
            seen_sections.push(sec.name);
            current = Some(sec);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| line_err(n, format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = current.ok_or_else(|| line_err(n, format!("key {key:?} outside any section")))?;
        let key = sec
            .keys
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| line_err(n, format!("unknown key {key:?} in [{}]", sec.name)))?;
        if seen.contains(&(sec.name, key)) {
            return Err(line_err(n, format!("duplicate key {key:?} in [{}]", sec.name)));
        }
        seen.push((sec.name, key));
        cfg.set(sec.name, key, value).map_err(|m| line_err(n, m))?;
    }
    if !seen_sections.contains(&"paths") {
        return Err(line_err(
            text.lines().count() + 1,
            "missing required section [paths]".into(),
        ));
    }
    let defaulted = SECTIONS
        .iter()
        .flat_map(|s| s.keys.iter().map(move |k| (s.name, *k)))
        .filter(|sk| !seen.contains(sk))
        .map(|(s, k)| format!("{s}.{k}"))
        .collect();
    Ok(Parsed {
        config: cfg,
        defaulted,
    })
}

impl Parsed {
    /// `section.key = value` for every defaulted key.
    pub fn default_lines(&self) -> Vec<String> {
        self.defaulted
            .iter()
            .map(|sk| {
                let (s, k) = sk.split_once('.').expect("section.key");
                format!("{sk} = {} (default)", self.config.get(s, k))
            })
            .collect()
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{v:?} is not a non-negative integer"))
}

fn float(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("{v:?} is not a number"))?;
    if !x.is_finite() {
        return Err(format!("{v:?} is not finite"));
    }
    Ok(x)
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    let x = float(v)?;
    if x <= 0.0 {
        return Err(format!("value {x} out of range: must be > 0"));
    }
    Ok(x)
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x = float(v)?;
    if x < 0.0 {
        return Err(format!("value {x} out of range: must be >= 0"));
    }
    Ok(x)
}

fn unit(v: &str) -> std::result::Result<f64, String> {
    let x = float(v)?;
    if !(0.0..=1.0).contains(&x) {
        return Err(format!("value {x} out of range: must be in [0, 1]"));
    }
    Ok(x)
}

fn pair(v: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = v.split_once(':').ok_or_else(|| format!("{v:?} is not lo:hi"))?;
    let (a, b) = (non_negative(a.trim())?, non_negative(b.trim())?);
    if a > b {
        return Err(format!("{v:?} has lo > hi"));
    }
    Ok((a, b))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{v:?} is not a boolean")),
    }
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|x| num(x.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn opt_range(v: &str) -> std::result::Result<Option<Range>, String> {
    if v == "none" {
        Ok(None)
    } else {
        v.parse::<Range>().map(Some).map_err(|e| e.to_string())
    }
}

/// Command-line overrides applied on top of a parsed config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub fusion: Option<FusionStage>,
    pub norm: Option<Norm>,
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub freq_mask: Option<Range>,
    pub time_mask: Option<Range>,
    /// Replaces the dataset, train and attack seeds together.
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(f) = self.fusion {
            cfg.model.csn.fusion = f;
        }
        if let Some(n) = self.norm {
            cfg.attack.norm = n;
        }
        if let Some(e) = self.epsilon {
            cfg.attack.epsilon = e;
        }
        if let Some(a) = self.alpha {
            cfg.attack.alpha = a;
        }
        if let Some(s) = self.steps {
            cfg.attack.steps = Some(s);
        }
        if let Some(m) = self.freq_mask {
            cfg.attack.freq_mask = Some(m);
        }
        if let Some(m) = self.time_mask {
            cfg.attack.time_mask = Some(m);
        }
        if let Some(s) = self.seed {
            cfg.dataset.seed = s;
            cfg.train.seed = s;
            cfg.attack.seed = s;
        }
        cfg.validate()
    }
}
