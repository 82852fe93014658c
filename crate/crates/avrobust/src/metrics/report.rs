use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ranking::{average_precision, d_prime, roc_auc};
use crate::attacks::apply_perturbation;
use crate::audiofeat::container::write_atomic;
use crate::audiofeat::Clip;
use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::models::Model;

/// Per-clip class scores alongside the ground truth, both `B × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Tensor,
    targets: Tensor,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor, targets: Tensor) -> Result<Self> {
        if scores.ndim() != 2 || scores.shape() != targets.shape() {
            return Err(Error::dim(format!(
                "scores {:?} and targets {:?} must be equal B×C matrices",
                scores.shape(),
                targets.shape()
            )));
        }
        if scores.data().iter().any(|s| !s.is_finite()) {
            return Err(Error::validation("scores must be finite"));
        }
        if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::validation("targets must be 0 or 1"));
        }
        Ok(Self { scores, targets })
    }

    pub fn samples(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    /// Scores and binary targets for class `c`.
    pub fn column(&self, c: usize) -> (Vec<f64>, Vec<bool>) {
        (0..self.samples())
            .map(|b| (self.scores.get2(b, c), self.targets.get2(b, c) == 1.0))
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Checkpoint file hash.
    pub checkpoint: String,
    /// Perturbation file hash, or `"clean"`.
    pub perturbation: String,
    pub seed: u64,
}

impl ReportMeta {
    pub fn clean(checkpoint: impl Into<String>, seed: u64) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            perturbation: "clean".into(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub map: f64,
    pub auc: f64,
    /// `±∞` when the mean AUC saturates; stored as the strings `"inf"` and `"-inf"`.
    #[serde(with = "extended_f64")]
    pub dprime: f64,
}

/// Metrics for one class; `None` marks a value that is undefined because a
/// label value never occurs in the evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub id: usize,
    pub name: String,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub aggregate: Aggregate,
    pub classes: Vec<ClassMetrics>,
}

impl EvalReport {
    /// Aggregates average only the classes with both positives and
    /// negatives; d′ is taken from the mean AUC.
    pub fn from_scores(scores: &ScoreMatrix, names: &[String], meta: ReportMeta) -> Result<Self> {
        if names.len() != scores.classes() {
            return Err(Error::validation(format!(
                "{} class names for {} score columns",
                names.len(),
                scores.classes()
            )));
        }
        let classes: Vec<ClassMetrics> = names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let (s, t) = scores.column(c);
                ClassMetrics {
                    id: c,
                    name: name.clone(),
                    ap: average_precision(&s, &t),
                    auc: roc_auc(&s, &t),
                }
            })
            .collect();
        let defined: Vec<&ClassMetrics> = classes.iter().filter(|c| c.auc.is_some()).collect();
        if defined.is_empty() {
            return Err(Error::validation(
                "no class has both positive and negative clips in the evaluation split",
            ));
        }
        let n = defined.len() as f64;
        let map = defined.iter().map(|c| c.ap.unwrap_or(0.0)).sum::<f64>() / n;
        let auc = defined.iter().map(|c| c.auc.unwrap_or(0.0)).sum::<f64>() / n;
        Ok(Self {
            meta,
            aggregate: Aggregate {
                map,
                auc,
                dprime: d_prime(auc),
            },
            classes,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

mod extended_f64 {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(D::Error::custom(format!("invalid number {t:?}"))),
            },
        }
    }
}

/// Runs `model` over `clips` in order, adding `delta` to every feature
/// matrix when given.
pub fn score_clips(model: &Model, clips: &[&Clip], delta: Option<&Tensor>) -> Result<ScoreMatrix> {
    if clips.is_empty() {
        return Err(Error::validation("cannot evaluate an empty split"));
    }
    let c = model.classes();
    let mut scores = Vec::with_capacity(clips.len() * c);
    let mut targets = Vec::with_capacity(clips.len() * c);
    for clip in clips {
        let x = match delta {
            Some(d) => apply_perturbation(&clip.features, d)?.into_tensor(),
            None => clip.features.tensor().clone(),
        };
        scores.extend(model.predict(&x, Some(clip.video.tensor()))?);
        if clip.labels.len() != c {
            return Err(Error::validation(format!(
                "clip {} has {} labels, model predicts {c}",
                clip.id,
                clip.labels.len()
            )));
        }
        targets.extend(clip.labels.bits().iter().map(|&b| b as f64));
    }
    ScoreMatrix::new(
        Tensor::new(&[clips.len(), c], scores)?,
        Tensor::new(&[clips.len(), c], targets)?,
    )
}

pub fn evaluate(
    model: &Model,
    clips: &[&Clip],
    names: &[String],
    delta: Option<&Tensor>,
    meta: ReportMeta,
) -> Result<EvalReport> {
    let scores = score_clips(model, clips, delta)?;
    EvalReport::from_scores(&scores, names, meta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub class_id: usize,
    pub class_name: String,
    pub ap_clean: f64,
    pub ap_attacked: f64,
    pub abs_drop: f64,
    /// `abs_drop / ap_clean`.
    pub rel_drop: f64,
}

/// Class-wise clean against attacked AP, largest absolute drop first.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_HEADER: &str = "class_id,class_name,ap_clean,ap_attacked,abs_drop,rel_drop";

pub fn compare_reports(clean: &EvalReport, attacked: &EvalReport) -> Result<Comparison> {
    if clean.meta.checkpoint != attacked.meta.checkpoint {
        return Err(Error::validation(format!(
            "reports come from different checkpoints ({} vs {})",
            clean.meta.checkpoint, attacked.meta.checkpoint
        )));
    }
    let same_classes = clean.classes.len() == attacked.classes.len()
        && clean
            .classes
            .iter()
            .zip(&attacked.classes)
            .all(|(a, b)| a.id == b.id && a.name == b.name);
    if !same_classes {
        return Err(Error::validation("reports cover different class sets"));
    }
    let mut rows: Vec<ComparisonRow> = clean
        .classes
        .iter()
        .zip(&attacked.classes)
        .filter_map(|(c, a)| {
            let (pc, pa) = (c.ap?, a.ap?);
            let abs_drop = pc - pa;
            Some(ComparisonRow {
                class_id: c.id,
                class_name: c.name.clone(),
                ap_clean: pc,
                ap_attacked: pa,
                abs_drop,
                rel_drop: if pc > 0.0 { abs_drop / pc } else { 0.0 },
            })
        })
        .collect();
    rows.sort_by(|a, b| b.abs_drop.total_cmp(&a.abs_drop).then(a.class_id.cmp(&b.class_id)));
    Ok(Comparison { rows })
}

/// Highest-AP classes before and after the attack.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub clean: Vec<(String, f64)>,
    pub attacked: Vec<(String, f64)>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(COMPARISON_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.class_id,
                csv_field(&r.class_name),
                r.ap_clean,
                r.ap_attacked,
                r.abs_drop,
                r.rel_drop
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn top_k(&self, k: usize) -> TopK {
        let pick = |key: fn(&ComparisonRow) -> f64| {
            let mut v: Vec<&ComparisonRow> = self.rows.iter().collect();
            v.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.class_id.cmp(&b.class_id)));
            v.into_iter().take(k).map(|r| (r.class_name.clone(), key(r))).collect()
        };
        TopK {
            clean: pick(|r| r.ap_clean),
            attacked: pick(|r| r.ap_attacked),
        }
    }
}

impl TopK {
    /// Two-column text table: clean ranking beside attacked ranking.
    pub fn render(&self) -> String {
        let mut s = String::from("rank  clean                          attacked\n");
        for i in 0..self.clean.len().max(self.attacked.len()) {
            let cell = |v: &[(String, f64)]| {
                v.get(i)
                    .map(|(n, ap)| format!("{n} ({ap:.3})"))
                    .unwrap_or_default()
            };
            let _ = writeln!(s, "{:<5} {:<30} {}", i + 1, cell(&self.clean), cell(&self.attacked));
        }
        s
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
