use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::container::{read_feature_file, write_atomic, write_feature_file};
use super::manifest::{ClipRecord, DatasetManifest, Split};
use super::mel::{FeatureParams, MelExtractor};
use super::synth::{synth_clip, ClassBank, SynthParams};
use super::video::{make_video_surrogate, VideoPrototypes};
use super::{FeatureMatrix, LabelVector, VideoFeatures};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};

/// Everything needed to regenerate a synthetic dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub bank: ClassBank,
    pub clips: usize,
    pub eval_fraction: f64,
    pub clip_seconds: f64,
    pub max_labels: usize,
    pub seed: u64,
    pub synth: SynthParams,
    pub video_dim: usize,
    pub video_windows: usize,
    pub video_noise: f64,
}

impl DatasetSpec {
    pub fn default_with(n_classes: usize, clips: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            bank: ClassBank::default_for(n_classes, 64)?,
            clips,
            eval_fraction: 0.2,
            clip_seconds: 10.0,
            max_labels: 2,
            seed,
            synth: SynthParams::default(),
            video_dim: 16,
            video_windows: 10,
            video_noise: 1.0,
        })
    }

    pub fn eval_count(&self) -> usize {
        (self.clips as f64 * self.eval_fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub features: FeatureMatrix,
    pub video: VideoFeatures,
    pub labels: LabelVector,
    pub split: Split,
    pub seed: u64,
}

/// In-memory dataset: the class bank plus every clip's inputs and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bank: ClassBank,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.bank.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Clip> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.bank.names()
    }

    /// Manifest describing this dataset as laid out by [`Dataset::write`].
    pub fn manifest(&self, root: &Path) -> Result<DatasetManifest> {
        let records = self
            .clips
            .iter()
            .map(|c| ClipRecord {
                id: c.id.clone(),
                features: format!("features/{}.avfb", c.id),
                video: format!("video/{}.avfb", c.id),
                labels: c.labels.active().collect(),
                split: c.split,
                seed: c.seed,
            })
            .collect();
        DatasetManifest::new(root, records)
    }

    /// Writes `manifest.jsonl`, `classes.json` and one feature and one video
    /// file per clip under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest(dir)?;
        for (clip, rec) in self.clips.iter().zip(&manifest.records) {
            write_feature_file(&dir.join(&rec.features), clip.features.tensor())?;
            write_feature_file(&dir.join(&rec.video), clip.video.tensor())?;
        }
        write_atomic(&dir.join("classes.json"), serde_json::to_string_pretty(&self.bank)?.as_bytes())?;
        manifest.write(&dir.join("manifest.jsonl"))?;
        Ok(manifest)
    }

    /// Loads a dataset from a manifest path; `classes.json` must sit next
    /// to it.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        manifest.check_paths()?;
        let classes_path = manifest.root.join("classes.json");
        let text = fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?;
        let bank: ClassBank = serde_json::from_str(&text)?;
        let mut clips = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let features = FeatureMatrix::new(read_feature_file(&manifest.root.join(&r.features))?)?;
            let video = VideoFeatures::new(read_feature_file(&manifest.root.join(&r.video))?)?;
            let labels = LabelVector::from_ids(&r.labels, bank.len())?;
            clips.push(Clip {
                id: r.id.clone(),
                features,
                video,
                labels,
                split: r.split,
                seed: r.seed,
            });
        }
        Ok(Self { bank, clips })
    }
}

fn round_to_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64).expect("f32 rounding keeps values finite")
}

/// Generates every clip of `spec`. Feature and video values are rounded to
/// 32-bit precision so the in-memory dataset equals its on-disk form.
pub fn synthesize_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.clips == 0 {
        return Err(Error::validation("dataset must contain at least one clip"));
    }
    if spec.max_labels == 0 || spec.max_labels > spec.bank.len() {
        return Err(Error::validation(format!(
            "max_labels {} must be in 1..={}",
            spec.max_labels,
            spec.bank.len()
        )));
    }
    if !(0.0..1.0).contains(&spec.eval_fraction) {
        return Err(Error::validation("eval_fraction must be in [0, 1)"));
    }
    let params = FeatureParams {
        sample_rate: spec.synth.sample_rate,
        ..FeatureParams::default()
    };
    let extractor = MelExtractor::new(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = VideoPrototypes::new(spec.bank.len(), spec.video_dim, rng.gen())?;

    let mut order: Vec<usize> = (0..spec.clips).collect();
    order.shuffle(&mut rng);
    let mut is_eval = vec![false; spec.clips];
    for &i in order.iter().take(spec.eval_count()) {
        is_eval[i] = true;
    }

    let class_ids: Vec<usize> = (0..spec.bank.len()).collect();
    let mut clips = Vec::with_capacity(spec.clips);
    for (i, &eval) in is_eval.iter().enumerate() {
        let clip_seed: u64 = rng.gen();
        let k = rng.gen_range(1..=spec.max_labels);
        let mut set: Vec<usize> = class_ids.choose_multiple(&mut rng, k).copied().collect();
        set.sort_unstable();
        let (wave, labels) = synth_clip(
            &set,
            &spec.bank,
            extractor.filterbank(),
            spec.clip_seconds,
            clip_seed,
            &spec.synth,
        )?;
        let features = extractor.log_mel(&wave)?;
        let video = make_video_surrogate(
            &labels,
            &protos,
            spec.video_windows,
            spec.video_noise,
            clip_seed ^ 0x5eed_u64,
        )?;
        clips.push(Clip {
            id: format!("clip{i:05}"),
            features: FeatureMatrix::new(round_to_f32(features.tensor()))?,
            video: VideoFeatures::new(round_to_f32(video.tensor()))?,
            labels,
            split: if eval { Split::Eval } else { Split::Train },
            seed: clip_seed,
        });
    }
    Ok(Dataset {
        bank: spec.bank.clone(),
        clips,
    })
}
