//! Samples, manifests, feature files and synthetic generators.
//!
//! A dataset directory holds one JSONL manifest per split (`train.jsonl`,
//! `test.jsonl`), one feature file per split and source
//! (`{split}_{source}.qtaf`) and a `dataset.json` index listing the question
//! types, answers and source shapes.
//!
//! The synthetic routing task gives every question type a designated visual
//! source that carries the answer; the other source carries a misleading
//! answer pattern (or noise). Gating by question type is what makes the task
//! easy, which is the behaviour the QTA models are meant to exhibit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json_atomic};
use crate::numerics::{streams, Rng, Tensor};
use crate::par;

pub const SOURCE_A: &str = "resnet-like";
pub const SOURCE_B: &str = "rcnn-like";

pub const FEATURE_MAGIC: &[u8; 4] = b"QTAF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub file: String,
    pub row: usize,
}

/// One VQA record. Fields not listed here survive a load/save cycle in
/// `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub question_type: String,
    pub answer: String,
    pub features: BTreeMap<String, FeatureRef>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Shape of one visual source, `channels × height × width`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub name: String,
    pub shape: [usize; 3],
}

impl SourceInfo {
    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub types: Vec<String>,
    pub answers: Vec<String>,
    pub sources: Vec<SourceInfo>,
}

/// Samples of one split plus the feature matrices they reference, keyed by
/// file name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub features: BTreeMap<String, Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature row of `sample` for `source`.
    pub fn feature(&self, sample: &Sample, source: &str) -> Result<&[f64]> {
        let r = sample
            .features
            .get(source)
            .ok_or_else(|| Error::Data(format!("sample {} has no {source:?} feature", sample.id)))?;
        let m = self
            .features
            .get(&r.file)
            .ok_or_else(|| Error::Data(format!("feature file {:?} not loaded", r.file)))?;
        if r.row >= m.rows() {
            return Err(Error::Index {
                what: "feature row",
                index: r.row,
                len: m.rows(),
            });
        }
        Ok(m.row(r.row))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub meta: DatasetMeta,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Distractor {
    Noise,
    #[default]
    Misleading,
}

/// Parameters of the synthetic routing generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub type_names: Vec<String>,
    pub answers_per_type: usize,
    /// Channels of the first (ResNet-like) source.
    pub dim_a: usize,
    /// Channels of the second (R-CNN-like) source.
    pub dim_b: usize,
    /// Spatial extent `[H, W]` shared by both sources.
    pub spatial: [usize; 2],
    pub samples_per_type: usize,
    pub noise_sigma: f64,
    pub distractor: Distractor,
    /// Fraction of absurd-type questions that reuse the color template.
    pub absurd_overlap: f64,
    pub absurd_type: Option<String>,
    pub color_type: Option<String>,
    pub filler_tokens: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            type_names: ["color", "absurd", "counting", "presence", "scene", "sport"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            answers_per_type: 4,
            dim_a: 32,
            dim_b: 32,
            spatial: [1, 1],
            samples_per_type: 600,
            noise_sigma: 0.1,
            distractor: Distractor::Misleading,
            absurd_overlap: 0.0,
            absurd_type: Some("absurd".into()),
            color_type: Some("color".into()),
            filler_tokens: 2,
            seed: 0,
        }
    }
}

const FILLERS: [&str; 8] = ["is", "the", "this", "in", "image", "there", "of", "shown"];

impl SyntheticConfig {
    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn n_answers(&self) -> usize {
        self.n_types() * self.answers_per_type
    }

    /// Index of the designated source (0 = A, 1 = B) of a type; alternates.
    pub fn designated_source(&self, t: usize) -> usize {
        t % 2
    }

    pub fn answer_name(&self, y: usize) -> String {
        let t = y / self.answers_per_type;
        format!("{}-{}", self.type_names[t], y % self.answers_per_type)
    }

    fn type_index(&self, name: &Option<String>, what: &str) -> Result<Option<usize>> {
        match name {
            None => Ok(None),
            Some(n) => self
                .type_names
                .iter()
                .position(|t| t == n)
                .map(Some)
                .ok_or_else(|| Error::Config(format!("{what} type {n:?} is not among the type names"))),
        }
    }

    pub fn absurd_index(&self) -> Result<Option<usize>> {
        self.type_index(&self.absurd_type, "absurd")
    }

    pub fn color_index(&self) -> Result<Option<usize>> {
        self.type_index(&self.color_type, "color")
    }

    pub fn validate(&self) -> Result<()> {
        crate::fusion::QuestionTypeSet::new(self.type_names.clone())?;
        if self.type_names.iter().any(|t| t.split_whitespace().count() != 1) {
            return Err(Error::Config("type names must be single tokens".into()));
        }
        if self.answers_per_type == 0 || self.samples_per_type == 0 {
            return Err(Error::Config("answers_per_type and samples_per_type must be positive".into()));
        }
        if self.dim_a < self.n_answers() || self.dim_b < self.n_answers() {
            return Err(Error::Config(format!(
                "source dims ({}, {}) must hold one pattern channel per answer ({})",
                self.dim_a,
                self.dim_b,
                self.n_answers()
            )));
        }
        if self.spatial.contains(&0) {
            return Err(Error::Config("spatial extents must be positive".into()));
        }
        if self.distractor == Distractor::Misleading && self.answers_per_type < 2 {
            return Err(Error::Config("misleading mode needs at least 2 answers per type".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.absurd_overlap) {
            return Err(Error::Config("absurd_overlap must lie in [0, 1]".into()));
        }
        let absurd = self.absurd_index()?;
        let color = self.color_index()?;
        if self.absurd_overlap > 0.0 && (absurd.is_none() || color.is_none()) {
            return Err(Error::Config("absurd_overlap > 0 needs both an absurd and a color type".into()));
        }
        if absurd.is_some() && absurd == color {
            return Err(Error::Config("absurd and color types must differ".into()));
        }
        Ok(())
    }

    pub fn sources(&self) -> Vec<SourceInfo> {
        vec![
            SourceInfo {
                name: SOURCE_A.into(),
                shape: [self.dim_a, self.spatial[0], self.spatial[1]],
            },
            SourceInfo {
                name: SOURCE_B.into(),
                shape: [self.dim_b, self.spatial[0], self.spatial[1]],
            },
        ]
    }

    /// Number of training samples per type (the rest are test).
    pub fn train_per_type(&self) -> usize {
        (self.samples_per_type * 4 + 2) / 5
    }
}

/// Unit-norm answer pattern: channel `y` set at every spatial position.
fn write_pattern(out: &mut [f64], y: usize, spatial: usize) {
    let v = 1.0 / (spatial as f64).sqrt();
    out[y * spatial..(y + 1) * spatial].fill(v);
}

struct Generated {
    question: String,
    question_type: usize,
    answer: usize,
    source_a: Vec<f64>,
    source_b: Vec<f64>,
}

fn keyword(type_name: &str) -> String {
    type_name.to_lowercase()
}

fn generate_sample(cfg: &SyntheticConfig, root: &Rng, index: usize, template_of: &[usize]) -> Generated {
    let spt = cfg.samples_per_type;
    let t = index / spt;
    let i = index % spt;
    let a = cfg.answers_per_type;
    let local = i % a;
    let y = t * a + local;
    let mut rng = root.split(streams::DATA, index as u64);

    let fillers: Vec<&str> = (0..cfg.filler_tokens).map(|_| FILLERS[rng.below(FILLERS.len())]).collect();
    let template_type = template_of[index];
    let mut question = format!("what {}", keyword(&cfg.type_names[template_type]));
    for f in &fillers {
        question.push(' ');
        question.push_str(f);
    }
    question.push('?');

    let spatial = cfg.spatial[0] * cfg.spatial[1];
    let dims = [cfg.dim_a * spatial, cfg.dim_b * spatial];
    let designated = cfg.designated_source(t);
    let mut feats = [vec![0.0; dims[0]], vec![0.0; dims[1]]];
    write_pattern(&mut feats[designated], y, spatial);
    let other = 1 - designated;
    if cfg.distractor == Distractor::Misleading {
        let wrong_local = (local + 1 + rng.below(a - 1)) % a;
        write_pattern(&mut feats[other], t * a + wrong_local, spatial);
    }
    for f in feats.iter_mut() {
        for v in f.iter_mut() {
            // stored as f32 on disk; round now so memory and files agree
            *v = ((*v + cfg.noise_sigma * rng.normal()) as f32) as f64;
        }
    }
    let [source_a, source_b] = feats;
    Generated {
        question,
        question_type: t,
        answer: y,
        source_a,
        source_b,
    }
}

/// Routing dataset with the absurd-bias template overlap given by
/// `cfg.absurd_overlap` (zero for the plain routing task).
pub fn gen_routing(cfg: &SyntheticConfig) -> Result<SplitDataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let spt = cfg.samples_per_type;
    let n = cfg.n_types() * spt;

    let mut template_of: Vec<usize> = (0..n).map(|g| g / spt).collect();
    if cfg.absurd_overlap > 0.0 {
        let absurd = cfg.absurd_index()?.expect("validated");
        let color = cfg.color_index()?.expect("validated");
        let k = (cfg.absurd_overlap * spt as f64).round() as usize;
        let chosen = root.split(streams::ABSURD, 0).permutation(spt);
        for &i in &chosen[..k] {
            template_of[absurd * spt + i] = color;
        }
    }

    let generated = par::map_range(n, |g| generate_sample(cfg, &root, g, &template_of));

    let sources = cfg.sources();
    let meta = DatasetMeta {
        types: cfg.type_names.clone(),
        answers: (0..cfg.n_answers()).map(|y| cfg.answer_name(y)).collect(),
        sources: sources.clone(),
    };

    let n_train = cfg.train_per_type();
    let mut train_idx = Vec::with_capacity(n_train * cfg.n_types());
    let mut test_idx = Vec::with_capacity(n - train_idx.capacity());
    for t in 0..cfg.n_types() {
        let perm = root.split(streams::SPLIT, t as u64).permutation(spt);
        train_idx.extend(perm[..n_train].iter().map(|&i| t * spt + i));
        test_idx.extend(perm[n_train..].iter().map(|&i| t * spt + i));
    }

    let build = |split: &str, idx: &[usize]| -> Dataset {
        let mut samples = Vec::with_capacity(idx.len());
        let mut mats: Vec<Vec<f64>> = vec![Vec::new(), Vec::new()];
        for (row, &g) in idx.iter().enumerate() {
            let s = &generated[g];
            mats[0].extend_from_slice(&s.source_a);
            mats[1].extend_from_slice(&s.source_b);
            let t = s.question_type;
            let features = sources
                .iter()
                .map(|src| {
                    (
                        src.name.clone(),
                        FeatureRef {
                            file: feature_file_name(split, &src.name),
                            row,
                        },
                    )
                })
                .collect();
            samples.push(Sample {
                id: format!("{}-{:05}", cfg.type_names[t], g % spt),
                question: s.question.clone(),
                question_type: cfg.type_names[t].clone(),
                answer: cfg.answer_name(s.answer),
                features,
                extra: Default::default(),
            });
        }
        let features = sources
            .iter()
            .zip(mats)
            .map(|(src, m)| {
                (
                    feature_file_name(split, &src.name),
                    Tensor::new(vec![idx.len(), src.dim()], m).unwrap(),
                )
            })
            .collect();
        Dataset { samples, features }
    };

    Ok(SplitDataset {
        meta,
        train: build("train", &train_idx),
        test: build("test", &test_idx),
    })
}

/// Routing dataset in which a fraction `absurd_overlap` of the absurd type's
/// questions reuse the color type's template verbatim. Visual channels are
/// untouched, so lexical overlap is the only collision.
pub fn gen_absurd_bias(cfg: &SyntheticConfig) -> Result<SplitDataset> {
    if !(cfg.absurd_overlap > 0.0 && cfg.absurd_overlap <= 1.0) {
        return Err(Error::Config("absurd-bias generation needs absurd_overlap in (0, 1]".into()));
    }
    if cfg.absurd_type.is_none() || cfg.color_type.is_none() {
        return Err(Error::Config("absurd-bias generation needs absurd and color types".into()));
    }
    gen_routing(cfg)
}

pub fn feature_file_name(split: &str, source: &str) -> String {
    format!("{split}_{source}.qtaf")
}

// ---------------------------------------------------------------- features

/// Serializes an `[n × dim]` matrix: magic, version, n, dim (u32 LE), then
/// `n·dim` f32 LE values row-major.
pub fn encode_features(m: &Tensor) -> Result<Vec<u8>> {
    if m.ndim() != 2 {
        return Err(Error::Format(format!("feature matrix must be 2-D, got {:?}", m.shape())));
    }
    let mut out = Vec::with_capacity(16 + 4 * m.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 {
        return Err(Error::Format("feature file shorter than its header".into()));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature version {version}")));
    }
    let (n, dim) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[16..];
    if payload.len() != n * dim * 4 {
        return Err(Error::Format(format!(
            "header declares {n}×{dim} values but payload holds {} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![n, dim], data)?.ensure_finite("load_features")
}

pub fn save_features(m: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode_features(m)?)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_features(&bytes)
}

// --------------------------------------------------------------- manifests

pub fn save_manifest(samples: &[Sample], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Reads a JSONL manifest; blank lines are skipped, anything else that does
/// not parse is reported with its 1-based line number.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        samples.push(s);
    }
    Ok(samples)
}

// ----------------------------------------------------------- dataset dirs

pub const META_FILE: &str = "dataset.json";

pub fn save_split_dataset(data: &SplitDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (split, ds) in [("train", &data.train), ("test", &data.test)] {
        save_manifest(&ds.samples, &dir.join(format!("{split}.jsonl")))?;
        for (file, m) in &ds.features {
            save_features(m, &dir.join(file))?;
        }
    }
    write_json_atomic(&dir.join(META_FILE), &data.meta)
}

/// Loads one split's manifest and every feature file it references.
pub fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let samples = load_manifest(&dir.join(format!("{split}.jsonl")))?;
    let mut features = BTreeMap::new();
    for s in &samples {
        for r in s.features.values() {
            if !features.contains_key(&r.file) {
                let path: PathBuf = dir.join(&r.file);
                features.insert(r.file.clone(), load_features(&path)?);
            }
        }
    }
    Ok(Dataset { samples, features })
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let text = fs::read_to_string(dir.join(META_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_split_dataset(dir: &Path) -> Result<SplitDataset> {
    Ok(SplitDataset {
        meta: load_meta(dir)?,
        train: load_split(dir, "train")?,
        test: load_split(dir, "test")?,
    })
}
