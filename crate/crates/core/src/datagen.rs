//! Synthetic captioning corpus with controllable caption noise.
//!
//! Each record is a scene of one to four objects. Features always describe
//! the true scene; noise operators only corrupt the caption.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
];
pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "heart", "diamond"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const MAX_OBJECTS: usize = 4;
/// One-hot color, shape and size blocks.
pub const FEATURE_DIM: usize = COLORS.len() + SHAPES.len() + SIZES.len();

const SCENE_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
}

impl SceneObject {
    pub fn phrase(&self) -> String {
        format!(
            "a {} {} {}",
            SIZES[self.size], COLORS[self.color], SHAPES[self.shape]
        )
    }
}

/// Objects are kept in canonical (shape, color, size) order, which fixes
/// the caption layout for a given set of objects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn random<R: Rng>(rng: &mut R) -> Scene {
        let n = rng.random_range(1..=MAX_OBJECTS);
        let mut objects: Vec<SceneObject> = (0..n)
            .map(|_| SceneObject {
                color: rng.random_range(0..COLORS.len()),
                shape: rng.random_range(0..SHAPES.len()),
                size: rng.random_range(0..SIZES.len()),
            })
            .collect();
        objects.sort();
        Scene { objects }
    }

    /// Clean caption: object phrases joined by " and ".
    pub fn template(&self) -> String {
        self.objects
            .iter()
            .map(SceneObject::phrase)
            .collect::<Vec<_>>()
            .join(" and ")
    }

    pub fn features<R: Rng>(&self, sigma: f64, rng: &mut R) -> Vec<Vec<f64>> {
        let jitter = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
        self.objects
            .iter()
            .map(|o| {
                let mut v = vec![0.0; FEATURE_DIM];
                v[o.color] = 1.0;
                v[COLORS.len() + o.shape] = 1.0;
                v[COLORS.len() + SHAPES.len() + o.size] = 1.0;
                if sigma > 0.0 {
                    for x in v.iter_mut() {
                        *x += jitter.sample(rng);
                    }
                }
                v
            })
            .collect()
    }

    /// Recovers the scene from feature rows by taking the argmax of each
    /// one-hot block.
    pub fn from_features(rows: &[Vec<f64>]) -> Option<Scene> {
        fn argmax(xs: &[f64]) -> usize {
            let mut best = 0;
            for (i, &x) in xs.iter().enumerate() {
                if x > xs[best] {
                    best = i;
                }
            }
            best
        }
        let mut objects = Vec::with_capacity(rows.len());
        for r in rows {
            if r.len() != FEATURE_DIM {
                return None;
            }
            let (c, rest) = r.split_at(COLORS.len());
            let (s, z) = rest.split_at(SHAPES.len());
            objects.push(SceneObject {
                color: argmax(c),
                shape: argmax(s),
                size: argmax(z),
            });
        }
        objects.sort();
        Some(Scene { objects })
    }
}

/// Every word a template caption can contain.
pub fn caption_words() -> Vec<&'static str> {
    let mut words = vec!["a", "and"];
    words.extend(SIZES);
    words.extend(COLORS);
    words.extend(SHAPES);
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub p_mismatch: f64,
    pub p_delete: f64,
    pub p_shuffle: f64,
    pub p_insert: f64,
    pub sigma_feature: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            p_mismatch: 0.3,
            p_delete: 0.1,
            p_shuffle: 0.1,
            p_insert: 0.1,
            sigma_feature: 0.05,
        }
    }
}

impl NoiseConfig {
    pub fn clean(sigma_feature: f64) -> Self {
        NoiseConfig {
            p_mismatch: 0.0,
            p_delete: 0.0,
            p_shuffle: 0.0,
            p_insert: 0.0,
            sigma_feature,
        }
    }

    pub fn mismatch_only(p: f64, sigma_feature: f64) -> Self {
        NoiseConfig {
            p_mismatch: p,
            ..Self::clean(sigma_feature)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_mismatch", self.p_mismatch),
            ("p_delete", self.p_delete),
            ("p_shuffle", self.p_shuffle),
            ("p_insert", self.p_insert),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.sigma_feature >= 0.0 && self.sigma_feature.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_feature must be finite and non-negative, got {}",
                self.sigma_feature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub features: Vec<Vec<f64>>,
    pub caption: String,
    pub noisy: bool,
    pub noise_ops: Vec<String>,
}

impl CorpusRecord {
    /// The clean caption of the scene the features depict.
    pub fn reference_caption(&self) -> Option<String> {
        Scene::from_features(&self.features).map(|s| s.template())
    }
}

fn record_rng(seed: u64, id: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ id);
    rng.set_stream(stream);
    rng
}

pub fn generate_corpus(n: usize, noise: &NoiseConfig, seed: u64) -> Result<Vec<CorpusRecord>> {
    if n == 0 {
        return Err(Error::Config("record count must be at least 1".into()));
    }
    noise.validate()?;
    let words = caption_words();
    let mut scenes = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = record_rng(seed, i as u64, SCENE_STREAM);
        let scene = Scene::random(&mut rng);
        features.push(scene.features(noise.sigma_feature, &mut rng));
        scenes.push(scene);
    }
    let templates: Vec<String> = scenes.iter().map(Scene::template).collect();

    let mut records = Vec::with_capacity(n);
    for (i, feats) in features.into_iter().enumerate() {
        let mut rng = record_rng(seed, i as u64, NOISE_STREAM);
        let mut caption = templates[i].clone();
        let mut ops = Vec::new();

        if rng.random::<f64>() < noise.p_mismatch {
            if let Some(j) = pick_mismatch(&templates, i, &mut rng) {
                caption = templates[j].clone();
                ops.push("mismatch".to_string());
            }
        }

        let mut tokens: Vec<&str> = caption.split(' ').collect();
        if noise.p_delete > 0.0 {
            let before = tokens.len();
            let kept: Vec<&str> = tokens
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() >= noise.p_delete)
                .collect();
            tokens = if kept.is_empty() {
                vec![tokens[0]]
            } else {
                kept
            };
            if tokens.len() != before {
                ops.push("delete".to_string());
            }
        }
        if rng.random::<f64>() < noise.p_shuffle {
            let before = tokens.clone();
            tokens.shuffle(&mut rng);
            if tokens != before {
                ops.push("shuffle".to_string());
            }
        }
        if rng.random::<f64>() < noise.p_insert {
            let w = words[rng.random_range(0..words.len())];
            let at = rng.random_range(0..=tokens.len());
            tokens.insert(at, w);
            ops.push("insert".to_string());
        }
        caption = tokens.join(" ");

        records.push(CorpusRecord {
            id: format!("r{i:06}"),
            features: feats,
            caption,
            noisy: !ops.is_empty(),
            noise_ops: ops,
        });
    }
    Ok(records)
}

/// Another record whose template differs from record `i`'s.
fn pick_mismatch<R: Rng>(templates: &[String], i: usize, rng: &mut R) -> Option<usize> {
    let n = templates.len();
    if n < 2 {
        return None;
    }
    for _ in 0..64 {
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        if templates[j] != templates[i] {
            return Some(j);
        }
    }
    (0..n).find(|&j| templates[j] != templates[i])
}

fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

/// One JSON object per line; features keep 9 significant digits.
pub fn corpus_to_jsonl(records: &[CorpusRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let rounded = CorpusRecord {
            features: r
                .features
                .iter()
                .map(|row| row.iter().map(|&v| round_sig9(v)).collect())
                .collect(),
            ..r.clone()
        };
        out.push_str(&serde_json::to_string(&rounded)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(records: &[CorpusRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(corpus_to_jsonl(records)?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(line, i + 1)?);
    }
    Ok(records)
}

fn parse_line(line: &str, lineno: usize) -> Result<CorpusRecord> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            line: lineno,
            reason: e.to_string(),
        })?;
    serde_json::from_value(value).map_err(|e| Error::Schema {
        line: lineno,
        reason: e.to_string(),
    })
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&line, i + 1)?);
    }
    Ok(records)
}
