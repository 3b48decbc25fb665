//! Deterministic synthetic speaker/utterance corpus, feature normalization
//! and the MAE metric. Each frame is a speaker signature plus a content
//! vector for the transcript token aligned to that frame, plus Gaussian
//! noise, standardized with corpus-level statistics.

use crate::ctc::LabelSeq;
use crate::error::{GradLabError, Result};
use crate::math::{mean_abs_error, per_frame_mae};
use crate::model::{splitmix, FeatureMatrix};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: usize,
    pub signature: Array1<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Utterance {
    pub id: usize,
    pub speaker_id: usize,
    pub transcript: LabelSeq,
    /// Normalized T x d features.
    pub features: FeatureMatrix,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub feature_dim: usize,
    pub alphabet_size: usize,
    /// Inclusive frame-count bounds per utterance.
    pub min_frames: usize,
    pub max_frames: usize,
    pub signature_scale: f64,
    pub content_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_speakers: 8,
            utterances_per_speaker: 6,
            feature_dim: 6,
            alphabet_size: 4,
            min_frames: 4,
            max_frames: 8,
            signature_scale: 1.0,
            content_scale: 0.5,
            noise_scale: 0.1,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(GradLabError::InsufficientCorpus("need at least 2 speakers".into()));
        }
        if self.utterances_per_speaker == 0 || self.feature_dim == 0 || self.alphabet_size == 0 {
            return Err(GradLabError::InvalidConfig("corpus dimensions must be positive".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(GradLabError::InvalidConfig("invalid frame bounds".into()));
        }
        if self.signature_scale < 0.0 || self.content_scale < 0.0 || self.noise_scale < 0.0 {
            return Err(GradLabError::InvalidConfig("scales must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerSpec>,
    pub utterances: Vec<Utterance>,
    /// Corpus-level per-dimension statistics used for normalization.
    pub feature_mean: Array1<f64>,
    pub feature_std: Array1<f64>,
}

impl Corpus {
    pub fn utterances_of(&self, speaker_id: usize) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.speaker_id == speaker_id)
    }

    /// Standardize a raw feature matrix with the stored corpus statistics.
    pub fn normalize_features(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        normalize_with(x, &self.feature_mean, &self.feature_std)
    }
}

fn normalize_with(x: &FeatureMatrix, mean: &Array1<f64>, std: &Array1<f64>) -> Result<FeatureMatrix> {
    if x.ncols() != mean.len() {
        return Err(GradLabError::ShapeMismatch {
            expected: format!("T x {}", mean.len()),
            got: format!("{} x {}", x.nrows(), x.ncols()),
        });
    }
    if let Some(dim) = std.iter().position(|&s| s < 1e-12) {
        return Err(GradLabError::DegenerateStd { dim });
    }
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for j in 0..row.len() {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    Ok(out)
}

/// Deterministic content vector for a token, shared across all speakers.
fn content_vector(token: usize, dim: usize, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 0xc0ffee ^ token as u64));
    Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Token of the transcript aligned to frame t (even spread over frames).
fn aligned_token(transcript: &[usize], t: usize, frames: usize) -> usize {
    transcript[t * transcript.len() / frames]
}

/// Generate a deterministic synthetic corpus. Transcript lengths are at
/// most half the frame count, so every utterance is CTC-feasible even with
/// repeated tokens.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let d = config.feature_dim;
    let mut speakers = Vec::with_capacity(config.num_speakers);
    for s in 0..config.num_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed, 1000 + s as u64));
        let signature = Array1::from_shape_fn(d, |_| {
            rng.sample::<f64, _>(StandardNormal) * config.signature_scale
        });
        speakers.push(SpeakerSpec { speaker_id: s, signature });
    }

    let mut raw = Vec::new();
    let mut id = 0;
    for speaker in &speakers {
        for u in 0..config.utterances_per_speaker {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(
                config.seed,
                ((speaker.speaker_id as u64) << 20) | u as u64,
            ));
            let frames = rng.gen_range(config.min_frames..=config.max_frames);
            let max_len = (frames / 2).max(1);
            let len = rng.gen_range(1..=max_len);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..config.alphabet_size)).collect();
            let mut features = Array2::zeros((frames, d));
            for t in 0..frames {
                let content = content_vector(aligned_token(&tokens, t, frames), d, config.seed);
                for j in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    features[[t, j]] = speaker.signature[j]
                        + config.content_scale * content[j]
                        + config.noise_scale * noise;
                }
            }
            raw.push((id, speaker.speaker_id, LabelSeq::new(tokens), features));
            id += 1;
        }
    }

    // corpus-level standardization
    let total_frames: usize = raw.iter().map(|(_, _, _, f)| f.nrows()).sum();
    let mut mean: Array1<f64> = Array1::zeros(d);
    for (_, _, _, f) in &raw {
        for row in f.rows() {
            for j in 0..d {
                mean[j] += row[j];
            }
        }
    }
    mean.mapv_inplace(|v| v / total_frames as f64);
    let mut var: Array1<f64> = Array1::zeros(d);
    for (_, _, _, f) in &raw {
        for row in f.rows() {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
    }
    var.mapv_inplace(|v| v / total_frames as f64);
    let std = var.mapv(f64::sqrt);

    let utterances = raw
        .into_iter()
        .map(|(id, speaker_id, transcript, features)| {
            normalize_with(&features, &mean, &std).map(|features| Utterance {
                id,
                speaker_id,
                transcript,
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Corpus { config: config.clone(), speakers, utterances, feature_mean: mean, feature_std: std })
}

/// Mean absolute error between two same-shaped feature matrices.
pub fn mae(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(GradLabError::ShapeMismatch {
            expected: format!("{:?}", x.dim()),
            got: format!("{:?}", y.dim()),
        });
    }
    Ok(mean_abs_error(x, y))
}

/// Per-frame MAE vector (mean over feature dims within each frame).
pub fn mae_per_frame(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<Array1<f64>> {
    if x.dim() != y.dim() {
        return Err(GradLabError::ShapeMismatch {
            expected: format!("{:?}", x.dim()),
            got: format!("{:?}", y.dim()),
        });
    }
    Ok(per_frame_mae(x, y))
}

/// MAE between matrices of possibly different lengths: the longer one is
/// truncated to the shorter (used by the wrong-length ablation).
pub fn mae_truncated(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(GradLabError::ShapeMismatch {
            expected: format!("d = {}", x.ncols()),
            got: format!("d = {}", y.ncols()),
        });
    }
    let t = x.nrows().min(y.nrows());
    let xa = x.slice(ndarray::s![..t, ..]).to_owned();
    let ya = y.slice(ndarray::s![..t, ..]).to_owned();
    Ok(mean_abs_error(&xa, &ya))
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: usize,
    speaker_id: usize,
    frames: usize,
    transcript: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: CorpusConfig,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    speakers: Vec<SpeakerSpec>,
    utterances: Vec<ManifestRecord>,
}

/// Write the corpus to a directory: one CSV feature file per utterance
/// (first row "T,d", then T rows of d values) and a JSON manifest.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for u in &corpus.utterances {
        let mut file = std::fs::File::create(dir.join(format!("utt_{:04}.csv", u.id)))?;
        writeln!(file, "{},{}", u.frames(), u.features.ncols())?;
        for row in u.features.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17}")).collect();
            writeln!(file, "{}", line.join(","))?;
        }
    }
    let manifest = Manifest {
        config: corpus.config.clone(),
        feature_mean: corpus.feature_mean.to_vec(),
        feature_std: corpus.feature_std.to_vec(),
        speakers: corpus.speakers.clone(),
        utterances: corpus
            .utterances
            .iter()
            .map(|u| ManifestRecord {
                id: u.id,
                speaker_id: u.speaker_id,
                frames: u.frames(),
                transcript: u.transcript.tokens.clone(),
            })
            .collect(),
    };
    let file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
    Ok(())
}

/// Read a feature file written by [`save_corpus`] (or produced externally).
pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| {
        GradLabError::InvalidConfig(format!("{}: empty feature file", path.display()))
    })??;
    let dims: Vec<usize> = header
        .split(',')
        .map(|v| v.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| GradLabError::InvalidConfig(format!("{}: bad header '{header}'", path.display())))?;
    if dims.len() != 2 {
        return Err(GradLabError::InvalidConfig(format!("{}: header must be 'T,d'", path.display())));
    }
    let (t, d) = (dims[0], dims[1]);
    let mut values = Vec::with_capacity(t * d);
    for line in lines.take(t) {
        for v in line?.split(',') {
            values.push(v.trim().parse::<f64>().map_err(|_| {
                GradLabError::InvalidConfig(format!("{}: bad value '{v}'", path.display()))
            })?);
        }
    }
    Array2::from_shape_vec((t, d), values).map_err(|_| GradLabError::ShapeMismatch {
        expected: format!("{t} x {d}"),
        got: "feature file body".into(),
    })
}

/// Load a corpus directory written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(file))?;
    let utterances = manifest
        .utterances
        .iter()
        .map(|r| {
            let features = load_features(&dir.join(format!("utt_{:04}.csv", r.id)))?;
            Ok(Utterance {
                id: r.id,
                speaker_id: r.speaker_id,
                transcript: LabelSeq::new(r.transcript.clone()),
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: manifest.config,
        speakers: manifest.speakers,
        utterances,
        feature_mean: Array1::from(manifest.feature_mean),
        feature_std: Array1::from(manifest.feature_std),
    })
}
