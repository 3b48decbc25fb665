//! Inference phase: a desk-scale speaker-embedding encoder trained with
//! triplet loss, enrollment from public utterances, and ranking of query
//! features against the enrolled population.
//!
//! The encoder is a per-frame feed-forward stack; frame encodings are
//! averaged and L2-normalized to produce the utterance embedding. Cosine
//! similarity is used both in the training loss and for ranking.

use crate::corpus::Corpus;
use crate::error::{GradLabError, Result};
use crate::model::{splitmix, FeatureMatrix};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(GradLabError::InvalidConfig("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-frame encoder: relu hidden layers, linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    /// (weights out x in, bias) per layer.
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Encoder {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut input = config.input_dim;
        for &out in config.hidden.iter().chain(std::iter::once(&config.embed_dim)) {
            let scale = 1.0 / (input as f64).sqrt();
            let w = Array2::from_shape_fn((out, input), |_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            });
            layers.push((w, Array1::zeros(out)));
            input = out;
        }
        Ok(Self { config: config.clone(), layers })
    }
}

/// L2-normalized utterance embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Array1<f64>);

impl Embedding {
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0.dot(&other.0)
    }
}

struct EmbedCache {
    /// Per-layer input activations (T x width), layer-major.
    inputs: Vec<Array2<f64>>,
    /// Per-layer pre-activations.
    pres: Vec<Array2<f64>>,
    /// Mean-pooled, pre-normalization vector.
    pooled: Array1<f64>,
    norm: f64,
    embedding: Array1<f64>,
}

fn embed_cached(encoder: &Encoder, x: &FeatureMatrix) -> Result<EmbedCache> {
    if x.ncols() != encoder.config.input_dim {
        return Err(GradLabError::ShapeMismatch {
            expected: format!("T x {}", encoder.config.input_dim),
            got: format!("{} x {}", x.nrows(), x.ncols()),
        });
    }
    if x.nrows() == 0 {
        return Err(GradLabError::ShapeMismatch {
            expected: "T >= 1".into(),
            got: "T = 0".into(),
        });
    }
    let n_layers = encoder.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pres = Vec::with_capacity(n_layers);
    let mut current = x.clone();
    for (idx, (w, b)) in encoder.layers.iter().enumerate() {
        let pre = current.dot(&w.t()) + b;
        let out = if idx + 1 < n_layers { pre.mapv(|z| z.max(0.0)) } else { pre.clone() };
        inputs.push(current);
        pres.push(pre);
        current = out;
    }
    let pooled = current.mean_axis(ndarray::Axis(0)).expect("T >= 1");
    let norm = pooled.dot(&pooled).sqrt();
    // a zero pooled vector cannot be normalized; nudge deterministically
    let embedding = if norm > 0.0 {
        &pooled / norm
    } else {
        let mut e = Array1::zeros(pooled.len());
        e[0] = 1.0;
        e
    };
    Ok(EmbedCache { inputs, pres, pooled, norm, embedding })
}

/// Encode an utterance: per-frame encoder, mean over frames, L2 normalize.
pub fn embed(encoder: &Encoder, x: &FeatureMatrix) -> Result<Embedding> {
    embed_cached(encoder, x).map(|c| Embedding(c.embedding))
}

/// Hinge on the similarity gap: max(0, s_an - s_ap + margin).
pub fn triplet_loss(s_ap: f64, s_an: f64, margin: f64) -> f64 {
    (s_an - s_ap + margin).max(0.0)
}

/// Accumulate parameter gradients for d loss / d embedding into `grads`.
fn backprop_embedding(
    encoder: &Encoder,
    cache: &EmbedCache,
    d_embedding: &Array1<f64>,
    grads: &mut [(Array2<f64>, Array1<f64>)],
) {
    // through L2 normalization: du = (g - e (e . g)) / ||u||
    let e = &cache.embedding;
    let du = if cache.norm > 0.0 {
        (d_embedding - &(e * e.dot(d_embedding))) / cache.norm
    } else {
        Array1::zeros(cache.pooled.len())
    };
    // through mean pooling: same delta at every frame, scaled by 1/T
    let frames = cache.inputs[0].nrows();
    let mut delta = Array2::zeros((frames, du.len()));
    for mut row in delta.rows_mut() {
        row.assign(&(&du / frames as f64));
    }
    for idx in (0..encoder.layers.len()).rev() {
        if idx + 1 < encoder.layers.len() {
            // relu derivative on hidden layers
            for (dv, &z) in delta.iter_mut().zip(cache.pres[idx].iter()) {
                if z <= 0.0 {
                    *dv = 0.0;
                }
            }
        }
        grads[idx].0 += &delta.t().dot(&cache.inputs[idx]);
        grads[idx].1 += &delta.sum_axis(ndarray::Axis(0));
        delta = delta.dot(&encoder.layers[idx].0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletTrainConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub steps: usize,
    pub triplets_per_step: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for TripletTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            embed_dim: 8,
            steps: 400,
            triplets_per_step: 8,
            learning_rate: 0.5,
            margin: 0.1,
            seed: 0,
        }
    }
}

/// Train the encoder with SGD on triplet loss over the given utterances.
/// `train_ids` selects utterance ids from the corpus; every speaker with
/// utterances in the set contributes anchors.
pub fn train_embedder(corpus: &Corpus, train_ids: &[usize], cfg: &TripletTrainConfig) -> Result<Encoder> {
    let utts: Vec<&crate::corpus::Utterance> = corpus
        .utterances
        .iter()
        .filter(|u| train_ids.contains(&u.id))
        .collect();
    let mut by_speaker: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        match by_speaker.iter_mut().find(|(s, _)| *s == u.speaker_id) {
            Some((_, v)) => v.push(i),
            None => by_speaker.push((u.speaker_id, vec![i])),
        }
    }
    if by_speaker.len() < 2 {
        return Err(GradLabError::InsufficientCorpus("need at least 2 speakers".into()));
    }
    if by_speaker.iter().any(|(_, v)| v.len() < 2) {
        return Err(GradLabError::InsufficientCorpus("every speaker needs at least 2 utterances".into()));
    }

    let enc_cfg = EncoderConfig {
        input_dim: corpus.config.feature_dim,
        hidden: cfg.hidden.clone(),
        embed_dim: cfg.embed_dim,
    };
    let mut encoder = Encoder::init(&enc_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed, 0x7219));

    for _ in 0..cfg.steps {
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = encoder
            .layers
            .iter()
            .map(|(w, b)| (Array2::zeros(w.dim()), Array1::zeros(b.len())))
            .collect();
        let mut active = 0usize;
        for _ in 0..cfg.triplets_per_step {
            let (_, anchors) = by_speaker.choose(&mut rng).expect(">= 2 speakers");
            let picks: Vec<&usize> = anchors.choose_multiple(&mut rng, 2).collect();
            let (ai, pi) = (*picks[0], *picks[1]);
            let anchor_speaker = utts[ai].speaker_id;
            let ni = loop {
                let j = rng.gen_range(0..utts.len());
                if utts[j].speaker_id != anchor_speaker {
                    break j;
                }
            };
            let ca = embed_cached(&encoder, &utts[ai].features)?;
            let cp = embed_cached(&encoder, &utts[pi].features)?;
            let cn = embed_cached(&encoder, &utts[ni].features)?;
            let s_ap = ca.embedding.dot(&cp.embedding);
            let s_an = ca.embedding.dot(&cn.embedding);
            if triplet_loss(s_ap, s_an, cfg.margin) > 0.0 {
                active += 1;
                let da = &cn.embedding - &cp.embedding;
                let dp = cn.embedding.mapv(|_| 0.0) - &ca.embedding;
                let dn = ca.embedding.clone();
                backprop_embedding(&encoder, &ca, &da, &mut grads);
                backprop_embedding(&encoder, &cp, &dp, &mut grads);
                backprop_embedding(&encoder, &cn, &dn, &mut grads);
            }
        }
        if active == 0 {
            continue;
        }
        let scale = cfg.learning_rate / cfg.triplets_per_step as f64;
        for ((w, b), (gw, gb)) in encoder.layers.iter_mut().zip(&grads) {
            w.scaled_add(-scale, gw);
            b.scaled_add(-scale, gb);
        }
    }
    Ok(encoder)
}

/// Reference embeddings for one enrolled speaker.
#[derive(Clone, Debug)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    pub enrollments: Vec<Embedding>,
}

/// Build profiles from the first `enroll_per_speaker` utterances of each
/// speaker among `enroll_ids`.
pub fn enroll_profiles(
    encoder: &Encoder,
    corpus: &Corpus,
    enroll_ids: &[usize],
) -> Result<Vec<SpeakerProfile>> {
    let mut profiles: Vec<SpeakerProfile> = Vec::new();
    for u in corpus.utterances.iter().filter(|u| enroll_ids.contains(&u.id)) {
        let e = embed(encoder, &u.features)?;
        match profiles.iter_mut().find(|p| p.speaker_id == u.speaker_id) {
            Some(p) => p.enrollments.push(e),
            None => profiles.push(SpeakerProfile { speaker_id: u.speaker_id, enrollments: vec![e] }),
        }
    }
    profiles.sort_by_key(|p| p.speaker_id);
    if profiles.is_empty() {
        return Err(GradLabError::InsufficientCorpus("no enrollment utterances".into()));
    }
    Ok(profiles)
}

/// Ordered scores plus the rank (1-based) of the true speaker.
#[derive(Clone, Debug)]
pub struct RankingResult {
    /// (speaker_id, score), descending score, ties broken by ascending id.
    pub ranking: Vec<(usize, f64)>,
    pub true_rank: usize,
}

impl RankingResult {
    pub fn reciprocal_rank(&self) -> f64 {
        1.0 / self.true_rank as f64
    }
}

/// Score each speaker by the mean cosine similarity over its enrollments
/// and rank descending, ties broken by ascending speaker id.
pub fn rank_speakers(
    query: &Embedding,
    profiles: &[SpeakerProfile],
    true_speaker: usize,
) -> RankingResult {
    let mut ranking: Vec<(usize, f64)> = profiles
        .iter()
        .map(|p| {
            let score =
                p.enrollments.iter().map(|e| query.cosine(e)).sum::<f64>() / p.enrollments.len() as f64;
            (p.speaker_id, score)
        })
        .collect();
    ranking.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let true_rank = ranking
        .iter()
        .position(|&(id, _)| id == true_speaker)
        .map(|p| p + 1)
        .unwrap_or(ranking.len() + 1);
    RankingResult { ranking, true_rank }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentificationMetrics {
    pub top1: f64,
    pub top5: f64,
    pub mrr: f64,
}

/// Top-k accuracy and mean reciprocal rank over a set of rankings.
pub fn metrics(results: &[RankingResult]) -> Result<IdentificationMetrics> {
    if results.is_empty() {
        return Err(GradLabError::InvalidConfig("metrics over an empty result set".into()));
    }
    let n = results.len() as f64;
    let top_k = |k: usize| results.iter().filter(|r| r.true_rank <= k).count() as f64 / n;
    let mrr = results.iter().map(RankingResult::reciprocal_rank).sum::<f64>() / n;
    Ok(IdentificationMetrics { top1: top_k(1), top5: top_k(5), mrr })
}

#[derive(Serialize, Deserialize)]
struct EncoderCheckpoint {
    version: u32,
    encoder: Encoder,
}

pub fn save_encoder(path: &Path, encoder: &Encoder) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(
        std::io::BufWriter::new(file),
        &EncoderCheckpoint { version: crate::model::CHECKPOINT_VERSION, encoder: encoder.clone() },
    )?;
    Ok(())
}

pub fn load_encoder(path: &Path) -> Result<Encoder> {
    let file = std::fs::File::open(path)?;
    let ckpt: EncoderCheckpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if ckpt.version != crate::model::CHECKPOINT_VERSION {
        return Err(GradLabError::InvalidConfig(format!("unsupported checkpoint version {}", ckpt.version)));
    }
    Ok(ckpt.encoder)
}
