//! End-to-end experiment orchestration: generate a corpus, train and
//! enroll a speaker embedder, run the configured attack against every
//! victim utterance, rank the reconstructions, and emit reports.
//!
//! Per-speaker utterances are split into a public prefix (embedder
//! training and enrollment) and private victims; the defense acts on the
//! victim's gradient before the attacker sees it.

use crate::attack::{
    average_gradients, hfgm_batch, hfgm_multistep, hfgm_reconstruct, multistep_delta,
    AttackProblem, BatchAttackProblem, BatchSample, DistanceKind, MultiStepProblem,
    ReconstructionTrace, ScheduleConfig,
};
use crate::corpus::{generate_corpus, mae, mae_truncated, Corpus, CorpusConfig, Utterance};
use crate::ctc::LabelSeq;
use crate::defense::DefenseConfig;
use crate::error::{GradLabError, Result};
use crate::model::{
    gradient_view, init_model, splitmix, FeatureMatrix, ModelConfig, ParamVector,
};
use crate::speaker::{
    embed, enroll_profiles, metrics, rank_speakers, train_embedder, Encoder,
    IdentificationMetrics, RankingResult, SpeakerProfile, TripletTrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// What the attacker assumes about the victim sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackMode {
    /// One sample per observed gradient, correct transcript and length.
    Single,
    /// Gradient averaged over `batch_size` samples, sorted by length.
    Batch { batch_size: usize },
    /// Observation is the parameter delta of `steps` local SGD steps.
    Multistep { steps: usize, local_lr: f64 },
    /// Attacker assumes a wrong frame count: true T shifted by `offset`
    /// and scaled by `factor` (apply one of the two, keep the other
    /// neutral).
    WrongLength { offset: i64, factor: f64 },
    /// Attacker matches with a random transcript of the true length.
    WrongTranscript,
}

impl AttackMode {
    pub fn label(&self) -> String {
        match self {
            AttackMode::Single => "single".into(),
            AttackMode::Batch { batch_size } => format!("batch{batch_size}"),
            AttackMode::Multistep { steps, .. } => format!("multistep{steps}"),
            AttackMode::WrongLength { offset, factor } => {
                if *factor != 1.0 {
                    format!("wrong_length_x{factor}")
                } else {
                    format!("wrong_length_{offset:+}")
                }
            }
            AttackMode::WrongTranscript => "wrong_transcript".into(),
        }
    }
}

fn defense_label(d: &DefenseConfig) -> String {
    match d {
        DefenseConfig::None => "none".into(),
        DefenseConfig::DpSgd { clip_norm, noise_scale, .. } => {
            format!("dpsgd(C={clip_norm},sigma={noise_scale})")
        }
        DefenseConfig::Dropout { rate, .. } => format!("dropout({rate})"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub embedder: TripletTrainConfig,
    /// Leading utterances of each speaker treated as public (embedder
    /// training and enrollment); the rest are attacked.
    pub enroll_per_speaker: usize,
    pub schedule: ScheduleConfig,
    pub distance: DistanceKind,
    pub defense: DefenseConfig,
    pub mode: AttackMode,
    /// Base seed; per-utterance attack seeds are derived from it.
    pub attack_seed: u64,
    /// Cap on the number of victim utterances (in id order); 0 = all.
    pub max_victims: usize,
    /// Report directory; nothing is written when absent.
    pub output_dir: Option<PathBuf>,
    pub write_traces: bool,
}

impl ExperimentConfig {
    /// Desk-scale defaults matching the corpus defaults: 2-layer model,
    /// last-layer matching, schedule scaled down to short utterances.
    pub fn desk_default() -> Self {
        let corpus = CorpusConfig::default();
        let model =
            ModelConfig::feed_forward(corpus.feature_dim, vec![64], corpus.alphabet_size);
        Self {
            corpus,
            model,
            model_seed: 7,
            embedder: TripletTrainConfig::default(),
            enroll_per_speaker: 5,
            schedule: ScheduleConfig {
                samplings_k: 16,
                initial_step: 0.125,
                terminal_step: 0.015625,
                ..ScheduleConfig::default()
            },
            distance: DistanceKind::Cosine,
            defense: DefenseConfig::None,
            mode: AttackMode::Single,
            attack_seed: 0,
            max_victims: 0,
            output_dir: None,
            write_traces: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        self.distance.validate()?;
        self.defense.validate()?;
        if self.model.input_dim != self.corpus.feature_dim
            || self.model.alphabet_size != self.corpus.alphabet_size
        {
            return Err(GradLabError::InvalidConfig(
                "model input_dim/alphabet_size must match the corpus".into(),
            ));
        }
        if self.enroll_per_speaker < 2 {
            return Err(GradLabError::InvalidConfig(
                "enroll_per_speaker must be >= 2 (triplet training needs pairs)".into(),
            ));
        }
        if self.enroll_per_speaker >= self.corpus.utterances_per_speaker {
            return Err(GradLabError::InvalidConfig(
                "enroll_per_speaker must leave at least one victim utterance".into(),
            ));
        }
        match self.mode {
            AttackMode::Batch { batch_size } if batch_size < 2 => {
                return Err(GradLabError::InvalidConfig("batch mode needs batch_size >= 2".into()))
            }
            AttackMode::Multistep { steps, .. } if steps < 2 => {
                return Err(GradLabError::InvalidConfig("multistep mode needs steps >= 2".into()))
            }
            AttackMode::Multistep { .. } if matches!(self.defense, DefenseConfig::Dropout { .. }) => {
                return Err(GradLabError::InvalidConfig(
                    "dropout defense is not supported in multistep mode".into(),
                ))
            }
            AttackMode::WrongLength { offset, factor } => {
                if factor <= 0.0 || !factor.is_finite() {
                    return Err(GradLabError::InvalidConfig(
                        "wrong-length factor must be positive".into(),
                    ));
                }
                if factor != 1.0 && offset != 0 {
                    return Err(GradLabError::InvalidConfig(
                        "wrong-length mode takes an offset or a factor, not both".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One attacked utterance. `error` is set (and the measures absent) when
/// the attack failed; the run continues past such rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub utterance_id: usize,
    pub speaker_id: usize,
    pub mode: String,
    pub defense: String,
    pub final_distance: Option<f64>,
    pub mae: Option<f64>,
    pub rank: Option<usize>,
    pub reciprocal_rank: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub attacked: usize,
    pub failed: usize,
    pub top1: f64,
    pub top5: f64,
    pub mrr: f64,
    pub mean_mae: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Full resolved configuration, embedded for reproducibility.
    pub config: ExperimentConfig,
    pub rows: Vec<UtteranceRow>,
    pub aggregate: Aggregate,
}

impl ExperimentReport {
    /// Recompute the aggregate from the rows; reports must be
    /// self-contained, so this must agree with the stored aggregate.
    pub fn recompute_aggregate(&self) -> Aggregate {
        aggregate_rows(&self.rows)
    }
}

fn aggregate_rows(rows: &[UtteranceRow]) -> Aggregate {
    let ranked: Vec<&UtteranceRow> = rows.iter().filter(|r| r.rank.is_some()).collect();
    let n = ranked.len() as f64;
    let top_k = |k: usize| {
        if ranked.is_empty() {
            0.0
        } else {
            ranked.iter().filter(|r| r.rank.unwrap() <= k).count() as f64 / n
        }
    };
    let mrr = if ranked.is_empty() {
        0.0
    } else {
        ranked.iter().map(|r| r.reciprocal_rank.unwrap()).sum::<f64>() / n
    };
    let maes: Vec<f64> = rows.iter().filter_map(|r| r.mae).collect();
    let mean_mae = if maes.is_empty() {
        f64::NAN
    } else {
        maes.iter().sum::<f64>() / maes.len() as f64
    };
    Aggregate {
        attacked: rows.len(),
        failed: rows.iter().filter(|r| r.error.is_some()).count(),
        top1: top_k(1),
        top5: top_k(5),
        mrr,
        mean_mae,
    }
}

/// Shared artifacts reused across sweep points.
pub struct PreparedEnv {
    pub corpus: Corpus,
    pub params: ParamVector,
    pub encoder: Encoder,
    pub profiles: Vec<SpeakerProfile>,
    /// Victim utterance ids in attack order.
    pub victims: Vec<usize>,
}

/// Generate the corpus, train the embedder on the public split, enroll
/// profiles, and initialize the victim model.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedEnv> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let mut public: Vec<usize> = Vec::new();
    let mut victims: Vec<usize> = Vec::new();
    for s in &corpus.speakers {
        for (i, u) in corpus.utterances_of(s.speaker_id).enumerate() {
            if i < cfg.enroll_per_speaker {
                public.push(u.id);
            } else {
                victims.push(u.id);
            }
        }
    }
    victims.sort_unstable();
    if cfg.max_victims > 0 {
        victims.truncate(cfg.max_victims);
    }
    let encoder = train_embedder(&corpus, &public, &cfg.embedder)?;
    let profiles = enroll_profiles(&encoder, &corpus, &public)?;
    let params = init_model(&cfg.model, cfg.model_seed)?;
    Ok(PreparedEnv { corpus, params, encoder, profiles, victims })
}

fn utterance(corpus: &Corpus, id: usize) -> &Utterance {
    corpus.utterances.iter().find(|u| u.id == id).expect("victim id from this corpus")
}

/// Random transcript of the same length, feasible for the frame count.
fn random_transcript(
    avoid: &LabelSeq,
    frames: usize,
    alphabet_size: usize,
    seed: u64,
) -> LabelSeq {
    let len = avoid.len().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..alphabet_size)).collect();
        let y = LabelSeq::new(tokens);
        if y.min_frames() > frames {
            continue;
        }
        // a single-symbol alphabet admits no different transcript of the
        // same length; everywhere else keep drawing until it is wrong
        if y != *avoid || alphabet_size == 1 {
            return y;
        }
    }
}

struct AttackOutcome {
    x: FeatureMatrix,
    final_distance: f64,
    trace: ReconstructionTrace,
    /// MAE against the ground truth (truncated alignment under
    /// wrong-length modes).
    mae: f64,
}

fn attack_one(
    cfg: &ExperimentConfig,
    env: &PreparedEnv,
    utt: &Utterance,
) -> Result<AttackOutcome> {
    let init_seed = splitmix(cfg.attack_seed, utt.id as u64);
    let defended =
        cfg.defense.victim_gradient(&env.params, &cfg.model, &utt.features, &utt.transcript, utt.id as u64)?;
    let target = gradient_view(&defended, &cfg.model);
    let (frames, transcript, truth_comparable) = match cfg.mode {
        AttackMode::WrongLength { offset, factor } => {
            let scaled = (utt.frames() as f64 * factor).round() as i64 + offset;
            let frames = scaled.max(1) as usize;
            (frames, utt.transcript.clone(), false)
        }
        AttackMode::WrongTranscript => {
            let y = random_transcript(
                &utt.transcript,
                utt.frames(),
                cfg.corpus.alphabet_size,
                splitmix(cfg.attack_seed ^ 0x77f0_13a5, utt.id as u64),
            );
            (utt.frames(), y, true)
        }
        _ => (utt.frames(), utt.transcript.clone(), true),
    };
    let (x, trace) = match cfg.mode {
        AttackMode::Multistep { steps, local_lr } => {
            // the observation is the delta itself; DP clipping/noise act on
            // it like on a gradient
            let delta = multistep_delta(
                &env.params,
                &cfg.model,
                &utt.features,
                &utt.transcript,
                steps,
                local_lr,
            )?;
            let delta = match &cfg.defense {
                DefenseConfig::None => delta,
                DefenseConfig::DpSgd { clip_norm, noise_scale, seed } => {
                    let dp = crate::defense::DpSgdConfig {
                        clip_norm: *clip_norm,
                        noise_scale: *noise_scale,
                        seed: *seed,
                    };
                    crate::defense::dp_transform_stream(&delta, &dp, utt.id as u64)?
                }
                DefenseConfig::Dropout { .. } => unreachable!("rejected by validate"),
            };
            let problem = MultiStepProblem {
                target: gradient_view(&delta, &cfg.model),
                transcript,
                frames,
                params: env.params.clone(),
                config: cfg.model.clone(),
                steps,
                local_lr,
                distance: cfg.distance,
                schedule: cfg.schedule,
                init_seed,
                guarded: false,
            };
            hfgm_multistep(&problem, truth_comparable.then_some(&utt.features))?
        }
        _ => {
            let problem = AttackProblem {
                target,
                transcript,
                frames,
                params: env.params.clone(),
                config: cfg.model.clone(),
                distance: cfg.distance,
                schedule: cfg.schedule,
                init_seed,
                guarded: false,
            };
            hfgm_reconstruct(&problem, truth_comparable.then_some(&utt.features))?
        }
    };
    let err = if truth_comparable {
        mae(&x, &utt.features)?
    } else {
        mae_truncated(&x, &utt.features)?
    };
    let final_distance = trace.final_objective().unwrap_or(f64::NAN);
    Ok(AttackOutcome { x, final_distance, trace, mae: err })
}

fn rank_row(
    env: &PreparedEnv,
    utt: &Utterance,
    outcome: &AttackOutcome,
    cfg: &ExperimentConfig,
) -> Result<(UtteranceRow, RankingResult)> {
    let embedding = embed(&env.encoder, &outcome.x)?;
    let ranking = rank_speakers(&embedding, &env.profiles, utt.speaker_id);
    Ok((
        UtteranceRow {
            utterance_id: utt.id,
            speaker_id: utt.speaker_id,
            mode: cfg.mode.label(),
            defense: defense_label(&cfg.defense),
            final_distance: Some(outcome.final_distance),
            mae: Some(outcome.mae),
            rank: Some(ranking.true_rank),
            reciprocal_rank: Some(ranking.reciprocal_rank()),
            error: None,
        },
        ranking,
    ))
}

fn error_row(cfg: &ExperimentConfig, utt: &Utterance, err: &GradLabError) -> UtteranceRow {
    UtteranceRow {
        utterance_id: utt.id,
        speaker_id: utt.speaker_id,
        mode: cfg.mode.label(),
        defense: defense_label(&cfg.defense),
        final_distance: None,
        mae: None,
        rank: None,
        reciprocal_rank: None,
        error: Some(err.to_string()),
    }
}

/// Run the configured attack over every victim utterance with prepared
/// artifacts; per-utterance failures become error rows, not run failures.
pub fn run_with_env(cfg: &ExperimentConfig, env: &PreparedEnv) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut traces: Vec<(usize, ReconstructionTrace)> = Vec::new();
    match cfg.mode {
        AttackMode::Batch { batch_size } => {
            // mirror the training-side batching: sort by length, then group
            let mut order: Vec<usize> = env.victims.clone();
            order.sort_by_key(|&id| (utterance(&env.corpus, id).frames(), id));
            for chunk in order.chunks(batch_size) {
                let utts: Vec<&Utterance> =
                    chunk.iter().map(|&id| utterance(&env.corpus, id)).collect();
                match attack_batch(cfg, env, &utts) {
                    Ok((xs, trace)) => {
                        let final_d = trace.final_objective().unwrap_or(f64::NAN);
                        for (u, x) in utts.iter().zip(&xs) {
                            let outcome = AttackOutcome {
                                x: x.clone(),
                                final_distance: final_d,
                                trace: ReconstructionTrace::default(),
                                mae: mae(x, &u.features)?,
                            };
                            let (row, _) = rank_row(env, u, &outcome, cfg)?;
                            rows.push(row);
                        }
                        traces.push((utts[0].id, trace));
                    }
                    Err(e) => {
                        for u in &utts {
                            rows.push(error_row(cfg, u, &e));
                        }
                    }
                }
            }
            rows.sort_by_key(|r| r.utterance_id);
        }
        _ => {
            for &id in &env.victims {
                let utt = utterance(&env.corpus, id);
                match attack_one(cfg, env, utt) {
                    Ok(outcome) => match rank_row(env, utt, &outcome, cfg) {
                        Ok((row, _)) => {
                            rows.push(row);
                            traces.push((id, outcome.trace));
                        }
                        Err(e) => rows.push(error_row(cfg, utt, &e)),
                    },
                    Err(e) => rows.push(error_row(cfg, utt, &e)),
                }
            }
        }
    }
    let aggregate = aggregate_rows(&rows);
    let report = ExperimentReport { config: cfg.clone(), rows, aggregate };
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        write_report(&report, dir)?;
        if cfg.write_traces {
            for (id, trace) in &traces {
                trace.write_csv(&dir.join(format!("trace_utt_{id:04}.csv")))?;
            }
        }
    }
    Ok(report)
}

fn attack_batch(
    cfg: &ExperimentConfig,
    env: &PreparedEnv,
    utts: &[&Utterance],
) -> Result<(Vec<FeatureMatrix>, ReconstructionTrace)> {
    let defended: Vec<ParamVector> = utts
        .iter()
        .map(|u| {
            cfg.defense.victim_gradient(
                &env.params,
                &cfg.model,
                &u.features,
                &u.transcript,
                u.id as u64,
            )
        })
        .collect::<Result<_>>()?;
    let target = gradient_view(&average_gradients(&defended)?, &cfg.model);
    let problem = BatchAttackProblem {
        target,
        samples: utts
            .iter()
            .map(|u| BatchSample { transcript: u.transcript.clone(), frames: u.frames() })
            .collect(),
        params: env.params.clone(),
        config: cfg.model.clone(),
        distance: cfg.distance,
        schedule: cfg.schedule,
        init_seed: splitmix(cfg.attack_seed, utts[0].id as u64),
        guarded: false,
    };
    let truths: Vec<FeatureMatrix> = utts.iter().map(|u| u.features.clone()).collect();
    hfgm_batch(&problem, Some(&truths))
}

/// Prepare and run a standalone experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let env = prepare(cfg)?;
    run_with_env(cfg, &env)
}

/// Run a grid of experiment points over shared corpus, embedder and model
/// artifacts. All points must agree on corpus, embedder, model and seeds.
pub fn sweep(grid: &[ExperimentConfig]) -> Result<Vec<ExperimentReport>> {
    let first = grid
        .first()
        .ok_or_else(|| GradLabError::InvalidConfig("sweep grid is empty".into()))?;
    for cfg in &grid[1..] {
        if cfg.corpus != first.corpus
            || cfg.embedder != first.embedder
            || cfg.model != first.model
            || cfg.model_seed != first.model_seed
            || cfg.enroll_per_speaker != first.enroll_per_speaker
        {
            return Err(GradLabError::InvalidConfig(
                "sweep points must share corpus, model and embedder settings".into(),
            ));
        }
    }
    let env = prepare(first)?;
    grid.iter().map(|cfg| run_with_env(cfg, &env)).collect()
}

/// Summary metrics of each sweep point, for the emitted summary table.
pub fn sweep_summary(reports: &[ExperimentReport]) -> Vec<(String, String, IdentificationMetrics, f64)> {
    reports
        .iter()
        .map(|r| {
            (
                r.config.mode.label(),
                defense_label(&r.config.defense),
                IdentificationMetrics {
                    top1: r.aggregate.top1,
                    top5: r.aggregate.top5,
                    mrr: r.aggregate.mrr,
                },
                r.aggregate.mean_mae,
            )
        })
        .collect()
}

fn opt_fmt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| format!("{x}")).unwrap_or_default()
}

/// Write `report.csv` (one row per utterance, resolved config embedded in
/// a leading comment line) and `aggregate.json`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let config_json = serde_json::to_string(&report.config)?;
    let mut file = std::fs::File::create(dir.join("report.csv"))?;
    writeln!(file, "# config={config_json}")?;
    {
        let mut w = csv::Writer::from_writer(&mut file);
        w.write_record([
            "utterance_id",
            "speaker_id",
            "mode",
            "defense",
            "final_distance",
            "mae",
            "rank",
            "reciprocal_rank",
            "error",
        ])?;
        for r in &report.rows {
            w.write_record([
                r.utterance_id.to_string(),
                r.speaker_id.to_string(),
                r.mode.clone(),
                r.defense.clone(),
                r.final_distance.map(|v| format!("{v:.17e}")).unwrap_or_default(),
                r.mae.map(|v| format!("{v:.17e}")).unwrap_or_default(),
                opt_fmt(&r.rank),
                r.reciprocal_rank.map(|v| format!("{v:.17e}")).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }
    let agg = serde_json::json!({
        "config": report.config,
        "aggregate": report.aggregate,
    });
    let mut f = std::fs::File::create(dir.join("aggregate.json"))?;
    serde_json::to_writer_pretty(&mut f, &agg)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Rankings recomputed from report rows, e.g. for metric checks.
pub fn report_metrics(report: &ExperimentReport) -> Result<IdentificationMetrics> {
    let results: Vec<RankingResult> = report
        .rows
        .iter()
        .filter_map(|r| r.rank)
        .map(|rank| RankingResult { ranking: Vec::new(), true_rank: rank })
        .collect();
    metrics(&results)
}
