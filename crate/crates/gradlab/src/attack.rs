//! Hessian-Free Gradients Matching: reconstruct the input features of a
//! training utterance from an observed gradient by zeroth-order direct
//! search. One candidate move perturbs a single frame; moves that lower the
//! matching objective are summed and applied together.
//!
//! Three drivers share the search core: [`hfgm_reconstruct`] matches a
//! single-sample gradient, [`hfgm_batch`] matches a batch-averaged gradient
//! while updating one sample per iteration from cached per-sample views,
//! and [`hfgm_multistep`] matches the parameter delta left behind by a
//! short run of local SGD steps.

use crate::ctc::LabelSeq;
use crate::error::{GradLabError, Result};
use crate::math::{dot, l2_norm, per_frame_mae, total_variation};
use crate::model::{
    gradient_view, loss_and_full_grad, loss_and_grad, FeatureMatrix, GradientView, ModelConfig,
    ParamVector,
};
use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How a candidate gradient is compared against the observed one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// 1 - <g, g_hat> / (||g|| * ||g_hat||).
    Cosine,
    /// ||g - g_hat||^2.
    Euclidean,
    /// Cosine plus `weight` times the total variation of the candidate
    /// features, penalizing frame-to-frame jitter.
    CosineTv { weight: f64 },
}

impl DistanceKind {
    pub fn validate(&self) -> Result<()> {
        if let DistanceKind::CosineTv { weight } = self {
            if *weight < 0.0 || !weight.is_finite() {
                return Err(GradLabError::InvalidConfig(format!(
                    "total-variation weight {weight} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Distance between flattened gradient views, excluding any TV term.
    pub fn base(&self, g: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<f64> {
        if g.len() != target.len() {
            return Err(GradLabError::ShapeMismatch {
                expected: format!("gradient view of length {}", target.len()),
                got: format!("length {}", g.len()),
            });
        }
        match self {
            DistanceKind::Cosine | DistanceKind::CosineTv { .. } => {
                let ng = l2_norm(g);
                let nt = l2_norm(target);
                if ng == 0.0 {
                    return Err(GradLabError::ZeroGradient { side: "candidate" });
                }
                if nt == 0.0 {
                    return Err(GradLabError::ZeroGradient { side: "target" });
                }
                Ok(1.0 - dot(g, target) / (ng * nt))
            }
            DistanceKind::Euclidean => {
                Ok(g.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
            }
        }
    }

    pub fn tv_weight(&self) -> f64 {
        match self {
            DistanceKind::CosineTv { weight } => *weight,
            _ => 0.0,
        }
    }
}

/// Step-size schedule of the direct search: start at `initial_step`, and at
/// every `halving_window`-iteration boundary halve the step when the window
/// improved the objective by less than `improvement_threshold` (relative to
/// the window's starting value). The search stops when a halving would drop
/// the step below `terminal_step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub initial_step: f64,
    pub halving_window: usize,
    pub improvement_threshold: f64,
    pub terminal_step: f64,
    /// Candidate unit vectors sampled per iteration.
    pub samplings_k: usize,
    /// Safety valve: hard cap on iterations regardless of the schedule.
    pub max_iters: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            halving_window: 2500,
            improvement_threshold: 0.05,
            terminal_step: 0.125,
            samplings_k: 128,
            max_iters: 100_000,
        }
    }
}

impl ScheduleConfig {
    /// Multi-step matching default: far fewer samplings, since every
    /// candidate evaluation replays several SGD steps.
    pub fn multistep() -> Self {
        Self { samplings_k: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.terminal_step < self.initial_step) || self.terminal_step <= 0.0 {
            return Err(GradLabError::InvalidConfig(format!(
                "need 0 < terminal_step < initial_step, got {} and {}",
                self.terminal_step, self.initial_step
            )));
        }
        if !(self.improvement_threshold > 0.0 && self.improvement_threshold < 1.0) {
            return Err(GradLabError::InvalidConfig(format!(
                "improvement_threshold {} not in (0, 1)",
                self.improvement_threshold
            )));
        }
        if self.halving_window == 0 || self.samplings_k == 0 || self.max_iters == 0 {
            return Err(GradLabError::InvalidConfig(
                "halving_window, samplings_k and max_iters must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleDecision {
    Keep,
    Halve(f64),
    Terminate,
}

/// Window-boundary decision: halve when the relative improvement
/// (start - end) / start over the window fell short of the threshold, and
/// terminate instead when halving would undershoot the terminal step.
pub fn update_schedule(
    cfg: &ScheduleConfig,
    alpha: f64,
    window_start: f64,
    window_end: f64,
) -> ScheduleDecision {
    let improvement =
        if window_start > 0.0 { (window_start - window_end) / window_start } else { 0.0 };
    if improvement >= cfg.improvement_threshold {
        return ScheduleDecision::Keep;
    }
    let next = alpha * 0.5;
    if next < cfg.terminal_step {
        ScheduleDecision::Terminate
    } else {
        ScheduleDecision::Halve(next)
    }
}

/// One logged point of a reconstruction run.
#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
    pub alpha: f64,
    /// MAE against the ground truth, one entry per frame (concatenated
    /// across samples for batch runs); absent when no truth was supplied.
    pub per_frame_mae: Option<Array1<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconstructionTrace {
    pub points: Vec<TracePoint>,
}

impl ReconstructionTrace {
    fn push(&mut self, point: TracePoint) {
        debug_assert!(
            self.points.last().map_or(true, |p| p.iteration < point.iteration),
            "trace iterations must be strictly increasing"
        );
        self.points.push(point);
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.points.last().map(|p| p.objective)
    }

    /// Append-friendly CSV: iteration, objective, alpha, mean MAE, then one
    /// column per frame when ground truth was available.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let frames = self.points.iter().find_map(|p| p.per_frame_mae.as_ref().map(|m| m.len()));
        let mut header = vec!["iteration".to_string(), "objective".into(), "alpha".into(), "mae_mean".into()];
        for f in 0..frames.unwrap_or(0) {
            header.push(format!("mae_f{f}"));
        }
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec = vec![p.iteration.to_string(), format!("{:.17e}", p.objective), format!("{}", p.alpha)];
            match &p.per_frame_mae {
                Some(m) => {
                    rec.push(format!("{:.17e}", m.mean().unwrap_or(f64::NAN)));
                    for v in m.iter() {
                        rec.push(format!("{v:.17e}"));
                    }
                }
                None => {
                    rec.push(String::new());
                    for _ in 0..frames.unwrap_or(0) {
                        rec.push(String::new());
                    }
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A single-sample gradient-matching instance. The attacker knows the
/// transcript, the frame count, and the model parameters, and observes
/// `target`; the dropout state of the victim (if any) is not part of the
/// problem — dummy gradients are always computed without dropout.
#[derive(Clone, Debug)]
pub struct AttackProblem {
    pub target: GradientView,
    pub transcript: LabelSeq,
    pub frames: usize,
    pub params: ParamVector,
    pub config: ModelConfig,
    pub distance: DistanceKind,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
    /// Reject the combined update when it raises the objective. Off by
    /// default: the sum of accepted vectors is applied unguarded.
    pub guarded: bool,
}

impl AttackProblem {
    pub fn new(
        target: GradientView,
        transcript: LabelSeq,
        frames: usize,
        params: ParamVector,
        config: ModelConfig,
    ) -> Self {
        Self {
            target,
            transcript,
            frames,
            params,
            config,
            distance: DistanceKind::Cosine,
            schedule: ScheduleConfig::default(),
            init_seed: 0,
            guarded: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.schedule.validate()?;
        self.distance.validate()?;
        if self.frames == 0 {
            return Err(GradLabError::InvalidConfig("frames must be >= 1".into()));
        }
        let required = self.transcript.min_frames();
        if required > self.frames {
            return Err(GradLabError::InfeasibleAlignment { required, frames: self.frames });
        }
        Ok(())
    }
}

/// Matching objective for a candidate input: distance between the dummy
/// gradient's view and the target, plus the TV penalty when configured.
pub fn grad_distance(x: &FeatureMatrix, problem: &AttackProblem) -> Result<f64> {
    let (_, view) =
        loss_and_grad(&problem.params, &problem.config, x, &problem.transcript, None)?;
    let mut d = problem.distance.base(view.flat.view(), problem.target.flat.view())?;
    let w = problem.distance.tv_weight();
    if w != 0.0 {
        d += w * total_variation(x);
    }
    Ok(d)
}

/// Draw `k` search directions: unit L2 norm, support confined to exactly
/// one frame row (frame uniform, within-frame direction uniform on the
/// sphere).
pub fn sample_unit_vectors<R: Rng>(
    k: usize,
    frames: usize,
    dim: usize,
    rng: &mut R,
) -> Vec<FeatureMatrix> {
    (0..k)
        .map(|_| {
            let frame = rng.gen_range(0..frames);
            loop {
                let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = l2_norm(ArrayView1::from(&dir));
                if norm > 0.0 {
                    let mut v = Array2::zeros((frames, dim));
                    for (j, e) in dir.iter().enumerate() {
                        v[[frame, j]] = e / norm;
                    }
                    return v;
                }
            }
        })
        .collect()
}

/// Uniform U[-1, 1] starting point of the search; also useful as the
/// random baseline when judging reconstruction error.
pub fn init_features<R: Rng>(frames: usize, dim: usize, rng: &mut R) -> FeatureMatrix {
    Array2::from_shape_fn((frames, dim), |_| rng.gen_range(-1.0..1.0))
}

const TRACE_EVERY: usize = 100;

fn trace_point(
    iteration: usize,
    objective: f64,
    alpha: f64,
    x: &FeatureMatrix,
    truth: Option<&FeatureMatrix>,
) -> TracePoint {
    let per_frame_mae = truth.map(|t| per_frame_mae(x, t));
    TracePoint { iteration, objective, alpha, per_frame_mae }
}

/// Shared direct-search loop over a single feature matrix. Candidate
/// evaluations within an iteration all see the pre-update `x` and run in
/// parallel; acceptance is reduced in candidate order, so the outcome does
/// not depend on scheduling.
fn direct_search<F>(
    frames: usize,
    dim: usize,
    schedule: &ScheduleConfig,
    guarded: bool,
    rng: &mut ChaCha8Rng,
    objective: F,
    truth: Option<&FeatureMatrix>,
) -> Result<(FeatureMatrix, ReconstructionTrace)>
where
    F: Fn(&FeatureMatrix) -> Result<f64> + Sync,
{
    let mut x = init_features(frames, dim, rng);
    let mut d = objective(&x)?;
    let mut alpha = schedule.initial_step;
    let mut trace = ReconstructionTrace::default();
    trace.push(trace_point(0, d, alpha, &x, truth));
    let mut window_start = d;
    let mut iter = 0usize;
    let mut last_logged = 0usize;
    while d > 0.0 && iter < schedule.max_iters {
        iter += 1;
        let candidates = sample_unit_vectors(schedule.samplings_k, frames, dim, rng);
        let evals: Vec<f64> = candidates
            .par_iter()
            .map(|v| objective(&(&x + &v.mapv(|e| e * alpha))))
            .collect::<Result<_>>()?;
        let mut accepted: FeatureMatrix = Array2::zeros((frames, dim));
        let mut any = false;
        for (v, &dv) in candidates.iter().zip(&evals) {
            if dv < d {
                accepted += v;
                any = true;
            }
        }
        if any {
            let next = &x + &accepted.mapv(|e| e * alpha);
            let fresh = objective(&next)?;
            // the combined step is not guaranteed to improve; record the
            // fresh value rather than carrying one over from the candidates
            if !(guarded && fresh >= d) {
                x = next;
                d = fresh;
            }
        }
        if iter % schedule.halving_window == 0 {
            let decision = update_schedule(schedule, alpha, window_start, d);
            trace.push(trace_point(iter, d, alpha, &x, truth));
            last_logged = iter;
            match decision {
                ScheduleDecision::Keep => {}
                ScheduleDecision::Halve(a) => alpha = a,
                ScheduleDecision::Terminate => break,
            }
            window_start = d;
        } else if iter % TRACE_EVERY == 0 {
            trace.push(trace_point(iter, d, alpha, &x, truth));
            last_logged = iter;
        }
    }
    if iter > last_logged {
        trace.push(trace_point(iter, d, alpha, &x, truth));
    }
    Ok((x, trace))
}

/// Algorithm 1: single-sample gradients matching. Returns the
/// reconstruction and its trace; pass the true features to get per-frame
/// MAE logging.
pub fn hfgm_reconstruct(
    problem: &AttackProblem,
    truth: Option<&FeatureMatrix>,
) -> Result<(FeatureMatrix, ReconstructionTrace)> {
    problem.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(problem.init_seed);
    direct_search(
        problem.frames,
        problem.config.input_dim,
        &problem.schedule,
        problem.guarded,
        &mut rng,
        |x| grad_distance(x, problem),
        truth,
    )
}

/// One sample of a batch-averaged matching instance.
#[derive(Clone, Debug)]
pub struct BatchSample {
    pub transcript: LabelSeq,
    pub frames: usize,
}

/// Batch variant: the observed gradient is the average over B samples;
/// each iteration updates one sample, recombining its fresh dummy gradient
/// with the cached views of the others.
#[derive(Clone, Debug)]
pub struct BatchAttackProblem {
    pub target: GradientView,
    pub samples: Vec<BatchSample>,
    pub params: ParamVector,
    pub config: ModelConfig,
    pub distance: DistanceKind,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
    pub guarded: bool,
}

impl BatchAttackProblem {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.schedule.validate()?;
        self.distance.validate()?;
        if self.samples.is_empty() {
            return Err(GradLabError::InvalidConfig("batch needs at least one sample".into()));
        }
        for s in &self.samples {
            if s.frames == 0 {
                return Err(GradLabError::InvalidConfig("frames must be >= 1".into()));
            }
            let required = s.transcript.min_frames();
            if required > s.frames {
                return Err(GradLabError::InfeasibleAlignment { required, frames: s.frames });
            }
        }
        Ok(())
    }
}

/// Mean of per-sample full gradients, for building batch targets.
pub fn average_gradients(grads: &[ParamVector]) -> Result<ParamVector> {
    let first = grads
        .first()
        .ok_or_else(|| GradLabError::InvalidConfig("cannot average zero gradients".into()))?;
    let mut sum = first.clone();
    for g in &grads[1..] {
        sum.axpy(1.0, g)?;
    }
    sum.scale(1.0 / grads.len() as f64);
    Ok(sum)
}

/// Algorithm 2. With a single sample the index draw is skipped, so the run
/// is bit-identical to [`hfgm_reconstruct`] under the same seed.
pub fn hfgm_batch(
    problem: &BatchAttackProblem,
    truth: Option<&[FeatureMatrix]>,
) -> Result<(Vec<FeatureMatrix>, ReconstructionTrace)> {
    problem.validate()?;
    let b_count = problem.samples.len();
    if let Some(t) = truth {
        if t.len() != b_count {
            return Err(GradLabError::ShapeMismatch {
                expected: format!("{b_count} ground-truth matrices"),
                got: format!("{}", t.len()),
            });
        }
    }
    let dim = problem.config.input_dim;
    let tv_weight = problem.distance.tv_weight();
    let mut rng = ChaCha8Rng::seed_from_u64(problem.init_seed);
    let mut xs: Vec<FeatureMatrix> =
        problem.samples.iter().map(|s| init_features(s.frames, dim, &mut rng)).collect();

    let sample_view = |x: &FeatureMatrix, s: &BatchSample| -> Result<(Array1<f64>, f64)> {
        let (_, view) = loss_and_grad(&problem.params, &problem.config, x, &s.transcript, None)?;
        let tv = if tv_weight != 0.0 { total_variation(x) } else { 0.0 };
        Ok((view.flat, tv))
    };
    let mut views: Vec<(Array1<f64>, f64)> = xs
        .iter()
        .zip(&problem.samples)
        .map(|(x, s)| sample_view(x, s))
        .collect::<Result<_>>()?;

    // averaged objective with sample `b`'s cached view swapped for a fresh
    // candidate; summation starts from the first contributing view so the
    // B = 1 case degenerates to the plain single-sample objective
    let combined = |views: &[(Array1<f64>, f64)],
                    replace: Option<(usize, &(Array1<f64>, f64))>|
     -> Result<f64> {
        let entry = |i: usize| -> &(Array1<f64>, f64) {
            match replace {
                Some((b, fresh)) if b == i => fresh,
                _ => &views[i],
            }
        };
        let (first_flat, first_tv) = entry(0);
        let mut sum = first_flat.clone();
        let mut tv_sum = *first_tv;
        for i in 1..views.len() {
            let (flat, tv) = entry(i);
            sum += flat;
            tv_sum += tv;
        }
        let avg = sum / b_count as f64;
        let mut d = problem.distance.base(avg.view(), problem.target.flat.view())?;
        if tv_weight != 0.0 {
            d += tv_weight * tv_sum;
        }
        Ok(d)
    };

    let truth_mae = |xs: &[FeatureMatrix]| -> Option<Array1<f64>> {
        truth.map(|ts| {
            let mut all = Vec::new();
            for (x, t) in xs.iter().zip(ts) {
                all.extend(per_frame_mae(x, t).into_iter());
            }
            Array1::from(all)
        })
    };

    let mut d = combined(&views, None)?;
    let mut alpha = problem.schedule.initial_step;
    let mut trace = ReconstructionTrace::default();
    trace.push(TracePoint { iteration: 0, objective: d, alpha, per_frame_mae: truth_mae(&xs) });
    let mut window_start = d;
    let mut iter = 0usize;
    let mut last_logged = 0usize;
    while d > 0.0 && iter < problem.schedule.max_iters {
        iter += 1;
        let b = if b_count > 1 { rng.gen_range(0..b_count) } else { 0 };
        let sample = &problem.samples[b];
        let candidates =
            sample_unit_vectors(problem.schedule.samplings_k, sample.frames, dim, &mut rng);
        let evals: Vec<f64> = candidates
            .par_iter()
            .map(|v| {
                let fresh = sample_view(&(&xs[b] + &v.mapv(|e| e * alpha)), sample)?;
                combined(&views, Some((b, &fresh)))
            })
            .collect::<Result<_>>()?;
        let mut accepted: FeatureMatrix = Array2::zeros((sample.frames, dim));
        let mut any = false;
        for (v, &dv) in candidates.iter().zip(&evals) {
            if dv < d {
                accepted += v;
                any = true;
            }
        }
        if any {
            let next = &xs[b] + &accepted.mapv(|e| e * alpha);
            let fresh = sample_view(&next, sample)?;
            let fresh_d = combined(&views, Some((b, &fresh)))?;
            if !(problem.guarded && fresh_d >= d) {
                xs[b] = next;
                views[b] = fresh;
                d = fresh_d;
            }
        }
        if iter % problem.schedule.halving_window == 0 {
            let decision = update_schedule(&problem.schedule, alpha, window_start, d);
            trace.push(TracePoint { iteration: iter, objective: d, alpha, per_frame_mae: truth_mae(&xs) });
            last_logged = iter;
            match decision {
                ScheduleDecision::Keep => {}
                ScheduleDecision::Halve(a) => alpha = a,
                ScheduleDecision::Terminate => break,
            }
            window_start = d;
        } else if iter % TRACE_EVERY == 0 {
            trace.push(TracePoint { iteration: iter, objective: d, alpha, per_frame_mae: truth_mae(&xs) });
            last_logged = iter;
        }
    }
    if iter > last_logged {
        trace.push(TracePoint { iteration: iter, objective: d, alpha, per_frame_mae: truth_mae(&xs) });
    }
    Ok((xs, trace))
}

/// Multi-step matching instance: the observation is the view of the
/// parameter delta after `steps` local SGD steps at learning rate
/// `local_lr`, starting from `params`.
#[derive(Clone, Debug)]
pub struct MultiStepProblem {
    pub target: GradientView,
    pub transcript: LabelSeq,
    pub frames: usize,
    pub params: ParamVector,
    pub config: ModelConfig,
    pub steps: usize,
    pub local_lr: f64,
    pub distance: DistanceKind,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
    pub guarded: bool,
}

impl MultiStepProblem {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.schedule.validate()?;
        self.distance.validate()?;
        if self.steps == 0 {
            return Err(GradLabError::InvalidConfig("multi-step needs steps >= 1".into()));
        }
        if self.frames == 0 {
            return Err(GradLabError::InvalidConfig("frames must be >= 1".into()));
        }
        let required = self.transcript.min_frames();
        if required > self.frames {
            return Err(GradLabError::InfeasibleAlignment { required, frames: self.frames });
        }
        Ok(())
    }
}

/// Parameter delta from `steps` SGD steps on (x, y) starting at `params`.
/// The delta is accumulated directly (theta is rebuilt as params + delta
/// each step) rather than differencing the final and initial parameters,
/// which would cancel catastrophically at small learning rates.
pub fn multistep_delta(
    params: &ParamVector,
    cfg: &ModelConfig,
    x: &FeatureMatrix,
    y: &LabelSeq,
    steps: usize,
    lr: f64,
) -> Result<ParamVector> {
    let mut delta = params.zeros_like();
    for step in 0..steps {
        let theta = if step == 0 {
            params.clone()
        } else {
            let mut t = params.clone();
            t.axpy(1.0, &delta)?;
            t
        };
        let (_, grad) = loss_and_full_grad(&theta, cfg, x, y, None)?;
        delta.axpy(-lr, &grad)?;
    }
    Ok(delta)
}

/// Objective of the multi-step variant: replay the local steps on the
/// candidate input and compare the resulting delta's view to the target.
pub fn multistep_distance(x: &FeatureMatrix, problem: &MultiStepProblem) -> Result<f64> {
    let delta = multistep_delta(
        &problem.params,
        &problem.config,
        x,
        &problem.transcript,
        problem.steps,
        problem.local_lr,
    )?;
    let view = gradient_view(&delta, &problem.config);
    let mut d = problem.distance.base(view.flat.view(), problem.target.flat.view())?;
    let w = problem.distance.tv_weight();
    if w != 0.0 {
        d += w * total_variation(x);
    }
    Ok(d)
}

/// Algorithm 3: gradients matching against a multi-step parameter delta.
pub fn hfgm_multistep(
    problem: &MultiStepProblem,
    truth: Option<&FeatureMatrix>,
) -> Result<(FeatureMatrix, ReconstructionTrace)> {
    problem.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(problem.init_seed);
    direct_search(
        problem.frames,
        problem.config.input_dim,
        &problem.schedule,
        problem.guarded,
        &mut rng,
        |x| multistep_distance(x, problem),
        truth,
    )
}
