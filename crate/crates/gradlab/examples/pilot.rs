//! Pilot runs for freezing attack thresholds: prints final objective and
//! MAE across settings.

use gradlab::attack::*;
use gradlab::corpus::mae;
use gradlab::ctc::LabelSeq;
use gradlab::model::{
    gradient_view, init_model, loss_and_full_grad, loss_and_grad, FeatureMatrix, ModelConfig,
    ParamVector,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn init_features(frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    Array2::from_shape_fn((frames, dim), |_| rng.gen_range(-1.0..1.0))
}

fn main() {
    let cfg = ModelConfig::feed_forward(2, vec![], 2);
    let params = init_model(&cfg, 7).unwrap();
    let y = LabelSeq::new(vec![0]);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x_true = init_features(2, 2, &mut rng);
    let (_, target) = loss_and_grad(&params, &cfg, &x_true, &y, None).unwrap();

    println!("--- single-sample tiny instance ---");
    for &(k, step) in &[(8usize, 0.5f64), (8, 0.25), (8, 0.125), (16, 0.125), (4, 0.125)] {
        let mut p =
            AttackProblem::new(target.clone(), y.clone(), 2, params.clone(), cfg.clone());
        p.init_seed = 1;
        p.schedule.samplings_k = k;
        p.schedule.initial_step = step;
        p.schedule.terminal_step = step / 8.0;
        let start = std::time::Instant::now();
        let (x, trace) = hfgm_reconstruct(&p, Some(&x_true)).unwrap();
        println!(
            "k={k} step={step}: D={:.3e} mae={:.4} iters={} time={:?}",
            trace.final_objective().unwrap(),
            mae(&x, &x_true).unwrap(),
            trace.points.last().unwrap().iteration,
            start.elapsed()
        );
    }

    println!("--- batch B=2 ---");
    let samples = vec![
        BatchSample { transcript: LabelSeq::new(vec![0]), frames: 2 },
        BatchSample { transcript: LabelSeq::new(vec![1]), frames: 2 },
    ];
    let mut rng2 = ChaCha8Rng::seed_from_u64(17);
    let truths: Vec<FeatureMatrix> =
        samples.iter().map(|s| init_features(s.frames, 2, &mut rng2)).collect();
    let grads: Vec<ParamVector> = samples
        .iter()
        .zip(&truths)
        .map(|(s, x)| loss_and_full_grad(&params, &cfg, x, &s.transcript, None).unwrap().1)
        .collect();
    let btarget = gradient_view(&average_gradients(&grads).unwrap(), &cfg);
    for &(k, step) in &[(8usize, 0.5f64), (16, 0.5), (16, 0.25)] {
        let bp = BatchAttackProblem {
            target: btarget.clone(),
            samples: samples.clone(),
            params: params.clone(),
            config: cfg.clone(),
            distance: DistanceKind::Cosine,
            schedule: ScheduleConfig {
                samplings_k: k,
                initial_step: step,
                terminal_step: step / 8.0,
                ..ScheduleConfig::default()
            },
            init_seed: 2,
            guarded: false,
        };
        let start = std::time::Instant::now();
        let (xs, trace) = hfgm_batch(&bp, Some(&truths)).unwrap();
        let maes: Vec<f64> =
            xs.iter().zip(&truths).map(|(x, t)| mae(x, t).unwrap()).collect();
        println!(
            "k={k} step={step}: D={:.3e} maes={maes:.4?} time={:?}",
            trace.final_objective().unwrap(),
            start.elapsed()
        );
    }

    println!("--- batch B=2, corpus-style instance ---");
    let corpus =
        gradlab::corpus::generate_corpus(&gradlab::corpus::CorpusConfig::default()).unwrap();
    let ccfg = ModelConfig::feed_forward(
        corpus.config.feature_dim,
        vec![64],
        corpus.config.alphabet_size,
    );
    let cparams = init_model(&ccfg, 7).unwrap();
    let cutts: Vec<_> = corpus.utterances.iter().take(2).collect();
    let csamples: Vec<BatchSample> = cutts
        .iter()
        .map(|u| BatchSample { transcript: u.transcript.clone(), frames: u.frames() })
        .collect();
    let ctruths: Vec<FeatureMatrix> = cutts.iter().map(|u| u.features.clone()).collect();
    let cgrads: Vec<ParamVector> = cutts
        .iter()
        .map(|u| {
            loss_and_full_grad(&cparams, &ccfg, &u.features, &u.transcript, None).unwrap().1
        })
        .collect();
    let ctarget = gradient_view(&average_gradients(&cgrads).unwrap(), &ccfg);
    for &(k, step) in &[(16usize, 0.125f64), (16, 0.25), (32, 0.125)] {
        let bp = BatchAttackProblem {
            target: ctarget.clone(),
            samples: csamples.clone(),
            params: cparams.clone(),
            config: ccfg.clone(),
            distance: DistanceKind::Cosine,
            schedule: ScheduleConfig {
                samplings_k: k,
                initial_step: step,
                terminal_step: step / 8.0,
                ..ScheduleConfig::default()
            },
            init_seed: 2,
            guarded: false,
        };
        let start = std::time::Instant::now();
        let (xs, trace) = hfgm_batch(&bp, Some(&ctruths)).unwrap();
        let maes: Vec<f64> =
            xs.iter().zip(&ctruths).map(|(x, t)| mae(x, t).unwrap()).collect();
        println!(
            "k={k} step={step}: D={:.3e} maes={maes:.4?} time={:?}",
            trace.final_objective().unwrap(),
            start.elapsed()
        );
    }

    println!("--- multistep C=2 ---");
    let gamma = 1e-5;
    let delta = multistep_delta(&params, &cfg, &x_true, &y, 2, gamma).unwrap();
    for &(k, step) in &[(8usize, 0.25f64), (8, 0.125), (16, 0.125)] {
        let mp = MultiStepProblem {
            target: gradient_view(&delta, &cfg),
            transcript: y.clone(),
            frames: 2,
            params: params.clone(),
            config: cfg.clone(),
            steps: 2,
            local_lr: gamma,
            distance: DistanceKind::Cosine,
            schedule: ScheduleConfig {
                samplings_k: k,
                initial_step: step,
                terminal_step: step / 8.0,
                ..ScheduleConfig::multistep()
            },
            init_seed: 4,
            guarded: false,
        };
        let start = std::time::Instant::now();
        let (x, trace) = hfgm_multistep(&mp, Some(&x_true)).unwrap();
        println!(
            "k={k} step={step}: D={:.3e} mae={:.4} time={:?}",
            trace.final_objective().unwrap(),
            mae(&x, &x_true).unwrap(),
            start.elapsed()
        );
    }
}
