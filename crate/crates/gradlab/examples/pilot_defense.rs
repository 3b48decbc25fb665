//! Pilot runs for the defense/ablation acceptance thresholds: DP noise
//! ordering, dropout top-1, wrong-transcript distance factor and
//! wrong-length orderings.

use gradlab::defense::DefenseConfig;
use gradlab::experiment::{prepare, run_with_env, AttackMode, ExperimentConfig};
use gradlab::model::{init_model, loss_and_full_grad};

fn base_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_default();
    cfg.corpus.utterances_per_speaker = 8;
    cfg.schedule.halving_window = 600;
    cfg.max_victims = 16;
    cfg
}

fn main() {
    let cfg = base_cfg();
    let env = prepare(&cfg).unwrap();

    // typical full-gradient norm, to pick a desk-scale clip bound
    let params = init_model(&cfg.model, cfg.model_seed).unwrap();
    let mut norms: Vec<f64> = Vec::new();
    for u in env.corpus.utterances.iter().take(8) {
        let (_, g) = loss_and_full_grad(&params, &cfg.model, &u.features, &u.transcript, None)
            .unwrap();
        norms.push(g.l2_norm());
    }
    println!("gradient norms: {norms:.4?}");

    println!("--- DP-SGD noise ordering (median MAE over seeds) ---");
    let mut small = cfg.clone();
    small.max_victims = 2;
    let small_env = prepare(&small).unwrap();
    for &sigma in &[0.0, 1e-4, 5e-4, 1e-3] {
        let mut maes = Vec::new();
        let start = std::time::Instant::now();
        for seed in 0..10u64 {
            let mut c = small.clone();
            c.attack_seed = 100 + seed;
            if sigma > 0.0 {
                c.defense = DefenseConfig::DpSgd { clip_norm: 100.0, noise_scale: sigma, seed };
            }
            let report = run_with_env(&c, &small_env).unwrap();
            for r in &report.rows {
                maes.push(r.mae.unwrap());
            }
        }
        maes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "sigma={sigma}: median mae={:.4} min={:.4} max={:.4} (n={}) time={:?}",
            maes[maes.len() / 2],
            maes[0],
            maes[maes.len() - 1],
            maes.len(),
            start.elapsed()
        );
    }

    println!("--- dropout top-1 ---");
    for &rate in &[0.0, 0.1, 0.2] {
        let mut c = cfg.clone();
        if rate > 0.0 {
            c.defense = DefenseConfig::Dropout { rate, seed: 3 };
        }
        let start = std::time::Instant::now();
        let report = run_with_env(&c, &env).unwrap();
        println!(
            "rate={rate}: top1={:.3} top5={:.3} mrr={:.3} mae={:.4} time={:?}",
            report.aggregate.top1,
            report.aggregate.top5,
            report.aggregate.mrr,
            report.aggregate.mean_mae,
            start.elapsed()
        );
    }

    println!("--- wrong transcript distance factor ---");
    let mut matched = cfg.clone();
    matched.max_victims = 6;
    let small6 = prepare(&matched).unwrap();
    let m_report = run_with_env(&matched, &small6).unwrap();
    let mut wrong = matched.clone();
    wrong.mode = AttackMode::WrongTranscript;
    let w_report = run_with_env(&wrong, &small6).unwrap();
    for (m, w) in m_report.rows.iter().zip(&w_report.rows) {
        println!(
            "utt {}: matched D={:.3e} wrong D={:.3e} ratio={:.1}",
            m.utterance_id,
            m.final_distance.unwrap(),
            w.final_distance.unwrap(),
            w.final_distance.unwrap() / m.final_distance.unwrap()
        );
    }

    println!("--- wrong length ---");
    for (label, mode) in [
        ("+1", AttackMode::WrongLength { offset: 1, factor: 1.0 }),
        ("-1", AttackMode::WrongLength { offset: -1, factor: 1.0 }),
        ("x2", AttackMode::WrongLength { offset: 0, factor: 2.0 }),
        ("/2", AttackMode::WrongLength { offset: 0, factor: 0.5 }),
    ] {
        let mut c = cfg.clone();
        c.mode = mode;
        let start = std::time::Instant::now();
        let report = run_with_env(&c, &env).unwrap();
        println!(
            "{label}: top1={:.3} top5={:.3} mrr={:.3} mae={:.4} failed={} time={:?}",
            report.aggregate.top1,
            report.aggregate.top5,
            report.aggregate.mrr,
            report.aggregate.mean_mae,
            report.aggregate.failed,
            start.elapsed()
        );
    }
}
