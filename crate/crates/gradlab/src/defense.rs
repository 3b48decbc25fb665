//! Gradient defenses applied on the victim's side before a gradient is
//! observed: per-sample L2 clipping with Gaussian noise (DP-SGD style),
//! and dropout, which corrupts the gradient through masks the attacker
//! cannot reproduce.

use crate::ctc::LabelSeq;
use crate::error::{GradLabError, Result};
use crate::model::{
    loss_and_full_grad, sgd_step, splitmix, DropoutSpec, FeatureMatrix, ModelConfig, ParamVector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Clip-and-noise configuration: gradients are clipped to L2 norm
/// `clip_norm` and perturbed with zero-mean Gaussian noise of standard
/// deviation `noise_scale * clip_norm` per coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(GradLabError::InvalidConfig(format!(
                "clip_norm {} must be positive",
                self.clip_norm
            )));
        }
        if self.noise_scale < 0.0 || !self.noise_scale.is_finite() {
            return Err(GradLabError::InvalidConfig(format!(
                "noise_scale {} must be finite and >= 0",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// g / max(1, ||g|| / C): direction preserved, output norm min(||g||, C).
pub fn clip_l2(grad: &ParamVector, clip_norm: f64) -> ParamVector {
    let denom = (grad.l2_norm() / clip_norm).max(1.0);
    let mut out = grad.clone();
    if denom > 1.0 {
        for layer in &mut out.layers {
            layer.for_each_mut(|v| *v /= denom);
        }
    }
    out
}

fn add_noise(grad: &mut ParamVector, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut grad.layers {
        layer.for_each_mut(|v| {
            let z: f64 = rng.sample(StandardNormal);
            *v += z * std;
        });
    }
}

/// Clip, then add i.i.d. N(0, (noise_scale * clip_norm)^2) per coordinate
/// from the stream derived as splitmix(cfg.seed, stream); per-sample
/// streams keep parallel noising reproducible.
pub fn dp_transform_stream(
    grad: &ParamVector,
    cfg: &DpSgdConfig,
    stream: u64,
) -> Result<ParamVector> {
    cfg.validate()?;
    let mut out = clip_l2(grad, cfg.clip_norm);
    if cfg.noise_scale > 0.0 {
        add_noise(&mut out, cfg.noise_scale * cfg.clip_norm, splitmix(cfg.seed, stream));
    }
    Ok(out)
}

/// [`dp_transform_stream`] on the default stream.
pub fn dp_transform(grad: &ParamVector, cfg: &DpSgdConfig) -> Result<ParamVector> {
    dp_transform_stream(grad, cfg, 0)
}

/// One DP-SGD step: per-sample gradients, each clipped and noised on its
/// own derived stream, averaged and applied.
pub fn dp_sgd_train_step(
    params: &ParamVector,
    model: &ModelConfig,
    batch: &[(FeatureMatrix, LabelSeq)],
    cfg: &DpSgdConfig,
    lr: f64,
) -> Result<ParamVector> {
    if batch.is_empty() {
        return Err(GradLabError::InvalidConfig("DP-SGD batch must be nonempty".into()));
    }
    cfg.validate()?;
    let noised: Vec<ParamVector> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let (_, grad) = loss_and_full_grad(params, model, x, y, None)?;
            dp_transform_stream(&grad, cfg, i as u64)
        })
        .collect::<Result<_>>()?;
    let avg = crate::attack::average_gradients(&noised)?;
    sgd_step(params, &avg, lr)
}

/// Defense applied to the victim's gradient before transmission.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    None,
    DpSgd { clip_norm: f64, noise_scale: f64, seed: u64 },
    Dropout { rate: f64, seed: u64 },
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::DpSgd { clip_norm, noise_scale, seed } => {
                DpSgdConfig { clip_norm: *clip_norm, noise_scale: *noise_scale, seed: *seed }
                    .validate()
            }
            DefenseConfig::Dropout { rate, seed } => {
                DropoutSpec { rate: *rate, seed: *seed }.validate()
            }
        }
    }

    /// The full gradient the victim transmits for one sample: computed with
    /// dropout masks under the dropout defense, or clipped and noised under
    /// DP-SGD, on a per-sample stream derived from `sample_index`.
    pub fn victim_gradient(
        &self,
        params: &ParamVector,
        model: &ModelConfig,
        x: &FeatureMatrix,
        y: &LabelSeq,
        sample_index: u64,
    ) -> Result<ParamVector> {
        match self {
            DefenseConfig::None => Ok(loss_and_full_grad(params, model, x, y, None)?.1),
            DefenseConfig::DpSgd { clip_norm, noise_scale, seed } => {
                let (_, grad) = loss_and_full_grad(params, model, x, y, None)?;
                let cfg =
                    DpSgdConfig { clip_norm: *clip_norm, noise_scale: *noise_scale, seed: *seed };
                dp_transform_stream(&grad, &cfg, sample_index)
            }
            DefenseConfig::Dropout { rate, seed } => {
                let spec = DropoutSpec { rate: *rate, seed: splitmix(*seed, sample_index) };
                Ok(loss_and_full_grad(params, model, x, y, Some(&spec))?.1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{grad_distance, AttackProblem, DistanceKind};
    use crate::model::{gradient_view, init_model};
    use ndarray::Array2;
    use rand::SeedableRng;

    fn cfg_and_sample() -> (ModelConfig, ParamVector, FeatureMatrix, LabelSeq) {
        let model = ModelConfig::feed_forward(3, vec![6], 2);
        let params = init_model(&model, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        (model, params, x, LabelSeq::new(vec![0, 1]))
    }

    fn gradient() -> (ModelConfig, ParamVector, ParamVector) {
        let (model, params, x, y) = cfg_and_sample();
        let (_, g) = loss_and_full_grad(&params, &model, &x, &y, None).unwrap();
        (model, params, g)
    }

    #[test]
    fn clip_arithmetic() {
        let (_, _, mut g) = gradient();
        // rescale so the norm is exactly 200
        let n = g.l2_norm();
        g.scale(200.0 / n);
        let clipped = clip_l2(&g, 100.0);
        assert!((clipped.l2_norm() - 100.0).abs() < 1e-9);
        // direction preserved: clipped = g / 2
        for (a, b) in clipped.flatten().iter().zip(g.flatten().iter()) {
            assert!((a * 2.0 - b).abs() < 1e-12);
        }
        // under the bound: unchanged
        g.scale(50.0 / g.l2_norm());
        assert_eq!(clip_l2(&g, 100.0).flatten(), g.flatten());
        // zero in, zero out
        let z = g.zeros_like();
        assert_eq!(clip_l2(&z, 100.0).flatten(), z.flatten());
    }

    #[test]
    fn clip_norm_never_exceeds_bound() {
        let (_, _, g) = gradient();
        for &c in &[1e-6, 1e-3, 0.1, 0.5, 1.0] {
            let n = clip_l2(&g, c).l2_norm();
            assert!(n <= c * (1.0 + 1e-15), "clip to {c} produced norm {n}");
        }
    }

    #[test]
    fn sigma_zero_equals_clip() {
        let (_, _, g) = gradient();
        let cfg = DpSgdConfig { clip_norm: 0.01, noise_scale: 0.0, seed: 9 };
        assert_eq!(dp_transform(&g, &cfg).unwrap().flatten(), clip_l2(&g, 0.01).flatten());
    }

    #[test]
    fn same_seed_identical() {
        let (_, _, g) = gradient();
        let cfg = DpSgdConfig { clip_norm: 100.0, noise_scale: 1e-3, seed: 4 };
        let a = dp_transform(&g, &cfg).unwrap();
        let b = dp_transform(&g, &cfg).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        // a different stream gives different noise
        let c = dp_transform_stream(&g, &cfg, 1).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn noise_moments() {
        // one transform of a 100k-coordinate gradient gives 1e5 i.i.d.
        // noise draws at std = noise_scale * clip_norm = 0.1
        let n = 100_000;
        let g = ParamVector {
            layers: vec![crate::model::LayerParams::Dense {
                w: Array2::from_elem((1, n), 1e-4),
                b: ndarray::Array1::zeros(1),
            }],
        };
        let cfg = DpSgdConfig { clip_norm: 100.0, noise_scale: 1e-3, seed: 7 };
        let out = dp_transform(&g, &cfg).unwrap();
        let noise: Vec<f64> =
            out.flatten().iter().zip(g.flatten().iter()).map(|(a, b)| a - b).collect();
        let mean = noise.iter().sum::<f64>() / n as f64;
        let var = noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let sigma_mean = 0.1 / (n as f64).sqrt();
        assert!(mean.abs() < 4.0 * sigma_mean, "noise mean {mean}");
        let std = var.sqrt();
        assert!((std - 0.1).abs() < 0.002, "noise std {std}");
    }

    #[test]
    fn train_step_reduces_to_plain_sgd() {
        let (model, params, x, y) = cfg_and_sample();
        let cfg = DpSgdConfig { clip_norm: 1e9, noise_scale: 0.0, seed: 0 };
        let batch = vec![(x.clone(), y.clone())];
        let stepped = dp_sgd_train_step(&params, &model, &batch, &cfg, 0.1).unwrap();
        let (_, g) = loss_and_full_grad(&params, &model, &x, &y, None).unwrap();
        let plain = sgd_step(&params, &g, 0.1).unwrap();
        for (a, b) in stepped.flatten().iter().zip(plain.flatten().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_samples_match_single_sample_step() {
        let (model, params, x, y) = cfg_and_sample();
        let cfg = DpSgdConfig { clip_norm: 0.05, noise_scale: 0.0, seed: 0 };
        let single = dp_sgd_train_step(&params, &model, &[(x.clone(), y.clone())], &cfg, 0.1)
            .unwrap();
        let triple = dp_sgd_train_step(
            &params,
            &model,
            &vec![(x.clone(), y.clone()); 3],
            &cfg,
            0.1,
        )
        .unwrap();
        for (a, b) in single.flatten().iter().zip(triple.flatten().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_alone_leaves_cosine_distance_unchanged() {
        let (model, params, x, y) = cfg_and_sample();
        let (_, g) = loss_and_full_grad(&params, &model, &x, &y, None).unwrap();
        let norm = g.l2_norm();
        // clip bound below the norm so clipping actually rescales
        let clipped = clip_l2(&g, 0.25 * norm);
        let base = AttackProblem::new(
            gradient_view(&g, &model),
            y.clone(),
            x.nrows(),
            params.clone(),
            model.clone(),
        );
        let mut defended = base.clone();
        defended.target = gradient_view(&clipped, &model);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let cand = Array2::from_shape_fn((x.nrows(), 3), |_| rng.gen_range(-1.0..1.0));
            let d0 = grad_distance(&cand, &base).unwrap();
            let d1 = grad_distance(&cand, &defended).unwrap();
            assert!((d0 - d1).abs() < 1e-12);
        }
        // an exactly representable clip factor (1/2) gives bit equality
        let half = clip_l2(&g, 0.5 * norm);
        let mut exact = base.clone();
        exact.target = gradient_view(&half, &model);
        let cand = Array2::from_shape_fn((x.nrows(), 3), |_| rng.gen_range(-1.0..1.0));
        assert_eq!(grad_distance(&cand, &base).unwrap(), grad_distance(&cand, &exact).unwrap());
        assert!(matches!(base.distance, DistanceKind::Cosine));
    }

    #[test]
    fn dropout_defense_changes_victim_gradient() {
        let (model, params, x, y) = cfg_and_sample();
        let clean = DefenseConfig::None
            .victim_gradient(&params, &model, &x, &y, 0)
            .unwrap();
        let defended = DefenseConfig::Dropout { rate: 0.2, seed: 3 }
            .victim_gradient(&params, &model, &x, &y, 0)
            .unwrap();
        assert_ne!(clean.flatten(), defended.flatten());
        // per-sample streams differ, repeated calls agree
        let again = DefenseConfig::Dropout { rate: 0.2, seed: 3 }
            .victim_gradient(&params, &model, &x, &y, 0)
            .unwrap();
        assert_eq!(defended.flatten(), again.flatten());
        let other = DefenseConfig::Dropout { rate: 0.2, seed: 3 }
            .victim_gradient(&params, &model, &x, &y, 1)
            .unwrap();
        assert_ne!(defended.flatten(), other.flatten());
    }
}
