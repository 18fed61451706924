//! Membership inference against a trained model.
//!
//! Shadow-model attack: several stand-in models are trained on random halves
//! of an attacker-owned pool, yielding labeled (member / non-member)
//! prediction behavior. A logistic scorer fitted on per-sample features
//! (cross-entropy loss, top softmax probability, softmax entropy) then judges
//! whether the target model saw a given sample during training. Balanced
//! accuracy near one half means the target does not leak membership.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, LayeredModel, ModelSpec};
use crate::profiler::train_centralized;
use crate::protocol::TrainCfg;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MiaCfg {
    pub shadow_count: usize,
    /// Training epochs for each shadow model.
    pub epochs: usize,
    pub train: TrainCfg,
    /// Gradient steps when fitting the logistic scorer.
    pub attack_steps: usize,
    pub attack_lr: f64,
}

impl Default for MiaCfg {
    fn default() -> Self {
        MiaCfg {
            shadow_count: 4,
            epochs: 40,
            train: TrainCfg { lr: 0.2, ..TrainCfg::default() },
            attack_steps: 400,
            attack_lr: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MiaResult {
    /// Mean of true-positive and true-negative rates at the 0.5 cut.
    pub balanced_accuracy: f64,
    pub member_mean_score: f64,
    pub non_member_mean_score: f64,
}

/// Loss, top softmax probability, and softmax entropy of one sample.
pub fn membership_features(model: &LayeredModel, sample: &Sample) -> Result<[f64; 3]> {
    let (x, y) = sample;
    let logits = model.infer(&Tensor::stack(&[x])?)?;
    let probs = softmax_rows(&logits)?;
    let n_class = probs.shape[1];
    if *y >= n_class {
        return Err(Error::InvalidArgument(format!("label {y} outside {n_class} classes")));
    }
    let row = &probs.data[..n_class];
    let p_true = row[*y].max(1e-12);
    let maxp = row.iter().cloned().fold(f64::MIN, f64::max);
    let entropy: f64 = -row.iter().map(|&p| p * p.max(1e-12).ln()).sum::<f64>();
    Ok([-p_true.ln(), maxp, entropy])
}

struct Logistic {
    w: [f64; 3],
    b: f64,
    mean: [f64; 3],
    std: [f64; 3],
}

impl Logistic {
    fn fit(features: &[[f64; 3]], labels: &[bool], steps: usize, lr: f64) -> Logistic {
        let n = features.len() as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for f in features {
            for k in 0..3 {
                mean[k] += f[k] / n;
            }
        }
        for f in features {
            for k in 0..3 {
                std[k] += (f[k] - mean[k]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(1e-9);
        }
        let mut model = Logistic { w: [0.0; 3], b: 0.0, mean, std };
        for _ in 0..steps {
            let mut gw = [0.0; 3];
            let mut gb = 0.0;
            for (f, &y) in features.iter().zip(labels) {
                let err = model.score(f) - if y { 1.0 } else { 0.0 };
                let z = model.standardize(f);
                for k in 0..3 {
                    gw[k] += err * z[k] / n;
                }
                gb += err / n;
            }
            for k in 0..3 {
                model.w[k] -= lr * gw[k];
            }
            model.b -= lr * gb;
        }
        model
    }

    fn standardize(&self, f: &[f64; 3]) -> [f64; 3] {
        [
            (f[0] - self.mean[0]) / self.std[0],
            (f[1] - self.mean[1]) / self.std[1],
            (f[2] - self.mean[2]) / self.std[2],
        ]
    }

    /// Membership probability in (0, 1).
    fn score(&self, f: &[f64; 3]) -> f64 {
        let z = self.standardize(f);
        let logit = self.w[0] * z[0] + self.w[1] * z[1] + self.w[2] * z[2] + self.b;
        1.0 / (1.0 + (-logit).exp())
    }
}

/// Runs the shadow-model attack against `target`. `members` were in the
/// target's training data, `non_members` were not; `shadow_pool` is data the
/// attacker controls, split per shadow into a training half (member
/// examples) and a held-out half (non-member examples).
pub fn membership_inference(
    target: &LayeredModel,
    members: &[Sample],
    non_members: &[Sample],
    shadow_spec: &ModelSpec,
    shadow_pool: &[Sample],
    cfg: &MiaCfg,
    rng: &RngStream,
) -> Result<MiaResult> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::InvalidArgument("membership inference needs both cohorts".into()));
    }
    if cfg.shadow_count == 0 || shadow_pool.len() < 4 {
        return Err(Error::InvalidArgument(
            "membership inference needs at least one shadow and 4 pool samples".into(),
        ));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..cfg.shadow_count {
        let mut idxs: Vec<usize> = (0..shadow_pool.len()).collect();
        rng.child("shadow-split").child_idx(i as u64).shuffle(&mut idxs);
        let half = idxs.len() / 2;
        let train_set: Vec<Sample> = idxs[..half].iter().map(|&j| shadow_pool[j].clone()).collect();
        let mut shadow = shadow_spec.build(&mut rng.child("shadow-init").child_idx(i as u64))?;
        train_centralized(
            &mut shadow,
            &train_set,
            cfg.epochs,
            &cfg.train,
            &rng.child("shadow-train").child_idx(i as u64),
        )?;
        for (pos, &j) in idxs.iter().enumerate() {
            features.push(membership_features(&shadow, &shadow_pool[j])?);
            labels.push(pos < half);
        }
    }
    let scorer = Logistic::fit(&features, &labels, cfg.attack_steps, cfg.attack_lr);

    let score_all = |set: &[Sample]| -> Result<Vec<f64>> {
        set.iter().map(|s| Ok(scorer.score(&membership_features(target, s)?))).collect()
    };
    let member_scores = score_all(members)?;
    let non_member_scores = score_all(non_members)?;
    let tpr = member_scores.iter().filter(|&&s| s > 0.5).count() as f64 / member_scores.len() as f64;
    let tnr =
        non_member_scores.iter().filter(|&&s| s <= 0.5).count() as f64 / non_member_scores.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MiaResult {
        balanced_accuracy: 0.5 * (tpr + tnr),
        member_mean_score: mean(&member_scores),
        non_member_mean_score: mean(&non_member_scores),
    })
}
