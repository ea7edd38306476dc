//! Gaussian actor, value critic and the PPO update.
//!
//! The actor reads only the policy input `p`; the critic reads only the
//! privileged state `s`. Both share one Adam optimizer.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::morphology::NUM_JOINTS;
use crate::nn::{cast, clip_grad_norm, Adam, Mlp, Parameters, Scalar, TensorRef};
use crate::observation::{POLICY_DIM, PRIVILEGED_DIM};

pub const ACTION_DIM: usize = NUM_JOINTS;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Scale applied to the clamped action before it is added to the initial pose.
    pub action_scale: f64,
    /// Pre-scale action clamp.
    pub action_clip: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![512, 256, 128],
            critic_hidden: vec![512, 256, 128],
            init_log_std: 0.0,
            action_scale: 0.5,
            action_clip: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_ratio: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub learning_rate: f64,
    /// Target KL for the adaptive learning rate; 0 disables adaptation.
    pub desired_kl: f64,
    pub min_learning_rate: f64,
    pub max_learning_rate: f64,
    /// Remaining epochs are skipped once the KL estimate exceeds this.
    pub kl_abort: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_ratio: 0.2,
            epochs: 5,
            minibatches: 4,
            learning_rate: 3e-4,
            desired_kl: 0.01,
            min_learning_rate: 1e-5,
            max_learning_rate: 1e-3,
            kl_abort: 0.05,
            entropy_coef: 0.005,
            value_coef: 1.0,
            max_grad_norm: 1.0,
        }
    }
}

/// `q̊ + scale · clamp(a, ±clip)`, then clamped to the joint limits.
pub fn compose_target(
    action: &[f64],
    q_init: &[f64; NUM_JOINTS],
    cfg: &PolicyConfig,
    lower: &[f64; NUM_JOINTS],
    upper: &[f64; NUM_JOINTS],
) -> [f64; NUM_JOINTS] {
    std::array::from_fn(|j| {
        let a = action[j].clamp(-cfg.action_clip, cfg.action_clip);
        (q_init[j] + cfg.action_scale * a).clamp(lower[j], upper[j])
    })
}

/// Diagonal Gaussian log-density of `a`.
pub fn gaussian_log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
}

/// Generalized advantage estimation over one time-ordered sequence.
/// `dones[t]` marks that the episode ended after step `t`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "sequences must be time-aligned");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales `adv` to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic<T> {
    pub actor: Mlp<T>,
    pub log_std: Array1<T>,
    pub critic: Mlp<T>,
}

impl<T: Scalar> ActorCritic<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &PolicyConfig, rng: &mut R) -> Self {
        Self::with_dims(cfg, POLICY_DIM, PRIVILEGED_DIM, rng)
    }

    pub fn with_dims<R: Rng + ?Sized>(cfg: &PolicyConfig, p_dim: usize, s_dim: usize, rng: &mut R) -> Self {
        let mut a = vec![p_dim];
        a.extend(&cfg.actor_hidden);
        a.push(ACTION_DIM);
        let mut c = vec![s_dim];
        c.extend(&cfg.critic_hidden);
        c.push(1);
        Self {
            actor: Mlp::new(&a, 0.01, rng),
            log_std: Array1::from_elem(ACTION_DIM, cast(cfg.init_log_std)),
            critic: Mlp::new(&c, 1.0, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            actor: self.actor.zeros_like(),
            log_std: Array1::zeros(self.log_std.len()),
            critic: self.critic.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ActorCritic<U> {
        ActorCritic {
            actor: self.actor.cast(),
            log_std: self.log_std.mapv(|x| cast(x.to_f64().unwrap())),
            critic: self.critic.cast(),
        }
    }

    /// Action means for a batch of policy inputs.
    pub fn act_mean(&self, p: ArrayView2<'_, T>) -> Array2<T> {
        self.actor.forward(p)
    }

    pub fn value(&self, s: ArrayView2<'_, T>) -> Array1<T> {
        self.critic.forward(s).column(0).to_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite() && self.log_std.iter().all(|x| x.is_finite())
    }
}

impl<T: Scalar> Parameters<T> for ActorCritic<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut t = self.actor.prefixed_tensors("actor");
        t.push(TensorRef {
            name: "actor.log_std".into(),
            shape: vec![self.log_std.len()],
            data: self.log_std.as_slice().expect("standard layout"),
        });
        t.extend(self.critic.prefixed_tensors("critic"));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut t = self.actor.slices_mut();
        t.push(self.log_std.as_slice_mut().expect("standard layout"));
        t.extend(self.critic.slices_mut());
        t
    }
}

/// One minibatch of PPO training data.
#[derive(Debug, Clone, Copy)]
pub struct PpoBatch<'a, T> {
    pub p: ArrayView2<'a, T>,
    pub s: ArrayView2<'a, T>,
    pub actions: ArrayView2<'a, T>,
    pub old_log_prob: ArrayView1<'a, T>,
    pub advantages: ArrayView1<'a, T>,
    pub returns: ArrayView1<'a, T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoLosses {
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    /// `mean((ρ − 1) − ln ρ)`, an estimate of KL(old ‖ new).
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub total: f64,
}

/// Total PPO loss `surrogate + c_v·value − c_e·entropy` and its gradient.
pub fn ppo_loss_and_grad<T: Scalar>(
    model: &ActorCritic<T>,
    batch: &PpoBatch<'_, T>,
    cfg: &PpoConfig,
) -> (PpoLosses, ActorCritic<T>) {
    let b = batch.p.nrows();
    let bf = b as f64;
    let f = |x: T| x.to_f64().unwrap();
    let mut grads = model.zeros_like();

    let (mean, actor_cache) = model.actor.forward_cached(batch.p);
    let log_std: Vec<f64> = model.log_std.iter().map(|&x| f(x)).collect();
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
    let mut d_mean = Array2::<T>::zeros(mean.raw_dim());
    let mut d_log_std = vec![0.0; ACTION_DIM];
    let (lo, hi) = (1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0usize;
    for i in 0..b {
        let mut logp = 0.0;
        for j in 0..ACTION_DIM {
            let d = f(batch.actions[[i, j]]) - f(mean[[i, j]]);
            logp += -0.5 * d * d * inv_var[j] - log_std[j] - 0.5 * LN_2PI;
        }
        let log_ratio = logp - f(batch.old_log_prob[i]);
        let ratio = log_ratio.exp();
        let adv = f(batch.advantages[i]);
        let s1 = ratio * adv;
        let s2 = ratio.clamp(lo, hi) * adv;
        kl += (ratio - 1.0) - log_ratio;
        if !(lo..=hi).contains(&ratio) {
            clipped += 1;
        }
        // d(−min(s1, s2))/dρ, averaged over the batch.
        let d_ratio = if s1 <= s2 {
            surrogate -= s1;
            -adv
        } else {
            surrogate -= s2;
            if (lo..=hi).contains(&ratio) {
                -adv
            } else {
                0.0
            }
        } / bf;
        let d_logp = d_ratio * ratio;
        if d_logp != 0.0 {
            for j in 0..ACTION_DIM {
                let d = f(batch.actions[[i, j]]) - f(mean[[i, j]]);
                d_mean[[i, j]] = cast(d_logp * d * inv_var[j]);
                d_log_std[j] += d_logp * (d * d * inv_var[j] - 1.0);
            }
        }
    }
    surrogate /= bf;
    let entropy = gaussian_entropy(&log_std);
    for g in d_log_std.iter_mut() {
        *g -= cfg.entropy_coef;
    }
    model.actor.backward(&actor_cache, d_mean, &mut grads.actor);
    grads.log_std = Array1::from_iter(d_log_std.iter().map(|&g| cast(g)));

    let (values, critic_cache) = model.critic.forward_cached(batch.s);
    let mut value = 0.0;
    let mut d_value = Array2::<T>::zeros(values.raw_dim());
    for i in 0..b {
        let e = f(values[[i, 0]]) - f(batch.returns[i]);
        value += e * e;
        d_value[[i, 0]] = cast(2.0 * cfg.value_coef * e / bf);
    }
    value /= bf;
    model.critic.backward(&critic_cache, d_value, &mut grads.critic);

    let losses = PpoLosses {
        surrogate,
        value,
        entropy,
        approx_kl: kl / bf,
        clip_fraction: clipped as f64 / bf,
        total: surrogate + cfg.value_coef * value - cfg.entropy_coef * entropy,
    };
    (losses, grads)
}

/// Full rollout data for one PPO update, single precision.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub p: Array2<f32>,
    pub s: Array2<f32>,
    pub actions: Array2<f32>,
    pub log_prob: Array1<f32>,
    pub values: Array1<f32>,
    pub advantages: Array1<f32>,
    pub returns: Array1<f32>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.p.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PpoStats {
    /// Mean losses of each completed epoch.
    pub epochs: Vec<PpoLosses>,
    pub aborted: bool,
    pub learning_rate: f64,
}

impl PpoStats {
    pub fn mean(&self) -> PpoLosses {
        let n = self.epochs.len().max(1) as f64;
        let mut m = PpoLosses::default();
        for e in &self.epochs {
            m.surrogate += e.surrogate / n;
            m.value += e.value / n;
            m.entropy += e.entropy / n;
            m.approx_kl += e.approx_kl / n;
            m.clip_fraction += e.clip_fraction / n;
            m.total += e.total / n;
        }
        m
    }
}

/// Runs the configured epochs of minibatch PPO on `batch` (advantages
/// already normalized). The Adam learning rate adapts to the KL estimate.
/// `after_epoch` receives the row indices of each completed epoch's first
/// minibatch.
pub fn ppo_update<R: Rng + ?Sized>(
    model: &mut ActorCritic<f32>,
    adam: &mut Adam<f32>,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut R,
    mut after_epoch: impl FnMut(&[usize]),
) -> PpoStats {
    let n = batch.len();
    let mb = cfg.minibatches.max(1);
    let mb_size = n / mb;
    let mut stats = PpoStats::default();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch = PpoLosses::default();
        let mut done = 0usize;
        for k in 0..mb {
            let idx = &order[k * mb_size..(k + 1) * mb_size];
            let p = batch.p.select(Axis(0), idx);
            let s = batch.s.select(Axis(0), idx);
            let actions = batch.actions.select(Axis(0), idx);
            let old = batch.log_prob.select(Axis(0), idx);
            let adv = batch.advantages.select(Axis(0), idx);
            let ret = batch.returns.select(Axis(0), idx);
            let view = PpoBatch {
                p: p.view(),
                s: s.view(),
                actions: actions.view(),
                old_log_prob: old.view(),
                advantages: adv.view(),
                returns: ret.view(),
            };
            let (losses, grads) = ppo_loss_and_grad(model, &view, cfg);
            if cfg.kl_abort > 0.0 && losses.approx_kl > cfg.kl_abort {
                stats.aborted = true;
            } else {
                // Actor and critic share no parameters; clip their gradients separately.
                let mut g = grads.to_flat();
                let split = model.actor.num_params() + model.log_std.len();
                let (ga, gc) = g.split_at_mut(split);
                clip_grad_norm(ga, cfg.max_grad_norm);
                clip_grad_norm(gc, cfg.max_grad_norm);
                adam.update(model, &g);
            }
            epoch.surrogate += losses.surrogate;
            epoch.value += losses.value;
            epoch.entropy += losses.entropy;
            epoch.approx_kl += losses.approx_kl;
            epoch.clip_fraction += losses.clip_fraction;
            epoch.total += losses.total;
            done += 1;
            if stats.aborted {
                break;
            }
        }
        let d = done as f64;
        let epoch = PpoLosses {
            surrogate: epoch.surrogate / d,
            value: epoch.value / d,
            entropy: epoch.entropy / d,
            approx_kl: epoch.approx_kl / d,
            clip_fraction: epoch.clip_fraction / d,
            total: epoch.total / d,
        };
        // The step size follows the epoch's mean divergence from the rollout policy.
        if cfg.desired_kl > 0.0 {
            if epoch.approx_kl > 2.0 * cfg.desired_kl {
                adam.lr = (adam.lr / 1.5).max(cfg.min_learning_rate);
            } else if epoch.approx_kl < 0.5 * cfg.desired_kl {
                adam.lr = (adam.lr * 1.5).min(cfg.max_learning_rate);
            }
        }
        stats.epochs.push(epoch);
        if stats.aborted {
            break;
        }
        after_epoch(&order[..mb_size]);
    }
    stats.learning_rate = adam.lr;
    stats
}

/// Samples `mean + σ·u` rows and their log-probabilities.
pub fn sample_actions<R: Rng + ?Sized>(
    mean: &Array2<f32>,
    log_std: &Array1<f32>,
    rng: &mut R,
) -> (Array2<f32>, Array1<f32>) {
    let b = mean.nrows();
    let mut actions = mean.clone();
    let mut logp = Array1::zeros(b);
    for i in 0..b {
        let mut lp = 0.0f64;
        for j in 0..ACTION_DIM {
            let u: f64 = rng.sample(rand_distr::StandardNormal);
            let ls = log_std[j] as f64;
            let a = mean[[i, j]] as f64 + ls.exp() * u;
            actions[[i, j]] = a as f32;
            let d = actions[[i, j]] as f64 - mean[[i, j]] as f64;
            lp += -0.5 * d * d * (-2.0 * ls).exp() - ls - 0.5 * LN_2PI;
        }
        logp[i] = lp as f32;
    }
    (actions, logp)
}

/// Rows `range` of a 2-D array, as an owned copy.
pub fn rows<T: Clone>(x: &Array2<T>, range: std::ops::Range<usize>) -> Array2<T> {
    x.slice(s![range, ..]).to_owned()
}
