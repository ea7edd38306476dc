//! Trainable state shared by rollouts and evaluation: actor-critic,
//! predictor and the two observation normalizers.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::config::RunConfig;
use crate::env::Env;
use crate::mcp::{Ablation, Mcp, McpOutput};
use crate::observation::{Normalizer, HISTORY_DIM, OBS_DIM, POLICY_DIM, PRIVILEGED_DIM};
use crate::policy::ActorCritic;

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub policy: ActorCritic<f32>,
    pub mcp: Mcp<f32>,
    /// Statistics of `o`, applied frame-wise to the history and to `p`.
    pub obs_norm: Normalizer,
    pub priv_norm: Normalizer,
    pub ablation: Ablation,
}

/// Batched policy inputs for a set of environments.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Normalized histories, `N × 210`.
    pub history: Array2<f32>,
    pub mcp: McpOutput<f32>,
    /// `N × 75`.
    pub p: Array2<f32>,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Self {
        Self {
            policy: ActorCritic::new(&cfg.policy, rng),
            mcp: Mcp::new(&cfg.mcp, rng),
            obs_norm: Normalizer::new(OBS_DIM),
            priv_norm: Normalizer::new(PRIVILEGED_DIM),
            ablation: cfg.ablation,
        }
    }

    pub fn normalized_history(&self, env: &Env) -> Vec<f32> {
        let mut out = Vec::with_capacity(HISTORY_DIM);
        let mut buf = [0.0; OBS_DIM];
        for frame in env.history.frames() {
            self.obs_norm.normalize_into(frame, &mut buf);
            out.extend(buf.iter().map(|&x| x as f32));
        }
        out
    }

    pub fn normalize_obs(&self, o: &[f64]) -> Vec<f32> {
        self.obs_norm.normalize(o).into_iter().map(|x| x as f32).collect()
    }

    /// Normalized privileged rows from raw `s` vectors.
    pub fn normalize_privileged(&self, rows: &[Vec<f64>]) -> Array2<f32> {
        let mut out = Array2::zeros((rows.len(), PRIVILEGED_DIM));
        for (mut r, s) in out.rows_mut().into_iter().zip(rows) {
            for (o, v) in r.iter_mut().zip(self.priv_norm.normalize(s)) {
                *o = v as f32;
            }
        }
        out
    }

    /// Builds `p` for every env. `latent_noise` samples `ẑ`; without it the mean is used.
    pub fn infer(&self, envs: &[Env], latent_noise: Option<ArrayView2<'_, f32>>) -> Inference {
        let n = envs.len();
        let mut history = Array2::zeros((n, HISTORY_DIM));
        for (mut row, env) in history.rows_mut().into_iter().zip(envs) {
            let h = self.normalized_history(env);
            row.as_slice_mut().expect("row-major").copy_from_slice(&h);
        }
        let mcp = self.mcp.encode(history.view(), latent_noise);
        let features = mcp.features(&self.ablation);
        let mut p = Array2::zeros((n, POLICY_DIM));
        for i in 0..n {
            // The newest history frame is the current observation.
            for k in 0..OBS_DIM {
                p[[i, k]] = history[[i, HISTORY_DIM - OBS_DIM + k]];
            }
            for k in 0..features.ncols() {
                p[[i, OBS_DIM + k]] = features[[i, k]];
            }
        }
        Inference { history, mcp, p }
    }

    pub fn values(&self, s: ArrayView2<'_, f32>) -> Array1<f32> {
        self.policy.value(s)
    }

    pub fn is_finite(&self) -> bool {
        self.policy.is_finite() && self.mcp.is_finite()
    }
}
