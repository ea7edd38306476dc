//! Mass-contact predictor: an encoder from the observation history to a
//! mass estimate, per-component contact probabilities and a Gaussian latent,
//! and a decoder that predicts the next observation from those outputs.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{cast, sigmoid, Mlp, MlpCache, Parameters, Scalar, TensorRef};
use crate::observation::{CONTACT_DIM, HISTORY_DIM, LATENT_DIM, MASS_DIM, OBS_DIM};

/// Encoder output columns.
const MASS: std::ops::Range<usize> = 0..MASS_DIM;
const CONTACT: std::ops::Range<usize> = MASS_DIM..MASS_DIM + CONTACT_DIM;
const MEAN: std::ops::Range<usize> = MASS_DIM + CONTACT_DIM..MASS_DIM + CONTACT_DIM + LATENT_DIM;
const LOGVAR: std::ops::Range<usize> =
    MASS_DIM + CONTACT_DIM + LATENT_DIM..MASS_DIM + CONTACT_DIM + 2 * LATENT_DIM;
pub const ENCODER_OUT: usize = MASS_DIM + CONTACT_DIM + 2 * LATENT_DIM;
pub const DECODER_IN: usize = MASS_DIM + CONTACT_DIM + LATENT_DIM;

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McpConfig {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub lambda_mass: f64,
    pub lambda_contact: f64,
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
}

impl Default for McpConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
            lambda_mass: 1.0,
            lambda_contact: 1.0,
            lambda_rec: 1.0,
            lambda_kl: 0.1,
            learning_rate: 1e-3,
            max_grad_norm: 1.0,
        }
    }
}

/// Which predictor parts are removed. Removed outputs are zero in `p`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_mass: bool,
    pub no_col: bool,
    pub no_est: bool,
}

impl Ablation {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_mass {
            parts.push("no_mass");
        }
        if self.no_col {
            parts.push("no_col");
        }
        if self.no_est {
            parts.push("no_est");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

/// Squared-error mean.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Summed binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce(p: &[f64], c: &[f64]) -> f64 {
    assert_eq!(p.len(), c.len());
    p.iter()
        .zip(c)
        .map(|(&p, &c)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(c * p.ln() + (1.0 - c) * (1.0 - p).ln())
        })
        .sum()
}

/// KL divergence of `N(mean, exp(logvar))` from the standard normal.
pub fn kl_standard_normal(mean: &[f64], logvar: &[f64]) -> f64 {
    mean.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Unweighted loss parts plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct McpLossTerms {
    pub mass_mse: f64,
    pub contact_bce: f64,
    pub recon_mse: f64,
    pub kl: f64,
    pub total: f64,
}

/// Mass and contact part for one sample.
pub fn estimation_loss(
    mass_hat: &[f64],
    mass: &[f64],
    contact_hat: &[f64],
    contact: &[f64],
    cfg: &McpConfig,
) -> McpLossTerms {
    let mass_mse = mse(mass_hat, mass);
    let contact_bce = bce(contact_hat, contact);
    McpLossTerms {
        mass_mse,
        contact_bce,
        total: cfg.lambda_mass * mass_mse + cfg.lambda_contact * contact_bce,
        ..Default::default()
    }
}

/// Reconstruction and KL part for one sample.
pub fn vae_loss(
    obs_hat: &[f64],
    obs_next: &[f64],
    z_mean: &[f64],
    z_logvar: &[f64],
    cfg: &McpConfig,
) -> McpLossTerms {
    let recon_mse = mse(obs_hat, obs_next);
    let kl = kl_standard_normal(z_mean, z_logvar);
    McpLossTerms {
        recon_mse,
        kl,
        total: cfg.lambda_rec * recon_mse + cfg.lambda_kl * kl,
        ..Default::default()
    }
}

impl std::ops::Add for McpLossTerms {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            mass_mse: self.mass_mse + o.mass_mse,
            contact_bce: self.contact_bce + o.contact_bce,
            recon_mse: self.recon_mse + o.recon_mse,
            kl: self.kl + o.kl,
            total: self.total + o.total,
        }
    }
}

/// Batched predictor outputs, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct McpOutput<T> {
    pub mass: Array2<T>,
    pub contact: Array2<T>,
    pub z_mean: Array2<T>,
    pub z_logvar: Array2<T>,
    pub z: Array2<T>,
}

impl<T: Scalar> McpOutput<T> {
    /// `[m̂, ĉ, ẑ]` rows with ablated parts zeroed: the `p` tail and the decoder input.
    pub fn features(&self, ablation: &Ablation) -> Array2<T> {
        let b = self.mass.nrows();
        let mut out = Array2::zeros((b, DECODER_IN));
        if !ablation.no_mass {
            out.slice_mut(s![.., MASS]).assign(&self.mass);
        }
        if !ablation.no_col {
            out.slice_mut(s![.., CONTACT]).assign(&self.contact);
        }
        if !ablation.no_est {
            out.slice_mut(s![.., MASS_DIM + CONTACT_DIM..]).assign(&self.z);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mcp<T> {
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
}

/// Targets for one batch of predictor training.
pub struct McpTargets<'a, T> {
    /// Normalized mass vectors, `B × 4`.
    pub mass: ArrayView2<'a, T>,
    /// Component contact flags in {0, 1}, `B × 13`.
    pub contact: ArrayView2<'a, T>,
    /// Normalized next observation, `B × 42`.
    pub next_obs: ArrayView2<'a, T>,
}

impl<T: Scalar> Mcp<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &McpConfig, rng: &mut R) -> Self {
        let mut enc = vec![HISTORY_DIM];
        enc.extend(&cfg.encoder_hidden);
        enc.push(ENCODER_OUT);
        let mut dec = vec![DECODER_IN];
        dec.extend(&cfg.decoder_hidden);
        dec.push(OBS_DIM);
        Self {
            encoder: Mlp::new(&enc, 0.1, rng),
            decoder: Mlp::new(&dec, 0.1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Mcp<U> {
        Mcp {
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
        }
    }

    fn split(raw: &Array2<T>, noise: Option<ArrayView2<'_, T>>) -> McpOutput<T> {
        let mass = raw.slice(s![.., MASS]).to_owned();
        let contact = raw.slice(s![.., CONTACT]).mapv(sigmoid);
        let z_mean = raw.slice(s![.., MEAN]).to_owned();
        let z_logvar = raw.slice(s![.., LOGVAR]).to_owned();
        let z = match noise {
            Some(u) => {
                let half: T = cast(0.5);
                let std = z_logvar.mapv(|lv| (lv * half).exp());
                &z_mean + &(&std * &u)
            }
            None => z_mean.clone(),
        };
        McpOutput { mass, contact, z_mean, z_logvar, z }
    }

    /// Encodes normalized histories (`B × 210`). With `noise` (`B × 16`
    /// standard normal draws) the latent is sampled, otherwise it is the mean.
    pub fn encode(&self, history: ArrayView2<'_, T>, noise: Option<ArrayView2<'_, T>>) -> McpOutput<T> {
        Self::split(&self.encoder.forward(history), noise)
    }

    /// Predicts the next normalized observation from `[m̂, ĉ, ẑ]` rows.
    pub fn decode(&self, features: ArrayView2<'_, T>) -> Array2<T> {
        self.decoder.forward(features)
    }

    /// Batch-mean loss and its gradient with respect to all parameters.
    pub fn loss_and_grad(
        &self,
        history: ArrayView2<'_, T>,
        targets: &McpTargets<'_, T>,
        noise: ArrayView2<'_, T>,
        ablation: &Ablation,
        cfg: &McpConfig,
    ) -> (McpLossTerms, Mcp<T>) {
        let b = history.nrows();
        let bf = b as f64;
        let (raw, enc_cache) = self.encoder.forward_cached(history);
        let out = Self::split(&raw, Some(noise));
        let mut grads = self.zeros_like();
        let mut d_raw = Array2::<T>::zeros(raw.raw_dim());
        let mut terms = McpLossTerms::default();
        let f = |x: T| x.to_f64().unwrap();

        if !ablation.no_mass {
            let diff = &out.mass - &targets.mass;
            terms.mass_mse = diff.iter().map(|&d| f(d) * f(d)).sum::<f64>() / (bf * MASS_DIM as f64);
            let k: T = cast(cfg.lambda_mass * 2.0 / (bf * MASS_DIM as f64));
            d_raw.slice_mut(s![.., MASS]).assign(&diff.mapv(|d| d * k));
        }
        if !ablation.no_col {
            let lo = BCE_CLAMP;
            let hi = 1.0 - BCE_CLAMP;
            let mut sum = 0.0;
            let k: T = cast(cfg.lambda_contact / bf);
            let mut d = d_raw.slice_mut(s![.., CONTACT]);
            for ((p, c), g) in out.contact.iter().zip(targets.contact.iter()).zip(d.iter_mut()) {
                let (pf, cf) = (f(*p), f(*c));
                let pc = pf.clamp(lo, hi);
                sum += -(cf * pc.ln() + (1.0 - cf) * (1.0 - pc).ln());
                if pf > lo && pf < hi {
                    *g = (*p - *c) * k;
                }
            }
            terms.contact_bce = sum / bf;
        }
        let mut dec_cache: Option<(Array2<T>, MlpCache<T>)> = None;
        if !ablation.no_est {
            let features = out.features(ablation);
            let (pred, cache) = self.decoder.forward_cached(features.view());
            let diff = &pred - &targets.next_obs;
            terms.recon_mse = diff.iter().map(|&d| f(d) * f(d)).sum::<f64>() / (bf * OBS_DIM as f64);
            let k: T = cast(cfg.lambda_rec * 2.0 / (bf * OBS_DIM as f64));
            let d_pred = diff.mapv(|d| d * k);
            let d_feat = self.decoder.backward(&cache, d_pred, &mut grads.decoder);
            dec_cache = Some((d_feat, cache));

            let mut kl = 0.0;
            for (m, lv) in out.z_mean.iter().zip(out.z_logvar.iter()) {
                let (m, lv) = (f(*m), f(*lv));
                kl += 0.5 * (m * m + lv.exp() - 1.0 - lv);
            }
            terms.kl = kl / bf;
        }
        if let Some((d_feat, _)) = dec_cache {
            // Reconstruction gradient flows back into every head feeding the decoder.
            if !ablation.no_mass {
                let mut d = d_raw.slice_mut(s![.., MASS]);
                d += &d_feat.slice(s![.., MASS]);
            }
            if !ablation.no_col {
                let dp = d_feat.slice(s![.., CONTACT]);
                let sig = out.contact.mapv(|p| p * (T::one() - p));
                let mut d = d_raw.slice_mut(s![.., CONTACT]);
                d += &(&dp * &sig);
            }
            let dz = d_feat.slice(s![.., MASS_DIM + CONTACT_DIM..]).to_owned();
            let half: T = cast(0.5);
            let kl_k: T = cast(cfg.lambda_kl / bf);
            let std = out.z_logvar.mapv(|lv| (lv * half).exp());
            let mut dm = d_raw.slice_mut(s![.., MEAN]);
            dm += &dz;
            dm += &out.z_mean.mapv(|m| m * kl_k);
            let mut dlv = d_raw.slice_mut(s![.., LOGVAR]);
            dlv += &(&(&dz * &noise) * &std.mapv(|s| s * half));
            dlv += &out.z_logvar.mapv(|lv| (lv.exp() - T::one()) * half * kl_k);
        }
        self.encoder.backward(&enc_cache, d_raw, &mut grads.encoder);

        terms.total = cfg.lambda_mass * terms.mass_mse
            + cfg.lambda_contact * terms.contact_bce
            + cfg.lambda_rec * terms.recon_mse
            + cfg.lambda_kl * terms.kl;
        (terms, grads)
    }

    /// Loss without gradients, for evaluation.
    pub fn loss(
        &self,
        history: ArrayView2<'_, T>,
        targets: &McpTargets<'_, T>,
        noise: ArrayView2<'_, T>,
        ablation: &Ablation,
        cfg: &McpConfig,
    ) -> McpLossTerms {
        self.loss_and_grad(history, targets, noise, ablation, cfg).0
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }
}

impl<T: Scalar> Parameters<T> for Mcp<T> {
    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut t = self.encoder.prefixed_tensors("mcp.encoder");
        t.extend(self.decoder.prefixed_tensors("mcp.decoder"));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut t = self.encoder.slices_mut();
        t.extend(self.decoder.slices_mut());
        t
    }
}

/// Row means of a batch, used by the baselines in evaluation.
pub fn column_means(x: &ArrayView2<'_, f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}
