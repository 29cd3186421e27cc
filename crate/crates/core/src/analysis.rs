//! Executable forms of the deterministic-limit predictions: the optimal
//! encoder-variance formula, self-consistency summaries over a test split,
//! the self-consistent ELBO (amortized, with optional per-sample
//! refinement), the frozen-decoder gap report, and the linear-model
//! stationary closed forms.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{NodeId, Tape, Workspace};
use crate::error::{Error, Result};
use crate::ima::{cima_global_mc, cima_local, ima_regularized_loglik, DEFAULT_LAMBDA};
use crate::linalg::{DenseMatrix, Lu};
use crate::mixing::{mix_forward, pushforward_log_density, Dataset, MixingSpec, SourceDistribution, Split};
use crate::nets::{append_mlp, invert_mlp, mlp_forward, mlp_jacobian, MlpParams, MlpTapeParams};
use crate::rng::derive_rng;
use crate::vae::{elbo_terms_with_rng, encode, ElboMode, PriorKind, VaeModel};

/// Aggregate self-consistency diagnostics over a test split.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfConsistencyReport {
    pub gamma_sq: f64,
    /// Mean over test points and dimensions of the encoder variances.
    pub mean_sigma_sq: f64,
    /// Median over test points of `||f(mu(x)) - x||_2`.
    pub median_recon_gap: f64,
    /// Median over test points and dimensions of the relative error between
    /// encoder variances and the optimal-variance prediction.
    pub optl_sigma_rel_err: f64,
    pub n_test: usize,
    /// Test points where the decoder preimage fell back to the encoder mean.
    pub degraded_preimages: usize,
}

/// ELBO*, exact log-likelihood, regularized objective, and global contrast
/// for a frozen-decoder model.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub elbo_star: f64,
    pub log_px: f64,
    pub l_ima: f64,
    pub cima_global: f64,
    pub gamma_sq: f64,
}

/// Per-sample refinement settings for [`elbo_star`].
#[derive(Debug, Clone, Copy)]
pub struct RefineConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-3,
        }
    }
}

/// The optimal-variance prediction per dimension:
/// `sigma_k^2 = 1 / (-d^2 log p0 / dz_k^2 + gamma_sq * ||J_f col k||^2)`
/// evaluated at a decoder preimage of `x`.
///
/// The preimage comes from Newton inversion of the decoder started at the
/// encoder mean; if inversion fails the encoder mean itself is used and the
/// returned flag marks the degradation.
pub fn predict_optimal_sigma(model: &VaeModel, x: &[f64]) -> Result<(Vec<f64>, bool)> {
    let (mu, _) = encode(model, x)?;
    let (z_hat, degraded) = match invert_mlp(&model.decoder, x, &mu, 1e-8) {
        Ok(z) => (z, false),
        Err(_) => (mu, true),
    };
    let j = mlp_jacobian(&model.decoder, &z_hat)?;
    let curvature = model.prior.log_density_curvature();
    let d = model.dim();
    let mut pred = vec![0.0; d];
    for k in 0..d {
        pred[k] = 1.0 / (-curvature + model.gamma_sq * j.column_sq_norm(k));
    }
    Ok((pred, degraded))
}

/// Builds the self-consistency summary over the dataset's test split.
pub fn self_consistency_report(model: &VaeModel, data: &Dataset) -> Result<SelfConsistencyReport> {
    let test_idx = data.indices(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::Config("self-consistency report needs a test split".into()));
    }
    let mut sigma_sum = 0.0;
    let mut sigma_count = 0usize;
    let mut recon_gaps = Vec::with_capacity(test_idx.len());
    let mut rel_errs = Vec::new();
    let mut degraded = 0usize;
    for &i in &test_idx {
        let x = data.observation(i);
        let (mu, sigma_sq) = encode(model, x)?;
        let fx = mlp_forward(&model.decoder, &mu)?;
        let gap = fx
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        recon_gaps.push(gap);
        let (pred, was_degraded) = predict_optimal_sigma(model, x)?;
        if was_degraded {
            degraded += 1;
        }
        for k in 0..model.dim() {
            sigma_sum += sigma_sq[k];
            sigma_count += 1;
            rel_errs.push((sigma_sq[k] - pred[k]).abs() / pred[k]);
        }
    }
    Ok(SelfConsistencyReport {
        gamma_sq: model.gamma_sq,
        mean_sigma_sq: sigma_sum / sigma_count as f64,
        median_recon_gap: median(&mut recon_gaps),
        optl_sigma_rel_err: median(&mut rel_errs),
        n_test: test_idx.len(),
        degraded_preimages: degraded,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Mean ELBO over the test split through the amortized encoder. With
/// `refine` set, each test point's variational parameters are first improved
/// by per-sample gradient ascent; if the refined mean is worse the amortized
/// value is returned with the warning flag set.
pub fn elbo_star(
    model: &VaeModel,
    data: &Dataset,
    n_mc: usize,
    seed: u64,
    refine: Option<RefineConfig>,
) -> Result<(f64, bool)> {
    let test_idx = data.indices(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::Config("elbo_star needs a test split".into()));
    }
    let mut rng = derive_rng(seed, &[0xE57A]);
    let mut amortized_sum = 0.0;
    for &i in &test_idx {
        let bd = elbo_terms_with_rng(model, data.observation(i), n_mc, &mut rng, ElboMode::Exact)?;
        amortized_sum += bd.elbo;
    }
    let amortized = amortized_sum / test_idx.len() as f64;
    let Some(cfg) = refine else {
        return Ok((amortized, false));
    };

    let tape = build_refine_tape(&model.decoder, model.gamma_sq, model.prior.kind);
    let d = model.dim();
    let mut ws = Workspace::default();
    let mut refined_sum = 0.0;
    for &i in &test_idx {
        let x = data.observation(i);
        let (mu, sigma_sq) = encode(model, x)?;
        let mut params: Vec<f64> = mu.iter().copied().chain(sigma_sq.iter().map(|s| s.ln())).collect();
        refine_sample(&tape, &mut params, x, d, &cfg, &mut rng, &mut ws)?;
        let ref_mu = &params[..d];
        let ref_sigma_sq: Vec<f64> = params[d..].iter().map(|lv| lv.exp()).collect();
        refined_sum += elbo_at(model, x, ref_mu, &ref_sigma_sq, n_mc, &mut rng)?;
    }
    let refined = refined_sum / test_idx.len() as f64;
    if refined < amortized {
        Ok((amortized, true))
    } else {
        Ok((refined, false))
    }
}

/// ELBO estimate at explicit per-sample variational parameters.
fn elbo_at(
    model: &VaeModel,
    x: &[f64],
    mu: &[f64],
    sigma_sq: &[f64],
    n_mc: usize,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let d = model.dim();
    let sigma: Vec<f64> = sigma_sq.iter().map(|s| s.sqrt()).collect();
    let mut core_sum = 0.0;
    let mut cross_entropy = 0.0;
    let mut z = vec![0.0; d];
    for _ in 0..n_mc {
        for k in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            z[k] = mu[k] + sigma[k] * eps;
        }
        let fz = mlp_forward(&model.decoder, &z)?;
        core_sum += fz.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        if matches!(model.prior.kind, PriorKind::Uniform { .. }) {
            cross_entropy += model.prior.log_density(&z);
        }
    }
    let core = core_sum / n_mc as f64;
    let recon = -0.5 * model.gamma_sq * core + 0.5 * d as f64 * model.gamma_sq.ln()
        - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let neg_kl = match model.prior.kind {
        PriorKind::StandardGaussian => {
            0.5 * (0..d)
                .map(|k| 1.0 + sigma_sq[k].ln() - mu[k] * mu[k] - sigma_sq[k])
                .sum::<f64>()
        }
        PriorKind::Uniform { .. } => {
            let entropy = 0.5 * d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln())
                + 0.5 * sigma_sq.iter().map(|s| s.ln()).sum::<f64>();
            entropy + cross_entropy / n_mc as f64
        }
    };
    Ok(recon + neg_kl)
}

/// Objective tape over per-sample variational parameters:
/// inputs `[mu (d) | logvar (d) | x (d) | eps (d)]`, decoder fixed.
fn build_refine_tape(decoder: &MlpParams, gamma_sq: f64, prior: PriorKind) -> Tape {
    let d = decoder.input_dim();
    let mut b = Tape::builder(4 * d);
    let mu_ids: Vec<NodeId> = (0..d).map(|s| b.input(s)).collect();
    let logvar_ids: Vec<NodeId> = (d..2 * d).map(|s| b.input(s)).collect();
    let x_ids: Vec<NodeId> = (2 * d..3 * d).map(|s| b.input(s)).collect();
    let eps_ids: Vec<NodeId> = (3 * d..4 * d).map(|s| b.input(s)).collect();
    let half = b.constant(0.5);
    let mut sigma_ids = Vec::with_capacity(d);
    let mut scaled = Vec::with_capacity(d);
    for k in 0..d {
        let h = b.mul(half, logvar_ids[k]);
        let s = b.exp(h);
        sigma_ids.push(s);
        scaled.push(b.mul(s, eps_ids[k]));
    }
    let z_ids: Vec<NodeId> = (0..d).map(|k| b.add(mu_ids[k], scaled[k])).collect();
    let fx_ids = append_mlp(&mut b, &MlpTapeParams::Fixed(decoder), &z_ids);
    let mut sq = Vec::with_capacity(d);
    for k in 0..d {
        let delta = b.sub(x_ids[k], fx_ids[k]);
        sq.push(b.square(delta));
    }
    let core = b.sum(&sq);
    let neg_half_gamma = b.constant(-0.5 * gamma_sq);
    let recon_scaled = b.mul(neg_half_gamma, core);
    let recon_const = b.constant(
        0.5 * d as f64 * gamma_sq.ln() - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln(),
    );
    let recon = b.add(recon_scaled, recon_const);
    let objective = match prior {
        PriorKind::StandardGaussian => {
            let one = b.constant(1.0);
            let mut terms = Vec::with_capacity(d);
            for k in 0..d {
                let t = b.add(one, logvar_ids[k]);
                let mu2 = b.square(mu_ids[k]);
                let t = b.sub(t, mu2);
                let s2 = b.square(sigma_ids[k]);
                terms.push(b.sub(t, s2));
            }
            let s = b.sum(&terms);
            let neg_kl = b.mul(half, s);
            b.add(recon, neg_kl)
        }
        PriorKind::Uniform { .. } => {
            let sum_lv = b.sum(&logvar_ids);
            let half_sum = b.mul(half, sum_lv);
            let kappa = b.constant(0.5 * d as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln()));
            let entropy = b.add(kappa, half_sum);
            b.add(recon, entropy)
        }
    };
    b.finish(vec![objective])
}

fn refine_sample(
    tape: &Tape,
    params: &mut [f64],
    x: &[f64],
    d: usize,
    cfg: &RefineConfig,
    rng: &mut ChaCha12Rng,
    ws: &mut Workspace,
) -> Result<()> {
    let mut inputs = vec![0.0; 4 * d];
    inputs[2 * d..3 * d].copy_from_slice(x);
    let (mut m, mut v) = (vec![0.0; 2 * d], vec![0.0; 2 * d]);
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    for t in 1..=cfg.steps {
        inputs[..2 * d].copy_from_slice(params);
        for k in 0..d {
            inputs[3 * d + k] = rng.sample(StandardNormal);
        }
        tape.forward(&inputs, ws)?;
        tape.backward(ws, 0)?;
        let g = tape.input_grads(ws);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for i in 0..2 * d {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            params[i] += cfg.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Frozen-decoder comparison of ELBO*, the exact log-likelihood, and the
/// IMA-regularized objective. The decoder must equal the ground-truth
/// mixing so the change of variables gives the model likelihood exactly;
/// this is spot-checked on dataset points.
pub fn gap_report(
    model: &VaeModel,
    data: &Dataset,
    spec: &MixingSpec,
    dist: &SourceDistribution,
    n_mc_elbo: usize,
    n_mc_cima: usize,
    seed: u64,
) -> Result<GapReport> {
    if !model.decoder_frozen {
        return Err(Error::Contract(
            "gap_report requires the frozen-decoder regime".into(),
        ));
    }
    let test_idx = data.indices(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::Config("gap_report needs a test split".into()));
    }
    // Spot-check decoder == mixing on a few points.
    for &i in test_idx.iter().take(8) {
        let z = data.source(i);
        let dec = mlp_forward(&model.decoder, z)?;
        let (mix, _) = mix_forward(spec, z, false)?;
        let diff = dec
            .iter()
            .zip(&mix)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if diff > 1e-8 {
            return Err(Error::Contract(format!(
                "decoder disagrees with the mixing by {diff:.3e}; gap_report needs the ground-truth decoder"
            )));
        }
    }
    let (elbo, _) = elbo_star(model, data, n_mc_elbo, seed, None)?;
    let mut log_px_sum = 0.0;
    for &i in &test_idx {
        log_px_sum += pushforward_log_density(spec, dist, data.observation(i), data.source(i))?;
    }
    let log_px = log_px_sum / test_idx.len() as f64;
    let (cima_global, _) = cima_global_mc(spec, dist, n_mc_cima, seed ^ 0xC1AA)?;
    let l_ima = ima_regularized_loglik(log_px, cima_global, DEFAULT_LAMBDA);
    Ok(GapReport {
        elbo_star: elbo,
        log_px,
        l_ima,
        cima_global,
        gamma_sq: model.gamma_sq,
    })
}

/// Stationary closed forms of the linear Gaussian model with decoder weight
/// `W` and precision `gamma_sq`:
/// posterior variances `D*_k = 1 / (gamma_sq ||w_k||^2 + 1)`,
/// the exact ELBO gap `0.5 (log det M~ - log det M)` with
/// `M = W^T W + I / gamma_sq` and `M~ = diag(M)`, and the contrast of `W`.
pub fn linear_vae_stationary(w: &DenseMatrix, gamma_sq: f64) -> Result<(Vec<f64>, f64, f64)> {
    if !w.is_square() {
        return Err(Error::Dimension {
            context: "linear_vae_stationary",
            expected: w.rows(),
            got: w.cols(),
        });
    }
    if gamma_sq <= 0.0 {
        return Err(Error::Config("gamma_sq must be positive".into()));
    }
    let d = w.rows();
    let cima_of_w = cima_local(w)?;
    let gram = w.gram();
    let mut m = gram.clone();
    for k in 0..d {
        m[(k, k)] += 1.0 / gamma_sq;
    }
    let mut log_det_diag = 0.0;
    let mut d_star = vec![0.0; d];
    for k in 0..d {
        log_det_diag += m[(k, k)].ln();
        d_star[k] = (1.0 / gamma_sq) / m[(k, k)];
    }
    let gap = 0.5 * (log_det_diag - Lu::new(&m)?.log_abs_det());
    Ok((d_star, gap, cima_of_w))
}
