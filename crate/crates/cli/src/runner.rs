//! Experiment execution: one independent, reproducible cell per
//! (seed, gamma_sq, severity) grid point, run on a bounded worker pool and
//! collected in a deterministic order.
//!
//! Every random quantity inside a cell derives from
//! (master seed, seed, gamma index, severity index), so any cell can be
//! recomputed in isolation and the record list is identical across runs
//! and worker counts.

use rayon::prelude::*;

use vaelab::analysis::{elbo_star, gap_report, linear_vae_stationary, self_consistency_report};
use vaelab::error::Result as CoreResult;
use vaelab::ima::{cima_global_mc, cima_local};
use vaelab::linalg::{DenseMatrix, Lu};
use vaelab::metrics::mcc;
use vaelab::mixing::{
    make_dataset, make_volume_preserving_linear, sample_moebius, Dataset, MixingKind,
    MixingSpec, SourceDistribution, Split,
};
use vaelab::nets::{init_mlp, mlp_jacobian, Activation, InitMode, MlpParams};
use vaelab::rng::{derive_rng, derive_seed};
use vaelab::vae::{
    elbo_terms_with_rng, encode, train_vae, ElboMode, Prior, PriorKind, TrainConfig, VaeModel,
};

use crate::config::{
    ActivationConfig, ExperimentConfig, ExperimentKind, MixingKindConfig, PriorConfig,
};
use crate::records::RunRecord;
use rand::Rng;

/// Identifies one grid cell by indices into the config's grids.
#[derive(Debug, Clone, Copy)]
struct Cell {
    seed_idx: usize,
    gamma_idx: usize,
    severity_idx: usize,
}

fn enumerate_cells(config: &ExperimentConfig) -> Vec<Cell> {
    let severities = if config.cima_severity_grid.is_empty() {
        1
    } else {
        config.cima_severity_grid.len()
    };
    let mut cells = Vec::new();
    for seed_idx in 0..config.seeds.len() {
        for gamma_idx in 0..config.gamma_sq_grid.len() {
            for severity_idx in 0..severities {
                cells.push(Cell {
                    seed_idx,
                    gamma_idx,
                    severity_idx,
                });
            }
        }
    }
    cells
}

/// Runs every cell and returns records in grid order plus per-record
/// wall-clock seconds (same order).
pub fn run_experiment(
    config: &ExperimentConfig,
    workers: usize,
) -> anyhow::Result<(Vec<RunRecord>, Vec<f64>)> {
    config.validate()?;
    let cells = enumerate_cells(config);
    let workers = if workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()?;
    let results: Vec<(RunRecord, f64)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let start = std::time::Instant::now();
                let record = run_cell(config, *cell);
                (record, start.elapsed().as_secs_f64())
            })
            .collect()
    });
    let (records, clocks) = results.into_iter().unzip();
    Ok((records, clocks))
}

/// Executes one cell; failures are recorded in-band.
fn run_cell(config: &ExperimentConfig, cell: Cell) -> RunRecord {
    let seed = config.seeds[cell.seed_idx];
    let gamma_sq = config.gamma_sq_grid[cell.gamma_idx];
    let severity = config.cima_severity_grid.get(cell.severity_idx).copied();
    let mut record = RunRecord::empty(config.experiment.tag(), seed, gamma_sq, severity);
    let outcome = match config.experiment {
        ExperimentKind::SelfConsistency => run_self_consistency(config, cell, &mut record),
        ExperimentKind::GapComparison => run_gap_comparison(config, cell, &mut record),
        ExperimentKind::MoebiusMcc => run_moebius_mcc(config, cell, &mut record),
        ExperimentKind::LinearClosedForm => run_linear_closed_form(config, cell, &mut record),
    };
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    record
}

fn activation(cfg: ActivationConfig, alpha: f64) -> Activation {
    match cfg {
        ActivationConfig::SmoothLeakyRelu => Activation::SmoothLeakyRelu { alpha },
        ActivationConfig::Relu => Activation::Relu,
        ActivationConfig::Sigmoid => Activation::Sigmoid,
        ActivationConfig::Identity => Activation::Identity,
    }
}

fn layer_sizes(dim: usize, hidden: usize, layers: usize) -> Vec<usize> {
    let mut sizes = vec![dim];
    for _ in 0..layers.saturating_sub(1) {
        sizes.push(if hidden == 0 { dim } else { hidden });
    }
    sizes.push(dim);
    sizes
}

fn source_distribution(config: &ExperimentConfig) -> CoreResult<SourceDistribution> {
    Ok(match config.prior {
        PriorConfig::StandardGaussian => SourceDistribution::standard_gaussian(config.dim),
        PriorConfig::Uniform { low, high } => SourceDistribution::uniform(config.dim, low, high)?,
    })
}

fn prior_kind(config: &ExperimentConfig) -> PriorKind {
    match config.prior {
        PriorConfig::StandardGaussian => PriorKind::StandardGaussian,
        PriorConfig::Uniform { low, high } => PriorKind::Uniform { low, high },
    }
}

/// Ground-truth mixing for a cell. Mixing parameters depend only on
/// (master, seed) except for the severity distortion, which also depends on
/// the severity index so each sweep cell gets its own distortion draw.
fn build_mixing(config: &ExperimentConfig, cell: Cell) -> CoreResult<MixingSpec> {
    let seed = config.seeds[cell.seed_idx];
    let mixing_seed = derive_seed(config.master_seed, &[0x4D49, seed]);
    let dim = config.dim;
    let base = match config.mixing.kind {
        MixingKindConfig::Moebius => sample_moebius(dim, (0.0, 1.0), 0.5, mixing_seed)?,
        MixingKindConfig::MlpOrthogonal => {
            let params = init_mlp(
                &vec![dim; config.mixing.layers + 1],
                InitMode::Orthogonal,
                Activation::SmoothLeakyRelu {
                    alpha: config.mixing.alpha,
                },
                mixing_seed,
            )?;
            MixingSpec::new(MixingKind::Mlp(params), dim)?
        }
        MixingKindConfig::MlpTriangular => {
            let params = init_mlp(
                &vec![dim; config.mixing.layers + 1],
                InitMode::UpperTriangular,
                Activation::Sigmoid,
                mixing_seed,
            )?;
            MixingSpec::new(MixingKind::Mlp(params), dim)?
        }
        MixingKindConfig::LinearOrthogonal => {
            let params =
                init_mlp(&[dim, dim], InitMode::Orthogonal, Activation::Identity, mixing_seed)?;
            MixingSpec::new(MixingKind::Mlp(params), dim)?
        }
    };
    match config.cima_severity_grid.get(cell.severity_idx) {
        Some(&severity) if severity > 0.0 => {
            let linear_seed = derive_seed(
                config.master_seed,
                &[0x564C, seed, cell.severity_idx as u64],
            );
            let outer = make_volume_preserving_linear(dim, severity, linear_seed)?;
            MixingSpec::new(
                MixingKind::Composed {
                    inner: Box::new(base),
                    outer,
                },
                dim,
            )
        }
        _ => Ok(base),
    }
}

fn build_dataset(config: &ExperimentConfig, cell: Cell, spec: &MixingSpec) -> CoreResult<Dataset> {
    let seed = config.seeds[cell.seed_idx];
    let data_seed = derive_seed(
        config.master_seed,
        &[0xDA7A, seed, cell.severity_idx as u64],
    );
    let dist = source_distribution(config)?;
    make_dataset(
        spec,
        &dist,
        (config.samples.train, config.samples.val, config.samples.test),
        data_seed,
    )
}

/// Fresh encoder pair (and decoder unless frozen) for a cell.
fn build_model(
    config: &ExperimentConfig,
    cell: Cell,
    gamma_sq: f64,
    frozen_decoder: Option<MlpParams>,
) -> CoreResult<VaeModel> {
    let seed = config.seeds[cell.seed_idx];
    let tags = [
        seed,
        cell.gamma_idx as u64,
        cell.severity_idx as u64,
    ];
    let t = &config.train;
    let enc_act = activation(t.encoder_activation, config.mixing.alpha);
    let encoder_mean = init_mlp(
        &layer_sizes(config.dim, t.encoder_hidden, t.encoder_layers),
        InitMode::GaussianFanIn,
        enc_act,
        derive_seed(config.master_seed, &[0xE0, tags[0], tags[1], tags[2]]),
    )?;
    let mut encoder_logvar = init_mlp(
        &layer_sizes(config.dim, t.encoder_hidden, t.encoder_layers),
        InitMode::GaussianFanIn,
        enc_act,
        derive_seed(config.master_seed, &[0xE1, tags[0], tags[1], tags[2]]),
    )?;
    // Start the variance head at the unit-column-norm optimum 1/(1 + g^2):
    // with a zero bias the output must travel ~ln(g^2) nats at high
    // precision, which dominates the training time and leaves the variances
    // short of their stationary values.
    if let Some(bias) = encoder_logvar.biases.last_mut() {
        bias.iter_mut().for_each(|b| *b = -(1.0 + gamma_sq).ln());
    }
    let (decoder, frozen) = match frozen_decoder {
        Some(d) => (d, true),
        None => (
            init_mlp(
                &layer_sizes(config.dim, t.decoder_hidden, t.decoder_layers),
                InitMode::GaussianFanIn,
                activation(t.decoder_activation, config.mixing.alpha),
                derive_seed(config.master_seed, &[0xDE, tags[0], tags[1], tags[2]]),
            )?,
            false,
        ),
    };
    let prior = match config.prior {
        PriorConfig::StandardGaussian => Prior::standard_gaussian(config.dim),
        PriorConfig::Uniform { low, high } => Prior::uniform(config.dim, low, high)?,
    };
    VaeModel::new(encoder_mean, encoder_logvar, decoder, gamma_sq, prior, frozen)
}

fn train_config(config: &ExperimentConfig, cell: Cell, gamma_sq: f64, frozen: bool) -> TrainConfig {
    let seed = config.seeds[cell.seed_idx];
    TrainConfig {
        learning_rate: config.train.learning_rate,
        batch_size: config.train.batch_size,
        max_epochs: config.train.max_epochs,
        patience: config.train.patience,
        n_mc_eval: config.train.n_mc_eval,
        gamma_sq,
        prior: prior_kind(config),
        seed: derive_seed(
            config.master_seed,
            &[0x7E, seed, cell.gamma_idx as u64, cell.severity_idx as u64],
        ),
        decoder_frozen: frozen,
        warmup_epochs: config.train.warmup_epochs,
    }
}

fn eval_seed(config: &ExperimentConfig, cell: Cell, tag: u64) -> u64 {
    derive_seed(
        config.master_seed,
        &[
            tag,
            config.seeds[cell.seed_idx],
            cell.gamma_idx as u64,
            cell.severity_idx as u64,
        ],
    )
}

fn run_self_consistency(
    config: &ExperimentConfig,
    cell: Cell,
    record: &mut RunRecord,
) -> CoreResult<()> {
    let gamma_sq = config.gamma_sq_grid[cell.gamma_idx];
    let spec = build_mixing(config, cell)?;
    let data = build_dataset(config, cell, &spec)?;
    let model = build_model(config, cell, gamma_sq, None)?;
    let tc = train_config(config, cell, gamma_sq, false);
    let (trained, _history) = train_vae(&model, &data, &tc)?;
    let report = self_consistency_report(&trained, &data)?;
    record.mean_sigma_sq = Some(report.mean_sigma_sq);
    record.median_recon_gap = Some(report.median_recon_gap);
    record.optl_sigma_rel_err = Some(report.optl_sigma_rel_err);
    let (elbo, _) = elbo_star(&trained, &data, config.n_mc_elbo, eval_seed(config, cell, 0xE5), None)?;
    record.elbo_star = Some(elbo);
    record.cima_local_mean = Some(mean_decoder_contrast(&trained, &data)?);
    Ok(())
}

fn run_gap_comparison(
    config: &ExperimentConfig,
    cell: Cell,
    record: &mut RunRecord,
) -> CoreResult<()> {
    let gamma_sq = config.gamma_sq_grid[cell.gamma_idx];
    let spec = build_mixing(config, cell)?;
    let MixingKind::Mlp(decoder_params) = &spec.kind else {
        return Err(vaelab::Error::Config(
            "gap comparison requires an MLP mixing to freeze as the decoder".into(),
        ));
    };
    let data = build_dataset(config, cell, &spec)?;
    let model = build_model(config, cell, gamma_sq, Some(decoder_params.clone()))?;
    let tc = train_config(config, cell, gamma_sq, true);
    let (trained, _history) = train_vae(&model, &data, &tc)?;
    let dist = source_distribution(config)?;
    let report = gap_report(
        &trained,
        &data,
        &spec,
        &dist,
        config.n_mc_elbo,
        config.n_mc_cima,
        eval_seed(config, cell, 0x6A),
    )?;
    record.elbo_star = Some(report.elbo_star);
    record.log_px = Some(report.log_px);
    record.cima_global = Some(report.cima_global);
    record.cima_local_mean = Some(mean_decoder_contrast(&trained, &data)?);
    let screport = self_consistency_report(&trained, &data)?;
    record.mean_sigma_sq = Some(screport.mean_sigma_sq);
    record.median_recon_gap = Some(screport.median_recon_gap);
    record.optl_sigma_rel_err = Some(screport.optl_sigma_rel_err);
    Ok(())
}

fn run_moebius_mcc(
    config: &ExperimentConfig,
    cell: Cell,
    record: &mut RunRecord,
) -> CoreResult<()> {
    let gamma_sq = config.gamma_sq_grid[cell.gamma_idx];
    let spec = build_mixing(config, cell)?;
    let data = build_dataset(config, cell, &spec)?;
    let model = build_model(config, cell, gamma_sq, None)?;
    let tc = train_config(config, cell, gamma_sq, false);
    let (trained, _history) = train_vae(&model, &data, &tc)?;

    // MCC between true test sources and encoder means.
    let test_idx = data.indices(Split::Test);
    let d = config.dim;
    let mut z_true = DenseMatrix::zeros(test_idx.len(), d);
    let mut z_hat = DenseMatrix::zeros(test_idx.len(), d);
    for (row, &i) in test_idx.iter().enumerate() {
        let (mu, _) = encode(&trained, data.observation(i))?;
        for k in 0..d {
            z_true[(row, k)] = data.source(i)[k];
            z_hat[(row, k)] = mu[k];
        }
    }
    record.mcc = Some(mcc(&z_true, &z_hat)?.mcc);
    record.cima_local_mean = Some(mean_decoder_contrast(&trained, &data)?);

    // Mixing contrast (Monte Carlo; zero for the undistorted Moebius map).
    let dist = source_distribution(config)?;
    let (cima_mix, _stderr) = cima_global_mc(
        &spec,
        &dist,
        config.n_mc_cima,
        eval_seed(config, cell, 0xC1),
    )?;
    record.cima_global = Some(cima_mix);

    // The bounded prior keeps exact evaluation semantics at -inf for
    // off-support draws; report the penalized training-mode estimate so the
    // record stays finite.
    let mut rng = derive_rng(eval_seed(config, cell, 0xE5), &[0]);
    let mut acc = 0.0;
    for &i in &test_idx {
        let bd = elbo_terms_with_rng(
            &trained,
            data.observation(i),
            config.n_mc_elbo,
            &mut rng,
            ElboMode::Penalized,
        )?;
        acc += bd.elbo;
    }
    record.elbo_star = Some(acc / test_idx.len() as f64);

    let report = self_consistency_report(&trained, &data)?;
    record.mean_sigma_sq = Some(report.mean_sigma_sq);
    record.median_recon_gap = Some(report.median_recon_gap);
    record.optl_sigma_rel_err = Some(report.optl_sigma_rel_err);
    Ok(())
}

fn run_linear_closed_form(
    config: &ExperimentConfig,
    cell: Cell,
    record: &mut RunRecord,
) -> CoreResult<()> {
    let gamma_sq = config.gamma_sq_grid[cell.gamma_idx];
    let seed = config.seeds[cell.seed_idx];
    let dim = config.dim;
    // Random invertible decoder weight per seed.
    let mut rng = derive_rng(config.master_seed, &[0x57A7, seed]);
    let w = loop {
        let candidate = DenseMatrix::from_fn(dim, dim, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        if Lu::new(&candidate).is_ok() {
            break candidate;
        }
    };
    let (d_star, gap, cima_of_w) = linear_vae_stationary(&w, gamma_sq)?;
    // Mean log-likelihood of the linear model: x ~ N(0, W W^T + I/gamma_sq).
    let mut cov = w.matmul(&w.transpose())?;
    for k in 0..dim {
        cov[(k, k)] += 1.0 / gamma_sq;
    }
    let log_det = Lu::new(&cov)?.log_abs_det();
    let log_px =
        -0.5 * (dim as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * dim as f64;
    record.log_px = Some(log_px);
    record.elbo_star = Some(log_px - gap);
    record.cima_local_mean = Some(cima_of_w);
    record.cima_global = Some(cima_of_w);
    record.mean_sigma_sq = Some(d_star.iter().sum::<f64>() / dim as f64);
    Ok(())
}

/// Mean decoder contrast at encoder means over the test split.
fn mean_decoder_contrast(model: &VaeModel, data: &Dataset) -> CoreResult<f64> {
    let test_idx = data.indices(Split::Test);
    let mut acc = 0.0;
    let mut n = 0usize;
    for &i in &test_idx {
        let (mu, _) = encode(model, data.observation(i))?;
        let j = mlp_jacobian(&model.decoder, &mu)?;
        match cima_local(&j) {
            Ok(c) => {
                acc += c;
                n += 1;
            }
            // Skip the rare singular point; the mean over the split stands.
            Err(vaelab::Error::Singular(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if n == 0 {
        return Err(vaelab::Error::Estimation(
            "decoder contrast undefined at every test point".into(),
        ));
    }
    Ok(acc / n as f64)
}

/// Recomputes exactly one grid cell in isolation. Cells derive all their
/// randomness from (master seed, seed, gamma index, severity index), so the
/// result is identical to the same cell of a full run.
pub fn run_single_cell(
    config: &ExperimentConfig,
    seed_idx: usize,
    gamma_idx: usize,
    severity_idx: usize,
) -> anyhow::Result<RunRecord> {
    config.validate()?;
    anyhow::ensure!(seed_idx < config.seeds.len(), "seed index out of range");
    anyhow::ensure!(gamma_idx < config.gamma_sq_grid.len(), "gamma index out of range");
    let n_sev = config.cima_severity_grid.len().max(1);
    anyhow::ensure!(severity_idx < n_sev, "severity index out of range");
    Ok(run_cell(
        config,
        Cell {
            seed_idx,
            gamma_idx,
            severity_idx,
        },
    ))
}

/// Ground-truth mixing of a config's seed cell (undistorted severity slot);
/// used by the acceptance suite to probe mixings directly.
pub fn mixing_for_seed(config: &ExperimentConfig, seed_idx: usize) -> CoreResult<MixingSpec> {
    build_mixing(
        config,
        Cell {
            seed_idx,
            gamma_idx: 0,
            severity_idx: 0,
        },
    )
}

/// Dataset generation for the `gen-data` subcommand: the cell (seed_idx 0,
/// gamma_idx 0, severity_idx 0) dataset of the given config.
pub fn generate_dataset(config: &ExperimentConfig) -> anyhow::Result<Dataset> {
    config.validate()?;
    let cell = Cell {
        seed_idx: 0,
        gamma_idx: 0,
        severity_idx: 0,
    };
    let spec = build_mixing(config, cell)?;
    Ok(build_dataset(config, cell, &spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::records_to_csv;

    #[test]
    fn linear_closed_form_runs_fast_and_fills_fields() {
        let config = ExperimentConfig::preset(ExperimentKind::LinearClosedForm, false);
        let start = std::time::Instant::now();
        let (records, clocks) = run_experiment(&config, 1).unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0, "closed forms must be fast");
        assert_eq!(records.len(), 20 * 4);
        assert_eq!(clocks.len(), records.len());
        for r in &records {
            assert!(r.error.is_none(), "{:?}", r.error);
            assert!(r.elbo_star.unwrap().is_finite());
            assert!(r.cima_local_mean.unwrap() >= -1e-12);
            // ELBO* = log p - gap <= log p.
            assert!(r.elbo_star.unwrap() <= r.log_px.unwrap() + 1e-12);
        }
        // At gamma_sq = 1e10 the gap matches the contrast within 1e-4.
        for r in records.iter().filter(|r| r.gamma_sq == 1e10) {
            let gap = r.log_px.unwrap() - r.elbo_star.unwrap();
            assert!((gap - r.cima_local_mean.unwrap()).abs() < 1e-4);
        }
    }

    #[test]
    fn records_are_deterministic_across_worker_counts() {
        let config = ExperimentConfig::preset(ExperimentKind::LinearClosedForm, false);
        let (r1, _) = run_experiment(&config, 1).unwrap();
        let (r2, _) = run_experiment(&config, 4).unwrap();
        assert_eq!(
            records_to_csv(&r1).unwrap(),
            records_to_csv(&r2).unwrap()
        );
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let mut config = ExperimentConfig::preset(ExperimentKind::MoebiusMcc, false);
        config.samples = crate::config::SamplesSpec { train: 32, val: 8, test: 8 };
        let a = generate_dataset(&config).unwrap();
        let b = generate_dataset(&config).unwrap();
        assert_eq!(a.sources, b.sources);
        assert_eq!(a.observations, b.observations);
    }

    #[test]
    fn single_cell_reproduces_full_run_cell() {
        let config = ExperimentConfig::preset(ExperimentKind::LinearClosedForm, false);
        let (records, _) = run_experiment(&config, 2).unwrap();
        // Cell order is (seed, gamma); probe a few interior cells.
        let n_gamma = config.gamma_sq_grid.len();
        for (seed_idx, gamma_idx) in [(0, 0), (3, 2), (19, 3)] {
            let isolated = run_single_cell(&config, seed_idx, gamma_idx, 0).unwrap();
            assert_eq!(records[seed_idx * n_gamma + gamma_idx], isolated);
        }
    }

    #[test]
    fn moebius_records_populate_mixing_contrast() {
        // Tiny run exercising the record plumbing: the undistorted Moebius
        // mixing is conformal, so its global contrast is ~0 while the record
        // stays fully populated and finite.
        let mut config = ExperimentConfig::preset(ExperimentKind::MoebiusMcc, false);
        config.samples = crate::config::SamplesSpec { train: 96, val: 32, test: 32 };
        config.gamma_sq_grid = vec![1e3];
        config.seeds = vec![0];
        config.train.max_epochs = 2;
        config.train.patience = 2;
        config.n_mc_cima = 1000;
        config.n_mc_elbo = 4;
        let (records, _) = run_experiment(&config, 1).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert!(r.error.is_none(), "{:?}", r.error);
        assert!(r.cima_global.unwrap().abs() < 1e-6);
        assert!(r.mcc.unwrap().is_finite());
        assert!(r.elbo_star.unwrap().is_finite());
        assert!(r.severity == Some(0.0));
    }
}
