use vaelab::metrics::fit_loglog_slope;
use vaelab_cli::config::{ExperimentConfig, ExperimentKind};
use vaelab_cli::runner::run_experiment;

#[test]
#[ignore]
fn sweep_c4_diagnostics() {
    let config = ExperimentConfig::preset(ExperimentKind::SelfConsistency, false);
    let t0 = std::time::Instant::now();
    let (records, clocks) = run_experiment(&config, 0).unwrap();
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    for (r, c) in records.iter().zip(&clocks) {
        println!(
            "seed {} gamma {:>9}: s2 {:.3e} optl_err {:.3} recon {:.3e} elbo* {:8.3} ({:.0}s) {:?}",
            r.seed,
            r.gamma_sq,
            r.mean_sigma_sq.unwrap_or(f64::NAN),
            r.optl_sigma_rel_err.unwrap_or(f64::NAN),
            r.median_recon_gap.unwrap_or(f64::NAN),
            r.elbo_star.unwrap_or(f64::NAN),
            c,
            r.error
        );
    }
    let xs: Vec<f64> = records.iter().map(|r| r.gamma_sq).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.mean_sigma_sq.unwrap()).collect();
    let (slope, _, r2) = fit_loglog_slope(&xs, &ys).unwrap();
    println!("slope {slope:.4} (r2 {r2:.4})");
}
