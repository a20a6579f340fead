//! Full two-stage pipeline on one synthetic split: decompose all images,
//! tune the penalties on the validation set, evaluate on the test set.

use imtl::experiment::{run_experiment, ExperimentConfig};
use imtl::simulate::SimConfig;

fn main() {
    let cfg = ExperimentConfig {
        sim: SimConfig {
            n_train: 40,
            n_validation: 20,
            n_test: 20,
            d_pix: 32,
            ..SimConfig::default()
        },
        r_grid: vec![2, 4],
        lambda_s_grid: vec![1.0],
        lambda_beta_grid: vec![0.02, 0.08, 0.2],
        replications: 1,
        seed: 11,
        ..ExperimentConfig::default()
    };
    let result = run_experiment(&cfg).unwrap();
    let row = &result.rows[0];
    println!(
        "selected rank {} lambda_s {} lambda_beta {}",
        row.rank, row.lambda_s, row.lambda_beta
    );
    println!(
        "test accuracy {:.3}, sensitivity {:.3}, specificity {:.3}",
        row.metrics.accuracy, row.metrics.sensitivity, row.metrics.specificity
    );
}
