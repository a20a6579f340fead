//! Paired benchmark of the multilayer method against the homogeneous CP
//! baseline over seed-matched replications, emitting the summary CSV.

use imtl::experiment::{run_experiment, ExperimentConfig, Method};
use imtl::simulate::SimConfig;

fn main() {
    let base = ExperimentConfig {
        sim: SimConfig {
            n_train: 30,
            n_validation: 15,
            n_test: 15,
            d_pix: 32,
            ..SimConfig::default()
        },
        replications: 5,
        seed: 13,
        ..ExperimentConfig::default()
    };

    for method in [Method::Imtl, Method::Hocpd] {
        let cfg = ExperimentConfig {
            method,
            ..base.clone()
        };
        let res = run_experiment(&cfg).unwrap();
        println!("== {method} ==");
        print!("{}", res.to_csv_string());
        println!(
            "mean accuracy {:.3} (se {:.3})",
            res.accuracy.mean, res.accuracy.standard_error
        );
    }
}
