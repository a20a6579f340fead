//! Check the sufficient uniqueness condition of a fitted decomposition:
//! summed Kruskal ranks of the stacked basis/layer factors must reach
//! 2R + n + D.

use imtl::identifiability::check_identifiability;
use imtl::multilayer::{fit, FitOptions};
use imtl::simulate::{generate, SimConfig};

fn main() {
    let cfg = SimConfig {
        n_train: 12,
        n_validation: 1,
        n_test: 1,
        d_pix: 16,
        seed: 7,
        ..SimConfig::default()
    };
    let (train, _, _) = generate(&cfg).unwrap();
    let opts = FitOptions {
        restarts: 1,
        ..FitOptions::default()
    };
    let (model, _) = fit(&train, 2, 1.0, &opts).unwrap();

    let report = check_identifiability(&model, &[0, 1, 2]).unwrap();
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    println!(
        "threshold 2R+n+D = {}; satisfied: {}",
        report.threshold, report.satisfied
    );
}
