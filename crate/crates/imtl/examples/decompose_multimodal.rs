//! Fit the multilayer decomposition on synthetic data and inspect the
//! shared bases, individual layers and extracted features.

use imtl::multilayer::{fit, FitOptions};
use imtl::simulate::{generate, SimConfig};

fn main() {
    let cfg = SimConfig {
        n_train: 30,
        n_validation: 1,
        n_test: 1,
        d_pix: 24,
        seed: 3,
        ..SimConfig::default()
    };
    let (train, _, _) = generate(&cfg).unwrap();

    let opts = FitOptions {
        restarts: 2,
        ..FitOptions::default()
    };
    let (model, report) = fit(&train, 3, 1.0, &opts).unwrap();

    println!(
        "converged: {} after {} outer iterations (restart {})",
        report.converged, report.outer_iterations, report.best_restart
    );
    println!("objective trace: {:?}", report.objective_trace);
    println!(
        "max |<basis, layer>| after normalization: {:.3e}",
        report.max_cross_inner
    );

    // per-subject features: modality weights, layer weight, layer factors
    for i in 0..5 {
        let f = model.extract_features(i).unwrap();
        println!(
            "subject {i}: layer weight {:.2}, first modality weights {:?}",
            f.individual_weight,
            f.modality_weights
                .row(0)
                .iter()
                .map(|v| (v * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
    }

    // reconstruction quality of the first image
    let x = train.image(0, 0).unwrap();
    let err = x
        .sub(&model.reconstruct_subject(0, 0))
        .unwrap()
        .frobenius_norm()
        / x.frobenius_norm();
    println!("relative reconstruction error, subject 0 modality 1: {err:.3}");
}
