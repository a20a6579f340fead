//! The homogeneous CP baseline: one joint decomposition of the stacked
//! subjects-by-image-by-modality tensor, no individual layers.

use imtl::hocpd::{fit_hocpd, HocpdOptions};
use imtl::simulate::{generate, SimConfig};

fn main() {
    let cfg = SimConfig {
        n_train: 30,
        n_validation: 1,
        n_test: 1,
        d_pix: 24,
        seed: 5,
        ..SimConfig::default()
    };
    let (train, _, _) = generate(&cfg).unwrap();
    let x = train.integrated_tensor().unwrap();
    println!("integrated tensor dims: {:?}", x.dims());

    let opts = HocpdOptions {
        restarts: 2,
        ..HocpdOptions::default()
    };
    let (model, report) = fit_hocpd(&x, 3, &opts).unwrap();
    println!(
        "converged: {} in {} sweeps; final loss {:.1} of {:.1}",
        report.converged,
        report.sweeps,
        report.objective_trace.last().unwrap(),
        x.squared_norm()
    );

    // subject loadings double as classification features
    for i in 0..5 {
        let row: Vec<f64> = model
            .w
            .row(i)
            .iter()
            .map(|v| (v * 100.0).round() / 100.0)
            .collect();
        println!("subject {i} loadings: {row:?}");
    }
}
