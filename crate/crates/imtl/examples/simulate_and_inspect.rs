//! Generate a small synthetic four-modality dataset and look inside.

use imtl::simulate::{generate, SimConfig};

fn main() {
    let cfg = SimConfig {
        n_train: 20,
        n_validation: 10,
        n_test: 10,
        d_pix: 32,
        seed: 1,
        ..SimConfig::default()
    };
    let (train, validation, test) = generate(&cfg).unwrap();
    println!(
        "subjects: {} train / {} validation / {} test, {} modalities of {:?}",
        train.n_subjects(),
        validation.n_subjects(),
        test.n_subjects(),
        train.n_modalities(),
        train.dims()
    );

    let labels = train.labels().unwrap();
    let cases = labels.iter().filter(|&&y| y == 1).count();
    println!("train prevalence: {cases}/{}", labels.len());

    // signal pixels carry value 2 plus noise; count bright pixels per subject
    for i in 0..5 {
        let img = train.image(i, 0).unwrap();
        let bright = img.values().iter().filter(|&&v| v > 1.0).count();
        println!(
            "subject {i}: label {}, ~{bright} signal pixels, image norm {:.2}",
            labels[i],
            img.frobenius_norm()
        );
    }
}
