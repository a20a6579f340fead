//! Synthetic four-modality image generator for the benchmark experiments.
//!
//! Each subject's image per modality is signal + background + noise: a sparse
//! constant-valued signal at random pixel locations shared across modalities,
//! a modality-specific background (i.i.d. noise, a constant field, or a
//! shared low-rank field), and i.i.d. Gaussian noise shared across the
//! subject's modalities.
//!
//! Draw order (fixed so a seed pins the dataset bit-for-bit): per dataset,
//! first the low-rank background factors for modalities 3+, one modality at a
//! time (per component: the weight-free mode-1 factor then the mode-2
//! factor); then per subject: label, signal-pixel count, signal locations,
//! the shared noise field, then per-modality background draws in modality
//! order.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::MultimodalDataset;
use crate::error::{Error, Result};
use crate::tensor::{outer_rank1, DenseTensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Marginal image dimension; images are `d_pix x d_pix`.
    pub d_pix: usize,
    pub modalities: usize,
    /// Case prevalence.
    pub p_y: f64,
    pub signal_value: f64,
    /// Mean signal-pixel count for cases.
    pub mu_case: f64,
    /// Mean signal-pixel count for controls.
    pub mu_control: f64,
    pub noise_sd: f64,
    pub background_sd: f64,
    /// Rank of the low-rank backgrounds of modalities 3+.
    pub background_rank: usize,
    /// Redraw the low-rank background factors per subject instead of once
    /// per dataset.
    pub per_subject_background: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_train: 60,
            n_validation: 60,
            n_test: 60,
            d_pix: 64,
            modalities: 4,
            p_y: 0.4,
            signal_value: 2.0,
            mu_case: 25.0,
            mu_control: 5.0,
            noise_sd: 0.2,
            background_sd: 0.1,
            background_rank: 5,
            per_subject_background: false,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_validation == 0 || self.n_test == 0 {
            return Err(Error::Config("subject counts must be positive".into()));
        }
        if self.d_pix == 0 || self.modalities == 0 || self.background_rank == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !(self.p_y > 0.0 && self.p_y < 1.0) {
            return Err(Error::Config("prevalence must lie in (0,1)".into()));
        }
        if self.mu_case <= 0.0 || self.mu_control <= 0.0 {
            return Err(Error::Config("signal-count means must be positive".into()));
        }
        if self.noise_sd < 0.0 || self.background_sd < 0.0 {
            return Err(Error::Config("standard deviations must be non-negative".into()));
        }
        Ok(())
    }
}

struct LowRankBackground {
    /// Per modality 3+, per component: (mode-1 vector, mode-2 vector).
    factors: Vec<Vec<(DVector<f64>, DVector<f64>)>>,
}

fn draw_background_factors(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> LowRankBackground {
    let unit = Normal::new(0.0, 1.0).unwrap();
    let half = Normal::new(0.0, 0.5f64.sqrt()).unwrap();
    let factors = (2..cfg.modalities)
        .map(|_| {
            (0..cfg.background_rank)
                .map(|_| {
                    let a1 = DVector::from_fn(cfg.d_pix, |_, _| unit.sample(rng));
                    let a2 = DVector::from_fn(cfg.d_pix, |_, _| half.sample(rng));
                    (a1, a2)
                })
                .collect()
        })
        .collect();
    LowRankBackground { factors }
}

fn generate_one(cfg: &SimConfig, rng: &mut ChaCha8Rng, n: usize) -> Result<MultimodalDataset> {
    let p = cfg.d_pix * cfg.d_pix;
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let bg = Normal::new(0.0, cfg.background_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut shared = if cfg.per_subject_background {
        None
    } else {
        Some(draw_background_factors(cfg, rng))
    };

    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = u8::from(rng.random_range(0.0..1.0) < cfg.p_y);
        labels.push(y);
        let mean = if y == 1 { cfg.mu_case } else { cfg.mu_control };
        let pois = Poisson::new(mean).map_err(|e| Error::Config(e.to_string()))?;
        let mut count = pois.sample(rng) as usize;
        while count > p {
            count = pois.sample(rng) as usize;
        }
        let locations = rand::seq::index::sample(rng, p, count);

        let mut signal = vec![0.0f64; p];
        for loc in locations.iter() {
            signal[loc] = cfg.signal_value;
        }
        let noise_field: Vec<f64> = (0..p).map(|_| noise.sample(rng)).collect();

        if cfg.per_subject_background {
            shared = Some(draw_background_factors(cfg, rng));
        }
        let lowrank = shared.as_ref().expect("background factors drawn");

        let mut row = Vec::with_capacity(cfg.modalities);
        for m in 0..cfg.modalities {
            let mut vals: Vec<f64> = signal
                .iter()
                .zip(&noise_field)
                .map(|(s, e)| s + e)
                .collect();
            match m {
                0 => {
                    for v in vals.iter_mut() {
                        *v += bg.sample(rng);
                    }
                }
                1 => {
                    let w = bg.sample(rng);
                    for v in vals.iter_mut() {
                        *v += w;
                    }
                }
                _ => {
                    for (a1, a2) in &lowrank.factors[m - 2] {
                        let w = bg.sample(rng);
                        let field = outer_rank1(&[w * a1, a2.clone()])?;
                        for (v, f) in vals.iter_mut().zip(field.values()) {
                            *v += f;
                        }
                    }
                }
            }
            row.push(Some(DenseTensor::new(vec![cfg.d_pix, cfg.d_pix], vals)?));
        }
        images.push(row);
    }
    MultimodalDataset::new(images, Some(labels))
}

/// Generates the train, validation and test sets from three independent
/// streams of one seeded generator. Identical configs produce bit-identical
/// datasets.
pub fn generate(
    cfg: &SimConfig,
) -> Result<(MultimodalDataset, MultimodalDataset, MultimodalDataset)> {
    cfg.validate()?;
    let counts = [cfg.n_train, cfg.n_validation, cfg.n_test];
    let mut parts = Vec::with_capacity(3);
    for (stream, &n) in counts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream as u64);
        parts.push(generate_one(cfg, &mut rng, n)?);
    }
    let test = parts.pop().expect("three parts");
    let validation = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok((train, validation, test))
}
