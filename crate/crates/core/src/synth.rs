//! Seeded synthetic stand-in for a seasonal place-recognition stream.
//!
//! Every class owns a base centroid plus two orthonormal drift directions.
//! Season `t` shifts each centroid around the circle spanned by those
//! directions at phase `2π((t - 1) mod P) / P`, so the class-conditional
//! distributions repeat exactly every `P` seasons. Viewpoints are placed
//! inside a dedicated grid cell per class so grid labeling recovers the
//! generating class.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DomainSequence, GridCell, Sample, SeasonDataset, Viewpoint};
use crate::distill::TransferSet;
use crate::error::{Result, RkdError};
use crate::seed::{rng_from, SeedRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seasons: usize,
    pub classes: usize,
    pub features: usize,
    pub samples_per_class: usize,
    /// Radius of the cyclic centroid shift.
    pub drift: f64,
    /// Seasons per drift cycle.
    pub period: usize,
    /// Isotropic per-feature noise standard deviation.
    pub noise: f64,
    /// Norm of each class's base centroid.
    pub centroid_scale: f64,
    pub cell_size: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seasons: 8,
            classes: 16,
            features: 16,
            samples_per_class: 40,
            drift: 2.0,
            period: 4,
            noise: 1.0,
            centroid_scale: 3.0,
            cell_size: 20.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RkdError::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!(
                "synthetic data needs at least 2 classes, got {}",
                self.classes
            ));
        }
        if self.features < 1 {
            return bad("synthetic data needs at least 1 feature".into());
        }
        if self.seasons < 1 {
            return bad("synthetic data needs at least 1 season".into());
        }
        if self.samples_per_class < 1 {
            return bad("samples_per_class must be at least 1".into());
        }
        if self.period < 1 {
            return bad("drift period must be at least 1".into());
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return bad(format!(
                "drift must be finite and non-negative, got {}",
                self.drift
            ));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be positive, got {}", self.noise));
        }
        if !(self.centroid_scale >= 0.0 && self.centroid_scale.is_finite()) {
            return bad("centroid_scale must be finite and non-negative".into());
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return bad("cell_size must be positive".into());
        }
        Ok(())
    }

    fn grid_width(&self) -> usize {
        (self.classes as f64).sqrt().ceil() as usize
    }

    /// Grid cell assigned to `class`; cells are lexicographically increasing in `class`.
    pub fn class_cell(&self, class: usize) -> GridCell {
        let w = self.grid_width();
        GridCell {
            ix: (class / w) as i64,
            iy: (class % w) as i64,
        }
    }
}

/// The generating centroids of a synthetic stream.
#[derive(Debug, Clone)]
pub struct SynthModel {
    config: SynthConfig,
    seed: u64,
    base: Vec<Vec<f64>>,
    drift_u: Vec<Vec<f64>>,
    drift_w: Vec<Vec<f64>>,
}

fn random_unit(rng: &mut SeedRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl SynthModel {
    pub fn new(config: &SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed, &[0]);
        let f = config.features;
        let mut base = Vec::with_capacity(config.classes);
        let mut drift_u = Vec::with_capacity(config.classes);
        let mut drift_w = Vec::with_capacity(config.classes);
        for _ in 0..config.classes {
            base.push(
                random_unit(&mut rng, f)
                    .into_iter()
                    .map(|x| x * config.centroid_scale)
                    .collect(),
            );
            let u = random_unit(&mut rng, f);
            let raw = random_unit(&mut rng, f);
            let dot: f64 = raw.iter().zip(&u).map(|(a, b)| a * b).sum();
            let mut w: Vec<f64> = raw.iter().zip(&u).map(|(r, u)| r - dot * u).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                w.iter_mut().for_each(|x| *x /= norm);
            } else {
                // Only reachable when F == 1: the drift degenerates to a line.
                w.iter_mut().for_each(|x| *x = 0.0);
            }
            drift_u.push(u);
            drift_w.push(w);
        }
        Ok(SynthModel {
            config: config.clone(),
            seed,
            base,
            drift_u,
            drift_w,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    fn centroid_at_phase(&self, class: usize, phase: f64) -> Vec<f64> {
        let (s, c) = phase.sin_cos();
        let d = self.config.drift;
        self.base[class]
            .iter()
            .zip(&self.drift_u[class])
            .zip(&self.drift_w[class])
            .map(|((b, u), w)| b + d * (c * u + s * w))
            .collect()
    }

    /// Class-conditional mean at 1-based season `t`.
    pub fn centroid(&self, class: usize, season: usize) -> Vec<f64> {
        let p = self.config.period;
        let k = (season.max(1) - 1) % p;
        self.centroid_at_phase(class, 2.0 * PI * k as f64 / p as f64)
    }

    fn draw_features(&self, rng: &mut SeedRng, centroid: &[f64]) -> Vec<f64> {
        centroid
            .iter()
            .map(|m| m + self.config.noise * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn draw_viewpoint(&self, rng: &mut SeedRng, class: usize) -> Viewpoint {
        let cell = self.config.class_cell(class);
        let s = self.config.cell_size;
        let x = (cell.ix as f64 + 0.05 + 0.9 * rng.random::<f64>()) * s;
        let y = (cell.iy as f64 + 0.05 + 0.9 * rng.random::<f64>()) * s;
        Viewpoint::new(x, y)
    }

    /// Labeled samples of one season, classes interleaved.
    pub fn season(&self, season: usize) -> SeasonDataset {
        let mut rng = rng_from(self.seed, &[1, season as u64]);
        let centroids: Vec<Vec<f64>> = (0..self.config.classes)
            .map(|c| self.centroid(c, season))
            .collect();
        let mut samples = Vec::with_capacity(self.config.classes * self.config.samples_per_class);
        for _ in 0..self.config.samples_per_class {
            for (class, centroid) in centroids.iter().enumerate() {
                let viewpoint = self.draw_viewpoint(&mut rng, class);
                let features = self.draw_features(&mut rng, centroid);
                samples.push(Sample {
                    viewpoint,
                    features,
                    class_id: Some(class),
                    payload_ref: None,
                });
            }
        }
        SeasonDataset::new(season, format!("S{season}"), samples)
    }

    pub fn sequence(&self) -> DomainSequence {
        DomainSequence {
            seasons: (1..=self.config.seasons).map(|t| self.season(t)).collect(),
            valid_classes: (0..self.config.classes)
                .map(|c| self.config.class_cell(c))
                .collect(),
            cell_size: self.config.cell_size,
        }
    }

    /// Unlabeled corpus whose drift phase is drawn uniformly per sample, so it
    /// is off-phase from every season while covering the whole drift cycle.
    pub fn transfer_set(&self, size: usize) -> TransferSet {
        let mut rng = rng_from(self.seed, &[2]);
        let features = (0..size)
            .map(|_| {
                let class = rng.random_range(0..self.config.classes);
                let phase = 2.0 * PI * rng.random::<f64>();
                let centroid = self.centroid_at_phase(class, phase);
                self.draw_features(&mut rng, &centroid)
            })
            .collect();
        TransferSet::new(features)
    }
}

/// Generates a labeled seasonal sequence; identical `(config, seed)` gives identical data.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<DomainSequence> {
    Ok(SynthModel::new(config, seed)?.sequence())
}
