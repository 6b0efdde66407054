//! Seeded synthetic QoS matrices for tests and smoke runs.
//!
//! Values are `max(0, u_i · v_j + ε)` where each factor entry is drawn from
//! `U(0, 1)` plus a per-region offset from `U(0, 0.5)`, so region metadata
//! carries real signal. `ε ~ N(0, σ²)`.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::{EntityKind, Metadata, Observation, QosMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub n_users: usize,
    pub n_services: usize,
    pub rank: usize,
    pub noise_sigma: f64,
    /// Fraction of cells that are observed at all.
    pub observed_fraction: f64,
    pub n_user_regions: usize,
    pub n_service_regions: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            n_users: 50,
            n_services: 100,
            rank: 3,
            noise_sigma: 0.05,
            observed_fraction: 1.0,
            n_user_regions: 4,
            n_service_regions: 6,
            seed: 7,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_services == 0 || self.rank == 0 {
            return Err(Error::Config(
                "fixture needs at least one user, service and latent factor".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !(self.observed_fraction > 0.0 && self.observed_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "observed_fraction must be in (0, 1], got {}",
                self.observed_fraction
            )));
        }
        if self.n_user_regions == 0 || self.n_service_regions == 0 {
            return Err(Error::Config("region counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub matrix: QosMatrix,
    pub users: Metadata,
    pub services: Metadata,
}

fn factors(
    rng: &mut Xoshiro256PlusPlus,
    n: usize,
    rank: usize,
    n_regions: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let offsets: Vec<Vec<f64>> = (0..n_regions)
        .map(|_| (0..rank).map(|_| rng.random_range(0.0..0.5)).collect())
        .collect();
    let regions: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_regions)).collect();
    let rows = regions
        .iter()
        .map(|&r| {
            offsets[r]
                .iter()
                .map(|o| o + rng.random_range(0.0..1.0))
                .collect()
        })
        .collect();
    (rows, regions)
}

fn metadata(kind: EntityKind, prefix: &str, regions: &[usize]) -> Result<Metadata> {
    let names: Vec<String> = regions.iter().map(|r| format!("{prefix}{r}")).collect();
    Metadata::from_rows(kind, names.iter().enumerate().map(|(i, s)| (i, s.as_str())))
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let (u, user_regions) = factors(&mut rng, spec.n_users, spec.rank, spec.n_user_regions);
    let (v, service_regions) =
        factors(&mut rng, spec.n_services, spec.rank, spec.n_service_regions);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;

    let mut entries = Vec::new();
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            let keep = spec.observed_fraction >= 1.0 || rng.random::<f64>() < spec.observed_fraction;
            let eps = noise.sample(&mut rng);
            if keep {
                let q: f64 = ui.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>() + eps;
                entries.push(Observation::new(i, j, q.max(0.0)));
            }
        }
    }
    Ok(Fixture {
        matrix: QosMatrix::new(spec.n_users, spec.n_services, entries)?,
        users: metadata(EntityKind::User, "UR", &user_regions)?,
        services: metadata(EntityKind::Service, "SR", &service_regions)?,
    })
}
