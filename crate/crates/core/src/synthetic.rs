//! Drifting latent-factor interaction stream for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::InteractionRecord;
use crate::error::{CcdError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub latent_dim: usize,
    /// Users present from the first block.
    pub num_users: usize,
    /// Items present from the first block.
    pub num_items: usize,
    pub num_blocks: usize,
    pub interactions_per_block: usize,
    /// Per-block rotation of user tastes toward a fresh random direction, in [0, 1].
    pub drift: f64,
    /// New users and items per block, as a fraction of the initial counts.
    pub arrival_rate: f64,
    /// Users active in block 1, silent until the last block, then active again.
    pub dormant_users: usize,
    /// Scale of the affinity logits; larger means sharper preferences.
    pub sharpness: f64,
    /// Standard deviation of the per-item log-popularity offset.
    pub popularity_spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            num_users: 300,
            num_items: 500,
            num_blocks: 6,
            interactions_per_block: 3000,
            drift: 0.5,
            arrival_rate: 0.0,
            dormant_users: 0,
            sharpness: 2.5,
            popularity_spread: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("num_blocks", self.num_blocks),
            ("interactions_per_block", self.interactions_per_block),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CcdError::config(format!("synthetic.{name}"), "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(CcdError::config("synthetic.drift", "must lie in [0, 1]"));
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return Err(CcdError::config("synthetic.arrival_rate", "must be >= 0"));
        }
        if !(self.sharpness > 0.0) || !(self.popularity_spread >= 0.0) {
            return Err(CcdError::config("synthetic.sharpness", "sharpness > 0 and popularity_spread >= 0 required"));
        }
        if self.dormant_users > self.num_users {
            return Err(CcdError::config("synthetic.dormant_users", "exceeds num_users"));
        }
        if self.dormant_users > 0 && self.num_blocks < 4 {
            return Err(CcdError::config("synthetic.dormant_users", "needs at least 4 blocks"));
        }
        Ok(())
    }
}

fn unit_vector(dim: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Generates `num_blocks * interactions_per_block` records with strictly
/// increasing timestamps, block by block.
/// `sqrt(1 - rho^2) * t + rho * fresh`, renormalized to unit length.
fn drift_taste(taste: &mut [f64], drift: f64, rng: &mut rng::Rng) {
    let keep = (1.0 - drift * drift).sqrt();
    let fresh = unit_vector(taste.len(), rng);
    for (t, f) in taste.iter_mut().zip(fresh) {
        *t = keep * *t + drift * f;
    }
    let norm = taste.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    taste.iter_mut().for_each(|x| *x /= norm);
}

pub fn generate_synthetic_stream(spec: &SyntheticSpec, seed: u64) -> Result<Vec<InteractionRecord>> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "synthetic", &[]);
    let dim = spec.latent_dim;
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");

    let mut tastes: Vec<Vec<f64>> = (0..spec.num_users).map(|_| unit_vector(dim, &mut rng)).collect();
    let mut traits: Vec<Vec<f64>> = Vec::new();
    let mut popularity: Vec<f64> = Vec::new();
    let add_item = |rng: &mut rng::Rng, traits: &mut Vec<Vec<f64>>, popularity: &mut Vec<f64>| {
        traits.push((0..dim).map(|_| StandardNormal.sample(rng)).collect());
        let z: f64 = StandardNormal.sample(rng);
        popularity.push(z * spec.popularity_spread);
    };
    for _ in 0..spec.num_items {
        add_item(&mut rng, &mut traits, &mut popularity);
    }
    let mut history: Vec<Vec<bool>> = vec![Vec::new(); spec.num_users];
    let new_users_per_block = (spec.arrival_rate * spec.num_users as f64).round() as usize;
    let new_items_per_block = (spec.arrival_rate * spec.num_items as f64).round() as usize;
    let last = spec.num_blocks - 1;

    let mut records = Vec::with_capacity(spec.num_blocks * spec.interactions_per_block);
    let mut clock = 0u64;
    for k in 0..spec.num_blocks {
        if k > 0 {
            for taste in tastes.iter_mut() {
                drift_taste(taste, spec.drift, &mut rng);
            }
            for _ in 0..new_users_per_block {
                tastes.push(unit_vector(dim, &mut rng));
                history.push(Vec::new());
            }
            for _ in 0..new_items_per_block {
                add_item(&mut rng, &mut traits, &mut popularity);
            }
        }
        let num_items = traits.len();
        let active: Vec<usize> = (0..tastes.len())
            .filter(|&u| !(u < spec.dormant_users && k >= 2 && k < last))
            .collect();

        // Even allocation, remainder to a random subset of users.
        let base = spec.interactions_per_block / active.len();
        let mut quota = vec![base; active.len()];
        let mut extra: Vec<usize> = (0..active.len()).collect();
        extra.shuffle(&mut rng);
        for &slot in extra.iter().take(spec.interactions_per_block - base * active.len()) {
            quota[slot] += 1;
        }

        let mut block = Vec::with_capacity(spec.interactions_per_block);
        for (slot, &u) in active.iter().enumerate() {
            history[u].resize(num_items, false);
            let mut keyed: Vec<(f64, usize)> = (0..num_items)
                .filter(|&i| !history[u][i])
                .map(|i| {
                    let affinity: f64 = tastes[u].iter().zip(&traits[i]).map(|(a, b)| a * b).sum();
                    let logit = spec.sharpness * affinity + popularity[i];
                    (logit + gumbel.sample(&mut rng), i)
                })
                .collect();
            let take = quota[slot].min(keyed.len());
            if take == 0 {
                continue;
            }
            keyed.select_nth_unstable_by(take - 1, |a, b| b.0.total_cmp(&a.0));
            for &(_, i) in &keyed[..take] {
                history[u][i] = true;
                block.push((u, i));
            }
        }
        block.shuffle(&mut rng);
        if block.len() < spec.interactions_per_block {
            return Err(CcdError::config(
                "synthetic.interactions_per_block",
                format!("block {k} exhausted the catalog ({} of {})", block.len(), spec.interactions_per_block),
            ));
        }
        for (u, i) in block {
            records.push(InteractionRecord::new(format!("u{u}"), format!("i{i}"), clock));
            clock += 1 + rng.random_range(0..3u64);
        }
    }
    Ok(records)
}
