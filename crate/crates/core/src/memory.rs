//! Category-aware memory embeddings with a cubic momentum ramp.
//!
//! One unit vector per category-level query slot, blended toward the
//! current batch means with momentum that ramps from its base value up to
//! 1.0 over training, so the queries settle as learning converges.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::scene::LabelSpace;

/// Default momentum floor; the ramp starts here at iteration 0.
pub const DEFAULT_BASE_MOMENTUM: f64 = 0.9999;

/// Blend momentum at iteration `t` of `total`:
/// `1 - 0.0001 * (1 - t/total)^3`, increasing from 0.9999 to exactly 1.0.
pub fn momentum(t: usize, total: usize) -> f64 {
    momentum_with_base(t, total, DEFAULT_BASE_MOMENTUM)
}

/// [`momentum`] with a configurable floor, used by the momentum ablation.
pub fn momentum_with_base(t: usize, total: usize, base: f64) -> f64 {
    debug_assert!(total >= 1 && t <= total);
    let rest = 1.0 - t as f64 / total as f64;
    1.0 - (1.0 - base) * rest * rest * rest
}

/// Per-category unit query vectors, slowly updated during training.
///
/// Slot layout mirrors [`LabelSpace::query_index`]: stuff categories first,
/// then either one merged thing slot or one slot per thing category.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    num_stuff: usize,
    merged_things: bool,
    /// Flat `num_categories x dim`, each row unit-norm.
    vectors: Vec<f64>,
    current_iter: usize,
    total_iters: usize,
    base_momentum: f64,
    seed: u64,
}

impl MemoryBank {
    /// Initialize with i.i.d. Gaussian draws normalized to the unit sphere
    /// (uniform directions). Deterministic per seed.
    pub fn init(label_space: &LabelSpace, dim: usize, total_iters: usize, seed: u64) -> Result<Self> {
        Self::init_with_slots(
            label_space.query_count(),
            label_space.num_stuff,
            label_space.merge_things,
            dim,
            total_iters,
            seed,
        )
    }

    /// Raw constructor when no label space is at hand (tests, tools).
    pub fn init_with_slots(
        num_categories: usize,
        num_stuff: usize,
        merged_things: bool,
        dim: usize,
        total_iters: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "memory dim must be >= 2, got {dim}"
            )));
        }
        if num_categories == 0 || num_stuff > num_categories {
            return Err(Error::InvalidArgument(format!(
                "bad memory layout: {num_categories} slots, {num_stuff} stuff"
            )));
        }
        if total_iters == 0 {
            return Err(Error::InvalidArgument(
                "memory schedule needs total_iters >= 1".to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::with_capacity(num_categories * dim);
        for _ in 0..num_categories {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            vectors.extend(linalg::l2_normalize(&v)?);
        }
        Ok(Self {
            dim,
            num_stuff,
            merged_things,
            vectors,
            current_iter: 0,
            total_iters,
            base_momentum: DEFAULT_BASE_MOMENTUM,
            seed,
        })
    }

    /// Rebuild from persisted fields (checkpoint loading).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dim: usize,
        num_stuff: usize,
        merged_things: bool,
        vectors: Vec<f64>,
        current_iter: usize,
        total_iters: usize,
        base_momentum: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim < 2 || vectors.len() % dim != 0 {
            return Err(Error::Format(format!(
                "memory vector payload {} does not divide dim {dim}",
                vectors.len()
            )));
        }
        let num_categories = vectors.len() / dim;
        if num_categories == 0 || num_stuff > num_categories {
            return Err(Error::Format(format!(
                "bad memory layout: {num_categories} slots, {num_stuff} stuff"
            )));
        }
        if current_iter > total_iters || total_iters == 0 {
            return Err(Error::Format(format!(
                "bad memory schedule: iter {current_iter} of {total_iters}"
            )));
        }
        for (k, row) in vectors.chunks_exact(dim).enumerate() {
            let n = linalg::norm(row);
            if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
                return Err(Error::Format(format!(
                    "memory vector {k} is not unit norm (|v| = {n})"
                )));
            }
        }
        Ok(Self {
            dim,
            num_stuff,
            merged_things,
            vectors,
            current_iter,
            total_iters,
            base_momentum,
            seed,
        })
    }

    pub fn set_base_momentum(&mut self, base: f64) {
        self.base_momentum = base;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_categories(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn num_stuff(&self) -> usize {
        self.num_stuff
    }

    pub fn merged_things(&self) -> bool {
        self.merged_things
    }

    pub fn current_iter(&self) -> usize {
        self.current_iter
    }

    pub fn total_iters(&self) -> usize {
        self.total_iters
    }

    pub fn base_momentum(&self) -> f64 {
        self.base_momentum
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    /// Query vector for slot `k`.
    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// Thing-category vectors, available only when things were not merged.
    pub fn thing_vectors(&self) -> Result<&[f64]> {
        if self.merged_things || self.num_categories() <= self.num_stuff {
            return Err(Error::MergedBank);
        }
        Ok(&self.vectors[self.num_stuff * self.dim..])
    }

    /// Blend each slot present in `batch_means` toward its batch mean with
    /// the scheduled momentum, re-normalize, and advance the iteration
    /// counter. Slots absent from the batch stay untouched; callers must
    /// evaluate the loss against the pre-update state.
    pub fn update(&mut self, batch_means: &BTreeMap<u16, Vec<f64>>) -> Result<()> {
        if self.current_iter >= self.total_iters {
            return Err(Error::InvalidArgument(format!(
                "memory schedule exhausted at iter {}",
                self.current_iter
            )));
        }
        let lambda = momentum_with_base(self.current_iter, self.total_iters, self.base_momentum);
        for (&slot, mean) in batch_means {
            let slot = slot as usize;
            if slot >= self.num_categories() {
                return Err(Error::InvalidArgument(format!(
                    "batch mean for slot {slot} outside bank of {}",
                    self.num_categories()
                )));
            }
            if mean.len() != self.dim {
                return Err(Error::InvalidArgument(format!(
                    "batch mean dim {} does not match bank dim {}",
                    mean.len(),
                    self.dim
                )));
            }
            let row = slot * self.dim..(slot + 1) * self.dim;
            let blended: Vec<f64> = self.vectors[row.clone()]
                .iter()
                .zip(mean)
                .map(|(old, new)| lambda * old + (1.0 - lambda) * new)
                .collect();
            let unit = linalg::l2_normalize(&blended).map_err(|_| Error::ZeroNorm {
                context: format!("memory slot {slot} after blend"),
            })?;
            self.vectors[row].copy_from_slice(&unit);
        }
        self.current_iter += 1;
        Ok(())
    }
}
