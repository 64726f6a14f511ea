//! Gradient descent on the embedding map with the memory update loop.
//!
//! Heavy-ball SGD with weight decay, a stepped learning-rate schedule, and
//! one scene per step. Each iteration evaluates the combined loss against
//! the pre-update memory bank, applies the parameter step, then blends the
//! bank toward the batch category means.

use serde::{Deserialize, Serialize};

use crate::embedding::{mean_segment_embeddings, EmbeddingMap};
use crate::error::{Error, Result};
use crate::loss::{ciae_loss, LossConfig};
use crate::memory::{momentum_with_base, MemoryBank, DEFAULT_BASE_MOMENTUM};
use crate::scene::{PanopticScene, VOID_ID};

/// Optimizer and schedule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub learning_rate: f64,
    /// `(fraction, factor)` pairs: once `iter >= fraction * total_iters`,
    /// the learning rate is multiplied by `factor` (each pair fires once).
    pub lr_decay: Vec<(f64, f64)>,
    /// Heavy-ball momentum on the parameter velocity.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Embedding dimension of the freshly initialized map.
    pub dim: usize,
    /// Memory-bank momentum floor (the ramp's starting value).
    pub memory_momentum: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 2000,
            learning_rate: 0.01,
            lr_decay: vec![(2.0 / 3.0, 0.1), (8.0 / 9.0, 0.1)],
            momentum: 0.9,
            weight_decay: 1e-4,
            dim: 32,
            memory_momentum: DEFAULT_BASE_MOMENTUM,
            log_every: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::InvalidArgument(
                "total_iters must be >= 1".to_string(),
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {} must be >= 2",
                self.dim
            )));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument(
                "log_every must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub l_cae: f64,
    pub l_iae: f64,
    pub l_ciae: f64,
    pub grad_max_norm: f64,
    pub memory_momentum: f64,
}

/// Loss history at the logging cadence; iterations strictly increase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// Columnar JSON view `{iters, l_cae, l_iae, l_ciae}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "iters": self.records.iter().map(|r| r.iter).collect::<Vec<_>>(),
            "l_cae": self.records.iter().map(|r| r.l_cae).collect::<Vec<_>>(),
            "l_iae": self.records.iter().map(|r| r.l_iae).collect::<Vec<_>>(),
            "l_ciae": self.records.iter().map(|r| r.l_ciae).collect::<Vec<_>>(),
        })
    }
}

/// Consecutive logged near-zero losses before stopping early.
const EARLY_STOP_PATIENCE: usize = 50;
const EARLY_STOP_THRESHOLD: f64 = 1e-6;

/// Optimize a fresh embedding map against `scenes` (cycled round-robin, one
/// per step). Returns the trained map, the final memory bank, and the loss
/// log. Fully deterministic for a fixed config.
pub fn train(
    scenes: &[PanopticScene],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(EmbeddingMap, MemoryBank, TrainLog)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no scenes to train on".to_string()));
    }
    let (h, w) = (scenes[0].height(), scenes[0].width());
    for s in scenes {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                context: "training scenes",
                left: (h, w),
                right: (s.height(), s.width()),
            });
        }
        if s.label_space() != scenes[0].label_space() {
            return Err(Error::InvalidArgument(
                "training scenes must share one label space".to_string(),
            ));
        }
    }

    let mut map = EmbeddingMap::init_random(h, w, cfg.dim, cfg.seed)?;
    // Decorrelate the bank stream from the map stream.
    let mut bank = MemoryBank::init(
        scenes[0].label_space(),
        cfg.dim,
        cfg.total_iters,
        cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
    )?;
    bank.set_base_momentum(cfg.memory_momentum);

    let mut velocity = vec![0.0; map.prenorm().len()];
    let mut log = TrainLog::default();
    let mut calm_streak = 0usize;

    for iter in 0..cfg.total_iters {
        let scene = &scenes[iter % scenes.len()];

        let mut lr = cfg.learning_rate;
        for (fraction, factor) in &cfg.lr_decay {
            if iter as f64 >= fraction * cfg.total_iters as f64 {
                lr *= factor;
            }
        }

        // Batch means over category-level slots, from the pre-step map.
        let space = scene.label_space();
        let slot_map: Vec<u16> = scene
            .semantic_map()
            .iter()
            .map(|&c| {
                if c == VOID_ID {
                    VOID_ID
                } else {
                    space.query_index(c) as u16
                }
            })
            .collect();
        let batch_means = mean_segment_embeddings(&map, &slot_map)?;

        let loss = ciae_loss(&map, scene, &bank, loss_cfg)?;
        if !loss.value.is_finite() {
            return Err(Error::DivergedLoss {
                iter,
                value: loss.value,
            });
        }

        let lambda =
            momentum_with_base(iter, cfg.total_iters, cfg.memory_momentum);
        let mut grad_max = 0.0f64;
        for g in &loss.grad {
            grad_max = grad_max.max(g.abs());
        }

        // Heavy-ball step: v <- mu v + (g + wd x); x <- x - lr v.
        map.apply_update(|params| {
            for ((x, v), g) in params.iter_mut().zip(&mut velocity).zip(&loss.grad) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *x;
                *x -= lr * *v;
            }
        });

        bank.update(&batch_means)?;

        if iter % cfg.log_every == 0 || iter + 1 == cfg.total_iters {
            log.records.push(TrainRecord {
                iter,
                l_cae: loss.cae_value,
                l_iae: loss.iae_value,
                l_ciae: loss.value,
                grad_max_norm: grad_max,
                memory_momentum: lambda,
            });
            if loss.value < EARLY_STOP_THRESHOLD {
                calm_streak += 1;
                if calm_streak >= EARLY_STOP_PATIENCE {
                    break;
                }
            } else {
                calm_streak = 0;
            }
        }
    }

    if let Some(bad) = map.prenorm().iter().find(|v| !v.is_finite()) {
        return Err(Error::DivergedLoss {
            iter: cfg.total_iters,
            value: *bad,
        });
    }
    Ok((map, bank, log))
}
