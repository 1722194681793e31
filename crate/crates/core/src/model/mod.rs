//! The trainable stack: encoder, per-level projection heads, the pluggable
//! fine-grained objective, momentum SGD and checkpoints.
//!
//! Parameters are visited in one fixed declaration order: encoder first,
//! then each head in level order. Gradients, velocity buffers and the
//! checkpoint tensor list all follow that order.

mod checkpoint;
mod encoder;
mod head;
mod infonce;
mod layers;

pub use checkpoint::{snapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{Encoder, EncoderCache};
pub use head::ProjectionHead;
pub use infonce::{
    infonce_loss, FineGrainedObjective, InfoNce, InfoNceOutput, ObjectiveOutput,
    DEFAULT_TEMPERATURE,
};
pub use layers::{BatchNorm, BatchNormCache, Linear, Mode};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};

use crate::config::{EncoderKind, TrainConfig};
use crate::error::{Error, Result};
use crate::rng::derived_rng;

const INIT_TAG: u64 = 0x1417;

/// Gradients aligned with [`TrainState::params`]. `None` leaves the
/// parameter and its velocity untouched for this step.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Option<ArrayD<f64>>>);

/// Everything needed to continue training: parameters, optimizer state,
/// counters and the config they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub heads: Vec<ProjectionHead>,
    pub velocity: Vec<ArrayD<f64>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    /// Fresh parameters for raw inputs of width `input_dim`, one head per
    /// configured prototype level.
    pub fn new(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be >= 1".into()));
        }
        let mut rng = derived_rng(config.seed, &[INIT_TAG]);
        let encoder = match config.encoder {
            EncoderKind::Mlp => {
                Encoder::mlp(input_dim, config.encoder_hidden, config.rep_dim, &mut rng)
            }
            EncoderKind::Identity => {
                if config.rep_dim != input_dim {
                    return Err(Error::Config(format!(
                        "identity encoder needs rep_dim == input dim ({} vs {input_dim})",
                        config.rep_dim
                    )));
                }
                Encoder::Identity { dim: input_dim }
            }
        };
        let heads = (0..config.level_sizes.len())
            .map(|_| {
                ProjectionHead::new(
                    config.rep_dim,
                    config.head_hidden,
                    config.head_layers,
                    config.use_norm,
                    &mut rng,
                )
            })
            .collect();
        let mut state = Self {
            config: config.clone(),
            encoder,
            heads,
            velocity: Vec::new(),
            epoch: 0,
            step: 0,
        };
        state.velocity = state
            .params()
            .iter()
            .map(|p| ArrayD::zeros(p.shape()))
            .collect();
        Ok(state)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = self.encoder.params();
        for h in &self.heads {
            out.extend(h.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = self.encoder.params_mut();
        for h in &mut self.heads {
            out.extend(h.params_mut());
        }
        out
    }

    pub fn buffers(&self) -> Vec<ArrayViewD<'_, f64>> {
        self.heads.iter().flat_map(|h| h.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.heads
            .iter_mut()
            .flat_map(|h| h.buffers_mut())
            .collect()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder.params().len()
    }

    /// Drops cached activations so equal states compare equal.
    pub fn clear_caches(&mut self) {
        for h in &mut self.heads {
            h.clear_cache();
        }
    }
}

/// Momentum SGD with L2 weight decay, visiting parameters in declaration
/// order:
///
/// ```text
/// g' = g + weight_decay * p
/// v  = momentum * v + g'
/// p  = p - lr * v
/// ```
pub fn sgd_step(
    state: &mut TrainState,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
        return Err(Error::Config(format!(
            "invalid optimizer settings lr={lr}, momentum={momentum}, weight_decay={weight_decay}"
        )));
    }
    let mut velocity = std::mem::take(&mut state.velocity);
    let result = (|| {
        let params = state.params_mut();
        if params.len() != grads.0.len() || params.len() != velocity.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, {} velocity buffers",
                params.len(),
                grads.0.len(),
                velocity.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads.0).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {i} has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        for ((mut p, g), v) in params.into_iter().zip(&grads.0).zip(velocity.iter_mut()) {
            let Some(g) = g else { continue };
            Zip::from(&mut p).and(v).and(g).for_each(|p, v, &g| {
                let g = g + weight_decay * *p;
                *v = momentum * *v + g;
                *p -= lr * *v;
            });
        }
        Ok(())
    })();
    state.velocity = velocity;
    result
}
