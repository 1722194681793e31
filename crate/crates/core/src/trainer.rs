//! Two-stage training.
//!
//! Stage 1 runs `t1_epochs` of the fine-grained objective alone. Each of the
//! `t2_epochs` stage-2 epochs first rebuilds the prototype tree from the
//! current encoder's representations of the whole dataset, then takes
//! minibatch steps on the unweighted sum of the fine-grained loss and the
//! SPD loss. The tree is frozen for the rest of the epoch.
//!
//! All randomness is derived from the run seed and the epoch/step counters
//! stored in the [`TrainState`], so a run resumed from a checkpoint follows
//! exactly the same trajectory as an uninterrupted one.

use std::fs::OpenOptions;
use std::io::Write;

use ndarray::{Array2, ArrayD, ArrayView2};
use rand::seq::SliceRandom;

use crate::config::TrainConfig;
use crate::data_io::EmbeddingSet;
use crate::error::{Error, Result};
use crate::hkmeans::{extract_and_cluster, KMeansParams, PrototypeTree};
use crate::model::{sgd_step, FineGrainedObjective, Gradients, InfoNce, Mode, TrainState};
use crate::prototree::{path_from_root, sample_negative_roots, SemanticPath};
use crate::rng::{derive_seed, derived_rng, rng_from};
use crate::spd::{spd_loss, HierRep, SpdBatchLoss};

const STEP_TAG: u64 = 0x57E9;
const AUG_TAG: u64 = 0xA06;
const NEG_TAG: u64 = 0x4E6;
const SHUFFLE_TAG: u64 = 0x5AFF;
const REFRESH_TAG: u64 = 0x2EF2;

pub const LOG_HEADER: &str = "epoch,img_loss,spd_loss,total,refresh_wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub img: f64,
    pub spd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub stage: u8,
    pub img_loss: f64,
    pub spd_loss: f64,
    pub total: f64,
    pub refresh_wall_ms: Option<f64>,
    pub steps: usize,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.img_loss,
            self.spd_loss,
            self.total,
            self.refresh_wall_ms
                .map_or(String::new(), |ms| format!("{ms:.3}"))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainOptions {
    /// Run K-means assignment on the rayon pool. Results are unchanged.
    pub parallel: bool,
    /// Stop once this many epochs are complete (for checkpoint/resume).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    /// Prototype refreshes performed by this call.
    pub refreshes: usize,
    /// The tree used in the last stage-2 epoch, if any.
    pub last_tree: Option<PrototypeTree>,
}

/// Output of the composed encoder -> heads -> SPD pass for one batch.
#[derive(Debug, Clone)]
pub struct SpdTerm {
    pub batch: SpdBatchLoss,
    pub encoder_grads: Vec<ArrayD<f64>>,
    /// Per head, gradients in `ProjectionHead::params` order.
    pub head_grads: Vec<Vec<ArrayD<f64>>>,
}

pub fn objective_for(config: &TrainConfig) -> InfoNce {
    InfoNce {
        temperature: config.temperature,
        aug_sigma: config.aug_sigma,
    }
}

/// Positive path and `n_neg` sampled negatives for each sample in
/// `indices`. Sample `i`'s negatives come from a stream derived from
/// `step_seed` and `i`, so they do not depend on batch composition.
pub fn sample_paths(
    tree: &PrototypeTree,
    indices: &[usize],
    n_neg: usize,
    step_seed: u64,
) -> Result<(Vec<SemanticPath>, Vec<Vec<SemanticPath>>)> {
    let m1 = tree.levels[0].nrows();
    let mut pos = Vec::with_capacity(indices.len());
    let mut negs = Vec::with_capacity(indices.len());
    for &i in indices {
        let root = *tree
            .bottom_assign
            .get(i)
            .ok_or_else(|| Error::Index(format!("sample {i} has no bottom assignment")))?;
        pos.push(path_from_root(tree, root)?);
        let mut rng = derived_rng(step_seed, &[NEG_TAG, i as u64]);
        let roots = sample_negative_roots(m1, root, n_neg, &mut rng)?;
        negs.push(
            roots
                .into_iter()
                .map(|r| path_from_root(tree, r))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((pos, negs))
}

/// SPD loss of a batch through the encoder and every head, with gradients
/// for all of their parameters.
pub fn spd_term(
    state: &mut TrainState,
    batch: ArrayView2<f64>,
    pos: &[SemanticPath],
    negs: &[Vec<SemanticPath>],
    mode: Mode,
    eps: f64,
) -> Result<SpdTerm> {
    let (z0, cache) = state.encoder.forward_cached(batch);
    let mut levels = Vec::with_capacity(state.heads.len());
    for head in &mut state.heads {
        levels.push(head.forward(z0.view(), mode)?);
    }
    let (b, d) = z0.dim();
    let reps: Vec<HierRep> = (0..b)
        .map(|i| HierRep {
            z0: z0.row(i).to_owned(),
            z: Array2::from_shape_fn((levels.len(), d), |(l, j)| levels[l][[i, j]]),
        })
        .collect();
    let out = spd_loss(&reps, pos, negs, eps)?;

    let mut grad_z0 = Array2::<f64>::zeros((b, d));
    let mut head_grads = Vec::with_capacity(state.heads.len());
    for (l, head) in state.heads.iter().enumerate() {
        let g = Array2::from_shape_fn((b, d), |(i, j)| out.grad_z[i][[l, j]]);
        let (hg, gx) = head.backward(g.view())?;
        grad_z0 += &gx;
        head_grads.push(hg);
    }
    let (encoder_grads, _) = state.encoder.backward(&cache, grad_z0.view());
    Ok(SpdTerm {
        batch: out,
        encoder_grads,
        head_grads,
    })
}

/// One optimizer step on `L_img + L_spd` for the batch of rows `indices`.
/// Without a tree (or with SPD disabled) the step is a pure fine-grained
/// step and the heads are left untouched.
pub fn joint_step(
    state: &mut TrainState,
    objective: &dyn FineGrainedObjective,
    inputs: ArrayView2<f64>,
    indices: &[usize],
    tree: Option<&PrototypeTree>,
) -> Result<LossBreakdown> {
    let cfg = state.config.clone();
    let batch = Array2::from_shape_fn((indices.len(), inputs.ncols()), |(i, j)| {
        inputs[[indices[i], j]]
    });
    let step_seed = derive_seed(cfg.seed, &[STEP_TAG, state.step]);
    let mut aug_rng = derived_rng(step_seed, &[AUG_TAG]);
    let img = objective.loss_and_grads(&state.encoder, batch.view(), &mut aug_rng)?;
    let mut encoder_grads = img.encoder_grads;

    let mut head_grads: Vec<Option<Vec<ArrayD<f64>>>> = vec![None; state.heads.len()];
    let mut spd = 0.0;
    if let Some(tree) = tree.filter(|_| cfg.spd_enabled) {
        let (pos, negs) = sample_paths(tree, indices, cfg.n_neg, step_seed)?;
        let term = spd_term(state, batch.view(), &pos, &negs, Mode::Train, cfg.eps_clamp)?;
        for (acc, g) in encoder_grads.iter_mut().zip(term.encoder_grads) {
            *acc += &g;
        }
        head_grads = term.head_grads.into_iter().map(Some).collect();
        spd = term.batch.loss;
    }

    let total = img.loss + spd;
    if !total.is_finite() {
        return Err(Error::Divergence {
            epoch: state.epoch,
            step: state.step,
            reason: format!("non-finite loss (img={}, spd={spd})", img.loss),
            last_good: None,
        });
    }

    let mut grads: Vec<Option<ArrayD<f64>>> = encoder_grads.into_iter().map(Some).collect();
    for (head, hg) in state.heads.iter().zip(head_grads) {
        match hg {
            Some(g) => grads.extend(g.into_iter().map(Some)),
            None => grads.extend(head.params().iter().map(|_| None)),
        }
    }
    sgd_step(
        state,
        &Gradients(grads),
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
    )?;
    state.clear_caches();
    if state.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence {
            epoch: state.epoch,
            step: state.step,
            reason: "non-finite parameters after update".into(),
            last_good: None,
        });
    }
    state.step += 1;
    Ok(LossBreakdown {
        img: img.loss,
        spd,
        total,
    })
}

fn append_log(config: &TrainConfig, rows: &[EpochMetrics], fresh: bool) -> Result<()> {
    let Some(path) = &config.log else {
        return Ok(());
    };
    let write_header = fresh || !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)?;
    if write_header {
        writeln!(f, "{LOG_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Fresh training run from `config`.
pub fn train(config: &TrainConfig, data: &EmbeddingSet) -> Result<TrainOutcome> {
    train_with(config, data, &TrainOptions::default())
}

pub fn train_with(
    config: &TrainConfig,
    data: &EmbeddingSet,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let state = TrainState::new(config, data.d())?;
    if config.log.is_some() {
        append_log(config, &[], true)?;
    }
    resume(state, data, options)
}

/// Continues training `state` until its schedule (or `stop_after_epoch`)
/// is reached.
pub fn resume(
    mut state: TrainState,
    data: &EmbeddingSet,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    cfg.validate()?;
    if data.d() != state.input_dim() {
        return Err(Error::Shape(format!(
            "data has {} columns, model expects {}",
            data.d(),
            state.input_dim()
        )));
    }
    if cfg.t2_epochs > 0 && cfg.spd_enabled && data.n() < cfg.level_sizes[0] {
        return Err(Error::Config(format!(
            "n={} is smaller than M_1={}",
            data.n(),
            cfg.level_sizes[0]
        )));
    }
    let inputs = data.to_matrix();
    let objective = objective_for(&cfg);
    let kmeans = KMeansParams {
        max_iter: cfg.kmeans_max_iter,
        tol: cfg.kmeans_tol,
        parallel: options.parallel,
        ..KMeansParams::default()
    };
    let end = options
        .stop_after_epoch
        .map_or(cfg.total_epochs(), |e| e.min(cfg.total_epochs()));

    let mut metrics = Vec::new();
    let mut refreshes = 0;
    let mut last_tree = None;
    while state.epoch < end {
        let epoch = state.epoch;
        let last_good = state.clone();
        let stage2 = epoch >= cfg.t1_epochs;
        let mut refresh_ms = None;
        let tree = if stage2 && cfg.spd_enabled {
            let refresh = extract_and_cluster(
                &state,
                inputs.view(),
                &cfg.level_sizes,
                derive_seed(cfg.seed, &[REFRESH_TAG, epoch as u64]),
                &kmeans,
                (cfg.refresh_subsample > 0).then_some(cfg.refresh_subsample),
            )?;
            refreshes += 1;
            refresh_ms = Some(refresh.wall_ms);
            Some(refresh.tree)
        } else {
            None
        };

        let mut order: Vec<usize> = (0..data.n()).collect();
        order.shuffle(&mut rng_from(derive_seed(
            cfg.seed,
            &[SHUFFLE_TAG, epoch as u64],
        )));
        let (mut img, mut spd, mut total, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let step = joint_step(&mut state, &objective, inputs.view(), chunk, tree.as_ref());
            let losses = match step {
                Ok(l) => l,
                Err(Error::Divergence {
                    epoch,
                    step,
                    reason,
                    ..
                }) => {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        reason,
                        last_good: Some(Box::new(last_good)),
                    })
                }
                Err(e) => return Err(e),
            };
            img += losses.img;
            spd += losses.spd;
            total += losses.total;
            steps += 1;
        }
        let denom = steps.max(1) as f64;
        state.epoch += 1;
        let row = EpochMetrics {
            epoch: state.epoch,
            stage: if stage2 { 2 } else { 1 },
            img_loss: img / denom,
            spd_loss: spd / denom,
            total: total / denom,
            refresh_wall_ms: refresh_ms,
            steps,
        };
        append_log(&cfg, std::slice::from_ref(&row), false)?;
        if let Some(path) = &cfg.checkpoint {
            state.save(path)?;
        }
        metrics.push(row);
        if tree.is_some() {
            last_tree = tree;
        }
    }
    Ok(TrainOutcome {
        state,
        metrics,
        refreshes,
        last_tree,
    })
}

/// Encoder representations `z^0` for every row of `data`.
pub fn encode(state: &TrainState, data: &EmbeddingSet) -> Result<Array2<f64>> {
    if data.d() != state.input_dim() {
        return Err(Error::Shape(format!(
            "data has {} columns, model expects {}",
            data.d(),
            state.input_dim()
        )));
    }
    Ok(state.encoder.forward(data.to_matrix().view()))
}
