//! The three training procedures: backbone pretraining, joint adapter and
//! embedding training with the dispersion objective, and new-user fitting
//! by linear combination or direct embedding optimization.

use std::collections::BTreeMap;

use super::checkpoint::{Checkpoint, MetricPoint};
use super::{BatchSchedule, TrainError};
use crate::adapters::{combine, AdapterPair, DeltaSet, EmbeddingBank, UserEmbedding};
use crate::backbone::{Backbone, TextEncoding};
use crate::config::{
    DeltaReduction, ExperimentConfig, FitMode, LossWeights, StageConfig, Variant,
};
use crate::losses::{dispersion_loss, flow_loss, interpolate, total_loss};
use crate::rng::{derive_seed, Rng};
use crate::synth::{Dataset, Prompt, Sample};
use crate::tensor::{AdamParams, AdamState, Result as TensorResult, Tape, Tensor};

fn adam_for(stage: &StageConfig) -> AdamState {
    AdamState::new(AdamParams {
        lr: stage.learning_rate,
        ..AdamParams::default()
    })
}

/// L2 pull toward the stage's initial values, decoupled from the
/// gradient step. `rate` is `learning_rate * embedding_decay`.
fn anchored_decay(value: &Tensor, anchor: &Tensor, rate: f64) -> TensorResult<Tensor> {
    let data: Vec<f64> = value
        .data()
        .iter()
        .zip(anchor.data().iter())
        .map(|(w, w0)| w - rate * (w - w0))
        .collect();
    Tensor::new(value.shape().to_vec(), data)
}

fn randn_like(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), rng.normal_vec(shape.iter().product(), 1.0)).unwrap()
}

/// Two configs describe the same run when only their step budgets differ;
/// resuming a shorter run under a longer budget is legal.
pub fn configs_compatible(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let neutralize = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.stage0.steps = 1;
        c.stage1.steps = 1;
        c.stage2.steps = 1;
        c
    };
    neutralize(a) == neutralize(b)
}

/// Compute the modulation directions for one (user, prompt) pair under the
/// configured ablation variant: the prompt-preference path can be severed
/// (adapter sees the empty prompt) and either adapter's output zeroed.
pub fn preference_deltas(
    tape: &mut Tape,
    adapters: &AdapterPair,
    enc: &TextEncoding,
    empty_enc: &TextEncoding,
    user_matrix: &Tensor,
    variant: Variant,
) -> TensorResult<DeltaSet> {
    let adapter_enc = if variant == Variant::NoPpm {
        empty_enc
    } else {
        enc
    };
    let mut deltas = adapters.deltas(tape, adapter_enc, user_matrix)?;
    if variant == Variant::NoShared {
        deltas.shared = tape.constant(&Tensor::zeros(deltas.shared.shape()));
    }
    if variant == Variant::NoDistinct {
        let shape = deltas.distinct[0].shape().to_vec();
        deltas.distinct = deltas
            .distinct
            .iter()
            .map(|_| tape.constant(&Tensor::zeros(&shape)))
            .collect();
    }
    Ok(deltas)
}

/// Detached deltas for inference: built on a throwaway tape with frozen
/// weights, computed once per (user, prompt) and reused at all timesteps.
pub fn preference_deltas_detached(
    backbone: &Backbone,
    adapters: &AdapterPair,
    prompt: &Prompt,
    user_matrix: &Tensor,
    variant: Variant,
) -> TensorResult<DeltaSet> {
    let mut tape = Tape::new();
    let enc = backbone.encode_prompt(&mut tape, prompt)?;
    let empty_enc = backbone.encode_prompt(&mut tape, &Prompt::Empty)?;
    let deltas = preference_deltas(&mut tape, adapters, &enc, &empty_enc, user_matrix, variant)?;
    Ok(DeltaSet {
        shared: deltas.shared.detach(),
        distinct: deltas.distinct.iter().map(|d| d.detach()).collect(),
    })
}

/// Flattened per-user empty-prompt delta vectors (both adapters
/// concatenated), the representation behind the separation metric.
pub fn empty_prompt_delta_vectors(
    backbone: &Backbone,
    adapters: &AdapterPair,
    bank: &EmbeddingBank,
    variant: Variant,
) -> TensorResult<Vec<(u32, Vec<f64>)>> {
    let mut out = Vec::with_capacity(bank.len());
    for entry in &bank.embeddings {
        let mut tape = Tape::new();
        let empty_enc = backbone.encode_prompt(&mut tape, &Prompt::Empty)?;
        let deltas = preference_deltas(
            &mut tape,
            adapters,
            &empty_enc,
            &empty_enc,
            &entry.matrix,
            variant,
        )?;
        let mut flat = deltas.shared.data().to_vec();
        for d in &deltas.distinct {
            flat.extend_from_slice(d.data());
        }
        out.push((entry.user_id, flat));
    }
    Ok(out)
}

/// Mean pairwise distance between users' empty-prompt delta vectors.
pub fn empty_prompt_separation(
    backbone: &Backbone,
    adapters: &AdapterPair,
    bank: &EmbeddingBank,
    variant: Variant,
) -> TensorResult<f64> {
    let vectors = empty_prompt_delta_vectors(backbone, adapters, bank, variant)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in (i + 1)..vectors.len() {
            let d: f64 = vectors[i]
                .1
                .iter()
                .zip(vectors[j].1.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += d;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Mean absolute entry of the first bank user's prompt-path deltas; a
/// training-health probe for the modulation magnitude.
pub fn mean_delta_magnitude(
    backbone: &Backbone,
    adapters: &AdapterPair,
    bank: &EmbeddingBank,
    variant: Variant,
) -> TensorResult<f64> {
    let Some(entry) = bank.embeddings.first() else {
        return Ok(0.0);
    };
    let prompt = crate::synth::Prompt::all_content()[0];
    let deltas = preference_deltas_detached(backbone, adapters, &prompt, &entry.matrix, variant)?;
    let mut total = deltas.shared.data().iter().map(|v| v.abs()).sum::<f64>();
    let mut n = deltas.shared.numel();
    for d in &deltas.distinct {
        total += d.data().iter().map(|v| v.abs()).sum::<f64>();
        n += d.numel();
    }
    Ok(total / n as f64)
}

fn reduce_delta(
    tape: &mut Tape,
    deltas: &DeltaSet,
    reduction: DeltaReduction,
) -> TensorResult<(Tensor, Tensor)> {
    match reduction {
        DeltaReduction::Flatten => Ok((deltas.flat_shared(tape)?, deltas.flat_distinct(tape)?)),
        DeltaReduction::TokenMean => Ok((deltas.mean_shared(tape)?, deltas.mean_distinct(tape)?)),
    }
}

/// The adapter and bank state stage 1 starts from, before any step: the
/// zero-start the conditioned model must match the frozen backbone in.
pub fn stage1_initial_state(
    dataset: &Dataset,
    config: &ExperimentConfig,
) -> (AdapterPair, EmbeddingBank) {
    let user_ids: Vec<u32> = dataset.train_users().iter().map(|u| u.user_id).collect();
    (
        AdapterPair::init(
            &config.adapter,
            config.backbone.d_model,
            config.backbone.d_mod,
            config.backbone.blocks,
            derive_seed(config.stage1.seed, &[0xada9]),
        ),
        EmbeddingBank::init(
            &user_ids,
            &config.adapter,
            derive_seed(config.stage1.seed, &[0xe6b]),
        ),
    )
}

// ── Stage 0: backbone pretraining ────────────────────────────────────

/// Train backbone and prompt encoder on the flow objective alone, without
/// user conditioning. The result stands in for a pretrained base model.
pub fn pretrain_backbone(
    dataset: &Dataset,
    config: &ExperimentConfig,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint, TrainError> {
    config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let stage = &config.stage0;
    let samples = dataset.train_samples();
    if samples.is_empty() {
        return Err(TrainError::Config("dataset has no training samples".into()));
    }
    let schedule = BatchSchedule::new(
        samples.iter().map(|s| s.user_id).collect(),
        stage.batch_size,
        false,
        derive_seed(stage.seed, &[0xba7c]),
    )?;

    let (mut backbone, mut optimizer, mut rng, mut metrics, start_step) = match resume {
        None => (
            Backbone::init(&config.backbone, derive_seed(stage.seed, &[0x1217])),
            adam_for(stage),
            Rng::seed_from(derive_seed(stage.seed, &[0x90d])),
            Vec::new(),
            0u64,
        ),
        Some(ck) => {
            validate_resume(ck, config, 0)?;
            (
                ck.backbone.clone(),
                ck.optimizer.clone(),
                Rng::from_state(ck.rng_state),
                ck.metrics.clone(),
                ck.step,
            )
        }
    };

    for step in start_step..stage.steps as u64 {
        let result = pretrain_step(&backbone, &samples, &schedule, step, &mut rng);
        let (loss_value, grads) = match result {
            Ok(ok) => ok,
            Err(e) => {
                return Err(TrainError::Divergence {
                    step,
                    detail: e.to_string(),
                    last_finite: Box::new(build_checkpoint(
                        config, 0, step, backbone, None, None, optimizer, &rng, metrics,
                    )),
                })
            }
        };
        optimizer.advance();
        backbone = backbone
            .map_params(&mut |name, t| {
                let full = format!("backbone.{name}");
                match grads.get(&full) {
                    Some(g) => optimizer.update_one(&full, t, g),
                    None => Ok(t.clone()),
                }
            })
            .map_err(TrainError::Tensor)?;
        metrics.push(MetricPoint {
            step,
            name: "flow_loss".into(),
            value: loss_value,
        });
    }

    Ok(build_checkpoint(
        config,
        0,
        stage.steps as u64,
        backbone,
        None,
        None,
        optimizer,
        &rng,
        metrics,
    ))
}

fn pretrain_step(
    backbone: &Backbone,
    samples: &[&Sample],
    schedule: &BatchSchedule,
    step: u64,
    rng: &mut Rng,
) -> TensorResult<(f64, crate::tensor::GradMap)> {
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, "backbone", true)?;
    let batch = schedule.batch(step);
    let mut terms = Vec::with_capacity(batch.indices.len());
    for &idx in &batch.indices {
        let sample = samples[idx];
        let t = rng.next_f64();
        let z1 = randn_like(rng, sample.image.shape());
        let enc = bound.encode_prompt(&mut tape, &sample.prompt)?;
        let z_t = interpolate(&mut tape, &sample.image, &z1, t)?;
        let v = bound.velocity(&mut tape, &z_t, &enc, t, None, None)?;
        terms.push(flow_loss(&mut tape, &v, &sample.image, &z1)?);
    }
    let refs: Vec<&Tensor> = terms.iter().collect();
    let stacked = tape.concat(&refs, 0)?;
    let loss = tape.mean(&stacked)?;
    let value = loss.item();
    let grads = tape.backward(&loss)?;
    Ok((value, grads))
}

// ── Stage 1: joint adapter + embedding training ──────────────────────

/// Freeze the backbone, then jointly optimize both adapters and every
/// training user's embedding under the combined objective: per-sample flow
/// loss with that sample's own deltas, plus both dispersion losses over
/// the batch's distinct users on the empty prompt.
pub fn train_stage1(
    dataset: &Dataset,
    base: &Checkpoint,
    config: &ExperimentConfig,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint, TrainError> {
    config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if base.stage != 0 {
        return Err(TrainError::Config(format!(
            "stage 1 needs a stage-0 base checkpoint, got stage {}",
            base.stage
        )));
    }
    if base.config.backbone != config.backbone {
        return Err(TrainError::Config(
            "base checkpoint backbone configuration does not match".into(),
        ));
    }
    let stage = &config.stage1;
    let samples = dataset.train_samples();
    let user_ids: Vec<u32> = dataset.train_users().iter().map(|u| u.user_id).collect();
    if user_ids.len() < 2 {
        return Err(TrainError::Config("stage 1 needs at least 2 users".into()));
    }
    let schedule = BatchSchedule::new(
        samples.iter().map(|s| s.user_id).collect(),
        stage.batch_size,
        true,
        derive_seed(stage.seed, &[0xba7c]),
    )?;

    let backbone = base.backbone.clone();
    let (mut adapters, mut bank, mut optimizer, mut rng, mut metrics, start_step) = match resume {
        None => (
            AdapterPair::init(
                &config.adapter,
                config.backbone.d_model,
                config.backbone.d_mod,
                config.backbone.blocks,
                derive_seed(stage.seed, &[0xada9]),
            ),
            EmbeddingBank::init(&user_ids, &config.adapter, derive_seed(stage.seed, &[0xe6b])),
            adam_for(stage),
            Rng::seed_from(derive_seed(stage.seed, &[0x90d])),
            Vec::new(),
            0u64,
        ),
        Some(ck) => {
            validate_resume(ck, config, 1)?;
            (
                ck.adapters.clone().ok_or_else(|| {
                    TrainError::Checkpoint("stage-1 checkpoint lacks adapters".into())
                })?,
                ck.bank.clone().ok_or_else(|| {
                    TrainError::Checkpoint("stage-1 checkpoint lacks the embedding bank".into())
                })?,
                ck.optimizer.clone(),
                Rng::from_state(ck.rng_state),
                ck.metrics.clone(),
                ck.step,
            )
        }
    };

    let weights = if config.variant == Variant::NoDispersion {
        LossWeights {
            lambda_shared: 0.0,
            lambda_distinct: 0.0,
        }
    } else {
        stage.loss_weights
    };
    let dropout = stage.cond_dropout.unwrap_or(0.0);

    // decay anchor: the deterministic stage-1 bank initialization (rebuilt
    // from seeds, so resumed runs share the same anchor)
    let (_, anchor_bank) = stage1_initial_state(dataset, config);
    let decay_rate = stage.learning_rate * stage.embedding_decay;

    for step in start_step..stage.steps as u64 {
        let result = stage1_step(
            &backbone, &adapters, &bank, &samples, &schedule, config, &weights, dropout, step,
            &mut rng,
        );
        let (values, grads) = match result {
            Ok(ok) => ok,
            Err(e) => {
                return Err(TrainError::Divergence {
                    step,
                    detail: e.to_string(),
                    last_finite: Box::new(build_checkpoint(
                        config,
                        1,
                        step,
                        backbone,
                        Some(adapters),
                        Some(bank),
                        optimizer,
                        &rng,
                        metrics,
                    )),
                })
            }
        };
        optimizer.advance();
        let mut anchor_map: BTreeMap<String, Tensor> = BTreeMap::new();
        if decay_rate > 0.0 {
            let mut items = Vec::new();
            anchor_bank.for_each_param(&mut items);
            for (name, t) in items.drain(..) {
                anchor_map.insert(format!("bank.{name}"), t.clone());
            }
        }
        adapters = adapters
            .map_params(&mut |name, t| {
                let full = format!("adapter.{name}");
                match grads.get(&full) {
                    Some(g) => optimizer.update_one(&full, t, g),
                    None => Ok(t.clone()),
                }
            })
            .map_err(TrainError::Tensor)?;
        bank = bank
            .map_params(&mut |name, t| {
                let full = format!("bank.{name}");
                let updated = match grads.get(&full) {
                    Some(g) => optimizer.update_one(&full, t, g)?,
                    None => t.clone(),
                };
                if decay_rate > 0.0 {
                    anchored_decay(&updated, &anchor_map[&full], decay_rate)
                } else {
                    Ok(updated)
                }
            })
            .map_err(TrainError::Tensor)?;
        for (name, value) in values {
            metrics.push(MetricPoint { step, name, value });
        }
        // fixed cadence so resumed runs record identical histories
        if step % 50 == 0 {
            let sep = empty_prompt_separation(&backbone, &adapters, &bank, config.variant)
                .map_err(TrainError::Tensor)?;
            metrics.push(MetricPoint {
                step,
                name: "delta_separation".into(),
                value: sep,
            });
            let scale = mean_delta_magnitude(&backbone, &adapters, &bank, config.variant)
                .map_err(TrainError::Tensor)?;
            metrics.push(MetricPoint {
                step,
                name: "delta_scale".into(),
                value: scale,
            });
        }
    }

    Ok(build_checkpoint(
        config,
        1,
        stage.steps as u64,
        backbone,
        Some(adapters),
        Some(bank),
        optimizer,
        &rng,
        metrics,
    ))
}

#[allow(clippy::too_many_arguments)]
fn stage1_step(
    backbone: &Backbone,
    adapters: &AdapterPair,
    bank: &EmbeddingBank,
    samples: &[&Sample],
    schedule: &BatchSchedule,
    config: &ExperimentConfig,
    weights: &LossWeights,
    dropout: f64,
    step: u64,
    rng: &mut Rng,
) -> TensorResult<(Vec<(String, f64)>, crate::tensor::GradMap)> {
    let mut tape = Tape::new();
    let bound_backbone = backbone.bind(&mut tape, "backbone", false)?;
    let bound_adapters = adapters.bind(&mut tape, "adapter", true)?;
    let batch = schedule.batch(step);

    let mut batch_users: Vec<u32> = batch.indices.iter().map(|&i| samples[i].user_id).collect();
    batch_users.sort_unstable();
    batch_users.dedup();
    let mut bound_users: BTreeMap<u32, Tensor> = BTreeMap::new();
    for &uid in &batch_users {
        let entry = bank.get(uid).ok_or(crate::tensor::TensorError::Invalid {
            op: "train_stage1",
            msg: format!("user {uid} missing from the embedding bank"),
        })?;
        bound_users.insert(uid, tape.param(&format!("bank.user{uid:04}"), &entry.matrix)?);
    }

    let empty_enc = bound_backbone.encode_prompt(&mut tape, &Prompt::Empty)?;

    let mut flow_terms = Vec::with_capacity(batch.indices.len());
    for &idx in &batch.indices {
        let sample = samples[idx];
        let t = rng.next_f64();
        let z1 = randn_like(rng, sample.image.shape());
        let dropped = dropout > 0.0 && rng.next_f64() < dropout;
        let enc = bound_backbone.encode_prompt(&mut tape, &sample.prompt)?;
        let z_t = interpolate(&mut tape, &sample.image, &z1, t)?;
        let deltas = if dropped {
            None
        } else {
            Some(preference_deltas(
                &mut tape,
                &bound_adapters,
                &enc,
                &empty_enc,
                &bound_users[&sample.user_id],
                config.variant,
            )?)
        };
        let v = bound_backbone.velocity(&mut tape, &z_t, &enc, t, deltas.as_ref(), None)?;
        flow_terms.push(flow_loss(&mut tape, &v, &sample.image, &z1)?);
    }
    let refs: Vec<&Tensor> = flow_terms.iter().collect();
    let stacked = tape.concat(&refs, 0)?;
    let mean_flow = tape.mean(&stacked)?;

    let mut shared_entries = Vec::with_capacity(batch_users.len());
    let mut distinct_entries = Vec::with_capacity(batch_users.len());
    for &uid in &batch_users {
        let deltas = preference_deltas(
            &mut tape,
            &bound_adapters,
            &empty_enc,
            &empty_enc,
            &bound_users[&uid],
            config.variant,
        )?;
        let (flat_shared, flat_distinct) =
            reduce_delta(&mut tape, &deltas, config.loss.delta_reduction)?;
        shared_entries.push((uid, flat_shared));
        distinct_entries.push((uid, flat_distinct));
    }
    let disp_shared = dispersion_loss(&mut tape, &shared_entries)?;
    let disp_distinct = dispersion_loss(&mut tape, &distinct_entries)?;

    let loss = total_loss(&mut tape, &mean_flow, &disp_shared, &disp_distinct, weights)?;
    let values = vec![
        ("flow_loss".to_string(), mean_flow.item()),
        ("disp_shared".to_string(), disp_shared.item()),
        ("disp_distinct".to_string(), disp_distinct.item()),
        ("total_loss".to_string(), loss.item()),
    ];
    let grads = tape.backward(&loss)?;
    Ok((values, grads))
}

// ── Stage 2: new-user fitting ────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct NewUserFit {
    pub embedding: UserEmbedding,
    pub alpha: Option<Tensor>,
    pub metrics: Vec<MetricPoint>,
}

/// Fit a preference embedding for a new user from their history, with the
/// backbone, adapters, and bank all frozen. Linear-combination mode
/// optimizes only the coefficients over the bank; direct mode optimizes a
/// fresh embedding matrix. Flow loss only.
pub fn train_new_user(
    history: &[Sample],
    bank: &EmbeddingBank,
    adapters: &AdapterPair,
    backbone: &Backbone,
    config: &ExperimentConfig,
    user_id: u32,
) -> Result<NewUserFit, TrainError> {
    let stage = &config.stage2;
    let mode = stage.mode.ok_or_else(|| {
        TrainError::Config("stage 2 requires a fit mode".into())
    })?;
    if history.is_empty() {
        return Err(TrainError::Config("new-user history is empty".into()));
    }
    if mode == FitMode::LinearCombination && bank.is_empty() {
        return Err(TrainError::Config(
            "linear-combination fitting needs a non-empty bank".into(),
        ));
    }

    let mut rng = Rng::seed_from(derive_seed(stage.seed, &[0x9e3, user_id as u64]));
    let schedule = BatchSchedule::new(
        vec![user_id; history.len()],
        stage.batch_size.min(history.len()),
        false,
        derive_seed(stage.seed, &[0xba7c, user_id as u64]),
    )?;
    let mut optimizer = adam_for(stage);
    let mut metrics = Vec::new();

    let mut alpha = Tensor::filled(&[bank.len().max(1)], 1.0 / bank.len().max(1) as f64);
    let mut direct = {
        let mut init_rng = Rng::seed_from(derive_seed(stage.seed, &[0xd12ec7, user_id as u64]));
        crate::backbone::normal_tensor(
            &mut init_rng,
            &[config.adapter.user_rows, config.adapter.d_user],
            config.adapter.embedding_init_std,
        )
    };

    for step in 0..stage.steps as u64 {
        let mut tape = Tape::new();
        let bound_backbone = backbone.bind(&mut tape, "backbone", false)?;
        let bound_adapters = adapters.bind(&mut tape, "adapter", false)?;
        let empty_enc = bound_backbone.encode_prompt(&mut tape, &Prompt::Empty)?;

        let embedding = match mode {
            FitMode::LinearCombination => {
                let alpha_param = tape.param("alpha", &alpha)?;
                let bank_matrices: Vec<Tensor> = bank
                    .embeddings
                    .iter()
                    .map(|e| tape.constant(&e.matrix))
                    .collect();
                combine(&mut tape, &bank_matrices, &alpha_param)?
            }
            FitMode::Direct => tape.param("user_emb", &direct)?,
        };

        let batch = schedule.batch(step);
        let mut terms = Vec::with_capacity(batch.indices.len());
        for &idx in &batch.indices {
            let sample = &history[idx];
            let t = rng.next_f64();
            let z1 = randn_like(&mut rng, sample.image.shape());
            let enc = bound_backbone.encode_prompt(&mut tape, &sample.prompt)?;
            let z_t = interpolate(&mut tape, &sample.image, &z1, t)?;
            let deltas = preference_deltas(
                &mut tape,
                &bound_adapters,
                &enc,
                &empty_enc,
                &embedding,
                config.variant,
            )?;
            let v = bound_backbone.velocity(&mut tape, &z_t, &enc, t, Some(&deltas), None)?;
            terms.push(flow_loss(&mut tape, &v, &sample.image, &z1)?);
        }
        let refs: Vec<&Tensor> = terms.iter().collect();
        let stacked = tape.concat(&refs, 0)?;
        let loss = tape.mean(&stacked)?;
        let loss_value = loss.item();
        let grads = tape.backward(&loss).map_err(TrainError::Tensor)?;

        optimizer.advance();
        match mode {
            FitMode::LinearCombination => {
                let g = grads.get("alpha").ok_or_else(|| {
                    TrainError::Config("no gradient reached the combination coefficients".into())
                })?;
                alpha = optimizer.update_one("alpha", &alpha, g)?;
            }
            FitMode::Direct => {
                let g = grads.get("user_emb").ok_or_else(|| {
                    TrainError::Config("no gradient reached the user embedding".into())
                })?;
                direct = optimizer.update_one("user_emb", &direct, g)?;
            }
        }
        metrics.push(MetricPoint {
            step,
            name: "flow_loss".into(),
            value: loss_value,
        });
    }

    let (matrix, alpha_out) = match mode {
        FitMode::LinearCombination => {
            let mut tape = Tape::new();
            let bank_matrices: Vec<Tensor> =
                bank.embeddings.iter().map(|e| e.matrix.clone()).collect();
            let combined = combine(&mut tape, &bank_matrices, &alpha)?;
            (combined.detach(), Some(alpha))
        }
        FitMode::Direct => (direct, None),
    };

    Ok(NewUserFit {
        embedding: UserEmbedding {
            user_id,
            matrix,
        },
        alpha: alpha_out,
        metrics,
    })
}

// ── Shared plumbing ──────────────────────────────────────────────────

fn validate_resume(
    ck: &Checkpoint,
    config: &ExperimentConfig,
    stage: u8,
) -> Result<(), TrainError> {
    if ck.stage != stage {
        return Err(TrainError::Config(format!(
            "resume checkpoint is stage {}, expected {stage}",
            ck.stage
        )));
    }
    if !configs_compatible(&ck.config, config) {
        return Err(TrainError::Config(
            "resume checkpoint config differs beyond step budgets".into(),
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_checkpoint(
    config: &ExperimentConfig,
    stage: u8,
    step: u64,
    backbone: Backbone,
    adapters: Option<AdapterPair>,
    bank: Option<EmbeddingBank>,
    optimizer: AdamState,
    rng: &Rng,
    metrics: Vec<MetricPoint>,
) -> Checkpoint {
    Checkpoint {
        config: config.clone(),
        stage,
        step,
        backbone,
        adapters,
        bank,
        optimizer,
        rng_state: rng.state(),
        metrics,
    }
}

/// Byte hash of a parameter group, for frozen-weight assertions.
pub fn hash_params(items: &[(String, &Tensor)]) -> u64 {
    let mut bytes = Vec::new();
    for (name, t) in items {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::fileio::fnv1a64(&bytes)
}

pub fn hash_backbone(backbone: &Backbone) -> u64 {
    let mut items = Vec::new();
    backbone.for_each_param(&mut items);
    hash_params(&items)
}

pub fn hash_adapters(adapters: &AdapterPair) -> u64 {
    let mut items = Vec::new();
    adapters.for_each_param(&mut items);
    hash_params(&items)
}

pub fn hash_bank(bank: &EmbeddingBank) -> u64 {
    let mut items = Vec::new();
    bank.for_each_param(&mut items);
    hash_params(&items)
}
