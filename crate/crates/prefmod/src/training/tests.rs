use super::*;
use crate::adapters::EmbeddingBank;
use crate::config::{ExperimentConfig, FitMode, Variant};
use crate::losses::{flow_loss, interpolate};
use crate::rng::{derive_seed, Rng};
use crate::synth::{make_dataset, Dataset, DatasetConfig};
use crate::tensor::{Tape, Tensor};

fn tiny_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.data = DatasetConfig {
        n_train_users: 3,
        n_heldout_users: 1,
        per_user: 6,
        image_side: 8,
        master_seed: 700,
        ..DatasetConfig::default()
    };
    config.backbone.blocks = 2;
    config.backbone.d_model = 16;
    config.backbone.heads = 2;
    config.backbone.d_mod = 8;
    config.backbone.d_pool = 8;
    config.backbone.ff_hidden = 24;
    config.backbone.image_side = 8;
    config.adapter.user_rows = 3;
    config.adapter.d_user = 8;
    config.stage0.steps = 8;
    config.stage0.batch_size = 4;
    config.stage1.steps = 6;
    config.stage1.batch_size = 4;
    config.stage1.cond_dropout = Some(0.0);
    config.stage2.steps = 4;
    config.stage2.batch_size = 2;
    config
}

fn tiny_dataset(config: &ExperimentConfig) -> Dataset {
    make_dataset(&config.data).unwrap()
}

// ── Stage 0 ──────────────────────────────────────────────────────────

#[test]
fn pretrain_is_bit_deterministic() {
    let config = tiny_config();
    let dataset = tiny_dataset(&config);
    let a = pretrain_backbone(&dataset, &config, None).unwrap();
    let b = pretrain_backbone(&dataset, &config, None).unwrap();
    assert_eq!(hash_backbone(&a.backbone), hash_backbone(&b.backbone));
    assert_eq!(a.rng_state, b.rng_state);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn pretrain_loss_decreases_on_average() {
    let mut config = tiny_config();
    config.stage0.steps = 60;
    let dataset = tiny_dataset(&config);
    let ck = pretrain_backbone(&dataset, &config, None).unwrap();
    let losses: Vec<f64> = ck
        .metrics
        .iter()
        .filter(|m| m.name == "flow_loss")
        .map(|m| m.value)
        .collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(
        tail < head,
        "flow loss failed to decrease: first window {head:.4}, last window {tail:.4}"
    );
}

#[test]
fn pretrain_divergence_aborts_with_last_finite_checkpoint() {
    let mut config = tiny_config();
    config.stage0.learning_rate = 1e154;
    config.stage0.steps = 5;
    let dataset = tiny_dataset(&config);
    match pretrain_backbone(&dataset, &config, None) {
        Err(TrainError::Divergence {
            step, last_finite, ..
        }) => {
            assert!(step < 5);
            assert_eq!(last_finite.stage, 0);
            // the preserved weights are still finite
            let mut items = Vec::new();
            last_finite.backbone.for_each_param(&mut items);
            for (name, t) in items {
                assert!(t.is_finite(), "{name} holds non-finite values");
            }
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

// ── Stage 1 ──────────────────────────────────────────────────────────

#[test]
fn stage1_freezes_the_backbone_and_trains_the_rest() {
    let config = tiny_config();
    let dataset = tiny_dataset(&config);
    let base = pretrain_backbone(&dataset, &config, None).unwrap();
    let before = hash_backbone(&base.backbone);
    let trained = train_stage1(&dataset, &base, &config, None).unwrap();
    assert_eq!(hash_backbone(&trained.backbone), before, "backbone moved");
    let adapters = trained.adapters.as_ref().unwrap();
    let bank = trained.bank.as_ref().unwrap();
    // adapters left their zero-start, embeddings left their init
    let fresh = crate::adapters::AdapterPair::init(
        &config.adapter,
        config.backbone.d_model,
        config.backbone.d_mod,
        config.backbone.blocks,
        derive_seed(config.stage1.seed, &[0xada9]),
    );
    assert_ne!(hash_adapters(adapters), hash_adapters(&fresh));
    assert_eq!(bank.len(), 3);
}

#[test]
fn stage1_first_step_flow_matches_frozen_backbone() {
    let config = tiny_config();
    let dataset = tiny_dataset(&config);
    let base = pretrain_backbone(&dataset, &config, None).unwrap();
    let mut one_step = config.clone();
    one_step.stage1.steps = 1;
    let trained = train_stage1(&dataset, &base, &one_step, None).unwrap();
    let recorded = trained
        .metrics
        .iter()
        .find(|m| m.name == "flow_loss")
        .unwrap()
        .value;

    // replicate the step's draws against the frozen backbone, no deltas
    let samples = dataset.train_samples();
    let schedule = BatchSchedule::new(
        samples.iter().map(|s| s.user_id).collect(),
        config.stage1.batch_size,
        true,
        derive_seed(config.stage1.seed, &[0xba7c]),
    )
    .unwrap();
    let mut rng = Rng::seed_from(derive_seed(config.stage1.seed, &[0x90d]));
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    for &idx in &schedule.batch(0).indices {
        let sample = samples[idx];
        let t = rng.next_f64();
        let z1 = Tensor::new(
            sample.image.shape().to_vec(),
            rng.normal_vec(sample.image.numel(), 1.0),
        )
        .unwrap();
        let enc = base.backbone.encode_prompt(&mut tape, &sample.prompt).unwrap();
        let z_t = interpolate(&mut tape, &sample.image, &z1, t).unwrap();
        let v = base
            .backbone
            .velocity(&mut tape, &z_t, &enc, t, None, None)
            .unwrap();
        terms.push(flow_loss(&mut tape, &v, &sample.image, &z1).unwrap());
    }
    let refs: Vec<&Tensor> = terms.iter().collect();
    let stacked = tape.concat(&refs, 0).unwrap();
    let expected = tape.mean(&stacked).unwrap().item();

    assert_eq!(
        recorded.to_bits(),
        expected.to_bits(),
        "zero-start flow loss must equal the frozen backbone's"
    );
}

#[test]
fn stage1_separation_grows_more_with_dispersion() {
    let mut config = tiny_config();
    config.stage1.steps = 50;
    let dataset = tiny_dataset(&config);
    let base = pretrain_backbone(&dataset, &config, None).unwrap();

    let with = train_stage1(&dataset, &base, &config, None).unwrap();
    let mut no_disp_config = config.clone();
    no_disp_config.variant = Variant::NoDispersion;
    let without = train_stage1(&dataset, &base, &no_disp_config, None).unwrap();

    let sep = |ck: &Checkpoint| {
        empty_prompt_separation(
            &ck.backbone,
            ck.adapters.as_ref().unwrap(),
            ck.bank.as_ref().unwrap(),
            Variant::Full,
        )
        .unwrap()
    };
    let sep_with = sep(&with);
    let sep_without = sep(&without);
    assert!(
        sep_with > sep_without,
        "dispersion should separate users: {sep_with:.5} vs {sep_without:.5}"
    );
    // and separation grew from the zero start
    let first = with
        .metrics
        .iter()
        .find(|m| m.name == "delta_separation")
        .unwrap()
        .value;
    assert!(sep_with > first, "separation fell: {first:.5} -> {sep_with:.5}");
}

#[test]
fn stage1_rejects_wrong_base() {
    let config = tiny_config();
    let dataset = tiny_dataset(&config);
    let base = pretrain_backbone(&dataset, &config, None).unwrap();
    let stage1 = train_stage1(&dataset, &base, &config, None).unwrap();
    assert!(matches!(
        train_stage1(&dataset, &stage1, &config, None),
        Err(TrainError::Config(_))
    ));
}

// ── Stage 2 ──────────────────────────────────────────────────────────

fn trained_fixture() -> (ExperimentConfig, Dataset, Checkpoint) {
    let config = tiny_config();
    let dataset = tiny_dataset(&config);
    let base = pretrain_backbone(&dataset, &config, None).unwrap();
    let trained = train_stage1(&dataset, &base, &config, None).unwrap();
    (config, dataset, trained)
}

#[test]
fn new_user_fit_runs_in_both_modes_and_is_deterministic() {
    let (config, dataset, trained) = trained_fixture();
    let heldout = &dataset.heldout_users()[0];
    let history = dataset.samples_of(heldout.user_id);
    let bank = trained.bank.as_ref().unwrap();
    let adapters = trained.adapters.as_ref().unwrap();

    let lc = train_new_user(history, bank, adapters, &trained.backbone, &config, heldout.user_id)
        .unwrap();
    let lc2 = train_new_user(history, bank, adapters, &trained.backbone, &config, heldout.user_id)
        .unwrap();
    assert!(lc.embedding.matrix.bits_eq(&lc2.embedding.matrix));
    let alpha = lc.alpha.as_ref().unwrap();
    assert_eq!(alpha.numel(), bank.len());
    // fitting moved the coefficients off their uniform start
    assert!(alpha.data().iter().any(|&a| (a - 1.0 / bank.len() as f64).abs() > 1e-9));

    let mut direct_config = config.clone();
    direct_config.stage2.mode = Some(FitMode::Direct);
    let direct = train_new_user(
        history,
        bank,
        adapters,
        &trained.backbone,
        &direct_config,
        heldout.user_id,
    )
    .unwrap();
    assert!(direct.alpha.is_none());
    assert_eq!(
        direct.embedding.matrix.shape(),
        &[config.adapter.user_rows, config.adapter.d_user]
    );

    // frozen modules untouched (they are borrowed immutably, but assert
    // the hashes anyway to pin the discipline)
    assert_eq!(
        hash_adapters(adapters),
        hash_adapters(trained.adapters.as_ref().unwrap())
    );
    assert_eq!(hash_bank(bank), hash_bank(trained.bank.as_ref().unwrap()));
}

#[test]
fn new_user_fit_rejects_empty_history() {
    let (config, _dataset, trained) = trained_fixture();
    let bank = trained.bank.as_ref().unwrap();
    let adapters = trained.adapters.as_ref().unwrap();
    assert!(matches!(
        train_new_user(&[], bank, adapters, &trained.backbone, &config, 99),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn single_user_bank_linear_combination_moves_alpha_only() {
    let (config, dataset, trained) = trained_fixture();
    let adapters = trained.adapters.as_ref().unwrap();
    let bank = trained.bank.as_ref().unwrap();
    let single = EmbeddingBank {
        embeddings: vec![bank.embeddings[0].clone()],
    };
    let history = dataset.samples_of(dataset.train_users()[0].user_id);
    let fit = train_new_user(history, &single, adapters, &trained.backbone, &config, 50).unwrap();
    let alpha = fit.alpha.unwrap();
    assert_eq!(alpha.numel(), 1);
    // the embedding is exactly alpha * bank[0]
    for (out, base) in fit
        .embedding
        .matrix
        .data()
        .iter()
        .zip(single.embeddings[0].matrix.data())
    {
        assert!((out - alpha.data()[0] * base).abs() < 1e-12);
    }
}

// ── Checkpoints ──────────────────────────────────────────────────────

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let (_config, _dataset, trained) = trained_fixture();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    trained.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    // loaded state matches in every compared dimension
    assert_eq!(loaded.stage, trained.stage);
    assert_eq!(loaded.step, trained.step);
    assert_eq!(loaded.rng_state, trained.rng_state);
    assert_eq!(loaded.metrics, trained.metrics);
    assert_eq!(hash_backbone(&loaded.backbone), hash_backbone(&trained.backbone));
    assert_eq!(
        hash_adapters(loaded.adapters.as_ref().unwrap()),
        hash_adapters(trained.adapters.as_ref().unwrap())
    );
    assert_eq!(
        hash_bank(loaded.bank.as_ref().unwrap()),
        hash_bank(trained.bank.as_ref().unwrap())
    );
    assert_eq!(loaded.optimizer, trained.optimizer);
}

#[test]
fn checkpoint_rejects_corruption_and_version_skew() {
    let (_config, _dataset, trained) = trained_fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    trained.save(&path).unwrap();
    let original = std::fs::read(&path).unwrap();

    // flip one payload byte
    let mut corrupt = original.clone();
    let last = corrupt.len() - 5;
    corrupt[last] ^= 0x80;
    std::fs::write(&path, &corrupt).unwrap();
    assert!(matches!(
        Checkpoint::load(&path),
        Err(TrainError::Checkpoint(msg)) if msg.contains("checksum")
    ));

    // flip the version field inside the manifest
    let manifest_start = 16;
    let text = String::from_utf8_lossy(&original[manifest_start..]).to_string();
    let skewed = text.replacen("\"version\":1", "\"version\":9", 1);
    let mut bytes = original[..manifest_start].to_vec();
    bytes.extend_from_slice(skewed.as_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        Checkpoint::load(&path),
        Err(TrainError::CheckpointVersion { found: 9, .. })
    ));
}

#[test]
fn pretrain_resume_is_bit_equivalent() {
    let mut config = tiny_config();
    config.stage0.steps = 10;
    let dataset = tiny_dataset(&config);
    let straight = pretrain_backbone(&dataset, &config, None).unwrap();

    let mut half = config.clone();
    half.stage0.steps = 5;
    let mid = pretrain_backbone(&dataset, &half, None).unwrap();
    let resumed = pretrain_backbone(&dataset, &config, Some(&mid)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let pa = dir.path().join("straight.ckpt");
    let pb = dir.path().join("resumed.ckpt");
    straight.save(&pa).unwrap();
    resumed.save(&pb).unwrap();
    assert_eq!(
        std::fs::read(&pa).unwrap(),
        std::fs::read(&pb).unwrap(),
        "resumed run must be byte-identical to the uninterrupted run"
    );
}

#[test]
fn stage1_resume_is_bit_equivalent() {
    let mut config = tiny_config();
    config.stage1.steps = 6;
    let dataset = tiny_dataset(&config);
    let base = pretrain_backbone(&dataset, &config, None).unwrap();
    let straight = train_stage1(&dataset, &base, &config, None).unwrap();

    let mut half = config.clone();
    half.stage1.steps = 3;
    let mid = train_stage1(&dataset, &base, &half, None).unwrap();
    let resumed = train_stage1(&dataset, &base, &config, Some(&mid)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let pa = dir.path().join("straight.ckpt");
    let pb = dir.path().join("resumed.ckpt");
    straight.save(&pa).unwrap();
    resumed.save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
}

#[test]
fn user_embedding_export_round_trip() {
    let (_config, _dataset, trained) = trained_fixture();
    let bank = trained.bank.as_ref().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let alpha = Tensor::new(vec![3], vec![0.2, 0.3, 0.5]).unwrap();
    export_user_embedding(dir.path(), &bank.embeddings[1], Some(&alpha), "fingerprint").unwrap();
    let (back, alpha_back) = import_user_embedding(dir.path(), bank.embeddings[1].user_id).unwrap();
    assert!(back.matrix.bits_eq(&bank.embeddings[1].matrix));
    assert!(alpha_back.unwrap().bits_eq(&alpha));
}
