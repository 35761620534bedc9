//! Oracle-backed evaluation: per-user style error against ground truth,
//! win rate against the unconditional arm, prompt-consistency and
//! perceptual metrics, plus the ablation runner and the history-length
//! sweep. Every number is recomputable from (config, seed).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FitMode, SamplerConfig, Variant};
use crate::rng::derive_seed;
use crate::sampling::SampleSource;
use crate::synth::{
    content_check, estimate_style, perceptual_distance, render, Dataset, Prompt, StyleParams,
    UserProfile, EVAL_PROMPTS,
};
use crate::tensor::Tensor;
use crate::training::{empty_prompt_separation, train_new_user, train_stage1, Checkpoint};

pub const ARTIFACT_VERSION: &str = concat!("prefmod-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ── Report types ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UserEval {
    pub user_id: u32,
    /// Mean oracle style distance of conditioned generations to the user's
    /// true style parameters.
    pub style_error: f64,
    /// Same measure for the unconditional arm on identical seeds.
    pub unconditional_style_error: f64,
    /// Fraction of (prompt, seed) cells where the conditioned image lands
    /// closer to the user's style than the unconditional one.
    pub win_rate: f64,
    pub content_conditioned: f64,
    pub content_unconditional: f64,
    /// Mean multi-scale pixel distance to the user's preferred reference
    /// images under matched prompts.
    pub perceptual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// What each metric means, so the numbers are not mistaken for
    /// anything they are not.
    pub header: BTreeMap<String, String>,
    pub artifact_version: String,
    pub config_fingerprint: String,
    pub variant: String,
    pub master_seed: u64,
    pub n_seeds: usize,
    pub sampler_steps: usize,
    pub per_user: Vec<UserEval>,
    pub mean_style_error: f64,
    pub mean_unconditional_style_error: f64,
    pub win_rate: f64,
    pub mean_content_conditioned: f64,
    pub mean_content_unconditional: f64,
    pub mean_perceptual: f64,
    /// Mean pairwise distance between users' empty-prompt modulation
    /// directions; absent when the checkpoint has no adapters.
    pub separation: Option<f64>,
    /// Fraction of conditioned generations whose estimated style is
    /// nearest to the generating user's true style.
    pub assignment_accuracy: f64,
}

fn report_header() -> BTreeMap<String, String> {
    let mut h = BTreeMap::new();
    h.insert(
        "style_error".into(),
        "mean distance between the oracle style estimate of generated images and the user's \
         ground-truth style parameters (0 = perfect match)"
            .into(),
    );
    h.insert(
        "win_rate".into(),
        "fraction of (prompt, seed) cells where the conditioned generation is closer to the \
         user's style than the unconditional generation from the same seed"
            .into(),
    );
    h.insert(
        "content".into(),
        "template-correlation score of the generated image against its prompt (1 = perfect)"
            .into(),
    );
    h.insert(
        "perceptual".into(),
        "multi-scale mean absolute pixel distance to the user's preferred reference image \
         under the same prompt (lower is closer)"
            .into(),
    );
    h.insert(
        "separation".into(),
        "mean pairwise distance between users' empty-prompt modulation directions".into(),
    );
    h.insert(
        "oracle_note".into(),
        "all scores come from closed-form estimators over the procedural renderer; no \
         context images or learned scoring models are involved"
            .into(),
    );
    h
}

// ── Core evaluation ──────────────────────────────────────────────────

/// Users to evaluate: ground-truth profile plus the embedding that stands
/// for them at generation time.
pub type EvalUser = (UserProfile, Tensor);

/// Bank-backed evaluation users for the training split.
pub fn bank_eval_users(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Vec<EvalUser>> {
    let bank = checkpoint
        .bank
        .as_ref()
        .ok_or_else(|| EvalError::Protocol("checkpoint has no embedding bank".into()))?;
    let mut out = Vec::new();
    for user in dataset.train_users() {
        let entry = bank.get(user.user_id).ok_or_else(|| {
            EvalError::Protocol(format!("user {} missing from the bank", user.user_id))
        })?;
        out.push((*user, entry.matrix.clone()));
    }
    Ok(out)
}

/// Reference image for (user, prompt): the user's dataset sample under that
/// prompt when one exists, otherwise a deterministic fresh render.
fn reference_image(dataset: &Dataset, user: &UserProfile, prompt: &Prompt) -> Tensor {
    if let Some(sample) = dataset
        .samples_of(user.user_id)
        .iter()
        .find(|s| &s.prompt == prompt)
    {
        return sample.image.clone();
    }
    render(
        prompt,
        &user.style,
        derive_seed(user.seed, &[0x4ef]),
        dataset.config.image_side,
    )
}

/// Run the full user-by-prompt-by-seed grid and aggregate every metric.
/// The unconditional arm shares seeds with the conditioned arm cell by
/// cell, and is generated once per (prompt, seed).
pub fn evaluate(
    checkpoint: &Checkpoint,
    users: &[EvalUser],
    dataset: &Dataset,
    prompts: &[Prompt],
    sampler: &SamplerConfig,
    n_seeds: usize,
    master_seed: u64,
) -> Result<EvalReport> {
    if users.is_empty() || prompts.is_empty() || n_seeds == 0 {
        return Err(EvalError::Protocol(
            "evaluation needs users, prompts, and at least one seed".into(),
        ));
    }
    let source = SampleSource::from_checkpoint(checkpoint);

    // unconditional arm, shared across users
    let mut unconditional = Vec::with_capacity(prompts.len() * n_seeds);
    for (pi, prompt) in prompts.iter().enumerate() {
        for si in 0..n_seeds {
            let seed = derive_seed(master_seed, &[pi as u64, si as u64]);
            unconditional.push(source.sample(prompt, None, sampler, seed)?);
        }
    }

    let styles: Vec<(u32, StyleParams)> = users.iter().map(|(u, _)| (u.user_id, u.style)).collect();
    let mut per_user = Vec::with_capacity(users.len());
    let mut assignment_hits = 0usize;
    let mut assignment_total = 0usize;

    for (profile, embedding) in users {
        let mut cond_err = 0.0;
        let mut uncond_err = 0.0;
        let mut wins = 0usize;
        let mut cond_content = 0.0;
        let mut uncond_content = 0.0;
        let mut perceptual = 0.0;
        let mut cells = 0usize;

        for (pi, prompt) in prompts.iter().enumerate() {
            let reference = reference_image(dataset, profile, prompt);
            for si in 0..n_seeds {
                let seed = derive_seed(master_seed, &[pi as u64, si as u64]);
                let image = source.sample(prompt, Some(embedding), sampler, seed)?;
                let est = estimate_style(&image);
                let err = est.error_against(&profile.style);
                let base = &unconditional[pi * n_seeds + si];
                let base_err = estimate_style(base).error_against(&profile.style);

                cond_err += err;
                uncond_err += base_err;
                if err < base_err {
                    wins += 1;
                }
                cond_content += content_check(&image, prompt);
                uncond_content += content_check(base, prompt);
                perceptual += perceptual_distance(&image, &reference)?;
                cells += 1;

                // nearest-style assignment over all evaluated users
                let nearest = styles
                    .iter()
                    .min_by(|(_, a), (_, b)| {
                        est.error_against(a)
                            .partial_cmp(&est.error_against(b))
                            .unwrap()
                    })
                    .map(|(id, _)| *id);
                if nearest == Some(profile.user_id) {
                    assignment_hits += 1;
                }
                assignment_total += 1;
            }
        }
        let n = cells as f64;
        per_user.push(UserEval {
            user_id: profile.user_id,
            style_error: cond_err / n,
            unconditional_style_error: uncond_err / n,
            win_rate: wins as f64 / n,
            content_conditioned: cond_content / n,
            content_unconditional: uncond_content / n,
            perceptual: perceptual / n,
        });
    }

    let n_users = per_user.len() as f64;
    let separation = match (&checkpoint.adapters, &checkpoint.bank) {
        (Some(adapters), Some(bank)) => Some(empty_prompt_separation(
            &checkpoint.backbone,
            adapters,
            bank,
            checkpoint.config.variant,
        )?),
        _ => None,
    };

    Ok(EvalReport {
        header: report_header(),
        artifact_version: ARTIFACT_VERSION.to_string(),
        config_fingerprint: checkpoint.config.fingerprint(),
        variant: checkpoint.config.variant.name().to_string(),
        master_seed,
        n_seeds,
        sampler_steps: sampler.steps,
        mean_style_error: per_user.iter().map(|u| u.style_error).sum::<f64>() / n_users,
        mean_unconditional_style_error: per_user
            .iter()
            .map(|u| u.unconditional_style_error)
            .sum::<f64>()
            / n_users,
        win_rate: per_user.iter().map(|u| u.win_rate).sum::<f64>() / n_users,
        mean_content_conditioned: per_user
            .iter()
            .map(|u| u.content_conditioned)
            .sum::<f64>()
            / n_users,
        mean_content_unconditional: per_user
            .iter()
            .map(|u| u.content_unconditional)
            .sum::<f64>()
            / n_users,
        mean_perceptual: per_user.iter().map(|u| u.perceptual).sum::<f64>() / n_users,
        separation,
        assignment_accuracy: assignment_hits as f64 / assignment_total.max(1) as f64,
        per_user,
    })
}

/// Closed-form expectation of the style distance between a user's style and
/// a style drawn from the dataset prior; the baseline an unconditional
/// model should roughly match.
pub fn expected_random_style_error(style: &StyleParams, offset_prior: f64) -> f64 {
    // E|X - s| for X ~ U(a, b)
    let e_abs_uniform = |s: f64, a: f64, b: f64| {
        let s = s.clamp(a, b);
        ((s - a) * (s - a) + (b - s) * (b - s)) / (2.0 * (b - a))
    };
    // hue: circular distance of a uniform angle to anything averages 1/4
    let hue = 0.25 / 0.5;
    let sat = e_abs_uniform(style.saturation, 0.2, 1.0) / 0.8;
    let round = e_abs_uniform(style.roundness, 0.0, 1.0) / 1.0;
    let tex = (0..4u8)
        .map(|k| (k as f64 - style.texture_freq as f64).abs())
        .sum::<f64>()
        / 4.0
        / 3.0;
    let off = e_abs_uniform(style.offset, -offset_prior, offset_prior) / 0.5;
    (hue + sat + round + tex + off) / 5.0
}

// ── Ablation runner ──────────────────────────────────────────────────

/// One ablation: which mechanism to disable and the base experiment it
/// modifies.
#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub variant: Variant,
    pub base: ExperimentConfig,
}

impl AblationSpec {
    /// The variant's config: identical to the base except for the variant
    /// switch itself.
    pub fn config(&self) -> Result<ExperimentConfig> {
        let mut config = self.base.clone();
        config.variant = self.variant;
        let diff = self.base.diff_keys(&config);
        let expected: Vec<String> = if self.variant == self.base.variant {
            vec![]
        } else {
            vec!["variant".to_string()]
        };
        if diff != expected {
            return Err(EvalError::Protocol(format!(
                "ablation must alter exactly the variant switch, changed {diff:?}"
            )));
        }
        Ok(config)
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub variant: Variant,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
}

/// Train and evaluate each variant from the same frozen base under matched
/// seeds.
pub fn run_ablations(
    dataset: &Dataset,
    base: &Checkpoint,
    full_config: &ExperimentConfig,
    variants: &[Variant],
) -> Result<Vec<AblationOutcome>> {
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let spec = AblationSpec {
            variant,
            base: full_config.clone(),
        };
        let config = spec.config()?;
        let checkpoint = train_stage1(dataset, base, &config, None)?;
        let users = bank_eval_users(&checkpoint, dataset)?;
        let report = evaluate(
            &checkpoint,
            &users,
            dataset,
            &EVAL_PROMPTS,
            &config.sampler,
            config.eval.n_seeds,
            config.eval.master_seed,
        )?;
        out.push(AblationOutcome {
            variant,
            checkpoint,
            report,
        });
    }
    Ok(out)
}

// ── History-length sweep ─────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub length: usize,
    pub mode: String,
    pub seed_index: usize,
    pub user_id: u32,
    pub style_error: f64,
    pub perceptual: f64,
}

/// Fit every held-out user at each history length in each mode, then score
/// the fitted embedding on the evaluation prompts.
pub fn history_sweep(
    dataset: &Dataset,
    trained: &Checkpoint,
    config: &ExperimentConfig,
    lengths: &[usize],
    modes: &[FitMode],
    n_seeds: usize,
) -> Result<Vec<SweepRow>> {
    let bank = trained
        .bank
        .as_ref()
        .ok_or_else(|| EvalError::Protocol("sweep needs a stage-1 checkpoint".into()))?;
    let adapters = trained
        .adapters
        .as_ref()
        .ok_or_else(|| EvalError::Protocol("sweep needs adapters".into()))?;
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    for user in dataset.heldout_users() {
        let available = dataset.samples_of(user.user_id).len();
        if available < max_len {
            return Err(EvalError::Protocol(format!(
                "held-out user {} has {available} samples, sweep needs {max_len}",
                user.user_id
            )));
        }
    }

    let mut rows = Vec::new();
    for &length in lengths {
        for &mode in modes {
            for seed_index in 0..n_seeds {
                for user in dataset.heldout_users() {
                    let history = &dataset.samples_of(user.user_id)[..length];
                    let mut fit_config = config.clone();
                    fit_config.stage2.mode = Some(mode);
                    fit_config.stage2.seed =
                        derive_seed(config.stage2.seed, &[seed_index as u64 + 1]);
                    let fit = train_new_user(
                        history,
                        bank,
                        adapters,
                        &trained.backbone,
                        &fit_config,
                        user.user_id,
                    )?;
                    let (style_error, perceptual) = score_user_fit(
                        trained,
                        dataset,
                        user,
                        &fit.embedding.matrix,
                        &config.sampler,
                        derive_seed(config.eval.master_seed, &[length as u64, seed_index as u64]),
                    )?;
                    rows.push(SweepRow {
                        length,
                        mode: mode_name(mode).to_string(),
                        seed_index,
                        user_id: user.user_id,
                        style_error,
                        perceptual,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn mode_name(mode: FitMode) -> &'static str {
    match mode {
        FitMode::LinearCombination => "linear_combination",
        FitMode::Direct => "direct",
    }
}

/// Style error and perceptual distance of one fitted embedding over the
/// evaluation prompts with one seed per prompt.
pub fn score_user_fit(
    trained: &Checkpoint,
    dataset: &Dataset,
    user: &UserProfile,
    embedding: &Tensor,
    sampler: &SamplerConfig,
    master_seed: u64,
) -> Result<(f64, f64)> {
    let source = SampleSource::from_checkpoint(trained);
    let mut style_error = 0.0;
    let mut perceptual = 0.0;
    for (pi, prompt) in EVAL_PROMPTS.iter().enumerate() {
        let seed = derive_seed(master_seed, &[pi as u64]);
        let image = source.sample(prompt, Some(embedding), sampler, seed)?;
        style_error += estimate_style(&image).error_against(&user.style);
        perceptual += perceptual_distance(&image, &reference_image(dataset, user, prompt))?;
    }
    let n = EVAL_PROMPTS.len() as f64;
    Ok((style_error / n, perceptual / n))
}

// ── Tidy outputs ─────────────────────────────────────────────────────

/// One observation per row: `user_id,metric,value` with overall rows
/// carrying an empty user id.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("user_id,metric,value\n");
    for u in &report.per_user {
        for (metric, value) in [
            ("style_error", u.style_error),
            ("unconditional_style_error", u.unconditional_style_error),
            ("win_rate", u.win_rate),
            ("content_conditioned", u.content_conditioned),
            ("content_unconditional", u.content_unconditional),
            ("perceptual", u.perceptual),
        ] {
            out.push_str(&format!("{},{},{}\n", u.user_id, metric, value));
        }
    }
    for (metric, value) in [
        ("mean_style_error", report.mean_style_error),
        (
            "mean_unconditional_style_error",
            report.mean_unconditional_style_error,
        ),
        ("win_rate", report.win_rate),
        ("mean_content_conditioned", report.mean_content_conditioned),
        (
            "mean_content_unconditional",
            report.mean_content_unconditional,
        ),
        ("mean_perceptual", report.mean_perceptual),
        ("assignment_accuracy", report.assignment_accuracy),
    ] {
        out.push_str(&format!(",{},{}\n", metric, value));
    }
    if let Some(sep) = report.separation {
        out.push_str(&format!(",separation,{sep}\n"));
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("length,mode,seed,user_id,style_error,perceptual_distance\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.length, r.mode, r.seed_index, r.user_id, r.style_error, r.perceptual
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_config_differs_in_exactly_the_variant() {
        let base = ExperimentConfig::default();
        for variant in Variant::ALL {
            let spec = AblationSpec {
                variant,
                base: base.clone(),
            };
            let config = spec.config().unwrap();
            if variant == Variant::Full {
                assert!(base.diff_keys(&config).is_empty());
            } else {
                assert_eq!(base.diff_keys(&config), vec!["variant".to_string()]);
            }
        }
    }

    #[test]
    fn expected_error_closed_form_against_sampling() {
        // Monte Carlo check of the closed-form baseline.
        let style = StyleParams {
            hue: 0.3,
            saturation: 0.7,
            roundness: 0.2,
            texture_freq: 1,
            offset: 0.05,
        };
        let prior = crate::synth::DEFAULT_OFFSET_PRIOR;
        let expected = expected_random_style_error(&style, prior);
        let mut rng = crate::rng::Rng::seed_from(1234);
        let n = 40_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let draw = crate::synth::sample_style(&mut rng, prior);
            acc += draw.distance(&style);
        }
        let measured = acc / n as f64;
        assert!(
            (measured - expected).abs() < 0.01,
            "closed form {expected:.4} vs sampled {measured:.4}"
        );
    }

    #[test]
    fn csv_outputs_are_tidy() {
        let rows = vec![SweepRow {
            length: 2,
            mode: "direct".into(),
            seed_index: 0,
            user_id: 9,
            style_error: 0.25,
            perceptual: 0.1,
        }];
        let csv = sweep_csv(&rows);
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "length,mode,seed,user_id,style_error,perceptual_distance");
        assert_eq!(lines[1].split(',').count(), 6);
    }
}
