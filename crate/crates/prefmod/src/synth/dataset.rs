//! Dataset generation: separated user styles via rejection sampling,
//! near-uniform prompt coverage per user, and a bit-exact on-disk form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{render, DataError, Prompt, Result, Sample, StyleParams, UserProfile};
use crate::fileio;
use crate::rng::{derive_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptDistribution {
    /// Shuffled full passes over the 36 content prompts.
    Uniform,
}

/// Default offset prior half-width; see `DatasetConfig::offset_prior`.
pub const DEFAULT_OFFSET_PRIOR: f64 = 0.09;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train_users: usize,
    pub n_heldout_users: usize,
    pub per_user: usize,
    pub image_side: usize,
    /// Minimum pairwise style distance between any two users.
    pub min_style_distance: f64,
    /// Offset prior half-width. Together with placement jitter this must stay
    /// below 0.125 so the centroid estimator can attribute a subject to the
    /// right position anchor.
    pub offset_prior: f64,
    pub prompt_distribution: PromptDistribution,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train_users: 8,
            n_heldout_users: 4,
            per_user: 64,
            image_side: 16,
            min_style_distance: 0.15,
            offset_prior: DEFAULT_OFFSET_PRIOR,
            prompt_distribution: PromptDistribution::Uniform,
            master_seed: 0,
        }
    }
}

/// Draw a style from the dataset prior.
pub fn sample_style(rng: &mut Rng, offset_prior: f64) -> StyleParams {
    StyleParams {
        hue: rng.next_f64(),
        saturation: rng.uniform(0.2, 1.0),
        roundness: rng.next_f64(),
        texture_freq: rng.below(4) as u8,
        offset: rng.uniform(-offset_prior, offset_prior),
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub users: Vec<UserProfile>,
    /// Samples per user, indexed like `users`.
    pub samples: Vec<Vec<Sample>>,
}

impl Dataset {
    pub fn train_users(&self) -> &[UserProfile] {
        &self.users[..self.config.n_train_users]
    }

    pub fn heldout_users(&self) -> &[UserProfile] {
        &self.users[self.config.n_train_users..]
    }

    pub fn is_train_user(&self, user_id: u32) -> bool {
        self.train_users().iter().any(|u| u.user_id == user_id)
    }

    pub fn user(&self, user_id: u32) -> Option<&UserProfile> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn samples_of(&self, user_id: u32) -> &[Sample] {
        let idx = self
            .users
            .iter()
            .position(|u| u.user_id == user_id)
            .expect("unknown user id");
        &self.samples[idx]
    }

    /// All training-split samples in user order.
    pub fn train_samples(&self) -> Vec<&Sample> {
        self.samples[..self.config.n_train_users]
            .iter()
            .flatten()
            .collect()
    }
}

const MAX_ATTEMPTS_PER_USER: usize = 2000;

pub fn make_dataset(config: &DatasetConfig) -> Result<Dataset> {
    let total_users = config.n_train_users + config.n_heldout_users;
    if config.n_train_users < 2 {
        return Err(DataError::TooFewUsers(config.n_train_users));
    }

    let mut rng = Rng::seed_from(derive_seed(config.master_seed, &[0x5757]));
    let mut styles: Vec<StyleParams> = Vec::with_capacity(total_users);
    let mut attempts = 0usize;
    let max_attempts = MAX_ATTEMPTS_PER_USER * total_users;
    while styles.len() < total_users {
        attempts += 1;
        if attempts > max_attempts {
            return Err(DataError::StyleSeparation {
                users: total_users,
                min_dist: config.min_style_distance,
                attempts,
            });
        }
        let candidate = sample_style(&mut rng, config.offset_prior);
        if styles
            .iter()
            .all(|s| s.distance(&candidate) >= config.min_style_distance)
        {
            styles.push(candidate);
        }
    }

    let mut users = Vec::with_capacity(total_users);
    let mut samples = Vec::with_capacity(total_users);
    for (i, style) in styles.into_iter().enumerate() {
        let user_id = i as u32;
        let user_seed = derive_seed(config.master_seed, &[1, user_id as u64]);
        users.push(UserProfile {
            user_id,
            style,
            seed: user_seed,
        });
        samples.push(user_samples(config, user_id, &style, user_seed));
    }

    Ok(Dataset {
        config: config.clone(),
        users,
        samples,
    })
}

/// Shuffled full passes over the prompt list, truncated to `per_user`,
/// so prompt counts never differ by more than one pass.
fn user_samples(
    config: &DatasetConfig,
    user_id: u32,
    style: &StyleParams,
    user_seed: u64,
) -> Vec<Sample> {
    let all = Prompt::all_content();
    let mut order = Vec::with_capacity(config.per_user);
    let mut shuffle_rng = Rng::seed_from(derive_seed(user_seed, &[2]));
    while order.len() < config.per_user {
        let mut pass: Vec<Prompt> = all.clone();
        match config.prompt_distribution {
            PromptDistribution::Uniform => shuffle_rng.shuffle(&mut pass),
        }
        order.extend(pass);
    }
    order.truncate(config.per_user);

    order
        .into_iter()
        .enumerate()
        .map(|(idx, prompt)| {
            let seed = derive_seed(user_seed, &[3, idx as u64]);
            Sample {
                prompt,
                image: render::render(&prompt, style, seed, config.image_side),
                user_id,
            }
        })
        .collect()
}

// ── Persistence ──────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub user_id: u32,
    pub prompt: String,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UserRecord {
    user_id: u32,
    style: StyleParams,
    seed: u64,
    split: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: DatasetConfig,
    users: Vec<UserRecord>,
    samples: Vec<SampleRecord>,
}

const MANIFEST_VERSION: u32 = 1;

impl Dataset {
    /// Persist as a directory: `manifest.json` plus one raw tensor file per
    /// sample image. Round-trips bit-exactly.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let samples_dir = dir.join("samples");
        std::fs::create_dir_all(&samples_dir).map_err(|e| DataError::Io {
            path: samples_dir.display().to_string(),
            source: e,
        })?;

        let mut records = Vec::new();
        for (ui, user) in self.users.iter().enumerate() {
            for (si, sample) in self.samples[ui].iter().enumerate() {
                let file = format!("samples/u{:03}_s{:04}.ten", user.user_id, si);
                fileio::write_tensor(&dir.join(&file), &sample.image).map_err(|e| {
                    DataError::Manifest(format!("writing {file}: {e}"))
                })?;
                records.push(SampleRecord {
                    user_id: user.user_id,
                    prompt: sample.prompt.text(),
                    file,
                });
            }
        }

        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            config: self.config.clone(),
            users: self
                .users
                .iter()
                .enumerate()
                .map(|(i, u)| UserRecord {
                    user_id: u.user_id,
                    style: u.style,
                    seed: u.seed,
                    split: if i < self.config.n_train_users {
                        "train".into()
                    } else {
                        "heldout".into()
                    },
                })
                .collect(),
            samples: records,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let raw = std::fs::read_to_string(&path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let manifest: Manifest =
            serde_json::from_str(&raw).map_err(|e| DataError::Manifest(e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!(
                "unsupported dataset manifest version {}",
                manifest.format_version
            )));
        }

        let users: Vec<UserProfile> = manifest
            .users
            .iter()
            .map(|u| UserProfile {
                user_id: u.user_id,
                style: u.style,
                seed: u.seed,
            })
            .collect();
        let mut samples: Vec<Vec<Sample>> = vec![Vec::new(); users.len()];
        for record in &manifest.samples {
            let idx = users
                .iter()
                .position(|u| u.user_id == record.user_id)
                .ok_or_else(|| {
                    DataError::Manifest(format!("sample for unknown user {}", record.user_id))
                })?;
            let image = fileio::read_tensor(&dir.join(&record.file))
                .map_err(|e| DataError::Manifest(format!("reading {}: {e}", record.file)))?;
            samples[idx].push(Sample {
                prompt: Prompt::parse(&record.prompt)?,
                image,
                user_id: record.user_id,
            });
        }
        Ok(Dataset {
            config: manifest.config,
            users,
            samples,
        })
    }
}
