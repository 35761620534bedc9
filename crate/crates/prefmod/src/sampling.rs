//! Reverse-time generation: explicit Euler integration of the learned
//! velocity field from noise at t = 1 down to data at t = 0, with optional
//! preference conditioning computed once per (user, prompt).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterPair, DeltaSet};
use crate::backbone::Backbone;
use crate::config::{SamplerConfig, Variant};
use crate::rng::{derive_seed, Rng};
use crate::synth::Prompt;
use crate::tensor::{Result, Tape, Tensor, TensorError};
use crate::training::{preference_deltas_detached, Checkpoint};

/// Anything that can be integrated: maps (state, time) to a velocity.
pub trait VelocityField {
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self(z, t)
    }
}

/// Explicit Euler from t = 1 to t = 0 on a uniform grid:
/// `z <- z - dt * v(z, t_k)`. Exact for constant fields at any step count.
pub fn euler_integrate(field: &dyn VelocityField, z1: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(TensorError::Invalid {
            op: "euler_integrate",
            msg: "steps must be >= 1".into(),
        });
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1.clone();
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = field.eval(&z, t)?;
        if v.shape() != z.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "euler_integrate",
                lhs: z.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let scaled = tape.scale(&v, -dt)?;
        z = tape.add(&z, &scaled)?.detach();
    }
    Ok(z)
}

/// Model weights needed for sampling, borrowed from a checkpoint.
pub struct SampleSource<'a> {
    pub backbone: &'a Backbone,
    pub adapters: Option<&'a AdapterPair>,
    pub variant: Variant,
}

impl<'a> SampleSource<'a> {
    pub fn from_checkpoint(checkpoint: &'a Checkpoint) -> Self {
        SampleSource {
            backbone: &checkpoint.backbone,
            adapters: checkpoint.adapters.as_ref(),
            variant: checkpoint.config.variant,
        }
    }

    /// Deltas for one (user, prompt), computed once and reused across all
    /// integration steps. None without an embedding or without adapters.
    fn deltas_for(&self, prompt: &Prompt, user: Option<&Tensor>) -> Result<Option<DeltaSet>> {
        match (user, self.adapters) {
            (Some(matrix), Some(adapters)) => Ok(Some(preference_deltas_detached(
                self.backbone,
                adapters,
                prompt,
                matrix,
                self.variant,
            )?)),
            (Some(_), None) => Err(TensorError::Invalid {
                op: "sample",
                msg: "user embedding given but the checkpoint has no adapters".into(),
            }),
            (None, _) => Ok(None),
        }
    }

    /// Generate one image: seeded standard-normal start, Euler integration
    /// of the velocity field, final clamp to [-1, 1].
    pub fn sample(
        &self,
        prompt: &Prompt,
        user: Option<&Tensor>,
        config: &SamplerConfig,
        seed: u64,
    ) -> Result<Tensor> {
        let deltas = self.deltas_for(prompt, user)?;
        self.sample_with_deltas(prompt, deltas.as_ref(), config, seed)
    }

    /// Sampling with prepared modulation directions (evaluation probes
    /// scale or substitute them).
    pub fn sample_with_deltas(
        &self,
        prompt: &Prompt,
        deltas: Option<&DeltaSet>,
        config: &SamplerConfig,
        seed: u64,
    ) -> Result<Tensor> {
        let shape = self.backbone.config.image_shape();
        let mut rng = Rng::seed_from(seed);
        let z1 = Tensor::new(shape.clone(), rng.normal_vec(shape.iter().product(), 1.0))?;

        let backbone = self.backbone;
        let field = move |z: &Tensor, t: f64| -> Result<Tensor> {
            let mut tape = Tape::new();
            let enc = backbone.encode_prompt(&mut tape, prompt)?;
            Ok(backbone
                .velocity(&mut tape, z, &enc, t, deltas, None)?
                .detach())
        };
        let raw = euler_integrate(&field, &z1, config.steps)?;
        let clamped: Vec<f64> = raw.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Tensor::new(shape, clamped)
    }

    /// The modulation directions this source would use for (prompt, user).
    pub fn deltas(&self, prompt: &Prompt, user: &Tensor) -> Result<Option<DeltaSet>> {
        self.deltas_for(prompt, Some(user))
    }
}

// ── Grid sampling ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    /// None marks the unconditional arm.
    pub user_id: Option<u32>,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridManifest {
    pub master_seed: u64,
    pub sampler_steps: usize,
    pub cells: Vec<GridCell>,
}

/// Images for a users-by-prompts grid, each cell seeded from the master
/// seed and its coordinates so any cell can be regenerated alone.
pub fn sample_grid(
    source: &SampleSource,
    users: &[(u32, Tensor)],
    prompts: &[Prompt],
    config: &SamplerConfig,
    master_seed: u64,
) -> Result<(Vec<Tensor>, GridManifest)> {
    if users.is_empty() || prompts.is_empty() {
        return Err(TensorError::Invalid {
            op: "sample_grid",
            msg: "grid needs at least one user and one prompt".into(),
        });
    }
    let mut images = Vec::with_capacity(users.len() * prompts.len());
    let mut cells = Vec::with_capacity(users.len() * prompts.len());
    for (row, (user_id, matrix)) in users.iter().enumerate() {
        for (col, prompt) in prompts.iter().enumerate() {
            let seed = cell_seed(master_seed, row, col);
            images.push(source.sample(prompt, Some(matrix), config, seed)?);
            cells.push(GridCell {
                row,
                col,
                user_id: Some(*user_id),
                prompt: prompt.text(),
                seed,
            });
        }
    }
    Ok((
        images,
        GridManifest {
            master_seed,
            sampler_steps: config.steps,
            cells,
        },
    ))
}

pub fn cell_seed(master_seed: u64, row: usize, col: usize) -> u64 {
    derive_seed(master_seed, &[0x9a1d, row as u64, col as u64])
}

// ── Image export ─────────────────────────────────────────────────────

/// Binary PPM (P6) with [-1, 1] mapped to 8-bit.
pub fn image_to_ppm_bytes(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            let v = (d[c * plane + i] + 1.0) / 2.0;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Tile images row-major into one PPM with 1-pixel separators.
pub fn write_grid_ppm(
    path: &Path,
    images: &[Tensor],
    rows: usize,
    cols: usize,
) -> std::io::Result<()> {
    assert_eq!(images.len(), rows * cols);
    let s = images[0].shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let gap = 1usize;
    let total_w = cols * w + (cols - 1) * gap;
    let total_h = rows * h + (rows - 1) * gap;
    let mut canvas = vec![32u8; total_w * total_h * 3];
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let oy = r * (h + gap);
        let ox = c * (w + gap);
        let d = img.data();
        for y in 0..h {
            for x in 0..w {
                let dst = ((oy + y) * total_w + ox + x) * 3;
                for ch in 0..3 {
                    let v = (d[ch * plane + y * w + x] + 1.0) / 2.0;
                    canvas[dst + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    let mut out = format!("P6\n{total_w} {total_h}\n255\n").into_bytes();
    out.extend_from_slice(&canvas);
    std::fs::write(path, out)
}
