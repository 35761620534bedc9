//! Joint text-image transformer predicting flow velocities.
//!
//! Image patches and prompt tokens share bidirectional attention in every
//! block. Conditioning enters through per-token adaptive layer norm: a
//! modulation vector is synthesized from the pooled prompt and the
//! timestep, each block maps it to (scale, shift, gate) triples, and
//! preference deltas are added to the text tokens' vectors before that map.


use crate::adapters::DeltaSet;
use crate::config::BackboneConfig;
use crate::rng::Rng;
use crate::synth::{Prompt, PROMPT_LEN, VOCAB_SIZE};
use crate::tensor::{Result, Tape, Tensor, TensorError};

/// Prompt encoding: one row per token plus a pooled summary vector.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    /// `[PROMPT_LEN, d_model]`
    pub token_embeds: Tensor,
    /// `[1, d_pool]`
    pub pooled: Tensor,
}

/// Learned weights of a two-layer perceptron with silu in between.
#[derive(Clone, Debug)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
    /// Maps a token's modulation vector to six (scale, shift, gate) planes.
    pub mod_w: Tensor,
    pub mod_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub token_table: Tensor,
    pub pos_text: Tensor,
    pub pool_w: Tensor,
    pub pool_b: Tensor,
    pub mod_prompt: MlpWeights,
    pub mod_time: MlpWeights,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub pos_image: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

pub(crate) fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::new(shape.to_vec(), rng.normal_vec(shape.iter().product(), std)).unwrap()
}

pub(crate) fn fan_in_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    normal_tensor(rng, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

impl MlpWeights {
    fn init(rng: &mut Rng, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        MlpWeights {
            w1: fan_in_tensor(rng, d_in, d_hidden),
            b1: Tensor::zeros(&[1, d_hidden]),
            w2: fan_in_tensor(rng, d_hidden, d_out),
            b2: Tensor::zeros(&[1, d_out]),
        }
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = tape.linear(x, &self.w1, &self.b1)?;
        let h = tape.silu(&h)?;
        tape.linear(&h, &self.w2, &self.b2)
    }

    fn for_each<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w1"), &self.w1));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), &self.w2));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    fn map(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(MlpWeights {
            w1: f(&format!("{prefix}.w1"), &self.w1)?,
            b1: f(&format!("{prefix}.b1"), &self.b1)?,
            w2: f(&format!("{prefix}.w2"), &self.w2)?,
            b2: f(&format!("{prefix}.b2"), &self.b2)?,
        })
    }
}

impl BlockWeights {
    fn init(rng: &mut Rng, cfg: &BackboneConfig) -> Self {
        let d = cfg.d_model;
        BlockWeights {
            wq: fan_in_tensor(rng, d, d),
            bq: Tensor::zeros(&[1, d]),
            wk: fan_in_tensor(rng, d, d),
            bk: Tensor::zeros(&[1, d]),
            wv: fan_in_tensor(rng, d, d),
            bv: Tensor::zeros(&[1, d]),
            wo: fan_in_tensor(rng, d, d),
            bo: Tensor::zeros(&[1, d]),
            ff1_w: fan_in_tensor(rng, d, cfg.ff_hidden),
            ff1_b: Tensor::zeros(&[1, cfg.ff_hidden]),
            ff2_w: fan_in_tensor(rng, cfg.ff_hidden, d),
            ff2_b: Tensor::zeros(&[1, d]),
            // Zero-started modulation: gates open as training moves them.
            mod_w: Tensor::zeros(&[cfg.d_mod, 6 * d]),
            mod_b: Tensor::zeros(&[1, 6 * d]),
        }
    }

    fn for_each<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ff1_w", &self.ff1_w),
            ("ff1_b", &self.ff1_b),
            ("ff2_w", &self.ff2_w),
            ("ff2_b", &self.ff2_b),
            ("mod_w", &self.mod_w),
            ("mod_b", &self.mod_b),
        ] {
            out.push((format!("{prefix}.{name}"), t));
        }
    }

    fn map(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(BlockWeights {
            wq: f(&format!("{prefix}.wq"), &self.wq)?,
            bq: f(&format!("{prefix}.bq"), &self.bq)?,
            wk: f(&format!("{prefix}.wk"), &self.wk)?,
            bk: f(&format!("{prefix}.bk"), &self.bk)?,
            wv: f(&format!("{prefix}.wv"), &self.wv)?,
            bv: f(&format!("{prefix}.bv"), &self.bv)?,
            wo: f(&format!("{prefix}.wo"), &self.wo)?,
            bo: f(&format!("{prefix}.bo"), &self.bo)?,
            ff1_w: f(&format!("{prefix}.ff1_w"), &self.ff1_w)?,
            ff1_b: f(&format!("{prefix}.ff1_b"), &self.ff1_b)?,
            ff2_w: f(&format!("{prefix}.ff2_w"), &self.ff2_w)?,
            ff2_b: f(&format!("{prefix}.ff2_b"), &self.ff2_b)?,
            mod_w: f(&format!("{prefix}.mod_w"), &self.mod_w)?,
            mod_b: f(&format!("{prefix}.mod_b"), &self.mod_b)?,
        })
    }
}

/// Per-token modulation input to a block.
pub enum TokenModulation {
    /// Arbitrary per-token vectors, `[n_tokens, d_mod]`.
    PerToken(Tensor),
    /// Text tokens carry individual vectors; every image token shares one.
    TextPlusShared { text: Tensor, shared: Tensor },
}

/// Intermediate (scale, shift, gate) values and pre-attention activations,
/// recorded per block when requested.
#[derive(Clone, Debug, Default)]
pub struct VelocityTrace {
    pub blocks: Vec<BlockTrace>,
}

#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Six `[n_tokens, d_model]` planes: scale/shift/gate for attention,
    /// then scale/shift/gate for the feed-forward sublayer.
    pub planes: [Tensor; 6],
    /// Modulated tokens entering attention, before any cross-token mixing.
    pub attn_input: Tensor,
}

impl Backbone {
    pub fn init(config: &BackboneConfig, seed: u64) -> Self {
        let mut rng = Rng::seed_from(seed);
        let d = config.d_model;
        Backbone {
            token_table: normal_tensor(&mut rng, &[VOCAB_SIZE, d], 0.02),
            pos_text: normal_tensor(&mut rng, &[PROMPT_LEN, d], 0.02),
            pool_w: fan_in_tensor(&mut rng, d, config.d_pool),
            pool_b: Tensor::zeros(&[1, config.d_pool]),
            mod_prompt: MlpWeights::init(&mut rng, config.d_pool, config.d_mod, config.d_mod),
            mod_time: MlpWeights::init(&mut rng, config.d_pool, config.d_mod, config.d_mod),
            patch_w: fan_in_tensor(&mut rng, config.patch_dim(), d),
            patch_b: Tensor::zeros(&[1, d]),
            pos_image: normal_tensor(&mut rng, &[config.n_image_tokens(), d], 0.02),
            blocks: (0..config.blocks)
                .map(|_| BlockWeights::init(&mut rng, config))
                .collect(),
            head_w: Tensor::zeros(&[d, config.patch_dim()]),
            head_b: Tensor::zeros(&[1, config.patch_dim()]),
            config: config.clone(),
        }
    }

    pub fn for_each_param<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("token_table".into(), &self.token_table));
        out.push(("pos_text".into(), &self.pos_text));
        out.push(("pool_w".into(), &self.pool_w));
        out.push(("pool_b".into(), &self.pool_b));
        self.mod_prompt.for_each("mod_prompt", out);
        self.mod_time.for_each("mod_time", out);
        out.push(("patch_w".into(), &self.patch_w));
        out.push(("patch_b".into(), &self.patch_b));
        out.push(("pos_image".into(), &self.pos_image));
        for (j, block) in self.blocks.iter().enumerate() {
            block.for_each(&format!("block{j:02}"), out);
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
    }

    pub fn map_params(&self, f: &mut impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(Backbone {
            config: self.config.clone(),
            token_table: f("token_table", &self.token_table)?,
            pos_text: f("pos_text", &self.pos_text)?,
            pool_w: f("pool_w", &self.pool_w)?,
            pool_b: f("pool_b", &self.pool_b)?,
            mod_prompt: self.mod_prompt.map("mod_prompt", f)?,
            mod_time: self.mod_time.map("mod_time", f)?,
            patch_w: f("patch_w", &self.patch_w)?,
            patch_b: f("patch_b", &self.patch_b)?,
            pos_image: f("pos_image", &self.pos_image)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(j, block)| block.map(&format!("block{j:02}"), f))
                .collect::<Result<Vec<_>>>()?,
            head_w: f("head_w", &self.head_w)?,
            head_b: f("head_b", &self.head_b)?,
        })
    }

    /// Track every weight on the tape, as trainable parameters under
    /// `prefix` or as frozen constants.
    pub fn bind(&self, tape: &mut Tape, prefix: &str, trainable: bool) -> Result<Self> {
        self.map_params(&mut |name, t| {
            if trainable {
                tape.param(&format!("{prefix}.{name}"), t)
            } else {
                Ok(tape.constant(t))
            }
        })
    }

    // ── Prompt encoding ──────────────────────────────────────────────

    /// Token table lookup plus learned slot positions; the pooled vector is
    /// a learned projection of the token mean. The empty prompt selects the
    /// reserved null rows.
    pub fn encode_prompt(&self, tape: &mut Tape, prompt: &Prompt) -> Result<TextEncoding> {
        let ids = prompt.token_ids();
        let rows = tape.embed_rows(&self.token_table, &ids)?;
        let token_embeds = tape.add(&rows, &self.pos_text)?;
        let mean = tape.mean_rows(&token_embeds)?;
        let pooled = tape.linear(&mean, &self.pool_w, &self.pool_b)?;
        Ok(TextEncoding {
            token_embeds,
            pooled,
        })
    }

    /// Sinusoidal embedding of the timestep, `[1, d_pool]`.
    pub fn timestep_embedding(&self, t: f64) -> Tensor {
        let d = self.config.d_pool;
        let half = d / 2;
        let mut data = vec![0.0; d];
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let freq = 1000.0f64.powf(exponent);
            data[i] = (t * freq).sin();
            data[half + i] = (t * freq).cos();
        }
        Tensor::new(vec![1, d], data).unwrap()
    }

    /// The prompt branch of the modulation vector.
    pub fn prompt_modulation(&self, tape: &mut Tape, pooled: &Tensor) -> Result<Tensor> {
        self.mod_prompt.forward(tape, pooled)
    }

    /// The timestep branch of the modulation vector.
    pub fn time_modulation(&self, tape: &mut Tape, t: f64) -> Result<Tensor> {
        let emb = self.timestep_embedding(t);
        self.mod_time.forward(tape, &emb)
    }

    /// Base modulation vector: sum of the prompt and timestep branches.
    pub fn base_modulation(&self, tape: &mut Tape, pooled: &Tensor, t: f64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&t) {
            return Err(TensorError::Invalid {
                op: "base_modulation",
                msg: format!("t = {t} outside [0, 1]"),
            });
        }
        let p = self.prompt_modulation(tape, pooled)?;
        let tm = self.time_modulation(tape, t)?;
        tape.add(&p, &tm)
    }

    // ── Blocks ───────────────────────────────────────────────────────

    fn attention(&self, tape: &mut Tape, block: &BlockWeights, x: &Tensor) -> Result<Tensor> {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let q = tape.linear(x, &block.wq, &block.bq)?;
        let k = tape.linear(x, &block.wk, &block.bk)?;
        let v = tape.linear(x, &block.wv, &block.bv)?;
        let sizes = vec![dh; heads];
        let qs = tape.split(&q, 1, &sizes)?;
        let ks = tape.split(&k, 1, &sizes)?;
        let vs = tape.split(&v, 1, &sizes)?;
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let kt = tape.transpose(&ks[h])?;
            let scores = tape.matmul(&qs[h], &kt)?;
            let scores = tape.scale(&scores, 1.0 / (dh as f64).sqrt())?;
            let attn = tape.softmax_rows(&scores)?;
            ctx.push(tape.matmul(&attn, &vs[h])?);
        }
        let ctx_refs: Vec<&Tensor> = ctx.iter().collect();
        let joined = tape.concat(&ctx_refs, 1)?;
        tape.linear(&joined, &block.wo, &block.bo)
    }

    /// Expand per-token modulation vectors into the six per-token planes.
    fn modulation_planes(
        &self,
        tape: &mut Tape,
        block: &BlockWeights,
        modulation: &TokenModulation,
        n_tokens: usize,
    ) -> Result<Vec<Tensor>> {
        let d = self.config.d_model;
        let params = match modulation {
            TokenModulation::PerToken(y) => {
                if y.shape()[0] != n_tokens {
                    return Err(TensorError::Invalid {
                        op: "apply_modulation",
                        msg: format!(
                            "{} modulation vectors for {} tokens",
                            y.shape()[0],
                            n_tokens
                        ),
                    });
                }
                tape.linear(y, &block.mod_w, &block.mod_b)?
            }
            TokenModulation::TextPlusShared { text, shared } => {
                let n_text = text.shape()[0];
                let rows = tape.concat(&[text, shared], 0)?;
                let small = tape.linear(&rows, &block.mod_w, &block.mod_b)?;
                let parts = tape.split(&small, 0, &[n_text, 1])?;
                let rest = tape.broadcast_rows(&parts[1], n_tokens - n_text)?;
                tape.concat(&[&parts[0], &rest], 0)?
            }
        };
        tape.split(&params, 1, &[d; 6])
    }

    /// One block update under per-token adaptive layer norm:
    /// `x += gate * sublayer(norm(x) * (1 + scale) + shift)` for the
    /// attention and feed-forward sublayers.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        block_index: usize,
        tokens: &Tensor,
        modulation: &TokenModulation,
        trace: Option<&mut VelocityTrace>,
    ) -> Result<Tensor> {
        let block = &self.blocks[block_index];
        let n = tokens.shape()[0];
        let planes = self.modulation_planes(tape, block, modulation, n)?;
        let one = Tensor::scalar(1.0);

        let normed = tape.layer_norm(tokens, None, None)?;
        let scale1 = tape.add(&planes[0], &one)?;
        let scaled = tape.mul(&normed, &scale1)?;
        let attn_input = tape.add(&scaled, &planes[1])?;
        let attn_out = self.attention(tape, block, &attn_input)?;
        let gated = tape.mul(&planes[2], &attn_out)?;
        let tokens = tape.add(tokens, &gated)?;

        let normed2 = tape.layer_norm(&tokens, None, None)?;
        let scale2 = tape.add(&planes[3], &one)?;
        let scaled2 = tape.mul(&normed2, &scale2)?;
        let ff_input = tape.add(&scaled2, &planes[4])?;
        let h = tape.linear(&ff_input, &block.ff1_w, &block.ff1_b)?;
        let h = tape.silu(&h)?;
        let ff_out = tape.linear(&h, &block.ff2_w, &block.ff2_b)?;
        let gated2 = tape.mul(&planes[5], &ff_out)?;
        let out = tape.add(&tokens, &gated2)?;

        if let Some(trace) = trace {
            trace.blocks.push(BlockTrace {
                planes: [
                    planes[0].detach(),
                    planes[1].detach(),
                    planes[2].detach(),
                    planes[3].detach(),
                    planes[4].detach(),
                    planes[5].detach(),
                ],
                attn_input: attn_input.detach(),
            });
        }
        Ok(out)
    }

    // ── Velocity ─────────────────────────────────────────────────────

    /// Predict the flow velocity for `z_t` under a prompt encoding and
    /// timestep, optionally with preference modulation directions added to
    /// the text tokens' modulation vectors.
    pub fn velocity(
        &self,
        tape: &mut Tape,
        z_t: &Tensor,
        text: &TextEncoding,
        t: f64,
        deltas: Option<&DeltaSet>,
        mut trace: Option<&mut VelocityTrace>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        if z_t.shape() != cfg.image_shape().as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "velocity",
                lhs: z_t.shape().to_vec(),
                rhs: cfg.image_shape(),
            });
        }
        if let Some(d) = deltas {
            d.check_dims(PROMPT_LEN, cfg.blocks, cfg.d_mod)?;
        }

        let patches = tape.patchify(z_t, cfg.patch_size)?;
        let embedded = tape.linear(&patches, &self.patch_w, &self.patch_b)?;
        let image_tokens = tape.add(&embedded, &self.pos_image)?;
        let mut tokens = tape.concat(&[&text.token_embeds, &image_tokens], 0)?;

        let y = self.base_modulation(tape, &text.pooled, t)?;
        let text_y_base = tape.broadcast_rows(&y, PROMPT_LEN)?;

        for j in 0..cfg.blocks {
            let modulation = match deltas {
                None => TokenModulation::TextPlusShared {
                    text: text_y_base.clone(),
                    shared: y.clone(),
                },
                Some(d) => {
                    let with_shared = tape.add(&text_y_base, &d.shared)?;
                    let text_y = tape.add(&with_shared, &d.distinct[j])?;
                    let image_y = if cfg.modulate_image_tokens {
                        let delta_sum = tape.add(&d.shared, &d.distinct[j])?;
                        let mean_delta = tape.mean_rows(&delta_sum)?;
                        tape.add(&y, &mean_delta)?
                    } else {
                        y.clone()
                    };
                    TokenModulation::TextPlusShared {
                        text: text_y,
                        shared: image_y,
                    }
                }
            };
            tokens = self.block_forward(tape, j, &tokens, &modulation, trace.as_deref_mut())?;
        }

        let parts = tape.split(&tokens, 0, &[PROMPT_LEN, cfg.n_image_tokens()])?;
        let out_patches = tape.linear(&parts[1], &self.head_w, &self.head_b)?;
        tape.unpatchify(
            &out_patches,
            cfg.patch_size,
            cfg.channels,
            cfg.image_side,
            cfg.image_side,
        )
    }
}
