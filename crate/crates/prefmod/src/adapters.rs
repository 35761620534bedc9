//! Preference adapters and learnable user embeddings.
//!
//! Each adapter is a stack of three cross-attention blocks: text-token
//! states query the rows of a user embedding matrix, and a zero-initialized
//! projection head emits one modulation direction per text token. The
//! block-shared adapter emits a single direction reused by every backbone
//! block; the block-distinct adapter widens its head to emit one direction
//! per block. New users can be expressed as linear combinations over the
//! trained embedding bank.

use crate::backbone::{fan_in_tensor, normal_tensor, TextEncoding};
use crate::config::AdapterConfig;
use crate::rng::Rng;
use crate::tensor::{Result, Tape, Tensor, TensorError};

/// Cross-attention blocks per adapter.
pub const ADAPTER_BLOCKS: usize = 3;

// ── User embeddings ──────────────────────────────────────────────────

/// One user's learnable preference embedding: a token matrix of shape
/// `[rows, d_user]`.
#[derive(Clone, Debug)]
pub struct UserEmbedding {
    pub user_id: u32,
    pub matrix: Tensor,
}

impl UserEmbedding {
    pub fn init(user_id: u32, config: &AdapterConfig, rng: &mut Rng) -> Self {
        UserEmbedding {
            user_id,
            matrix: normal_tensor(
                rng,
                &[config.user_rows, config.d_user],
                config.embedding_init_std,
            ),
        }
    }
}

/// The trained users' embeddings, in user-id order.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingBank {
    pub embeddings: Vec<UserEmbedding>,
}

impl EmbeddingBank {
    pub fn init(user_ids: &[u32], config: &AdapterConfig, seed: u64) -> Self {
        let mut rng = Rng::seed_from(seed);
        EmbeddingBank {
            embeddings: user_ids
                .iter()
                .map(|&id| UserEmbedding::init(id, config, &mut rng))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn get(&self, user_id: u32) -> Option<&UserEmbedding> {
        self.embeddings.iter().find(|e| e.user_id == user_id)
    }

    pub fn for_each_param<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for e in &self.embeddings {
            out.push((format!("user{:04}", e.user_id), &e.matrix));
        }
    }

    pub fn map_params(&self, f: &mut impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(EmbeddingBank {
            embeddings: self
                .embeddings
                .iter()
                .map(|e| {
                    Ok(UserEmbedding {
                        user_id: e.user_id,
                        matrix: f(&format!("user{:04}", e.user_id), &e.matrix)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

/// Coefficients of a linear combination over the bank.
#[derive(Clone, Debug)]
pub struct CombinationCoefficients(pub Tensor);

impl CombinationCoefficients {
    pub fn uniform(bank_size: usize) -> Self {
        CombinationCoefficients(Tensor::filled(&[bank_size], 1.0 / bank_size as f64))
    }
}

/// `e_new = sum_k alpha_k * e_k`, entrywise over the bank.
pub fn combine(
    tape: &mut Tape,
    bank_matrices: &[Tensor],
    alpha: &Tensor,
) -> Result<Tensor> {
    if alpha.numel() != bank_matrices.len() || bank_matrices.is_empty() {
        return Err(TensorError::Invalid {
            op: "combine",
            msg: format!(
                "{} coefficients for a bank of {}",
                alpha.numel(),
                bank_matrices.len()
            ),
        });
    }
    let coeffs = tape.split(alpha, 0, &vec![1; bank_matrices.len()])?;
    let mut acc: Option<Tensor> = None;
    for (matrix, coeff) in bank_matrices.iter().zip(&coeffs) {
        let term = tape.mul(matrix, coeff)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(&prev, &term)?,
        });
    }
    Ok(acc.unwrap())
}

// ── Modulation directions ────────────────────────────────────────────

/// Per-text-token modulation directions: one matrix shared across backbone
/// blocks and one per block.
#[derive(Clone, Debug)]
pub struct DeltaSet {
    /// `[n_text, d_mod]`
    pub shared: Tensor,
    /// One `[n_text, d_mod]` entry per backbone block.
    pub distinct: Vec<Tensor>,
}

impl DeltaSet {
    /// All-zero deltas, the state before any adapter training.
    pub fn zeros(n_text: usize, blocks: usize, d_mod: usize) -> Self {
        DeltaSet {
            shared: Tensor::zeros(&[n_text, d_mod]),
            distinct: vec![Tensor::zeros(&[n_text, d_mod]); blocks],
        }
    }

    pub fn check_dims(&self, n_text: usize, blocks: usize, d_mod: usize) -> Result<()> {
        let want = [n_text, d_mod];
        if self.shared.shape() != want || self.distinct.len() != blocks {
            return Err(TensorError::Invalid {
                op: "delta_set",
                msg: format!(
                    "expected shared [{n_text}, {d_mod}] and {blocks} distinct entries, got {:?} and {}",
                    self.shared.shape(),
                    self.distinct.len()
                ),
            });
        }
        for d in &self.distinct {
            if d.shape() != want {
                return Err(TensorError::Invalid {
                    op: "delta_set",
                    msg: format!("distinct entry shape {:?}", d.shape()),
                });
            }
        }
        Ok(())
    }

    pub fn is_all_zero(&self) -> bool {
        self.shared.data().iter().all(|&v| v == 0.0)
            && self
                .distinct
                .iter()
                .all(|d| d.data().iter().all(|&v| v == 0.0))
    }

    /// Flatten every token's direction (and for the distinct adapter every
    /// block's) into one vector for dispersion distances.
    pub fn flat_shared(&self, tape: &mut Tape) -> Result<Tensor> {
        let n = self.shared.numel();
        tape.reshape(&self.shared, &[n])
    }

    pub fn flat_distinct(&self, tape: &mut Tape) -> Result<Tensor> {
        let refs: Vec<&Tensor> = self.distinct.iter().collect();
        let joined = tape.concat(&refs, 0)?;
        let n = joined.numel();
        tape.reshape(&joined, &[n])
    }

    /// Deltas scaled by a factor; detached values, used by evaluation
    /// probes that interpolate between no conditioning and full strength.
    pub fn scaled(&self, factor: f64) -> DeltaSet {
        let scale_one = |t: &Tensor| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| v * factor).collect(),
            )
            .unwrap()
        };
        DeltaSet {
            shared: scale_one(&self.shared),
            distinct: self.distinct.iter().map(scale_one).collect(),
        }
    }

    /// Token-mean alternative reduction (config switch for ablations).
    pub fn mean_shared(&self, tape: &mut Tape) -> Result<Tensor> {
        let m = tape.mean_rows(&self.shared)?;
        let n = m.numel();
        tape.reshape(&m, &[n])
    }

    pub fn mean_distinct(&self, tape: &mut Tape) -> Result<Tensor> {
        let refs: Vec<&Tensor> = self.distinct.iter().collect();
        let joined = tape.concat(&refs, 0)?;
        let m = tape.mean_rows(&joined)?;
        let n = m.numel();
        tape.reshape(&m, &[n])
    }
}

/// `y_i^j = y + shared_i + distinct_i^j`: one text token's modulation
/// vector for one block. Plain vector addition.
pub fn compose(
    tape: &mut Tape,
    y: &Tensor,
    deltas: &DeltaSet,
    token: usize,
    block: usize,
) -> Result<Tensor> {
    let n_text = deltas.shared.shape()[0];
    if token >= n_text || block >= deltas.distinct.len() {
        return Err(TensorError::Invalid {
            op: "compose",
            msg: format!(
                "token {token} or block {block} out of range ({n_text} tokens, {} blocks)",
                deltas.distinct.len()
            ),
        });
    }
    let ones = vec![1; n_text];
    let shared_row = &tape.split(&deltas.shared, 0, &ones)?[token];
    let distinct_row = &tape.split(&deltas.distinct[block], 0, &ones)?[token];
    let with_shared = tape.add(y, shared_row)?;
    tape.add(&with_shared, distinct_row)
}

// ── Adapter weights ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CrossBlockWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    /// Key/value projections map user-embedding rows from `d_user` into the
    /// adapter width.
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
}

impl CrossBlockWeights {
    fn init(rng: &mut Rng, d_model: usize, d_user: usize) -> Self {
        CrossBlockWeights {
            wq: fan_in_tensor(rng, d_model, d_model),
            bq: Tensor::zeros(&[1, d_model]),
            wk: fan_in_tensor(rng, d_user, d_model),
            bk: Tensor::zeros(&[1, d_model]),
            wv: fan_in_tensor(rng, d_user, d_model),
            bv: Tensor::zeros(&[1, d_model]),
            wo: fan_in_tensor(rng, d_model, d_model),
            bo: Tensor::zeros(&[1, d_model]),
            ff1_w: fan_in_tensor(rng, d_model, 2 * d_model),
            ff1_b: Tensor::zeros(&[1, 2 * d_model]),
            ff2_w: fan_in_tensor(rng, 2 * d_model, d_model),
            ff2_b: Tensor::zeros(&[1, d_model]),
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
        ] {
            out.push((format!("{prefix}.{name}"), t));
        }
    }

    fn map(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(CrossBlockWeights {
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
        })
    }
}

/// One preference adapter: three cross-attention blocks and a
/// zero-initialized projection head.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub blocks: Vec<CrossBlockWeights>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// d_mod for the block-shared adapter, blocks * d_mod for the
    /// block-distinct one.
    pub out_dim: usize,
    pub d_mod: usize,
}

impl Adapter {
    /// `backbone_blocks = 1` builds the block-shared adapter; larger values
    /// widen the head for block-distinct output.
    pub fn init(
        config: &AdapterConfig,
        d_model: usize,
        d_mod: usize,
        backbone_blocks: usize,
        seed: u64,
    ) -> Self {
        let mut rng = Rng::seed_from(seed);
        let out_dim = d_mod * backbone_blocks;
        Adapter {
            blocks: (0..ADAPTER_BLOCKS)
                .map(|_| CrossBlockWeights::init(&mut rng, d_model, config.d_user))
                .collect(),
            // Zero start: no modulation direction until training moves it.
            head_w: Tensor::zeros(&[d_model, out_dim]),
            head_b: Tensor::zeros(&[1, out_dim]),
            out_dim,
            d_mod,
        }
    }

    pub fn for_each_param<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, block) in self.blocks.iter().enumerate() {
            block.for_each(&format!("block{i}"), out);
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
    }

    pub fn map_params(&self, f: &mut impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(Adapter {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("block{i}"), f))
                .collect::<Result<Vec<_>>>()?,
            head_w: f("head_w", &self.head_w)?,
            head_b: f("head_b", &self.head_b)?,
            out_dim: self.out_dim,
            d_mod: self.d_mod,
        })
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, trainable: bool) -> Result<Self> {
        self.map_params(&mut |name, t| {
            if trainable {
                tape.param(&format!("{prefix}.{name}"), t)
            } else {
                Ok(tape.constant(t))
            }
        })
    }

    /// Run the cross-attention stack: text tokens as queries, user
    /// embedding rows as keys and values (no positional encoding on the
    /// rows, so their order cannot matter), then the projection head.
    /// Returns `[n_text, out_dim]`.
    pub fn forward(&self, tape: &mut Tape, text: &TextEncoding, user: &Tensor) -> Result<Tensor> {
        let mut x = text.token_embeds.clone();
        for block in &self.blocks {
            let normed = tape.layer_norm(&x, None, None)?;
            let q = tape.linear(&normed, &block.wq, &block.bq)?;
            let k = tape.linear(user, &block.wk, &block.bk)?;
            let v = tape.linear(user, &block.wv, &block.bv)?;
            let kt = tape.transpose(&k)?;
            let scores = tape.matmul(&q, &kt)?;
            let scores = tape.scale(&scores, 1.0 / (q.shape()[1] as f64).sqrt())?;
            let attn = tape.softmax_rows(&scores)?;
            let ctx = tape.matmul(&attn, &v)?;
            let attn_out = tape.linear(&ctx, &block.wo, &block.bo)?;
            x = tape.add(&x, &attn_out)?;

            let normed2 = tape.layer_norm(&x, None, None)?;
            let h = tape.linear(&normed2, &block.ff1_w, &block.ff1_b)?;
            let h = tape.silu(&h)?;
            let ff_out = tape.linear(&h, &block.ff2_w, &block.ff2_b)?;
            x = tape.add(&x, &ff_out)?;
        }
        tape.linear(&x, &self.head_w, &self.head_b)
    }
}

/// Both adapters of the preference mechanism.
#[derive(Clone, Debug)]
pub struct AdapterPair {
    pub shared: Adapter,
    pub distinct: Adapter,
    pub backbone_blocks: usize,
}

impl AdapterPair {
    pub fn init(
        config: &AdapterConfig,
        d_model: usize,
        d_mod: usize,
        backbone_blocks: usize,
        seed: u64,
    ) -> Self {
        AdapterPair {
            shared: Adapter::init(config, d_model, d_mod, 1, seed ^ 0x51a5),
            distinct: Adapter::init(config, d_model, d_mod, backbone_blocks, seed ^ 0xd157),
            backbone_blocks,
        }
    }

    pub fn for_each_param<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        let mut tmp = Vec::new();
        self.shared.for_each_param(&mut tmp);
        for (name, t) in tmp.drain(..) {
            out.push((format!("shared.{name}"), t));
        }
        self.distinct.for_each_param(&mut tmp);
        for (name, t) in tmp.drain(..) {
            out.push((format!("distinct.{name}"), t));
        }
    }

    pub fn map_params(&self, f: &mut impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(AdapterPair {
            shared: self
                .shared
                .map_params(&mut |name, t| f(&format!("shared.{name}"), t))?,
            distinct: self
                .distinct
                .map_params(&mut |name, t| f(&format!("distinct.{name}"), t))?,
            backbone_blocks: self.backbone_blocks,
        })
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str, trainable: bool) -> Result<Self> {
        self.map_params(&mut |name, t| {
            if trainable {
                tape.param(&format!("{prefix}.{name}"), t)
            } else {
                Ok(tape.constant(t))
            }
        })
    }

    /// The block-shared modulation directions, `[n_text, d_mod]`.
    pub fn shared_delta(&self, tape: &mut Tape, text: &TextEncoding, user: &Tensor) -> Result<Tensor> {
        self.shared.forward(tape, text, user)
    }

    /// The block-distinct modulation directions, one `[n_text, d_mod]` per
    /// backbone block, from the widened head output.
    pub fn distinct_delta(
        &self,
        tape: &mut Tape,
        text: &TextEncoding,
        user: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let wide = self.distinct.forward(tape, text, user)?;
        tape.split(&wide, 1, &vec![self.distinct.d_mod; self.backbone_blocks])
    }

    /// Full delta set for one (user, prompt) pair.
    pub fn deltas(&self, tape: &mut Tape, text: &TextEncoding, user: &Tensor) -> Result<DeltaSet> {
        Ok(DeltaSet {
            shared: self.shared_delta(tape, text, user)?,
            distinct: self.distinct_delta(tape, text, user)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::config::{AdapterConfig, BackboneConfig};
    use crate::rng::Rng;
    use crate::synth::{Count, Position, Prompt, Shape, PROMPT_LEN};
    use crate::tensor::{AdamParams, AdamState};
    use proptest::prelude::*;

    fn small_backbone_config() -> BackboneConfig {
        BackboneConfig {
            blocks: 2,
            d_model: 16,
            heads: 2,
            d_mod: 12,
            d_pool: 8,
            patch_size: 4,
            ff_hidden: 24,
            image_side: 8,
            channels: 3,
            modulate_image_tokens: false,
        }
    }

    fn small_adapter_config() -> AdapterConfig {
        AdapterConfig {
            user_rows: 4,
            d_user: 10,
            embedding_init_std: 0.02,
        }
    }

    fn prompt() -> Prompt {
        Prompt::new(Shape::Triangle, Count::One, Position::Right)
    }

    fn randomize_heads(pair: &mut AdapterPair, seed: u64) {
        let mut rng = Rng::seed_from(seed);
        pair.shared.head_w = normal_tensor(&mut rng, pair.shared.head_w.shape(), 0.1);
        pair.shared.head_b = normal_tensor(&mut rng, pair.shared.head_b.shape(), 0.1);
        pair.distinct.head_w = normal_tensor(&mut rng, pair.distinct.head_w.shape(), 0.1);
        pair.distinct.head_b = normal_tensor(&mut rng, pair.distinct.head_b.shape(), 0.1);
    }

    #[test]
    fn zero_initialized_adapters_emit_zero_deltas() {
        let bcfg = small_backbone_config();
        let pair = AdapterPair::init(&small_adapter_config(), bcfg.d_model, bcfg.d_mod, bcfg.blocks, 5);
        let bb = Backbone::init(&bcfg, 6);
        let mut rng = Rng::seed_from(7);
        let user = normal_tensor(&mut rng, &[4, 10], 0.02);
        let mut tape = Tape::new();
        let enc = bb.encode_prompt(&mut tape, &prompt()).unwrap();
        let deltas = pair.deltas(&mut tape, &enc, &user).unwrap();
        assert!(deltas.is_all_zero());
        deltas.check_dims(PROMPT_LEN, bcfg.blocks, bcfg.d_mod).unwrap();
    }

    #[test]
    fn zero_start_preserves_backbone_output_bit_exactly() {
        let bcfg = small_backbone_config();
        let bb = Backbone::init(&bcfg, 21);
        let pair = AdapterPair::init(&small_adapter_config(), bcfg.d_model, bcfg.d_mod, bcfg.blocks, 22);
        let mut rng = Rng::seed_from(23);
        let user = normal_tensor(&mut rng, &[4, 10], 0.02);
        let z = normal_tensor(&mut rng, &bcfg.image_shape(), 1.0);

        let mut tape = Tape::new();
        let enc = bb.encode_prompt(&mut tape, &prompt()).unwrap();
        let deltas = pair.deltas(&mut tape, &enc, &user).unwrap();
        let conditioned = bb
            .velocity(&mut tape, &z, &enc, 0.6, Some(&deltas), None)
            .unwrap();
        let plain = bb.velocity(&mut tape, &z, &enc, 0.6, None, None).unwrap();
        assert!(conditioned.bits_eq(&plain.detach()));
    }

    #[test]
    fn user_embedding_row_order_is_irrelevant() {
        let bcfg = small_backbone_config();
        let bb = Backbone::init(&bcfg, 31);
        let mut pair =
            AdapterPair::init(&small_adapter_config(), bcfg.d_model, bcfg.d_mod, bcfg.blocks, 32);
        randomize_heads(&mut pair, 33);
        let mut rng = Rng::seed_from(34);
        let user = normal_tensor(&mut rng, &[4, 10], 0.5);
        let mut permuted_rows = Vec::new();
        for row in [2usize, 0, 3, 1] {
            permuted_rows.extend_from_slice(&user.data()[row * 10..(row + 1) * 10]);
        }
        let permuted = Tensor::new(vec![4, 10], permuted_rows).unwrap();

        let run = |u: &Tensor| {
            let mut tape = Tape::new();
            let enc = bb.encode_prompt(&mut tape, &prompt()).unwrap();
            let d = pair.deltas(&mut tape, &enc, u).unwrap();
            (d.shared.detach(), d.distinct[0].detach())
        };
        let (s1, d1) = run(&user);
        let (s2, d2) = run(&permuted);
        assert!(s1.max_abs_diff(&s2) < 1e-12);
        assert!(d1.max_abs_diff(&d2) < 1e-12);
    }

    #[test]
    fn output_row_i_tracks_token_i_and_all_of_user() {
        let bcfg = small_backbone_config();
        let bb = Backbone::init(&bcfg, 41);
        let mut pair =
            AdapterPair::init(&small_adapter_config(), bcfg.d_model, bcfg.d_mod, bcfg.blocks, 42);
        randomize_heads(&mut pair, 43);
        let mut rng = Rng::seed_from(44);
        let user = normal_tensor(&mut rng, &[4, 10], 0.5);

        // perturbing one text token moves only that token's direction
        // (queries never mix across tokens inside the adapter)
        let run_tokens = |enc_tokens: &Tensor| {
            let mut tape = Tape::new();
            let enc = TextEncoding {
                token_embeds: enc_tokens.clone(),
                pooled: Tensor::zeros(&[1, bcfg.d_pool]),
            };
            pair.shared_delta(&mut tape, &enc, &user).unwrap().detach()
        };
        let tokens = normal_tensor(&mut rng, &[PROMPT_LEN, bcfg.d_model], 1.0);
        let mut bumped = tokens.data().to_vec();
        for c in 0..bcfg.d_model {
            bumped[bcfg.d_model + c] += 0.3; // token 1
        }
        let bumped = Tensor::new(vec![PROMPT_LEN, bcfg.d_model], bumped).unwrap();
        let a = run_tokens(&tokens);
        let b = run_tokens(&bumped);
        let dm = bcfg.d_mod;
        assert_eq!(&a.data()[..dm], &b.data()[..dm]);
        assert!(a.data()[dm..2 * dm] != b.data()[dm..2 * dm]);
        assert_eq!(&a.data()[2 * dm..], &b.data()[2 * dm..]);

        // perturbing any row of the user embedding moves every token's
        // direction (keys and values feed all queries)
        let mut user_bumped = user.data().to_vec();
        for c in 0..10 {
            user_bumped[3 * 10 + c] += 0.4;
        }
        let user_bumped = Tensor::new(vec![4, 10], user_bumped).unwrap();
        let run_user = |u: &Tensor| {
            let mut tape = Tape::new();
            let enc = bb.encode_prompt(&mut tape, &prompt()).unwrap();
            pair.shared_delta(&mut tape, &enc, u).unwrap().detach()
        };
        let a = run_user(&user);
        let b = run_user(&user_bumped);
        for i in 0..PROMPT_LEN {
            assert!(
                a.data()[i * dm..(i + 1) * dm] != b.data()[i * dm..(i + 1) * dm],
                "token {i} ignored the user embedding"
            );
        }
    }

    #[test]
    fn single_block_distinct_adapter_matches_shared_width() {
        let cfg = small_adapter_config();
        let adapter = Adapter::init(&cfg, 16, 12, 1, 9);
        assert_eq!(adapter.out_dim, 12);
        assert_eq!(adapter.head_w.shape(), &[16, 12]);
    }

    #[test]
    fn distinct_blocks_diverge_after_one_training_step() {
        let bcfg = small_backbone_config();
        let bb = Backbone::init(&bcfg, 51);
        let acfg = small_adapter_config();
        let pair = AdapterPair::init(&acfg, bcfg.d_model, bcfg.d_mod, bcfg.blocks, 52);
        let mut rng = Rng::seed_from(53);
        let user = normal_tensor(&mut rng, &[4, 10], 0.5);
        // distinct random targets per block create asymmetric gradients
        let targets: Vec<Tensor> = (0..bcfg.blocks)
            .map(|_| normal_tensor(&mut rng, &[PROMPT_LEN, bcfg.d_mod], 1.0))
            .collect();

        let mut tape = Tape::new();
        let bound = pair.bind(&mut tape, "adapter", true).unwrap();
        let enc = bb.encode_prompt(&mut tape, &prompt()).unwrap();
        let distinct = bound.distinct_delta(&mut tape, &enc, &user).unwrap();
        let mut loss_terms = Vec::new();
        for (d, target) in distinct.iter().zip(&targets) {
            let diff = tape.sub(d, target).unwrap();
            let sq = tape.mul(&diff, &diff).unwrap();
            loss_terms.push(tape.mean(&sq).unwrap());
        }
        let refs: Vec<&Tensor> = loss_terms.iter().collect();
        let stacked = tape.concat(&refs, 0).unwrap();
        let loss = tape.mean(&stacked).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let mut updated = pair.clone();
        let mut state = AdamState::new(AdamParams {
            lr: 0.05,
            ..AdamParams::default()
        });
        // one optimizer step on the distinct head alone
        let mut targets: Vec<(String, &mut Tensor)> = vec![
            ("adapter.distinct.head_w".into(), &mut updated.distinct.head_w),
            ("adapter.distinct.head_b".into(), &mut updated.distinct.head_b),
        ];
        state.step(&mut targets, &grads).unwrap();

        let mut tape = Tape::new();
        let enc = bb.encode_prompt(&mut tape, &prompt()).unwrap();
        let after = updated.distinct_delta(&mut tape, &enc, &user).unwrap();
        for j in 0..bcfg.blocks {
            assert!(!after[j].data().iter().all(|&v| v == 0.0));
        }
        for a in 0..bcfg.blocks {
            for b in (a + 1)..bcfg.blocks {
                assert!(
                    after[a].max_abs_diff(&after[b]) > 1e-9,
                    "blocks {a} and {b} received identical deltas"
                );
            }
        }
    }

    #[test]
    fn compose_adds_the_right_rows() {
        let mut rng = Rng::seed_from(61);
        let d_mod = 6;
        let y = normal_tensor(&mut rng, &[1, d_mod], 1.0);
        let deltas = DeltaSet {
            shared: normal_tensor(&mut rng, &[3, d_mod], 1.0),
            distinct: vec![
                normal_tensor(&mut rng, &[3, d_mod], 1.0),
                normal_tensor(&mut rng, &[3, d_mod], 1.0),
            ],
        };

        let mut tape = Tape::new();
        // zero deltas leave y unchanged
        let zero = DeltaSet::zeros(3, 2, d_mod);
        let same = compose(&mut tape, &y, &zero, 1, 1).unwrap();
        assert!(same.bits_eq(&y));

        // exact row arithmetic
        let out = compose(&mut tape, &y, &deltas, 2, 1).unwrap();
        for c in 0..d_mod {
            let expect = y.data()[c] + deltas.shared.get2(2, c) + deltas.distinct[1].get2(2, c);
            assert!((out.data()[c] - expect).abs() < 1e-15);
        }

        // changing only the block index changes only the distinct term
        let out0 = compose(&mut tape, &y, &deltas, 2, 0).unwrap();
        for c in 0..d_mod {
            let diff = out.data()[c] - out0.data()[c];
            let expect = deltas.distinct[1].get2(2, c) - deltas.distinct[0].get2(2, c);
            assert!((diff - expect).abs() < 1e-15);
        }

        // index range errors
        assert!(compose(&mut tape, &y, &deltas, 3, 0).is_err());
        assert!(compose(&mut tape, &y, &deltas, 0, 2).is_err());
    }

    #[test]
    fn combine_recovers_basis_and_is_linear() {
        let mut rng = Rng::seed_from(71);
        let bank: Vec<Tensor> = (0..4).map(|_| normal_tensor(&mut rng, &[3, 5], 1.0)).collect();

        // one-hot recovery
        let mut tape = Tape::new();
        let mut alpha = vec![0.0; 4];
        alpha[2] = 1.0;
        let alpha_t = Tensor::new(vec![4], alpha).unwrap();
        let out = combine(&mut tape, &bank, &alpha_t).unwrap();
        assert!(out.max_abs_diff(&bank[2]) < 1e-15);

        // zero coefficients give the zero embedding
        let zero = Tensor::zeros(&[4]);
        let out = combine(&mut tape, &bank, &zero).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        // consistent permutation leaves the result unchanged
        let a = Tensor::new(vec![4], vec![0.3, -0.9, 2.0, 0.25]).unwrap();
        let base = combine(&mut tape, &bank, &a).unwrap();
        let perm = [3usize, 1, 0, 2];
        let bank_p: Vec<Tensor> = perm.iter().map(|&i| bank[i].clone()).collect();
        let alpha_p =
            Tensor::new(vec![4], perm.iter().map(|&i| a.data()[i]).collect()).unwrap();
        let out_p = combine(&mut tape, &bank_p, &alpha_p).unwrap();
        assert!(base.max_abs_diff(&out_p) < 1e-12);

        // linearity: combine(bank, 2u + 3v) = 2 combine(bank, u) + 3 combine(bank, v)
        let u = Tensor::new(vec![4], rng.normal_vec(4, 1.0)).unwrap();
        let v = Tensor::new(vec![4], rng.normal_vec(4, 1.0)).unwrap();
        let mixed: Vec<f64> = u
            .data()
            .iter()
            .zip(v.data().iter())
            .map(|(x, y)| 2.0 * x + 3.0 * y)
            .collect();
        let mixed = Tensor::new(vec![4], mixed).unwrap();
        let lhs = combine(&mut tape, &bank, &mixed).unwrap();
        let cu = combine(&mut tape, &bank, &u).unwrap();
        let cv = combine(&mut tape, &bank, &v).unwrap();
        let cu2 = tape.scale(&cu, 2.0).unwrap();
        let cv3 = tape.scale(&cv, 3.0).unwrap();
        let rhs = tape.add(&cu2, &cv3).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);

        // length mismatch
        let bad = Tensor::zeros(&[3]);
        assert!(combine(&mut tape, &bank, &bad).is_err());
    }

    #[test]
    fn bank_lookup_and_param_names() {
        let cfg = small_adapter_config();
        let bank = EmbeddingBank::init(&[3, 7, 11], &cfg, 81);
        assert_eq!(bank.len(), 3);
        assert!(bank.get(7).is_some());
        assert!(bank.get(8).is_none());
        let mut params = Vec::new();
        bank.for_each_param(&mut params);
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["user0003", "user0007", "user0011"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn adapter_output_shape_contract(
            rows in 2usize..6,
            d_user in 4usize..12,
            d_mod in 4usize..10,
            blocks in 1usize..5,
            seed in 0u64..500,
        ) {
            let acfg = AdapterConfig { user_rows: rows, d_user, embedding_init_std: 0.02 };
            let d_model = 16;
            let mut pair = AdapterPair::init(&acfg, d_model, d_mod, blocks, seed);
            randomize_heads(&mut pair, seed ^ 1);
            let mut rng = Rng::seed_from(seed ^ 2);
            let user = normal_tensor(&mut rng, &[rows, d_user], 0.5);
            let enc = TextEncoding {
                token_embeds: normal_tensor(&mut rng, &[PROMPT_LEN, d_model], 1.0),
                pooled: Tensor::zeros(&[1, 8]),
            };
            let mut tape = Tape::new();
            let deltas = pair.deltas(&mut tape, &enc, &user).unwrap();
            prop_assert_eq!(deltas.shared.shape(), &[PROMPT_LEN, d_mod]);
            prop_assert_eq!(deltas.distinct.len(), blocks);
            for d in &deltas.distinct {
                prop_assert_eq!(d.shape(), &[PROMPT_LEN, d_mod]);
            }
        }
    }
}
