//! Byte-level encoder-decoder transformer.
//!
//! Pre-norm residual blocks, sinusoidal absolute positions and untied
//! input/output embeddings. The encoder is three times as deep as the
//! decoder by default. The token embedding table is shared by encoder and
//! decoder inputs and has one row per vocabulary id, so registering district
//! tokens means growing it with [`TranscriptionModel::resize_embeddings`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{BASE_VOCAB_SIZE, PAD_ID};

/// Token fed to the decoder before the first target token.
pub const DECODER_START_ID: usize = PAD_ID;

const LN_EPS: f64 = 1e-5;
/// Standard deviation of freshly initialized embedding rows and output columns.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub max_gen_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_width(128, 4, 2)
    }
}

impl ModelConfig {
    /// Config with the given width, heads and decoder depth. The encoder gets
    /// three times the decoder's layers and the feed-forward width is four
    /// times `d_model`.
    pub fn with_width(d_model: usize, n_heads: usize, decoder_layers: usize) -> Self {
        ModelConfig {
            d_model,
            n_heads,
            encoder_layers: 3 * decoder_layers,
            decoder_layers,
            d_ff: 4 * d_model,
            dropout: 0.1,
            max_positions: 512,
            vocab_size: BASE_VOCAB_SIZE,
            max_gen_len: 1024,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(format!("model config: {msg}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("encoder and decoder need at least one layer".into());
        }
        if self.d_ff == 0 || self.max_positions == 0 || self.max_gen_len == 0 {
            return fail("d_ff, max_positions and max_gen_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < BASE_VOCAB_SIZE {
            return fail(format!(
                "vocab_size {} is smaller than the byte vocabulary",
                self.vocab_size
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies (matrices yes, biases and norm
    /// parameters no).
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attention,
    ln_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    head: Linear,
}

/// Projection weights of one attention block, bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Visibility pattern for a batch of attention score matrices: entry
/// `[b][i][j]` is true when query `i` of sequence `b` may attend to key `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub visible: Vec<bool>,
}

impl AttentionMask {
    /// Keys at or beyond each sequence's length are hidden.
    pub fn padding(queries: usize, keys: usize, key_lens: &[usize]) -> Self {
        let mut visible = Vec::with_capacity(key_lens.len() * queries * keys);
        for &len in key_lens {
            for _ in 0..queries {
                visible.extend((0..keys).map(|j| j < len));
            }
        }
        AttentionMask {
            batch: key_lens.len(),
            queries,
            keys,
            visible,
        }
    }

    /// Query `i` sees keys `0..=i` that are inside the sequence.
    pub fn causal(len: usize, lens: &[usize]) -> Self {
        let mut visible = Vec::with_capacity(lens.len() * len * len);
        for &l in lens {
            for i in 0..len {
                visible.extend((0..len).map(|j| j <= i && j < l));
            }
        }
        AttentionMask {
            batch: lens.len(),
            queries: len,
            keys: len,
            visible,
        }
    }

    fn block(&self, b: usize) -> &[bool] {
        let n = self.queries * self.keys;
        &self.visible[b * n..(b + 1) * n]
    }
}

fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// `softmax(q·kᵀ/√d + mask)·v` for one head. Returns the output and the
/// attention weights. Rows with no visible key produce zeros.
pub fn scaled_dot_product_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    visible: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (tq, dq) = g
        .value(q)
        .dims2()
        .ok_or(Error::contract("attention query must be a matrix"))?;
    let (tk, dk) = g
        .value(k)
        .dims2()
        .ok_or(Error::contract("attention key must be a matrix"))?;
    if dq != dk || g.shape(v).first() != Some(&tk) {
        return Err(Error::Dimension {
            op: "attention",
            lhs: vec![tq, dq],
            rhs: g.shape(k).to_vec(),
        });
    }
    let qs = g.scale(q, T::from_f64(1.0 / (dq as f64).sqrt()))?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(qs, kt)?;
    let weights = match visible {
        Some(mask) => g.masked_softmax(scores, mask)?,
        None => g.softmax(scores, 1)?,
    };
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention over a batch of sequences stacked row-wise:
/// `x_q` is `[batch·queries, d]` and `x_kv` is `[batch·keys, d]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    w: &AttentionWeights,
    x_q: Var,
    x_kv: Var,
    n_heads: usize,
    mask: &AttentionMask,
) -> Result<Var> {
    let d = *g.shape(x_q).last().unwrap_or(&0);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::contract(format!(
            "d_model {d} not divisible by {n_heads} heads"
        )));
    }
    let (rows_q, rows_kv) = (g.shape(x_q)[0], g.shape(x_kv)[0]);
    if rows_q != mask.batch * mask.queries
        || rows_kv != mask.batch * mask.keys
        || mask.visible.len() != mask.batch * mask.queries * mask.keys
    {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            lhs: vec![rows_q, rows_kv],
            rhs: vec![mask.batch, mask.queries, mask.keys],
        });
    }
    let dh = d / n_heads;
    let q = linear(g, x_q, w.wq, w.bq)?;
    let k = linear(g, x_kv, w.wk, w.bk)?;
    let v = linear(g, x_kv, w.wv, w.bv)?;
    let mut per_seq = Vec::with_capacity(mask.batch);
    for b in 0..mask.batch {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = g.slice(q, b * mask.queries, mask.queries, h * dh, dh)?;
            let kh = g.slice(k, b * mask.keys, mask.keys, h * dh, dh)?;
            let vh = g.slice(v, b * mask.keys, mask.keys, h * dh, dh)?;
            let (out, _) = scaled_dot_product_attention(g, qh, kh, vh, Some(mask.block(b)))?;
            heads.push(out);
        }
        per_seq.push(g.concat_cols(&heads)?);
    }
    let joined = g.concat_rows(&per_seq)?;
    linear(g, joined, w.wo, w.bo)
}

/// Sinusoidal position table `[positions, d]`.
pub fn sinusoidal_positions(positions: usize, d: usize) -> Vec<f64> {
    let mut table = vec![0.0; positions * d];
    for pos in 0..positions {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            table[pos * d + 2 * i] = (pos as f64 * freq).sin();
            table[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
        if d % 2 == 1 {
            table[pos * d + d - 1] = 0.0;
        }
    }
    table
}

/// Encoder states for a padded batch.
pub struct Encoded {
    pub states: Var,
    pub lens: Vec<usize>,
    pub width: usize,
}

/// Encoder output for a single source sequence, reusable across decoding steps.
#[derive(Clone, Debug)]
pub struct EncodedSource<T> {
    pub states: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct TranscriptionModel<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
    positions: Vec<T>,
}

struct Builder<'r, T> {
    params: Vec<Param<T>>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn push(&mut self, name: String, shape: &[usize], data: Vec<T>, decay: bool) -> usize {
        let tensor = Tensor::new(shape.to_vec(), data).expect("builder shapes are consistent");
        self.params.push(Param {
            name,
            tensor,
            decay,
        });
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("std is positive");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(self.rng))).collect();
        self.push(name, shape, data, true)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        let w = self.push(format!("{name}.weight"), &[fan_in, fan_out], data, true);
        let b = self.push(
            format!("{name}.bias"),
            &[fan_out],
            vec![T::zero(); fan_out],
            false,
        );
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.push(format!("{name}.gain"), &[d], vec![T::one(); d], false);
        let b = self.push(format!("{name}.bias"), &[d], vec![T::zero(); d], false);
        Norm { g, b }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }
}

impl<T: Scalar> TranscriptionModel<T> {
    /// Randomly initialized model. Identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ff, vocab) = (config.d_model, config.d_ff, config.vocab_size);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let embed = b.normal("embed.weight".into(), &[vocab, d], EMBED_INIT_STD);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayer {
                    ln_attn: b.norm(&format!("{p}.ln_attn"), d),
                    attn: b.attention(&format!("{p}.attn"), d),
                    ln_ff: b.norm(&format!("{p}.ln_ff"), d),
                    ff_in: b.linear(&format!("{p}.ff_in"), d, ff),
                    ff_out: b.linear(&format!("{p}.ff_out"), ff, d),
                }
            })
            .collect();
        let encoder_norm = b.norm("encoder.ln_final", d);
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    ln_self: b.norm(&format!("{p}.ln_self"), d),
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    ln_cross: b.norm(&format!("{p}.ln_cross"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                    ln_ff: b.norm(&format!("{p}.ln_ff"), d),
                    ff_in: b.linear(&format!("{p}.ff_in"), d, ff),
                    ff_out: b.linear(&format!("{p}.ff_out"), ff, d),
                }
            })
            .collect();
        let decoder_norm = b.norm("decoder.ln_final", d);
        let head = b.linear("head", d, vocab);
        let params = b.params;
        let positions = sinusoidal_positions(config.max_positions, d)
            .into_iter()
            .map(T::from_f64)
            .collect();
        Ok(TranscriptionModel {
            config,
            params,
            layout: Layout {
                embed,
                encoder,
                encoder_norm,
                decoder,
                decoder_norm,
                head,
            },
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Parameter count of everything under `prefix` (e.g. `"encoder."`).
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn embedding_rows(&self) -> usize {
        self.params[self.layout.embed].tensor.shape()[0]
    }

    /// Same model with every parameter converted to another element type.
    pub fn cast<U: Scalar>(&self) -> TranscriptionModel<U> {
        TranscriptionModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                })
                .collect(),
            layout: self.layout.clone(),
            positions: self
                .positions
                .iter()
                .map(|&x| U::from_f64(x.to_f64()))
                .collect(),
        }
    }

    /// Grows the embedding table and output projection to `new_vocab_size`.
    /// Existing rows and columns are kept bit-exactly; new embedding rows and
    /// output columns are drawn from N(0, 0.02²) and new output biases are 0.
    pub fn resize_embeddings(&mut self, new_vocab_size: usize, seed: u64) -> Result<()> {
        let old = self.config.vocab_size;
        if new_vocab_size < old {
            return Err(Error::contract(format!(
                "cannot shrink the vocabulary from {old} to {new_vocab_size}"
            )));
        }
        if new_vocab_size == old {
            return Ok(());
        }
        let d = self.config.d_model;
        let extra = new_vocab_size - old;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, EMBED_INIT_STD).expect("std is positive");
        let mut draw =
            |n: usize| -> Vec<T> { (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect() };

        let embed = &mut self.params[self.layout.embed].tensor;
        let mut data = std::mem::take(embed).into_data();
        data.extend(draw(extra * d));
        *embed = Tensor::new(vec![new_vocab_size, d], data)?;

        let head_w = &mut self.params[self.layout.head.w].tensor;
        let old_w = std::mem::take(head_w).into_data();
        let new_cols = draw(d * extra);
        let mut data = Vec::with_capacity(d * new_vocab_size);
        for r in 0..d {
            data.extend_from_slice(&old_w[r * old..(r + 1) * old]);
            data.extend_from_slice(&new_cols[r * extra..(r + 1) * extra]);
        }
        *head_w = Tensor::new(vec![d, new_vocab_size], data)?;

        let head_b = &mut self.params[self.layout.head.b].tensor;
        let mut data = std::mem::take(head_b).into_data();
        data.resize(new_vocab_size, T::zero());
        *head_b = Tensor::new(vec![new_vocab_size], data)?;

        self.config.vocab_size = new_vocab_size;
        Ok(())
    }

    /// Adds every parameter to `g`, borrowing the tensors. `trainable`
    /// controls whether they receive gradients.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param_ref(&p.tensor)
                } else {
                    g.constant_ref(&p.tensor)
                }
            })
            .collect()
    }

    fn attn_weights(a: &Attention, v: &[Var]) -> AttentionWeights {
        AttentionWeights {
            wq: v[a.q.w],
            bq: v[a.q.b],
            wk: v[a.k.w],
            bk: v[a.k.b],
            wv: v[a.v.w],
            bv: v[a.v.b],
            wo: v[a.o.w],
            bo: v[a.o.b],
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::UnknownId {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if ids.is_empty() {
            return Err(Error::contract("empty id sequence"));
        }
        Ok(())
    }

    /// Token embeddings scaled by √d plus positions, for sequences padded to
    /// a common width. Returns `[batch·width, d]` and the true lengths.
    fn embed<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        v: &[Var],
        seqs: &[&[usize]],
        rng: &mut Option<&mut R>,
    ) -> Result<(Var, Vec<usize>, usize)> {
        for s in seqs {
            self.check_ids(s)?;
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if width == 0 {
            return Err(Error::contract("empty batch"));
        }
        let d = self.config.d_model;
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut pos = Vec::with_capacity(seqs.len() * width * d);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD_ID, width - s.len()));
            pos.extend_from_slice(&self.positions[..width * d]);
        }
        let tok = g.embedding(v[self.layout.embed], &ids)?;
        let tok = g.scale(tok, T::from_f64((d as f64).sqrt()))?;
        let pos = g.constant(Tensor::new(vec![seqs.len() * width, d], pos)?);
        let x = g.add(tok, pos)?;
        let x = self.dropout(g, x, rng)?;
        Ok((x, seqs.iter().map(|s| s.len()).collect(), width))
    }

    fn dropout<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        rng: &mut Option<&mut R>,
    ) -> Result<Var> {
        match rng {
            Some(r) => g.dropout(x, self.config.dropout, &mut **r),
            None => Ok(x),
        }
    }

    fn feed_forward<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        v: &[Var],
        ff_in: Linear,
        ff_out: Linear,
        x: Var,
        rng: &mut Option<&mut R>,
    ) -> Result<Var> {
        let h = linear(g, x, v[ff_in.w], v[ff_in.b])?;
        let h = g.gelu(h)?;
        let h = linear(g, h, v[ff_out.w], v[ff_out.b])?;
        self.dropout(g, h, rng)
    }

    fn norm(&self, g: &mut Graph<'_, T>, v: &[Var], n: Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, v[n.g], v[n.b], T::from_f64(LN_EPS))
    }

    /// Runs the encoder over a batch of source sequences.
    pub fn encode_batch<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        v: &[Var],
        sources: &[&[usize]],
        mut rng: Option<&mut R>,
    ) -> Result<Encoded> {
        let (mut x, lens, width) = self.embed(g, v, sources, &mut rng)?;
        let mask = AttentionMask::padding(width, width, &lens);
        let heads = self.config.n_heads;
        for layer in &self.layout.encoder {
            let h = self.norm(g, v, layer.ln_attn, x)?;
            let a =
                multi_head_attention(g, &Self::attn_weights(&layer.attn, v), h, h, heads, &mask)?;
            let a = self.dropout(g, a, &mut rng)?;
            x = g.add(x, a)?;
            let h = self.norm(g, v, layer.ln_ff, x)?;
            let f = self.feed_forward(g, v, layer.ff_in, layer.ff_out, h, &mut rng)?;
            x = g.add(x, f)?;
        }
        let states = self.norm(g, v, self.layout.encoder_norm, x)?;
        Ok(Encoded {
            states,
            lens,
            width,
        })
    }

    /// Decoder logits `[batch·width, vocab]` for teacher-forced inputs.
    pub fn decode_batch<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        v: &[Var],
        enc: &Encoded,
        decoder_inputs: &[&[usize]],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        if decoder_inputs.len() != enc.lens.len() {
            return Err(Error::Dimension {
                op: "decode_batch",
                lhs: vec![enc.lens.len()],
                rhs: vec![decoder_inputs.len()],
            });
        }
        let (mut x, lens, width) = self.embed(g, v, decoder_inputs, &mut rng)?;
        let self_mask = AttentionMask::causal(width, &lens);
        let cross_mask = AttentionMask::padding(width, enc.width, &enc.lens);
        let heads = self.config.n_heads;
        for layer in &self.layout.decoder {
            let h = self.norm(g, v, layer.ln_self, x)?;
            let a = multi_head_attention(
                g,
                &Self::attn_weights(&layer.self_attn, v),
                h,
                h,
                heads,
                &self_mask,
            )?;
            let a = self.dropout(g, a, &mut rng)?;
            x = g.add(x, a)?;
            let h = self.norm(g, v, layer.ln_cross, x)?;
            let c = multi_head_attention(
                g,
                &Self::attn_weights(&layer.cross_attn, v),
                h,
                enc.states,
                heads,
                &cross_mask,
            )?;
            let c = self.dropout(g, c, &mut rng)?;
            x = g.add(x, c)?;
            let h = self.norm(g, v, layer.ln_ff, x)?;
            let f = self.feed_forward(g, v, layer.ff_in, layer.ff_out, h, &mut rng)?;
            x = g.add(x, f)?;
        }
        let x = self.norm(g, v, self.layout.decoder_norm, x)?;
        let head = self.layout.head;
        linear(g, x, v[head.w], v[head.b])
    }

    /// Teacher-forced logits `[len(target_prefix), vocab]` for one example,
    /// computed in inference mode (no dropout). Row `t` scores the token that
    /// follows `target_prefix[..=t]`.
    pub fn forward(&self, source_ids: &[usize], target_prefix_ids: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let v = self.bind(&mut g, false);
        let enc = self.encode_batch::<ChaCha8Rng>(&mut g, &v, &[source_ids], None)?;
        let logits =
            self.decode_batch::<ChaCha8Rng>(&mut g, &v, &enc, &[target_prefix_ids], None)?;
        Ok(g.value(logits).clone())
    }

    /// Encoder states for one source sequence, for repeated decoding steps.
    pub fn encode(&self, source_ids: &[usize]) -> Result<EncodedSource<T>> {
        let mut g = Graph::inference();
        let v = self.bind(&mut g, false);
        let enc = self.encode_batch::<ChaCha8Rng>(&mut g, &v, &[source_ids], None)?;
        Ok(EncodedSource {
            states: g.value(enc.states).clone(),
        })
    }

    /// Logits for the token following `prefix`, given encoded source states.
    pub fn next_token_logits(&self, source: &EncodedSource<T>, prefix: &[usize]) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let v = self.bind(&mut g, false);
        let width = source.states.shape()[0];
        let states = g.constant_ref(&source.states);
        let enc = Encoded {
            states,
            lens: vec![width],
            width,
        };
        let logits = self.decode_batch::<ChaCha8Rng>(&mut g, &v, &enc, &[prefix], None)?;
        let t = g.value(logits);
        Ok(t.row(prefix.len() - 1).to_vec())
    }

    /// Scalar training loss for a padded batch. `targets[i]` is the label
    /// sequence (ending in EOS); the decoder input is the start token followed
    /// by all but the last label. Padding positions are excluded from the loss.
    pub fn batch_loss<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        v: &[Var],
        sources: &[&[usize]],
        targets: &[&[usize]],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let decoder_inputs: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| {
                let mut input = Vec::with_capacity(t.len());
                input.push(DECODER_START_ID);
                input.extend_from_slice(&t[..t.len().saturating_sub(1)]);
                input
            })
            .collect();
        let inputs: Vec<&[usize]> = decoder_inputs.iter().map(Vec::as_slice).collect();
        let width = targets.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut labels = Vec::with_capacity(targets.len() * width);
        for t in targets {
            labels.extend_from_slice(t);
            labels.extend(std::iter::repeat_n(PAD_ID, width - t.len()));
        }
        let enc = self.encode_batch(g, v, sources, rng.as_deref_mut())?;
        let logits = self.decode_batch(g, v, &enc, &inputs, rng)?;
        g.cross_entropy(logits, &labels, PAD_ID)
    }
}
