//! The conditional denoising network.
//!
//! An encoder-decoder transformer predicts, for every target position at
//! once, a probability vector over the vocabulary interpreted as `x0_hat`.
//! The encoder consumes the source sequence (language tokens first), the
//! decoder consumes the noisy target with bidirectional self-attention and
//! cross-attention to the encoder output. A time positional encoding —
//! sinusoidal embedding of the step followed by a learned linear layer —
//! is added to the input of every encoder and decoder layer.
//!
//! Blocks are pre-layer-norm; source `[PAD]` positions are masked as
//! attention keys everywhere, target positions never are (pads are modeled
//! tokens). Everything runs in f64 on a [`Tape`], so the same code path
//! serves inference and gradient computation.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::diffusion::{self, Categorical};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, VarId};
use crate::tokenizer::PAD_ID;

const MASK_NEG: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// vocabulary size
    pub k: usize,
    /// fixed sequence length
    pub l: usize,
    /// diffusion steps
    pub t_steps: usize,
}

impl ModelConfig {
    /// Desk-scale defaults; trains in minutes on one CPU core.
    pub fn desk(k: usize, l: usize, t_steps: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            k,
            l,
            t_steps,
        }
    }

    /// Configuration matching the reported full-scale runs
    /// (12 layers, 16 heads, width 512).
    pub fn paper(k: usize, l: usize, t_steps: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 12,
            n_heads: 16,
            d_model: 512,
            d_ff: 2048,
            k,
            l,
            t_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_ff,
            self.k,
            self.l,
            self.t_steps,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::InvalidArg(
                "model config fields must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArg(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k < 2 {
            return Err(Error::InvalidArg("vocabulary size must be >= 2".into()));
        }
        Ok(())
    }

    /// Expected tensor shapes, keyed by name. Parameter count is a pure
    /// function of the config.
    pub fn tensor_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        let d = self.d_model;
        let mut shapes: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let attn = |shapes: &mut BTreeMap<String, (usize, usize)>, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                shapes.insert(format!("{prefix}.{w}"), (d, d));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                shapes.insert(format!("{prefix}.{b}"), (1, d));
            }
        };
        let ln = |shapes: &mut BTreeMap<String, (usize, usize)>, prefix: &str| {
            shapes.insert(format!("{prefix}.g"), (1, d));
            shapes.insert(format!("{prefix}.b"), (1, d));
        };
        let ffn = |shapes: &mut BTreeMap<String, (usize, usize)>, prefix: &str| {
            shapes.insert(format!("{prefix}.w1"), (d, self.d_ff));
            shapes.insert(format!("{prefix}.b1"), (1, self.d_ff));
            shapes.insert(format!("{prefix}.w2"), (self.d_ff, d));
            shapes.insert(format!("{prefix}.b2"), (1, d));
        };
        shapes.insert("embed.token".into(), (self.k, d));
        shapes.insert("time.w".into(), (d, d));
        shapes.insert("time.b".into(), (1, d));
        for i in 0..self.n_layers {
            attn(&mut shapes, &format!("enc.{i}.attn"));
            ln(&mut shapes, &format!("enc.{i}.ln1"));
            ln(&mut shapes, &format!("enc.{i}.ln2"));
            ffn(&mut shapes, &format!("enc.{i}.ffn"));

            attn(&mut shapes, &format!("dec.{i}.self"));
            attn(&mut shapes, &format!("dec.{i}.cross"));
            ln(&mut shapes, &format!("dec.{i}.ln1"));
            ln(&mut shapes, &format!("dec.{i}.ln2"));
            ln(&mut shapes, &format!("dec.{i}.ln3"));
            ffn(&mut shapes, &format!("dec.{i}.ffn"));
        }
        ln(&mut shapes, "enc_final_ln");
        ln(&mut shapes, "final_ln");
        shapes.insert("out.w".into(), (d, self.k));
        shapes.insert("out.b".into(), (1, self.k));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().values().map(|(r, c)| r * c).sum()
    }
}

/// All trainable tensors, keyed by name.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub cfg: ModelConfig,
    tensors: BTreeMap<String, Array2<f64>>,
}

impl DenoiserParams {
    /// Scaled-uniform fan-in init. Layer-norm gains start at 1, biases at 0,
    /// and the output projection is scaled by 0.1 so the initial `x0_hat`
    /// is near-uniform.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<DenoiserParams> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, (rows, cols)) in cfg.tensor_shapes() {
            let tensor = if name.ends_with(".g") {
                Array2::ones((rows, cols))
            } else if is_bias(&name) {
                Array2::zeros((rows, cols))
            } else {
                let fan_in = if name == "embed.token" { cols } else { rows };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let gain = if name == "out.w" { 0.1 } else { 1.0 };
                let mut rng = crate::rng::derive(seed, &format!("init:{name}"), 0, 0);
                Array2::from_shape_fn((rows, cols), |_| {
                    gain * (rng.random::<f64>() * 2.0 - 1.0) * bound
                })
            };
            tensors.insert(name, tensor);
        }
        Ok(DenoiserParams { cfg, tensors })
    }

    /// Assemble from explicit tensors, validating names and shapes against
    /// the config.
    pub fn from_tensors(
        cfg: ModelConfig,
        tensors: BTreeMap<String, Array2<f64>>,
    ) -> Result<DenoiserParams> {
        cfg.validate()?;
        let expected = cfg.tensor_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, (rows, cols)) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dim() != (*rows, *cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected ({rows}, {cols})",
                    t.dim()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor `{name}` is not finite")));
            }
        }
        Ok(DenoiserParams { cfg, tensors })
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors.get_mut(name).expect("known tensor name")
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn is_bias(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    matches!(last, "b" | "b1" | "b2" | "bq" | "bk" | "bv" | "bo")
}

/// Sinusoidal embedding of a scalar position, length `d`.
pub fn sinusoidal_row(pos: f64, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for i in 0..d.div_ceil(2) {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
        v[2 * i] = (pos * freq).sin();
        if 2 * i + 1 < d {
            v[2 * i + 1] = (pos * freq).cos();
        }
    }
    v
}

/// The time positional encoding: sinusoidal embedding of `t` through the
/// learned linear layer. This vector is added to every encoder and decoder
/// layer input.
pub fn time_encoding(params: &DenoiserParams, t: usize) -> Result<Vec<f64>> {
    if t == 0 || t > params.cfg.t_steps {
        return Err(Error::StepOutOfRange {
            t,
            t_max: params.cfg.t_steps,
        });
    }
    let d = params.cfg.d_model;
    let sin = Array2::from_shape_vec((1, d), sinusoidal_row(t as f64, d)).expect("row shape");
    let out = sin.dot(params.get("time.w")) + params.get("time.b");
    Ok(out.row(0).to_vec())
}

/// Lazily binds parameter tensors onto a tape, remembering each node so a
/// tensor used in several places is a single leaf.
struct Binder<'p> {
    params: &'p DenoiserParams,
    bound: BTreeMap<&'p str, VarId>,
    trainable: bool,
}

impl<'p> Binder<'p> {
    fn new(params: &'p DenoiserParams, trainable: bool) -> Binder<'p> {
        Binder {
            params,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    fn get(&mut self, tape: &mut Tape, name: &str) -> VarId {
        if let Some(id) = self.bound.get(name) {
            return *id;
        }
        let (key, value) = self
            .params
            .tensors
            .get_key_value(name)
            .unwrap_or_else(|| panic!("unknown tensor `{name}`"));
        let id = if self.trainable {
            tape.param(value.clone())
        } else {
            tape.constant(value.clone())
        };
        self.bound.insert(key.as_str(), id);
        id
    }
}

fn linear(tape: &mut Tape, binder: &mut Binder, x: VarId, w: &str, b: &str) -> VarId {
    let w = binder.get(tape, w);
    let b = binder.get(tape, b);
    let xw = tape.matmul(x, w);
    tape.add_row_broadcast(xw, b)
}

fn attention(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    queries_from: VarId,
    keys_values_from: VarId,
    mask_bias: Option<&Array2<f64>>,
    cfg: &ModelConfig,
) -> VarId {
    let q = linear(
        tape,
        binder,
        queries_from,
        &format!("{prefix}.wq"),
        &format!("{prefix}.bq"),
    );
    let k = linear(
        tape,
        binder,
        keys_values_from,
        &format!("{prefix}.wk"),
        &format!("{prefix}.bk"),
    );
    let v = linear(
        tape,
        binder,
        keys_values_from,
        &format!("{prefix}.wv"),
        &format!("{prefix}.bv"),
    );

    let d_head = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head);
        let kh = tape.slice_cols(k, h * d_head, d_head);
        let vh = tape.slice_cols(v, h * d_head, d_head);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let mut scores = tape.scale(scores, scale);
        if let Some(bias) = mask_bias {
            scores = tape.add_const(scores, bias.clone());
        }
        let weights = tape.softmax_rows(scores);
        heads.push(tape.matmul(weights, vh));
    }
    let merged = tape.concat_cols(&heads);
    linear(
        tape,
        binder,
        merged,
        &format!("{prefix}.wo"),
        &format!("{prefix}.bo"),
    )
}

fn layer_norm(tape: &mut Tape, binder: &mut Binder, prefix: &str, x: VarId) -> VarId {
    let g = binder.get(tape, &format!("{prefix}.g"));
    let b = binder.get(tape, &format!("{prefix}.b"));
    tape.layer_norm_rows(x, g, b, LN_EPS)
}

fn feed_forward(tape: &mut Tape, binder: &mut Binder, prefix: &str, x: VarId) -> VarId {
    let h = linear(
        tape,
        binder,
        x,
        &format!("{prefix}.w1"),
        &format!("{prefix}.b1"),
    );
    let h = tape.gelu(h);
    linear(
        tape,
        binder,
        h,
        &format!("{prefix}.w2"),
        &format!("{prefix}.b2"),
    )
}

fn check_ids(ids: &[usize], k: usize, what: &str) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= k) {
        return Err(Error::InvalidArg(format!(
            "{what} contains id {bad} >= K={k}"
        )));
    }
    Ok(())
}

/// Default source mask: `[PAD]` positions.
pub fn pad_mask(x_src: &[usize]) -> Vec<bool> {
    x_src.iter().map(|&id| id == PAD_ID).collect()
}

/// Forward graph built on a caller-supplied tape. Returns the `L x K`
/// per-position distribution node plus the name -> node binding of every
/// parameter tensor (for gradient extraction).
pub fn build_forward<'p>(
    tape: &mut Tape,
    params: &'p DenoiserParams,
    y_t: &[usize],
    x_src: &[usize],
    src_mask: &[bool],
    t: usize,
    trainable: bool,
) -> Result<(VarId, BTreeMap<&'p str, VarId>)> {
    let cfg = &params.cfg;
    if y_t.len() != cfg.l || x_src.len() != cfg.l || src_mask.len() != cfg.l {
        return Err(Error::DimMismatch(format!(
            "sequence lengths y_t={} x={} mask={} vs L={}",
            y_t.len(),
            x_src.len(),
            src_mask.len(),
            cfg.l
        )));
    }
    check_ids(y_t, cfg.k, "y_t")?;
    check_ids(x_src, cfg.k, "x")?;
    if t == 0 || t > cfg.t_steps {
        return Err(Error::StepOutOfRange {
            t,
            t_max: cfg.t_steps,
        });
    }

    let l = cfg.l;
    let d = cfg.d_model;
    let mut binder = Binder::new(params, trainable);

    // Sequence positional constant, shared by both streams.
    let pos_rows: Vec<f64> = (0..l).flat_map(|p| sinusoidal_row(p as f64, d)).collect();
    let pos = Array2::from_shape_vec((l, d), pos_rows).expect("pos shape");

    // Source pads are never attended to, by any query.
    let masked_any = src_mask.iter().any(|&m| m);
    let key_bias =
        Array2::from_shape_fn((l, l), |(_, c)| if src_mask[c] { MASK_NEG } else { 0.0 });
    let key_bias = masked_any.then_some(&key_bias);

    // Time vector through the learned projection.
    let t_sin = Array2::from_shape_vec((1, d), sinusoidal_row(t as f64, d)).expect("t shape");
    let t_sin = tape.constant(t_sin);
    let time_w = binder.get(tape, "time.w");
    let time_b = binder.get(tape, "time.b");
    let time_vec = {
        let m = tape.matmul(t_sin, time_w);
        tape.add_row_broadcast(m, time_b)
    };

    // Encoder.
    let embed = binder.get(tape, "embed.token");
    let mut h = tape.embed_rows(embed, x_src);
    h = tape.add_const(h, pos.clone());
    for i in 0..cfg.n_layers {
        h = tape.add_row_broadcast(h, time_vec);
        let normed = layer_norm(tape, &mut binder, &format!("enc.{i}.ln1"), h);
        let attn_out = attention(
            tape,
            &mut binder,
            &format!("enc.{i}.attn"),
            normed,
            normed,
            key_bias,
            cfg,
        );
        h = tape.add(h, attn_out);
        let normed = layer_norm(tape, &mut binder, &format!("enc.{i}.ln2"), h);
        let ffn_out = feed_forward(tape, &mut binder, &format!("enc.{i}.ffn"), normed);
        h = tape.add(h, ffn_out);
    }
    let enc_out = layer_norm(tape, &mut binder, "enc_final_ln", h);

    // Decoder: bidirectional self-attention, no mask on target positions.
    let mut g = tape.embed_rows(embed, y_t);
    g = tape.add_const(g, pos);
    for i in 0..cfg.n_layers {
        g = tape.add_row_broadcast(g, time_vec);
        let normed = layer_norm(tape, &mut binder, &format!("dec.{i}.ln1"), g);
        let self_out = attention(
            tape,
            &mut binder,
            &format!("dec.{i}.self"),
            normed,
            normed,
            None,
            cfg,
        );
        g = tape.add(g, self_out);
        let normed = layer_norm(tape, &mut binder, &format!("dec.{i}.ln2"), g);
        let cross_out = attention(
            tape,
            &mut binder,
            &format!("dec.{i}.cross"),
            normed,
            enc_out,
            key_bias,
            cfg,
        );
        g = tape.add(g, cross_out);
        let normed = layer_norm(tape, &mut binder, &format!("dec.{i}.ln3"), g);
        let ffn_out = feed_forward(tape, &mut binder, &format!("dec.{i}.ffn"), normed);
        g = tape.add(g, ffn_out);
    }
    let g = layer_norm(tape, &mut binder, "final_ln", g);
    let logits = linear(tape, &mut binder, g, "out.w", "out.b");
    let probs = tape.softmax_rows(logits);

    Ok((probs, binder.bound))
}

/// Inference forward pass: per-position `x0_hat` distributions.
pub fn forward_probs(
    params: &DenoiserParams,
    y_t: &[usize],
    x_src: &[usize],
    t: usize,
) -> Result<Vec<Categorical>> {
    forward_probs_with_mask(params, y_t, x_src, &pad_mask(x_src), t)
}

/// Inference forward with an explicit source mask (true = masked).
pub fn forward_probs_with_mask(
    params: &DenoiserParams,
    y_t: &[usize],
    x_src: &[usize],
    src_mask: &[bool],
    t: usize,
) -> Result<Vec<Categorical>> {
    let mut tape = Tape::new();
    let (probs, _) = build_forward(&mut tape, params, y_t, x_src, src_mask, t, false)?;
    let value = tape.value(probs);
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite activations in forward".into()));
    }
    value
        .rows()
        .into_iter()
        .map(|row| Categorical::new(row.to_vec()))
        .collect()
}

/// One training example, already encoded and noised.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub y0: Vec<usize>,
    pub x_src: Vec<usize>,
    pub t: usize,
    pub y_t: Vec<usize>,
}

/// Variational-bound loss node for one example, built on top of the
/// forward graph's `probs`. Mirrors [`diffusion::vb_loss_term`] with the
/// prediction side differentiated.
pub fn vb_loss_on_tape(
    tape: &mut Tape,
    probs: VarId,
    y0: &[usize],
    y_t: &[usize],
    t: usize,
    sched: &NoiseSchedule,
    k: usize,
) -> Result<VarId> {
    let l = y0.len();
    if y_t.len() != l {
        return Err(Error::DimMismatch("y0 / y_t length mismatch".into()));
    }
    if t == 1 {
        let mut weights = Array2::zeros((l, k));
        for (pos, &tok) in y0.iter().enumerate() {
            weights[[pos, tok]] = -1.0;
        }
        let lnp = tape.ln_floor(probs, diffusion::LOG_FLOOR);
        return Ok(tape.sum_weighted(lnp, weights));
    }

    let alpha = sched.alpha(t)?;
    let abar_prev = sched.alpha_bar(t - 1)?;
    // Constant target side: theta_post(y_t, y0).
    let mut target = Array2::zeros((l, k));
    let mut target_entropy = 0.0;
    for pos in 0..l {
        let dist =
            diffusion::posterior_probs(y_t[pos], &Categorical::one_hot(y0[pos], k)?, t, sched)?;
        for (j, p) in dist.probs().iter().enumerate() {
            target[[pos, j]] = *p;
            if *p > 0.0 {
                target_entropy += p * p.ln();
            }
        }
    }
    // Differentiated side: theta_post(y_t, x0_hat) from the tape's probs.
    let uniform_step = (1.0 - alpha) / k as f64;
    let step_factor = Array2::from_shape_fn((l, k), |(pos, j)| {
        if j == y_t[pos] {
            alpha + uniform_step
        } else {
            uniform_step
        }
    });
    let scaled = tape.scale(probs, abar_prev);
    let shifted = tape.add_scalar(scaled, (1.0 - abar_prev) / k as f64);
    let theta = tape.mul_const(shifted, step_factor);
    let predicted = tape.row_normalize(theta);
    let lnq = tape.ln_floor(predicted, diffusion::LOG_FLOOR);
    let cross = tape.sum_weighted(lnq, -target);
    Ok(tape.add_scalar(cross, target_entropy))
}

/// Batch loss value only (used by finite-difference checks).
pub fn batch_loss(
    items: &[TrainItem],
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArg("empty batch".into()));
    }
    let mut total = 0.0;
    for item in items {
        let mut tape = Tape::new();
        let mask = pad_mask(&item.x_src);
        let (probs, _) =
            build_forward(&mut tape, params, &item.y_t, &item.x_src, &mask, item.t, false)?;
        let loss = vb_loss_on_tape(
            &mut tape,
            probs,
            &item.y0,
            &item.y_t,
            item.t,
            sched,
            params.cfg.k,
        )?;
        total += tape.value(loss)[[0, 0]];
    }
    Ok(total / items.len() as f64)
}

/// Mean loss over the batch plus gradients for every parameter tensor.
pub fn loss_and_gradients(
    items: &[TrainItem],
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    if items.is_empty() {
        return Err(Error::InvalidArg("empty batch".into()));
    }
    let scale = 1.0 / items.len() as f64;
    let mut total = 0.0;
    let mut grads: BTreeMap<String, Array2<f64>> = params
        .tensors()
        .map(|(name, t)| (name.clone(), Array2::zeros(t.raw_dim())))
        .collect();
    for item in items {
        let mut tape = Tape::new();
        let mask = pad_mask(&item.x_src);
        let (probs, bound) =
            build_forward(&mut tape, params, &item.y_t, &item.x_src, &mask, item.t, true)?;
        let loss = vb_loss_on_tape(
            &mut tape,
            probs,
            &item.y0,
            &item.y_t,
            item.t,
            sched,
            params.cfg.k,
        )?;
        let value = tape.value(loss)[[0, 0]];
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at t={}", item.t)));
        }
        total += value * scale;
        let g = tape.backward(loss)?;
        for (name, id) in bound {
            let delta = g.get(&tape, id);
            let acc = grads.get_mut(name).expect("bound tensor known");
            acc.scaled_add(scale, &delta);
        }
    }
    Ok((total, grads))
}
