//! The unified conditioned transformer: one stack serving as encoder and
//! decoder under per-sample attention masks, with the last layers made
//! condition-aware through attention routing (or the parametric-gate
//! ablation variants) and a LM head tied to the token embedding.

mod checkpoint;
mod params;

pub use checkpoint::{Checkpoint, OptimizerState, ParamBlob};
pub use params::{Param, ParamBinder, ParamSet};

use serde::{Deserialize, Serialize};

use crate::data::{AttentionMask, InputEncoding};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Reduction, TensorId};
use crate::{Tape, Tensor};

/// Which mechanism turns the condition into a per-position bias inside the
/// condition-aware blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// Non-parametric two-route attention over (kᶜ/vᶜ) and (kᵍ/0).
    AttentionRouting,
    /// wₜ = σ(g(cₜ)), bias = wₜ·vᶜ.
    SingleGate,
    /// wₜ = σ(g₁(cₜ)), u = σ(g₂(vᶜ)), combined output wₜ·cₜ + u·vᶜ.
    DoubleGates,
}

impl std::str::FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention_routing" | "routing" => Ok(GateVariant::AttentionRouting),
            "single_gate" | "single" => Ok(GateVariant::SingleGate),
            "double_gates" | "double" => Ok(GateVariant::DoubleGates),
            other => Err(Error::Config(format!("unknown gate variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for GateVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GateVariant::AttentionRouting => "attention_routing",
            GateVariant::SingleGate => "single_gate",
            GateVariant::DoubleGates => "double_gates",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Inner feed-forward width; 0 means the 4·hidden default.
    pub ffn_size: usize,
    pub max_length: usize,
    /// How many of the last layers are condition-aware.
    pub num_condition_layers: usize,
    pub num_conditions: usize,
    pub dropout_p: f64,
    pub gate_variant: GateVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            hidden_size: 64,
            num_layers: 2,
            num_heads: 2,
            ffn_size: 0,
            max_length: 80,
            num_condition_layers: 2,
            num_conditions: 0,
            dropout_p: 0.1,
            gate_variant: GateVariant::AttentionRouting,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn ffn_size_effective(&self) -> usize {
        if self.ffn_size == 0 {
            4 * self.hidden_size
        } else {
            self.ffn_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "hidden_size, num_heads and num_layers must be positive".into(),
            ));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} must be divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.num_condition_layers > self.num_layers {
            return Err(Error::Config(format!(
                "num_condition_layers {} exceeds num_layers {}",
                self.num_condition_layers, self.num_layers
            )));
        }
        if self.vocab_size < crate::data::NUM_RESERVED as usize {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than the reserved token set",
                self.vocab_size
            )));
        }
        if self.max_length < 4 {
            return Err(Error::Config("max_length must be at least 4".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// n×2 additive mask blocking the condition route on source-side positions:
/// row i is [0, 0] for target positions, [−∞, 0] for source positions. The
/// generic route is never blocked.
#[derive(Debug, Clone)]
pub struct ConditionBiasMask {
    data: Vec<f64>,
}

impl ConditionBiasMask {
    pub fn from_type_ids(type_ids: &[u8]) -> Self {
        let mut data = Vec::with_capacity(type_ids.len() * 2);
        for &t in type_ids {
            data.push(if t == 1 { 0.0 } else { f64::NEG_INFINITY });
            data.push(0.0);
        }
        ConditionBiasMask { data }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for row in self.data.chunks(2) {
            out.push(if row[0] == 0.0 { '.' } else { '#' });
            out.push(if row[1] == 0.0 { '.' } else { '#' });
            out.push('\n');
        }
        out
    }
}

/// Forward-pass mode: training enables dropout draws from the supplied RNG;
/// evaluation is the identity path.
pub struct RunMode<'r> {
    pub training: bool,
    pub dropout_rng: Option<&'r mut Rng>,
}

impl<'r> RunMode<'r> {
    pub fn eval() -> Self {
        RunMode {
            training: false,
            dropout_rng: None,
        }
    }

    pub fn train(rng: &'r mut Rng) -> Self {
        RunMode {
            training: true,
            dropout_rng: Some(rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_gain: usize,
    ln1_bias: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    ln2_gain: usize,
    ln2_bias: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct CondIdx {
    keys: Option<usize>,
    values: Option<usize>,
    generic_key: Option<usize>,
    gate_c_w: Option<usize>,
    gate_c_b: Option<usize>,
    gate_v_w: Option<usize>,
    gate_v_b: Option<usize>,
}

const LN_EPS: f64 = 1e-12;

pub struct Model {
    cfg: ModelConfig,
    params: ParamSet,
    tok_emb: usize,
    pos_emb: usize,
    type_emb: usize,
    lm_bias: usize,
    layers: Vec<LayerIdx>,
    cond: CondIdx,
}

impl Model {
    /// Fresh model with BERT-style initialization: truncated normal
    /// (σ = 0.02) for matrices and embeddings (including kᶜ, vᶜ, kᵍ), zeros
    /// for biases, ones for LayerNorm gains.
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let dh = cfg.hidden_size;
        let ffn = cfg.ffn_size_effective();
        let mut params = ParamSet::new();

        let weight = |params: &mut ParamSet, name: String, shape: Vec<usize>, rng: &mut Rng| {
            let t = Tensor::from_fn(shape, |_| rng.truncated_normal(0.02));
            params.add(name, t, true)
        };
        let bias = |params: &mut ParamSet, name: String, len: usize| {
            params.add(name, Tensor::zeros(vec![len]), false)
        };

        let tok_emb = weight(
            &mut params,
            "embedding.token".into(),
            vec![cfg.vocab_size, dh],
            rng,
        );
        let pos_emb = weight(
            &mut params,
            "embedding.position".into(),
            vec![cfg.max_length, dh],
            rng,
        );
        let type_emb = weight(&mut params, "embedding.type".into(), vec![2, dh], rng);

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let l = LayerIdx {
                wq: weight(
                    &mut params,
                    format!("layer.{i}.attn.q.weight"),
                    vec![dh, dh],
                    rng,
                ),
                bq: bias(&mut params, format!("layer.{i}.attn.q.bias"), dh),
                wk: weight(
                    &mut params,
                    format!("layer.{i}.attn.k.weight"),
                    vec![dh, dh],
                    rng,
                ),
                bk: bias(&mut params, format!("layer.{i}.attn.k.bias"), dh),
                wv: weight(
                    &mut params,
                    format!("layer.{i}.attn.v.weight"),
                    vec![dh, dh],
                    rng,
                ),
                bv: bias(&mut params, format!("layer.{i}.attn.v.bias"), dh),
                wo: weight(
                    &mut params,
                    format!("layer.{i}.attn.out.weight"),
                    vec![dh, dh],
                    rng,
                ),
                bo: bias(&mut params, format!("layer.{i}.attn.out.bias"), dh),
                ln1_gain: params.add(
                    format!("layer.{i}.ln1.gain"),
                    Tensor::full(vec![dh], 1.0),
                    false,
                ),
                ln1_bias: bias(&mut params, format!("layer.{i}.ln1.bias"), dh),
                ffn_w1: weight(
                    &mut params,
                    format!("layer.{i}.ffn.in.weight"),
                    vec![dh, ffn],
                    rng,
                ),
                ffn_b1: bias(&mut params, format!("layer.{i}.ffn.in.bias"), ffn),
                ffn_w2: weight(
                    &mut params,
                    format!("layer.{i}.ffn.out.weight"),
                    vec![ffn, dh],
                    rng,
                ),
                ffn_b2: bias(&mut params, format!("layer.{i}.ffn.out.bias"), dh),
                ln2_gain: params.add(
                    format!("layer.{i}.ln2.gain"),
                    Tensor::full(vec![dh], 1.0),
                    false,
                ),
                ln2_bias: bias(&mut params, format!("layer.{i}.ln2.bias"), dh),
            };
            layers.push(l);
        }

        let lm_bias = bias(&mut params, "lm_head.bias".into(), cfg.vocab_size);

        let mut cond = CondIdx::default();
        if cfg.num_conditions > 0 {
            cond.keys = Some(weight(
                &mut params,
                "condition.keys".into(),
                vec![cfg.num_conditions, dh],
                rng,
            ));
            cond.values = Some(weight(
                &mut params,
                "condition.values".into(),
                vec![cfg.num_conditions, dh],
                rng,
            ));
            cond.generic_key = Some(weight(
                &mut params,
                "condition.generic_key".into(),
                vec![1, dh],
                rng,
            ));
            match cfg.gate_variant {
                GateVariant::AttentionRouting => {}
                GateVariant::SingleGate => {
                    cond.gate_c_w = Some(weight(
                        &mut params,
                        "gate.c.weight".into(),
                        vec![dh, 1],
                        rng,
                    ));
                    cond.gate_c_b = Some(bias(&mut params, "gate.c.bias".into(), 1));
                }
                GateVariant::DoubleGates => {
                    cond.gate_c_w = Some(weight(
                        &mut params,
                        "gate.c.weight".into(),
                        vec![dh, 1],
                        rng,
                    ));
                    cond.gate_c_b = Some(bias(&mut params, "gate.c.bias".into(), 1));
                    cond.gate_v_w = Some(weight(
                        &mut params,
                        "gate.v.weight".into(),
                        vec![dh, 1],
                        rng,
                    ));
                    cond.gate_v_b = Some(bias(&mut params, "gate.v.bias".into(), 1));
                }
            }
        }

        Ok(Model {
            cfg,
            params,
            tok_emb,
            pos_emb,
            type_emb,
            lm_bias,
            layers,
            cond,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Trainable parameters of the routing table: kᶜ/vᶜ per condition plus
    /// the shared generic key — (2C+1)·d_h. The generic value is the constant
    /// zero vector and is not counted because it is not a parameter.
    pub fn condition_parameter_count(&self) -> usize {
        [self.cond.keys, self.cond.values, self.cond.generic_key]
            .iter()
            .flatten()
            .map(|&i| self.params.get(i).tensor.numel())
            .sum()
    }

    /// Extra parameters of the gate ablation variants, on top of the table.
    pub fn gate_parameter_count(&self) -> usize {
        [
            self.cond.gate_c_w,
            self.cond.gate_c_b,
            self.cond.gate_v_w,
            self.cond.gate_v_b,
        ]
        .iter()
        .flatten()
        .map(|&i| self.params.get(i).tensor.numel())
        .sum()
    }

    fn dropout(&self, tape: &mut Tape, x: TensorId, mode: &mut RunMode<'_>) -> Result<TensorId> {
        if !mode.training || self.cfg.dropout_p == 0.0 {
            return Ok(x);
        }
        let rng = mode
            .dropout_rng
            .as_mut()
            .ok_or_else(|| Error::Usage("training mode requires a dropout rng".into()))?;
        tape.dropout(x, self.cfg.dropout_p, rng)
    }

    /// H⁰: sum of token, position and type embeddings per position.
    fn embed(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        enc: &InputEncoding,
    ) -> Result<TensorId> {
        let tok_table = binder.bind(tape, &self.params, self.tok_emb);
        let pos_table = binder.bind(tape, &self.params, self.pos_emb);
        let type_table = binder.bind(tape, &self.params, self.type_emb);
        let tok_ix: Vec<usize> = enc.token_ids.iter().map(|&t| t as usize).collect();
        let type_ix: Vec<usize> = enc.type_ids.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(tok_table, &tok_ix)?;
        let pos = tape.gather_rows(pos_table, &enc.position_ids)?;
        let typ = tape.gather_rows(type_table, &type_ix)?;
        let sum = tape.add(tok, pos)?;
        tape.add(sum, typ)
    }

    /// Masked multi-head attention including the output projection.
    fn attention(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        h: TensorId,
        mask_id: TensorId,
        layer: &LayerIdx,
    ) -> Result<TensorId> {
        let dk = self.cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();

        let wq = binder.bind(tape, &self.params, layer.wq);
        let bq = binder.bind(tape, &self.params, layer.bq);
        let wk = binder.bind(tape, &self.params, layer.wk);
        let bk = binder.bind(tape, &self.params, layer.bk);
        let wv = binder.bind(tape, &self.params, layer.wv);
        let bv = binder.bind(tape, &self.params, layer.bv);

        let q0 = tape.matmul(h, wq)?;
        let q = tape.add_row_broadcast(q0, bq)?;
        let k0 = tape.matmul(h, wk)?;
        let k = tape.add_row_broadcast(k0, bk)?;
        let v0 = tape.matmul(h, wv)?;
        let v = tape.add_row_broadcast(v0, bv)?;

        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for j in 0..self.cfg.num_heads {
            let qj = tape.slice_cols(q, j * dk, dk)?;
            let kj = tape.slice_cols(k, j * dk, dk)?;
            let vj = tape.slice_cols(v, j * dk, dk)?;
            let scores0 = tape.matmul_transpose_b(qj, kj)?;
            let scores = tape.scale(scores0, scale)?;
            let masked = tape.add(scores, mask_id)?;
            let probs = tape.softmax_lastdim(masked)?;
            heads.push(tape.matmul(probs, vj)?);
        }
        let c = tape.concat_cols(&heads)?;
        let wo = binder.bind(tape, &self.params, layer.wo);
        let bo = binder.bind(tape, &self.params, layer.bo);
        let proj = tape.matmul(c, wo)?;
        tape.add_row_broadcast(proj, bo)
    }

    fn layer_norm(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        x: TensorId,
        gain: usize,
        bias: usize,
    ) -> Result<TensorId> {
        let g = binder.bind(tape, &self.params, gain);
        let b = binder.bind(tape, &self.params, bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Attention routing: per-position softmax over the
    /// condition route (kᶜ → vᶜ) and the generic route (kᵍ → 0), with the
    /// condition route blocked on source positions. Returns B ∈ ℝ^{n×d_h}.
    fn routing_bias(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        c: TensorId,
        condition: u32,
        mb: &ConditionBiasMask,
    ) -> Result<TensorId> {
        let dh = self.cfg.hidden_size;
        let n = tape.shape(c)[0];
        let keys = binder.bind(tape, &self.params, self.cond.keys.unwrap());
        let values = binder.bind(tape, &self.params, self.cond.values.unwrap());
        let kg = binder.bind(tape, &self.params, self.cond.generic_key.unwrap());
        let kc = tape.gather_rows(keys, &[condition as usize])?;
        let vc = tape.gather_rows(values, &[condition as usize])?;
        let kb = tape.concat_rows(&[kc, kg])?;
        // The generic value vᵍ is identically zero and never a parameter.
        let zero_row = tape.constant_from(vec![1, dh], vec![0.0; dh])?;
        let vb = tape.concat_rows(&[vc, zero_row])?;

        let logits0 = tape.matmul_transpose_b(c, kb)?;
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let logits = tape.scale(logits0, scale)?;
        let mb_id = tape.constant_from(vec![n, 2], mb.data().to_vec())?;
        let masked = tape.add(logits, mb_id)?;
        let weights = tape.softmax_lastdim(masked)?;
        tape.matmul(weights, vb)
    }

    /// Target-side indicator column (1 at target positions, 0 at source);
    /// the parametric gates use it to keep source rows bias-free.
    fn target_indicator(tape: &mut Tape, enc_types: &[u8]) -> Result<TensorId> {
        let col: Vec<f64> = enc_types.iter().map(|&t| f64::from(t == 1)).collect();
        tape.constant_from(vec![enc_types.len(), 1], col)
    }

    /// Combine the attention output with the condition per the configured
    /// variant. `c` is the (dropout-adjusted) attention output.
    fn condition_combine(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        c: TensorId,
        condition: Option<u32>,
        type_ids: &[u8],
    ) -> Result<TensorId> {
        let condition = match condition {
            // Unconditioned forward: zero bias, identical to the plain block.
            None => return Ok(c),
            Some(id) => {
                if id as usize >= self.cfg.num_conditions {
                    return Err(Error::Config(format!(
                        "condition id {id} out of range (model has {})",
                        self.cfg.num_conditions
                    )));
                }
                id
            }
        };
        match self.cfg.gate_variant {
            GateVariant::AttentionRouting => {
                let mb = ConditionBiasMask::from_type_ids(type_ids);
                let b = self.routing_bias(tape, binder, c, condition, &mb)?;
                tape.add(c, b)
            }
            GateVariant::SingleGate => {
                let values = binder.bind(tape, &self.params, self.cond.values.unwrap());
                let vc = tape.gather_rows(values, &[condition as usize])?;
                let gw = binder.bind(tape, &self.params, self.cond.gate_c_w.unwrap());
                let gb = binder.bind(tape, &self.params, self.cond.gate_c_b.unwrap());
                let lin0 = tape.matmul(c, gw)?;
                let lin = tape.add_row_broadcast(lin0, gb)?;
                let w = tape.sigmoid(lin)?;
                let s = Self::target_indicator(tape, type_ids)?;
                let w_eff = tape.mul_elem(w, s)?;
                let b = tape.matmul(w_eff, vc)?;
                tape.add(c, b)
            }
            GateVariant::DoubleGates => {
                let values = binder.bind(tape, &self.params, self.cond.values.unwrap());
                let vc = tape.gather_rows(values, &[condition as usize])?;
                let g1w = binder.bind(tape, &self.params, self.cond.gate_c_w.unwrap());
                let g1b = binder.bind(tape, &self.params, self.cond.gate_c_b.unwrap());
                let g2w = binder.bind(tape, &self.params, self.cond.gate_v_w.unwrap());
                let g2b = binder.bind(tape, &self.params, self.cond.gate_v_b.unwrap());

                let w_lin0 = tape.matmul(c, g1w)?;
                let w_lin = tape.add_row_broadcast(w_lin0, g1b)?;
                let w = tape.sigmoid(w_lin)?; // [n,1]
                let u_lin0 = tape.matmul(vc, g2w)?;
                let u_lin = tape.add_row_broadcast(u_lin0, g2b)?;
                let u = tape.sigmoid(u_lin)?; // [1,1]

                let n = type_ids.len();
                let s = Self::target_indicator(tape, type_ids)?;
                let inv: Vec<f64> = type_ids.iter().map(|&t| f64::from(t != 1)).collect();
                let one_minus_s = tape.constant_from(vec![n, 1], inv)?;
                // Source rows combine as the identity: w_eff = 1, u_eff = 0.
                let w_masked = tape.mul_elem(w, s)?;
                let w_eff = tape.add(w_masked, one_minus_s)?;
                let term1 = tape.mul_col_broadcast(c, w_eff)?;
                let u_col = tape.matmul(s, u)?; // [n,1], zero on source rows
                let term2 = tape.matmul(u_col, vc)?;
                tape.add(term1, term2)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    /// One transformer block (post-norm residual arrangement, GELU FFN).
    /// Condition-aware blocks insert the condition combine between the
    /// attention output and the first residual+LayerNorm; dropout is applied
    /// to the attention output before the combine, so the bias itself is
    /// never dropped.
    fn block(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        h: TensorId,
        mask_id: TensorId,
        layer_index: usize,
        condition: Option<u32>,
        type_ids: &[u8],
        mode: &mut RunMode<'_>,
    ) -> Result<TensorId> {
        let layer = self.layers[layer_index];
        let condition_aware = layer_index >= self.cfg.num_layers - self.cfg.num_condition_layers;

        let attn = self.attention(tape, binder, h, mask_id, &layer)?;
        let attn_d = self.dropout(tape, attn, mode)?;
        let combined = if condition_aware {
            self.condition_combine(tape, binder, attn_d, condition, type_ids)?
        } else {
            attn_d
        };
        let res1 = tape.add(h, combined)?;
        let x = self.layer_norm(tape, binder, res1, layer.ln1_gain, layer.ln1_bias)?;

        let w1 = binder.bind(tape, &self.params, layer.ffn_w1);
        let b1 = binder.bind(tape, &self.params, layer.ffn_b1);
        let w2 = binder.bind(tape, &self.params, layer.ffn_w2);
        let b2 = binder.bind(tape, &self.params, layer.ffn_b2);
        let f0 = tape.matmul(x, w1)?;
        let f1 = tape.add_row_broadcast(f0, b1)?;
        let f2 = tape.gelu(f1)?;
        let f3 = tape.matmul(f2, w2)?;
        let f4 = tape.add_row_broadcast(f3, b2)?;
        let f5 = self.dropout(tape, f4, mode)?;
        let res2 = tape.add(x, f5)?;
        self.layer_norm(tape, binder, res2, layer.ln2_gain, layer.ln2_bias)
    }

    /// Full forward pass: embeddings → plain blocks → condition-aware blocks
    /// → LM head (tied to the token embedding plus an output bias). Returns
    /// the `[n, vocab]` logits node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        enc: &InputEncoding,
        mode: &mut RunMode<'_>,
    ) -> Result<TensorId> {
        let n = enc.len();
        if n > self.cfg.max_length {
            return Err(Error::Data(format!(
                "sequence length {n} exceeds max_length {}",
                self.cfg.max_length
            )));
        }
        if let Some(c) = enc.condition_id {
            if c as usize >= self.cfg.num_conditions {
                return Err(Error::Config(format!(
                    "condition id {c} out of range (model has {})",
                    self.cfg.num_conditions
                )));
            }
        }

        let h0 = self.embed(tape, binder, enc)?;
        let mut h = self.dropout(tape, h0, mode)?;
        let mask_id = tape.constant_from(vec![n, n], enc.mask.data().to_vec())?;
        for i in 0..self.cfg.num_layers {
            h = self.block(
                tape,
                binder,
                h,
                mask_id,
                i,
                enc.condition_id,
                &enc.type_ids,
                mode,
            )?;
        }
        let tok_table = binder.bind(tape, &self.params, self.tok_emb);
        let logits0 = tape.matmul_transpose_b(h, tok_table)?;
        let lm_bias = binder.bind(tape, &self.params, self.lm_bias);
        tape.add_row_broadcast(logits0, lm_bias)
    }

    /// Evaluation-mode forward on a scratch tape; returns the logits matrix.
    pub fn forward_logits_eval(&self, enc: &InputEncoding) -> Result<(Vec<f64>, usize)> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.params);
        let logits = self.forward(&mut tape, &mut binder, enc, &mut RunMode::eval())?;
        Ok((tape.value(logits).to_vec(), self.cfg.vocab_size))
    }

    /// Masked-LM loss for one already-masked sample on the given tape.
    /// Returns (loss node, active position count).
    pub fn mlm_loss(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        sample: &crate::data::MaskedSample,
        smoothing: f64,
        reduction: Reduction,
        mode: &mut RunMode<'_>,
    ) -> Result<(TensorId, usize)> {
        let logits = self.forward(tape, binder, &sample.enc, mode)?;
        let active_count = sample.active.iter().filter(|&&a| a).count();
        let loss = tape.cross_entropy_masked(
            logits,
            &sample.targets,
            &sample.active,
            smoothing,
            reduction,
        )?;
        Ok((loss, active_count))
    }

    /// Run the routing computation alone (evaluation mode) and return the
    /// bias matrix B for the given query matrix. None yields all zeros.
    pub fn attention_routing_bias(
        &self,
        queries: &Tensor,
        condition: Option<u32>,
        type_ids: &[u8],
    ) -> Result<Tensor> {
        let n = queries.shape()[0];
        let dh = self.cfg.hidden_size;
        let condition = match condition {
            None => return Ok(Tensor::zeros(vec![n, dh])),
            Some(c) => c,
        };
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.params);
        let c = tape.constant(queries);
        let mb = ConditionBiasMask::from_type_ids(type_ids);
        let b = self.routing_bias(&mut tape, &mut binder, c, condition, &mb)?;
        Tensor::new(vec![n, dh], tape.value(b).to_vec())
    }

    /// Run the block-level condition combine alone (evaluation mode): the
    /// variant-dispatched C′ for a given attention output C.
    pub fn condition_combined_output(
        &self,
        attn_out: &Tensor,
        condition: Option<u32>,
        type_ids: &[u8],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.params);
        let c = tape.constant(attn_out);
        let out = self.condition_combine(&mut tape, &mut binder, c, condition, type_ids)?;
        Tensor::new(tape.shape(out).to_vec(), tape.value(out).to_vec())
    }

    /// Evaluation-mode multi-head attention of one layer on a given input
    /// (testing hook mirroring the block's attention sublayer).
    pub fn multi_head_attention(
        &self,
        h: &Tensor,
        mask: &AttentionMask,
        layer_index: usize,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&self.params);
        let h_id = tape.constant(h);
        let mask_id = tape.constant_from(vec![mask.n(), mask.n()], mask.data().to_vec())?;
        let layer = self.layers[layer_index];
        let out = self.attention(&mut tape, &mut binder, h_id, mask_id, &layer)?;
        Tensor::new(tape.shape(out).to_vec(), tape.value(out).to_vec())
    }
}

#[cfg(test)]
mod tests;
