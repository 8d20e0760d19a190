use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::params::{ParamGroup, ParamStore};
use super::{ModelConfig, ModelError};
use crate::corpus::stack_frames;
use crate::rng::{self, StreamRng};
use crate::shrink::{self, ShrinkPlan};
use crate::tensor::nn::{attention_block, causal_mask, linear, sinusoidal_positions, AttentionWeights};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;
/// `<asr>` is fixed at id 0 by the vocabulary layout.
const ASR_ID: usize = 0;

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub ln1: NormIds,
    pub attn: AttnIds,
    pub ln2: NormIds,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub ln1: NormIds,
    pub self_attn: AttnIds,
    pub ln2: NormIds,
    pub cross: AttnIds,
    pub ln3: NormIds,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub input: LinearIds,
    pub pre: Vec<EncoderLayer>,
    pub pre_ln: NormIds,
    pub ctc: LinearIds,
    pub post: Vec<EncoderLayer>,
    pub post_ln: NormIds,
    pub embed: usize,
    pub dec: Vec<DecoderLayer>,
    pub dec_ln: NormIds,
    pub out: LinearIds,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut StreamRng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(self.rng)).collect();
        let w = self.store.push(
            format!("{name}.w"),
            Tensor::matrix(fan_in, fan_out, data).expect("positive dims"),
        );
        let b = self.store.push(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        LinearIds { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        let g = self.store.push(format!("{name}.g"), Tensor::filled(&[1, d], 1.0));
        let b = self.store.push(format!("{name}.b"), Tensor::zeros(&[1, d]));
        NormIds { g, b }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn encoder_layer(&mut self, name: &str, cfg: &ModelConfig) -> EncoderLayer {
        let d = cfg.d_model;
        EncoderLayer {
            ln1: self.norm(&format!("{name}.ln1"), d),
            attn: self.attn(&format!("{name}.attn"), d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, cfg.ffn_dim),
            ff2: self.linear(&format!("{name}.ff2"), cfg.ffn_dim, d),
        }
    }

    fn decoder_layer(&mut self, name: &str, cfg: &ModelConfig) -> DecoderLayer {
        let d = cfg.d_model;
        DecoderLayer {
            ln1: self.norm(&format!("{name}.ln1"), d),
            self_attn: self.attn(&format!("{name}.self"), d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            cross: self.attn(&format!("{name}.cross"), d),
            ln3: self.norm(&format!("{name}.ln3"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, cfg.ffn_dim),
            ff2: self.linear(&format!("{name}.ff2"), cfg.ffn_dim, d),
        }
    }
}

/// Tape variables for every parameter, indexed like the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Train/eval switch for one forward pass. Dropout masks are drawn from the
/// carried stream; evaluation passes are deterministic.
pub struct Forward {
    dropout_rng: Option<StreamRng>,
}

impl Forward {
    pub fn eval() -> Self {
        Self { dropout_rng: None }
    }

    pub fn train(dropout_rng: StreamRng) -> Self {
        Self {
            dropout_rng: Some(dropout_rng),
        }
    }

    pub fn is_train(&self) -> bool {
        self.dropout_rng.is_some()
    }
}

/// Result of the acoustic-semantic phase.
#[derive(Clone, Debug)]
pub struct AsOutput {
    /// `T_x × |V′|` CTC log-posteriors read from the last pre-shrink layer.
    pub ctc_log_probs: Var,
    /// Decoder memory, `L × d_model`.
    pub h_as: Var,
    /// Present when shrinking is enabled.
    pub shrink: Option<ShrinkPlan>,
    /// Frames entering the blocks after down-sampling.
    pub frames: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    pub(crate) layout: Layout,
}

impl Model {
    /// Builds a model with freshly initialized weights drawn from the `init`
    /// stream of `seed`: Xavier-uniform matrices, zero biases, unit norm gains
    /// and `N(0, 1/d_model)` token embeddings.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut r = rng::stream(seed, rng::INIT_STREAM, 0);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut r,
        };
        let d = cfg.d_model;
        let input = b.linear("as.input", cfg.input_dim(), d);
        let pre = (0..cfg.pre_shrink_layers)
            .map(|i| b.encoder_layer(&format!("as.pre{i}"), &cfg))
            .collect();
        let pre_ln = b.norm("as.pre_ln", d);
        let ctc = b.linear("as.ctc", d, cfg.ctc_size());
        let post = (0..cfg.post_shrink_layers)
            .map(|i| b.encoder_layer(&format!("as.post{i}"), &cfg))
            .collect();
        let post_ln = b.norm("as.post_ln", d);
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
        let emb: Vec<f64> = (0..cfg.vocab_size * d).map(|_| normal.sample(b.rng)).collect();
        let embed = b.store.push(
            "tt.embed".into(),
            Tensor::matrix(cfg.vocab_size, d, emb).expect("positive dims"),
        );
        let dec = (0..cfg.decoder_layers)
            .map(|i| b.decoder_layer(&format!("tt.dec{i}"), &cfg))
            .collect();
        let dec_ln = b.norm("tt.dec_ln", d);
        let out = b.linear("tt.out", d, cfg.vocab_size);
        let store = b.store;
        Ok(Self {
            cfg,
            params: store,
            layout: Layout {
                input,
                pre,
                pre_ln,
                ctc,
                post,
                post_ln,
                embed,
                dec,
                dec_ln,
                out,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Toggles shrinking without touching weights.
    pub fn set_shrink(&mut self, on: bool) {
        self.cfg.shrink = on;
    }

    /// Records every weight on `tape`; groups for which `trainable` is false
    /// are recorded as constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = (0..self.params.len())
            .map(|i| tape.leaf(self.params.value(i).clone(), trainable(self.params.group(i))))
            .collect();
        Bound { vars }
    }

    /// Uses caller-owned variables as the weights, e.g. to differentiate
    /// with respect to perturbed copies. Shapes must match the store.
    pub fn bind_vars(&self, tape: &Tape, vars: &[Var]) -> Result<Bound, ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Mismatch(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (i, &v) in vars.iter().enumerate() {
            if tape.value(v).shape() != self.params.value(i).shape() {
                return Err(ModelError::Mismatch(format!("shape of `{}`", self.params.name(i))));
            }
        }
        Ok(Bound { vars: vars.to_vec() })
    }

    fn dropout(&self, tape: &mut Tape, x: Var, fwd: &mut Forward) -> Result<Var, ModelError> {
        let p = self.cfg.dropout;
        let Some(r) = fwd.dropout_rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let shape = tape.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - p);
        let n = tape.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if r.random::<f64>() < p { 0.0 } else { keep }).collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        Ok(tape.mul(x, m)?)
    }

    fn lin(&self, tape: &mut Tape, p: &Bound, x: Var, ids: LinearIds) -> Result<Var, ModelError> {
        Ok(linear(tape, x, p.var(ids.w), p.var(ids.b))?)
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, x: Var, ids: NormIds) -> Result<Var, ModelError> {
        Ok(tape.layer_norm(x, p.var(ids.g), p.var(ids.b), LN_EPS)?)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ids: &AttnIds,
        query: Var,
        memory: Var,
        allowed: Option<&[bool]>,
    ) -> Result<Var, ModelError> {
        let w = AttentionWeights {
            wq: p.var(ids.q.w),
            bq: p.var(ids.q.b),
            wk: p.var(ids.k.w),
            bk: p.var(ids.k.b),
            wv: p.var(ids.v.w),
            bv: p.var(ids.v.b),
            wo: p.var(ids.o.w),
            bo: p.var(ids.o.b),
        };
        Ok(attention_block(tape, &w, query, memory, allowed, self.cfg.heads)?)
    }

    fn feed_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        ff1: LinearIds,
        ff2: LinearIds,
    ) -> Result<Var, ModelError> {
        let h = self.lin(tape, p, x, ff1)?;
        let h = tape.relu(h);
        self.lin(tape, p, h, ff2)
    }

    fn residual(&self, tape: &mut Tape, x: Var, sub: Var, fwd: &mut Forward) -> Result<Var, ModelError> {
        let sub = self.dropout(tape, sub, fwd)?;
        Ok(tape.add(x, sub)?)
    }

    fn encoder_layer(
        &self,
        tape: &mut Tape,
        p: &Bound,
        l: &EncoderLayer,
        x: Var,
        fwd: &mut Forward,
    ) -> Result<Var, ModelError> {
        let a = self.norm(tape, p, x, l.ln1)?;
        let a = self.attention(tape, p, &l.attn, a, a, None)?;
        let x = self.residual(tape, x, a, fwd)?;
        let f = self.norm(tape, p, x, l.ln2)?;
        let f = self.feed_forward(tape, p, f, l.ff1, l.ff2)?;
        self.residual(tape, x, f, fwd)
    }

    /// Stacks right context onto raw frames and keeps frames `0, r, 2r, …`.
    pub fn prepare_input(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        if x.shape().len() != 2 || x.cols() != self.cfg.feature_dim {
            return Err(ModelError::InputWidth {
                got: x.cols(),
                want: self.cfg.feature_dim,
            });
        }
        let stacked = stack_frames(x, self.cfg.right_context);
        let rows: Vec<usize> = (0..stacked.rows()).step_by(self.cfg.downsample_rate).collect();
        if rows.is_empty() {
            return Err(ModelError::EmptyInput { rows: x.rows() });
        }
        let data = rows.iter().flat_map(|&r| stacked.row(r).iter().copied()).collect();
        Ok(Tensor::matrix(rows.len(), stacked.cols(), data)?)
    }

    /// Pre-shrink encoding: `(ĥ_AS, CTC log-posteriors)`.
    fn encode_pre(&self, tape: &mut Tape, p: &Bound, x: &Tensor, fwd: &mut Forward) -> Result<(Var, Var), ModelError> {
        let ds = self.prepare_input(x)?;
        let frames = ds.rows();
        let d = self.cfg.d_model;
        let xin = tape.constant(ds);
        let mut h = self.lin(tape, p, xin, self.layout.input)?;
        let pe = tape.constant(sinusoidal_positions(frames, d));
        h = tape.add(h, pe)?;
        h = self.dropout(tape, h, fwd)?;
        for l in &self.layout.pre {
            h = self.encoder_layer(tape, p, l, h, fwd)?;
        }
        let h_hat = self.norm(tape, p, h, self.layout.pre_ln)?;
        let logits = self.lin(tape, p, h_hat, self.layout.ctc)?;
        Ok((h_hat, tape.log_softmax(logits)))
    }

    /// Only the CTC posteriors, `T_x × |V′|`; the post-shrink blocks are not run.
    pub fn ctc_forward(&self, tape: &mut Tape, p: &Bound, x: &Tensor, fwd: &mut Forward) -> Result<Var, ModelError> {
        Ok(self.encode_pre(tape, p, x, fwd)?.1)
    }

    /// Acoustic-semantic phase over raw features `T_raw × d_feat`.
    pub fn as_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: &Tensor,
        fwd: &mut Forward,
    ) -> Result<AsOutput, ModelError> {
        let (h_hat, ctc_log_probs) = self.encode_pre(tape, p, x, fwd)?;
        let frames = tape.value(ctc_log_probs).rows();
        let (mut h, plan) = if self.cfg.shrink {
            let lp = tape.value(ctc_log_probs).clone();
            let out = shrink::shrink(tape, h_hat, &lp)?;
            (out.h_prime, Some(out.plan))
        } else {
            (h_hat, None)
        };
        for l in &self.layout.post {
            h = self.encoder_layer(tape, p, l, h, fwd)?;
        }
        let h_as = self.norm(tape, p, h, self.layout.post_ln)?;
        Ok(AsOutput {
            ctc_log_probs,
            h_as,
            shrink: plan,
            frames,
        })
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<(), ModelError> {
        if prefix.len() > self.cfg.max_decode_len {
            return Err(ModelError::PrefixTooLong {
                len: prefix.len(),
                max: self.cfg.max_decode_len,
            });
        }
        if prefix.first() != Some(&ASR_ID) {
            return Err(ModelError::BadPrefix);
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(ModelError::Config(format!(
                "token id {bad} outside |V| = {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Teacher-forced decoder pass: logits `len(prefix) × |V|`, row `i`
    /// predicting the token after `prefix[i]`.
    pub fn tt_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: Var,
        prefix: &[usize],
        fwd: &mut Forward,
    ) -> Result<Var, ModelError> {
        self.check_prefix(prefix)?;
        let n = prefix.len();
        let d = self.cfg.d_model;
        let emb = tape.gather_rows(p.var(self.layout.embed), prefix)?;
        let emb = tape.scale(emb, (d as f64).sqrt());
        let pe = tape.constant(sinusoidal_positions(n, d));
        let mut h = tape.add(emb, pe)?;
        h = self.dropout(tape, h, fwd)?;
        let mask = causal_mask(n);
        for l in &self.layout.dec {
            let a = self.norm(tape, p, h, l.ln1)?;
            let a = self.attention(tape, p, &l.self_attn, a, a, Some(&mask))?;
            h = self.residual(tape, h, a, fwd)?;
            let c = self.norm(tape, p, h, l.ln2)?;
            let c = self.attention(tape, p, &l.cross, c, memory, None)?;
            h = self.residual(tape, h, c, fwd)?;
            let f = self.norm(tape, p, h, l.ln3)?;
            let f = self.feed_forward(tape, p, f, l.ff1, l.ff2)?;
            h = self.residual(tape, h, f, fwd)?;
        }
        let h = self.norm(tape, p, h, self.layout.dec_ln)?;
        self.lin(tape, p, h, self.layout.out)
    }

    /// The all-zero stand-in memory used for text-only pretraining, `1 × d_model`.
    pub fn blank_memory(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros(&[1, self.cfg.d_model]))
    }

    /// Decoder pass over a full consecutive sequence with the zero memory.
    /// Returns teacher-forced logits for every input position; the masked
    /// pretraining loss keeps only the rows that predict `y` and `<eos>`.
    pub fn tt_pretrain_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        sequence: &[usize],
        fwd: &mut Forward,
    ) -> Result<Var, ModelError> {
        let memory = self.blank_memory(tape);
        let input = &sequence[..sequence.len().saturating_sub(1)];
        self.tt_forward(tape, p, memory, input, fwd)
    }

    pub(crate) fn value(&self, id: usize) -> &Tensor {
        self.params.value(id)
    }
}
