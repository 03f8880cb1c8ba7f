//! Pre-norm encoder-decoder transformer over fused hourly inputs.
//!
//! The encoder reads the fused clinical and previous-CXR rows with causal
//! self-attention. The decoder reads the embedding track shifted right by one
//! hour, attends causally to itself and to encoder rows at or before its own
//! hour, and projects each row to an embedding. Sequences in a batch are
//! packed row-wise and kept apart by attention segments.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnSegment, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::trajectory::EMBED_DIM;

pub const FUSED_DIM: usize = crate::clinical::DEFAULT_FEATURE_DIM + EMBED_DIM;
const LN_EPS: f64 = 1e-5;
const OUTPUT_INIT_SCALE: f64 = 0.01;

/// What the decoder reads at each hour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// The previous-CXR track, known at every hour; training and inference
    /// see the same inputs.
    #[default]
    Previous,
    /// The target track shifted right by one hour during training and the
    /// model's own outputs at inference.
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub ff_dim: usize,
    pub dropout_rate: f64,
    pub input_dim: usize,
    pub output_dim: usize,
    pub max_sequence_hours: usize,
    #[serde(default)]
    pub decoder_input: DecoderInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            ff_dim: 256,
            dropout_rate: 0.1,
            input_dim: FUSED_DIM,
            output_dim: EMBED_DIM,
            max_sequence_hours: 512,
            decoder_input: DecoderInput::default(),
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            out.push(format!(
                "model.d_model ({}) must be a positive multiple of model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.ff_dim == 0 {
            out.push("model.ff_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            out.push(format!("model.dropout_rate ({}) must lie in [0, 1)", self.dropout_rate));
        }
        if self.input_dim != FUSED_DIM {
            out.push(format!("model.input_dim must be {FUSED_DIM}, got {}", self.input_dim));
        }
        if self.output_dim != EMBED_DIM {
            out.push(format!("model.output_dim must be {EMBED_DIM}, got {}", self.output_dim));
        }
        if self.max_sequence_hours == 0 {
            out.push("model.max_sequence_hours must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.d_model, self.ff_dim);
        let mut out = Vec::new();
        let linear = |out: &mut Vec<(String, Vec<usize>)>, name: &str, i: usize, o: usize| {
            out.push((format!("{name}.weight"), vec![i, o]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        let norm = |out: &mut Vec<(String, Vec<usize>)>, name: &str| {
            out.push((format!("{name}.weight"), vec![d]));
            out.push((format!("{name}.bias"), vec![d]));
        };
        linear(&mut out, "in_proj", self.input_dim, d);
        linear(&mut out, "dec_in_proj", self.output_dim, d);
        for l in 0..self.n_encoder_layers {
            let p = format!("encoder.{l}");
            norm(&mut out, &format!("{p}.norm1"));
            for w in ["q", "k", "v", "o"] {
                linear(&mut out, &format!("{p}.self_attn.{w}"), d, d);
            }
            norm(&mut out, &format!("{p}.norm2"));
            linear(&mut out, &format!("{p}.ff.0"), d, ff);
            linear(&mut out, &format!("{p}.ff.1"), ff, d);
        }
        norm(&mut out, "encoder.norm");
        for l in 0..self.n_decoder_layers {
            let p = format!("decoder.{l}");
            norm(&mut out, &format!("{p}.norm1"));
            for w in ["q", "k", "v", "o"] {
                linear(&mut out, &format!("{p}.self_attn.{w}"), d, d);
            }
            norm(&mut out, &format!("{p}.norm2"));
            for w in ["q", "k", "v", "o"] {
                linear(&mut out, &format!("{p}.cross_attn.{w}"), d, d);
            }
            norm(&mut out, &format!("{p}.norm3"));
            linear(&mut out, &format!("{p}.ff.0"), d, ff);
            linear(&mut out, &format!("{p}.ff.1"), ff, d);
        }
        norm(&mut out, "decoder.norm");
        linear(&mut out, "out_proj", d, self.output_dim);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Fixed sinusoidal encoding of the hour index, `[len, d]`.
pub fn positional_encoding<F: Real>(len: usize, d: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf(-((i - i % 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            out.push(F::of(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    out
}

/// Decoder input rows: `prime` at hour 0, then `track[t - 1]` at hour `t`.
pub fn shift_right<F: Real>(prime: &[F], track: &[F], dim: usize) -> Vec<F> {
    let len = track.len() / dim;
    let mut out = Vec::with_capacity(track.len());
    out.extend_from_slice(prime);
    if len > 1 {
        out.extend_from_slice(&track[..(len - 1) * dim]);
    }
    out
}

/// One sequence of a packed batch.
#[derive(Clone, Copy, Debug)]
pub struct SeqRef<'a, F> {
    /// Fused rows, `[len, input_dim]`.
    pub inputs: &'a [F],
    /// Decoder rows after the right shift, `[len, output_dim]`.
    pub decoder_inputs: &'a [F],
}

/// Graph handles produced by [`Model::build`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Predicted embeddings for every packed row, `[rows, output_dim]`.
    pub output: Var,
    /// Parameter leaves in layout order.
    pub params: Vec<Var>,
    /// Row offset of each sequence.
    pub offsets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Vec<Arc<Tensor<F>>>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        self.pos += 1;
        self.vars[self.pos - 1]
    }

    fn pair(&mut self) -> (Var, Var) {
        (self.next(), self.next())
    }
}

fn in_layer<T>(r: Result<T>, layer: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{layer}: {op}"),
        },
        other => other,
    })
}

struct Block<'g, F, R: ?Sized> {
    g: &'g mut Graph<F>,
    rng: &'g mut R,
    heads: usize,
    rate: f64,
    train: bool,
}

impl<F: Real, R: Rng + ?Sized> Block<'_, F, R> {
    fn norm(&mut self, x: Var, c: &mut Cursor) -> Result<Var> {
        let (w, b) = c.pair();
        self.g.layer_norm(x, Some(w), Some(b), LN_EPS)
    }

    fn linear(&mut self, x: Var, c: &mut Cursor) -> Result<Var> {
        let (w, b) = c.pair();
        self.g.linear(x, w, Some(b))
    }

    fn attention(&mut self, xq: Var, xkv: Var, segs: &Arc<[AttnSegment]>, c: &mut Cursor) -> Result<Var> {
        let q = self.linear(xq, c)?;
        let k = self.linear(xkv, c)?;
        let v = self.linear(xkv, c)?;
        let a = self.g.attention(q, k, v, self.heads, true, segs.clone())?;
        self.linear(a, c)
    }

    fn feed_forward(&mut self, x: Var, c: &mut Cursor) -> Result<Var> {
        let h = self.linear(x, c)?;
        let h = self.g.gelu(h)?;
        self.linear(h, c)
    }

    fn residual(&mut self, x: Var, sub: Var) -> Result<Var> {
        let sub = self.g.dropout(sub, self.rate, self.rng, self.train)?;
        self.g.add(x, sub)
    }

    fn encoder_layer(&mut self, h: Var, segs: &Arc<[AttnSegment]>, c: &mut Cursor) -> Result<Var> {
        let a = self.norm(h, c)?;
        let a = self.attention(a, a, segs, c)?;
        let h = self.residual(h, a)?;
        let f = self.norm(h, c)?;
        let f = self.feed_forward(f, c)?;
        self.residual(h, f)
    }

    fn decoder_layer(&mut self, t: Var, memory: Var, segs: &Arc<[AttnSegment]>, c: &mut Cursor) -> Result<Var> {
        let a = self.norm(t, c)?;
        let a = self.attention(a, a, segs, c)?;
        let t = self.residual(t, a)?;
        let x = self.norm(t, c)?;
        let x = self.attention(x, memory, segs, c)?;
        let t = self.residual(t, x)?;
        let f = self.norm(t, c)?;
        let f = self.feed_forward(f, c)?;
        self.residual(t, f)
    }
}

/// Per-layer handles for incremental decoding.
struct DecoderStep {
    norm1: (Var, Var),
    self_attn: [(Var, Var); 4],
    norm2: (Var, Var),
    cross_q: (Var, Var),
    memory_k: Var,
    memory_v: Var,
    cross_o: (Var, Var),
    norm3: (Var, Var),
    ff: [(Var, Var); 2],
}

impl DecoderStep {
    /// One decoder row at hour `step`, extending the self-attention caches.
    #[allow(clippy::too_many_arguments)]
    fn run<F: Real>(
        &self,
        g: &mut Graph<F>,
        t: Var,
        step: usize,
        memory_len: usize,
        heads: usize,
        cache_k: &mut Vec<F>,
        cache_v: &mut Vec<F>,
    ) -> Result<Var> {
        let d = g.shape(t)[1];
        let self_seg: Arc<[AttnSegment]> = vec![AttnSegment {
            q_start: 0,
            q_len: 1,
            k_start: 0,
            k_len: step + 1,
            q_offset: step,
        }]
        .into();
        let cross_seg: Arc<[AttnSegment]> = vec![AttnSegment {
            q_start: 0,
            q_len: 1,
            k_start: 0,
            k_len: memory_len,
            q_offset: step,
        }]
        .into();
        let lin = |g: &mut Graph<F>, x: Var, p: (Var, Var)| g.linear(x, p.0, Some(p.1));
        let a = g.layer_norm(t, Some(self.norm1.0), Some(self.norm1.1), LN_EPS)?;
        let q = lin(g, a, self.self_attn[0])?;
        let k = lin(g, a, self.self_attn[1])?;
        let v = lin(g, a, self.self_attn[2])?;
        cache_k.extend_from_slice(g.value(k).data());
        cache_v.extend_from_slice(g.value(v).data());
        let kc = g.constant(Tensor::new([step + 1, d], cache_k.clone())?);
        let vc = g.constant(Tensor::new([step + 1, d], cache_v.clone())?);
        let a = g.attention(q, kc, vc, heads, true, self_seg)?;
        let a = lin(g, a, self.self_attn[3])?;
        let t = g.add(t, a)?;
        let x = g.layer_norm(t, Some(self.norm2.0), Some(self.norm2.1), LN_EPS)?;
        let q = lin(g, x, self.cross_q)?;
        let x = g.attention(q, self.memory_k, self.memory_v, heads, true, cross_seg)?;
        let x = lin(g, x, self.cross_o)?;
        let t = g.add(t, x)?;
        let f = g.layer_norm(t, Some(self.norm3.0), Some(self.norm3.1), LN_EPS)?;
        let f = lin(g, f, self.ff[0])?;
        let f = g.gelu(f)?;
        let f = lin(g, f, self.ff[1])?;
        g.add(t, f)
    }
}

impl<F: Real> Model<F> {
    /// Fan-in scaled uniform weights, unit norms, zero biases; the output
    /// projection starts near zero.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<F> = if name.contains("norm") && name.ends_with(".weight") {
                    vec![F::one(); n]
                } else if name.ends_with(".bias") {
                    vec![F::zero(); n]
                } else {
                    let mut bound = 1.0 / (shape[0] as f64).sqrt();
                    if name == "out_proj.weight" {
                        bound *= OUTPUT_INIT_SCALE;
                    }
                    (0..n).map(|_| F::of(rng.random_range(-bound..bound))).collect()
                };
                Arc::new(Tensor::new(shape, data).expect("layout shape"))
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Schema(format!(
                "model expects {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Schema(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::non_finite(format!("checkpoint tensor {name}")));
            }
        }
        Ok(Model {
            config,
            params: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Arc::new(p.cast())).collect(),
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Usage("sequence must cover at least one hour".into()));
        }
        if len > self.config.max_sequence_hours {
            return Err(Error::Capacity {
                hours: len,
                max: self.config.max_sequence_hours,
            });
        }
        Ok(())
    }

    /// Record the batched forward pass on `g`.
    pub fn build<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        batch: &[SeqRef<'_, F>],
        rng: &mut R,
        train: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (din, dout, d) = (cfg.input_dim, cfg.output_dim, cfg.d_model);
        let mut offsets = Vec::with_capacity(batch.len());
        let mut segs = Vec::with_capacity(batch.len());
        let mut rows = 0;
        for s in batch {
            let len = s.inputs.len() / din;
            if s.inputs.len() != len * din || s.decoder_inputs.len() != len * dout {
                return Err(Error::Dimension {
                    op: "model_forward",
                    lhs: vec![s.inputs.len(), din],
                    rhs: vec![s.decoder_inputs.len(), dout],
                });
            }
            self.check_len(len)?;
            offsets.push(rows);
            segs.push(AttnSegment::square(rows, len));
            rows += len;
        }
        let segs: Arc<[AttnSegment]> = segs.into();
        let max_len = segs.iter().map(|s| s.q_len).max().unwrap_or(0);
        let pe_table: Vec<F> = positional_encoding(max_len, d);
        let mut pe = Vec::with_capacity(rows * d);
        for s in segs.iter() {
            pe.extend_from_slice(&pe_table[..s.q_len * d]);
        }
        let pe = g.constant(Tensor::new([rows, d], pe)?);
        let x = g.constant(Tensor::new(
            [rows, din],
            batch.iter().flat_map(|s| s.inputs.iter().copied()).collect(),
        )?);
        let y = g.constant(Tensor::new(
            [rows, dout],
            batch.iter().flat_map(|s| s.decoder_inputs.iter().copied()).collect(),
        )?);
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let mut c = Cursor { vars: &params, pos: 0 };
        let mut b = Block {
            g,
            rng,
            heads: cfg.n_heads,
            rate: cfg.dropout_rate,
            train,
        };

        let (w, bias) = c.pair();
        let h = b.g.linear(x, w, Some(bias))?;
        let h = b.g.add(h, pe)?;
        let mut h = b.g.dropout(h, b.rate, b.rng, train)?;
        let (w, bias) = c.pair();
        let t = b.g.linear(y, w, Some(bias))?;
        let t = b.g.add(t, pe)?;
        let mut t = b.g.dropout(t, b.rate, b.rng, train)?;

        for l in 0..cfg.n_encoder_layers {
            h = in_layer(b.encoder_layer(h, &segs, &mut c), &format!("encoder layer {l}"))?;
        }
        let memory = in_layer(b.norm(h, &mut c), "encoder norm")?;
        for l in 0..cfg.n_decoder_layers {
            t = in_layer(b.decoder_layer(t, memory, &segs, &mut c), &format!("decoder layer {l}"))?;
        }
        let t = in_layer(b.norm(t, &mut c), "decoder norm")?;
        let output = in_layer(b.linear(t, &mut c), "output projection")?;
        debug_assert_eq!(c.pos, params.len());
        Ok(ForwardPass { output, params, offsets })
    }

    /// Teacher-forced prediction for one sequence in evaluation mode.
    pub fn forward(&self, inputs: &[F], decoder_inputs: &[F]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let pass = self.build(
            &mut g,
            &[SeqRef {
                inputs,
                decoder_inputs,
            }],
            &mut rng,
            false,
        )?;
        Ok(g.value(pass.output).clone())
    }

    /// Autoregressive prediction: the decoder consumes its own outputs,
    /// starting from `prime` at the first hour.
    pub fn generate(&self, inputs: &[F], prime: &[F]) -> Result<Tensor<F>> {
        let cfg = &self.config;
        let (din, dout, d) = (cfg.input_dim, cfg.output_dim, cfg.d_model);
        let len = inputs.len() / din;
        if inputs.len() != len * din || prime.len() != dout {
            return Err(Error::Dimension {
                op: "generate",
                lhs: vec![inputs.len(), din],
                rhs: vec![prime.len(), dout],
            });
        }
        self.check_len(len)?;
        let pe: Vec<F> = positional_encoding(len, d);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

        // the encoder is causal, so its full pass serves every step
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([len, din], inputs.to_vec())?);
        let pe_all = g.constant(Tensor::new([len, d], pe.clone())?);
        let params: Vec<Var> = self.params.iter().map(|p| g.constant_shared(p.clone())).collect();
        let segs: Arc<[AttnSegment]> = vec![AttnSegment::square(0, len)].into();
        let mut c = Cursor { vars: &params, pos: 0 };
        let mut b = Block {
            g: &mut g,
            rng: &mut rng,
            heads: cfg.n_heads,
            rate: cfg.dropout_rate,
            train: false,
        };
        let (w, bias) = c.pair();
        let h = b.g.linear(x, w, Some(bias))?;
        let mut h = b.g.add(h, pe_all)?;
        let dec_in = c.pair();
        for l in 0..cfg.n_encoder_layers {
            h = in_layer(b.encoder_layer(h, &segs, &mut c), &format!("encoder layer {l}"))?;
        }
        let memory = in_layer(b.norm(h, &mut c), "encoder norm")?;

        let mut layers = Vec::with_capacity(cfg.n_decoder_layers);
        for _ in 0..cfg.n_decoder_layers {
            let norm1 = c.pair();
            let self_attn = [c.pair(), c.pair(), c.pair(), c.pair()];
            let norm2 = c.pair();
            let cross_q = c.pair();
            let ck = c.pair();
            let cv = c.pair();
            let cross_o = c.pair();
            let norm3 = c.pair();
            let ff = [c.pair(), c.pair()];
            layers.push(DecoderStep {
                norm1,
                self_attn,
                norm2,
                cross_q,
                memory_k: b.g.linear(memory, ck.0, Some(ck.1))?,
                memory_v: b.g.linear(memory, cv.0, Some(cv.1))?,
                cross_o,
                norm3,
                ff,
            });
        }
        let final_norm = c.pair();
        let out_proj = c.pair();
        debug_assert_eq!(c.pos, params.len());

        let g = b.g;
        let mut cache_k: Vec<Vec<F>> = vec![Vec::with_capacity(len * d); layers.len()];
        let mut cache_v: Vec<Vec<F>> = vec![Vec::with_capacity(len * d); layers.len()];
        let mut out = Vec::with_capacity(len * dout);
        let mut prev: Vec<F> = prime.to_vec();
        let mark = g.len();
        for step in 0..len {
            let y = g.constant(Tensor::new([1, dout], prev)?);
            let pe_row = g.constant(Tensor::new([1, d], pe[step * d..(step + 1) * d].to_vec())?);
            let t = g.linear(y, dec_in.0, Some(dec_in.1))?;
            let mut t = g.add(t, pe_row)?;
            for (l, layer) in layers.iter().enumerate() {
                t = in_layer(
                    layer.run(g, t, step, len, cfg.n_heads, &mut cache_k[l], &mut cache_v[l]),
                    &format!("decoder layer {l}"),
                )?;
            }
            let t = in_layer(g.layer_norm(t, Some(final_norm.0), Some(final_norm.1), LN_EPS), "decoder norm")?;
            let o = in_layer(g.linear(t, out_proj.0, Some(out_proj.1)), "output projection")?;
            prev = g.value(o).data().to_vec();
            out.extend_from_slice(&prev);
            g.truncate(mark);
        }
        Tensor::new([len, dout], out)
    }
}
