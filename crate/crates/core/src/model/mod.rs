//! Layered transformer encoder with one softmax classifier ("channel
//! terminal") per non-frozen layer and trainable mixture weights over the
//! auxiliary channels. Teacher and student are two instances of
//! [`LayeredModel`].

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{softmax_rows, SeqLayout, Tape, Var};
use crate::data::{EncodedBatch, LabelScheme};
use crate::error::{Error, Result};
use crate::util::{rng_for, Stream};
pub use config::EncoderConfig;

pub type ParamMap = BTreeMap<String, Array2<f64>>;

/// Per-channel probability rows.
pub type ChannelProbs = BTreeMap<usize, Array2<f64>>;

pub const EMBED_PREFIX: &str = "embeddings.";

fn layer_prefix(m: usize) -> String {
    format!("layer.{m}.")
}

fn terminal_names(m: usize) -> (String, String) {
    (format!("terminal.{m}.w"), format!("terminal.{m}.b"))
}

fn mixture_name(m: usize) -> String {
    format!("mixture.{m}")
}

/// Encoder weights shared as the common starting point of teacher and
/// student (a pretrained encoder, or a seeded random one).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub params: ParamMap,
}

impl EncoderWeights {
    pub fn random(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, Stream::Init);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut draw = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || normal.sample(&mut rng));
        let (d, f) = (config.hidden_dim, config.ffn_dim);
        let mut params = ParamMap::new();
        params.insert(format!("{EMBED_PREFIX}token"), draw(config.vocab_size, d));
        params.insert(format!("{EMBED_PREFIX}position"), draw(config.max_positions, d));
        params.insert(format!("{EMBED_PREFIX}norm.gamma"), Array2::ones((1, d)));
        params.insert(format!("{EMBED_PREFIX}norm.beta"), Array2::zeros((1, d)));
        for m in 1..=config.n_layers {
            let p = layer_prefix(m);
            for proj in ["q", "k", "v", "o"] {
                params.insert(format!("{p}{proj}.w"), draw(d, d));
                params.insert(format!("{p}{proj}.b"), Array2::zeros((1, d)));
            }
            params.insert(format!("{p}ffn_in.w"), draw(d, f));
            params.insert(format!("{p}ffn_in.b"), Array2::zeros((1, f)));
            params.insert(format!("{p}ffn_out.w"), draw(f, d));
            params.insert(format!("{p}ffn_out.b"), Array2::zeros((1, d)));
            for norm in ["attn_norm", "ffn_norm"] {
                params.insert(format!("{p}{norm}.gamma"), Array2::ones((1, d)));
                params.insert(format!("{p}{norm}.beta"), Array2::zeros((1, d)));
            }
        }
        Ok(EncoderWeights {
            config: config.clone(),
            params,
        })
    }

    /// Correlates token embeddings that share a key: each row becomes
    /// `rho * shared[key] + sqrt(1 - rho^2) * row`, preserving the marginal
    /// distribution. `keys[id]` is the key of vocabulary entry `id`.
    pub fn align_tokens(mut self, keys: &[String], rho: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!(
                "alignment strength must be in [0, 1], got {rho}"
            )));
        }
        let table = self
            .params
            .get_mut(&format!("{EMBED_PREFIX}token"))
            .expect("token embeddings");
        if keys.len() != table.nrows() {
            return Err(Error::Shape(format!(
                "{} alignment keys for {} token embeddings",
                keys.len(),
                table.nrows()
            )));
        }
        let mut rng = rng_for(seed, Stream::Alignment);
        let normal = Normal::new(0.0, self.config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut shared: BTreeMap<&str, Array1<f64>> = BTreeMap::new();
        let own = (1.0 - rho * rho).sqrt();
        for (id, key) in keys.iter().enumerate() {
            let g = shared
                .entry(key.as_str())
                .or_insert_with(|| Array1::from_shape_simple_fn(table.ncols(), || normal.sample(&mut rng)));
            let mut row = table.row_mut(id);
            row *= own;
            row.scaled_add(rho, g);
        }
        Ok(self)
    }
}

/// One per-layer classifier: `softmax(W h + b)`, `W` is `[|C| x hidden_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTerminal {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Hidden states of every layer plus final-layer [CLS] vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutputs {
    /// `hidden[m - 1]` is layer `m`, shaped `[B, T, hidden_dim]`.
    pub hidden: Vec<Array3<f64>>,
    pub cls: Array2<f64>,
}

/// Tape leaves of every parameter, keyed by name.
pub type Bindings = BTreeMap<String, Var>;

/// Tape handles for a forward pass.
pub struct Forward {
    /// Flattened `[B * T, hidden_dim]` per layer.
    pub hidden: Vec<Var>,
    /// `[B, hidden_dim]` from the final layer.
    pub cls: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    pub config: EncoderConfig,
    pub scheme: LabelScheme,
    pub params: ParamMap,
}

impl LayeredModel {
    /// Builds a model on top of `base`: encoder weights are copied, channel
    /// terminals are freshly drawn from `seed`, mixture weights start at 1.
    pub fn from_base(base: &EncoderWeights, scheme: &LabelScheme, seed: u64) -> Result<Self> {
        base.config.validate()?;
        let reference = EncoderWeights::random(&base.config, 0)?;
        for (name, value) in &reference.params {
            match base.params.get(name) {
                Some(v) if v.dim() == value.dim() => {}
                Some(v) => {
                    return Err(Error::Config(format!(
                        "base parameter {name} has shape {:?}, expected {:?}",
                        v.dim(),
                        value.dim()
                    )))
                }
                None => return Err(Error::Config(format!("base is missing parameter {name}"))),
            }
        }
        let cfg = &base.config;
        let mut params = base.params.clone();
        let mut rng = rng_for(seed, Stream::Terminals);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
        for m in cfg.active_channels() {
            let (w, b) = terminal_names(m);
            params.insert(
                w,
                Array2::from_shape_simple_fn((cfg.hidden_dim, scheme.len()), || normal.sample(&mut rng)),
            );
            params.insert(b, Array2::zeros((1, scheme.len())));
        }
        for m in cfg.aux_channels() {
            params.insert(mixture_name(m), Array2::ones((1, 1)));
        }
        Ok(LayeredModel {
            config: cfg.clone(),
            scheme: scheme.clone(),
            params,
        })
    }

    pub fn main_channel(&self) -> usize {
        self.config.main_channel()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        if name.starts_with(EMBED_PREFIX) {
            return true;
        }
        (1..=self.config.n_frozen).any(|m| name.starts_with(&layer_prefix(m)))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.keys().filter(|n| !self.is_frozen(n)).cloned().collect()
    }

    pub fn frozen_params(&self) -> ParamMap {
        self.params
            .iter()
            .filter(|(n, _)| self.is_frozen(n))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn encoder_weights(&self) -> EncoderWeights {
        EncoderWeights {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(EMBED_PREFIX) || n.starts_with("layer."))
                .map(|(n, v)| (n.clone(), v.clone()))
                .collect(),
        }
    }

    /// Mixture weight per auxiliary channel.
    pub fn mixture(&self) -> BTreeMap<usize, f64> {
        self.config
            .aux_channels()
            .into_iter()
            .map(|m| (m, self.params[&mixture_name(m)][[0, 0]]))
            .collect()
    }

    pub fn terminal(&self, m: usize) -> Result<ChannelTerminal> {
        let (w, b) = terminal_names(m);
        let (Some(w), Some(b)) = (self.params.get(&w), self.params.get(&b)) else {
            return Err(Error::Config(format!("no channel terminal on layer {m}")));
        };
        Ok(ChannelTerminal {
            weight: w.t().to_owned(),
            bias: b.row(0).to_owned(),
        })
    }

    pub fn set_terminal(&mut self, m: usize, terminal: &ChannelTerminal) -> Result<()> {
        let (w, b) = terminal_names(m);
        if !self.params.contains_key(&w) {
            return Err(Error::Config(format!("no channel terminal on layer {m}")));
        }
        if terminal.weight.dim() != (self.scheme.len(), self.config.hidden_dim) {
            return Err(Error::Shape(format!("terminal weight {:?}", terminal.weight.dim())));
        }
        self.params.insert(w, terminal.weight.t().to_owned());
        self.params.insert(b, terminal.bias.clone().insert_axis(Axis(0)));
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and bit patterns.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.params)
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if batch.seq_len() > self.config.max_positions {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_positions {}",
                batch.seq_len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = batch
            .subtoken_ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::Shape(format!(
                "subtoken id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if batch.batch_size() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Puts every parameter on `tape`. Frozen parameters, and all
    /// parameters when `trainable` is false, enter as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        self.params
            .iter()
            .map(|(name, value)| {
                let rg = trainable && !self.is_frozen(name);
                (name.clone(), tape.leaf(value.clone(), rg))
            })
            .collect()
    }

    /// Builds the encoder on `tape` from bound parameters. Dropout is
    /// applied only when an RNG is supplied.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        bindings: &Bindings,
        batch: &EncodedBatch,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Forward> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (b, t) = (batch.batch_size(), batch.seq_len());
        let p = |name: &str| -> Var { bindings[name] };

        let dropout = cfg.dropout;
        let mut drop =
            |tape: &mut Tape, x: Var| -> Var {
                match dropout_rng.as_deref_mut() {
                    Some(rng) if dropout > 0.0 => {
                        let keep = Bernoulli::new(1.0 - dropout).expect("dropout in [0, 1)");
                        let scale = 1.0 / (1.0 - dropout);
                        let shape = tape.value(x).raw_dim();
                        let mask = Array2::from_shape_simple_fn((shape[0], shape[1]), || {
                            if keep.sample(rng) {
                                scale
                            } else {
                                0.0
                            }
                        });
                        tape.mul_const(x, Rc::new(mask))
                    }
                    _ => x,
                }
            };

        let ids: Vec<usize> = batch.subtoken_ids.iter().map(|&id| id as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok = tape.embed(p("embeddings.token"), Rc::new(ids));
        let pos = tape.embed(p("embeddings.position"), Rc::new(positions));
        let x = tape.add(tok, pos);
        let x = tape.layer_norm(x, p("embeddings.norm.gamma"), p("embeddings.norm.beta"));
        let mut x = drop(tape, x);

        let layout = Rc::new(SeqLayout {
            batch: b,
            seq_len: t,
            key_valid: batch.attention_mask.iter().map(|&m| m == 1).collect(),
        });
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        for m in 1..=cfg.n_layers {
            let lp = layer_prefix(m);
            let w = |s: &str| p(&format!("{lp}{s}"));
            let q = tape.linear(x, w("q.w"), w("q.b"));
            let k = tape.linear(x, w("k.w"), w("k.b"));
            let v = tape.linear(x, w("v.w"), w("v.b"));
            let a = tape.attention(q, k, v, cfg.n_heads, layout.clone());
            let o = tape.linear(a, w("o.w"), w("o.b"));
            let o = drop(tape, o);
            let r = tape.add(x, o);
            let x1 = tape.layer_norm(r, w("attn_norm.gamma"), w("attn_norm.beta"));
            let h = tape.linear(x1, w("ffn_in.w"), w("ffn_in.b"));
            let h = tape.gelu(h);
            let f = tape.linear(h, w("ffn_out.w"), w("ffn_out.b"));
            let f = drop(tape, f);
            let r = tape.add(x1, f);
            x = tape.layer_norm(r, w("ffn_norm.gamma"), w("ffn_norm.beta"));
            hidden.push(x);
        }
        let cls_rows: Vec<usize> = (0..b).map(|i| i * t).collect();
        let cls = tape.gather_rows(x, Rc::new(cls_rows));
        Ok(Forward { hidden, cls })
    }

    /// Channel-`m` probabilities at the given flattened rows of the forward
    /// pass.
    pub fn channel_probs(
        &self,
        tape: &mut Tape,
        bindings: &Bindings,
        fwd: &Forward,
        m: usize,
        rows: &Rc<Vec<usize>>,
    ) -> Result<Var> {
        let (w, b) = terminal_names(m);
        let (Some(&w), Some(&b)) = (bindings.get(&w), bindings.get(&b)) else {
            return Err(Error::Config(format!("no channel terminal on layer {m}")));
        };
        let h = tape.gather_rows(fwd.hidden[m - 1], rows.clone());
        let logits = tape.linear(h, w, b);
        Ok(tape.softmax(logits))
    }

    pub fn mixture_vars(&self, bindings: &Bindings) -> BTreeMap<usize, Var> {
        self.config
            .aux_channels()
            .into_iter()
            .map(|m| (m, bindings[&mixture_name(m)]))
            .collect()
    }

    /// Plain forward pass. `dropout_rng` enables training-mode dropout.
    pub fn encode<R: Rng>(&self, batch: &EncodedBatch, dropout_rng: Option<&mut R>) -> Result<LayerOutputs> {
        let mut tape = Tape::new();
        let bindings = self.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &bindings, batch, dropout_rng)?;
        let (b, t) = (batch.batch_size(), batch.seq_len());
        let hidden = fwd
            .hidden
            .iter()
            .map(|&h| {
                tape.value(h)
                    .clone()
                    .into_shape_with_order((b, t, self.config.hidden_dim))
                    .expect("hidden is [B*T, D]")
            })
            .collect();
        Ok(LayerOutputs {
            hidden,
            cls: tape.value(fwd.cls).clone(),
        })
    }

    /// Inference-mode probabilities of the requested channels at valid
    /// (first-subtoken) positions, rows in sentence-then-word order.
    pub fn valid_channel_probs(&self, batch: &EncodedBatch, channels: &[usize]) -> Result<(ChannelProbs, Array2<f64>)> {
        let mut tape = Tape::new();
        let bindings = self.bind(&mut tape, false);
        let fwd = self.forward::<rand_chacha::ChaCha8Rng>(&mut tape, &bindings, batch, None)?;
        let rows = Rc::new(batch.valid_positions());
        let mut out = BTreeMap::new();
        for &m in channels {
            let p = self.channel_probs(&mut tape, &bindings, &fwd, m, &rows)?;
            out.insert(m, tape.value(p).clone());
        }
        Ok((out, tape.value(fwd.cls).clone()))
    }

    /// Argmax tag indices of channel `m` per sentence; truncated words are
    /// predicted as `O`.
    pub fn predict_channel(&self, batch: &EncodedBatch, m: usize) -> Result<Vec<Vec<usize>>> {
        let (probs, _) = self.valid_channel_probs(batch, &[m])?;
        Ok(split_predictions(batch, &argmax_rows(probs[&m].view())))
    }

    /// Main-channel predictions mapped back to word-level tags.
    pub fn predict_tags(&self, batch: &EncodedBatch) -> Result<Vec<Vec<String>>> {
        let preds = self.predict_channel(batch, self.main_channel())?;
        Ok(preds
            .into_iter()
            .map(|s| s.into_iter().map(|i| self.scheme.tag(i).to_string()).collect())
            .collect())
    }
}

/// Per-row argmax; ties go to the lowest index.
pub fn argmax_rows(p: ArrayView2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Splits flat valid-position predictions back into sentences, padding
/// truncated words with index 0 (`O`).
pub fn split_predictions(batch: &EncodedBatch, flat: &[usize]) -> Vec<Vec<usize>> {
    let mut offset = 0;
    batch
        .first_subtoken_index
        .iter()
        .zip(&batch.n_words)
        .map(|(firsts, &n)| {
            let mut s = flat[offset..offset + firsts.len()].to_vec();
            offset += firsts.len();
            s.resize(n, 0);
            s
        })
        .collect()
}

/// `softmax(h W^T + b)` over the last axis of `[B, T, hidden_dim]`.
pub fn channel_forward(terminal: &ChannelTerminal, hidden: ArrayView3<f64>) -> Result<Array3<f64>> {
    let (b, t, d) = hidden.dim();
    if d != terminal.weight.ncols() {
        return Err(Error::Shape(format!(
            "hidden dim {d} vs terminal input {}",
            terminal.weight.ncols()
        )));
    }
    let flat = hidden.to_owned().into_shape_with_order((b * t, d)).expect("contiguous");
    let logits = flat.dot(&terminal.weight.t()) + &terminal.bias;
    let c = terminal.weight.nrows();
    Ok(softmax_rows(logits.view())
        .into_shape_with_order((b, t, c))
        .expect("rows preserved"))
}

pub fn fingerprint(params: &ParamMap) -> String {
    let mut h = Sha256::new();
    for (name, v) in params {
        h.update(name.as_bytes());
        h.update((v.nrows() as u64).to_le_bytes());
        h.update((v.ncols() as u64).to_le_bytes());
        for x in v.iter() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
