//! Recurrent encoder, content-based attention and character decoder.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convnets::{
    extract_patches, read_fullimage, read_patches, ConvArchSpec, ConvError, ConvNet, Family,
    PatchSpec,
};
use crate::imaging::GrayImage;
use crate::tensor::{
    argmax, read_params, write_params, Graph, Mode, ParamId, ParamStore, Tensor, TensorError, Var,
};
use crate::train::glorot_normal;

pub const PAD: usize = 0;
pub const GO: usize = 1;
pub const END: usize = 2;
const RESERVED: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
    #[error("duplicate character {0:?} in vocabulary")]
    DuplicateChar(char),
    #[error("token {index} out of range for vocabulary of {size}")]
    TokenOutOfRange { index: usize, size: usize },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("empty target sequence")]
    EmptyTarget,
    #[error("target must end with END")]
    MissingEnd,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image height {got} does not match the model's {expected}")]
    ImageHeight { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Character inventory with reserved PAD/GO/END indices 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self, ModelError> {
        let mut v = Self {
            chars: Vec::new(),
            index: HashMap::new(),
        };
        for c in chars {
            if v.index.insert(c, RESERVED + v.chars.len()).is_some() {
                return Err(ModelError::DuplicateChar(c));
            }
            v.chars.push(c);
        }
        Ok(v)
    }

    /// Sorted set of every character appearing in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<char> = texts.into_iter().flat_map(|t| t.chars()).collect();
        set.sort_unstable();
        set.dedup();
        Self::new(set).expect("deduplicated")
    }

    /// Vocabulary size including the three reserved tokens.
    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_at(&self, index: usize) -> Option<char> {
        index
            .checked_sub(RESERVED)
            .and_then(|i| self.chars.get(i))
            .copied()
    }

    /// Character indices of `text` followed by END.
    pub fn encode_target(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        let mut out = text
            .chars()
            .map(|c| self.index_of(c).ok_or(ModelError::UnknownChar(c)))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(END);
        Ok(out)
    }

    /// Characters up to the first END; reserved tokens are dropped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != END)
            .filter_map(|&t| self.char_at(t))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub cell: CellKind,
    pub size: usize,
    pub layers: usize,
    pub bidirectional: bool,
    /// Learn the initial state instead of starting from zeros.
    #[serde(default)]
    pub learned_initial_state: bool,
}

/// How the reader turns an image into a feature sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FeatureMode {
    Patches { width: usize, step: usize },
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub reader: Family,
    /// VGG blocks or extra ResNet modules; ignored for LeNet.
    #[serde(default = "default_reader_blocks")]
    pub reader_blocks: usize,
    pub features: FeatureMode,
    pub encoder: EncoderConfig,
    pub attention_size: usize,
    /// Dropout on encoder layer outputs.
    #[serde(default)]
    pub dropout: f64,
}

fn default_reader_blocks() -> usize {
    2
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let e = &self.encoder;
        if e.size == 0 || e.layers == 0 || self.attention_size == 0 {
            return Err(ModelError::Config(
                "encoder size, layers and attention size must be ≥ 1".into(),
            ));
        }
        if self.image_height == 0 {
            return Err(ModelError::Config("image height must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if let FeatureMode::Patches { width, step } = self.features {
            PatchSpec::new(width, step)?;
        }
        Ok(())
    }

    fn reader_arch(&self) -> ConvArchSpec {
        let w = match self.features {
            FeatureMode::Patches { width, .. } => width,
            FeatureMode::Full => self.image_height.max(8),
        };
        match self.reader {
            Family::LeNet => ConvArchSpec::lenet_reader(self.image_height, w),
            Family::Vgg => ConvArchSpec::vgg(self.reader_blocks, self.image_height, w, None),
            Family::ResNet => ConvArchSpec::resnet(self.reader_blocks, self.image_height, w, None),
        }
    }
}

/// Recurrent cell state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum State {
    Gru(Var),
    Lstm { h: Var, c: Var },
}

impl State {
    pub fn h(&self) -> Var {
        match self {
            State::Gru(h) => *h,
            State::Lstm { h, .. } => *h,
        }
    }
}

/// Parameters of one recurrent cell. Input weights `wx` map `x` to all gate
/// pre-activations at once; recurrent weights act on the previous output.
///
/// GRU gate layout: `[u, r, ĥ]`, with `wh_gates` covering `u, r` and
/// `wh_cand` the candidate. LSTM gate layout: `[f, i, o, Ĉ]`, all in `wh_gates`.
#[derive(Debug, Clone)]
pub struct Cell {
    pub kind: CellKind,
    pub size: usize,
    pub input_size: usize,
    wx: ParamId,
    b: ParamId,
    wh_gates: ParamId,
    wh_cand: Option<ParamId>,
    init: Option<(ParamId, Option<ParamId>)>,
}

/// A cell whose parameters are bound to nodes of one graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundCell {
    kind: CellKind,
    size: usize,
    wx: Var,
    b: Var,
    wh_gates: Var,
    wh_cand: Option<Var>,
}

impl Cell {
    pub fn new<R: Rng + ?Sized>(
        kind: CellKind,
        input_size: usize,
        size: usize,
        learned_init: bool,
        store: &mut ParamStore,
        name: &str,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let h = size;
        let gates = match kind {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        };
        let wx = store.add(
            &format!("{name}.wx"),
            glorot_normal(&[input_size, gates * h], input_size, gates * h, rng),
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[gates * h]))?;
        let (wh_gates, wh_cand) = match kind {
            CellKind::Gru => (
                store.add(
                    &format!("{name}.wh_gates"),
                    glorot_normal(&[h, 2 * h], h, 2 * h, rng),
                )?,
                Some(store.add(
                    &format!("{name}.wh_cand"),
                    glorot_normal(&[h, h], h, h, rng),
                )?),
            ),
            CellKind::Lstm => (
                store.add(
                    &format!("{name}.wh_gates"),
                    glorot_normal(&[h, 4 * h], h, 4 * h, rng),
                )?,
                None,
            ),
        };
        let init = if learned_init {
            let h0 = store.add(&format!("{name}.h0"), Tensor::zeros(&[h]))?;
            let c0 = match kind {
                CellKind::Lstm => Some(store.add(&format!("{name}.c0"), Tensor::zeros(&[h]))?),
                CellKind::Gru => None,
            };
            Some((h0, c0))
        } else {
            None
        };
        Ok(Self {
            kind,
            size,
            input_size,
            wx,
            b,
            wh_gates,
            wh_cand,
            init,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundCell {
        BoundCell {
            kind: self.kind,
            size: self.size,
            wx: g.param(self.wx),
            b: g.param(self.b),
            wh_gates: g.param(self.wh_gates),
            wh_cand: self.wh_cand.map(|id| g.param(id)),
        }
    }

    /// Zero state, or the learned one when enabled.
    pub fn initial_state(&self, g: &mut Graph) -> State {
        let zeros = |g: &mut Graph| g.input(Tensor::zeros(&[self.size]));
        let h = match self.init {
            Some((h0, _)) => g.param(h0),
            None => zeros(g),
        };
        match self.kind {
            CellKind::Gru => State::Gru(h),
            CellKind::Lstm => {
                let c = match self.init {
                    Some((_, Some(c0))) => g.param(c0),
                    _ => zeros(g),
                };
                State::Lstm { h, c }
            }
        }
    }
}

impl BoundCell {
    /// Input projection `x·Wx + b` for a single vector or a whole `[T, d]` sequence.
    pub fn project(&self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        g.dense(x, self.wx, Some(self.b))
    }

    /// One step from an already projected input.
    pub fn step_projected(
        &self,
        g: &mut Graph,
        xp: Var,
        state: State,
    ) -> Result<State, TensorError> {
        let h = self.size;
        match (self.kind, state) {
            (CellKind::Gru, State::Gru(hp)) => {
                let wh_cand = self.wh_cand.expect("GRU candidate weights");
                let x_gates = g.slice(xp, 0, 2 * h)?;
                let x_cand = g.slice(xp, 2 * h, 3 * h)?;
                let h_gates = g.dense(hp, self.wh_gates, None)?;
                let pre = g.add(x_gates, h_gates)?;
                let gates = g.sigmoid(pre);
                let u = g.slice(gates, 0, h)?;
                let r = g.slice(gates, h, 2 * h)?;
                let rh = g.mul(r, hp)?;
                let h_cand = g.dense(rh, wh_cand, None)?;
                let pre_c = g.add(x_cand, h_cand)?;
                let cand = g.tanh(pre_c);
                // (1 − u)⊙h + u⊙ĥ = h + u⊙(ĥ − h)
                let diff = g.sub(cand, hp)?;
                let step = g.mul(u, diff)?;
                Ok(State::Gru(g.add(hp, step)?))
            }
            (CellKind::Lstm, State::Lstm { h: hp, c: cp }) => {
                let rec = g.dense(hp, self.wh_gates, None)?;
                let pre = g.add(xp, rec)?;
                let sig_part = g.slice(pre, 0, 3 * h)?;
                let sig = g.sigmoid(sig_part);
                let f = g.slice(sig, 0, h)?;
                let i = g.slice(sig, h, 2 * h)?;
                let o = g.slice(sig, 2 * h, 3 * h)?;
                let cand_pre = g.slice(pre, 3 * h, 4 * h)?;
                let cand = g.tanh(cand_pre);
                let keep = g.mul(f, cp)?;
                let write = g.mul(i, cand)?;
                let c = g.add(keep, write)?;
                let tc = g.tanh(c);
                let hn = g.mul(o, tc)?;
                Ok(State::Lstm { h: hn, c })
            }
            _ => Err(TensorError::Invalid {
                op: "recurrent step",
                detail: "state does not match cell type".into(),
            }),
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: State) -> Result<State, TensorError> {
        let xp = self.project(g, x)?;
        self.step_projected(g, xp, state)
    }
}

/// One LSTM step on a freshly bound cell.
pub fn lstm_step(g: &mut Graph, cell: &Cell, x: Var, state: State) -> Result<State, TensorError> {
    cell.bind(g).step(g, x, state)
}

/// One GRU step on a freshly bound cell.
pub fn gru_step(g: &mut Graph, cell: &Cell, x: Var, h: Var) -> Result<Var, TensorError> {
    Ok(cell.bind(g).step(g, x, State::Gru(h))?.h())
}

/// Stacked, optionally bidirectional recurrent encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    /// `layers[l] = (forward, backward)`.
    layers: Vec<(Cell, Option<Cell>)>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        config: &EncoderConfig,
        input_size: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if config.size == 0 || config.layers == 0 {
            return Err(ModelError::Config(
                "encoder size and layers must be ≥ 1".into(),
            ));
        }
        let mut layers = Vec::new();
        let mut d = input_size;
        for l in 0..config.layers {
            let mk = |store: &mut ParamStore, rng: &mut R, dir: &str| {
                Cell::new(
                    config.cell,
                    d,
                    config.size,
                    config.learned_initial_state,
                    store,
                    &format!("{prefix}.l{l}.{dir}"),
                    rng,
                )
            };
            let fwd = mk(store, rng, "fwd")?;
            let bwd = if config.bidirectional {
                Some(mk(store, rng, "bwd")?)
            } else {
                None
            };
            layers.push((fwd, bwd));
            d = config.size * if config.bidirectional { 2 } else { 1 };
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn output_width(&self) -> usize {
        self.config.size * if self.config.bidirectional { 2 } else { 1 }
    }

    /// Runs every layer over `features [T, d]`. Returns the top layer's output
    /// sequence `[T, width]` and the final state of its forward direction.
    pub fn run(
        &self,
        g: &mut Graph,
        features: Var,
        dropout: f64,
    ) -> Result<(Var, State), ModelError> {
        let t_len = *g.shape(features).first().ok_or(ModelError::EmptySequence)?;
        if t_len == 0 || g.shape(features).len() != 2 {
            return Err(ModelError::EmptySequence);
        }
        let mut input = features;
        let mut last = None;
        for (fwd, bwd) in &self.layers {
            let (fwd_out, fwd_state) = run_direction(g, fwd, input, false)?;
            let out = match bwd {
                None => g.stack(&fwd_out)?,
                Some(b) => {
                    let (bwd_out, _) = run_direction(g, b, input, true)?;
                    let mut rows = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        rows.push(g.concat(&[fwd_out[t], bwd_out[t]])?);
                    }
                    g.stack(&rows)?
                }
            };
            input = g.dropout(out, dropout)?;
            last = Some(fwd_state);
        }
        Ok((input, last.expect("at least one layer")))
    }
}

/// Outputs in input order (a reversed direction still reports position `t` at index `t`).
fn run_direction(
    g: &mut Graph,
    cell: &Cell,
    input: Var,
    reverse: bool,
) -> Result<(Vec<Var>, State), ModelError> {
    let bound = cell.bind(g);
    let proj = bound.project(g, input)?;
    let t_len = g.shape(input)[0];
    let mut state = cell.initial_state(g);
    let mut outs = vec![None; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let xp = g.row(proj, t)?;
        state = bound.step_projected(g, xp, state)?;
        outs[t] = Some(state.h());
    }
    Ok((
        outs.into_iter().map(|v| v.expect("filled")).collect(),
        state,
    ))
}

/// Run a stand-alone encoder.
pub fn run_encoder(
    g: &mut Graph,
    encoder: &Encoder,
    features: Var,
) -> Result<(Var, State), ModelError> {
    encoder.run(g, features, 0.0)
}

/// `e_{t,i} = wᵀ tanh(W h^e_i + V h^d_{t−1} + b)`.
#[derive(Debug, Clone)]
pub struct Attention {
    w_enc: ParamId,
    v_dec: ParamId,
    w: ParamId,
    b: ParamId,
}

/// Attention bound to a graph with the encoder projection `H·W` cached.
#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    enc: Var,
    enc_proj: Var,
    v_dec: Var,
    w: Var,
    b: Var,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        enc_width: usize,
        dec_size: usize,
        size: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            w_enc: store.add(
                &format!("{prefix}.W"),
                glorot_normal(&[enc_width, size], enc_width, size, rng),
            )?,
            v_dec: store.add(
                &format!("{prefix}.V"),
                glorot_normal(&[dec_size, size], dec_size, size, rng),
            )?,
            w: store.add(
                &format!("{prefix}.w"),
                glorot_normal(&[size, 1], size, 1, rng),
            )?,
            b: store.add(&format!("{prefix}.b"), Tensor::zeros(&[size]))?,
        })
    }

    /// Binds to encoder outputs `enc [n, width]`.
    pub fn bind(&self, g: &mut Graph, enc: Var) -> Result<BoundAttention, TensorError> {
        let w_enc = g.param(self.w_enc);
        let enc_proj = g.matmul(enc, w_enc)?;
        Ok(BoundAttention {
            enc,
            enc_proj,
            v_dec: g.param(self.v_dec),
            w: g.param(self.w),
            b: g.param(self.b),
        })
    }
}

impl BoundAttention {
    /// Returns `(context c_t, weights a_t)`.
    pub fn attend(&self, g: &mut Graph, h_prev: Var) -> Result<(Var, Var), TensorError> {
        let n = g.shape(self.enc)[0];
        let dec = g.dense(h_prev, self.v_dec, Some(self.b))?;
        let pre = g.add_row(self.enc_proj, dec)?;
        let act = g.tanh(pre);
        let e = g.dense(act, self.w, None)?;
        let e = g.reshape(e, &[n])?;
        let a = g.softmax(e);
        let c = g.dense(a, self.enc, None)?;
        Ok((c, a))
    }
}

/// Stand-alone attention over encoder outputs `enc [n, width]`.
pub fn attention(
    g: &mut Graph,
    attn: &Attention,
    enc: Var,
    h_prev: Var,
) -> Result<(Var, Var), TensorError> {
    attn.bind(g, enc)?.attend(g, h_prev)
}

/// Decoder recurrent cell plus output projection.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cell: Cell,
    out_w: ParamId,
    out_b: ParamId,
    vocab_size: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDecoder {
    cell: BoundCell,
    out_w: Var,
    out_b: Var,
    vocab_size: usize,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        kind: CellKind,
        vocab_size: usize,
        context_size: usize,
        size: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let cell = Cell::new(
            kind,
            vocab_size + context_size,
            size,
            false,
            store,
            &format!("{prefix}.cell"),
            rng,
        )?;
        let out_w = store.add(
            &format!("{prefix}.out_w"),
            glorot_normal(&[size, vocab_size], size, vocab_size, rng),
        )?;
        let out_b = store.add(&format!("{prefix}.out_b"), Tensor::zeros(&[vocab_size]))?;
        Ok(Self {
            cell,
            out_w,
            out_b,
            vocab_size,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundDecoder {
        BoundDecoder {
            cell: self.cell.bind(g),
            out_w: g.param(self.out_w),
            out_b: g.param(self.out_b),
            vocab_size: self.vocab_size,
        }
    }
}

impl BoundDecoder {
    /// Input `concat(one_hot(prev), context)`, one recurrent step, then
    /// `logits = dense(h_t)`.
    pub fn step(
        &self,
        g: &mut Graph,
        prev: usize,
        context: Var,
        state: State,
    ) -> Result<(Var, State), ModelError> {
        if prev >= self.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                index: prev,
                size: self.vocab_size,
            });
        }
        let mut one_hot = vec![0.0; self.vocab_size];
        one_hot[prev] = 1.0;
        let oh = g.input(Tensor::vector(one_hot));
        let x = g.concat(&[oh, context])?;
        let state = self.cell.step(g, x, state)?;
        let logits = g.dense(state.h(), self.out_w, Some(self.out_b))?;
        Ok((logits, state))
    }
}

/// One decoder step on freshly bound parameters.
pub fn decoder_step(
    g: &mut Graph,
    decoder: &Decoder,
    prev: usize,
    context: Var,
    state: State,
) -> Result<(Var, State), ModelError> {
    decoder.bind(g).step(g, prev, context, state)
}

/// Graph handles produced by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[T, vocab]`, one row per target position.
    pub logits: Var,
    /// Attention weights per decoder step.
    pub attention: Vec<Var>,
    pub encoder_outputs: Var,
    pub encoder_state: State,
    /// Decoder state before the first step.
    pub decoder_initial: State,
    /// Tokens fed to the decoder at each step.
    pub inputs: Vec<usize>,
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub text: String,
    pub tokens: Vec<usize>,
    /// One row of encoder-position weights per decoder step.
    pub attention: Vec<Vec<f64>>,
}

/// The full word recognizer: reader → encoder → attention decoder.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    config: ModelConfig,
    vocab: CharVocab,
    store: ParamStore,
    reader: ConvNet,
    encoder: Encoder,
    attention: Attention,
    decoder: Decoder,
}

impl Seq2Seq {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        vocab: CharVocab,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let reader = ConvNet::build(&config.reader_arch(), &mut store, "reader", rng)?;
        let out = reader.output_shape();
        let feat = match config.features {
            FeatureMode::Patches { .. } => out.iter().product(),
            FeatureMode::Full => out[0] * out[2],
        };
        let encoder = Encoder::new(&config.encoder, feat, &mut store, "encoder", rng)?;
        let enc_w = encoder.output_width();
        let size = config.encoder.size;
        let attention = Attention::new(
            enc_w,
            size,
            config.attention_size,
            &mut store,
            "attention",
            rng,
        )?;
        let decoder = Decoder::new(
            config.encoder.cell,
            vocab.len(),
            enc_w,
            size,
            &mut store,
            "decoder",
            rng,
        )?;
        Ok(Self {
            config,
            vocab,
            store,
            reader,
            encoder,
            attention,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &CharVocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Changes the dropout rate on encoder outputs.
    pub fn set_dropout(&mut self, rate: f64) -> Result<(), ModelError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(ModelError::Config(format!("dropout {rate} outside [0, 1)")));
        }
        self.config.dropout = rate;
        Ok(())
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn reader(&self) -> &ConvNet {
        &self.reader
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Reader features `[T, d]` for an image of the model's height.
    pub fn features(&self, g: &mut Graph, img: &GrayImage) -> Result<Var, ModelError> {
        if img.height() != self.config.image_height {
            return Err(ModelError::ImageHeight {
                expected: self.config.image_height,
                got: img.height(),
            });
        }
        match self.config.features {
            FeatureMode::Patches { width, step } => {
                let spec = PatchSpec::new(width, step)?;
                let padded;
                let src = if img.width() < width {
                    padded = img.crop(0, 0, width, img.height(), 0.0);
                    &padded
                } else {
                    img
                };
                let patches = extract_patches(src, spec)?;
                Ok(read_patches(&self.reader, g, &patches)?)
            }
            FeatureMode::Full => Ok(read_fullimage(&self.reader, g, img)?),
        }
    }

    /// Teacher-forced (or free-running) pass producing one logits row per
    /// position of `target`, which must end with END. A leading GO is
    /// dropped, since decoding always starts from GO.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        img: &GrayImage,
        target: &[usize],
        teacher_forcing: bool,
    ) -> Result<ForwardOutput, ModelError> {
        let target = match target.split_first() {
            Some((&GO, rest)) => rest,
            _ => target,
        };
        if target.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        if *target.last().expect("nonempty") != END {
            return Err(ModelError::MissingEnd);
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(ModelError::TokenOutOfRange {
                index: bad,
                size: self.vocab.len(),
            });
        }
        let feats = self.features(g, img)?;
        let (enc, enc_state) = self.encoder.run(g, feats, self.config.dropout)?;
        let attn = self.attention.bind(g, enc)?;
        let dec = self.decoder.bind(g);
        let mut state = enc_state;
        let mut prev = GO;
        let mut rows = Vec::with_capacity(target.len());
        let mut weights = Vec::with_capacity(target.len());
        let mut inputs = Vec::with_capacity(target.len());
        for &y in target {
            let (ctx, a) = attn.attend(g, state.h())?;
            inputs.push(prev);
            let (logits, next) = dec.step(g, prev, ctx, state)?;
            state = next;
            rows.push(logits);
            weights.push(a);
            prev = if teacher_forcing {
                y
            } else {
                argmax(g.value(logits).data())
            };
        }
        let logits = g.stack(&rows)?;
        Ok(ForwardOutput {
            logits,
            attention: weights,
            encoder_outputs: enc,
            encoder_state: enc_state,
            decoder_initial: enc_state,
            inputs,
        })
    }

    /// Mean cross-entropy of `text` under teacher forcing, as a graph node.
    pub fn loss(&self, g: &mut Graph, img: &GrayImage, text: &str) -> Result<Var, ModelError> {
        let target = self.vocab.encode_target(text)?;
        let out = self.forward_train(g, img, &target, true)?;
        let weights: Vec<f64> = target
            .iter()
            .map(|&t| if t == PAD { 0.0 } else { 1.0 })
            .collect();
        Ok(g.weighted_sequence_cross_entropy(out.logits, &target, &weights)?)
    }

    /// Argmax decoding from GO until END or `max_len` steps.
    pub fn greedy_decode(&self, img: &GrayImage, max_len: usize) -> Result<Decoded, ModelError> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let feats = self.features(&mut g, img)?;
        let (enc, mut state) = self.encoder.run(&mut g, feats, 0.0)?;
        let attn = self.attention.bind(&mut g, enc)?;
        let dec = self.decoder.bind(&mut g);
        let mut prev = GO;
        let mut tokens = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..max_len.max(1) {
            let (ctx, a) = attn.attend(&mut g, state.h())?;
            let (logits, next) = dec.step(&mut g, prev, ctx, state)?;
            state = next;
            weights.push(g.value(a).data().to_vec());
            let tok = argmax(g.value(logits).data());
            tokens.push(tok);
            if tok == END {
                break;
            }
            prev = tok;
        }
        Ok(Decoded {
            text: self.vocab.decode(&tokens),
            tokens,
            attention: weights,
        })
    }

    fn meta(&self) -> String {
        let chars: String = self.vocab.chars().iter().collect();
        serde_json::json!({ "config": self.config, "vocab": chars }).to_string()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let f = BufWriter::new(File::create(path)?);
        write_params(f, &self.store, &self.meta())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let f = BufReader::new(File::open(path)?);
        let (saved, meta) = read_params(f)?;
        #[derive(Deserialize)]
        struct Meta {
            config: ModelConfig,
            vocab: String,
        }
        let meta: Meta =
            serde_json::from_str(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let vocab = CharVocab::new(meta.vocab.chars())?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(meta.config, vocab, &mut rng)?;
        model.load_values(&saved)?;
        Ok(model)
    }

    /// Copies values by name from `other`, which must hold exactly this model's parameters.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), ModelError> {
        if other.len() != self.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.store.len(),
                other.len()
            )));
        }
        for (_, p) in other.iter() {
            let id = self
                .store
                .id(&p.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor {:?}", p.name)))?;
            let dst = self.store.value_mut(id);
            if dst.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "shape mismatch for {:?}",
                    p.name
                )));
            }
            *dst = p.value.clone();
        }
        Ok(())
    }
}

/// Attention weights as CSV: one row per decoded token, one column per
/// encoder position.
pub fn attention_csv(decoded: &Decoded, vocab: &CharVocab) -> String {
    let n = decoded.attention.first().map_or(0, |r| r.len());
    let mut out = String::from("step,token");
    for i in 0..n {
        out.push_str(&format!(",pos{i}"));
    }
    out.push('\n');
    for (t, row) in decoded.attention.iter().enumerate() {
        let tok = decoded.tokens.get(t).copied().unwrap_or(END);
        let label = match tok {
            END => "<END>".to_string(),
            PAD => "<PAD>".to_string(),
            GO => "<GO>".to_string(),
            other => vocab
                .char_at(other)
                .map_or_else(|| "?".into(), |c| csv_field(&c.to_string())),
        };
        out.push_str(&format!("{t},{label}"));
        for w in row {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
