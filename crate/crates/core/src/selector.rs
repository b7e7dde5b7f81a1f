//! Transformer-encoder selector: maps a candidate pool to a per-candidate
//! keep/discard policy and a per-candidate state value.
//!
//! Each candidate becomes one token: its feature row concatenated with the
//! attribute vector of the class it claims, projected to `d_model`, plus the
//! sinusoidal encoding of its generation position. The tokens pass through
//! post-norm encoder layers (multi-head self-attention and a feed-forward
//! chain, each wrapped in a residual connection and layer normalisation),
//! then a linear policy head (column 0 = discard, column 1 = select) and a
//! linear value head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore, Tape, Var};

pub const DISCARD: usize = 0;
pub const SELECT: usize = 1;

/// Synthetic candidates awaiting keep/discard decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    features: Matrix,
    conditioning: Matrix,
    class_labels: Vec<usize>,
    generation_index: Vec<usize>,
    corrupted: Vec<bool>,
}

impl CandidatePool {
    /// `conditioning` holds, per candidate, the attribute vector of its
    /// claimed class. `corrupted` is generator ground truth and is never read
    /// by the selector.
    pub fn new(
        features: Matrix,
        conditioning: Matrix,
        class_labels: Vec<usize>,
        generation_index: Vec<usize>,
        corrupted: Vec<bool>,
    ) -> Result<Self> {
        let n = features.rows();
        if conditioning.rows() != n {
            return Err(Error::shape("candidate_pool", features.shape(), conditioning.shape()));
        }
        for (what, len) in [
            ("class_labels", class_labels.len()),
            ("generation_index", generation_index.len()),
            ("corrupted", corrupted.len()),
        ] {
            if len != n {
                return Err(Error::Input(format!("{what} has {len} entries for {n} candidates")));
            }
        }
        let mut seen = vec![false; n];
        for &g in &generation_index {
            if g >= n || seen[g] {
                return Err(Error::Input(format!(
                    "generation_index is not a permutation of 0..{n}"
                )));
            }
            seen[g] = true;
        }
        Ok(Self {
            features,
            conditioning,
            class_labels,
            generation_index,
            corrupted,
        })
    }

    pub fn empty(feature_dim: usize, cond_dim: usize) -> Self {
        Self {
            features: Matrix::zeros(0, feature_dim),
            conditioning: Matrix::zeros(0, cond_dim),
            class_labels: Vec::new(),
            generation_index: Vec::new(),
            corrupted: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn conditioning(&self) -> &Matrix {
        &self.conditioning
    }

    pub fn class_labels(&self) -> &[usize] {
        &self.class_labels
    }

    pub fn generation_index(&self) -> &[usize] {
        &self.generation_index
    }

    /// Generator ground truth: which candidates were deliberately corrupted.
    pub fn corruption_truth(&self) -> &[bool] {
        &self.corrupted
    }

    /// Keeps the rows where `keep` is true, in their original order.
    /// Generation positions are re-ranked to stay a permutation.
    pub fn subset(&self, keep: &[bool]) -> Result<CandidatePool> {
        if keep.len() != self.len() {
            return Err(Error::shape("subset", (self.len(), 1), (keep.len(), 1)));
        }
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        self.take_rows(&rows)
    }

    /// Builds a pool from the given rows, in the given order.
    pub fn take_rows(&self, rows: &[usize]) -> Result<CandidatePool> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::Index(format!("row {bad} out of range for {} candidates", self.len())));
        }
        let picked_gen: Vec<usize> = rows.iter().map(|&r| self.generation_index[r]).collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&i| picked_gen[i]);
        let mut rank = vec![0; rows.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        Ok(CandidatePool {
            features: self.features.select_rows(rows),
            conditioning: self.conditioning.select_rows(rows),
            class_labels: rows.iter().map(|&r| self.class_labels[r]).collect(),
            generation_index: rank,
            corrupted: rows.iter().map(|&r| self.corrupted[r]).collect(),
        })
    }

    /// Concatenates pools; generation order of `b` follows that of `a`.
    pub fn concat(parts: &[CandidatePool]) -> Result<CandidatePool> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("cannot concatenate zero pools".into()))?;
        let (fd, cd) = (first.features.cols(), first.conditioning.cols());
        let feats: Vec<&Matrix> = parts.iter().map(|p| &p.features).collect();
        let conds: Vec<&Matrix> = parts.iter().map(|p| &p.conditioning).collect();
        let mut generation_index = Vec::new();
        let mut offset = 0;
        for p in parts {
            generation_index.extend(p.generation_index.iter().map(|g| g + offset));
            offset += p.len();
        }
        Ok(CandidatePool {
            features: Matrix::vstack(&feats, fd)?,
            conditioning: Matrix::vstack(&conds, cd)?,
            class_labels: parts.iter().flat_map(|p| p.class_labels.iter().copied()).collect(),
            generation_index,
            corrupted: parts.iter().flat_map(|p| p.corrupted.iter().copied()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub feature_dim: usize,
    pub cond_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Number of affine maps in each feed-forward chain.
    pub ff_depth: usize,
}

impl SelectorConfig {
    pub fn new(feature_dim: usize, cond_dim: usize) -> Self {
        Self {
            feature_dim,
            cond_dim,
            d_model: 64,
            layers: 8,
            heads: 8,
            ff_hidden: 128,
            ff_depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(
                "selector.heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::config("selector.d_model", "must be even and positive"));
        }
        if self.ff_depth == 0 {
            return Err(Error::config("selector.ff_depth", "need at least one affine map"));
        }
        if self.ff_depth > 1 && self.ff_hidden == 0 {
            return Err(Error::config("selector.ff_hidden", "must be positive"));
        }
        if self.feature_dim + self.cond_dim == 0 {
            return Err(Error::config("selector.feature_dim", "token width is zero"));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    fn ff_widths(&self) -> Vec<usize> {
        let mut w = vec![self.d_model];
        w.extend(std::iter::repeat(self.ff_hidden).take(self.ff_depth - 1));
        w.push(self.d_model);
        w
    }
}

/// Parameter handles for one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// Column block `i·d_k..(i+1)·d_k` of `wq`/`wk`/`wv` is head `i`'s projection.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff: Vec<(ParamId, ParamId)>,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    embed_w: ParamId,
    embed_b: ParamId,
    layers: Vec<LayerParams>,
    policy_w: ParamId,
    policy_b: ParamId,
    value_w: ParamId,
    value_b: ParamId,
}

/// Selector weights plus their architecture.
#[derive(Debug, Clone)]
pub struct SelectorParams {
    config: SelectorConfig,
    store: ParamStore,
    layout: Layout,
}

impl PartialEq for SelectorParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.store == other.store
    }
}

impl Serialize for SelectorParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (&self.config, &self.store).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SelectorParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (config, store) = <(SelectorConfig, ParamStore)>::deserialize(d)?;
        SelectorParams::from_parts(config, store).map_err(serde::de::Error::custom)
    }
}

fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl SelectorParams {
    /// Uniform `[−1/√fan_in, 1/√fan_in]` initialisation; layer-norm gains 1, biases 0.
    pub fn init<R: Rng + ?Sized>(config: SelectorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let d_in = config.feature_dim + config.cond_dim;
        let mut store = ParamStore::new();
        store.register("embed.w", uniform_fan_in(rng, d_in, d, d_in));
        store.register("embed.b", uniform_fan_in(rng, 1, d, d_in));
        let widths = config.ff_widths();
        for l in 0..config.layers {
            for name in ["wq", "wk", "wv", "wo"] {
                store.register(format!("layer{l}.{name}"), uniform_fan_in(rng, d, d, d));
            }
            store.register(format!("layer{l}.ln1.gain"), Matrix::filled(1, d, 1.0));
            store.register(format!("layer{l}.ln1.bias"), Matrix::zeros(1, d));
            for (j, pair) in widths.windows(2).enumerate() {
                store.register(format!("layer{l}.ff{j}.w"), uniform_fan_in(rng, pair[0], pair[1], pair[0]));
                store.register(format!("layer{l}.ff{j}.b"), uniform_fan_in(rng, 1, pair[1], pair[0]));
            }
            store.register(format!("layer{l}.ln2.gain"), Matrix::filled(1, d, 1.0));
            store.register(format!("layer{l}.ln2.bias"), Matrix::zeros(1, d));
        }
        store.register("policy.w", uniform_fan_in(rng, d, 2, d));
        store.register("policy.b", uniform_fan_in(rng, 1, 2, d));
        store.register("value.w", uniform_fan_in(rng, d, 1, d));
        store.register("value.b", uniform_fan_in(rng, 1, 1, d));
        Self::from_parts(config, store)
    }

    /// Reassembles parameters, checking that every expected tensor exists
    /// with the right shape.
    pub fn from_parts(config: SelectorConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let d_in = config.feature_dim + config.cond_dim;
        let lookup = |name: &str, shape: (usize, usize)| -> Result<ParamId> {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Input(format!("selector parameter `{name}` missing")))?;
            if store.get(id).shape() != shape {
                return Err(Error::shape("selector_params", store.get(id).shape(), shape));
            }
            Ok(id)
        };
        let widths = config.ff_widths();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            let mut ff = Vec::new();
            for (j, pair) in widths.windows(2).enumerate() {
                ff.push((
                    lookup(&p(&format!("ff{j}.w")), (pair[0], pair[1]))?,
                    lookup(&p(&format!("ff{j}.b")), (1, pair[1]))?,
                ));
            }
            layers.push(LayerParams {
                wq: lookup(&p("wq"), (d, d))?,
                wk: lookup(&p("wk"), (d, d))?,
                wv: lookup(&p("wv"), (d, d))?,
                wo: lookup(&p("wo"), (d, d))?,
                ln1_gain: lookup(&p("ln1.gain"), (1, d))?,
                ln1_bias: lookup(&p("ln1.bias"), (1, d))?,
                ff,
                ln2_gain: lookup(&p("ln2.gain"), (1, d))?,
                ln2_bias: lookup(&p("ln2.bias"), (1, d))?,
            });
        }
        let layout = Layout {
            embed_w: lookup("embed.w", (d_in, d))?,
            embed_b: lookup("embed.b", (1, d))?,
            layers,
            policy_w: lookup("policy.w", (d, 2))?,
            policy_b: lookup("policy.b", (1, 2))?,
            value_w: lookup("value.w", (d, 1))?,
            value_b: lookup("value.b", (1, 1))?,
        };
        Ok(Self { config, store, layout })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layer(&self, l: usize) -> &LayerParams {
        &self.layout.layers[l]
    }

    pub fn value_head(&self) -> (ParamId, ParamId) {
        (self.layout.value_w, self.layout.value_b)
    }

    /// Zeroes the value-head weights and sets its bias, so every candidate
    /// starts with the same baseline estimate.
    pub fn reset_value_head(&mut self, baseline: f64) {
        let (w, b) = self.value_head();
        let w = self.store.get_mut(w);
        *w = Matrix::zeros(w.rows(), w.cols());
        *self.store.get_mut(b) = Matrix::filled(1, 1, baseline);
    }

    pub fn policy_head(&self) -> (ParamId, ParamId) {
        (self.layout.policy_w, self.layout.policy_b)
    }

    /// Replaces the parameter store (same layout), e.g. after an optimiser step.
    pub fn with_store(&self, store: ParamStore) -> Result<Self> {
        Self::from_parts(self.config, store)
    }

    fn check_pool(&self, pool: &CandidatePool) -> Result<()> {
        if pool.is_empty() {
            return Err(Error::Input("selector forward on an empty pool".into()));
        }
        if pool.features().cols() != self.config.feature_dim || pool.conditioning().cols() != self.config.cond_dim {
            return Err(Error::shape(
                "selector_forward",
                (pool.features().cols(), pool.conditioning().cols()),
                (self.config.feature_dim, self.config.cond_dim),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`, which must be built over
    /// [`SelectorParams::store`] (or a store with the same layout).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        pool: &CandidatePool,
        mut trace: Option<&mut Vec<Matrix>>,
    ) -> Result<ForwardVars> {
        self.check_pool(pool)?;
        let d = self.config.d_model;
        let tokens = Matrix::hstack(&[pool.features(), pool.conditioning()])?;
        let tokens = tape.constant(tokens);
        let x = tape.linear(tokens, self.layout.embed_w, self.layout.embed_b)?;
        let pe = positional_encoding(pool.len(), d)?.select_rows(pool.generation_index());
        let mut x = tape.add_const(x, &pe)?;
        for layer in &self.layout.layers {
            x = encoder_layer(tape, x, layer, self.config.heads, trace.as_deref_mut())?;
        }
        let logits = tape.linear(x, self.layout.policy_w, self.layout.policy_b)?;
        let log_probs = tape.log_softmax_rows(logits);
        let values = tape.linear(x, self.layout.value_w, self.layout.value_b)?;
        Ok(ForwardVars {
            encoded: x,
            log_probs,
            values,
        })
    }

    /// Inference-only forward pass.
    pub fn forward(&self, pool: &CandidatePool) -> Result<SelectorOutput> {
        let mut tape = Tape::new(&self.store);
        let vars = self.forward_on_tape(&mut tape, pool, None)?;
        Ok(SelectorOutput::from_tape(&tape, &vars))
    }

    /// Forward pass that also returns the encoder output and every attention
    /// weight matrix, ordered layer-major then head.
    pub fn forward_traced(&self, pool: &CandidatePool) -> Result<(SelectorOutput, Matrix, Vec<Matrix>)> {
        let mut tape = Tape::new(&self.store);
        let mut trace = Vec::new();
        let vars = self.forward_on_tape(&mut tape, pool, Some(&mut trace))?;
        let out = SelectorOutput::from_tape(&tape, &vars);
        Ok((out, tape.value(vars.encoded).clone(), trace))
    }
}

/// Tape handles produced by [`SelectorParams::forward_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub encoded: Var,
    /// `N × 2` log-probabilities.
    pub log_probs: Var,
    /// `N × 1` state values.
    pub values: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorOutput {
    pub action_probs: Matrix,
    pub values: Vec<f64>,
}

impl SelectorOutput {
    fn from_tape(tape: &Tape, vars: &ForwardVars) -> Self {
        Self {
            action_probs: tape.value(vars.log_probs).map(f64::exp),
            values: tape.value(vars.values).data().to_vec(),
        }
    }
}

/// Sinusoidal position table: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(n: usize, d_model: usize) -> Result<Matrix> {
    if d_model % 2 != 0 {
        return Err(Error::config("selector.d_model", format!("positional encoding needs an even width, got {d_model}")));
    }
    Ok(Matrix::from_fn(n, d_model, |pos, c| {
        let i2 = (c - c % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d_model as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Scaled dot-product attention on the tape. Returns the output and the
/// attention weights.
pub fn attention_on_tape(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.value(q).shape(), tape.value(k).shape(), tape.value(v).shape());
    if qs.1 != ks.1 {
        return Err(Error::shape("attention", qs, ks));
    }
    if ks.0 != vs.0 {
        return Err(Error::shape("attention", ks, vs));
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (qs.1 as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub output: Matrix,
    pub weights: Matrix,
}

/// `softmax(QKᵀ/√d_k)·V` on plain matrices.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Attention> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let (out, w) = attention_on_tape(&mut tape, qv, kv, vv)?;
    Ok(Attention {
        output: tape.value(out).clone(),
        weights: tape.value(w).clone(),
    })
}

/// `Concat(head_1..head_h)·W^O` with `head_i = Attention(X W^Q_i, X W^K_i, X W^V_i)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    layer: &LayerParams,
    heads: usize,
    mut trace: Option<&mut Vec<Matrix>>,
) -> Result<Var> {
    let d_model = tape.value(x).cols();
    let wq_shape = tape.store().get(layer.wq).shape();
    if wq_shape.0 != d_model || heads == 0 || d_model % heads != 0 {
        return Err(Error::shape("multi_head_attention", tape.value(x).shape(), wq_shape));
    }
    let d_k = d_model / heads;
    let wq = tape.param(layer.wq);
    let wk = tape.param(layer.wk);
    let wv = tape.param(layer.wv);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_k, d_k)?;
        let kh = tape.slice_cols(k, h * d_k, d_k)?;
        let vh = tape.slice_cols(v, h * d_k, d_k)?;
        let (head, weights) = attention_on_tape(tape, qh, kh, vh)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(tape.value(weights).clone());
        }
        outs.push(head);
    }
    let concat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let wo = tape.param(layer.wo);
    tape.matmul(concat, wo)
}

/// Affine chain with ReLU after every map except the last.
pub fn feed_forward(tape: &mut Tape, x: Var, maps: &[(ParamId, ParamId)]) -> Result<Var> {
    let mut h = x;
    for (j, &(w, b)) in maps.iter().enumerate() {
        h = tape.linear(h, w, b)?;
        if j + 1 < maps.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn add_norm(tape: &mut Tape, x: Var, sub: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
    let s = tape.add(x, sub)?;
    let n = tape.layer_norm(s);
    let g = tape.param(gain);
    let b = tape.param(bias);
    let scaled = tape.mul_row(n, g)?;
    tape.add_row(scaled, b)
}

pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    layer: &LayerParams,
    heads: usize,
    trace: Option<&mut Vec<Matrix>>,
) -> Result<Var> {
    let attn = multi_head_attention(tape, x, layer, heads, trace)?;
    let x = add_norm(tape, x, attn, layer.ln1_gain, layer.ln1_bias)?;
    let ff = feed_forward(tape, x, &layer.ff)?;
    add_norm(tape, x, ff, layer.ln2_gain, layer.ln2_bias)
}

/// Per-candidate decisions with the log-probability of each taken action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub actions: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

impl ActionVector {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn selected_count(&self) -> usize {
        self.actions.iter().filter(|&&a| a).count()
    }

    /// Action indices in policy-column convention.
    pub fn action_columns(&self) -> Vec<usize> {
        self.actions.iter().map(|&a| if a { SELECT } else { DISCARD }).collect()
    }

    /// Wraps externally chosen decisions, scoring them under `probs`.
    pub fn forced(actions: Vec<bool>, probs: &Matrix, values: &[f64]) -> Result<Self> {
        check_probs(probs)?;
        if actions.len() != probs.rows() || values.len() != probs.rows() {
            return Err(Error::shape("forced_actions", probs.shape(), (actions.len(), values.len())));
        }
        let log_probs = actions
            .iter()
            .enumerate()
            .map(|(i, &a)| log_prob_of(probs, i, a))
            .collect();
        Ok(Self {
            actions,
            log_probs,
            values: values.to_vec(),
        })
    }
}

fn log_prob_of(probs: &Matrix, row: usize, select: bool) -> f64 {
    let p = probs.get(row, if select { SELECT } else { DISCARD });
    p.max(f64::MIN_POSITIVE).ln().min(0.0)
}

fn check_probs(probs: &Matrix) -> Result<()> {
    if probs.cols() != 2 {
        return Err(Error::shape("action_probs", probs.shape(), (probs.rows(), 2)));
    }
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let ok = row.iter().all(|&p| p.is_finite() && (0.0..=1.0).contains(&p))
            && (row[0] + row[1] - 1.0).abs() <= 1e-6;
        if !ok {
            return Err(Error::Numeric(format!("row {r} is not a distribution: {row:?}")));
        }
    }
    Ok(())
}

/// Draws each candidate's action independently from its two-way distribution.
pub fn sample_actions<R: Rng + ?Sized>(probs: &Matrix, values: &[f64], rng: &mut R) -> Result<ActionVector> {
    check_probs(probs)?;
    let actions = (0..probs.rows())
        .map(|r| rng.random::<f64>() < probs.get(r, SELECT))
        .collect();
    ActionVector::forced(actions, probs, values)
}

/// Selects every candidate whose select-probability exceeds one half.
pub fn greedy_actions(probs: &Matrix, values: &[f64]) -> Result<ActionVector> {
    check_probs(probs)?;
    let actions = (0..probs.rows()).map(|r| probs.get(r, SELECT) > 0.5).collect();
    ActionVector::forced(actions, probs, values)
}

/// Keeps the candidates whose action is 1, preserving order.
pub fn apply_selection(pool: &CandidatePool, actions: &ActionVector) -> Result<CandidatePool> {
    pool.subset(&actions.actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn small_config() -> SelectorConfig {
        SelectorConfig {
            feature_dim: 3,
            cond_dim: 2,
            d_model: 8,
            layers: 2,
            heads: 2,
            ff_hidden: 12,
            ff_depth: 2,
        }
    }

    fn pool(rng: &mut ChaCha8Rng, n: usize) -> CandidatePool {
        let mut gen: Vec<usize> = (0..n).collect();
        gen.reverse();
        CandidatePool::new(
            rand_matrix(rng, n, 3),
            rand_matrix(rng, n, 2),
            (0..n).map(|i| i % 2).collect(),
            gen,
            vec![false; n],
        )
        .unwrap()
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(5, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(pe.get(1, 0), 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(pe.get(1, 0), 0.8415, epsilon = 1e-4);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(positional_encoding(3, 5), Err(Error::Config { .. })));
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_matrix(&mut rng, 3, 4);
        let k = Matrix::from_fn(4, 4, |_, c| c as f64 * 0.3);
        let v = rand_matrix(&mut rng, 4, 2);
        let a = attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let avg = (0..4).map(|i| v.get(i, c)).sum::<f64>() / 4.0;
                assert_abs_diff_eq!(a.output.get(r, c), avg, epsilon = 1e-12);
            }
            for c in 0..4 {
                assert_abs_diff_eq!(a.weights.get(r, c), 0.25, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn attention_single_candidate_returns_value_row() {
        let q = Matrix::row_vector(&[0.3, -1.2]);
        let k = Matrix::row_vector(&[2.0, 0.5]);
        let v = Matrix::row_vector(&[7.0, -3.0, 0.25]);
        let a = attention(&q, &k, &v).unwrap();
        assert_eq!(a.output, v);
    }

    #[test]
    fn attention_matches_explicit_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_matrix(&mut rng, 3, 4);
        let k = rand_matrix(&mut rng, 3, 4);
        let v = rand_matrix(&mut rng, 3, 2);
        let a = attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..3).map(|j| scores[j].exp() / z * v.get(j, c)).sum();
                assert_abs_diff_eq!(a.output.get(i, c), want, epsilon = 1e-12);
            }
        }
        assert!(matches!(attention(&q, &rand_matrix(&mut rng, 3, 5), &v), Err(Error::Shape { .. })));
        assert!(matches!(attention(&q, &k, &rand_matrix(&mut rng, 2, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn multi_head_matches_per_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = small_config();
        let params = SelectorParams::init(cfg, &mut rng).unwrap();
        let layer = params.layer(0).clone();
        let x = rand_matrix(&mut rng, 4, 8);
        let store = params.store();
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.clone());
        let out = multi_head_attention(&mut tape, xv, &layer, 2, None).unwrap();
        let got = tape.value(out).clone();
        assert_eq!(got.shape(), (4, 8));

        let mut heads = Vec::new();
        for h in 0..2 {
            let block = |id: ParamId| store.get(id).slice_cols(h * 4, 4).unwrap();
            let q = crate::numerics::matmul(&x, &block(layer.wq)).unwrap();
            let k = crate::numerics::matmul(&x, &block(layer.wk)).unwrap();
            let v = crate::numerics::matmul(&x, &block(layer.wv)).unwrap();
            heads.push(attention(&q, &k, &v).unwrap().output);
        }
        let cat = Matrix::hstack(&[&heads[0], &heads[1]]).unwrap();
        let want = crate::numerics::matmul(&cat, store.get(layer.wo)).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_head_reduces_to_attention_then_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = SelectorConfig { heads: 1, ..small_config() };
        let params = SelectorParams::init(cfg, &mut rng).unwrap();
        let layer = params.layer(1).clone();
        let x = rand_matrix(&mut rng, 5, 8);
        let s = params.store();
        let mut tape = Tape::new(s);
        let xv = tape.constant(x.clone());
        let out = multi_head_attention(&mut tape, xv, &layer, 1, None).unwrap();
        let mm = crate::numerics::matmul;
        let a = attention(&mm(&x, s.get(layer.wq)).unwrap(), &mm(&x, s.get(layer.wk)).unwrap(), &mm(&x, s.get(layer.wv)).unwrap()).unwrap();
        assert_eq!(tape.value(out), &mm(&a.output, s.get(layer.wo)).unwrap());
    }

    #[test]
    fn feed_forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_matrix(&mut rng, 3, 4);
        let mut store = ParamStore::new();
        let zw = store.register("zw", Matrix::zeros(4, 4));
        let zb = store.register("zb", Matrix::zeros(1, 4));
        let iw = store.register("iw", Matrix::identity(4));
        let w1 = store.register("w1", rand_matrix(&mut rng, 4, 6));
        let b1 = store.register("b1", rand_matrix(&mut rng, 1, 6));
        let w2 = store.register("w2", rand_matrix(&mut rng, 6, 4));
        let b2 = store.register("b2", rand_matrix(&mut rng, 1, 4));
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone());
        let zero = feed_forward(&mut t, xv, &[(zw, zb), (zw, zb)]).unwrap();
        assert_eq!(t.value(zero), &Matrix::zeros(3, 4));
        let ident = feed_forward(&mut t, xv, &[(iw, zb)]).unwrap();
        assert_eq!(t.value(ident), &x);
        let two = feed_forward(&mut t, xv, &[(w1, b1), (w2, b2)]).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let mut want = store.get(b2).get(0, c);
                for j in 0..6 {
                    let mut h = store.get(b1).get(0, j);
                    for i in 0..4 {
                        h += x.get(r, i) * store.get(w1).get(i, j);
                    }
                    want += h.max(0.0) * store.get(w2).get(j, c);
                }
                assert_abs_diff_eq!(t.value(two).get(r, c), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn forward_rows_are_distributions_and_single_candidate_works() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = SelectorParams::init(small_config(), &mut rng).unwrap();
        for n in [1usize, 2, 7] {
            let p = pool(&mut rng, n);
            let out = params.forward(&p).unwrap();
            assert_eq!(out.action_probs.shape(), (n, 2));
            assert_eq!(out.values.len(), n);
            for r in 0..n {
                let row = out.action_probs.row(r);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
            }
        }
        let bad = CandidatePool::new(Matrix::zeros(2, 4), Matrix::zeros(2, 2), vec![0, 0], vec![0, 1], vec![false; 2]).unwrap();
        assert!(matches!(params.forward(&bad), Err(Error::Shape { .. })));
        assert!(params.forward(&CandidatePool::empty(3, 2)).is_err());
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let params = SelectorParams::init(small_config(), &mut rng).unwrap();
        let p = pool(&mut rng, 6);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let q = p.take_rows(&perm).unwrap();
        // take_rows re-ranks positions; restore the original ones to move
        // (row, label, position) together.
        let q = CandidatePool::new(
            q.features().clone(),
            q.conditioning().clone(),
            q.class_labels().to_vec(),
            perm.iter().map(|&i| p.generation_index()[i]).collect(),
            q.corruption_truth().to_vec(),
        )
        .unwrap();
        let (a, enc_a, _) = params.forward_traced(&p).unwrap();
        let (b, enc_b, _) = params.forward_traced(&q).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..2 {
                assert_abs_diff_eq!(b.action_probs.get(new_row, c), a.action_probs.get(old_row, c), epsilon = 1e-12);
            }
            assert_abs_diff_eq!(b.values[new_row], a.values[old_row], epsilon = 1e-12);
            for c in 0..8 {
                assert_abs_diff_eq!(enc_b.get(new_row, c), enc_a.get(old_row, c), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sample_actions_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let certain = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let a = sample_actions(&certain, &[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(a.actions, vec![true, false]);
        assert_eq!(a.log_probs, vec![0.0, 0.0]);

        let half = Matrix::filled(64, 2, 0.5);
        let draw = |seed| sample_actions(&half, &[0.0; 64], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(42), draw(42));
        assert!(draw(42).log_probs.iter().all(|&l| l <= 0.0));

        let bad = Matrix::from_rows(&[[0.7, 0.7]]).unwrap();
        assert!(matches!(sample_actions(&bad, &[0.0], &mut rng), Err(Error::Numeric(_))));
    }

    #[test]
    fn sample_rate_matches_probability() {
        let n = 100_000;
        let probs = Matrix::from_fn(n, 2, |_, c| if c == SELECT { 0.7 } else { 0.3 });
        let a = sample_actions(&probs, &vec![0.0; n], &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let rate = a.selected_count() as f64 / n as f64;
        assert!((rate - 0.7).abs() < 0.01, "{rate}");
    }

    #[test]
    fn apply_selection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = pool(&mut rng, 3);
        let probs = Matrix::filled(3, 2, 0.5);
        let keep_all = ActionVector::forced(vec![true; 3], &probs, &[0.0; 3]).unwrap();
        assert_eq!(apply_selection(&p, &keep_all).unwrap(), p);
        let none = ActionVector::forced(vec![false; 3], &probs, &[0.0; 3]).unwrap();
        assert!(apply_selection(&p, &none).unwrap().is_empty());
        let some = ActionVector::forced(vec![true, false, true], &probs, &[0.0; 3]).unwrap();
        let s = apply_selection(&p, &some).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.features().row(0), p.features().row(0));
        assert_eq!(s.features().row(1), p.features().row(2));
        assert_eq!(s.class_labels(), &[p.class_labels()[0], p.class_labels()[2]]);
        let short = ActionVector::forced(vec![true; 2], &Matrix::filled(2, 2, 0.5), &[0.0; 2]).unwrap();
        assert!(matches!(apply_selection(&p, &short), Err(Error::Shape { .. })));
    }

    #[test]
    fn params_roundtrip_and_layout_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let params = SelectorParams::init(small_config(), &mut rng).unwrap();
        let json = serde_json::to_string(&params).unwrap();
        let back: SelectorParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, params);
        let bad = SelectorConfig { heads: 3, ..small_config() };
        assert!(matches!(SelectorParams::init(bad, &mut rng), Err(Error::Config { .. })));
        let default = SelectorConfig::new(16, 8);
        assert_eq!((default.layers, default.heads, default.d_model), (8, 8, 64));
    }
}
