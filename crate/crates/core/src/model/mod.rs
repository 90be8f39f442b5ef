//! CTR predictor composed from the retrieval and interest-modeling stages.
//!
//! For one sample the forward pass is:
//!
//! 1. retrieve up to `k` behaviors with the configured strategy;
//! 2. recompute the multimodal similarity `r_i` of each retrieved behavior to
//!    the target (whatever the strategy ranked by);
//! 3. build the tier histogram and the SA-TA interest vector, as enabled by
//!    the ESU variant;
//! 4. feed `[histogram, u_id, e_target, context embeddings]` through an MLP
//!    tower whose single output logit is clamped to ±30 and squashed.
//!
//! Everything is `f64`. Multimodal embeddings are read-only inputs and never
//! receive gradients.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::embedding_store::{EmbeddingTable, LookupMode};
use crate::error::{MuseError, Result};
use crate::esu::{self, AttentionGrads, AttentionParams, SaTaTrace};
use crate::gsu::{multimodal_scores_at, IdVectorSource, RetrievalRequest, Retriever, RetrieverRegistry};
use crate::tensor::Matrix;
use crate::ItemId;

pub mod ablation;
pub mod checkpoint;
mod train;

pub use train::{
    mean_loss, predict_batch, prepare_retrievals, train, Adam, PredictionBatch, StepLog, TrainConfig,
    TrainingLog,
};

/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Number of categorical context fields (user age, gender, city, province;
/// item category, city, province).
pub const CONTEXT_FIELDS: usize = 7;
pub const CONTEXT_NAMES: [&str; CONTEXT_FIELDS] = [
    "age",
    "gender",
    "city",
    "province",
    "category",
    "item_city",
    "item_province",
];

/// Which interest-modeling paths feed the tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EsuVariant {
    /// Histogram plus semantic-aware attention with learnable γ.
    #[serde(rename = "sa_ta+simtier")]
    SaTaSimTier,
    /// Plain target attention (γ fixed at (1, 0, 0)); histogram slot zeroed.
    #[serde(rename = "ta_only")]
    TaOnly,
    /// Histogram only; attention slot zeroed.
    #[serde(rename = "simtier_only")]
    SimTierOnly,
    /// Histogram plus plain target attention.
    #[serde(rename = "ta+simtier")]
    TaSimTier,
}

impl EsuVariant {
    pub const ALL: [EsuVariant; 4] = [
        EsuVariant::SaTaSimTier,
        EsuVariant::TaOnly,
        EsuVariant::SimTierOnly,
        EsuVariant::TaSimTier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EsuVariant::SaTaSimTier => "sa_ta+simtier",
            EsuVariant::TaOnly => "ta_only",
            EsuVariant::SimTierOnly => "simtier_only",
            EsuVariant::TaSimTier => "ta+simtier",
        }
    }

    pub fn uses_histogram(self) -> bool {
        !matches!(self, EsuVariant::TaOnly)
    }

    pub fn uses_attention(self) -> bool {
        !matches!(self, EsuVariant::SimTierOnly)
    }

    pub fn learns_gamma(self) -> bool {
        matches!(self, EsuVariant::SaTaSimTier)
    }
}

impl std::fmt::Display for EsuVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EsuVariant {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        EsuVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| MuseError::Config(format!("unknown ESU variant `{s}`")))
    }
}

fn default_gsu() -> String {
    "muse".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Registered retrieval strategy name.
    #[serde(default = "default_gsu")]
    pub gsu: String,
    pub esu: EsuVariant,
    pub k: usize,
    pub n_tiers: usize,
    pub normalize_histogram: bool,
    pub id_dim: usize,
    pub att_dim: usize,
    pub out_dim: usize,
    pub context_dim: usize,
    pub context_buckets: usize,
    pub hidden: Vec<usize>,
    pub lookup: LookupMode,
    /// Keep only this many most recent behaviors before retrieval.
    pub max_sequence: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            gsu: default_gsu(),
            esu: EsuVariant::SaTaSimTier,
            k: crate::gsu::DEFAULT_K,
            n_tiers: esu::DEFAULT_TIERS,
            normalize_histogram: false,
            id_dim: 16,
            att_dim: 16,
            out_dim: 16,
            context_dim: 4,
            context_buckets: 1024,
            hidden: vec![128, 64],
            lookup: LookupMode::Strict,
            max_sequence: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("n_tiers", self.n_tiers),
            ("id_dim", self.id_dim),
            ("att_dim", self.att_dim),
            ("out_dim", self.out_dim),
            ("context_dim", self.context_dim),
            ("context_buckets", self.context_buckets),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(MuseError::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(MuseError::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn context_width(&self) -> usize {
        self.id_dim + CONTEXT_FIELDS * self.context_dim
    }

    /// `N + D_out + context width`.
    pub fn tower_input(&self) -> usize {
        self.n_tiers + self.out_dim + self.context_width()
    }
}

/// Affine layer `y = x W + b`, `W` is `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Item ids in row order of `id_embeddings` (sorted ascending).
    pub item_vocab: Vec<ItemId>,
    item_index: HashMap<ItemId, usize>,
    pub id_embeddings: Matrix,
    /// One `buckets × context_dim` table per context field.
    pub context: Vec<Matrix>,
    pub attention: AttentionParams,
    pub tower: Vec<Dense>,
}

/// Which optimizer group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Dense,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect(),
    )
}

impl ModelParams {
    /// Seeded initialization. ID and context embeddings are uniform in
    /// `±1/sqrt(dim)`; projections and tower weights use Glorot-uniform
    /// bounds; biases start at zero; γ starts at (1, 0, 0).
    pub fn init(config: &ModelConfig, mut vocab: Vec<ItemId>, seed: u64) -> Result<Self> {
        config.validate()?;
        vocab.sort_unstable();
        vocab.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id_bound = 1.0 / (config.id_dim as f64).sqrt();
        let id_embeddings = uniform_matrix(&mut rng, vocab.len(), config.id_dim, id_bound);
        let ctx_bound = 1.0 / (config.context_dim as f64).sqrt();
        let context = (0..CONTEXT_FIELDS)
            .map(|_| uniform_matrix(&mut rng, config.context_buckets, config.context_dim, ctx_bound))
            .collect();
        let glorot = |i: usize, o: usize| (6.0 / (i + o) as f64).sqrt();
        let attention = AttentionParams {
            w_q: uniform_matrix(
                &mut rng,
                config.id_dim,
                config.att_dim,
                glorot(config.id_dim, config.att_dim),
            ),
            w_k: uniform_matrix(
                &mut rng,
                config.id_dim,
                config.att_dim,
                glorot(config.id_dim, config.att_dim),
            ),
            w_v: uniform_matrix(
                &mut rng,
                config.id_dim,
                config.out_dim,
                glorot(config.id_dim, config.out_dim),
            ),
            gamma: [1.0, 0.0, 0.0],
        };
        let mut widths = vec![config.tower_input()];
        widths.extend(&config.hidden);
        widths.push(1);
        let tower = widths
            .windows(2)
            .map(|w| Dense {
                w: uniform_matrix(&mut rng, w[0], w[1], glorot(w[0], w[1])),
                b: vec![0.0; w[1]],
            })
            .collect();
        Ok(ModelParams::from_parts(
            vocab,
            id_embeddings,
            context,
            attention,
            tower,
        ))
    }

    pub fn from_parts(
        item_vocab: Vec<ItemId>,
        id_embeddings: Matrix,
        context: Vec<Matrix>,
        attention: AttentionParams,
        tower: Vec<Dense>,
    ) -> Self {
        let item_index = item_vocab.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        ModelParams {
            item_vocab,
            item_index,
            id_embeddings,
            context,
            attention,
            tower,
        }
    }

    pub fn item_row(&self, id: ItemId) -> Option<usize> {
        self.item_index.get(&id).copied()
    }

    /// Every tensor in a fixed order: `(name, group, values)`.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &[f64])> {
        let mut out: Vec<(String, ParamGroup, &[f64])> = vec![(
            "id_embeddings".into(),
            ParamGroup::Embedding,
            &self.id_embeddings.data,
        )];
        for (name, m) in CONTEXT_NAMES.iter().zip(&self.context) {
            out.push((format!("context.{name}"), ParamGroup::Embedding, &m.data));
        }
        out.push((
            "attention.w_q".into(),
            ParamGroup::Dense,
            &self.attention.w_q.data,
        ));
        out.push((
            "attention.w_k".into(),
            ParamGroup::Dense,
            &self.attention.w_k.data,
        ));
        out.push((
            "attention.w_v".into(),
            ParamGroup::Dense,
            &self.attention.w_v.data,
        ));
        out.push(("attention.gamma".into(), ParamGroup::Dense, &self.attention.gamma));
        for (i, layer) in self.tower.iter().enumerate() {
            out.push((format!("tower.{i}.w"), ParamGroup::Dense, &layer.w.data));
            out.push((format!("tower.{i}.b"), ParamGroup::Dense, &layer.b));
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out: Vec<(ParamGroup, &mut [f64])> =
            vec![(ParamGroup::Embedding, &mut self.id_embeddings.data)];
        for m in &mut self.context {
            out.push((ParamGroup::Embedding, &mut m.data));
        }
        out.push((ParamGroup::Dense, &mut self.attention.w_q.data));
        out.push((ParamGroup::Dense, &mut self.attention.w_k.data));
        out.push((ParamGroup::Dense, &mut self.attention.w_v.data));
        out.push((ParamGroup::Dense, &mut self.attention.gamma));
        for layer in &mut self.tower {
            out.push((ParamGroup::Dense, &mut layer.w.data));
            out.push((ParamGroup::Dense, &mut layer.b));
        }
        out
    }

    /// Shapes in [`ModelParams::tensors`] order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![self.id_embeddings.rows, self.id_embeddings.cols]];
        out.extend(self.context.iter().map(|m| vec![m.rows, m.cols]));
        let a = &self.attention;
        out.push(vec![a.w_q.rows, a.w_q.cols]);
        out.push(vec![a.w_k.rows, a.w_k.cols]);
        out.push(vec![a.w_v.rows, a.w_v.cols]);
        out.push(vec![3]);
        for layer in &self.tower {
            out.push(vec![layer.w.rows, layer.w.cols]);
            out.push(vec![layer.b.len()]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }
}

impl IdVectorSource for ModelParams {
    fn id_vector(&self, id: ItemId) -> Option<&[f64]> {
        self.item_row(id).map(|r| self.id_embeddings.row(r))
    }
}

/// Gradient buffers shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub id_embeddings: Matrix,
    pub context: Vec<Matrix>,
    pub attention: AttentionGrads,
    pub tower: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Gradients {
            id_embeddings: Matrix::zeros(p.id_embeddings.rows, p.id_embeddings.cols),
            context: p.context.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect(),
            attention: AttentionGrads::zeros_like(&p.attention),
            tower: p
                .tower
                .iter()
                .map(|d| Dense {
                    w: Matrix::zeros(d.w.rows, d.w.cols),
                    b: vec![0.0; d.b.len()],
                })
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.id_embeddings.data];
        out.extend(self.context.iter().map(|m| m.data.as_slice()));
        out.push(&self.attention.w_q.data);
        out.push(&self.attention.w_k.data);
        out.push(&self.attention.w_v.data);
        out.push(&self.attention.gamma);
        for d in &self.tower {
            out.push(&d.w.data);
            out.push(&d.b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.id_embeddings.data];
        out.extend(self.context.iter_mut().map(|m| m.data.as_mut_slice()));
        out.push(&mut self.attention.w_q.data);
        out.push(&mut self.attention.w_k.data);
        out.push(&mut self.attention.w_v.data);
        out.push(&mut self.attention.gamma);
        for d in &mut self.tower {
            out.push(&mut d.w.data);
            out.push(&mut d.b);
        }
        out
    }
}

/// Retrieved positions with their multimodal similarities to the target.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Retrieval {
    pub indices: Vec<u32>,
    pub similarities: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub behavior_rows: Vec<Option<usize>>,
    pub target_row: Option<usize>,
    pub behaviors: Vec<f64>,
    pub target: Vec<f64>,
    pub attention: Option<SaTaTrace>,
    pub context_rows: [usize; CONTEXT_FIELDS],
    /// Input of every tower layer; `layer_inputs[0]` is `[u_l, context]`.
    pub layer_inputs: Vec<Vec<f64>>,
    pub raw_logit: f64,
    pub logit: f64,
    pub probability: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy `−[y ln p + (1 − y) ln(1 − p)]`.
pub fn bce_loss(p: f64, label: bool) -> f64 {
    if label {
        -(-(1.0 - p)).ln_1p()
    } else {
        -(-p).ln_1p()
    }
}

/// Binary cross-entropy from a logit, stable for large magnitudes.
pub fn bce_with_logit(z: f64, label: bool) -> f64 {
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    if label {
        softplus(-z)
    } else {
        softplus(z)
    }
}

fn context_keys(sample: &Sample) -> [u32; CONTEXT_FIELDS] {
    let u = &sample.user_features;
    let t = &sample.target;
    [
        u.age, u.gender, u.city, u.province, t.category, t.city, t.province,
    ]
}

/// A configured model: hyper-parameters, parameters and the bound retrieval
/// strategy.
#[derive(Clone)]
pub struct CtrModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    retriever: Arc<dyn Retriever>,
}

impl std::fmt::Debug for CtrModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CtrModel")
            .field("config", &self.config)
            .field("retriever", &self.retriever.name())
            .finish()
    }
}

impl CtrModel {
    /// Fresh model whose ID vocabulary is the multimodal table's item set.
    pub fn new(
        config: ModelConfig,
        registry: &RetrieverRegistry,
        table: &EmbeddingTable,
        seed: u64,
    ) -> Result<Self> {
        let params = ModelParams::init(&config, table.ids().to_vec(), seed)?;
        Self::with_params(config, registry, params)
    }

    pub fn with_params(
        config: ModelConfig,
        registry: &RetrieverRegistry,
        params: ModelParams,
    ) -> Result<Self> {
        config.validate()?;
        let retriever = registry.get(&config.gsu)?;
        let model = CtrModel {
            config,
            params,
            retriever,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let p = &self.params;
        p.attention.validate()?;
        let ok = p.id_embeddings.cols == c.id_dim
            && p.id_embeddings.rows == p.item_vocab.len()
            && p.attention.id_dim() == c.id_dim
            && p.attention.att_dim() == c.att_dim
            && p.attention.out_dim() == c.out_dim
            && p.context.len() == CONTEXT_FIELDS
            && p.context
                .iter()
                .all(|m| m.rows == c.context_buckets && m.cols == c.context_dim)
            && p.tower.len() == c.hidden.len() + 1
            && p.tower.first().is_some_and(|d| d.w.rows == c.tower_input())
            && p.tower.last().is_some_and(|d| d.w.cols == 1)
            && p.tower.windows(2).all(|w| w[0].w.cols == w[1].w.rows)
            && p.tower.iter().all(|d| d.b.len() == d.w.cols);
        if ok {
            Ok(())
        } else {
            Err(MuseError::Shape(
                "model parameters do not match the configuration".into(),
            ))
        }
    }

    pub fn retriever(&self) -> &dyn Retriever {
        self.retriever.as_ref()
    }

    /// Runs the configured retrieval for one sample.
    pub fn retrieve(&self, sample: &Sample, table: &EmbeddingTable) -> Result<Retrieval> {
        let truncated;
        let seq = match self.config.max_sequence {
            Some(max) if sample.sequence.len() > max => {
                truncated = sample.sequence.truncate_recent(max);
                &truncated
            }
            _ => &sample.sequence,
        };
        let offset = sample.sequence.len() - seq.len();
        let req = RetrievalRequest {
            target: sample.target.item,
            target_category: Some(sample.target.category),
            sequence: seq,
            multimodal: table,
            id_vectors: Some(&self.params),
            mode: self.config.lookup,
        };
        let got = self.retriever.retrieve(&req, self.config.k)?;
        let sims = multimodal_scores_at(sample.target.item, seq, &got.indices, table, self.config.lookup)?;
        Ok(Retrieval {
            indices: got.indices.iter().map(|&i| (i + offset) as u32).collect(),
            similarities: sims.0,
        })
    }

    /// Click probability for one sample.
    pub fn forward(&self, sample: &Sample, table: &EmbeddingTable) -> Result<f64> {
        let retrieval = self.retrieve(sample, table)?;
        self.forward_with(sample, &retrieval).map(|t| t.probability)
    }

    /// Forward pass on a precomputed retrieval.
    pub fn forward_with(&self, sample: &Sample, retrieval: &Retrieval) -> Result<ForwardTrace> {
        let c = &self.config;
        let p = &self.params;
        let variant = c.esu;
        let d_id = c.id_dim;

        let mut input = Vec::with_capacity(c.tower_input());
        if variant.uses_histogram() {
            let h = esu::simtier(&retrieval.similarities, c.n_tiers)?;
            input.extend(h.to_reals(c.normalize_histogram));
        } else {
            input.resize(c.n_tiers, 0.0);
        }

        let target_row = p.item_row(sample.target.item);
        let target = match target_row {
            Some(r) => p.id_embeddings.row(r).to_vec(),
            None => vec![0.0; d_id],
        };

        let mut behavior_rows = Vec::new();
        let mut behaviors = Vec::new();
        let mut attention = None;
        if variant.uses_attention() {
            behavior_rows = retrieval
                .indices
                .iter()
                .map(|&i| p.item_row(sample.sequence.items[i as usize]))
                .collect();
            behaviors = Vec::with_capacity(behavior_rows.len() * d_id);
            for row in &behavior_rows {
                match row {
                    Some(r) => behaviors.extend_from_slice(p.id_embeddings.row(*r)),
                    None => behaviors.extend(std::iter::repeat_n(0.0, d_id)),
                }
            }
            let mut att = p.attention.clone();
            if !variant.learns_gamma() {
                att.gamma = [1.0, 0.0, 0.0];
            }
            let trace = esu::sa_ta_forward(&target, &behaviors, &retrieval.similarities, &att, None)?;
            input.extend_from_slice(&trace.output);
            attention = Some(trace);
        } else {
            input.resize(input.len() + c.out_dim, 0.0);
        }

        input.extend_from_slice(&target);
        let keys = context_keys(sample);
        let mut context_rows = [0usize; CONTEXT_FIELDS];
        for (f, key) in keys.iter().enumerate() {
            let row = *key as usize % c.context_buckets;
            context_rows[f] = row;
            input.extend_from_slice(p.context[f].row(row));
        }
        debug_assert_eq!(input.len(), c.tower_input());

        let mut layer_inputs = vec![input];
        let last = p.tower.len() - 1;
        let mut raw_logit = 0.0;
        for (i, layer) in p.tower.iter().enumerate() {
            let mut out = layer.w.vec_mul(layer_inputs.last().expect("input"));
            for (o, b) in out.iter_mut().zip(&layer.b) {
                *o += b;
            }
            if i == last {
                raw_logit = out[0];
            } else {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                layer_inputs.push(out);
            }
        }
        let logit = raw_logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        Ok(ForwardTrace {
            behavior_rows,
            target_row,
            behaviors,
            target,
            attention,
            context_rows,
            layer_inputs,
            raw_logit,
            logit,
            probability: sigmoid(logit),
        })
    }

    /// Accumulates `scale · ∂loss/∂θ` for one sample into `grads`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        retrieval: &Retrieval,
        label: bool,
        scale: f64,
        grads: &mut Gradients,
    ) {
        let c = &self.config;
        let p = &self.params;
        let clamped = trace.raw_logit.abs() > LOGIT_CLAMP;
        let y = if label { 1.0 } else { 0.0 };
        let d_logit = if clamped {
            0.0
        } else {
            (trace.probability - y) * scale
        };
        if d_logit == 0.0 {
            return;
        }

        // tower, last layer first
        let mut d_out = vec![d_logit];
        for (i, layer) in p.tower.iter().enumerate().rev() {
            let x = &trace.layer_inputs[i];
            let g = &mut grads.tower[i];
            g.w.add_outer(x, &d_out);
            for (gb, d) in g.b.iter_mut().zip(&d_out) {
                *gb += d;
            }
            let mut d_in = vec![0.0; x.len()];
            layer.w.mul_vec_add(&d_out, &mut d_in);
            if i > 0 {
                for (d, a) in d_in.iter_mut().zip(x) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            d_out = d_in;
        }
        let d_input = d_out;

        let n = c.n_tiers;
        let d_u = &d_input[n..n + c.out_dim];
        let mut d_target = d_input[n + c.out_dim..n + c.out_dim + c.id_dim].to_vec();
        let mut offset = n + c.out_dim + c.id_dim;
        for (f, &row) in trace.context_rows.iter().enumerate() {
            let g = grads.context[f].row_mut(row);
            for (gv, d) in g.iter_mut().zip(&d_input[offset..offset + c.context_dim]) {
                *gv += d;
            }
            offset += c.context_dim;
        }

        if let Some(att_trace) = &trace.attention {
            let mut att = p.attention.clone();
            if !c.esu.learns_gamma() {
                att.gamma = [1.0, 0.0, 0.0];
            }
            let gamma_before = grads.attention.gamma;
            let mut d_behaviors = vec![0.0; trace.behaviors.len()];
            esu::sa_ta_backward(
                att_trace,
                &trace.target,
                &trace.behaviors,
                &retrieval.similarities,
                &att,
                d_u,
                &mut grads.attention,
                &mut d_target,
                &mut d_behaviors,
            );
            if !c.esu.learns_gamma() {
                grads.attention.gamma = gamma_before;
            }
            for (row, d) in trace.behavior_rows.iter().zip(d_behaviors.chunks_exact(c.id_dim)) {
                if let Some(r) = row {
                    for (g, v) in grads.id_embeddings.row_mut(*r).iter_mut().zip(d) {
                        *g += v;
                    }
                }
            }
        }
        if let Some(r) = trace.target_row {
            for (g, v) in grads.id_embeddings.row_mut(r).iter_mut().zip(&d_target) {
                *g += v;
            }
        }
    }

    /// Mean loss over `batch` and its gradient. Used by tests and the trainer.
    pub fn loss_and_gradients(&self, batch: &[(&Sample, &Retrieval)], grads: &mut Gradients) -> Result<f64> {
        grads.clear();
        if batch.is_empty() {
            return Ok(0.0);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (sample, retrieval) in batch {
            let trace = self.forward_with(sample, retrieval)?;
            loss += bce_with_logit(trace.logit, sample.label);
            self.backward(&trace, retrieval, sample.label, scale, grads);
        }
        Ok(loss * scale)
    }
}
