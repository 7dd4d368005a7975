//! Model assembly and optimization: classification head, focal loss, the
//! decoupled-weight-decay Adam loop over encoders → tokenizer → fusion →
//! head, prediction with cold-start substitution, and checkpointing.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use crate::encoders::{
    encode_graph_drug, pool_prompts, project_semantic, substitute_unseen, GraphEncoderParams,
    GraphEncoderRefs, PromptPoolerParams, PromptPoolerRefs, SemanticProjectorParams,
    SemanticProjectorRefs,
};
use crate::error::{Error, Result};
use crate::fusion::{
    aggregate_on_tape, attention_block, expert_choice_route, flatten_tokens, gate_scores,
    modality_contribution, AttentionBlockParams, AttentionBlockRefs, ExpertRefs, MoEParams,
    RouteResult, RoutingRecord, TelemetryRow,
};
use crate::kgdata::{
    generate_synthetic, Bundle, Fold, Modality, PairDataset, SynthConfig, TripleChannel,
    MODALITIES,
};
use crate::numkernel::{
    check_scalar_fn, check_scalar_fn_with_eps, derive_seed, op_checks, weighted_scalar,
    CheckReport, KernelRegistry, Mat, ParamBlock, Tape, ValueId,
};
use crate::tokenizer::{
    add_type_embeddings, build_pair_tokens, standard_keys, ChannelSource, ChannelSpec,
    PairMlpParams, PairMlpRefs, PairVariant, TokenSequence, TypeEmbeddingTable,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Floor applied to p_t before the focal-loss logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

// Seed-derivation namespaces, so independent random streams never collide.
const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_NEIGHBOR: u64 = 4;
/// Neighbor-sampling tag for every inference pass; fixed so that a reloaded
/// model reproduces predictions bit-exactly.
const PREDICT_TAG: u64 = u64::MAX;

// ---- variant selectors ----

/// Which semantic (prompt-derived) channels the model carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SemanticChoice {
    /// The selected modalities' semantic channels replace their graph
    /// channels; unselected modalities stay graph-based.
    Replace(Vec<Modality>),
    /// All three graph channels, with bio-relation and substructure semantic
    /// channels appended (the dual-branch configuration).
    Parallel,
}

impl SemanticChoice {
    pub fn key(&self) -> String {
        match self {
            SemanticChoice::Parallel => "parallel".into(),
            SemanticChoice::Replace(set) => {
                if set.is_empty() {
                    "none".into()
                } else if set.len() == MODALITIES.len() {
                    "all".into()
                } else {
                    set.iter().map(|m| m.key()).collect::<Vec<_>>().join("+")
                }
            }
        }
    }

    pub fn from_key(key: &str) -> Result<SemanticChoice> {
        match key {
            "none" => Ok(SemanticChoice::Replace(Vec::new())),
            "all" => Ok(SemanticChoice::Replace(MODALITIES.to_vec())),
            "parallel" => Ok(SemanticChoice::Parallel),
            other => {
                let mut set = Vec::new();
                for part in other.split('+') {
                    let m = Modality::from_key(part).ok_or_else(|| {
                        Error::Config(format!(
                            "unknown semantic variant '{other}'; valid: none, biorel, molsub, \
                             ddigraph, combinations joined with '+', all, parallel"
                        ))
                    })?;
                    if set.contains(&m) {
                        return Err(Error::Config(format!("duplicate modality in variant '{other}'")));
                    }
                    set.push(m);
                }
                set.sort_by_key(|m| m.index());
                Ok(SemanticChoice::Replace(set))
            }
        }
    }

    /// The channel list this choice induces, in token order.
    pub fn channels(&self) -> Vec<ChannelSpec> {
        match self {
            SemanticChoice::Replace(set) => MODALITIES
                .iter()
                .map(|&modality| ChannelSpec {
                    modality,
                    source: if set.contains(&modality) {
                        ChannelSource::Semantic
                    } else {
                        ChannelSource::Graph
                    },
                })
                .collect(),
            SemanticChoice::Parallel => {
                let mut specs: Vec<ChannelSpec> = MODALITIES
                    .iter()
                    .map(|&modality| ChannelSpec { modality, source: ChannelSource::Graph })
                    .collect();
                for modality in [Modality::BioRel, Modality::MolSub] {
                    specs.push(ChannelSpec { modality, source: ChannelSource::Semantic });
                }
                specs
            }
        }
    }
}

/// The ablation grid rows, in report order.
pub fn ablation_variants() -> Vec<(String, SemanticChoice)> {
    [
        "none",
        "biorel",
        "molsub",
        "ddigraph",
        "biorel+ddigraph",
        "molsub+ddigraph",
        "all",
        "parallel",
        "biorel+molsub",
    ]
    .iter()
    .map(|k| (k.to_string(), SemanticChoice::from_key(k).expect("built-in variant key")))
    .collect()
}

// ---- configuration ----

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub d: usize,
    pub neighbors: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub heads: usize,
    pub attn_dropout: f64,
    pub capacity_factor: f64,
    pub focal_gamma: f64,
    pub seed: u64,
    pub blocks: usize,
    pub pair_mode: PairVariant,
    pub semantic: SemanticChoice,
    pub test_substitution: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 1024,
            lr: 5e-3,
            weight_decay: 1e-8,
            dropout: 0.5,
            d: 256,
            neighbors: 6,
            n_experts: 4,
            top_k: 2,
            heads: 4,
            attn_dropout: 0.1,
            capacity_factor: 1.25,
            focal_gamma: 2.0,
            seed: 17,
            blocks: 1,
            pair_mode: PairVariant::Separate,
            semantic: SemanticChoice::Replace(vec![Modality::BioRel, Modality::MolSub]),
            test_substitution: true,
        }
    }
}

/// Every recognized configuration key, in file-output order.
pub const CONFIG_KEYS: [&str; 18] = [
    "epochs",
    "batch",
    "lr",
    "weight_decay",
    "dropout",
    "d",
    "neighbors",
    "experts",
    "top_k",
    "heads",
    "attn_dropout",
    "capacity_factor",
    "gamma",
    "seed",
    "blocks",
    "pair_mode",
    "semantic",
    "substitution",
];

impl TrainConfig {
    /// Set one key from its text value. Shared by config files and CLI
    /// overrides so precedence is purely about call order.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "neighbors" => self.neighbors = num(key, value)?,
            "experts" => self.n_experts = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "attn_dropout" => self.attn_dropout = num(key, value)?,
            "capacity_factor" => self.capacity_factor = num(key, value)?,
            "gamma" => self.focal_gamma = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "pair_mode" => {
                self.pair_mode = PairVariant::from_key(value).ok_or_else(|| {
                    Error::Config(format!(
                        "bad value '{value}' for key 'pair_mode'; valid: separate, drug-average, modality-pair"
                    ))
                })?
            }
            "semantic" => self.semantic = SemanticChoice::from_key(value)?,
            "substitution" => match value {
                "true" => self.test_substitution = true,
                "false" => self.test_substitution = false,
                _ => {
                    return Err(Error::Config(format!(
                        "bad value '{value}' for key 'substitution'; valid: true, false"
                    )))
                }
            },
            unknown => {
                return Err(Error::Config(format!(
                    "unknown config key '{unknown}'; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn require(ok: bool, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        }
        require(self.epochs >= 1, "epochs must be ≥ 1")?;
        require(self.batch_size >= 1, "batch size must be ≥ 1")?;
        require(self.lr.is_finite() && self.lr >= 0.0, "learning rate must be finite and ≥ 0")?;
        require(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight decay must be finite and ≥ 0",
        )?;
        require((0.0..1.0).contains(&self.dropout), "dropout must be in [0, 1)")?;
        require(
            (0.0..1.0).contains(&self.attn_dropout),
            "attention dropout must be in [0, 1)",
        )?;
        require(self.d >= 1, "hidden width d must be ≥ 1")?;
        require(self.heads >= 1, "head count must be ≥ 1")?;
        require(self.d % self.heads == 0, "head count must divide d")?;
        require(self.neighbors >= 1, "neighbor sample size must be ≥ 1")?;
        require(self.n_experts >= 1, "expert count must be ≥ 1")?;
        require(
            self.top_k >= 1 && self.top_k <= self.n_experts,
            "top_k must satisfy 1 ≤ top_k ≤ experts",
        )?;
        require(
            self.capacity_factor.is_finite() && self.capacity_factor > 0.0,
            "capacity factor must be finite and > 0",
        )?;
        require(
            self.focal_gamma.is_finite() && self.focal_gamma >= 0.0,
            "focal gamma must be finite and ≥ 0",
        )?;
        require(self.blocks >= 1, "block count must be ≥ 1")?;
        Ok(())
    }
}

/// Parse a flat `key = value` config file. `#` starts a comment line; blank
/// lines are skipped; keys may not repeat; unknown keys are errors.
pub fn parse_config_str(text: &str, source: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw).trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = i + 1;
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            source_name: source.to_string(),
            line: lineno,
            msg: "expected 'key = value'".into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse {
                source_name: source.to_string(),
                line: lineno,
                msg: format!("duplicate key '{key}'"),
            });
        }
        config.apply(key, value).map_err(|e| Error::Parse {
            source_name: source.to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
    }
    config.validate()?;
    Ok(config)
}

/// Serialize a config with every key, in `CONFIG_KEYS` order. Output parses
/// back to an identical config.
pub fn write_config(config: &TrainConfig) -> String {
    let mut out = String::new();
    let c = config;
    let values: [(&str, String); 18] = [
        ("epochs", c.epochs.to_string()),
        ("batch", c.batch_size.to_string()),
        ("lr", format!("{}", c.lr)),
        ("weight_decay", format!("{}", c.weight_decay)),
        ("dropout", format!("{}", c.dropout)),
        ("d", c.d.to_string()),
        ("neighbors", c.neighbors.to_string()),
        ("experts", c.n_experts.to_string()),
        ("top_k", c.top_k.to_string()),
        ("heads", c.heads.to_string()),
        ("attn_dropout", format!("{}", c.attn_dropout)),
        ("capacity_factor", format!("{}", c.capacity_factor)),
        ("gamma", format!("{}", c.focal_gamma)),
        ("seed", c.seed.to_string()),
        ("blocks", c.blocks.to_string()),
        ("pair_mode", c.pair_mode.key().to_string()),
        ("semantic", c.semantic.key()),
        ("substitution", c.test_substitution.to_string()),
    ];
    for (key, value) in values {
        out.push_str(&format!("{key} = {value}\n"));
    }
    out
}

/// Token count L for a variant over `n_channels` channels.
pub fn token_count(variant: PairVariant, n_channels: usize) -> usize {
    match variant {
        PairVariant::Separate => 2 * n_channels,
        PairVariant::DrugAverage => 2,
        PairVariant::ModalityPair => n_channels,
    }
}

// ---- classification head ----

/// f_cls: one hidden layer (width d, relu) then a linear map to |R| logits.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadRefs {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

impl HeadParams {
    pub fn init(registry: &mut KernelRegistry, d: usize, n_events: usize) -> Self {
        HeadParams {
            w1: crate::encoders::init_weight(registry, d, d),
            b1: Mat::zeros(1, d),
            w2: crate::encoders::init_weight(registry, d, n_events),
            b2: Mat::zeros(1, n_events),
        }
    }

    pub fn insert(&self, tape: &mut Tape) -> HeadRefs {
        HeadRefs {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }
}

impl ParamBlock for HeadParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

/// ŷ = softmax(f_cls(z)) row-wise. Dropout on the hidden layer is active only
/// in training mode.
pub fn classify(
    tape: &mut Tape,
    refs: &HeadRefs,
    z: ValueId,
    dropout: f64,
    registry: &mut KernelRegistry,
) -> Result<ValueId> {
    let pre = tape.matmul(z, refs.w1)?;
    let pre = tape.add_bias(pre, refs.b1)?;
    let hidden = tape.relu(pre);
    let hidden = tape.dropout(hidden, dropout, registry)?;
    let logits = tape.matmul(hidden, refs.w2)?;
    let logits = tape.add_bias(logits, refs.b2)?;
    tape.softmax(logits)
}

/// Index of the row maximum; exact ties go to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---- focal loss ----

/// Mean focal loss over the batch: −(1−p_t)^γ · ln(p_t) with p_t clamped to
/// ≥ 1e-12. γ = 0 reduces exactly to cross-entropy.
pub fn focal_loss(tape: &mut Tape, probs: ValueId, labels: &[usize], gamma: f64) -> Result<ValueId> {
    let (n, classes) = tape.value(probs).shape();
    if labels.len() != n {
        return Err(Error::Domain(format!("{} labels for {n} probability rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Domain(format!("label {bad} out of range for {classes} classes")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!("focal gamma must be ≥ 0, got {gamma}")));
    }
    let pt = tape.pick_per_row(probs, labels)?;
    let pt = tape.clamp_min(pt, PROB_FLOOR);
    let logp = tape.ln(pt);
    let weighted = if gamma == 0.0 {
        logp
    } else {
        let neg = tape.scale(pt, -1.0);
        let one_minus = tape.add_const(neg, 1.0);
        let weight = tape.pow_const(one_minus, gamma);
        tape.mul(weight, logp)?
    };
    let neg_mean = tape.mean_rows(weighted)?;
    Ok(tape.scale(neg_mean, -1.0))
}

// ---- model parameters ----

/// Prompt pooler plus projector for one semantic modality.
#[derive(Debug, Clone)]
pub struct SemanticStack {
    pub pooler: PromptPoolerParams,
    pub projector: SemanticProjectorParams,
}

impl ParamBlock for SemanticStack {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        self.pooler.visit(&mut |name, m| f(&format!("pooler.{name}"), m));
        self.projector.visit(&mut |name, m| f(&format!("projector.{name}"), m));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.pooler.visit_mut(&mut |name, m| f(&format!("pooler.{name}"), m));
        self.projector.visit_mut(&mut |name, m| f(&format!("projector.{name}"), m));
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Mat)) {
        self.projector.visit_state(&mut |name, m| f(&format!("projector.{name}"), m));
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.projector.visit_state_mut(&mut |name, m| f(&format!("projector.{name}"), m));
    }
}

/// Every learnable parameter of the assembled model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub channels: Vec<ChannelSpec>,
    /// One graph encoder per modality with a graph-sourced channel.
    pub graph: Vec<(Modality, GraphEncoderParams)>,
    /// One pooler+projector per modality with a semantic channel.
    pub semantic: Vec<(Modality, SemanticStack)>,
    /// One pair MLP per channel (modality-pair mode only, else empty).
    pub pair_mlps: Vec<PairMlpParams>,
    pub type_table: TypeEmbeddingTable,
    pub blocks: Vec<AttentionBlockParams>,
    pub moe: MoEParams,
    pub head: HeadParams,
    pub n_events: usize,
}

impl ParamBlock for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        for (m, enc) in &self.graph {
            enc.visit(&mut |name, mat| f(&format!("graph.{}.{name}", m.key()), mat));
        }
        for (m, stack) in &self.semantic {
            stack.visit(&mut |name, mat| f(&format!("semantic.{}.{name}", m.key()), mat));
        }
        for (i, mlp) in self.pair_mlps.iter().enumerate() {
            mlp.visit(&mut |name, mat| f(&format!("pair_mlp.{i}.{name}"), mat));
        }
        self.type_table.visit(&mut |name, mat| f(&format!("type_table.{name}"), mat));
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&mut |name, mat| f(&format!("block.{i}.{name}"), mat));
        }
        self.moe.visit(&mut |name, mat| f(&format!("moe.{name}"), mat));
        self.head.visit(&mut |name, mat| f(&format!("head.{name}"), mat));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        for (m, enc) in &mut self.graph {
            let key = m.key();
            enc.visit_mut(&mut |name, mat| f(&format!("graph.{key}.{name}"), mat));
        }
        for (m, stack) in &mut self.semantic {
            let key = m.key();
            stack.visit_mut(&mut |name, mat| f(&format!("semantic.{key}.{name}"), mat));
        }
        for (i, mlp) in self.pair_mlps.iter_mut().enumerate() {
            mlp.visit_mut(&mut |name, mat| f(&format!("pair_mlp.{i}.{name}"), mat));
        }
        self.type_table.visit_mut(&mut |name, mat| f(&format!("type_table.{name}"), mat));
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&mut |name, mat| f(&format!("block.{i}.{name}"), mat));
        }
        self.moe.visit_mut(&mut |name, mat| f(&format!("moe.{name}"), mat));
        self.head.visit_mut(&mut |name, mat| f(&format!("head.{name}"), mat));
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Mat)) {
        for (m, stack) in &self.semantic {
            stack.visit_state(&mut |name, mat| f(&format!("semantic.{}.{name}", m.key()), mat));
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        for (m, stack) in &mut self.semantic {
            let key = m.key();
            stack.visit_state_mut(&mut |name, mat| f(&format!("semantic.{key}.{name}"), mat));
        }
    }
}

/// Initialize a model for a dataset. Embedding-table shapes come from the
/// bundle's vocabularies; prompt dimensions from the prompt set.
pub fn init_model(bundle: &Bundle, config: &TrainConfig) -> Result<ModelParams> {
    config.validate()?;
    if bundle.pairs.n_events == 0 {
        return Err(Error::Config("dataset declares zero event types".into()));
    }
    let mut registry = KernelRegistry::new(derive_seed(config.seed, &[TAG_INIT]));
    let channels = config.semantic.channels();
    let d = config.d;

    let mut graph = Vec::new();
    let mut semantic = Vec::new();
    for &modality in MODALITIES.iter() {
        if channels.iter().any(|c| c.modality == modality && c.source == ChannelSource::Graph) {
            let channel = &bundle.channels[modality.index()];
            graph.push((
                modality,
                GraphEncoderParams::init(
                    &mut registry,
                    bundle.drugs.len(),
                    channel.entities.len(),
                    channel.relations.len(),
                    d,
                    d,
                ),
            ));
        }
        if channels.iter().any(|c| c.modality == modality && c.source == ChannelSource::Semantic) {
            let d_lm = bundle.prompts.dim(modality).ok_or_else(|| {
                Error::Config(format!(
                    "variant '{}' needs prompt embeddings for modality '{}', none loaded",
                    config.semantic.key(),
                    modality.key()
                ))
            })?;
            semantic.push((
                modality,
                SemanticStack {
                    pooler: PromptPoolerParams::init(&mut registry, d_lm, d),
                    projector: SemanticProjectorParams::init(&mut registry, d_lm, d),
                },
            ));
        }
    }

    let pair_mlps = if config.pair_mode == PairVariant::ModalityPair {
        (0..channels.len()).map(|_| PairMlpParams::init(&mut registry, d)).collect()
    } else {
        Vec::new()
    };
    let type_table =
        TypeEmbeddingTable::for_variant(&mut registry, config.pair_mode, channels.len(), d);
    let blocks = (0..config.blocks)
        .map(|_| AttentionBlockParams::init(&mut registry, d, d, config.heads, config.attn_dropout))
        .collect::<Result<Vec<_>>>()?;
    let l = token_count(config.pair_mode, channels.len());
    let moe = MoEParams::init(
        &mut registry,
        l * d,
        d,
        d,
        config.n_experts,
        config.top_k,
        config.capacity_factor,
    )?;
    let head = HeadParams::init(&mut registry, d, bundle.pairs.n_events);

    Ok(ModelParams {
        channels,
        graph,
        semantic,
        pair_mlps,
        type_table,
        blocks,
        moe,
        head,
        n_events: bundle.pairs.n_events,
    })
}

impl ModelParams {
    /// Structural skeleton with empty matrices, for checkpoint loading: the
    /// organization comes from the config, the values from the named blocks.
    fn skeleton(config: &TrainConfig, n_events: usize) -> Result<ModelParams> {
        config.validate()?;
        let channels = config.semantic.channels();
        let empty_graph = || GraphEncoderParams {
            drug_table: Mat::zeros(0, 0),
            entity_table: Mat::zeros(0, 0),
            relation_table: Mat::zeros(0, 0),
            w_g: Mat::zeros(0, 0),
        };
        let empty_stack = || SemanticStack {
            pooler: PromptPoolerParams { w_att: Mat::zeros(0, 0), q: Mat::zeros(0, 0) },
            projector: SemanticProjectorParams {
                w_s: Mat::zeros(0, 0),
                gain: Mat::zeros(0, 0),
                bias: Mat::zeros(0, 0),
                running: Mat::zeros(0, 0),
            },
        };
        let mut graph = Vec::new();
        let mut semantic = Vec::new();
        for &modality in MODALITIES.iter() {
            if channels.iter().any(|c| c.modality == modality && c.source == ChannelSource::Graph) {
                graph.push((modality, empty_graph()));
            }
            if channels.iter().any(|c| c.modality == modality && c.source == ChannelSource::Semantic)
            {
                semantic.push((modality, empty_stack()));
            }
        }
        let pair_mlps = if config.pair_mode == PairVariant::ModalityPair {
            (0..channels.len())
                .map(|_| PairMlpParams {
                    w1: Mat::zeros(0, 0),
                    b1: Mat::zeros(0, 0),
                    w2: Mat::zeros(0, 0),
                    b2: Mat::zeros(0, 0),
                })
                .collect()
        } else {
            Vec::new()
        };
        let type_table = TypeEmbeddingTable {
            keys: standard_keys(config.pair_mode, channels.len()),
            table: Mat::zeros(0, 0),
        };
        let blocks = (0..config.blocks)
            .map(|_| AttentionBlockParams {
                wq: Mat::zeros(0, 0),
                wk: Mat::zeros(0, 0),
                wv: Mat::zeros(0, 0),
                wo: Mat::zeros(0, 0),
                ffn_w1: Mat::zeros(0, 0),
                ffn_b1: Mat::zeros(0, 0),
                ffn_w2: Mat::zeros(0, 0),
                ffn_b2: Mat::zeros(0, 0),
                ln1_gain: Mat::zeros(0, 0),
                ln1_bias: Mat::zeros(0, 0),
                ln2_gain: Mat::zeros(0, 0),
                ln2_bias: Mat::zeros(0, 0),
                heads: config.heads,
                attn_dropout: config.attn_dropout,
            })
            .collect();
        let moe = MoEParams {
            w_gate: Mat::zeros(0, 0),
            experts: (0..config.n_experts)
                .map(|_| crate::fusion::ExpertParams {
                    w1: Mat::zeros(0, 0),
                    b1: Mat::zeros(0, 0),
                    w2: Mat::zeros(0, 0),
                    b2: Mat::zeros(0, 0),
                })
                .collect(),
            k: config.top_k,
            c: config.capacity_factor,
        };
        let head = HeadParams {
            w1: Mat::zeros(0, 0),
            b1: Mat::zeros(0, 0),
            w2: Mat::zeros(0, 0),
            b2: Mat::zeros(0, 0),
        };
        Ok(ModelParams {
            channels,
            graph,
            semantic,
            pair_mlps,
            type_table,
            blocks,
            moe,
            head,
            n_events,
        })
    }
}

// ---- tape wiring ----

/// ValueIds of every parameter inserted into a tape, plus structured views.
struct ModelRefs {
    channels: Vec<ChannelSpec>,
    graph: Vec<(Modality, GraphEncoderRefs)>,
    semantic: Vec<(Modality, PromptPoolerRefs, SemanticProjectorRefs)>,
    pair_mlps: Vec<PairMlpRefs>,
    /// Key layout for descriptor → row lookups (values live on the tape).
    type_meta: TypeEmbeddingTable,
    type_table: ValueId,
    blocks: Vec<AttentionBlockRefs>,
    gate: ValueId,
    experts: Vec<ExpertRefs>,
    head: HeadRefs,
}

/// Insert every learnable parameter as a tape leaf, returning structured refs
/// and the name → ValueId map used for gradient extraction.
fn insert_model(tape: &mut Tape, params: &ModelParams) -> Result<(ModelRefs, BTreeMap<String, ValueId>)> {
    let mut ids: BTreeMap<String, ValueId> = BTreeMap::new();
    params.visit(&mut |name, mat| {
        ids.insert(name.to_string(), tape.leaf(mat.clone()));
    });
    let refs = refs_from_ids(params, &ids)?;
    Ok((refs, ids))
}

/// Rebuild structured refs from an existing name → leaf map (the leaves may
/// have been inserted by someone else, e.g. the finite-difference checker).
fn refs_from_ids(params: &ModelParams, ids: &BTreeMap<String, ValueId>) -> Result<ModelRefs> {
    let id_of = |key: &str| -> Result<ValueId> {
        ids.get(key).copied().ok_or_else(|| Error::Domain(format!("missing parameter block '{key}'")))
    };

    let mut graph = Vec::new();
    for (m, _) in &params.graph {
        let k = m.key();
        graph.push((
            *m,
            GraphEncoderRefs {
                drug_table: id_of(&format!("graph.{k}.drug_table"))?,
                entity_table: id_of(&format!("graph.{k}.entity_table"))?,
                relation_table: id_of(&format!("graph.{k}.relation_table"))?,
                w_g: id_of(&format!("graph.{k}.w_g"))?,
            },
        ));
    }
    let mut semantic = Vec::new();
    for (m, _) in &params.semantic {
        let k = m.key();
        semantic.push((
            *m,
            PromptPoolerRefs {
                w_att: id_of(&format!("semantic.{k}.pooler.w_att"))?,
                q: id_of(&format!("semantic.{k}.pooler.q"))?,
            },
            SemanticProjectorRefs {
                w_s: id_of(&format!("semantic.{k}.projector.w_s"))?,
                gain: id_of(&format!("semantic.{k}.projector.gain"))?,
                bias: id_of(&format!("semantic.{k}.projector.bias"))?,
            },
        ));
    }
    let mut pair_mlps = Vec::new();
    for i in 0..params.pair_mlps.len() {
        pair_mlps.push(PairMlpRefs {
            w1: id_of(&format!("pair_mlp.{i}.w1"))?,
            b1: id_of(&format!("pair_mlp.{i}.b1"))?,
            w2: id_of(&format!("pair_mlp.{i}.w2"))?,
            b2: id_of(&format!("pair_mlp.{i}.b2"))?,
        });
    }
    let mut blocks = Vec::new();
    for (i, b) in params.blocks.iter().enumerate() {
        blocks.push(AttentionBlockRefs {
            wq: id_of(&format!("block.{i}.wq"))?,
            wk: id_of(&format!("block.{i}.wk"))?,
            wv: id_of(&format!("block.{i}.wv"))?,
            wo: id_of(&format!("block.{i}.wo"))?,
            ffn_w1: id_of(&format!("block.{i}.ffn_w1"))?,
            ffn_b1: id_of(&format!("block.{i}.ffn_b1"))?,
            ffn_w2: id_of(&format!("block.{i}.ffn_w2"))?,
            ffn_b2: id_of(&format!("block.{i}.ffn_b2"))?,
            ln1_gain: id_of(&format!("block.{i}.ln1_gain"))?,
            ln1_bias: id_of(&format!("block.{i}.ln1_bias"))?,
            ln2_gain: id_of(&format!("block.{i}.ln2_gain"))?,
            ln2_bias: id_of(&format!("block.{i}.ln2_bias"))?,
            heads: b.heads,
            attn_dropout: b.attn_dropout,
        });
    }
    let mut experts = Vec::new();
    for i in 0..params.moe.experts.len() {
        experts.push(ExpertRefs {
            w1: id_of(&format!("moe.expert_{i}.w1"))?,
            b1: id_of(&format!("moe.expert_{i}.b1"))?,
            w2: id_of(&format!("moe.expert_{i}.w2"))?,
            b2: id_of(&format!("moe.expert_{i}.b2"))?,
        });
    }
    let refs = ModelRefs {
        channels: params.channels.clone(),
        graph,
        semantic,
        pair_mlps,
        type_meta: params.type_table.clone(),
        type_table: id_of("type_table.table")?,
        blocks,
        gate: id_of("moe.w_gate")?,
        experts,
        head: HeadRefs {
            w1: id_of("head.w1")?,
            b1: id_of("head.b1")?,
            w2: id_of("head.w2")?,
            b2: id_of("head.b2")?,
        },
    };
    Ok(refs)
}

/// Immutable inputs of one forward pass.
struct ForwardContext<'a> {
    bundle: &'a Bundle,
    /// Fold-filtered channels, canonical modality order.
    channels: &'a [TripleChannel],
    /// Unseen-drug → donor map consulted by graph channels only.
    donor: Option<&'a BTreeMap<usize, usize>>,
    /// Neighbor-sampling namespace (epoch index during training).
    sample_tag: u64,
    /// When set, reuse this routing decision instead of recomputing it from
    /// the current gate values. The finite-difference checker needs the
    /// discrete selection pinned so perturbations never cross a routing
    /// boundary; normal training and inference leave this `None`.
    route_override: Option<&'a RouteResult>,
}

struct ForwardOutput {
    probs: ValueId,
    record: RoutingRecord,
    /// Per pair: per-token contribution scores from the final block's maps.
    contributions: Vec<Vec<f64>>,
}

fn forward_batch(
    tape: &mut Tape,
    refs: &ModelRefs,
    config: &TrainConfig,
    ctx: &ForwardContext,
    running: &mut [Mat],
    registry: &mut KernelRegistry,
    pairs: &[(usize, usize, usize)],
) -> Result<ForwardOutput> {
    if pairs.is_empty() {
        return Err(Error::Domain("forward pass over an empty batch".into()));
    }
    // Unique drugs in this batch, ascending; each channel encodes each once.
    let drug_set: BTreeSet<usize> = pairs.iter().flat_map(|&(u, v, _)| [u, v]).collect();
    let drugs: Vec<usize> = drug_set.into_iter().collect();
    let row_of: BTreeMap<usize, usize> = drugs.iter().enumerate().map(|(i, &d)| (d, i)).collect();

    let mut channel_reps = Vec::with_capacity(refs.channels.len());
    for spec in &refs.channels {
        let modality = spec.modality;
        let rep = match spec.source {
            ChannelSource::Graph => {
                let (_, enc) = refs
                    .graph
                    .iter()
                    .find(|(m, _)| *m == modality)
                    .ok_or_else(|| Error::Domain(format!("no graph encoder for {}", modality.key())))?;
                let channel = &ctx.channels[modality.index()];
                let mut rows = Vec::with_capacity(drugs.len());
                for &drug in &drugs {
                    let eff = ctx.donor.and_then(|m| m.get(&drug)).copied().unwrap_or(drug);
                    let seed = derive_seed(
                        config.seed,
                        &[TAG_NEIGHBOR, ctx.sample_tag, eff as u64, modality.index() as u64],
                    );
                    let neighbors = channel.sample_neighbors(eff, config.neighbors, seed)?;
                    rows.push(encode_graph_drug(tape, enc, eff, &neighbors)?);
                }
                tape.vstack(&rows)?
            }
            ChannelSource::Semantic => {
                let si = refs
                    .semantic
                    .iter()
                    .position(|(m, _, _)| *m == modality)
                    .ok_or_else(|| Error::Domain(format!("no semantic stack for {}", modality.key())))?;
                let (_, pooler, projector) = &refs.semantic[si];
                let d_lm = ctx.bundle.prompts.dim(modality).ok_or_else(|| {
                    Error::Domain(format!("no prompt embeddings for {}", modality.key()))
                })?;
                let mut rows = Vec::with_capacity(drugs.len());
                for &drug in &drugs {
                    let vectors = ctx.bundle.prompts.get(drug, modality).ok_or_else(|| {
                        Error::Domain(format!(
                            "drug '{}' has no {} prompts",
                            ctx.bundle.drugs.name(drug),
                            modality.key()
                        ))
                    })?;
                    let mat = Mat::from_vec(vectors.len(), d_lm, vectors.concat())?;
                    let id = tape.leaf(mat);
                    rows.push(pool_prompts(tape, pooler, id)?);
                }
                let pooled = tape.vstack(&rows)?;
                project_semantic(tape, projector, pooled, &mut running[si], registry)?
            }
        };
        channel_reps.push(rep);
    }

    // Per-pair token sequences through the blocks, then flattened.
    let mut flats = Vec::with_capacity(pairs.len());
    let mut contributions = Vec::with_capacity(pairs.len());
    for &(u, v, _) in pairs {
        let (ur, vr) = (row_of[&u], row_of[&v]);
        let mut u_reps = Vec::with_capacity(channel_reps.len());
        let mut v_reps = Vec::with_capacity(channel_reps.len());
        for &rep in &channel_reps {
            u_reps.push(tape.gather_rows(rep, &[ur])?);
            v_reps.push(tape.gather_rows(rep, &[vr])?);
        }
        let seq = build_pair_tokens(tape, &u_reps, &v_reps, config.pair_mode, &refs.pair_mlps)?;
        let mut seq = add_type_embeddings(tape, &seq, &refs.type_meta, refs.type_table)?;
        let mut final_maps = Vec::new();
        for block in &refs.blocks {
            let (next, maps) = attention_block(tape, block, &seq, registry)?;
            seq = next;
            final_maps = maps;
        }
        let maps: Vec<Mat> = final_maps.iter().map(|&id| tape.value(id).clone()).collect();
        contributions.push(modality_contribution(&maps, &seq.descriptors)?.per_token);
        flats.push(flatten_tokens(tape, &seq));
    }
    let p = tape.vstack(&flats)?;

    let gates = gate_scores(tape, p, refs.gate)?;
    let (fused, record) = match ctx.route_override {
        Some(route) => {
            aggregate_on_tape(tape, p, gates, route, &refs.experts, config.dropout, registry)?
        }
        None => {
            let route =
                expert_choice_route(tape.value(gates), config.top_k, config.capacity_factor)?;
            aggregate_on_tape(tape, p, gates, &route, &refs.experts, config.dropout, registry)?
        }
    };
    let probs = classify(tape, &refs.head, fused, config.dropout, registry)?;
    Ok(ForwardOutput { probs, record, contributions })
}

// ---- optimizer ----

/// Adam moments keyed by parameter name, plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    pub step: u64,
    pub moments: BTreeMap<String, (Mat, Mat)>,
}

/// One decoupled-weight-decay Adam step over every visited parameter.
/// Parameters without a gradient entry are left untouched; lr = 0 leaves
/// parameters bitwise unchanged.
pub fn adamw_step(
    params: &mut dyn ParamBlock,
    grads: &BTreeMap<String, Mat>,
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(g) = grads.get(name) else { return };
        if g.shape() != p.shape() {
            failure = Some(Error::Shape {
                op: "adamw_step",
                detail: format!("gradient {:?} for parameter '{name}' {:?}", g.shape(), p.shape()),
            });
            return;
        }
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Mat::zeros(p.rows(), p.cols()), Mat::zeros(p.rows(), p.cols())));
        let md = m.data_mut();
        let vd = v.data_mut();
        let gd = g.data();
        let pd = p.data_mut();
        for i in 0..gd.len() {
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gd[i];
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
            if lr != 0.0 {
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * pd[i]);
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ---- training loop ----

/// One history line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// A trained (or training) model: parameters, optimizer state, history.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub opt: AdamWState,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Restrict the interaction channel to train pairs: a triple survives only if
/// its unordered endpoint pair is a training pair. Other channels pass through
/// unchanged (their facts do not leak labels).
pub fn fold_channels(bundle: &Bundle, train_pairs: &HashSet<(usize, usize)>) -> Vec<TripleChannel> {
    bundle
        .channels
        .iter()
        .map(|channel| {
            if channel.name == Modality::DdiGraph.channel_name() {
                let entity_drug = bundle.entity_drug_map(channel);
                channel.filtered(|d, _r, e| {
                    entity_drug[e]
                        .map(|v| train_pairs.contains(&(d.min(v), d.max(v))))
                        .unwrap_or(false)
                })
            } else {
                channel.clone()
            }
        })
        .collect()
}

fn unordered_pair_set(dataset: &PairDataset, indices: &[usize]) -> HashSet<(usize, usize)> {
    indices
        .iter()
        .map(|&i| {
            let (u, v, _) = dataset.pairs[i];
            (u.min(v), u.max(v))
        })
        .collect()
}

fn pairs_by_index(dataset: &PairDataset, indices: &[usize]) -> Vec<(usize, usize, usize)> {
    indices.iter().map(|&i| dataset.pairs[i]).collect()
}

/// Verify that every listed drug has prompts for each semantic modality the
/// model uses.
fn check_prompt_coverage(bundle: &Bundle, params: &ModelParams, drugs: &BTreeSet<usize>) -> Result<()> {
    for (modality, _) in &params.semantic {
        for &drug in drugs {
            if bundle.prompts.get(drug, *modality).is_none() {
                return Err(Error::Config(format!(
                    "drug '{}' has no {} prompt embeddings required by the configured variant",
                    bundle.drugs.name(drug),
                    modality.key()
                )));
            }
        }
    }
    Ok(())
}

/// Copy the BN running statistics out of the params, matching the semantic
/// stack order used by forward passes.
fn running_stats(params: &ModelParams) -> Vec<Mat> {
    params.semantic.iter().map(|(_, s)| s.projector.running.clone()).collect()
}

fn store_running_stats(params: &mut ModelParams, running: Vec<Mat>) {
    for ((_, stack), mat) in params.semantic.iter_mut().zip(running) {
        stack.projector.running = mat;
    }
}

/// Train a model on a fold's training pairs.
pub fn fit(bundle: &Bundle, fold: &Fold, config: &TrainConfig) -> Result<ModelState> {
    config.validate()?;
    if fold.train_pairs.is_empty() {
        return Err(Error::Config("fold has no training pairs".into()));
    }
    let mut params = init_model(bundle, config)?;
    let train_drugs: BTreeSet<usize> = fold
        .train_pairs
        .iter()
        .flat_map(|&i| {
            let (u, v, _) = bundle.pairs.pairs[i];
            [u, v]
        })
        .collect();
    check_prompt_coverage(bundle, &params, &train_drugs)?;

    let train_pair_set = unordered_pair_set(&bundle.pairs, &fold.train_pairs);
    let channels = fold_channels(bundle, &train_pair_set);
    let train_pairs = pairs_by_index(&bundle.pairs, &fold.train_pairs);

    let mut opt = AdamWState::default();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        KernelRegistry::new(derive_seed(config.seed, &[TAG_SHUFFLE, epoch as u64]))
            .shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(usize, usize, usize)> = chunk.iter().map(|&i| train_pairs[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&(_, _, y)| y).collect();

            let mut tape = Tape::new();
            let (refs, ids) = insert_model(&mut tape, &params)?;
            let mut running = running_stats(&params);
            let mut registry = KernelRegistry::train_mode(derive_seed(
                config.seed,
                &[TAG_DROPOUT, epoch as u64, batch_idx as u64],
            ));
            let ctx = ForwardContext {
                bundle,
                channels: &channels,
                donor: None,
                sample_tag: epoch as u64,
                route_override: None,
            };
            let out = forward_batch(&mut tape, &refs, config, &ctx, &mut running, &mut registry, &batch)?;
            let loss = focal_loss(&mut tape, out.probs, &labels, config.focal_gamma)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {batch_idx}"),
                });
            }
            loss_sum += loss_value * batch.len() as f64;

            tape.backward(loss)?;
            let grads: BTreeMap<String, Mat> =
                ids.iter().map(|(name, &id)| (name.clone(), tape.grad(id).clone())).collect();
            adamw_step(&mut params, &grads, &mut opt, config.lr, config.weight_decay)?;
            store_running_stats(&mut params, running);
        }

        let epoch_loss = loss_sum / train_pairs.len() as f64;
        let inference = run_inference(&params, config, bundle, &channels, None, &train_pairs)?;
        let correct = inference
            .probs_rows()
            .zip(train_pairs.iter())
            .filter(|(row, &(_, _, y))| argmax_row(row) == y)
            .count();
        let train_acc = correct as f64 / train_pairs.len() as f64;
        history.push(EpochStats { epoch, loss: epoch_loss, train_acc });
    }

    Ok(ModelState { config: config.clone(), params, opt, epoch: config.epochs, history })
}

struct InferenceResult {
    probs: Mat,
    records: Vec<RoutingRecord>,
    contributions: Vec<Vec<f64>>,
}

impl InferenceResult {
    fn probs_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.probs.rows()).map(|r| self.probs.row_slice(r))
    }
}

/// Batched inference pass in evaluation mode (dropout off, BN running stats,
/// fixed neighbor-sample tag). Running statistics are not modified.
fn run_inference(
    params: &ModelParams,
    config: &TrainConfig,
    bundle: &Bundle,
    channels: &[TripleChannel],
    donor: Option<&BTreeMap<usize, usize>>,
    pairs: &[(usize, usize, usize)],
) -> Result<InferenceResult> {
    let mut probs = Mat::zeros(pairs.len(), params.n_events);
    let mut records = Vec::new();
    let mut contributions = Vec::new();
    let mut row = 0;
    for chunk in pairs.chunks(config.batch_size) {
        let mut tape = Tape::new();
        let (refs, _) = insert_model(&mut tape, params)?;
        let mut running = running_stats(params);
        let mut registry = KernelRegistry::new(0);
        let ctx =
            ForwardContext { bundle, channels, donor, sample_tag: PREDICT_TAG, route_override: None };
        let out = forward_batch(&mut tape, &refs, config, &ctx, &mut running, &mut registry, chunk)?;
        let batch_probs = tape.value(out.probs);
        for r in 0..chunk.len() {
            for c in 0..params.n_events {
                probs.set(row + r, c, batch_probs.get(r, c));
            }
        }
        row += chunk.len();
        records.push(out.record);
        contributions.extend(out.contributions);
    }
    Ok(InferenceResult { probs, records, contributions })
}

/// Prediction over a pair list.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// One probability row per kept pair, in input order.
    pub probs: Mat,
    /// Gold labels of the kept pairs.
    pub labels: Vec<usize>,
    /// Indices (into the requested list) of the kept pairs.
    pub kept: Vec<usize>,
    /// Pairs dropped because a drug had no resolvable representation.
    pub skipped: usize,
    pub telemetry: Vec<TelemetryRow>,
}

/// Predict interaction probabilities for `pair_indices` of the bundle's pair
/// list under a fold's visibility. With `substitute` on, unseen drugs borrow
/// the graph-channel inputs of their most similar training drug; semantic
/// channels always use the drug's own prompts.
pub fn predict(
    state: &ModelState,
    bundle: &Bundle,
    fold: &Fold,
    pair_indices: &[usize],
    substitute: bool,
) -> Result<Prediction> {
    let config = &state.config;
    let params = &state.params;
    let train_pair_set = unordered_pair_set(&bundle.pairs, &fold.train_pairs);
    let channels = fold_channels(bundle, &train_pair_set);
    let train_drug_set: BTreeSet<usize> = fold.train_drugs.iter().copied().collect();

    // Donor resolution for unseen drugs (graph channels only).
    let mut donor: BTreeMap<usize, usize> = BTreeMap::new();
    let mut unresolvable: BTreeSet<usize> = BTreeSet::new();
    if substitute {
        let request_drugs: BTreeSet<usize> = pair_indices
            .iter()
            .flat_map(|&i| {
                let (u, v, _) = bundle.pairs.pairs[i];
                [u, v]
            })
            .collect();
        let unseen: Vec<usize> =
            request_drugs.iter().copied().filter(|d| !train_drug_set.contains(d)).collect();
        if !unseen.is_empty() {
            let (keys, has_key) = similarity_keys(params, bundle)?;
            let candidates: Vec<usize> =
                fold.train_drugs.iter().copied().filter(|&d| has_key[d]).collect();
            for drug in unseen {
                if !has_key[drug] || candidates.is_empty() {
                    unresolvable.insert(drug);
                } else {
                    donor.insert(drug, substitute_unseen(drug, &candidates, &keys)?);
                }
            }
        }
    }

    // Keep pairs whose drugs are fully resolvable.
    let mut kept = Vec::new();
    let mut kept_pairs = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0;
    'pair: for (pos, &idx) in pair_indices.iter().enumerate() {
        let (u, v, y) = bundle.pairs.pairs[idx];
        for &drug in &[u, v] {
            if unresolvable.contains(&drug) {
                skipped += 1;
                continue 'pair;
            }
            for (modality, _) in &params.semantic {
                if bundle.prompts.get(drug, *modality).is_none() {
                    skipped += 1;
                    continue 'pair;
                }
            }
        }
        kept.push(pos);
        kept_pairs.push((u, v, y));
        labels.push(y);
    }

    if kept_pairs.is_empty() {
        return Ok(Prediction {
            probs: Mat::zeros(0, params.n_events),
            labels,
            kept,
            skipped,
            telemetry: Vec::new(),
        });
    }

    let donor_ref = if substitute { Some(&donor) } else { None };
    let result = run_inference(params, config, bundle, &channels, donor_ref, &kept_pairs)?;

    let mut telemetry = Vec::new();
    let mut offset = 0;
    for record in &result.records {
        let n = record.selectors.len();
        let ids: Vec<usize> = (offset..offset + n).map(|i| pair_indices[kept[i]]).collect();
        let contribs = &result.contributions[offset..offset + n];
        telemetry.extend(record.rows(&ids, contribs)?);
        offset += n;
    }
    Ok(Prediction { probs: result.probs, labels, kept, skipped, telemetry })
}

/// Similarity keys for donor lookup: each drug's pooled bio-relation prompt
/// embedding — attention-pooled with the trained pooler when the model has a
/// bio-relation semantic stack, otherwise the plain prompt mean. Returns the
/// key matrix and a per-drug availability mask.
fn similarity_keys(params: &ModelParams, bundle: &Bundle) -> Result<(Mat, Vec<bool>)> {
    let n = bundle.drugs.len();
    let Some(d_lm) = bundle.prompts.dim(Modality::BioRel) else {
        return Ok((Mat::zeros(n, 1), vec![false; n]));
    };
    let mut tape = Tape::new();
    let pooler_refs = params
        .semantic
        .iter()
        .find(|(m, _)| *m == Modality::BioRel)
        .map(|(_, stack)| stack.pooler.insert(&mut tape));
    let mut keys = Mat::zeros(n, d_lm);
    let mut has_key = vec![false; n];
    for drug in 0..n {
        let Some(vectors) = bundle.prompts.get(drug, Modality::BioRel) else { continue };
        let pooled: Vec<f64> = match &pooler_refs {
            Some(refs) => {
                let mat = Mat::from_vec(vectors.len(), d_lm, vectors.concat())?;
                let id = tape.leaf(mat);
                let out = pool_prompts(&mut tape, refs, id)?;
                tape.value(out).data().to_vec()
            }
            None => {
                let mut mean = vec![0.0; d_lm];
                for vec in vectors {
                    for (m, &x) in mean.iter_mut().zip(vec.iter()) {
                        *m += x;
                    }
                }
                let k = vectors.len() as f64;
                mean.iter_mut().for_each(|m| *m /= k);
                mean
            }
        };
        for (c, &x) in pooled.iter().enumerate() {
            keys.set(drug, c, x);
        }
        has_key[drug] = true;
    }
    Ok((keys, has_key))
}

// ---- history serialization ----

/// `epoch,loss,train_acc` lines under a header.
pub fn write_history(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,train_acc\n");
    for e in history {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.train_acc));
    }
    out
}

pub fn parse_history_str(text: &str, source: &str) -> Result<Vec<EpochStats>> {
    let mut history = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw).trim();
        if line.is_empty() || (i == 0 && line == "epoch,loss,train_acc") {
            continue;
        }
        let lineno = i + 1;
        let err = |msg: String| Error::Parse { source_name: source.to_string(), line: lineno, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 comma-separated fields, got {}", fields.len())));
        }
        history.push(EpochStats {
            epoch: fields[0].parse().map_err(|_| err(format!("bad epoch '{}'", fields[0])))?,
            loss: fields[1].parse().map_err(|_| err(format!("bad loss '{}'", fields[1])))?,
            train_acc: fields[2].parse().map_err(|_| err(format!("bad accuracy '{}'", fields[2])))?,
        });
    }
    Ok(history)
}

// ---- checkpointing ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"AIMF";
const CHECKPOINT_VERSION: u32 = 1;

const GROUP_PARAM: u8 = 0;
const GROUP_STATE: u8 = 1;
const GROUP_MOMENT_M: u8 = 2;
const GROUP_MOMENT_V: u8 = 3;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_block(out: &mut Vec<u8>, group: u8, name: &str, mat: &Mat) {
    out.push(group);
    put_str(out, name);
    put_u64(out, mat.rows() as u64);
    put_u64(out, mat.cols() as u64);
    for &v in mat.data() {
        put_f64(out, v);
    }
}

/// Serialize a model state to the versioned binary container. Exact: every
/// f64 is stored bit-for-bit.
pub fn save_state(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &write_config(&state.config));
    put_u64(&mut out, state.params.n_events as u64);
    put_u64(&mut out, state.epoch as u64);
    put_u64(&mut out, state.history.len() as u64);
    for e in &state.history {
        put_u64(&mut out, e.epoch as u64);
        put_f64(&mut out, e.loss);
        put_f64(&mut out, e.train_acc);
    }
    put_u64(&mut out, state.opt.step);

    let mut blocks: Vec<(u8, String, Mat)> = Vec::new();
    state.params.visit(&mut |name, mat| blocks.push((GROUP_PARAM, name.to_string(), mat.clone())));
    state
        .params
        .visit_state(&mut |name, mat| blocks.push((GROUP_STATE, name.to_string(), mat.clone())));
    for (name, (m, v)) in &state.opt.moments {
        blocks.push((GROUP_MOMENT_M, name.clone(), m.clone()));
        blocks.push((GROUP_MOMENT_V, name.clone(), v.clone()));
    }
    put_u64(&mut out, blocks.len() as u64);
    for (group, name, mat) in &blocks {
        put_block(&mut out, *group, name, mat);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Config("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Config("checkpoint holds non-UTF-8 text".into()))
    }

    fn mat(&mut self) -> Result<Mat> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Config("checkpoint matrix shape overflows".into()))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(self.f64()?);
        }
        Mat::from_vec(rows, cols, data)
    }
}

/// Deserialize a model state saved by `save_state`.
pub fn load_state(bytes: &[u8]) -> Result<ModelState> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Config("not a model checkpoint (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config = parse_config_str(&cur.string()?, "checkpoint-config")?;
    let n_events = cur.u64()? as usize;
    let epoch = cur.u64()? as usize;
    let n_history = cur.u64()? as usize;
    let mut history = Vec::with_capacity(n_history);
    for _ in 0..n_history {
        let e = cur.u64()? as usize;
        let loss = cur.f64()?;
        let train_acc = cur.f64()?;
        history.push(EpochStats { epoch: e, loss, train_acc });
    }
    let opt_step = cur.u64()?;
    let n_blocks = cur.u64()? as usize;
    let mut param_blocks: BTreeMap<String, Mat> = BTreeMap::new();
    let mut state_blocks: BTreeMap<String, Mat> = BTreeMap::new();
    let mut m_blocks: BTreeMap<String, Mat> = BTreeMap::new();
    let mut v_blocks: BTreeMap<String, Mat> = BTreeMap::new();
    for _ in 0..n_blocks {
        let group = cur.take(1)?[0];
        let name = cur.string()?;
        let mat = cur.mat()?;
        let bucket = match group {
            GROUP_PARAM => &mut param_blocks,
            GROUP_STATE => &mut state_blocks,
            GROUP_MOMENT_M => &mut m_blocks,
            GROUP_MOMENT_V => &mut v_blocks,
            other => return Err(Error::Config(format!("unknown checkpoint block group {other}"))),
        };
        if bucket.insert(name.clone(), mat).is_some() {
            return Err(Error::Config(format!("duplicate checkpoint block '{name}'")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Config("trailing bytes after checkpoint payload".into()));
    }

    let mut params = ModelParams::skeleton(&config, n_events)?;
    let mut fill_err: Option<Error> = None;
    params.visit_mut(&mut |name, mat| {
        if fill_err.is_some() {
            return;
        }
        match param_blocks.remove(name) {
            Some(stored) => *mat = stored,
            None => fill_err = Some(Error::Config(format!("checkpoint missing parameter '{name}'"))),
        }
    });
    params.visit_state_mut(&mut |name, mat| {
        if fill_err.is_some() {
            return;
        }
        match state_blocks.remove(name) {
            Some(stored) => *mat = stored,
            None => fill_err = Some(Error::Config(format!("checkpoint missing state block '{name}'"))),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if let Some(name) = param_blocks.keys().next() {
        return Err(Error::Config(format!("checkpoint has unexpected parameter '{name}'")));
    }
    if let Some(name) = state_blocks.keys().next() {
        return Err(Error::Config(format!("checkpoint has unexpected state block '{name}'")));
    }
    if m_blocks.len() != v_blocks.len() {
        return Err(Error::Config("checkpoint moment blocks are unpaired".into()));
    }
    let mut moments = BTreeMap::new();
    for (name, m) in m_blocks {
        let v = v_blocks
            .remove(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint moment '{name}' lacks its pair")))?;
        moments.insert(name, (m, v));
    }

    Ok(ModelState {
        config,
        params,
        opt: AdamWState { step: opt_step, moments },
        epoch,
        history,
    })
}

pub fn write_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, save_state(state))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path)?;
    load_state(&bytes)
}

// ---- gradient-check suite ----

/// Names of the composite checks layered on top of the per-op kernel checks,
/// in the order `gradient_suite` reports them.
pub const COMPONENT_CHECKS: [&str; 8] = [
    "graph_encoder",
    "prompt_pooler",
    "semantic_projector",
    "pair_tokens",
    "attention_block",
    "moe_aggregate",
    "focal_loss",
    "end_to_end",
];

/// Random test point with entries pushed away from zero so relu/clamp kinks
/// stay clear of the finite-difference stencil.
fn suite_mat(registry: &mut KernelRegistry, rows: usize, cols: usize) -> Mat {
    let mut m = registry.uniform_mat(rows, cols, -0.9, 0.9);
    for v in m.data_mut() {
        if v.abs() < 0.05 {
            *v += if *v >= 0.0 { 0.1 } else { -0.1 };
        }
    }
    m
}

fn check_graph_encoder(seed: u64) -> Result<CheckReport> {
    let mut registry = KernelRegistry::new(seed);
    let d = 6;
    let mut channel = TripleChannel::empty("suite");
    channel.push("D0", "r0", "E0");
    channel.push("D0", "r1", "E1");
    channel.push("D0", "r0", "E2");
    channel.push("D1", "r1", "E0");
    let neighbors = channel.sample_neighbors(0, 3, derive_seed(seed, &[1]))?;
    let drug_table = suite_mat(&mut registry, 2, d);
    let entity_table = suite_mat(&mut registry, 3, d);
    // One extra row: the last relation row is reserved for self-pair edges.
    let relation_table = suite_mat(&mut registry, 3, d);
    let w_g = suite_mat(&mut registry, 2 * d, d);
    let weights = suite_mat(&mut registry, 1, d);
    check_scalar_fn(
        "graph_encoder",
        &[drug_table, entity_table, relation_table, w_g],
        move |tape, ids| {
            let refs = GraphEncoderRefs {
                drug_table: ids[0],
                entity_table: ids[1],
                relation_table: ids[2],
                w_g: ids[3],
            };
            let row = encode_graph_drug(tape, &refs, 0, &neighbors)?;
            weighted_scalar(tape, row, &weights)
        },
    )
}

fn check_prompt_pooler(seed: u64) -> Result<CheckReport> {
    let mut registry = KernelRegistry::new(seed);
    let (d_lm, d_att) = (7, 5);
    let prompts = suite_mat(&mut registry, 4, d_lm);
    let w_att = suite_mat(&mut registry, d_lm, d_att);
    let q = suite_mat(&mut registry, d_att, 1);
    let weights = suite_mat(&mut registry, 1, d_lm);
    check_scalar_fn("prompt_pooler", &[prompts, w_att, q], move |tape, ids| {
        let refs = PromptPoolerRefs { w_att: ids[1], q: ids[2] };
        let pooled = pool_prompts(tape, &refs, ids[0])?;
        weighted_scalar(tape, pooled, &weights)
    })
}

fn check_semantic_projector(seed: u64) -> Result<CheckReport> {
    let mut registry = KernelRegistry::new(seed);
    let (d_lm, d) = (6, 5);
    let pooled = suite_mat(&mut registry, 5, d_lm);
    let w_s = suite_mat(&mut registry, d_lm, d);
    let mut gain = registry.uniform_mat(1, d, 0.6, 1.4);
    for v in gain.data_mut() {
        *v = v.abs().max(0.6);
    }
    let bias = suite_mat(&mut registry, 1, d);
    let weights = suite_mat(&mut registry, 5, d);
    check_scalar_fn("semantic_projector", &[pooled, w_s, gain, bias], move |tape, ids| {
        let refs = SemanticProjectorRefs { w_s: ids[1], gain: ids[2], bias: ids[3] };
        // Train-mode batch norm: the value depends on batch statistics only;
        // running stats are scratch here.
        let mut running = Mat::zeros(2, d);
        let registry = KernelRegistry::train_mode(derive_seed(seed, &[2]));
        let projected = project_semantic(tape, &refs, ids[0], &mut running, &registry)?;
        weighted_scalar(tape, projected, &weights)
    })
}

fn check_pair_tokens(seed: u64) -> Result<CheckReport> {
    let mut registry = KernelRegistry::new(seed);
    let d = 6;
    // Modality-pair variant: exercises the pair MLPs; the added type
    // embeddings cover the lookup-table path.
    let meta = TypeEmbeddingTable::for_variant(&mut registry, PairVariant::ModalityPair, 2, d);
    let u0 = suite_mat(&mut registry, 1, d);
    let u1 = suite_mat(&mut registry, 1, d);
    let v0 = suite_mat(&mut registry, 1, d);
    let v1 = suite_mat(&mut registry, 1, d);
    let mut inputs = vec![u0, u1, v0, v1];
    for _ in 0..2 {
        inputs.push(suite_mat(&mut registry, 2 * d, d)); // w1
        inputs.push(suite_mat(&mut registry, 1, d)); // b1
        inputs.push(suite_mat(&mut registry, d, d)); // w2
        inputs.push(suite_mat(&mut registry, 1, d)); // b2
    }
    inputs.push(meta.table.clone());
    let weights = suite_mat(&mut registry, 2, d);
    check_scalar_fn("pair_tokens", &inputs, move |tape, ids| {
        let mlps = [
            PairMlpRefs { w1: ids[4], b1: ids[5], w2: ids[6], b2: ids[7] },
            PairMlpRefs { w1: ids[8], b1: ids[9], w2: ids[10], b2: ids[11] },
        ];
        let seq = build_pair_tokens(
            tape,
            &[ids[0], ids[1]],
            &[ids[2], ids[3]],
            PairVariant::ModalityPair,
            &mlps,
        )?;
        let seq = add_type_embeddings(tape, &seq, &meta, ids[12])?;
        weighted_scalar(tape, seq.tokens, &weights)
    })
}

fn check_attention_block(seed: u64) -> Result<CheckReport> {
    let mut registry = KernelRegistry::new(seed);
    let (l, d) = (4, 8);
    let descriptors = standard_keys(PairVariant::Separate, 2);
    let tokens = suite_mat(&mut registry, l, d);
    let mut inputs = vec![tokens];
    for _ in 0..4 {
        inputs.push(suite_mat(&mut registry, d, d)); // wq wk wv wo
    }
    inputs.push(suite_mat(&mut registry, d, d)); // ffn_w1
    inputs.push(suite_mat(&mut registry, 1, d)); // ffn_b1
    inputs.push(suite_mat(&mut registry, d, d)); // ffn_w2
    inputs.push(suite_mat(&mut registry, 1, d)); // ffn_b2
    let mut ln_gain = registry.uniform_mat(1, d, 0.6, 1.4);
    for v in ln_gain.data_mut() {
        *v = v.abs().max(0.6);
    }
    inputs.push(ln_gain.clone()); // ln1_gain
    inputs.push(suite_mat(&mut registry, 1, d)); // ln1_bias
    inputs.push(ln_gain); // ln2_gain
    inputs.push(suite_mat(&mut registry, 1, d)); // ln2_bias
    let weights = suite_mat(&mut registry, l, d);
    check_scalar_fn("attention_block", &inputs, move |tape, ids| {
        let refs = AttentionBlockRefs {
            wq: ids[1],
            wk: ids[2],
            wv: ids[3],
            wo: ids[4],
            ffn_w1: ids[5],
            ffn_b1: ids[6],
            ffn_w2: ids[7],
            ffn_b2: ids[8],
            ln1_gain: ids[9],
            ln1_bias: ids[10],
            ln2_gain: ids[11],
            ln2_bias: ids[12],
            heads: 2,
            attn_dropout: 0.1,
        };
        let seq = TokenSequence {
            tokens: ids[0],
            descriptors: descriptors.clone(),
            variant: PairVariant::Separate,
        };
        // Fresh identically-seeded registry per evaluation: the dropout masks
        // must repeat exactly for finite differences to be meaningful.
        let mut registry = KernelRegistry::train_mode(derive_seed(seed, &[3]));
        let (out, _maps) = attention_block(tape, &refs, &seq, &mut registry)?;
        weighted_scalar(tape, out.tokens, &weights)
    })
}

fn check_moe_aggregate(seed: u64) -> Result<CheckReport> {
    let mut registry = KernelRegistry::new(seed);
    let (n, in_dim, hidden, out, n_experts) = (6, 5, 4, 5, 3);
    let (top_k, capacity_factor) = (2, 1.0);
    let p = suite_mat(&mut registry, n, in_dim);
    let w_gate = suite_mat(&mut registry, in_dim, n_experts);
    let mut inputs = vec![p.clone(), w_gate.clone()];
    for _ in 0..n_experts {
        inputs.push(suite_mat(&mut registry, in_dim, hidden)); // w1
        inputs.push(suite_mat(&mut registry, 1, hidden)); // b1
        inputs.push(suite_mat(&mut registry, hidden, out)); // w2
        inputs.push(suite_mat(&mut registry, 1, out)); // b2
    }
    let weights = suite_mat(&mut registry, n, out);
    // Freeze routing at the unperturbed gates: selection is a discrete
    // decision, so the check differentiates only the smooth weighted mean.
    let route = {
        let mut tape = Tape::new();
        let p_id = tape.leaf(p);
        let wg_id = tape.leaf(w_gate);
        let gates = gate_scores(&mut tape, p_id, wg_id)?;
        expert_choice_route(tape.value(gates), top_k, capacity_factor)?
    };
    check_scalar_fn("moe_aggregate", &inputs, move |tape, ids| {
        let experts: Vec<ExpertRefs> = (0..n_experts)
            .map(|e| ExpertRefs {
                w1: ids[2 + 4 * e],
                b1: ids[3 + 4 * e],
                w2: ids[4 + 4 * e],
                b2: ids[5 + 4 * e],
            })
            .collect();
        let gates = gate_scores(tape, ids[0], ids[1])?;
        let mut registry = KernelRegistry::train_mode(derive_seed(seed, &[4]));
        let (fused, _record) =
            aggregate_on_tape(tape, ids[0], gates, &route, &experts, 0.15, &mut registry)?;
        weighted_scalar(tape, fused, &weights)
    })
}

fn check_focal_loss(seed: u64) -> Result<CheckReport> {
    let mut registry = KernelRegistry::new(seed);
    let logits = suite_mat(&mut registry, 4, 8);
    let labels = vec![0usize, 3, 7, 2];
    check_scalar_fn("focal_loss", &[logits], move |tape, ids| {
        let probs = tape.softmax(ids[0])?;
        focal_loss(tape, probs, &labels, 2.0)
    })
}

/// Finite-difference check of the complete training loss — encoders through
/// focal loss — against the analytic gradient of **every** model parameter.
/// Width 16, 6 tokens (separate pair mode × 3 channels), 4 experts, 8 event
/// types, a batch of 4 pairs, routing frozen at the unperturbed gates.
pub fn gradcheck_end_to_end(seed: u64) -> Result<CheckReport> {
    let synth = generate_synthetic(
        &SynthConfig { drugs: 12, events: 8, pairs: 40, d_lm: 24, ..SynthConfig::default() },
        derive_seed(seed, &[70]),
    )?;
    let bundle = Bundle::from_synthetic(&synth);
    let config = TrainConfig {
        d: 16,
        heads: 2,
        n_experts: 4,
        top_k: 2,
        neighbors: 3,
        batch_size: 4,
        dropout: 0.1,
        attn_dropout: 0.1,
        seed: derive_seed(seed, &[71]),
        ..TrainConfig::default()
    };
    let params = init_model(&bundle, &config)?;
    let pairs: Vec<(usize, usize, usize)> = bundle.pairs.pairs[..4].to_vec();
    let labels: Vec<usize> = pairs.iter().map(|&(_, _, y)| y).collect();
    let channels = bundle.channels.clone();
    let registry_seed = derive_seed(config.seed, &[TAG_DROPOUT, 0, 0]);

    // Routing frozen at the unperturbed parameters, from a forward pass whose
    // randomness matches the checker's closure exactly.
    let route = {
        let mut tape = Tape::new();
        let (refs, _) = insert_model(&mut tape, &params)?;
        let mut running = running_stats(&params);
        let mut registry = KernelRegistry::train_mode(registry_seed);
        let ctx = ForwardContext {
            bundle: &bundle,
            channels: &channels,
            donor: None,
            sample_tag: 0,
            route_override: None,
        };
        let out =
            forward_batch(&mut tape, &refs, &config, &ctx, &mut running, &mut registry, &pairs)?;
        expert_choice_route(&out.record.gates, config.top_k, config.capacity_factor)?
    };

    let mut names = Vec::new();
    let mut mats = Vec::new();
    params.visit(&mut |name, mat| {
        names.push(name.to_string());
        mats.push(mat.clone());
    });
    let shape = params.clone();
    // A wider step than the per-op default: the loss crosses thousands of ops,
    // so the difference quotient needs cancellation headroom; curvature error
    // at 5e-5 stays orders of magnitude under the tolerance.
    check_scalar_fn_with_eps("end_to_end", &mats, 5e-5, move |tape, ids| {
        let id_map: BTreeMap<String, ValueId> =
            names.iter().cloned().zip(ids.iter().copied()).collect();
        let refs = refs_from_ids(&shape, &id_map)?;
        let mut running = running_stats(&shape);
        let mut registry = KernelRegistry::train_mode(registry_seed);
        let ctx = ForwardContext {
            bundle: &bundle,
            channels: &channels,
            donor: None,
            sample_tag: 0,
            route_override: Some(&route),
        };
        let out = forward_batch(tape, &refs, &config, &ctx, &mut running, &mut registry, &pairs)?;
        focal_loss(tape, out.probs, &labels, config.focal_gamma)
    })
}

/// Every gradient check in the crate: one report per kernel op (worst of
/// several random points each), one per composite component, and the
/// end-to-end loss over all model parameters. All must satisfy
/// `CheckReport::pass` for the backward implementation to be trusted.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = op_checks(derive_seed(seed, &[80]))?;
    reports.push(check_graph_encoder(derive_seed(seed, &[81]))?);
    reports.push(check_prompt_pooler(derive_seed(seed, &[82]))?);
    reports.push(check_semantic_projector(derive_seed(seed, &[83]))?);
    reports.push(check_pair_tokens(derive_seed(seed, &[84]))?);
    reports.push(check_attention_block(derive_seed(seed, &[85]))?);
    reports.push(check_moe_aggregate(derive_seed(seed, &[86]))?);
    reports.push(check_focal_loss(derive_seed(seed, &[87]))?);
    reports.push(gradcheck_end_to_end(seed)?);
    Ok(reports)
}

/// Negative-control fixture: a loss whose backward is deliberately wrong (a
/// gradient barrier hides the quadratic term from the analytic pass, while
/// finite differences see it). Any checker that accepts this is broken.
pub fn corrupted_gradient_check() -> Result<CheckReport> {
    let a = Mat::from_vec(1, 3, vec![0.4, -0.7, 1.1])?;
    check_scalar_fn("corrupted_fixture", &[a], |tape, ids| {
        let squared = tape.mul(ids[0], ids[0])?;
        let hidden = tape.stop_grad(squared);
        let linear = tape.scale(ids[0], 0.5);
        let sum = tape.add(hidden, linear)?;
        let flat = tape.flatten(sum);
        Ok(tape.row_sum(flat))
    })
}
