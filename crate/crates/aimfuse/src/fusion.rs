//! The fusion core: multi-head self-attention block with residuals and layer
//! norm, token flattening, expert-choice mixture-of-experts aggregation, and
//! routing telemetry.

use crate::error::{Error, Result};
use crate::numkernel::{KernelRegistry, Mat, ParamBlock, Tape, ValueId};
use crate::tokenizer::{TokenDescriptor, TokenSequence};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

// ---- transformer block ----

/// One pre-softmax-scaled multi-head self-attention block:
/// A = LN(H̃ + MHA(H̃)), B = LN(A + FFN(A)). Attention dropout acts on the
/// softmax probabilities.
#[derive(Debug, Clone)]
pub struct AttentionBlockParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ffn_w1: Mat,
    pub ffn_b1: Mat,
    pub ffn_w2: Mat,
    pub ffn_b2: Mat,
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub heads: usize,
    pub attn_dropout: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionBlockRefs {
    pub wq: ValueId,
    pub wk: ValueId,
    pub wv: ValueId,
    pub wo: ValueId,
    pub ffn_w1: ValueId,
    pub ffn_b1: ValueId,
    pub ffn_w2: ValueId,
    pub ffn_b2: ValueId,
    pub ln1_gain: ValueId,
    pub ln1_bias: ValueId,
    pub ln2_gain: ValueId,
    pub ln2_bias: ValueId,
    pub heads: usize,
    pub attn_dropout: f64,
}

impl AttentionBlockParams {
    pub fn init(
        registry: &mut KernelRegistry,
        d: usize,
        d_ff: usize,
        heads: usize,
        attn_dropout: f64,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "head count {heads} must divide hidden width {d}"
            )));
        }
        if !(0.0..1.0).contains(&attn_dropout) {
            return Err(Error::Config(format!(
                "attention dropout must be in [0, 1), got {attn_dropout}"
            )));
        }
        Ok(AttentionBlockParams {
            wq: crate::encoders::init_weight(registry, d, d),
            wk: crate::encoders::init_weight(registry, d, d),
            wv: crate::encoders::init_weight(registry, d, d),
            wo: crate::encoders::init_weight(registry, d, d),
            ffn_w1: crate::encoders::init_weight(registry, d, d_ff),
            ffn_b1: Mat::zeros(1, d_ff),
            ffn_w2: crate::encoders::init_weight(registry, d_ff, d),
            ffn_b2: Mat::zeros(1, d),
            ln1_gain: Mat::filled(1, d, 1.0),
            ln1_bias: Mat::zeros(1, d),
            ln2_gain: Mat::filled(1, d, 1.0),
            ln2_bias: Mat::zeros(1, d),
            heads,
            attn_dropout,
        })
    }

    pub fn insert(&self, tape: &mut Tape) -> AttentionBlockRefs {
        AttentionBlockRefs {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
            ffn_w1: tape.leaf(self.ffn_w1.clone()),
            ffn_b1: tape.leaf(self.ffn_b1.clone()),
            ffn_w2: tape.leaf(self.ffn_w2.clone()),
            ffn_b2: tape.leaf(self.ffn_b2.clone()),
            ln1_gain: tape.leaf(self.ln1_gain.clone()),
            ln1_bias: tape.leaf(self.ln1_bias.clone()),
            ln2_gain: tape.leaf(self.ln2_gain.clone()),
            ln2_bias: tape.leaf(self.ln2_bias.clone()),
            heads: self.heads,
            attn_dropout: self.attn_dropout,
        }
    }
}

impl ParamBlock for AttentionBlockParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        f("wq", &self.wq);
        f("wk", &self.wk);
        f("wv", &self.wv);
        f("wo", &self.wo);
        f("ffn_w1", &self.ffn_w1);
        f("ffn_b1", &self.ffn_b1);
        f("ffn_w2", &self.ffn_w2);
        f("ffn_b2", &self.ffn_b2);
        f("ln1_gain", &self.ln1_gain);
        f("ln1_bias", &self.ln1_bias);
        f("ln2_gain", &self.ln2_gain);
        f("ln2_bias", &self.ln2_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("wq", &mut self.wq);
        f("wk", &mut self.wk);
        f("wv", &mut self.wv);
        f("wo", &mut self.wo);
        f("ffn_w1", &mut self.ffn_w1);
        f("ffn_b1", &mut self.ffn_b1);
        f("ffn_w2", &mut self.ffn_w2);
        f("ffn_b2", &mut self.ffn_b2);
        f("ln1_gain", &mut self.ln1_gain);
        f("ln1_bias", &mut self.ln1_bias);
        f("ln2_gain", &mut self.ln2_gain);
        f("ln2_bias", &mut self.ln2_bias);
    }
}

/// Run the block on one token sequence. Returns the transformed sequence and
/// the per-head attention maps (L×L softmax values, pre-dropout) for
/// telemetry. Dropout is active only when the registry is in training mode.
pub fn attention_block(
    tape: &mut Tape,
    refs: &AttentionBlockRefs,
    seq: &TokenSequence,
    registry: &mut KernelRegistry,
) -> Result<(TokenSequence, Vec<ValueId>)> {
    let (l, d) = tape.value(seq.tokens).shape();
    if l == 0 {
        return Err(Error::Domain("attention over an empty sequence".into()));
    }
    if d % refs.heads != 0 {
        return Err(Error::Shape {
            op: "attention_block",
            detail: format!("width {d} not divisible by {} heads", refs.heads),
        });
    }
    let dh = d / refs.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(seq.tokens, refs.wq)?;
    let k = tape.matmul(seq.tokens, refs.wk)?;
    let v = tape.matmul(seq.tokens, refs.wv)?;

    let mut attn_maps = Vec::with_capacity(refs.heads);
    let mut head_outs = Vec::with_capacity(refs.heads);
    for head in 0..refs.heads {
        let qh = tape.cols_slice(q, head * dh, dh)?;
        let kh = tape.cols_slice(k, head * dh, dh)?;
        let vh = tape.cols_slice(v, head * dh, dh)?;
        let kt = tape.transpose(kh);
        let raw = tape.matmul(qh, kt)?;
        let scaled = tape.scale(raw, scale);
        let attn = tape.softmax(scaled)?;
        attn_maps.push(attn);
        let dropped = tape.dropout(attn, refs.attn_dropout, registry)?;
        head_outs.push(tape.matmul(dropped, vh)?);
    }
    let mut concat = head_outs[0];
    for &h in &head_outs[1..] {
        concat = tape.hconcat(concat, h)?;
    }
    let mha = tape.matmul(concat, refs.wo)?;
    let res1 = tape.add(seq.tokens, mha)?;
    let a = tape.layer_norm(res1, refs.ln1_gain, refs.ln1_bias, LN_EPS)?;

    let pre = tape.matmul(a, refs.ffn_w1)?;
    let pre = tape.add_bias(pre, refs.ffn_b1)?;
    let hidden = tape.relu(pre);
    let ffn = tape.matmul(hidden, refs.ffn_w2)?;
    let ffn = tape.add_bias(ffn, refs.ffn_b2)?;
    let res2 = tape.add(a, ffn)?;
    let b = tape.layer_norm(res2, refs.ln2_gain, refs.ln2_bias, LN_EPS)?;

    Ok((
        TokenSequence {
            tokens: b,
            descriptors: seq.descriptors.clone(),
            variant: seq.variant,
        },
        attn_maps,
    ))
}

/// p = Flatten(B): row-major concatenation of the token rows, 1×(L·d).
pub fn flatten_tokens(tape: &mut Tape, seq: &TokenSequence) -> ValueId {
    tape.flatten(seq.tokens)
}

// ---- mixture of experts ----

/// One expert FFN: o = W² relu(W¹ p + b¹) + b².
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertRefs {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

impl ExpertParams {
    pub fn init(registry: &mut KernelRegistry, in_dim: usize, hidden: usize, out: usize) -> Self {
        ExpertParams {
            w1: crate::encoders::init_weight(registry, in_dim, hidden),
            b1: Mat::zeros(1, hidden),
            w2: crate::encoders::init_weight(registry, hidden, out),
            b2: Mat::zeros(1, out),
        }
    }

    pub fn insert(&self, tape: &mut Tape) -> ExpertRefs {
        ExpertRefs {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }
}

impl ParamBlock for ExpertParams {
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

/// Gate plus expert bank with the expert-choice routing hyperparameters.
#[derive(Debug, Clone)]
pub struct MoEParams {
    pub w_gate: Mat,
    pub experts: Vec<ExpertParams>,
    pub k: usize,
    pub c: f64,
}

impl MoEParams {
    pub fn init(
        registry: &mut KernelRegistry,
        in_dim: usize,
        hidden: usize,
        out: usize,
        n_experts: usize,
        k: usize,
        c: f64,
    ) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Config("expert count must be ≥ 1".into()));
        }
        if k == 0 || k > n_experts {
            return Err(Error::Config(format!(
                "top-k {k} must satisfy 1 ≤ k ≤ {n_experts} experts"
            )));
        }
        if !(c > 0.0) {
            return Err(Error::Config(format!("capacity factor must be > 0, got {c}")));
        }
        Ok(MoEParams {
            w_gate: crate::encoders::init_weight(registry, in_dim, n_experts),
            experts: (0..n_experts)
                .map(|_| ExpertParams::init(registry, in_dim, hidden, out))
                .collect(),
            k,
            c,
        })
    }

    pub fn insert(&self, tape: &mut Tape) -> (ValueId, Vec<ExpertRefs>) {
        let gate = tape.leaf(self.w_gate.clone());
        let experts = self.experts.iter().map(|e| e.insert(tape)).collect();
        (gate, experts)
    }
}

impl ParamBlock for MoEParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        f("w_gate", &self.w_gate);
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&mut |name, m| f(&format!("expert_{i}.{name}"), m));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("w_gate", &mut self.w_gate);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&mut |name, m| f(&format!("expert_{i}.{name}"), m));
        }
    }
}

/// Gate probabilities: softmax(p · W_gate) per instance row.
pub fn gate_scores(tape: &mut Tape, p: ValueId, w_gate: ValueId) -> Result<ValueId> {
    let logits = tape.matmul(p, w_gate)?;
    tape.softmax(logits)
}

/// Expert-choice capacity: ceil(k·N·c/E).
pub fn expert_capacity(n: usize, n_experts: usize, k: usize, c: f64) -> usize {
    ((k as f64) * (n as f64) * c / (n_experts as f64)).ceil() as usize
}

/// The (frozen) outcome of expert-choice routing on a batch.
#[derive(Debug, Clone)]
pub struct RouteResult {
    pub capacity: usize,
    /// Per expert: instances chosen in the selection phase, ascending
    /// (exactly min(capacity, N) each).
    pub selected: Vec<Vec<usize>>,
    /// Per expert: selected plus fallback-assigned instances, ascending.
    pub assignments: Vec<Vec<usize>>,
    /// Per instance: experts that take it, ascending. Nonempty post-fallback.
    pub selectors: Vec<Vec<usize>>,
    /// Per instance: true when no expert picked it in the selection phase.
    pub fallback: Vec<bool>,
}

/// Route a batch: each expert keeps its top-min(capacity, N) instances by its
/// gate column (ties → lower instance index); an instance no expert picked is
/// flagged and assigned to its argmax-gate expert over capacity. Selection is
/// a function of the gate values only — it carries no gradient.
pub fn expert_choice_route(gates: &Mat, k: usize, c: f64) -> Result<RouteResult> {
    let (n, n_experts) = gates.shape();
    if n == 0 || n_experts == 0 {
        return Err(Error::Domain("expert_choice_route on an empty gate matrix".into()));
    }
    let capacity = expert_capacity(n, n_experts, k, c);
    let take = capacity.min(n);
    let mut selected = vec![Vec::with_capacity(take); n_experts];
    let mut selectors = vec![Vec::new(); n];
    for e in 0..n_experts {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            gates
                .get(b, e)
                .partial_cmp(&gates.get(a, e))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = order[..take].to_vec();
        chosen.sort_unstable();
        for &i in &chosen {
            selectors[i].push(e);
        }
        selected[e] = chosen;
    }

    let mut assignments = selected.clone();
    let mut fallback = vec![false; n];
    for i in 0..n {
        if selectors[i].is_empty() {
            let mut best = 0;
            for e in 1..n_experts {
                if gates.get(i, e) > gates.get(i, best) {
                    best = e;
                }
            }
            fallback[i] = true;
            selectors[i] = vec![best];
            assignments[best].push(i);
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(RouteResult { capacity, selected, assignments, selectors, fallback })
}

/// Run one expert on a batch of flattened instances (rows). Dropout applies
/// to the hidden activation in training mode.
pub fn expert_forward(
    tape: &mut Tape,
    refs: &ExpertRefs,
    p: ValueId,
    dropout: f64,
    registry: &mut KernelRegistry,
) -> Result<ValueId> {
    let pre = tape.matmul(p, refs.w1)?;
    let pre = tape.add_bias(pre, refs.b1)?;
    let hidden = tape.relu(pre);
    let hidden = tape.dropout(hidden, dropout, registry)?;
    let out = tape.matmul(hidden, refs.w2)?;
    tape.add_bias(out, refs.b2)
}

/// Per-batch routing telemetry.
#[derive(Debug, Clone)]
pub struct RoutingRecord {
    pub capacity: usize,
    /// N×E gate values.
    pub gates: Mat,
    /// Per instance: experts in S_i, ascending.
    pub selectors: Vec<Vec<usize>>,
    /// Per instance: reached only through the fallback path.
    pub fallback: Vec<bool>,
    /// Per instance: argmax-gate expert within S_i (ties → lower expert id).
    pub assigned: Vec<usize>,
    /// Per instance: normalized weights over S_i, summing to 1.
    pub provenance: Vec<Vec<f64>>,
    /// Per expert: selection-phase count (≤ capacity).
    pub selected_counts: Vec<usize>,
    /// Per expert: instances assigned to it (sums to N).
    pub assigned_counts: Vec<usize>,
}

/// Fuse expert outputs per Eq.-10 semantics on the tape:
/// z_i = Σ_{e∈S_i} g_{i,e} f_e(p_i) / Σ_{e∈S_i} g_{i,e}.
/// Routing (`route`) is decided outside and stays frozen; the gate values
/// inside the weighted mean remain differentiable.
pub fn aggregate_on_tape(
    tape: &mut Tape,
    p: ValueId,
    gates: ValueId,
    route: &RouteResult,
    experts: &[ExpertRefs],
    dropout: f64,
    registry: &mut KernelRegistry,
) -> Result<(ValueId, RoutingRecord)> {
    let (n, n_experts) = tape.value(gates).shape();
    if n_experts != experts.len() || route.assignments.len() != experts.len() {
        return Err(Error::Shape {
            op: "aggregate_experts",
            detail: format!(
                "{} gate columns, {} experts, {} routed sets",
                n_experts,
                experts.len(),
                route.assignments.len()
            ),
        });
    }
    if route.selectors.len() != n {
        return Err(Error::Shape {
            op: "aggregate_experts",
            detail: format!("{} selector sets for {n} instances", route.selectors.len()),
        });
    }

    // Mask of S_i membership; constant w.r.t. gradients.
    let mut mask = Mat::zeros(n, n_experts);
    for (i, sel) in route.selectors.iter().enumerate() {
        if sel.is_empty() {
            return Err(Error::Domain(format!("instance {i} has an empty selector set")));
        }
        for &e in sel {
            mask.set(i, e, 1.0);
        }
    }
    let mask_id = tape.leaf(mask);
    let masked = tape.mul(gates, mask_id)?;
    let denom = tape.row_sum(masked);
    let inv = tape.recip(denom);

    let mut fused: Option<ValueId> = None;
    for (e, expert) in experts.iter().enumerate() {
        let rows = &route.assignments[e];
        if rows.is_empty() {
            continue;
        }
        let p_e = tape.gather_rows(p, rows)?;
        let o_e = expert_forward(tape, expert, p_e, dropout, registry)?;
        let z_e = tape.scatter_rows(o_e, rows, n)?;
        let gate_col = tape.cols_slice(masked, e, 1)?;
        let weight = tape.mul(gate_col, inv)?;
        let term = tape.mul_col(z_e, weight)?;
        fused = Some(match fused {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let fused = fused.ok_or_else(|| Error::Domain("no expert received any instance".into()))?;

    let gate_values = tape.value(gates).clone();
    let mut assigned = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for (i, sel) in route.selectors.iter().enumerate() {
        let mut best = sel[0];
        let mut total = 0.0;
        for &e in sel {
            if gate_values.get(i, e) > gate_values.get(i, best) {
                best = e;
            }
            total += gate_values.get(i, e);
        }
        assigned.push(best);
        provenance.push(sel.iter().map(|&e| gate_values.get(i, e) / total).collect());
    }
    let selected_counts = route.selected.iter().map(|s| s.len()).collect();
    let mut assigned_counts = vec![0usize; n_experts];
    for &e in &assigned {
        assigned_counts[e] += 1;
    }
    let record = RoutingRecord {
        capacity: route.capacity,
        gates: gate_values,
        selectors: route.selectors.clone(),
        fallback: route.fallback.clone(),
        assigned,
        provenance,
        selected_counts,
        assigned_counts,
    };
    Ok((fused, record))
}

// ---- contribution scores ----

/// Per-token and per-channel attention-mass contributions.
#[derive(Debug, Clone)]
pub struct ContributionReport {
    /// Mean attention mass received per token; sums to 1.
    pub per_token: Vec<f64>,
    /// Sum of the constituent tokens' scores per channel id.
    pub per_channel: Vec<f64>,
}

/// Token contribution = mean over heads and query positions of the attention
/// mass the token receives in the final block's maps.
pub fn modality_contribution(attn: &[Mat], descriptors: &[TokenDescriptor]) -> Result<ContributionReport> {
    if attn.is_empty() {
        return Err(Error::Domain("no attention maps provided".into()));
    }
    let l = descriptors.len();
    for map in attn {
        if map.shape() != (l, l) {
            return Err(Error::Shape {
                op: "modality_contribution",
                detail: format!("attention map {:?} for {l} tokens", map.shape()),
            });
        }
    }
    let mut per_token = vec![0.0; l];
    for map in attn {
        for q in 0..l {
            for (t, score) in per_token.iter_mut().enumerate() {
                *score += map.get(q, t);
            }
        }
    }
    let norm = (attn.len() * l) as f64;
    for s in &mut per_token {
        *s /= norm;
    }
    let n_channels = descriptors.iter().map(|d| d.channel + 1).max().unwrap_or(0);
    let mut per_channel = vec![0.0; n_channels];
    for (t, descriptor) in descriptors.iter().enumerate() {
        per_channel[descriptor.channel] += per_token[t];
    }
    Ok(ContributionReport { per_token, per_channel })
}

// ---- telemetry export ----

/// One exported routing-telemetry line.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub id: usize,
    pub assigned: usize,
    pub gates: Vec<f64>,
    pub selectors: Vec<usize>,
    pub contributions: Vec<f64>,
}

impl RoutingRecord {
    /// Assemble telemetry rows: `ids` are the caller's instance identifiers,
    /// `contributions` the per-instance per-token contribution scores.
    pub fn rows(&self, ids: &[usize], contributions: &[Vec<f64>]) -> Result<Vec<TelemetryRow>> {
        let n = self.selectors.len();
        if ids.len() != n || contributions.len() != n {
            return Err(Error::Shape {
                op: "telemetry_rows",
                detail: format!("{} ids / {} contribution sets for {n} instances", ids.len(), contributions.len()),
            });
        }
        Ok((0..n)
            .map(|i| TelemetryRow {
                id: ids[i],
                assigned: self.assigned[i],
                gates: self.gates.row_slice(i).to_vec(),
                selectors: self.selectors[i].clone(),
                contributions: contributions[i].clone(),
            })
            .collect())
    }
}

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

/// Tab-separated telemetry: one instance per line — instance id, assigned
/// expert, comma-joined gate vector, comma-joined selector set, comma-joined
/// per-token contributions.
pub fn write_telemetry(rows: &[TelemetryRow]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.id,
            row.assigned,
            join_floats(&row.gates),
            row.selectors.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            join_floats(&row.contributions),
        ));
    }
    out
}

/// Inverse of `write_telemetry`.
pub fn parse_telemetry_str(text: &str, source: &str) -> Result<Vec<TelemetryRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let parse_err = |msg: String| Error::Parse {
            source_name: source.to_string(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 tab-separated fields, got {}", fields.len())));
        }
        let id = fields[0].parse().map_err(|_| parse_err(format!("bad instance id '{}'", fields[0])))?;
        let assigned = fields[1].parse().map_err(|_| parse_err(format!("bad expert id '{}'", fields[1])))?;
        let gates = fields[2]
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| parse_err(format!("bad gate '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        let selectors = fields[3]
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| parse_err(format!("bad selector '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        let contributions = fields[4]
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| parse_err(format!("bad contribution '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(TelemetryRow { id, assigned, gates, selectors, contributions });
    }
    Ok(rows)
}
