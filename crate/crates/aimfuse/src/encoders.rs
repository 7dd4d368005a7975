//! Per-drug, per-modality representation encoders: relation-aware graph
//! aggregation, prompt attention pooling, semantic projection into the shared
//! hidden space, and test-time donor substitution for unseen drugs.

use crate::error::{Error, Result};
use crate::kgdata::Neighbor;
use crate::numkernel::{KernelRegistry, Mat, ParamBlock, Tape, ValueId};

/// Batch-norm momentum for the semantic projector's running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Initialize a weight matrix uniformly in ±1/√fan_in.
pub(crate) fn init_weight(registry: &mut KernelRegistry, fan_in: usize, fan_out: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    registry.uniform_mat(fan_in, fan_out, -bound, bound)
}

// ---- graph channel encoder ----

/// Parameters of one graph-channel encoder: embedding tables plus the
/// projection from [drug ‖ attention-aggregated neighborhood] to width d.
/// The relation table carries one extra final row, the reserved self-relation
/// used when an isolated drug falls back to its self-pair.
#[derive(Debug, Clone)]
pub struct GraphEncoderParams {
    pub drug_table: Mat,
    pub entity_table: Mat,
    pub relation_table: Mat,
    pub w_g: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphEncoderRefs {
    pub drug_table: ValueId,
    pub entity_table: ValueId,
    pub relation_table: ValueId,
    pub w_g: ValueId,
}

impl GraphEncoderParams {
    pub fn init(
        registry: &mut KernelRegistry,
        n_drugs: usize,
        n_entities: usize,
        n_relations: usize,
        d_emb: usize,
        d: usize,
    ) -> Self {
        let bound = 1.0 / (d_emb as f64).sqrt();
        GraphEncoderParams {
            drug_table: registry.uniform_mat(n_drugs, d_emb, -bound, bound),
            entity_table: registry.uniform_mat(n_entities, d_emb, -bound, bound),
            relation_table: registry.uniform_mat(n_relations + 1, d_emb, -bound, bound),
            w_g: init_weight(registry, 2 * d_emb, d),
        }
    }

    pub fn insert(&self, tape: &mut Tape) -> GraphEncoderRefs {
        GraphEncoderRefs {
            drug_table: tape.leaf(self.drug_table.clone()),
            entity_table: tape.leaf(self.entity_table.clone()),
            relation_table: tape.leaf(self.relation_table.clone()),
            w_g: tape.leaf(self.w_g.clone()),
        }
    }
}

impl ParamBlock for GraphEncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        f("drug_table", &self.drug_table);
        f("entity_table", &self.entity_table);
        f("relation_table", &self.relation_table);
        f("w_g", &self.w_g);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("drug_table", &mut self.drug_table);
        f("entity_table", &mut self.entity_table);
        f("relation_table", &mut self.relation_table);
        f("w_g", &mut self.w_g);
    }
}

/// Encode one drug from its sampled neighborhood:
/// h = W_g · [d_u ‖ Σ_a α_a e_a], α = softmax(d_uᵀ(e_a + r_a)/√d_emb) over
/// the sampled neighbors. Self-pair neighbors use the drug's own embedding as
/// the entity and the reserved self-relation row. Returns a 1×d value.
pub fn encode_graph_drug(
    tape: &mut Tape,
    refs: &GraphEncoderRefs,
    drug: usize,
    neighbors: &[Neighbor],
) -> Result<ValueId> {
    if neighbors.is_empty() {
        return Err(Error::Domain("encode_graph_drug needs ≥1 sampled neighbor".into()));
    }
    let d_emb = tape.value(refs.drug_table).cols();
    let d_u = tape.gather_rows(refs.drug_table, &[drug])?;

    let is_self = matches!(neighbors[0], Neighbor::SelfPair);
    let mut entity_ids = Vec::with_capacity(neighbors.len());
    let mut relation_ids = Vec::with_capacity(neighbors.len());
    let self_relation = tape.value(refs.relation_table).rows() - 1;
    for n in neighbors {
        match *n {
            Neighbor::Edge { relation, entity } => {
                if is_self {
                    return Err(Error::Domain("mixed self-pair and edge neighbors".into()));
                }
                entity_ids.push(entity);
                relation_ids.push(relation);
            }
            Neighbor::SelfPair => {
                if !is_self {
                    return Err(Error::Domain("mixed self-pair and edge neighbors".into()));
                }
                entity_ids.push(drug);
                relation_ids.push(self_relation);
            }
        }
    }
    let entity_rows = if is_self {
        tape.gather_rows(refs.drug_table, &entity_ids)?
    } else {
        tape.gather_rows(refs.entity_table, &entity_ids)?
    };
    let relation_rows = tape.gather_rows(refs.relation_table, &relation_ids)?;

    let combined = tape.add(entity_rows, relation_rows)?;
    let d_u_col = tape.transpose(d_u);
    let raw = tape.matmul(combined, d_u_col)?;
    let scaled = tape.scale(raw, 1.0 / (d_emb as f64).sqrt());
    let scores = tape.transpose(scaled);
    let alpha = tape.softmax(scores)?;
    let aggregate = tape.matmul(alpha, entity_rows)?;
    let concat = tape.hconcat(d_u, aggregate)?;
    tape.matmul(concat, refs.w_g)
}

// ---- prompt attention pooling ----

/// Attention pooler over a drug's prompt embedding vectors:
/// a_k = qᵀ tanh(W_att e_k), α = softmax(a), s = Σ_k α_k e_k.
#[derive(Debug, Clone)]
pub struct PromptPoolerParams {
    pub w_att: Mat,
    pub q: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct PromptPoolerRefs {
    pub w_att: ValueId,
    pub q: ValueId,
}

impl PromptPoolerParams {
    pub fn init(registry: &mut KernelRegistry, d_lm: usize, d_att: usize) -> Self {
        PromptPoolerParams {
            w_att: init_weight(registry, d_lm, d_att),
            q: init_weight(registry, d_att, 1),
        }
    }

    pub fn insert(&self, tape: &mut Tape) -> PromptPoolerRefs {
        PromptPoolerRefs {
            w_att: tape.leaf(self.w_att.clone()),
            q: tape.leaf(self.q.clone()),
        }
    }
}

impl ParamBlock for PromptPoolerParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        f("w_att", &self.w_att);
        f("q", &self.q);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("w_att", &mut self.w_att);
        f("q", &mut self.q);
    }
}

/// Pool a K×d_LM matrix of prompt embeddings into one 1×d_LM vector. The
/// output is a convex combination of the rows.
pub fn pool_prompts(tape: &mut Tape, refs: &PromptPoolerRefs, prompts: ValueId) -> Result<ValueId> {
    if tape.value(prompts).rows() == 0 {
        return Err(Error::Domain("pool_prompts needs ≥1 prompt vector".into()));
    }
    let hidden = tape.matmul(prompts, refs.w_att)?;
    let t = tape.tanh(hidden);
    let raw = tape.matmul(t, refs.q)?;
    let scores = tape.transpose(raw);
    let alpha = tape.softmax(scores)?;
    tape.matmul(alpha, prompts)
}

// ---- semantic projection ----

/// Projection of a pooled prompt vector into the shared hidden space:
/// relu(BN(W_s · s)). Batch-norm running statistics live here (state, not a
/// learnable parameter).
#[derive(Debug, Clone)]
pub struct SemanticProjectorParams {
    pub w_s: Mat,
    pub gain: Mat,
    pub bias: Mat,
    /// Row 0: running means; row 1: running variances.
    pub running: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct SemanticProjectorRefs {
    pub w_s: ValueId,
    pub gain: ValueId,
    pub bias: ValueId,
}

impl SemanticProjectorParams {
    pub fn init(registry: &mut KernelRegistry, d_lm: usize, d: usize) -> Self {
        let mut running = Mat::zeros(2, d);
        for c in 0..d {
            running.set(1, c, 1.0);
        }
        SemanticProjectorParams {
            w_s: init_weight(registry, d_lm, d),
            gain: Mat::filled(1, d, 1.0),
            bias: Mat::zeros(1, d),
            running,
        }
    }

    pub fn insert(&self, tape: &mut Tape) -> SemanticProjectorRefs {
        SemanticProjectorRefs {
            w_s: tape.leaf(self.w_s.clone()),
            gain: tape.leaf(self.gain.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

impl ParamBlock for SemanticProjectorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        f("w_s", &self.w_s);
        f("gain", &self.gain);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("w_s", &mut self.w_s);
        f("gain", &mut self.gain);
        f("bias", &mut self.bias);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Mat)) {
        f("running", &self.running);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("running", &mut self.running);
    }
}

/// Project pooled semantic vectors (n×d_LM, one row per drug) into the shared
/// space. Training mode with n > 1 normalizes with batch statistics and
/// updates `running` in place; otherwise the running statistics are used.
pub fn project_semantic(
    tape: &mut Tape,
    refs: &SemanticProjectorRefs,
    pooled: ValueId,
    running: &mut Mat,
    registry: &KernelRegistry,
) -> Result<ValueId> {
    let x = tape.matmul(pooled, refs.w_s)?;
    let bn = tape.batch_norm(x, refs.gain, refs.bias, running, BN_MOMENTUM, BN_EPS, registry)?;
    Ok(tape.relu(bn))
}

// ---- test-time substitution ----

/// Pick the donor drug for an unseen query: the training drug whose row of
/// `semantic` (n_drugs × dim, the designated modality's embedding per drug)
/// has the highest cosine similarity to the query's row. A query already in
/// the train set is its own donor; exact ties go to the lowest drug id.
pub fn substitute_unseen(drug: usize, train_drugs: &[usize], semantic: &Mat) -> Result<usize> {
    if train_drugs.is_empty() {
        return Err(Error::Domain("substitute_unseen with an empty train set".into()));
    }
    if drug >= semantic.rows() {
        return Err(Error::Domain(format!(
            "drug {drug} has no semantic embedding ({} rows)",
            semantic.rows()
        )));
    }
    if train_drugs.contains(&drug) {
        return Ok(drug);
    }
    let query = semantic.row_slice(drug);
    let mut candidates: Vec<usize> = train_drugs.to_vec();
    candidates.sort_unstable();
    let mut best = candidates[0];
    let mut best_sim = f64::NEG_INFINITY;
    for &t in &candidates {
        if t >= semantic.rows() {
            return Err(Error::Domain(format!(
                "train drug {t} has no semantic embedding ({} rows)",
                semantic.rows()
            )));
        }
        let sim = cosine(query, semantic.row_slice(t));
        if sim > best_sim {
            best_sim = sim;
            best = t;
        }
    }
    Ok(best)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ---- prompt text export ----

/// The verbatim prompt templates, keyed by modality, for producing prompt
/// embeddings with an external encoder.
pub const PROMPT_TEMPLATES: [(&str, &str); 3] = [
    ("biorel", "A drug is associated with target gene [GENE]."),
    ("molsub", "A drug includes molecular substructure [SUBSTRUCTURE]."),
    ("ddigraph", "A drug has interaction [RELATION] with drug [DRUG]."),
];

/// One `modality<TAB>template` line per modality.
pub fn export_prompt_templates() -> String {
    let mut out = String::new();
    for (modality, template) in PROMPT_TEMPLATES {
        out.push_str(modality);
        out.push('\t');
        out.push_str(template);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{check_scalar_fn, weighted_scalar, GRAD_REL_TOL};

    fn edge(relation: usize, entity: usize) -> Neighbor {
        Neighbor::Edge { relation, entity }
    }

    fn fixed_graph_params() -> GraphEncoderParams {
        // d_emb = 2, d = 2, 2 drugs, 3 entities, 2 relations (+ self row).
        GraphEncoderParams {
            drug_table: Mat::from_vec(2, 2, vec![0.3, -0.2, 0.1, 0.4]).unwrap(),
            entity_table: Mat::from_vec(3, 2, vec![0.5, 0.1, -0.3, 0.2, 0.7, -0.6]).unwrap(),
            relation_table: Mat::from_vec(3, 2, vec![0.2, 0.2, -0.1, 0.3, 0.05, -0.05]).unwrap(),
            w_g: Mat::from_vec(4, 2, vec![0.1, 0.2, 0.3, -0.1, -0.2, 0.4, 0.5, 0.6]).unwrap(),
        }
    }

    #[test]
    fn single_neighbor_uses_that_entity() {
        let params = fixed_graph_params();
        let mut tape = Tape::new();
        let refs = params.insert(&mut tape);
        let h = encode_graph_drug(&mut tape, &refs, 0, &[edge(1, 2)]).unwrap();
        // α = [1] ⇒ h = [d_0 ‖ e_2] · W_g.
        let d0 = [0.3, -0.2];
        let e2 = [0.7, -0.6];
        let cat = [d0[0], d0[1], e2[0], e2[1]];
        for c in 0..2 {
            let expect: f64 = (0..4).map(|i| cat[i] * params.w_g.get(i, c)).sum();
            assert!((tape.value(h).get(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_tables_give_zero_output() {
        let params = GraphEncoderParams {
            drug_table: Mat::zeros(2, 2),
            entity_table: Mat::zeros(3, 2),
            relation_table: Mat::zeros(3, 2),
            w_g: Mat::zeros(4, 2),
        };
        let mut tape = Tape::new();
        let refs = params.insert(&mut tape);
        let h = encode_graph_drug(&mut tape, &refs, 1, &[edge(0, 0), edge(1, 1)]).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
    }

    #[test]
    fn two_neighbor_hand_oracle() {
        let params = fixed_graph_params();
        let neighbors = [edge(0, 0), edge(1, 1)];
        let mut tape = Tape::new();
        let refs = params.insert(&mut tape);
        let h = encode_graph_drug(&mut tape, &refs, 0, &neighbors).unwrap();

        // Plain-f64 oracle of score → softmax → weighted sum → concat → project.
        let d0 = [0.3, -0.2];
        let e = [[0.5, 0.1], [-0.3, 0.2]];
        let r = [[0.2, 0.2], [-0.1, 0.3]];
        let scale = 1.0 / 2f64.sqrt();
        let mut scores = [0.0; 2];
        for a in 0..2 {
            scores[a] = (d0[0] * (e[a][0] + r[a][0]) + d0[1] * (e[a][1] + r[a][1])) * scale;
        }
        let m = scores[0].max(scores[1]);
        let exps = [(scores[0] - m).exp(), (scores[1] - m).exp()];
        let z = exps[0] + exps[1];
        let alpha = [exps[0] / z, exps[1] / z];
        assert!((alpha[0] + alpha[1] - 1.0).abs() < 1e-12);
        let agg = [
            alpha[0] * e[0][0] + alpha[1] * e[1][0],
            alpha[0] * e[0][1] + alpha[1] * e[1][1],
        ];
        let cat = [d0[0], d0[1], agg[0], agg[1]];
        for c in 0..2 {
            let expect: f64 = (0..4).map(|i| cat[i] * params.w_g.get(i, c)).sum();
            assert!((tape.value(h).get(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn neighbor_order_is_irrelevant() {
        let params = fixed_graph_params();
        let fwd = [edge(0, 0), edge(1, 1), edge(0, 2)];
        let rev = [edge(0, 2), edge(1, 1), edge(0, 0)];
        let mut t1 = Tape::new();
        let r1 = params.insert(&mut t1);
        let h1 = encode_graph_drug(&mut t1, &r1, 0, &fwd).unwrap();
        let mut t2 = Tape::new();
        let r2 = params.insert(&mut t2);
        let h2 = encode_graph_drug(&mut t2, &r2, 0, &rev).unwrap();
        assert!(t1.value(h1).max_abs_diff(t2.value(h2)) < 1e-12);
    }

    #[test]
    fn self_pair_fallback_uses_drug_embedding_and_self_relation() {
        let params = fixed_graph_params();
        let mut tape = Tape::new();
        let refs = params.insert(&mut tape);
        let h = encode_graph_drug(&mut tape, &refs, 1, &[Neighbor::SelfPair; 3]).unwrap();
        // All neighbors identical ⇒ aggregate = the drug's own embedding.
        let d1 = [0.1, 0.4];
        let cat = [d1[0], d1[1], d1[0], d1[1]];
        for c in 0..2 {
            let expect: f64 = (0..4).map(|i| cat[i] * params.w_g.get(i, c)).sum();
            assert!((tape.value(h).get(0, c) - expect).abs() < 1e-12);
        }
        // Mixed kinds are rejected.
        assert!(encode_graph_drug(&mut tape, &refs, 1, &[Neighbor::SelfPair, edge(0, 0)]).is_err());
    }

    #[test]
    fn graph_encoder_gradients_match_finite_differences() {
        let params = fixed_graph_params();
        let neighbors = vec![edge(0, 0), edge(1, 1), edge(0, 2)];
        let inputs = [
            params.drug_table.clone(),
            params.entity_table.clone(),
            params.relation_table.clone(),
            params.w_g.clone(),
        ];
        let weights = Mat::from_vec(1, 2, vec![0.7, -1.3]).unwrap();
        let report = check_scalar_fn("encode_graph_drug", &inputs, |tape, ids| {
            let refs = GraphEncoderRefs {
                drug_table: ids[0],
                entity_table: ids[1],
                relation_table: ids[2],
                w_g: ids[3],
            };
            let h = encode_graph_drug(tape, &refs, 0, &neighbors)?;
            weighted_scalar(tape, h, &weights)
        })
        .unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    fn fixed_pooler() -> PromptPoolerParams {
        PromptPoolerParams {
            w_att: Mat::from_vec(3, 2, vec![0.2, -0.4, 0.5, 0.3, -0.1, 0.6]).unwrap(),
            q: Mat::from_vec(2, 1, vec![0.8, -0.5]).unwrap(),
        }
    }

    #[test]
    fn pooling_one_prompt_is_identity() {
        let pooler = fixed_pooler();
        let mut tape = Tape::new();
        let refs = pooler.insert(&mut tape);
        let prompts = tape.leaf(Mat::from_vec(1, 3, vec![0.3, -0.7, 0.2]).unwrap());
        let s = pool_prompts(&mut tape, &refs, prompts).unwrap();
        assert_eq!(tape.value(s).data(), &[0.3, -0.7, 0.2]);
    }

    #[test]
    fn pooling_identical_prompts_is_fixed_point() {
        let pooler = fixed_pooler();
        let mut tape = Tape::new();
        let refs = pooler.insert(&mut tape);
        let row = [0.4, 0.1, -0.2];
        let prompts = tape.leaf(Mat::from_vec(3, 3, row.repeat(3)).unwrap());
        let s = pool_prompts(&mut tape, &refs, prompts).unwrap();
        for c in 0..3 {
            assert!((tape.value(s).get(0, c) - row[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_two_prompts_matches_hand_oracle_and_convex_hull() {
        let pooler = fixed_pooler();
        let rows = [[1.0, 0.0, -1.0], [0.2, 0.6, 0.4]];
        let mut tape = Tape::new();
        let refs = pooler.insert(&mut tape);
        let prompts = tape.leaf(Mat::from_vec(2, 3, rows.concat()).unwrap());
        let s = pool_prompts(&mut tape, &refs, prompts).unwrap();

        let mut a = [0.0; 2];
        for (k, row) in rows.iter().enumerate() {
            for j in 0..2 {
                let pre: f64 = (0..3).map(|i| row[i] * pooler.w_att.get(i, j)).sum();
                a[k] += pre.tanh() * pooler.q.get(j, 0);
            }
        }
        let m = a[0].max(a[1]);
        let z = (a[0] - m).exp() + (a[1] - m).exp();
        let alpha = [(a[0] - m).exp() / z, (a[1] - m).exp() / z];
        for c in 0..3 {
            let expect = alpha[0] * rows[0][c] + alpha[1] * rows[1][c];
            let got = tape.value(s).get(0, c);
            assert!((got - expect).abs() < 1e-12);
            let (lo, hi) = (rows[0][c].min(rows[1][c]), rows[0][c].max(rows[1][c]));
            assert!(got >= lo - 1e-12 && got <= hi + 1e-12, "outside convex hull");
        }
    }

    #[test]
    fn empty_prompt_list_is_domain_error() {
        let pooler = fixed_pooler();
        let mut tape = Tape::new();
        let refs = pooler.insert(&mut tape);
        let prompts = tape.leaf(Mat::zeros(0, 3));
        assert!(pool_prompts(&mut tape, &refs, prompts).is_err());
    }

    #[test]
    fn projector_closed_forms() {
        let mut registry = KernelRegistry::new(0); // inference mode
        // Zero W_s, bias b: output = relu(b) per column.
        let mut params = SemanticProjectorParams::init(&mut registry, 3, 2);
        params.w_s = Mat::zeros(3, 2);
        params.bias = Mat::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        let mut tape = Tape::new();
        let refs = params.insert(&mut tape);
        let pooled = tape.leaf(Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let mut running = params.running.clone();
        let out = project_semantic(&mut tape, &refs, pooled, &mut running, &registry).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 0.0]);

        // Identity W_s, running stats (0,1), gain 1, bias 0 → relu(s)/√(1+eps).
        let mut params = SemanticProjectorParams::init(&mut registry, 2, 2);
        params.w_s = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let refs = params.insert(&mut tape);
        let pooled = tape.leaf(Mat::from_vec(1, 2, vec![0.8, -0.8]).unwrap());
        let mut running = params.running.clone();
        let out = project_semantic(&mut tape, &refs, pooled, &mut running, &registry).unwrap();
        let factor = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((tape.value(out).get(0, 0) - 0.8 * factor).abs() < 1e-12);
        assert_eq!(tape.value(out).get(0, 1), 0.0, "negative pre-activation annihilated");
    }

    #[test]
    fn pool_project_composite_gradients_pass() {
        let mut registry = KernelRegistry::new(5);
        let pooler = fixed_pooler();
        let projector = SemanticProjectorParams::init(&mut registry, 3, 2);
        let prompts = Mat::from_vec(2, 3, vec![0.9, -0.3, 0.4, 0.1, 0.8, -0.6]).unwrap();
        let inputs = [
            prompts,
            pooler.w_att.clone(),
            pooler.q.clone(),
            projector.w_s.clone(),
            projector.gain.clone(),
            projector.bias.clone(),
        ];
        let weights = Mat::from_vec(1, 2, vec![1.1, 0.9]).unwrap();
        let base_running = projector.running.clone();
        let report = check_scalar_fn("pool_project", &inputs, |tape, ids| {
            let pooler_refs = PromptPoolerRefs { w_att: ids[1], q: ids[2] };
            let proj_refs = SemanticProjectorRefs { w_s: ids[3], gain: ids[4], bias: ids[5] };
            let s = pool_prompts(tape, &pooler_refs, ids[0])?;
            // Inference-mode statistics keep the closure deterministic.
            let registry = KernelRegistry::new(0);
            let mut running = base_running.clone();
            let out = project_semantic(tape, &proj_refs, s, &mut running, &registry)?;
            let shifted = tape.add_const(out, 0.31); // move off the relu kink
            weighted_scalar(tape, shifted, &weights)
        })
        .unwrap();
        assert!(report.max_rel_err < GRAD_REL_TOL, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn no_dead_encoder_parameters_on_a_generic_batch() {
        let mut registry = KernelRegistry::new(11);
        let params = GraphEncoderParams::init(&mut registry, 3, 4, 2, 4, 3);
        let mut tape = Tape::new();
        let refs = params.insert(&mut tape);
        let rows = [
            encode_graph_drug(&mut tape, &refs, 0, &[edge(0, 1), edge(1, 2)]).unwrap(),
            encode_graph_drug(&mut tape, &refs, 1, &[edge(0, 0), edge(1, 3)]).unwrap(),
            encode_graph_drug(&mut tape, &refs, 2, &[Neighbor::SelfPair; 2]).unwrap(),
        ];
        let batch = tape.vstack(&rows).unwrap();
        let squared = tape.mul(batch, batch).unwrap();
        let flat = tape.flatten(squared);
        let loss = tape.row_sum(flat);
        tape.backward(loss).unwrap();
        for id in [refs.drug_table, refs.entity_table, refs.relation_table, refs.w_g] {
            let g = tape.grad(id);
            assert!(g.data().iter().any(|&v| v != 0.0), "dead parameter {id}");
        }
    }

    #[test]
    fn substitution_matches_cosine_oracle() {
        // Rows: 0=[1,0] query, 1=[1,0.01], 2=[0,1].
        let semantic = Mat::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.01, 0.0, 1.0]).unwrap();
        assert_eq!(substitute_unseen(0, &[1, 2], &semantic).unwrap(), 1);
        // Already trained → itself.
        assert_eq!(substitute_unseen(0, &[0, 1, 2], &semantic).unwrap(), 0);
        // Exact tie (identical candidate rows) → lowest id.
        let tied = Mat::from_vec(3, 2, vec![1.0, 0.0, 5.0, 0.0, 5.0, 0.0]).unwrap();
        assert_eq!(substitute_unseen(0, &[2, 1], &tied).unwrap(), 1);
        assert!(substitute_unseen(0, &[], &semantic).is_err());
    }

    #[test]
    fn prompt_templates_exported_verbatim() {
        let text = export_prompt_templates();
        assert!(text.contains("biorel\tA drug is associated with target gene [GENE].\n"));
        assert!(text.contains("molsub\tA drug includes molecular substructure [SUBSTRUCTURE].\n"));
        assert!(text.contains("ddigraph\tA drug has interaction [RELATION] with drug [DRUG].\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
