//! Drug-pair token sequence construction (three layout variants) and
//! modality-type embeddings.
//!
//! A "channel" here is one token source per drug: a graph-encoded modality or
//! a semantic replacement for it. The channel list is fixed by the experiment
//! configuration, so descriptor keys — and therefore type-embedding rows —
//! are stable across runs.

use crate::error::{Error, Result};
use crate::kgdata::Modality;
use crate::numkernel::{KernelRegistry, Mat, ParamBlock, Tape, ValueId};

/// Which drug of the pair a token describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DrugSlot {
    A,
    B,
    /// Joint pair token (modality-pair variant).
    Pair,
}

impl std::fmt::Display for DrugSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DrugSlot::A => "drugA",
            DrugSlot::B => "drugB",
            DrugSlot::Pair => "pair",
        })
    }
}

/// Pair-representation layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairVariant {
    /// One token per (drug, channel): L = 2·|M|.
    Separate,
    /// One channel-averaged token per drug: L = 2.
    DrugAverage,
    /// One joint token per channel via a pair MLP: L = |M|.
    ModalityPair,
}

impl PairVariant {
    pub fn key(self) -> &'static str {
        match self {
            PairVariant::Separate => "separate",
            PairVariant::DrugAverage => "drug-average",
            PairVariant::ModalityPair => "modality-pair",
        }
    }

    pub fn from_key(s: &str) -> Option<PairVariant> {
        match s {
            "separate" => Some(PairVariant::Separate),
            "drug-average" => Some(PairVariant::DrugAverage),
            "modality-pair" => Some(PairVariant::ModalityPair),
            _ => None,
        }
    }
}

impl std::fmt::Display for PairVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// Where a channel's per-drug representation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelSource {
    Graph,
    Semantic,
}

/// One token channel: a modality plus its representation source. The channel
/// list (and its order) is part of the experiment configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelSpec {
    pub modality: Modality,
    pub source: ChannelSource,
}

impl std::fmt::Display for ChannelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self.source {
            ChannelSource::Graph => "graph",
            ChannelSource::Semantic => "sem",
        };
        write!(f, "{}[{tag}]", self.modality)
    }
}

/// (drug-slot, channel-id) descriptor for one token row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenDescriptor {
    pub slot: DrugSlot,
    pub channel: usize,
}

/// A pair's token rows on the tape plus their descriptors.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// L×d matrix on the tape.
    pub tokens: ValueId,
    pub descriptors: Vec<TokenDescriptor>,
    pub variant: PairVariant,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

/// Pair MLP for the modality-pair variant: one hidden layer of width d with
/// relu, output width d, applied to [h_u ‖ h_v]. One per channel.
#[derive(Debug, Clone)]
pub struct PairMlpParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Debug, Clone, Copy)]
pub struct PairMlpRefs {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

impl PairMlpParams {
    pub fn init(registry: &mut KernelRegistry, d: usize) -> Self {
        PairMlpParams {
            w1: crate::encoders::init_weight(registry, 2 * d, d),
            b1: Mat::zeros(1, d),
            w2: crate::encoders::init_weight(registry, d, d),
            b2: Mat::zeros(1, d),
        }
    }

    pub fn insert(&self, tape: &mut Tape) -> PairMlpRefs {
        PairMlpRefs {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }
}

impl ParamBlock for PairMlpParams {
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

/// Assemble the token sequence for one drug pair from per-channel
/// representations (each a 1×d row on the tape, same channel order for both
/// drugs). `pair_mlps` is consulted only by the modality-pair variant, which
/// needs one MLP per channel.
pub fn build_pair_tokens(
    tape: &mut Tape,
    u_reps: &[ValueId],
    v_reps: &[ValueId],
    variant: PairVariant,
    pair_mlps: &[PairMlpRefs],
) -> Result<TokenSequence> {
    if u_reps.len() != v_reps.len() {
        return Err(Error::Domain(format!(
            "modality-set mismatch: drug A has {} channels, drug B has {}",
            u_reps.len(),
            v_reps.len()
        )));
    }
    if u_reps.is_empty() {
        return Err(Error::Domain("build_pair_tokens with zero channels".into()));
    }
    let m = u_reps.len();
    match variant {
        PairVariant::Separate => {
            let mut rows = Vec::with_capacity(2 * m);
            rows.extend_from_slice(u_reps);
            rows.extend_from_slice(v_reps);
            let tokens = tape.vstack(&rows)?;
            let mut descriptors = Vec::with_capacity(2 * m);
            for channel in 0..m {
                descriptors.push(TokenDescriptor { slot: DrugSlot::A, channel });
            }
            for channel in 0..m {
                descriptors.push(TokenDescriptor { slot: DrugSlot::B, channel });
            }
            Ok(TokenSequence { tokens, descriptors, variant })
        }
        PairVariant::DrugAverage => {
            let u_stack = tape.vstack(u_reps)?;
            let u_avg = tape.mean_rows(u_stack)?;
            let v_stack = tape.vstack(v_reps)?;
            let v_avg = tape.mean_rows(v_stack)?;
            let tokens = tape.vstack(&[u_avg, v_avg])?;
            let descriptors = vec![
                TokenDescriptor { slot: DrugSlot::A, channel: 0 },
                TokenDescriptor { slot: DrugSlot::B, channel: 0 },
            ];
            Ok(TokenSequence { tokens, descriptors, variant })
        }
        PairVariant::ModalityPair => {
            if pair_mlps.len() != m {
                return Err(Error::Config(format!(
                    "modality-pair variant needs one pair MLP per channel: have {}, need {m}",
                    pair_mlps.len()
                )));
            }
            let mut rows = Vec::with_capacity(m);
            let mut descriptors = Vec::with_capacity(m);
            for channel in 0..m {
                let mlp = &pair_mlps[channel];
                let cat = tape.hconcat(u_reps[channel], v_reps[channel])?;
                let pre = tape.matmul(cat, mlp.w1)?;
                let pre = tape.add_bias(pre, mlp.b1)?;
                let hidden = tape.relu(pre);
                let out = tape.matmul(hidden, mlp.w2)?;
                let out = tape.add_bias(out, mlp.b2)?;
                rows.push(out);
                descriptors.push(TokenDescriptor { slot: DrugSlot::Pair, channel });
            }
            let tokens = tape.vstack(&rows)?;
            Ok(TokenSequence { tokens, descriptors, variant })
        }
    }
}

/// Learnable type embeddings, one d-row per (drug-slot, channel) key in use.
#[derive(Debug, Clone)]
pub struct TypeEmbeddingTable {
    pub keys: Vec<TokenDescriptor>,
    pub table: Mat,
}

/// The standard type-embedding key set for a variant over `n_channels`
/// channels — one key per token the variant produces.
pub fn standard_keys(variant: PairVariant, n_channels: usize) -> Vec<TokenDescriptor> {
    let mut keys = Vec::new();
    match variant {
        PairVariant::Separate => {
            for slot in [DrugSlot::A, DrugSlot::B] {
                for channel in 0..n_channels {
                    keys.push(TokenDescriptor { slot, channel });
                }
            }
        }
        PairVariant::DrugAverage => {
            keys.push(TokenDescriptor { slot: DrugSlot::A, channel: 0 });
            keys.push(TokenDescriptor { slot: DrugSlot::B, channel: 0 });
        }
        PairVariant::ModalityPair => {
            for channel in 0..n_channels {
                keys.push(TokenDescriptor { slot: DrugSlot::Pair, channel });
            }
        }
    }
    keys
}

impl TypeEmbeddingTable {
    /// The standard key set for a variant over `n_channels` channels.
    pub fn for_variant(
        registry: &mut KernelRegistry,
        variant: PairVariant,
        n_channels: usize,
        d: usize,
    ) -> Self {
        let keys = standard_keys(variant, n_channels);
        let bound = 1.0 / (d as f64).sqrt();
        let table = registry.uniform_mat(keys.len(), d, -bound, bound);
        TypeEmbeddingTable { keys, table }
    }

    pub fn row_of(&self, descriptor: TokenDescriptor) -> Option<usize> {
        self.keys.iter().position(|k| *k == descriptor)
    }

    pub fn insert(&self, tape: &mut Tape) -> ValueId {
        tape.leaf(self.table.clone())
    }
}

impl ParamBlock for TypeEmbeddingTable {
    fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        f("table", &self.table);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("table", &mut self.table);
    }
}

/// H̃ = H + E_type: add each token's type-embedding row. Descriptors pass
/// through unchanged; a descriptor with no table row is a config error.
pub fn add_type_embeddings(
    tape: &mut Tape,
    seq: &TokenSequence,
    table: &TypeEmbeddingTable,
    table_id: ValueId,
) -> Result<TokenSequence> {
    let mut rows = Vec::with_capacity(seq.descriptors.len());
    for descriptor in &seq.descriptors {
        let row = table.row_of(*descriptor).ok_or_else(|| {
            Error::Config(format!(
                "no type-embedding row for ({}, channel {})",
                descriptor.slot, descriptor.channel
            ))
        })?;
        rows.push(row);
    }
    let gathered = tape.gather_rows(table_id, &rows)?;
    let tokens = tape.add(seq.tokens, gathered)?;
    Ok(TokenSequence {
        tokens,
        descriptors: seq.descriptors.clone(),
        variant: seq.variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(tape: &mut Tape, data: &[[f64; 2]]) -> Vec<ValueId> {
        data.iter()
            .map(|r| tape.leaf(Mat::from_vec(1, 2, r.to_vec()).unwrap()))
            .collect()
    }

    #[test]
    fn separate_layout_and_descriptors() {
        let mut tape = Tape::new();
        let u = rows(&mut tape, &[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let v = rows(&mut tape, &[[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]]);
        let seq = build_pair_tokens(&mut tape, &u, &v, PairVariant::Separate, &[]).unwrap();
        assert_eq!(seq.len(), 6);
        let expect: Vec<f64> = (1..=12).map(|x| x as f64).collect();
        assert_eq!(tape.value(seq.tokens).data(), expect.as_slice());
        let slots: Vec<_> = seq.descriptors.iter().map(|d| d.slot).collect();
        assert_eq!(
            slots,
            [DrugSlot::A, DrugSlot::A, DrugSlot::A, DrugSlot::B, DrugSlot::B, DrugSlot::B]
        );
        let channels: Vec<_> = seq.descriptors.iter().map(|d| d.channel).collect();
        assert_eq!(channels, [0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn swapping_drugs_block_swaps_rows() {
        let mut tape = Tape::new();
        let u = rows(&mut tape, &[[1.0, 2.0], [3.0, 4.0]]);
        let v = rows(&mut tape, &[[5.0, 6.0], [7.0, 8.0]]);
        let uv = build_pair_tokens(&mut tape, &u, &v, PairVariant::Separate, &[]).unwrap();
        let vu = build_pair_tokens(&mut tape, &v, &u, PairVariant::Separate, &[]).unwrap();
        let a = tape.value(uv.tokens);
        let b = tape.value(vu.tokens);
        for r in 0..2 {
            assert_eq!(a.row_slice(r), b.row_slice(r + 2));
            assert_eq!(a.row_slice(r + 2), b.row_slice(r));
        }
    }

    #[test]
    fn drug_average_means_channels_and_flattens_to_concat() {
        let mut tape = Tape::new();
        let u = rows(&mut tape, &[[1.0, 2.0], [3.0, 4.0]]);
        let v = rows(&mut tape, &[[5.0, 6.0], [7.0, 8.0]]);
        let seq = build_pair_tokens(&mut tape, &u, &v, PairVariant::DrugAverage, &[]).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(tape.value(seq.tokens).data(), &[2.0, 3.0, 6.0, 7.0]);
        // Flatten reproduces the concatenated 2d pair vector.
        let flat = tape.flatten(seq.tokens);
        assert_eq!(tape.value(flat).data(), &[2.0, 3.0, 6.0, 7.0]);

        // Identical reps for both drugs → two identical tokens.
        let w = rows(&mut tape, &[[1.0, 1.0], [3.0, 3.0]]);
        let seq = build_pair_tokens(&mut tape, &w, &w, PairVariant::DrugAverage, &[]).unwrap();
        let t = tape.value(seq.tokens);
        assert_eq!(t.row_slice(0), t.row_slice(1));
    }

    #[test]
    fn modality_pair_produces_one_token_per_channel() {
        let mut registry = KernelRegistry::new(3);
        let mlps: Vec<PairMlpParams> = (0..3).map(|_| PairMlpParams::init(&mut registry, 2)).collect();
        let mut tape = Tape::new();
        let refs: Vec<PairMlpRefs> = mlps.iter().map(|m| m.insert(&mut tape)).collect();
        let u = rows(&mut tape, &[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let v = rows(&mut tape, &[[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]]);
        let seq = build_pair_tokens(&mut tape, &u, &v, PairVariant::ModalityPair, &refs).unwrap();
        assert_eq!(seq.len(), 3);
        assert!(seq.descriptors.iter().all(|d| d.slot == DrugSlot::Pair));

        // Hand oracle for channel 0: relu([u‖v]·W1 + b1)·W2 + b2.
        let m = &mlps[0];
        let cat = [1.0, 2.0, 7.0, 8.0];
        let mut hidden = [0.0; 2];
        for j in 0..2 {
            let pre: f64 = (0..4).map(|i| cat[i] * m.w1.get(i, j)).sum::<f64>() + m.b1.get(0, j);
            hidden[j] = pre.max(0.0);
        }
        for c in 0..2 {
            let expect: f64 =
                (0..2).map(|j| hidden[j] * m.w2.get(j, c)).sum::<f64>() + m.b2.get(0, c);
            assert!((tape.value(seq.tokens).get(0, c) - expect).abs() < 1e-12);
        }

        // Wrong MLP count is a config error.
        let err = build_pair_tokens(&mut tape, &u, &v, PairVariant::ModalityPair, &refs[..2]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn modality_pair_gradients_reach_both_drugs() {
        let mut mlp = PairMlpParams {
            w1: Mat::from_vec(4, 2, vec![0.3, -0.2, 0.1, 0.4, -0.3, 0.2, 0.25, -0.15]).unwrap(),
            b1: Mat::from_vec(1, 2, vec![1.0, 1.0]).unwrap(), // keep relu units active
            w2: Mat::from_vec(2, 2, vec![0.5, -0.4, 0.3, 0.6]).unwrap(),
            b2: Mat::zeros(1, 2),
        };
        mlp.b2.set(0, 0, 0.1);
        let mut tape = Tape::new();
        let refs = vec![mlp.insert(&mut tape)];
        let u = rows(&mut tape, &[[0.9, -0.4]]);
        let v = rows(&mut tape, &[[0.2, 0.7]]);
        let seq = build_pair_tokens(&mut tape, &u, &v, PairVariant::ModalityPair, &refs).unwrap();
        let sq = tape.mul(seq.tokens, seq.tokens).unwrap();
        let flat = tape.flatten(sq);
        let loss = tape.row_sum(flat);
        tape.backward(loss).unwrap();
        assert!(tape.grad(u[0]).data().iter().any(|&g| g != 0.0), "no gradient to drug A");
        assert!(tape.grad(v[0]).data().iter().any(|&g| g != 0.0), "no gradient to drug B");
    }

    #[test]
    fn mismatched_channel_sets_rejected() {
        let mut tape = Tape::new();
        let u = rows(&mut tape, &[[1.0, 2.0], [3.0, 4.0]]);
        let v = rows(&mut tape, &[[5.0, 6.0]]);
        assert!(matches!(
            build_pair_tokens(&mut tape, &u, &v, PairVariant::Separate, &[]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn type_embeddings_add_rowwise() {
        let mut registry = KernelRegistry::new(1);
        let mut table = TypeEmbeddingTable::for_variant(&mut registry, PairVariant::Separate, 2, 2);
        let mut tape = Tape::new();
        let u = rows(&mut tape, &[[1.0, 2.0], [3.0, 4.0]]);
        let v = rows(&mut tape, &[[5.0, 6.0], [7.0, 8.0]]);
        let seq = build_pair_tokens(&mut tape, &u, &v, PairVariant::Separate, &[]).unwrap();

        // Zero table → identity on tokens.
        table.table.fill(0.0);
        let tid = table.insert(&mut tape);
        let out = add_type_embeddings(&mut tape, &seq, &table, tid).unwrap();
        assert_eq!(tape.value(out.tokens).data(), tape.value(seq.tokens).data());
        assert_eq!(out.descriptors, seq.descriptors);

        // Random table → elementwise-sum oracle.
        let table = TypeEmbeddingTable::for_variant(&mut registry, PairVariant::Separate, 2, 2);
        let tid = table.insert(&mut tape);
        let out = add_type_embeddings(&mut tape, &seq, &table, tid).unwrap();
        for (r, descriptor) in seq.descriptors.iter().enumerate() {
            let row = table.row_of(*descriptor).unwrap();
            for c in 0..2 {
                let expect = tape.value(seq.tokens).get(r, c) + table.table.get(row, c);
                assert_eq!(tape.value(out.tokens).get(r, c), expect);
            }
        }

        // Zero tokens → table rows.
        let zu = rows(&mut tape, &[[0.0, 0.0], [0.0, 0.0]]);
        let zv = rows(&mut tape, &[[0.0, 0.0], [0.0, 0.0]]);
        let zseq = build_pair_tokens(&mut tape, &zu, &zv, PairVariant::Separate, &[]).unwrap();
        let out = add_type_embeddings(&mut tape, &zseq, &table, tid).unwrap();
        for (r, descriptor) in zseq.descriptors.iter().enumerate() {
            let row = table.row_of(*descriptor).unwrap();
            assert_eq!(tape.value(out.tokens).row_slice(r), table.table.row_slice(row));
        }
    }

    #[test]
    fn missing_type_row_is_config_error() {
        let mut registry = KernelRegistry::new(2);
        // Table built for 1 channel, sequence uses 2.
        let table = TypeEmbeddingTable::for_variant(&mut registry, PairVariant::Separate, 1, 2);
        let mut tape = Tape::new();
        let u = rows(&mut tape, &[[1.0, 2.0], [3.0, 4.0]]);
        let v = rows(&mut tape, &[[5.0, 6.0], [7.0, 8.0]]);
        let seq = build_pair_tokens(&mut tape, &u, &v, PairVariant::Separate, &[]).unwrap();
        let tid = table.insert(&mut tape);
        assert!(matches!(
            add_type_embeddings(&mut tape, &seq, &table, tid),
            Err(Error::Config(_))
        ));
    }
}
