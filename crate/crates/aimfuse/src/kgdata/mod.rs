//! Data layer: knowledge-graph triple channels, prompt-embedding sets, pair
//! label datasets, cold-start fold splits, and the synthetic benchmark
//! generator. All parsers are strict: exact separators, line-numbered errors.

mod bundle;
mod pairs;
mod prompts;
mod split;
mod synth;
mod triples;
mod vocab;

pub use bundle::{load_bundle, Bundle};
pub use pairs::{parse_pairs, parse_pairs_str, write_pairs, PairDataset};
pub use prompts::{parse_prompts, parse_prompts_str, write_prompts, PromptEmbeddingSet};
pub use split::{
    audit_split, make_split, parse_split_str, read_split, write_split, Fold, Setting, SplitPlan,
};
pub use synth::{generate_synthetic, PlantedRule, SynthConfig, Synthetic};
pub use triples::{parse_triples, parse_triples_str, write_triples, Neighbor, TripleChannel};
pub use vocab::Vocab;

/// The three modality channels, in the canonical order used everywhere
/// (token layout, type-embedding keys, reports).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    BioRel,
    MolSub,
    DdiGraph,
}

pub const MODALITIES: [Modality; 3] = [Modality::BioRel, Modality::MolSub, Modality::DdiGraph];

impl Modality {
    /// Stable key used in prompt files, configs and reports.
    pub fn key(self) -> &'static str {
        match self {
            Modality::BioRel => "biorel",
            Modality::MolSub => "molsub",
            Modality::DdiGraph => "ddigraph",
        }
    }

    /// Channel identifier used for triple file names.
    pub fn channel_name(self) -> &'static str {
        match self {
            Modality::BioRel => "bio-relation",
            Modality::MolSub => "substructure",
            Modality::DdiGraph => "ddi",
        }
    }

    pub fn from_key(key: &str) -> Option<Modality> {
        match key {
            "biorel" => Some(Modality::BioRel),
            "molsub" => Some(Modality::MolSub),
            "ddigraph" => Some(Modality::DdiGraph),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::BioRel => 0,
            Modality::MolSub => 1,
            Modality::DdiGraph => 2,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}
