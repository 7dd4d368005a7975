use std::path::Path;

use crate::error::{Error, Result};
use crate::kgdata::{
    parse_pairs_str, parse_prompts_str, parse_triples_str, PairDataset, PromptEmbeddingSet,
    Synthetic, TripleChannel, Vocab, MODALITIES,
};

/// A loaded dataset with every component remapped onto one global drug
/// vocabulary: channels in canonical modality order, prompt embeddings, and
/// labeled pairs.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub drugs: Vocab,
    pub channels: Vec<TripleChannel>,
    pub prompts: PromptEmbeddingSet,
    pub pairs: PairDataset,
}

impl Bundle {
    /// Build a bundle from already-parsed parts. The global vocabulary is
    /// assembled in first-appearance order over pairs, then channels (in the
    /// given order), then prompts.
    pub fn from_parts(
        channels: Vec<TripleChannel>,
        prompts: PromptEmbeddingSet,
        pairs: PairDataset,
    ) -> Result<Bundle> {
        let mut drugs = Vocab::new();
        for i in 0..pairs.drugs.len() {
            drugs.get_or_insert(pairs.drugs.name(i));
        }
        for channel in &channels {
            for i in 0..channel.drugs.len() {
                drugs.get_or_insert(channel.drugs.name(i));
            }
        }
        for i in 0..prompts.drugs.len() {
            drugs.get_or_insert(prompts.drugs.name(i));
        }
        let channels = channels
            .iter()
            .map(|c| c.remap_drugs(&drugs))
            .collect::<Result<Vec<_>>>()?;
        let prompts = prompts.remap_drugs(&drugs)?;
        let pairs = pairs.remap_drugs(&drugs)?;
        Ok(Bundle { drugs, channels, prompts, pairs })
    }

    /// A generated benchmark is already globally indexed; wrap it directly.
    pub fn from_synthetic(synth: &Synthetic) -> Bundle {
        Bundle {
            drugs: synth.pairs.drugs.clone(),
            channels: synth.channels.clone(),
            prompts: synth.prompts.clone(),
            pairs: synth.pairs.clone(),
        }
    }

    /// Map a channel's entity ids to global drug ids where the entity names a
    /// drug (ddi channels store partner drugs as entities); None otherwise.
    pub fn entity_drug_map(&self, channel: &TripleChannel) -> Vec<Option<usize>> {
        (0..channel.entities.len())
            .map(|e| self.drugs.id(channel.entities.name(e)))
            .collect()
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read '{}': {e}", path.display())))
}

/// Load `pairs.txt`, the three `triples_<channel>.txt` files, and
/// `prompts.tsv` from a directory and remap everything onto one global drug
/// vocabulary.
pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let pairs = parse_pairs_str(&read(&dir.join("pairs.txt"))?, "pairs.txt")?;
    let mut channels = Vec::with_capacity(MODALITIES.len());
    for modality in MODALITIES {
        let file = format!("triples_{}.txt", modality.channel_name());
        let text = read(&dir.join(&file))?;
        channels.push(parse_triples_str(&text, modality.channel_name())?);
    }
    let prompts = parse_prompts_str(&read(&dir.join("prompts.tsv"))?, "prompts.tsv")?;
    Bundle::from_parts(channels, prompts, pairs)
}
