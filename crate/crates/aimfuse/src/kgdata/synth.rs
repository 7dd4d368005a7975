use std::path::Path;

use crate::error::{Error, Result};
use crate::kgdata::{
    write_pairs, write_prompts, write_triples, Modality, PairDataset, PromptEmbeddingSet,
    TripleChannel, Vocab,
};
use crate::numkernel::KernelRegistry;

/// Configuration of the synthetic benchmark generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub drugs: usize,
    pub events: usize,
    pub pairs: usize,
    /// When set, labels come from a deterministic rule over latent drug
    /// attributes that leak into every channel, so a correct model can learn
    /// them; otherwise labels are uniform noise.
    pub planted_rule: bool,
    /// Dimension of the synthetic prompt embedding vectors.
    pub d_lm: usize,
    /// Signal gene entities per latent attribute in the bio-relation channel.
    pub entities_per_attr: usize,
    /// Shared distractor entity pool size per channel.
    pub noise_entities: usize,
    /// Distractor relation vocabulary size in the bio-relation channel.
    pub noise_relations: usize,
    /// Distractor triples per drug per channel.
    pub noise_triples_per_drug: usize,
    /// Amplitude of uniform noise added to prompt vectors.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            drugs: 50,
            events: 8,
            pairs: 600,
            planted_rule: true,
            d_lm: 48,
            entities_per_attr: 2,
            noise_entities: 6,
            noise_relations: 2,
            noise_triples_per_drug: 2,
            noise: 0.05,
        }
    }
}

/// Deterministic labeling rule: each drug carries one latent attribute value;
/// the unordered attribute combination of a pair indexes a fixed event table.
#[derive(Debug, Clone)]
pub struct PlantedRule {
    /// Number of distinct attribute values A.
    pub attrs: usize,
    /// Attribute value per drug id.
    pub attr_of: Vec<usize>,
    /// Event label per unordered attribute combination (length A(A+1)/2).
    pub table: Vec<usize>,
}

impl PlantedRule {
    pub fn label(&self, u: usize, v: usize) -> usize {
        let (a, b) = {
            let (x, y) = (self.attr_of[u], self.attr_of[v]);
            if x <= y { (x, y) } else { (y, x) }
        };
        self.table[combo_index(a, b, self.attrs)]
    }
}

/// Upper-triangle index of the unordered combination (a, b), a ≤ b < attrs.
fn combo_index(a: usize, b: usize, attrs: usize) -> usize {
    a * (2 * attrs - a + 1) / 2 + (b - a)
}

/// Smallest attribute count whose unordered-combination space covers `events`.
fn attr_count_for(events: usize) -> usize {
    let mut a = 1;
    while a * (a + 1) / 2 < events {
        a += 1;
    }
    a
}

/// A complete generated benchmark: three channels in canonical modality
/// order, prompt embeddings, labeled pairs, and (when planted) the rule.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub channels: Vec<TripleChannel>,
    pub prompts: PromptEmbeddingSet,
    pub pairs: PairDataset,
    pub rule: Option<PlantedRule>,
}

impl Synthetic {
    /// Write the benchmark in the on-disk formats: one triple file per
    /// channel, `pairs.txt`, and `prompts.tsv`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for channel in &self.channels {
            let path = dir.join(format!("triples_{}.txt", channel.name));
            std::fs::write(path, write_triples(channel))?;
        }
        std::fs::write(dir.join("pairs.txt"), write_pairs(&self.pairs))?;
        std::fs::write(dir.join("prompts.tsv"), write_prompts(&self.prompts))?;
        Ok(())
    }
}

fn drug_name(i: usize) -> String {
    format!("D{i:03}")
}

/// Generate a synthetic benchmark. Deterministic under (config, seed).
///
/// Latent attribute a(i) = i mod A is observable through every modality:
/// shared `GENE_{a}_*` entities in the bio-relation channel, substructures
/// 2a and 2a+1 in the substructure channel, and one-hot blocks in the
/// bio-relation/substructure prompt vectors. The ddi channel mirrors the
/// labeled pairs in both directions, so per-fold filtering leaves held-out
/// drugs isolated there.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Synthetic> {
    if config.drugs < 2 {
        return Err(Error::Config(format!("need at least 2 drugs, got {}", config.drugs)));
    }
    if config.events < 2 {
        return Err(Error::Config(format!("need at least 2 events, got {}", config.events)));
    }
    let max_pairs = config.drugs * (config.drugs - 1) / 2;
    if config.pairs == 0 || config.pairs > max_pairs {
        return Err(Error::Config(format!(
            "pair count must be in [1, {max_pairs}] for {} drugs, got {}",
            config.drugs, config.pairs
        )));
    }
    if config.entities_per_attr == 0 {
        return Err(Error::Config("entities_per_attr must be ≥ 1".into()));
    }
    if config.noise_triples_per_drug > 0 && (config.noise_entities == 0 || config.noise_relations == 0) {
        return Err(Error::Config(
            "noise triples requested but noise entity/relation pools are empty".into(),
        ));
    }
    if !config.noise.is_finite() || config.noise < 0.0 {
        return Err(Error::Config(format!("noise amplitude must be finite and ≥ 0, got {}", config.noise)));
    }
    let attrs = attr_count_for(config.events);
    let min_d_lm = 2 * attrs + 4;
    if config.d_lm < min_d_lm {
        return Err(Error::Config(format!(
            "d_lm {} too small: {} events need {attrs} attribute values and d_lm ≥ {min_d_lm}",
            config.d_lm, config.events
        )));
    }

    let mut registry = KernelRegistry::new(seed);
    let mut global = Vocab::new();
    for i in 0..config.drugs {
        global.get_or_insert(&drug_name(i));
    }
    let attr_of: Vec<usize> = (0..config.drugs).map(|i| i % attrs).collect();
    let combos = attrs * (attrs + 1) / 2;
    let rule = PlantedRule {
        attrs,
        attr_of: attr_of.clone(),
        table: (0..combos).map(|j| j % config.events).collect(),
    };

    // Labeled pairs: a seeded sample of distinct unordered pairs.
    let mut all_pairs = Vec::with_capacity(max_pairs);
    for u in 0..config.drugs {
        for v in (u + 1)..config.drugs {
            all_pairs.push((u, v));
        }
    }
    registry.shuffle(&mut all_pairs);
    let mut pair_list = Vec::with_capacity(config.pairs);
    for &(u, v) in all_pairs.iter().take(config.pairs) {
        let y = if config.planted_rule {
            rule.label(u, v)
        } else {
            registry.index(config.events)
        };
        pair_list.push((u, v, y));
    }

    let mut bio = TripleChannel::empty(Modality::BioRel.channel_name());
    for i in 0..config.drugs {
        let name = drug_name(i);
        let a = attr_of[i];
        for j in 0..config.entities_per_attr {
            bio.push(&name, "targets", &format!("GENE_{a}_{j}"));
        }
        for _ in 0..config.noise_triples_per_drug {
            let r = registry.index(config.noise_relations);
            let k = registry.index(config.noise_entities);
            bio.push(&name, &format!("assoc_{r}"), &format!("NVAR_{k}"));
        }
    }

    let mut sub = TripleChannel::empty(Modality::MolSub.channel_name());
    for i in 0..config.drugs {
        let name = drug_name(i);
        let a = attr_of[i];
        sub.push(&name, "include", &(2 * a).to_string());
        sub.push(&name, "include", &(2 * a + 1).to_string());
        for _ in 0..config.noise_triples_per_drug {
            let k = registry.index(config.noise_entities);
            sub.push(&name, "include", &(2 * attrs + k).to_string());
        }
    }

    let mut ddi = TripleChannel::empty(Modality::DdiGraph.channel_name());
    for &(u, v, y) in &pair_list {
        let relation = format!("EVENT_{y}");
        ddi.push(&drug_name(u), &relation, &drug_name(v));
        ddi.push(&drug_name(v), &relation, &drug_name(u));
    }

    let mut prompts = PromptEmbeddingSet::new();
    let noise_vec = |registry: &mut KernelRegistry| -> Vec<f64> {
        (0..config.d_lm)
            .map(|_| {
                if config.noise > 0.0 {
                    registry.uniform(-config.noise, config.noise)
                } else {
                    0.0
                }
            })
            .collect()
    };
    for i in 0..config.drugs {
        let name = drug_name(i);
        let a = attr_of[i];
        for _ in 0..config.entities_per_attr {
            let mut v = noise_vec(&mut registry);
            v[a] += 1.0;
            prompts.push(&name, Modality::BioRel, v)?;
        }
        for _ in 0..2 {
            let mut v = noise_vec(&mut registry);
            v[attrs + a] += 1.0;
            prompts.push(&name, Modality::MolSub, v)?;
        }
        prompts.push(&name, Modality::DdiGraph, noise_vec(&mut registry))?;
    }

    let channels = vec![
        bio.remap_drugs(&global)?,
        sub.remap_drugs(&global)?,
        ddi.remap_drugs(&global)?,
    ];
    let pairs = PairDataset {
        drugs: global,
        pairs: pair_list,
        n_events: config.events,
    };
    Ok(Synthetic {
        channels,
        prompts,
        pairs,
        rule: if config.planted_rule { Some(rule) } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structural_shape_matches_config() {
        let config = SynthConfig { drugs: 50, events: 8, pairs: 600, ..SynthConfig::default() };
        let synth = generate_synthetic(&config, 17).unwrap();
        assert_eq!(synth.pairs.pairs.len(), 600);
        assert_eq!(synth.pairs.n_events, 8);
        assert!(synth.pairs.pairs.iter().all(|&(_, _, y)| y < 8));
        assert_eq!(synth.channels.len(), 3);
        assert_eq!(synth.channels[0].name, "bio-relation");
        assert_eq!(synth.channels[1].name, "substructure");
        assert_eq!(synth.channels[2].name, "ddi");
        // No duplicate unordered pairs.
        let mut seen = std::collections::HashSet::new();
        for &(u, v, _) in &synth.pairs.pairs {
            assert!(u < v);
            assert!(seen.insert((u, v)));
        }
        // Every channel is globally indexed.
        for channel in &synth.channels {
            assert_eq!(channel.drugs.len(), 50);
        }
    }

    #[test]
    fn planted_rule_oracle_classifies_all_pairs() {
        let synth = generate_synthetic(&SynthConfig::default(), 3).unwrap();
        let rule = synth.rule.as_ref().unwrap();
        for &(u, v, y) in &synth.pairs.pairs {
            assert_eq!(rule.label(u, v), y);
            assert_eq!(rule.label(v, u), y, "rule must be symmetric");
        }
    }

    #[test]
    fn attribute_is_visible_in_every_modality() {
        let synth = generate_synthetic(&SynthConfig::default(), 5).unwrap();
        let rule = synth.rule.as_ref().unwrap();
        let bio = &synth.channels[0];
        let sub = &synth.channels[1];
        for drug in 0..synth.pairs.drugs.len() {
            let a = rule.attr_of[drug];
            let has_gene = bio.neighbors_of(drug).iter().any(|&(_, e)| {
                bio.entities.name(e).starts_with(&format!("GENE_{a}_"))
            });
            assert!(has_gene, "drug {drug} missing its signal gene");
            let has_sub = sub.neighbors_of(drug).iter().any(|&(_, e)| {
                sub.entities.name(e) == (2 * a).to_string()
            });
            assert!(has_sub, "drug {drug} missing its signal substructure");
            let p = synth.prompts.get(drug, Modality::BioRel).unwrap();
            assert!(p[0][a] > 0.5, "bio prompt one-hot missing");
            let p = synth.prompts.get(drug, Modality::MolSub).unwrap();
            assert!(p[0][rule.attrs + a] > 0.5, "substructure prompt one-hot missing");
        }
    }

    #[test]
    fn ddi_channel_mirrors_pairs_bidirectionally() {
        let synth = generate_synthetic(&SynthConfig::default(), 11).unwrap();
        let ddi = &synth.channels[2];
        assert_eq!(ddi.triples.len(), 2 * synth.pairs.pairs.len());
        for &(u, v, y) in &synth.pairs.pairs {
            let rel = format!("EVENT_{y}");
            let fwd = ddi.neighbors_of(u).iter().any(|&(r, e)| {
                ddi.relations.name(r) == rel && ddi.entities.name(e) == synth.pairs.drugs.name(v)
            });
            let bwd = ddi.neighbors_of(v).iter().any(|&(r, e)| {
                ddi.relations.name(r) == rel && ddi.entities.name(e) == synth.pairs.drugs.name(u)
            });
            assert!(fwd && bwd);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let config = SynthConfig { drugs: 12, events: 4, pairs: 20, ..SynthConfig::default() };
        let a = generate_synthetic(&config, 9).unwrap();
        let b = generate_synthetic(&config, 9).unwrap();
        let c = generate_synthetic(&config, 10).unwrap();
        assert_eq!(write_pairs(&a.pairs), write_pairs(&b.pairs));
        assert_eq!(write_triples(&a.channels[0]), write_triples(&b.channels[0]));
        assert_eq!(write_prompts(&a.prompts), write_prompts(&b.prompts));
        assert_ne!(write_pairs(&a.pairs), write_pairs(&c.pairs));
    }

    #[test]
    fn files_round_trip_byte_identically() {
        let config = SynthConfig { drugs: 10, events: 4, pairs: 15, ..SynthConfig::default() };
        let synth = generate_synthetic(&config, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        synth.write_to_dir(dir.path()).unwrap();
        synth.write_to_dir(dir.path()).unwrap(); // idempotent overwrite
        let text = std::fs::read_to_string(dir.path().join("pairs.txt")).unwrap();
        assert_eq!(text, write_pairs(&synth.pairs));
        for name in ["bio-relation", "substructure", "ddi"] {
            assert!(dir.path().join(format!("triples_{name}.txt")).exists());
        }
        assert!(dir.path().join("prompts.tsv").exists());
    }

    #[test]
    fn infeasible_configs_are_config_errors() {
        let base = SynthConfig::default();
        let cases = [
            SynthConfig { drugs: 1, ..base.clone() },
            SynthConfig { events: 1, ..base.clone() },
            SynthConfig { drugs: 5, pairs: 11, ..base.clone() }, // C(5,2)=10
            SynthConfig { pairs: 0, ..base.clone() },
            SynthConfig { d_lm: 4, ..base.clone() },
            SynthConfig { entities_per_attr: 0, ..base.clone() },
            SynthConfig { noise: f64::NAN, ..base.clone() },
        ];
        for config in cases {
            assert!(matches!(generate_synthetic(&config, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn every_event_label_appears_at_default_scale() {
        let synth = generate_synthetic(&SynthConfig::default(), 1).unwrap();
        let mut seen = vec![false; synth.pairs.n_events];
        for &(_, _, y) in &synth.pairs.pairs {
            seen[y] = true;
        }
        assert!(seen.iter().all(|&s| s), "600 planted pairs must cover all 8 events");
    }
}
