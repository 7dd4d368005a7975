use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kgdata::{Modality, Vocab, MODALITIES};

/// Per-(drug, modality) lists of prompt embedding vectors. Every vector of a
/// modality shares that modality's d_LM; vectors are finite; a listed drug has
/// at least one prompt (enforced structurally: entries are created by pushing
/// vectors).
#[derive(Debug, Clone, Default)]
pub struct PromptEmbeddingSet {
    pub drugs: Vocab,
    dims: HashMap<Modality, usize>,
    prompts: HashMap<(usize, Modality), Vec<Vec<f64>>>,
}

impl PromptEmbeddingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dim(&self, modality: Modality) -> Option<usize> {
        self.dims.get(&modality).copied()
    }

    pub fn get(&self, drug: usize, modality: Modality) -> Option<&[Vec<f64>]> {
        self.prompts.get(&(drug, modality)).map(|v| v.as_slice())
    }

    pub fn push(&mut self, drug_name: &str, modality: Modality, vector: Vec<f64>) -> Result<()> {
        if vector.is_empty() {
            return Err(Error::Domain("empty prompt vector".into()));
        }
        if let Some(bad) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite prompt value {bad}")));
        }
        match self.dims.get(&modality) {
            Some(&d) if d != vector.len() => {
                return Err(Error::Domain(format!(
                    "prompt dimension {} for modality {modality} conflicts with established d_LM {d}",
                    vector.len()
                )));
            }
            None => {
                self.dims.insert(modality, vector.len());
            }
            _ => {}
        }
        let drug = self.drugs.get_or_insert(drug_name);
        self.prompts.entry((drug, modality)).or_default().push(vector);
        Ok(())
    }

    /// Remap drug ids onto a global vocabulary.
    pub fn remap_drugs(&self, global: &Vocab) -> Result<PromptEmbeddingSet> {
        let mut out = PromptEmbeddingSet {
            drugs: global.clone(),
            dims: self.dims.clone(),
            prompts: HashMap::new(),
        };
        for ((drug, modality), vecs) in &self.prompts {
            let name = self.drugs.name(*drug);
            let gid = global
                .id(name)
                .ok_or_else(|| Error::Domain(format!("drug '{name}' missing from global vocabulary")))?;
            out.prompts.insert((gid, *modality), vecs.clone());
        }
        Ok(out)
    }
}

/// Parse the tab-separated prompt embedding format:
/// `drug_id <TAB> modality <TAB> prompt_index <TAB> comma-joined floats`.
/// Prompt indices must be sequential (0, 1, …) within each (drug, modality).
pub fn parse_prompts_str(text: &str, source: &str) -> Result<PromptEmbeddingSet> {
    let mut set = PromptEmbeddingSet::new();
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
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let drug = fields[0];
        if drug.is_empty() {
            return Err(parse_err("empty drug id".into()));
        }
        let modality = Modality::from_key(fields[1]).ok_or_else(|| {
            parse_err(format!(
                "unknown modality '{}' (expected one of biorel, molsub, ddigraph)",
                fields[1]
            ))
        })?;
        let index: usize = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("prompt_index '{}' is not a non-negative integer", fields[2])))?;
        let mut vector = Vec::new();
        for piece in fields[3].split(',') {
            let v: f64 = piece
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("'{piece}' is not a decimal float")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value '{piece}'")));
            }
            vector.push(v);
        }
        let drug_id = set.drugs.id(drug);
        let existing = drug_id.and_then(|d| set.get(d, modality)).map_or(0, |v| v.len());
        if index != existing {
            return Err(parse_err(format!(
                "prompt_index {index} out of sequence (expected {existing}) for drug '{drug}' modality {modality}"
            )));
        }
        set.push(drug, modality, vector).map_err(|e| parse_err(e.to_string()))?;
    }
    Ok(set)
}

pub fn parse_prompts(path: &Path) -> Result<PromptEmbeddingSet> {
    let text = std::fs::read_to_string(path)?;
    parse_prompts_str(&text, &path.to_string_lossy())
}

/// Inverse of `parse_prompts_str`: drugs in vocabulary order, modalities in
/// canonical order, prompts in index order.
pub fn write_prompts(set: &PromptEmbeddingSet) -> String {
    let mut out = String::new();
    for drug in 0..set.drugs.len() {
        for modality in MODALITIES {
            let Some(vecs) = set.get(drug, modality) else {
                continue;
            };
            for (idx, vec) in vecs.iter().enumerate() {
                out.push_str(set.drugs.name(drug));
                out.push('\t');
                out.push_str(modality.key());
                out.push('\t');
                out.push_str(&idx.to_string());
                out.push('\t');
                let joined: Vec<String> = vec.iter().map(|v| format!("{v}")).collect();
                out.push_str(&joined.join(","));
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_indexes_prompts() {
        let text = "Aspirin\tbiorel\t0\t1.0,2.0,3.0\nAspirin\tbiorel\t1\t4.0,5.0,6.0\nAspirin\tmolsub\t0\t0.5,0.5\n";
        let set = parse_prompts_str(text, "prompts").unwrap();
        assert_eq!(set.dim(Modality::BioRel), Some(3));
        assert_eq!(set.dim(Modality::MolSub), Some(2));
        let aspirin = set.drugs.id("Aspirin").unwrap();
        assert_eq!(set.get(aspirin, Modality::BioRel).unwrap().len(), 2);
        assert_eq!(set.get(aspirin, Modality::BioRel).unwrap()[1], vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn rejects_dimension_conflicts_and_bad_rows() {
        assert!(parse_prompts_str("A\tbiorel\t0\t1.0\nB\tbiorel\t0\t1.0,2.0\n", "p").is_err());
        assert!(parse_prompts_str("A\tbiorel\t0\t1.0,NaN\n", "p").is_err());
        assert!(parse_prompts_str("A\tunknown\t0\t1.0\n", "p").is_err());
        assert!(parse_prompts_str("A\tbiorel\t1\t1.0\n", "p").is_err()); // out of sequence
        assert!(parse_prompts_str("A\tbiorel\t0\n", "p").is_err()); // 3 fields
    }

    #[test]
    fn round_trip() {
        let text = "A\tbiorel\t0\t1,2.5,-3\nA\tmolsub\t0\t0.125\nB\tbiorel\t0\t4,5,6\n";
        let set = parse_prompts_str(text, "p").unwrap();
        let written = write_prompts(&set);
        let reparsed = parse_prompts_str(&written, "p").unwrap();
        assert_eq!(reparsed.dim(Modality::BioRel), Some(3));
        let b = reparsed.drugs.id("B").unwrap();
        assert_eq!(reparsed.get(b, Modality::BioRel).unwrap()[0], vec![4.0, 5.0, 6.0]);
        // Exact float round-trip through shortest decimal representation.
        assert_eq!(written, parse_then_write(&written));
    }

    fn parse_then_write(text: &str) -> String {
        write_prompts(&parse_prompts_str(text, "p").unwrap())
    }
}
