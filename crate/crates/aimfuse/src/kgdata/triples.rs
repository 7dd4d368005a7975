use std::path::Path;

use crate::error::{Error, Result};
use crate::kgdata::Vocab;
use crate::numkernel::KernelRegistry;

/// Field separator in triple and pair files: exactly these five characters.
pub const SEP: &str = " // ";

/// One sampled neighbor of a drug in a channel. Isolated drugs yield the
/// reserved self-pair: the channel's self-relation paired with the drug's own
/// embedding in place of an entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Neighbor {
    Edge { relation: usize, entity: usize },
    SelfPair,
}

/// One knowledge-graph channel: triples (drug, relation, entity) with
/// per-channel vocabularies and a drug-indexed adjacency list.
#[derive(Debug, Clone)]
pub struct TripleChannel {
    pub name: String,
    pub drugs: Vocab,
    pub entities: Vocab,
    pub relations: Vocab,
    /// (drug-id, relation-id, entity-id), in file order.
    pub triples: Vec<(usize, usize, usize)>,
    /// adjacency[drug] = [(relation, entity), …] in file order.
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl TripleChannel {
    pub fn empty(name: &str) -> Self {
        TripleChannel {
            name: name.to_string(),
            drugs: Vocab::new(),
            entities: Vocab::new(),
            relations: Vocab::new(),
            triples: Vec::new(),
            adjacency: Vec::new(),
        }
    }

    pub fn push(&mut self, drug: &str, relation: &str, entity: &str) {
        let d = self.drugs.get_or_insert(drug);
        let r = self.relations.get_or_insert(relation);
        let e = self.entities.get_or_insert(entity);
        self.triples.push((d, r, e));
        if self.adjacency.len() < self.drugs.len() {
            self.adjacency.resize(self.drugs.len(), Vec::new());
        }
        self.adjacency[d].push((r, e));
    }

    pub fn degree(&self, drug: usize) -> usize {
        self.adjacency.get(drug).map_or(0, |a| a.len())
    }

    pub fn neighbors_of(&self, drug: usize) -> &[(usize, usize)] {
        self.adjacency.get(drug).map_or(&[], |a| a.as_slice())
    }

    /// Remap drug ids onto a global vocabulary (entities/relations stay
    /// channel-local). Every drug name must exist in `global`.
    pub fn remap_drugs(&self, global: &Vocab) -> Result<TripleChannel> {
        let mut adjacency = vec![Vec::new(); global.len()];
        let mut triples = Vec::with_capacity(self.triples.len());
        for &(d, r, e) in &self.triples {
            let name = self.drugs.name(d);
            let gid = global.id(name).ok_or_else(|| {
                Error::Domain(format!("drug '{name}' of channel '{}' missing from global vocabulary", self.name))
            })?;
            triples.push((gid, r, e));
            adjacency[gid].push((r, e));
        }
        Ok(TripleChannel {
            name: self.name.clone(),
            drugs: global.clone(),
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            triples,
            adjacency,
        })
    }

    /// Channel restricted to triples satisfying `keep`; vocabularies are
    /// preserved as-is so embedding tables keep their shapes.
    pub fn filtered(&self, keep: impl Fn(usize, usize, usize) -> bool) -> TripleChannel {
        let mut adjacency = vec![Vec::new(); self.adjacency.len()];
        let mut triples = Vec::new();
        for &(d, r, e) in &self.triples {
            if keep(d, r, e) {
                triples.push((d, r, e));
                adjacency[d].push((r, e));
            }
        }
        TripleChannel {
            name: self.name.clone(),
            drugs: self.drugs.clone(),
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            triples,
            adjacency,
        }
    }

    /// Sample exactly `size` neighbor pairs for a drug, deterministically
    /// under `seed`. Degree ≥ size: without replacement. 0 < degree < size:
    /// every neighbor once, then draws with replacement to fill. Degree 0:
    /// `size` copies of the self-pair.
    pub fn sample_neighbors(&self, drug: usize, size: usize, seed: u64) -> Result<Vec<Neighbor>> {
        if drug >= self.drugs.len() {
            return Err(Error::Domain(format!(
                "unknown drug-id {drug} in channel '{}' ({} drugs)",
                self.name,
                self.drugs.len()
            )));
        }
        if size == 0 {
            return Err(Error::Domain("neighbor sample size must be ≥ 1".into()));
        }
        let row = self.neighbors_of(drug);
        Ok(sample_from_row(row, size, seed))
    }
}

/// Core sampler shared by channel and view lookups; see
/// `TripleChannel::sample_neighbors` for the contract.
pub(crate) fn sample_from_row(row: &[(usize, usize)], size: usize, seed: u64) -> Vec<Neighbor> {
    let degree = row.len();
    if degree == 0 {
        return vec![Neighbor::SelfPair; size];
    }
    let mut reg = KernelRegistry::new(seed);
    let mut out = Vec::with_capacity(size);
    if degree >= size {
        // Partial Fisher-Yates: first `size` entries of a seeded permutation.
        let mut idx: Vec<usize> = (0..degree).collect();
        for i in 0..size {
            let j = i + reg.index(degree - i);
            idx.swap(i, j);
            let (r, e) = row[idx[i]];
            out.push(Neighbor::Edge { relation: r, entity: e });
        }
    } else {
        for &(r, e) in row {
            out.push(Neighbor::Edge { relation: r, entity: e });
        }
        for _ in degree..size {
            let (r, e) = row[reg.index(degree)];
            out.push(Neighbor::Edge { relation: r, entity: e });
        }
    }
    out
}

/// Split a record line on the exact " // " separator, rejecting anything but
/// three non-empty fields.
pub(crate) fn split_record<'a>(line: &'a str, source: &str, lineno: usize) -> Result<[&'a str; 3]> {
    let fields: Vec<&str> = line.split(SEP).collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            source_name: source.to_string(),
            line: lineno,
            msg: format!("expected 3 fields separated by \"{SEP}\", got {}", fields.len()),
        });
    }
    if fields.iter().any(|f| f.is_empty()) {
        return Err(Error::Parse {
            source_name: source.to_string(),
            line: lineno,
            msg: "empty field".into(),
        });
    }
    Ok([fields[0], fields[1], fields[2]])
}

/// Parse a triple channel from text. Line format: `drug // entity // relation`
/// (entity in the middle, relation last). Blank lines are skipped; empty input
/// is an empty channel.
pub fn parse_triples_str(text: &str, name: &str) -> Result<TripleChannel> {
    let mut channel = TripleChannel::empty(name);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let [drug, entity, relation] = split_record(line, name, i + 1)?;
        channel.push(drug, relation, entity);
    }
    Ok(channel)
}

pub fn parse_triples(path: &Path) -> Result<TripleChannel> {
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "channel".to_string());
    parse_triples_str(&text, &name)
}

/// Inverse of `parse_triples_str` on canonical channels: one LF-terminated
/// `drug // entity // relation` line per triple, in triple order.
pub fn write_triples(channel: &TripleChannel) -> String {
    let mut out = String::new();
    for &(d, r, e) in &channel.triples {
        out.push_str(channel.drugs.name(d));
        out.push_str(SEP);
        out.push_str(channel.entities.name(e));
        out.push_str(SEP);
        out.push_str(channel.relations.name(r));
        out.push('\n');
    }
    out
}
