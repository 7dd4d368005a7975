use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kgdata::triples::{split_record, SEP};
use crate::kgdata::Vocab;

/// Labeled drug-pair dataset. Pairs are unordered; `u != v`; labels form a
/// contiguous event-id range `[0, n_events)`.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub drugs: Vocab,
    /// (drug-u, drug-v, event label), in file order.
    pub pairs: Vec<(usize, usize, usize)>,
    pub n_events: usize,
}

impl PairDataset {
    /// Remap drug ids onto a global vocabulary.
    pub fn remap_drugs(&self, global: &Vocab) -> Result<PairDataset> {
        let mut pairs = Vec::with_capacity(self.pairs.len());
        for &(u, v, y) in &self.pairs {
            let gu = global.id(self.drugs.name(u)).ok_or_else(|| {
                Error::Domain(format!("drug '{}' missing from global vocabulary", self.drugs.name(u)))
            })?;
            let gv = global.id(self.drugs.name(v)).ok_or_else(|| {
                Error::Domain(format!("drug '{}' missing from global vocabulary", self.drugs.name(v)))
            })?;
            pairs.push((gu, gv, y));
        }
        Ok(PairDataset {
            drugs: global.clone(),
            pairs,
            n_events: self.n_events,
        })
    }
}

/// Parse `drugA // drugB // event_id` lines. Self-pairs and conflicting
/// duplicate labels violate dataset invariants and are rejected.
pub fn parse_pairs_str(text: &str, source: &str) -> Result<PairDataset> {
    let mut drugs = Vocab::new();
    let mut pairs = Vec::new();
    let mut seen: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    let mut n_events = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let [a, b, event] = split_record(line, source, lineno)?;
        let y: usize = event.parse().map_err(|_| Error::Parse {
            source_name: source.to_string(),
            line: lineno,
            msg: format!("event id '{event}' is not a non-negative integer"),
        })?;
        let u = drugs.get_or_insert(a);
        let v = drugs.get_or_insert(b);
        if u == v {
            return Err(Error::Parse {
                source_name: source.to_string(),
                line: lineno,
                msg: format!("self-pair '{a}'"),
            });
        }
        let key = (u.min(v), u.max(v));
        if let Some(&(prev_y, prev_line)) = seen.get(&key) {
            if prev_y != y {
                return Err(Error::Parse {
                    source_name: source.to_string(),
                    line: lineno,
                    msg: format!("pair ({a}, {b}) relabeled {y}, conflicts with label {prev_y} at line {prev_line}"),
                });
            }
        } else {
            seen.insert(key, (y, lineno));
        }
        n_events = n_events.max(y + 1);
        pairs.push((u, v, y));
    }
    Ok(PairDataset { drugs, pairs, n_events })
}

pub fn parse_pairs(path: &Path) -> Result<PairDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_pairs_str(&text, &path.to_string_lossy())
}

pub fn write_pairs(dataset: &PairDataset) -> String {
    let mut out = String::new();
    for &(u, v, y) in &dataset.pairs {
        out.push_str(dataset.drugs.name(u));
        out.push_str(SEP);
        out.push_str(dataset.drugs.name(v));
        out.push_str(SEP);
        out.push_str(&y.to_string());
        out.push('\n');
    }
    out
}
