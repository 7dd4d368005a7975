use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kgdata::PairDataset;
use crate::numkernel::KernelRegistry;

/// Evaluation setting for cold-start cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    /// Pair-level folds: both drugs of a test pair may appear in training.
    Seen,
    /// Drug-level folds: test pairs have exactly one held-out drug.
    OneUnseen,
    /// Drug-level folds: test pairs have two held-out drugs.
    BothUnseen,
}

impl Setting {
    pub fn key(self) -> &'static str {
        match self {
            Setting::Seen => "seen",
            Setting::OneUnseen => "one-unseen",
            Setting::BothUnseen => "both-unseen",
        }
    }

    pub fn from_key(s: &str) -> Option<Setting> {
        match s {
            "seen" => Some(Setting::Seen),
            "one-unseen" => Some(Setting::OneUnseen),
            "both-unseen" => Some(Setting::BothUnseen),
            _ => None,
        }
    }

    /// Drug-level settings partition drugs; the seen setting partitions pairs.
    pub fn is_drug_level(self) -> bool {
        !matches!(self, Setting::Seen)
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// One cross-validation fold. Pair entries are indices into the dataset's
/// pair list; drug entries are dense drug ids.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train_pairs: Vec<usize>,
    pub test_pairs: Vec<usize>,
    /// Drugs available during training: for drug-level settings the complement
    /// of the held-out set; for the seen setting the drugs occurring in train
    /// pairs.
    pub train_drugs: Vec<usize>,
    /// Held-out drugs (empty for the seen setting).
    pub held_out_drugs: Vec<usize>,
}

/// K folds plus the unit→fold assignment they were derived from. Units are
/// drug ids for drug-level settings and pair indices for the seen setting.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub setting: Setting,
    pub k: usize,
    pub assignment: Vec<usize>,
    pub folds: Vec<Fold>,
}

/// Build a K-fold split plan. Drug-level settings shuffle and partition the
/// `n_drugs` drug ids; the seen setting shuffles and partitions pair indices.
pub fn make_split(
    dataset: &PairDataset,
    n_drugs: usize,
    setting: Setting,
    k: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    for &(u, v, _) in &dataset.pairs {
        if u >= n_drugs || v >= n_drugs {
            return Err(Error::Domain(format!(
                "pair ({u}, {v}) references a drug outside the {n_drugs}-drug list"
            )));
        }
    }
    let units = if setting.is_drug_level() { n_drugs } else { dataset.pairs.len() };
    if setting.is_drug_level() && k > n_drugs {
        return Err(Error::Config(format!(
            "cannot split {n_drugs} drugs into {k} folds"
        )));
    }
    if !setting.is_drug_level() && k > dataset.pairs.len() {
        return Err(Error::Config(format!(
            "cannot split {} pairs into {k} folds",
            dataset.pairs.len()
        )));
    }

    let mut order: Vec<usize> = (0..units).collect();
    let mut registry = KernelRegistry::new(seed);
    registry.shuffle(&mut order);

    let mut assignment = vec![0usize; units];
    for fold in 0..k {
        let lo = fold * units / k;
        let hi = (fold + 1) * units / k;
        for &unit in &order[lo..hi] {
            assignment[unit] = fold;
        }
    }

    let folds = derive_folds(dataset, n_drugs, setting, k, &assignment);
    Ok(SplitPlan { setting, k, assignment, folds })
}

/// Derive train/test pair sets per fold from a unit→fold assignment.
fn derive_folds(
    dataset: &PairDataset,
    n_drugs: usize,
    setting: Setting,
    k: usize,
    assignment: &[usize],
) -> Vec<Fold> {
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let mut train_pairs = Vec::new();
        let mut test_pairs = Vec::new();
        let mut train_drugs = Vec::new();
        let mut held_out_drugs = Vec::new();
        match setting {
            Setting::Seen => {
                for (idx, &(u, v, _)) in dataset.pairs.iter().enumerate() {
                    if assignment[idx] == fold {
                        test_pairs.push(idx);
                    } else {
                        train_pairs.push(idx);
                        train_drugs.push(u);
                        train_drugs.push(v);
                    }
                }
                train_drugs.sort_unstable();
                train_drugs.dedup();
            }
            Setting::OneUnseen | Setting::BothUnseen => {
                for drug in 0..n_drugs {
                    if assignment[drug] == fold {
                        held_out_drugs.push(drug);
                    } else {
                        train_drugs.push(drug);
                    }
                }
                let want = if setting == Setting::OneUnseen { 1 } else { 2 };
                for (idx, &(u, v, _)) in dataset.pairs.iter().enumerate() {
                    let held = usize::from(assignment[u] == fold) + usize::from(assignment[v] == fold);
                    if held == 0 {
                        train_pairs.push(idx);
                    } else if held == want {
                        test_pairs.push(idx);
                    }
                    // Pairs with the other held-out count belong to the
                    // complementary unseen setting and are excluded here.
                }
            }
        }
        folds.push(Fold { train_pairs, test_pairs, train_drugs, held_out_drugs });
    }
    folds
}

/// Exhaustive leakage audit. Returns human-readable violations; an empty list
/// means the plan satisfies every split invariant. Run before training.
pub fn audit_split(plan: &SplitPlan, dataset: &PairDataset, n_drugs: usize) -> Vec<String> {
    let mut violations = Vec::new();
    if plan.folds.len() != plan.k {
        violations.push(format!("plan declares {} folds but holds {}", plan.k, plan.folds.len()));
        return violations;
    }
    let units = if plan.setting.is_drug_level() { n_drugs } else { dataset.pairs.len() };
    if plan.assignment.len() != units {
        violations.push(format!(
            "assignment covers {} units, expected {units}",
            plan.assignment.len()
        ));
        return violations;
    }
    for (unit, &fold) in plan.assignment.iter().enumerate() {
        if fold >= plan.k {
            violations.push(format!("unit {unit} assigned to out-of-range fold {fold}"));
        }
    }

    for (f, fold) in plan.folds.iter().enumerate() {
        let train: HashSet<usize> = fold.train_pairs.iter().copied().collect();
        let test: HashSet<usize> = fold.test_pairs.iter().copied().collect();
        if let Some(idx) = train.intersection(&test).next() {
            violations.push(format!("fold {f}: pair {idx} is in both train and test"));
        }
        match plan.setting {
            Setting::Seen => {
                for idx in 0..dataset.pairs.len() {
                    let should_test = plan.assignment[idx] == f;
                    if should_test != test.contains(&idx) {
                        violations.push(format!(
                            "fold {f}: pair {idx} test membership disagrees with assignment"
                        ));
                    }
                    if should_test == train.contains(&idx) {
                        violations.push(format!(
                            "fold {f}: pair {idx} train membership disagrees with assignment"
                        ));
                    }
                }
                if !fold.held_out_drugs.is_empty() {
                    violations.push(format!("fold {f}: seen setting must hold out no drugs"));
                }
            }
            Setting::OneUnseen | Setting::BothUnseen => {
                let held: HashSet<usize> = fold.held_out_drugs.iter().copied().collect();
                for drug in 0..n_drugs {
                    if (plan.assignment[drug] == f) != held.contains(&drug) {
                        violations.push(format!(
                            "fold {f}: drug {drug} held-out membership disagrees with assignment"
                        ));
                    }
                }
                for &drug in &fold.train_drugs {
                    if held.contains(&drug) {
                        violations.push(format!("fold {f}: drug {drug} is both trained and held out"));
                    }
                }
                let want = if plan.setting == Setting::OneUnseen { 1 } else { 2 };
                for (idx, &(u, v, _)) in dataset.pairs.iter().enumerate() {
                    let count = usize::from(held.contains(&u)) + usize::from(held.contains(&v));
                    if train.contains(&idx) && count != 0 {
                        violations.push(format!(
                            "fold {f}: train pair {idx} contains {count} held-out drug(s)"
                        ));
                    }
                    if test.contains(&idx) && count != want {
                        violations.push(format!(
                            "fold {f}: test pair {idx} has {count} held-out drug(s), setting requires {want}"
                        ));
                    }
                    if count == 0 && !train.contains(&idx) {
                        violations.push(format!(
                            "fold {f}: pair {idx} has no held-out drug but is missing from train"
                        ));
                    }
                    if count == want && !test.contains(&idx) {
                        violations.push(format!(
                            "fold {f}: pair {idx} matches the test criterion but is missing from test"
                        ));
                    }
                }
            }
        }
    }
    violations
}

/// Serialize a plan as `fold_index <TAB> unit_id` lines (unit = drug id for
/// drug-level settings, pair index for the seen setting), in unit order.
pub fn write_split(plan: &SplitPlan) -> String {
    let mut out = String::new();
    for (unit, fold) in plan.assignment.iter().enumerate() {
        out.push_str(&format!("{fold}\t{unit}\n"));
    }
    out
}

/// Parse the split file format into (fold_index, unit_id) rows.
pub fn parse_split_str(text: &str, source: &str) -> Result<Vec<(usize, usize)>> {
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
        if fields.len() != 2 {
            return Err(parse_err(format!("expected 2 tab-separated fields, got {}", fields.len())));
        }
        let fold: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("fold index '{}' is not a non-negative integer", fields[0])))?;
        let unit: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("unit id '{}' is not a non-negative integer", fields[1])))?;
        rows.push((fold, unit));
    }
    Ok(rows)
}

/// Load a split file and rebuild the full plan against a dataset. The file
/// must assign every unit exactly once and use contiguous fold indices 0..K.
pub fn read_split(
    path: &Path,
    dataset: &PairDataset,
    n_drugs: usize,
    setting: Setting,
) -> Result<SplitPlan> {
    let text = std::fs::read_to_string(path)?;
    let source = path.to_string_lossy();
    let rows = parse_split_str(&text, &source)?;
    let units = if setting.is_drug_level() { n_drugs } else { dataset.pairs.len() };
    let mut assignment = vec![usize::MAX; units];
    for (fold, unit) in rows {
        if unit >= units {
            return Err(Error::Config(format!(
                "split file '{source}' assigns unit {unit} but the {setting} setting has only {units} units"
            )));
        }
        if assignment[unit] != usize::MAX {
            return Err(Error::Config(format!(
                "split file '{source}' assigns unit {unit} more than once"
            )));
        }
        assignment[unit] = fold;
    }
    if let Some(unit) = assignment.iter().position(|&f| f == usize::MAX) {
        return Err(Error::Config(format!(
            "split file '{source}' leaves unit {unit} unassigned"
        )));
    }
    let k = assignment.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::Config(format!(
            "split file '{source}' defines {k} fold(s); at least 2 required"
        )));
    }
    let mut seen_fold = vec![false; k];
    for &f in &assignment {
        seen_fold[f] = true;
    }
    if let Some(f) = seen_fold.iter().position(|s| !s) {
        return Err(Error::Config(format!(
            "split file '{source}' skips fold index {f}; folds must be contiguous"
        )));
    }
    let folds = derive_folds(dataset, n_drugs, setting, k, &assignment);
    Ok(SplitPlan { setting, k, assignment, folds })
}
