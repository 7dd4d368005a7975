//! Acceptance gate: the ten required properties of the fusion stack, each as
//! one test with explicit tolerances. Every test prints a single
//! `ACCEPTANCE .. PASS` line (visible with `--nocapture`); the harness line
//! itself is the pass/fail verdict.
//!
//! Oracles here are written independently of the library code they judge:
//! plain-loop math for aggregation and metrics, hand counting for routing
//! and splits.

use std::collections::BTreeSet;
use std::time::Instant;

use aimfuse::eval::{
    compute_f_rank, compute_metrics, parse_variant_matrix_str, reference_ablation_matrix, round2,
    REFERENCE_F_RANKS,
};
use aimfuse::fusion::{
    aggregate_on_tape, attention_block, expert_capacity, expert_choice_route, parse_telemetry_str,
    AttentionBlockParams, ExpertParams, MoEParams,
};
use aimfuse::kgdata::{generate_synthetic, make_split, Bundle, Setting, SynthConfig};
use aimfuse::numkernel::{KernelRegistry, Mat, Tape, KERNEL_OPS};
use aimfuse::tokenizer::{standard_keys, PairVariant, TokenSequence};
use aimfuse::trainer::{
    corrupted_gradient_check, fit, gradient_suite, predict, read_checkpoint, write_checkpoint,
    write_history, TrainConfig, COMPONENT_CHECKS,
};

// ---- shared test utilities ----

/// splitmix64: a tiny deterministic generator for test inputs.
struct Rng(u64);

impl Rng {
    fn new(seed: u64) -> Rng {
        Rng(seed)
    }

    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    fn range(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        lo + self.below(hi_inclusive - lo + 1)
    }

    fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            v.swap(i, self.below(i + 1));
        }
        v
    }
}

fn random_mat(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    let data: Vec<f64> = (0..rows * cols).map(|_| lo + (hi - lo) * rng.f64()).collect();
    Mat::from_vec(rows, cols, data).expect("test matrix dimensions")
}

fn pass(line: &str) {
    println!("ACCEPTANCE {line}: PASS");
}

// ---- 1: reference F-rank reproduction ----

#[test]
fn criterion_01_f_rank_reference_reproduction() {
    let start = Instant::now();
    let matrix = reference_ablation_matrix();
    let ranks = compute_f_rank(&matrix).expect("reference matrix ranks");
    assert_eq!(ranks.len(), REFERENCE_F_RANKS.len());
    for ((variant, rank), expected) in
        matrix.variants.iter().zip(&ranks).zip(REFERENCE_F_RANKS)
    {
        assert_eq!(
            round2(*rank),
            expected,
            "variant '{variant}': F-rank {rank:.4} rounds to {}, reference says {expected}",
            round2(*rank)
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget 1 s");
    pass(&format!(
        "01 f-rank reference reproduction (9 variants exact at 2 decimals, {elapsed:?})"
    ));
}

// ---- 2: gradient suite ----

#[test]
fn criterion_02_gradient_suite() {
    let start = Instant::now();
    let reports = gradient_suite(0xACCE_5ED).expect("gradient suite");
    assert_eq!(
        reports.len(),
        KERNEL_OPS.len() + COMPONENT_CHECKS.len(),
        "one report per op plus one per component"
    );
    let mut coords_total = 0usize;
    for report in &reports {
        assert!(
            report.pass(),
            "gradient check '{}' failed: max rel err {:.3e} over {} coords ({} skipped)",
            report.name,
            report.max_rel_err,
            report.coords,
            report.skipped
        );
        coords_total += report.coords;
    }
    // The negative control must fail: its backward hides a quadratic term.
    let control = corrupted_gradient_check().expect("corrupted fixture runs");
    assert!(
        !control.pass(),
        "checker accepted a deliberately wrong backward (max rel err {:.3e})",
        control.max_rel_err
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 1 min");
    pass(&format!(
        "02 gradient suite ({} checks, {coords_total} coordinates, all < 1e-4; corrupted control rejected; {elapsed:?})"
    , reports.len()));
}

// ---- 3: weighted-mean aggregation identity ----

/// Plain-loop expert evaluation: relu(p·W1 + b1)·W2 + b2 for one input row.
fn expert_oracle_row(p: &[f64], e: &ExpertParams) -> Vec<f64> {
    let (in_dim, hidden) = e.w1.shape();
    let (_, out_dim) = e.w2.shape();
    assert_eq!(p.len(), in_dim);
    let mut h = vec![0.0f64; hidden];
    for (j, slot) in h.iter_mut().enumerate() {
        let mut acc = e.b1.get(0, j);
        for (i, &x) in p.iter().enumerate() {
            acc += x * e.w1.get(i, j);
        }
        *slot = acc.max(0.0);
    }
    let mut o = vec![0.0f64; out_dim];
    for (j, slot) in o.iter_mut().enumerate() {
        let mut acc = e.b2.get(0, j);
        for (i, &x) in h.iter().enumerate() {
            acc += x * e.w2.get(i, j);
        }
        *slot = acc;
    }
    o
}

#[test]
fn criterion_03_aggregation_matches_weighted_mean_oracle() {
    let mut rng = Rng::new(0x03AA);
    let mut instances_checked = 0usize;
    let mut batches = 0usize;
    while instances_checked < 1000 {
        batches += 1;
        let n = rng.range(1, 8);
        let n_experts = rng.range(2, 5);
        let in_dim = rng.range(3, 6);
        let c = [0.75, 1.0, 1.25, 1.6][rng.below(4)];
        let mut registry = KernelRegistry::new(rng.next_u64());
        let moe = MoEParams::init(&mut registry, in_dim, 4, in_dim, n_experts, 2, c)
            .expect("MoE init");
        let gates_mat = random_mat(&mut rng, n, n_experts, 0.05, 1.0);
        let p_mat = random_mat(&mut rng, n, in_dim, -1.0, 1.0);
        let route = expert_choice_route(&gates_mat, moe.k, moe.c).expect("routing");

        let mut tape = Tape::new();
        let gates = tape.leaf(gates_mat.clone());
        let p = tape.leaf(p_mat.clone());
        let (_, expert_refs) = moe.insert(&mut tape);
        let mut eval_reg = KernelRegistry::new(7);
        let (fused, record) =
            aggregate_on_tape(&mut tape, p, gates, &route, &expert_refs, 0.0, &mut eval_reg)
                .expect("aggregation");
        let fused = tape.value(fused).clone();
        assert_eq!(fused.shape(), (n, in_dim));

        // Oracle: z_i = Σ_{e∈S_i} g_ie · f_e(p_i) / Σ_{e∈S_i} g_ie.
        for i in 0..n {
            let p_row: Vec<f64> = (0..in_dim).map(|j| p_mat.get(i, j)).collect();
            let sel = &route.selectors[i];
            assert!(!sel.is_empty());
            let denom: f64 = sel.iter().map(|&e| gates_mat.get(i, e)).sum();
            let mut z = vec![0.0f64; in_dim];
            for &e in sel {
                let o = expert_oracle_row(&p_row, &moe.experts[e]);
                let w = gates_mat.get(i, e) / denom;
                for (slot, v) in z.iter_mut().zip(o) {
                    *slot += w * v;
                }
            }
            for (j, expected) in z.iter().enumerate() {
                let got = fused.get(i, j);
                assert!(
                    (got - expected).abs() <= 1e-12,
                    "batch {batches} instance {i} coord {j}: fused {got} vs oracle {expected}"
                );
            }
            // The telemetry weights are the same normalized gates.
            let prov = &record.provenance[i];
            assert!((prov.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        instances_checked += n;
    }
    pass(&format!(
        "03 expert aggregation equals weighted-mean oracle ({instances_checked} instances over {batches} batches, ≤ 1e-12)"
    ));
}

// ---- 4: expert-choice routing invariants ----

#[test]
fn criterion_04_expert_choice_structural_invariants() {
    let mut rng = Rng::new(0x04B0);
    let (k, c) = (2usize, 1.25f64);
    let mut routes = 0usize;
    for n in 1..=64usize {
        for n_experts in 2..=5usize {
            for draw in 0..2 {
                let mut gates = random_mat(&mut rng, n, n_experts, 0.0, 1.0);
                if draw == 1 {
                    // Coarse values force ties through the ordering logic.
                    for v in gates.data_mut() {
                        *v = (*v * 10.0).round() / 10.0;
                    }
                }
                let capacity = expert_capacity(n, n_experts, k, c);
                let route = expert_choice_route(&gates, k, c).expect("routing");
                assert_eq!(route.capacity, capacity);

                for (e, chosen) in route.selected.iter().enumerate() {
                    assert_eq!(
                        chosen.len(),
                        capacity.min(n),
                        "expert {e} of {n_experts} selected {} of N={n}",
                        chosen.len()
                    );
                    let unique: BTreeSet<usize> = chosen.iter().copied().collect();
                    assert_eq!(unique.len(), chosen.len(), "duplicate selection");
                    assert!(chosen.iter().all(|&i| i < n), "selection out of range");
                }
                for (i, sel) in route.selectors.iter().enumerate() {
                    assert!(!sel.is_empty(), "instance {i} left without any expert");
                }

                // Aggregating under this route must account for every
                // instance exactly once in the assigned counts.
                let in_dim = 4;
                let mut registry = KernelRegistry::new(rng.next_u64());
                let moe = MoEParams::init(&mut registry, in_dim, 3, in_dim, n_experts, k, c)
                    .expect("MoE init");
                let mut tape = Tape::new();
                let gates_id = tape.leaf(gates.clone());
                let p = tape.leaf(random_mat(&mut rng, n, in_dim, -1.0, 1.0));
                let (_, expert_refs) = moe.insert(&mut tape);
                let mut eval_reg = KernelRegistry::new(3);
                let (_, record) = aggregate_on_tape(
                    &mut tape, p, gates_id, &route, &expert_refs, 0.0, &mut eval_reg,
                )
                .expect("aggregation");
                assert_eq!(record.assigned_counts.iter().sum::<usize>(), n);
                assert_eq!(record.selected_counts.iter().sum::<usize>(), {
                    route.selected.iter().map(|s| s.len()).sum::<usize>()
                });
                for (i, assigned) in record.assigned.iter().enumerate() {
                    assert!(
                        route.selectors[i].contains(assigned),
                        "instance {i} assigned outside its selector set"
                    );
                }
                routes += 1;
            }
        }
    }
    pass(&format!(
        "04 expert-choice invariants (N ∈ 1..64, E ∈ 2..5, k=2, c=1.25; {routes} routes exhaustively checked)"
    ));
}

// ---- 5: cold-start split protocol ----

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

#[test]
fn criterion_05_split_protocol_audit() {
    let start = Instant::now();
    let mut rng = Rng::new(0x05C0);
    let settings = [Setting::Seen, Setting::OneUnseen, Setting::BothUnseen];
    for t in 0..200usize {
        let drugs = rng.range(8, 36);
        let max_pairs = drugs * (drugs - 1) / 2;
        let pairs = rng.range(drugs, max_pairs.min(4 * drugs));
        let config = SynthConfig {
            drugs,
            events: rng.range(2, 6),
            pairs,
            d_lm: 10,
            planted_rule: t % 2 == 0,
            ..SynthConfig::default()
        };
        let synth = generate_synthetic(&config, rng.next_u64()).expect("synthetic dataset");
        let dataset = &synth.pairs;
        let setting = settings[t % 3];
        let k = rng.range(2, 5.min(drugs));
        let plan = make_split(dataset, drugs, setting, k, rng.next_u64()).expect("split");

        assert_eq!(plan.k, k);
        assert_eq!(plan.folds.len(), k);
        let n_units = if setting == Setting::Seen { dataset.pairs.len() } else { drugs };
        assert_eq!(plan.assignment.len(), n_units);
        assert!(plan.assignment.iter().all(|&f| f < k), "assignment outside folds");

        for (f, fold) in plan.folds.iter().enumerate() {
            let unit_members: Vec<usize> =
                (0..n_units).filter(|&u| plan.assignment[u] == f).collect();
            match setting {
                Setting::Seen => {
                    // Pairs partition the folds; no drug is ever held out.
                    assert!(fold.held_out_drugs.is_empty());
                    assert_eq!(sorted(fold.test_pairs.clone()), unit_members);
                    let test: BTreeSet<usize> = fold.test_pairs.iter().copied().collect();
                    let expected_train: Vec<usize> =
                        (0..dataset.pairs.len()).filter(|p| !test.contains(p)).collect();
                    assert_eq!(sorted(fold.train_pairs.clone()), expected_train);
                }
                Setting::OneUnseen | Setting::BothUnseen => {
                    // Drugs partition the folds.
                    assert_eq!(sorted(fold.held_out_drugs.clone()), unit_members);
                    let held: BTreeSet<usize> = fold.held_out_drugs.iter().copied().collect();
                    let expected_train_drugs: Vec<usize> =
                        (0..drugs).filter(|d| !held.contains(d)).collect();
                    assert_eq!(sorted(fold.train_drugs.clone()), expected_train_drugs);

                    let need = if setting == Setting::OneUnseen { 1 } else { 2 };
                    let mut expected_test = Vec::new();
                    let mut expected_train = Vec::new();
                    for (p, &(u, v, _)) in dataset.pairs.iter().enumerate() {
                        let held_ends =
                            usize::from(held.contains(&u)) + usize::from(held.contains(&v));
                        if held_ends == need {
                            expected_test.push(p);
                        } else if held_ends == 0 {
                            expected_train.push(p);
                        }
                    }
                    // Test pairs: exactly the required held-out endpoint
                    // count. Train pairs: zero held-out endpoints, all of
                    // them. Everything else is excluded from the fold.
                    assert_eq!(sorted(fold.test_pairs.clone()), expected_test);
                    assert_eq!(sorted(fold.train_pairs.clone()), expected_train);
                }
            }
            for &p in fold.train_pairs.iter().chain(&fold.test_pairs) {
                assert!(p < dataset.pairs.len(), "pair index out of range");
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 1 min");
    pass(&format!(
        "05 split protocol (200 random datasets × every fold hand-audited, {elapsed:?})"
    ));
}

// ---- 6: metric oracles ----

fn argmax_lowest_tie(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Pairwise comparison AUC: ties count one half.
fn auc_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let pos: Vec<f64> =
        scores.iter().zip(positive).filter(|(_, &b)| b).map(|(&s, _)| s).collect();
    let neg: Vec<f64> =
        scores.iter().zip(positive).filter(|(_, &b)| !b).map(|(&s, _)| s).collect();
    let mut wins = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

/// Step-integral average precision over distinct descending thresholds.
fn aupr_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let p_total = positive.iter().filter(|&&b| b).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&s, &b) in scores.iter().zip(positive) {
            if s >= t {
                if b {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let recall = tp as f64 / p_total;
        ap += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        prev_recall = recall;
    }
    ap
}

#[test]
fn criterion_06_metrics_match_brute_force_oracles() {
    let mut rng = Rng::new(0x06D0);
    for set in 0..500usize {
        let n = rng.range(1, 50);
        let classes = rng.range(2, 5);
        let mut probs = random_mat(&mut rng, n, classes, 0.0, 1.0);
        if set % 2 == 1 {
            // Coarse scores force exact ties through the rank statistics.
            let decimals = if set % 4 == 1 { 10.0 } else { 100.0 };
            for v in probs.data_mut() {
                *v = (*v * decimals).round() / decimals;
            }
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let m = compute_metrics(&probs, &labels).expect("metrics");

        // Accuracy and confusion-count macros.
        let predictions: Vec<usize> = (0..n)
            .map(|r| argmax_lowest_tie(&(0..classes).map(|c| probs.get(r, c)).collect::<Vec<_>>()))
            .collect();
        let acc = predictions.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64
            / n as f64;
        assert!((m.acc - acc).abs() <= 1e-10, "set {set}: acc {} vs {acc}", m.acc);

        let present: BTreeSet<usize> = labels.iter().copied().collect();
        let (mut p_sum, mut r_sum, mut f_sum) = (0.0f64, 0.0f64, 0.0f64);
        for &c in &present {
            let tp = predictions
                .iter()
                .zip(&labels)
                .filter(|&(&p, &y)| p == c && y == c)
                .count() as f64;
            let fp =
                predictions.iter().zip(&labels).filter(|&(&p, &y)| p == c && y != c).count()
                    as f64;
            let fn_ =
                predictions.iter().zip(&labels).filter(|&(&p, &y)| p != c && y == c).count()
                    as f64;
            let prec = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let rec = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
            p_sum += prec;
            r_sum += rec;
            if prec + rec > 0.0 {
                f_sum += 2.0 * prec * rec / (prec + rec);
            }
        }
        let k = present.len() as f64;
        assert!((m.precision - p_sum / k).abs() <= 1e-10, "set {set}: precision");
        assert!((m.recall - r_sum / k).abs() <= 1e-10, "set {set}: recall");
        assert!((m.f1 - f_sum / k).abs() <= 1e-10, "set {set}: f1");

        // Micro ranking metrics over the flattened one-vs-rest items.
        let mut scores = Vec::with_capacity(n * classes);
        let mut positive = Vec::with_capacity(n * classes);
        for r in 0..n {
            for c in 0..classes {
                scores.push(probs.get(r, c));
                positive.push(labels[r] == c);
            }
        }
        let auc = auc_oracle(&scores, &positive);
        let aupr = aupr_oracle(&scores, &positive);
        assert!((m.auc - auc).abs() <= 1e-10, "set {set}: auc {} vs {auc}", m.auc);
        assert!((m.aupr - aupr).abs() <= 1e-10, "set {set}: aupr {} vs {aupr}", m.aupr);
    }
    pass("06 metric oracles (500 random prediction sets, all six metrics ≤ 1e-10)");
}

// ---- 7: end-to-end learnability ----

#[test]
fn criterion_07_planted_rule_is_learnable_cold_start() {
    let start = Instant::now();
    let synth = generate_synthetic(&SynthConfig::default(), 2026).expect("benchmark");
    assert!(synth.rule.is_some(), "default benchmark plants a label rule");
    let bundle = Bundle::from_synthetic(&synth);
    let plan =
        make_split(&bundle.pairs, bundle.drugs.len(), Setting::BothUnseen, 5, 2026).expect("split");
    let fold = &plan.folds[0];
    let config = TrainConfig { d: 32, epochs: 120, seed: 2026, ..TrainConfig::default() };
    let state = fit(&bundle, fold, &config).expect("training");

    let train_acc = state.history.last().expect("nonempty history").train_acc;
    assert!(
        train_acc >= 0.90,
        "final train accuracy {train_acc:.4} below the 0.90 bar"
    );

    let prediction =
        predict(&state, &bundle, fold, &fold.test_pairs, config.test_substitution).expect("predict");
    assert!(!prediction.kept.is_empty(), "every test pair was skipped");
    let test_acc = compute_metrics(&prediction.probs, &prediction.labels).expect("metrics").acc;

    // Majority-class rate of the full test fold: the no-information baseline.
    let mut counts = vec![0usize; bundle.pairs.n_events];
    for &p in &fold.test_pairs {
        counts[bundle.pairs.pairs[p].2] += 1;
    }
    let majority = *counts.iter().max().expect("events") as f64 / fold.test_pairs.len() as f64;
    assert!(
        test_acc > majority,
        "both-unseen test accuracy {test_acc:.4} does not beat the majority rate {majority:.4}"
    );

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}, budget 5 min");
    pass(&format!(
        "07 learnability (train acc {train_acc:.3} ≥ 0.90; both-unseen test acc {test_acc:.3} > majority {majority:.3}; {elapsed:?})"
    ));
}

// ---- 8: attention permutation equivariance ----

#[test]
fn criterion_08_attention_is_permutation_equivariant() {
    let mut rng = Rng::new(0x08E0);
    for trial in 0..100usize {
        let heads = [1usize, 2, 4][rng.below(3)];
        let d = heads * rng.range(2, 5);
        let l = rng.range(2, 8);
        let mut registry = KernelRegistry::new(rng.next_u64());
        let params =
            AttentionBlockParams::init(&mut registry, d, d, heads, 0.0).expect("attention init");
        let tokens = random_mat(&mut rng, l, d, -1.5, 1.5);
        let perm = rng.shuffled(l);

        let descriptor = standard_keys(PairVariant::Separate, 1)[0];
        let run = |input: &Mat| -> Mat {
            let mut tape = Tape::new();
            let refs = params.insert(&mut tape);
            let seq = TokenSequence {
                tokens: tape.leaf(input.clone()),
                descriptors: vec![descriptor; l],
                variant: PairVariant::Separate,
            };
            let mut eval_reg = KernelRegistry::new(11);
            let (out, _) = attention_block(&mut tape, &refs, &seq, &mut eval_reg)
                .expect("attention forward");
            tape.value(out.tokens).clone()
        };

        let base = run(&tokens);
        let mut permuted_input = Mat::zeros(l, d);
        for (i, &src) in perm.iter().enumerate() {
            for c in 0..d {
                permuted_input.set(i, c, tokens.get(src, c));
            }
        }
        let permuted_out = run(&permuted_input);

        for (i, &src) in perm.iter().enumerate() {
            for c in 0..d {
                let got = permuted_out.get(i, c);
                let expected = base.get(src, c);
                assert!(
                    (got - expected).abs() <= 1e-10,
                    "trial {trial} (L={l}, d={d}, {heads} heads): row {i} col {c}: {got} vs {expected}"
                );
            }
        }
    }
    pass("08 attention permutation equivariance (100 trials, L ∈ 2..8, ≤ 1e-10)");
}

// ---- 9: determinism and checkpoint round-trip ----

#[test]
fn criterion_09_determinism_and_checkpoint_round_trip() {
    let synth = generate_synthetic(
        &SynthConfig { drugs: 20, events: 4, pairs: 150, ..SynthConfig::default() },
        909,
    )
    .expect("dataset");
    let bundle = Bundle::from_synthetic(&synth);
    let plan =
        make_split(&bundle.pairs, bundle.drugs.len(), Setting::OneUnseen, 3, 909).expect("split");
    let fold = &plan.folds[0];
    let config = TrainConfig {
        d: 16,
        heads: 2,
        epochs: 10,
        batch_size: 128,
        seed: 909,
        ..TrainConfig::default()
    };

    let state_a = fit(&bundle, fold, &config).expect("first run");
    let state_b = fit(&bundle, fold, &config).expect("second run");
    assert_eq!(
        write_history(&state_a.history),
        write_history(&state_b.history),
        "identical seeds must give bit-identical training histories"
    );

    let before = predict(&state_a, &bundle, fold, &fold.test_pairs, true).expect("predict");
    let dir = tempfile::TempDir::new().expect("tempdir");
    let ckpt = dir.path().join("model.ckpt");
    write_checkpoint(&state_a, &ckpt).expect("save");
    let restored = read_checkpoint(&ckpt).expect("load");
    let after = predict(&restored, &bundle, fold, &fold.test_pairs, true).expect("predict");

    assert_eq!(before.kept, after.kept);
    assert_eq!(before.labels, after.labels);
    assert_eq!(before.probs.shape(), after.probs.shape());
    for (x, y) in before.probs.data().iter().zip(after.probs.data()) {
        assert_eq!(
            x.to_bits(),
            y.to_bits(),
            "prediction changed across the checkpoint round-trip"
        );
    }
    pass("09 determinism (bit-identical histories; checkpoint round-trip preserves predictions bit for bit)");
}

// ---- 10: ablation harness completeness ----

#[test]
fn criterion_10_ablation_harness_is_structurally_complete() {
    let dir = tempfile::TempDir::new().expect("tempdir");
    let data = dir.path().join("data");
    let out = dir.path().join("sweep");
    let bin = env!("CARGO_BIN_EXE_aimfuse");

    let status = std::process::Command::new(bin)
        .args(["gen-data", "--out"])
        .arg(&data)
        .args(["--drugs", "20", "--events", "4", "--pairs", "150", "--seed", "10"])
        .env_remove("AIMFUSE_SEED")
        .status()
        .expect("spawn gen-data");
    assert!(status.success());

    // Default sweep: every semantic-replacement variant, expert counts 2-5,
    // all three pair representations.
    let output = std::process::Command::new(bin)
        .args(["ablate", "--data"])
        .arg(&data)
        .args(["--setting", "seen", "--folds", "2", "--out"])
        .arg(&out)
        .args(["--seed", "10", "--set", "epochs=4", "--set", "d=12", "--set", "batch=64"])
        .args(["--set", "heads=2"])
        .env_remove("AIMFUSE_SEED")
        .output()
        .expect("spawn ablate");
    assert!(
        output.status.success(),
        "ablate failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );

    let matrix_text =
        std::fs::read_to_string(out.join("ablation_matrix.csv")).expect("matrix file");
    let matrix = parse_variant_matrix_str(&matrix_text, "ablation_matrix.csv").expect("parse");

    let mut expected: Vec<String> = [
        "none", "biorel", "molsub", "ddigraph", "biorel+ddigraph", "molsub+ddigraph", "all",
        "parallel", "biorel+molsub",
    ]
    .iter()
    .map(|k| format!("semantic:{k}"))
    .collect();
    expected.extend((2..=5).map(|n| format!("experts:{n}")));
    expected.extend(["separate", "drug-average", "modality-pair"].map(|k| format!("pair:{k}")));
    assert_eq!(
        matrix.variants, expected,
        "sweep must cover exactly the full variant grid, in order"
    );
    for (variant, row) in matrix.variants.iter().zip(&matrix.metrics) {
        for (metric, value) in row.iter().enumerate() {
            assert!(
                value.is_finite() && (0.0..=1.0).contains(value),
                "variant '{variant}' metric {metric} is {value}: missing or invalid cell"
            );
        }
    }
    let ranks_text = std::fs::read_to_string(out.join("f_rank.csv")).expect("rank file");
    assert_eq!(ranks_text.lines().count(), 1 + expected.len(), "one rank per variant");

    // Telemetry: one export per (variant, fold), every per-token contribution
    // row summing to one.
    let mut telemetry_files = 0usize;
    for variant in &expected {
        let tag: String = variant
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "_+-".contains(c) { c } else { '-' })
            .collect();
        for fold in 0..2 {
            let path = out.join(format!("telemetry_{tag}_fold{fold}.tsv"));
            let text = std::fs::read_to_string(&path)
                .unwrap_or_else(|e| panic!("missing telemetry {}: {e}", path.display()));
            let rows = parse_telemetry_str(&text, "telemetry").expect("telemetry parse");
            assert!(!rows.is_empty(), "empty telemetry for {variant} fold {fold}");
            for (i, row) in rows.iter().enumerate() {
                let sum: f64 = row.contributions.iter().sum();
                assert!(
                    (sum - 1.0).abs() <= 1e-9,
                    "{variant} fold {fold} row {i}: contribution sum {sum}"
                );
            }
            telemetry_files += 1;
        }
    }
    assert_eq!(telemetry_files, expected.len() * 2);
    pass(&format!(
        "10 ablation harness (16-variant grid complete, {telemetry_files} telemetry exports, contribution rows sum to 1 ± 1e-9)"
    ));
}
