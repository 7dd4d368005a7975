//! Replay every checked-in fuzz corpus seed through its parser on the stable
//! toolchain: each must return Ok or Err without panicking, so the corpus
//! doubles as a regression suite even where cargo-fuzz (nightly) is absent.

use std::path::PathBuf;

fn corpus_dir(target: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target)
}

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = corpus_dir(target);
    let mut out: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("corpus dir {}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.expect("corpus entry").path();
            let bytes = std::fs::read(&path).expect("corpus seed readable");
            (path, bytes)
        })
        .collect();
    assert!(!out.is_empty(), "no seeds checked in for {target}");
    out.sort();
    out
}

fn replay_text(target: &str, parse: impl Fn(&str)) {
    for (path, bytes) in seeds(target) {
        if let Ok(text) = std::str::from_utf8(&bytes) {
            parse(text); // must not panic; Ok and Err are both fine
        } else {
            panic!("{} is not UTF-8 but feeds a text parser", path.display());
        }
    }
}

#[test]
fn every_fuzz_target_has_corpus_coverage() {
    // Keep this list in lockstep with fuzz/Cargo.toml [[bin]] entries: a new
    // target without seeds (or seeds without a target) fails here.
    let expected = [
        "fuzz_load_checkpoint",
        "fuzz_parse_config",
        "fuzz_parse_history",
        "fuzz_parse_metrics_rows",
        "fuzz_parse_pairs",
        "fuzz_parse_prompts",
        "fuzz_parse_split",
        "fuzz_parse_telemetry",
        "fuzz_parse_triples",
        "fuzz_parse_variant_matrix",
    ];
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus");
    let mut found: Vec<String> = std::fs::read_dir(&root)
        .unwrap_or_else(|e| panic!("corpus root {}: {e}", root.display()))
        .map(|entry| entry.expect("corpus entry").file_name().to_string_lossy().into_owned())
        .collect();
    found.sort();
    assert_eq!(found, expected, "fuzz corpus directories drifted from the target list");

    let manifest = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/Cargo.toml"),
    )
    .expect("fuzz manifest readable");
    for target in expected {
        assert!(
            manifest.contains(&format!("name = \"{target}\"")),
            "fuzz/Cargo.toml has no [[bin]] named {target}"
        );
    }
}

#[test]
fn corpus_seeds_replay_without_panicking() {
    replay_text("fuzz_parse_triples", |t| {
        let _ = aimfuse::kgdata::parse_triples_str(t, "seed");
    });
    replay_text("fuzz_parse_pairs", |t| {
        let _ = aimfuse::kgdata::parse_pairs_str(t, "seed");
    });
    replay_text("fuzz_parse_prompts", |t| {
        let _ = aimfuse::kgdata::parse_prompts_str(t, "seed");
    });
    replay_text("fuzz_parse_split", |t| {
        let _ = aimfuse::kgdata::parse_split_str(t, "seed");
    });
    replay_text("fuzz_parse_config", |t| {
        let _ = aimfuse::trainer::parse_config_str(t, "seed");
    });
    replay_text("fuzz_parse_metrics_rows", |t| {
        let _ = aimfuse::eval::parse_metrics_rows_str(t, "seed");
    });
    replay_text("fuzz_parse_variant_matrix", |t| {
        let _ = aimfuse::eval::parse_variant_matrix_str(t, "seed");
    });
    replay_text("fuzz_parse_telemetry", |t| {
        let _ = aimfuse::fusion::parse_telemetry_str(t, "seed");
    });
    replay_text("fuzz_parse_history", |t| {
        let _ = aimfuse::trainer::parse_history_str(t, "seed");
    });
    for (_, bytes) in seeds("fuzz_load_checkpoint") {
        if let Ok(state) = aimfuse::trainer::load_state(&bytes) {
            let round = aimfuse::trainer::save_state(&state);
            aimfuse::trainer::load_state(&round).expect("accepted checkpoint must round-trip");
        }
    }
}

#[test]
fn valid_corpus_seeds_actually_parse() {
    // The `valid_*` seeds exist to teach the fuzzer real structure; if one
    // stops parsing, the corpus has rotted.
    let ok = |target: &str, f: &dyn Fn(&str) -> bool| {
        for (path, bytes) in seeds(target) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if name.starts_with("valid") {
                let text = std::str::from_utf8(&bytes).expect("valid seed is UTF-8");
                assert!(f(text), "{} no longer parses", path.display());
            }
        }
    };
    ok("fuzz_parse_triples", &|t| aimfuse::kgdata::parse_triples_str(t, "seed").is_ok());
    ok("fuzz_parse_pairs", &|t| aimfuse::kgdata::parse_pairs_str(t, "seed").is_ok());
    ok("fuzz_parse_prompts", &|t| aimfuse::kgdata::parse_prompts_str(t, "seed").is_ok());
    ok("fuzz_parse_split", &|t| aimfuse::kgdata::parse_split_str(t, "seed").is_ok());
    ok("fuzz_parse_config", &|t| aimfuse::trainer::parse_config_str(t, "seed").is_ok());
    ok("fuzz_parse_metrics_rows", &|t| {
        aimfuse::eval::parse_metrics_rows_str(t, "seed").is_ok()
    });
    ok("fuzz_parse_variant_matrix", &|t| {
        aimfuse::eval::parse_variant_matrix_str(t, "seed").is_ok()
    });
    ok("fuzz_parse_telemetry", &|t| aimfuse::fusion::parse_telemetry_str(t, "seed").is_ok());
    ok("fuzz_parse_history", &|t| aimfuse::trainer::parse_history_str(t, "seed").is_ok());
    for (path, bytes) in seeds("fuzz_load_checkpoint") {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("tiny") {
            aimfuse::trainer::load_state(&bytes)
                .unwrap_or_else(|e| panic!("{} no longer loads: {e}", path.display()));
        }
    }
}
