use eri_core::config::RunConfig;
use eri_core::gradsuite::{model_suite, ops_suite, Table, MODEL_TOLERANCE, OPS_TOLERANCE};

fn small(freeze: bool) -> RunConfig {
    RunConfig {
        stage_channels: [4, 4, 8, 8],
        input_size: (3, 8, 8),
        attention_heads: 2,
        attention_reduction: 2,
        lstm_hidden: 4,
        freeze_extractor: freeze,
        ..RunConfig::default()
    }
}

#[test]
fn every_op_and_layer_passes() {
    let rows = ops_suite(0).unwrap();
    assert!(rows.len() > 20);
    for r in &rows {
        assert_eq!(r.tolerance, OPS_TOLERANCE);
        assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_err);
    }
    for layer in ["linear", "conv", "batchnorm", "attention", "lstm", "pcc_loss", "ccc_loss"] {
        assert!(rows.iter().any(|r| r.name.starts_with(layer)), "no rows for {layer}");
    }
}

#[test]
fn unfrozen_model_passes_end_to_end() {
    let rows = model_suite(&small(false), 1, 2).unwrap();
    assert!(rows.iter().any(|r| r.name.starts_with("mtl_dan.")));
    assert!(rows.iter().any(|r| r.name.starts_with("eri.")));
    for r in &rows {
        assert_eq!(r.tolerance, MODEL_TOLERANCE);
        assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_err);
    }
}

#[test]
fn frozen_extractor_contributes_no_rows() {
    let rows = model_suite(&small(true), 1, 2).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.name.starts_with("eri.")));
    assert!(rows.iter().all(|r| r.passed()));
}

#[test]
fn fixed_seed_gives_the_same_table() {
    let a = ops_suite(5).unwrap();
    let b = ops_suite(5).unwrap();
    assert_eq!(Table(&a).to_string(), Table(&b).to_string());
    let a = model_suite(&small(true), 5, 1).unwrap();
    let b = model_suite(&small(true), 5, 1).unwrap();
    assert_eq!(a, b);
}
