//! Runs the finite-difference tables: every primitive and layer, then a
//! probe of the full model with the extractor unfrozen.

use eri_core::config::RunConfig;
use eri_core::gradsuite::{model_suite, ops_suite, Table};
use eri_core::Result;

fn main() -> Result<()> {
    let ops = ops_suite(0)?;
    print!("{}", Table(&ops));

    let cfg = RunConfig {
        stage_channels: [4, 4, 8, 8],
        input_size: (3, 8, 8),
        attention_heads: 2,
        lstm_hidden: 4,
        freeze_extractor: false,
        ..RunConfig::default()
    };
    let model = model_suite(&cfg, 0, 2)?;
    println!();
    print!("{}", Table(&model));

    let failed = ops.iter().chain(&model).filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", ops.len() + model.len());
    Ok(())
}
