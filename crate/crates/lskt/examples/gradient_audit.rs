//! Audit every parameter group's analytic gradient against central finite
//! differences on a deliberately tiny model, then corrupt one gradient rule
//! and show the audit catching it.

use lskt::embeddings::IrtLevel;
use lskt::model::{gradcheck, ModelConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        seq_len: 12,
        batch_size: 2,
        clusters: 2,
        dropout: 0.0,
        irt_level: IrtLevel::ThreePl,
        ..ModelConfig::default()
    }
}

fn main() -> lskt::Result<()> {
    let report = gradcheck(&tiny(), None)?;
    println!("{:<24} {:>14} {:>9}", "group", "max_rel_err", "compared");
    for g in &report.groups {
        println!(
            "{:<24} {:>14} {:>9}",
            g.group,
            format!("{:.3e}", g.max_rel_err),
            g.compared
        );
    }
    println!(
        "overall max relative error {:.3e} -> {}",
        report.max_rel_err,
        if report.passed { "pass" } else { "FAIL" }
    );
    assert!(report.passed);

    // Negative control: scale one group's analytic gradient by 1.5 and the
    // finite-difference comparison must blow up for exactly that group.
    let corrupted = gradcheck(&tiny(), Some("model.w8"))?;
    let w8 = corrupted
        .groups
        .iter()
        .find(|g| g.group == "model.w8")
        .expect("group exists");
    println!(
        "with model.w8 corrupted: its max_rel_err {:.3e}, overall verdict {}",
        w8.max_rel_err,
        if corrupted.passed { "pass" } else { "FAIL" }
    );
    assert!(!corrupted.passed);
    assert!(w8.max_rel_err > 0.1);
    Ok(())
}
