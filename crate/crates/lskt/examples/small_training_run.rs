//! Train a small model end to end on simulated data and watch the held-out
//! metrics move epoch by epoch. Everything is seeded, so this prints the
//! same numbers on every run.

use lskt::data::{build_sequences, split_by_learner, synth_generate, SynthSpec};
use lskt::embeddings::IrtLevel;
use lskt::model::{train, Model, ModelConfig};

fn main() -> lskt::Result<()> {
    let spec = SynthSpec {
        n_learners: 120,
        n_concepts: 8,
        n_exercises: 40,
        steps: 30,
        ability_spread: 1.5,
        difficulty_spread: 1.5,
        drift: 0.03,
        seed: 3,
        ..SynthSpec::default()
    };
    let records = synth_generate(&spec)?;
    let set = build_sequences(&records, 30)?;
    let (train_seqs, test_seqs) = split_by_learner(&set.sequences, 0.8, 3)?;

    let config = ModelConfig {
        embed_dim: 16,
        seq_len: 30,
        epochs: 5,
        seed: 3,
        irt_level: IrtLevel::TwoPl,
        ..ModelConfig::default()
    };
    let mut model =
        Model::new(&config, set.vocabulary.n_concepts(), set.vocabulary.n_exercises())?;

    println!(
        "training {} sequences, evaluating {} (embed_dim {}, {})",
        train_seqs.len(),
        test_seqs.len(),
        config.embed_dim,
        config.irt_level.name()
    );
    println!("{:<6} {:>12} {:>10} {:>10}", "epoch", "train_loss", "val_auc", "val_acc");
    let outcome = train(&mut model, &train_seqs, &test_seqs, |snap| {
        let row = snap.history.last().expect("one row per epoch");
        println!(
            "{:<6} {:>12.6} {:>10.6} {:>10.6}",
            row.epoch, row.train_loss, row.val_auc, row.val_acc
        );
        Ok(())
    })?;

    let first = &outcome.history[0];
    let last = outcome.history.last().expect("nonempty");
    assert!(last.train_loss < first.train_loss, "loss should fall over five epochs");
    assert!(last.val_auc > 0.5, "better than chance on held-out learners");
    println!(
        "final held-out metrics: auc {:.4}, acc {:.4}, rmse {:.4}, mae {:.4}",
        outcome.final_metrics.auc,
        outcome.final_metrics.acc,
        outcome.final_metrics.rmse,
        outcome.final_metrics.mae
    );
    Ok(())
}
