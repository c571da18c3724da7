//! Generate a simulated interaction log, window it into fixed-length
//! training sequences, and split it by learner.
//!
//! The simulator draws per-learner ability and per-exercise difficulty and
//! discrimination, answers through a guess/slip response model, and drifts
//! ability upward after each correct answer — so later interactions are
//! easier, which is exactly the kind of non-stationarity a knowledge
//! tracing model is supposed to pick up.

use lskt::data::{build_sequences, split_by_learner, split_hash, synth_generate, SynthSpec};

fn main() -> lskt::Result<()> {
    let spec = SynthSpec {
        n_learners: 60,
        n_concepts: 6,
        n_exercises: 20,
        steps: 30,
        drift: 0.05,
        ..SynthSpec::default()
    };
    let records = synth_generate(&spec)?;

    let n = records.len() as f64;
    let correct: f64 = records.iter().map(|r| f64::from(r.response)).sum();
    println!("{} interactions from {} learners", records.len(), spec.n_learners);
    println!("overall correctness {:.3}", correct / n);

    // Positive drift should make the second half of each learner's history
    // easier than the first.
    let half = spec.steps as i64 / 2;
    let (mut early, mut late) = ((0.0, 0.0), (0.0, 0.0));
    for r in &records {
        let side = if r.order < half { &mut early } else { &mut late };
        side.0 += f64::from(r.response);
        side.1 += 1.0;
    }
    println!(
        "correctness first half {:.3}, second half {:.3}",
        early.0 / early.1,
        late.0 / late.1
    );
    assert!(late.0 / late.1 > early.0 / early.1);

    let set = build_sequences(&records, 16)?;
    println!(
        "{} sequences of length <= 16, vocabulary of {} exercises / {} concepts",
        set.sequences.len(),
        set.vocabulary.exercise_ids.len(),
        set.vocabulary.concept_ids.len()
    );

    let (train, test) = split_by_learner(&set.sequences, 0.8, spec.seed)?;
    println!(
        "split: {} train / {} test sequences, hash {}",
        train.len(),
        test.len(),
        split_hash(&train, &test)
    );

    // No learner may straddle the split.
    for t in &test {
        assert!(train.iter().all(|s| s.learner != t.learner));
    }
    println!("no learner appears on both sides of the split");
    Ok(())
}
