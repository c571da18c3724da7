//! Walk through the clustered attention path by hand: fill the state pool,
//! fit cluster centers, label a new state sequence, and inspect how the
//! cluster mask and the causal mask shape the combined attention weights.

use lskt::numerics::{Tape, Tensor};
use lskt::rng::{stream_rng, Stream};
use lskt::state_attention::{
    assign_labels, combined_attention, kmeans_fit, state_similarity, StatePool, LLOYD_ITERATIONS,
};

fn main() -> lskt::Result<()> {
    // Two well-separated groups of 2-D learning states: one near (0, 0),
    // one near (4, 4). Each pool entry is one learner's state sequence.
    let mut pool = StatePool::new(8);
    for offset in [0.0, 0.1, 0.2, 4.0, 4.1, 4.2] {
        pool.update(vec![Tensor::matrix(&[
            vec![offset, offset],
            vec![offset + 0.05, offset],
        ])?]);
    }
    println!("pool holds {} sequences, {} points", pool.len(), pool.total_points());

    let mut rng = stream_rng(11, Stream::KMeans);
    let clusters = kmeans_fit(&pool, 2, LLOYD_ITERATIONS, &mut rng)?;
    for (i, center) in clusters.centers.iter().enumerate() {
        println!("center {i}: ({:.3}, {:.3})", center[0], center[1]);
    }

    // A fresh sequence that alternates between the two regimes.
    let states = Tensor::matrix(&[
        vec![0.1, 0.0],
        vec![4.1, 4.0],
        vec![0.0, 0.1],
        vec![4.0, 4.1],
    ])?;
    let labels = assign_labels(&states, &clusters, &[true; 4])?;
    println!("labels along the sequence: {labels:?}");
    assert_eq!(labels[0], labels[2]);
    assert_eq!(labels[1], labels[3]);
    assert_ne!(labels[0], labels[1]);

    // Combined attention = causal softmax over exercise similarity plus a
    // cluster-and-causal masked softmax over state similarity; each valid
    // row carries total mass 2.
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(&[
        vec![1.0, 0.0],
        vec![0.8, 0.6],
        vec![0.0, 1.0],
        vec![0.6, 0.8],
    ])?);
    let s = tape.constant(states);
    let scores = state_similarity(&mut tape, s)?;
    let parts = combined_attention(&mut tape, x, scores, &labels)?;
    let gamma = tape.value(parts.combined);

    println!("combined attention (rows sum to 2):");
    for t in 0..4 {
        let row: Vec<f64> = (0..4).map(|j| gamma.at(t, j)).collect();
        let mass: f64 = row.iter().sum();
        println!(
            "  t={t}  [{}]  mass {:.9}",
            row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "),
            mass
        );
        assert!((mass - 2.0).abs() < 1e-9);
    }

    // Position 2 shares a cluster with position 0 but not 1, so the state
    // branch routes nothing through position 1.
    let beta = tape.value(parts.state);
    assert_eq!(beta.at(2, 1), 0.0);
    assert!(beta.at(2, 0) > 0.0);
    println!("state branch at t=2: weight on same-cluster history only");
    Ok(())
}
