//! Interaction-log ingestion, padded sequence building, learner-level
//! splits, and a synthetic response generator for desk-scale experiments.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const CSV_HEADER: &str = "learner_id,exercise_id,concept_id,response,order";

/// One answered exercise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub learner: String,
    pub exercise: String,
    pub concept: String,
    pub response: u8,
    pub order: i64,
}

/// Dense index assignment for exercise and concept ids.
///
/// Index 0 is reserved for padding in both spaces; real ids start at 1 in
/// first-appearance order, which makes vocabulary construction a pure
/// function of record order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocabulary {
    pub exercise_ids: Vec<String>,
    pub concept_ids: Vec<String>,
    /// Dense concept index each exercise first appeared with, aligned to
    /// `exercise_ids`.
    pub exercise_concepts: Vec<usize>,
}

impl Vocabulary {
    /// Table row count for exercises, including the padding row.
    pub fn n_exercises(&self) -> usize {
        self.exercise_ids.len() + 1
    }

    /// Table row count for concepts, including the padding row.
    pub fn n_concepts(&self) -> usize {
        self.concept_ids.len() + 1
    }

    pub fn exercise_index(&self, id: &str) -> Option<usize> {
        self.exercise_ids.iter().position(|e| e == id).map(|p| p + 1)
    }

    pub fn concept_index(&self, id: &str) -> Option<usize> {
        self.concept_ids.iter().position(|c| c == id).map(|p| p + 1)
    }
}

/// One padded fixed-length chunk of a learner's history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub learner: String,
    pub chunk: usize,
    pub exercises: Vec<usize>,
    pub concepts: Vec<usize>,
    pub responses: Vec<u8>,
    pub valid_len: usize,
}

/// Learners and chunks that produced no trainable sequence.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct SkippedReport {
    pub skipped_learners: Vec<String>,
    pub dropped_chunks: usize,
}

/// All sequences plus the vocabulary and skip report they were built with.
#[derive(Debug, Clone)]
pub struct SequenceSet {
    pub sequences: Vec<Sequence>,
    pub vocabulary: Vocabulary,
    pub skipped: SkippedReport,
}

/// Reads interaction records from a CSV file. The header must be exactly
/// [`CSV_HEADER`]; an empty file or a bare header yields an empty list.
pub fn parse_csv(path: &Path) -> Result<Vec<InteractionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut lines = BufReader::new(file).lines();
    let Some(header) = lines.next() else {
        return Ok(Vec::new());
    };
    let header = header?;
    if header.trim_end() != CSV_HEADER {
        return Err(Error::DataFormat {
            line: 1,
            msg: format!("expected header {CSV_HEADER:?}, got {header:?}"),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::DataFormat {
                line: line_no,
                msg: format!("expected 5 comma-separated fields, got {}", fields.len()),
            });
        }
        let response: u8 = match fields[3] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::DataFormat {
                    line: line_no,
                    msg: format!("response must be 0 or 1, got {other:?}"),
                })
            }
        };
        let order: i64 = fields[4].parse().map_err(|_| Error::DataFormat {
            line: line_no,
            msg: format!("order must be an integer, got {:?}", fields[4]),
        })?;
        records.push(InteractionRecord {
            learner: fields[0].to_string(),
            exercise: fields[1].to_string(),
            concept: fields[2].to_string(),
            response,
            order,
        });
    }
    Ok(records)
}

/// Writes records in the [`parse_csv`] format.
pub fn write_csv(records: &[InteractionRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.learner, r.exercise, r.concept, r.response, r.order
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Groups records per learner, sorts by order key (file order breaks ties),
/// cuts histories into consecutive chunks of at most `max_len`, zero-pads
/// short chunks, and assigns dense vocabulary indices over the whole corpus.
///
/// Chunks with fewer than 2 interactions carry no prediction target and are
/// dropped into the skip report.
pub fn build_sequences(records: &[InteractionRecord], max_len: usize) -> Result<SequenceSet> {
    if max_len < 2 {
        return Err(Error::Contract(format!(
            "sequence length must be at least 2, got {max_len}"
        )));
    }
    let mut exercise_map: HashMap<&str, usize> = HashMap::new();
    let mut concept_map: HashMap<&str, usize> = HashMap::new();
    let mut vocabulary = Vocabulary {
        exercise_ids: Vec::new(),
        concept_ids: Vec::new(),
        exercise_concepts: Vec::new(),
    };
    let mut learner_order: Vec<&str> = Vec::new();
    let mut per_learner: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let concept_ix = *concept_map.entry(&r.concept).or_insert_with(|| {
            vocabulary.concept_ids.push(r.concept.clone());
            vocabulary.concept_ids.len()
        });
        exercise_map.entry(&r.exercise).or_insert_with(|| {
            vocabulary.exercise_ids.push(r.exercise.clone());
            vocabulary.exercise_concepts.push(concept_ix);
            vocabulary.exercise_ids.len()
        });
        per_learner
            .entry(&r.learner)
            .or_insert_with(|| {
                learner_order.push(&r.learner);
                Vec::new()
            })
            .push(i);
    }

    let mut sequences = Vec::new();
    let mut skipped = SkippedReport::default();
    for learner in learner_order {
        let mut indices = per_learner.remove(learner).expect("collected above");
        indices.sort_by_key(|&i| records[i].order);
        let mut kept_any = false;
        for (chunk_no, chunk) in indices.chunks(max_len).enumerate() {
            if chunk.len() < 2 {
                skipped.dropped_chunks += 1;
                continue;
            }
            kept_any = true;
            let mut seq = Sequence {
                learner: learner.to_string(),
                chunk: chunk_no,
                exercises: vec![0; max_len],
                concepts: vec![0; max_len],
                responses: vec![0; max_len],
                valid_len: chunk.len(),
            };
            for (t, &i) in chunk.iter().enumerate() {
                seq.exercises[t] = exercise_map[records[i].exercise.as_str()];
                seq.concepts[t] = concept_map[records[i].concept.as_str()];
                seq.responses[t] = records[i].response;
            }
            sequences.push(seq);
        }
        if !kept_any {
            skipped.skipped_learners.push(learner.to_string());
        }
    }
    Ok(SequenceSet { sequences, vocabulary, skipped })
}

/// Learner-level split: every chunk of a learner lands on the same side.
pub fn split_by_learner(
    sequences: &[Sequence],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    let mut learners: Vec<&str> = Vec::new();
    for s in sequences {
        if learners.last() != Some(&s.learner.as_str())
            && !learners.contains(&s.learner.as_str())
        {
            learners.push(&s.learner);
        }
    }
    if learners.len() < 2 {
        return Err(Error::Contract(format!(
            "split needs at least 2 learners, got {}",
            learners.len()
        )));
    }
    let mut rng = stream_rng(seed, Stream::DataSplit);
    // Fisher-Yates over the learner list.
    for i in (1..learners.len()).rev() {
        let j = rng.gen_range(0..=i);
        learners.swap(i, j);
    }
    let n_train = ((learners.len() as f64 * train_fraction).round() as usize)
        .clamp(1, learners.len() - 1);
    let train_set: std::collections::HashSet<&str> =
        learners[..n_train].iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in sequences {
        if train_set.contains(s.learner.as_str()) {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((train, test))
}

/// Order-independent fingerprint of which learners landed on which side.
pub fn split_hash(train: &[Sequence], test: &[Sequence]) -> String {
    let names = |side: &[Sequence]| {
        let mut v: Vec<&str> = side.iter().map(|s| s.learner.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v.join(",")
    };
    let mut hasher = Sha256::new();
    hasher.update(names(train));
    hasher.update("|");
    hasher.update(names(test));
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Controls for the synthetic interaction generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub n_learners: usize,
    pub n_concepts: usize,
    pub n_exercises: usize,
    pub steps: usize,
    pub ability_mean: f64,
    pub ability_spread: f64,
    pub difficulty_mean: f64,
    pub difficulty_spread: f64,
    pub discrimination_mean: f64,
    pub discrimination_spread: f64,
    /// Ability gained after each correct answer.
    pub drift: f64,
    pub guess: f64,
    pub slip: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_learners: 200,
            n_concepts: 10,
            n_exercises: 50,
            steps: 50,
            ability_mean: 0.0,
            ability_spread: 1.0,
            difficulty_mean: 0.0,
            difficulty_spread: 1.0,
            discrimination_mean: 1.0,
            discrimination_spread: 0.2,
            drift: 0.02,
            guess: 0.1,
            slip: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_learners == 0 || self.n_concepts == 0 || self.n_exercises == 0 || self.steps == 0
        {
            return Err(Error::Config(
                "synthetic counts (learners, concepts, exercises, steps) must be >= 1".into(),
            ));
        }
        for (name, p) in [("guess", self.guess), ("slip", self.slip)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability {p} outside [0,1]")));
            }
        }
        if self.guess + self.slip > 1.0 {
            return Err(Error::Config(format!(
                "guess + slip = {} exceeds 1",
                self.guess + self.slip
            )));
        }
        for (name, s) in [
            ("ability_spread", self.ability_spread),
            ("difficulty_spread", self.difficulty_spread),
            ("discrimination_spread", self.discrimination_spread),
        ] {
            if s < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative, got {s}")));
            }
        }
        Ok(())
    }
}

/// Simulates learners answering exercises under a three-parameter response
/// model: correctness probability is
/// `guess + (1 - guess - slip) * sigmoid(a_e * (theta - b_e))`, with theta
/// drifting upward after each correct answer. Deterministic given the seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<InteractionRecord>> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Synth);
    let difficulty_dist = Normal::new(spec.difficulty_mean, spec.difficulty_spread)
        .map_err(|e| Error::Config(format!("difficulty distribution: {e}")))?;
    let discrimination_dist =
        Normal::new(spec.discrimination_mean, spec.discrimination_spread)
            .map_err(|e| Error::Config(format!("discrimination distribution: {e}")))?;
    let ability_dist = Normal::new(spec.ability_mean, spec.ability_spread)
        .map_err(|e| Error::Config(format!("ability distribution: {e}")))?;

    let mut difficulty = Vec::with_capacity(spec.n_exercises);
    let mut discrimination = Vec::with_capacity(spec.n_exercises);
    for _ in 0..spec.n_exercises {
        difficulty.push(difficulty_dist.sample(&mut rng));
        discrimination.push(discrimination_dist.sample(&mut rng));
    }

    let mut records = Vec::with_capacity(spec.n_learners * spec.steps);
    for learner in 0..spec.n_learners {
        let mut theta = ability_dist.sample(&mut rng);
        for step in 0..spec.steps {
            let e = rng.gen_range(0..spec.n_exercises);
            let p_know = 1.0 / (1.0 + (-(discrimination[e] * (theta - difficulty[e]))).exp());
            let p_correct = spec.guess + (1.0 - spec.guess - spec.slip) * p_know;
            let response = u8::from(rng.gen_bool(p_correct.clamp(0.0, 1.0)));
            if response == 1 {
                theta += spec.drift;
            }
            records.push(InteractionRecord {
                learner: format!("L{learner:04}"),
                exercise: format!("E{e:04}"),
                concept: format!("C{:02}", e % spec.n_concepts),
                response,
                order: step as i64,
            });
        }
    }
    Ok(records)
}
