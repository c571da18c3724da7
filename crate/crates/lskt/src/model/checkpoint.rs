//! Checkpoint directory layout and exact-resume round trips.
//!
//! A checkpoint holds everything a run needs to continue or to be
//! re-evaluated bit-for-bit: `config.json`, `vocab.json`, the parameter
//! index (`params.json`) plus raw little-endian values (`params.bin`),
//! optimizer step and moments (`optimizer.json` / `optimizer.bin`), the
//! state pool and frozen cluster centers (`pool.json` / `pool.bin`), and
//! the per-epoch `history.csv`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Tensor};
use crate::state_attention::{ClusterModel, StatePool};

use super::{EpochRow, Model, ModelConfig};

/// Header of `history.csv`.
pub const HISTORY_HEADER: &str = "epoch,train_loss,val_auc,val_acc,val_rmse,val_mae";

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterMeta {
    n: usize,
    fitted: bool,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolMeta {
    capacity: usize,
    entry_shapes: Vec<Vec<usize>>,
    clusters: ClusterMeta,
}

fn read_named(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

fn f64s_to_bytes<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn bytes_to_f64s(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!(
            "{what} holds {} bytes, not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Serializes history rows; floats use the shortest representation that
/// parses back to the identical value.
pub fn history_to_csv(history: &[EpochRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch, row.train_loss, row.val_auc, row.val_acc, row.val_rmse, row.val_mae
        ));
    }
    out
}

fn history_from_csv(text: &str) -> Result<Vec<EpochRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HISTORY_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "history.csv header is {other:?}, expected {HISTORY_HEADER:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Data(format!(
                "history.csv row {} has {} fields, expected 6",
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Data(format!("history.csv row {}: {e}", i + 2)))
        };
        rows.push(EpochRow {
            epoch: fields[0]
                .parse()
                .map_err(|e| Error::Data(format!("history.csv row {}: {e}", i + 2)))?,
            train_loss: num(fields[1])?,
            val_auc: num(fields[2])?,
            val_acc: num(fields[3])?,
            val_rmse: num(fields[4])?,
            val_mae: num(fields[5])?,
        });
    }
    Ok(rows)
}

/// Writes the full run state under `dir`, creating it if needed.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    vocabulary: &Vocabulary,
    optimizer: &AdamW,
    pool: &StatePool,
    clusters: &ClusterModel,
    history: &[EpochRow],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), &model.config)?;
    write_json(&dir.join("vocab.json"), vocabulary)?;

    let store = &model.store;
    let metas: Vec<ParamMeta> = store
        .ids()
        .map(|id| ParamMeta {
            name: store.name(id).to_string(),
            shape: store.value(id).shape().to_vec(),
            trainable: store.trainable(id),
        })
        .collect();
    write_json(&dir.join("params.json"), &metas)?;
    let mut values = Vec::new();
    for id in store.ids() {
        values.extend_from_slice(store.value(id).data());
    }
    fs::write(dir.join("params.bin"), f64s_to_bytes(values.iter()))?;

    write_json(&dir.join("optimizer.json"), &OptimizerMeta { step: optimizer.step_count() })?;
    fs::write(dir.join("optimizer.bin"), optimizer.moments_blob())?;

    let dim = clusters.centers.first().map_or(0, Vec::len);
    let pool_meta = PoolMeta {
        capacity: pool.capacity(),
        entry_shapes: pool.entries().map(|t| t.shape().to_vec()).collect(),
        clusters: ClusterMeta { n: clusters.n, fitted: clusters.fitted, dim },
    };
    write_json(&dir.join("pool.json"), &pool_meta)?;
    let mut pool_values: Vec<f64> = Vec::new();
    for entry in pool.entries() {
        pool_values.extend_from_slice(entry.data());
    }
    for center in &clusters.centers {
        pool_values.extend_from_slice(center);
    }
    fs::write(dir.join("pool.bin"), f64s_to_bytes(pool_values.iter()))?;

    fs::write(dir.join("history.csv"), history_to_csv(history))?;
    Ok(())
}

/// A checkpoint read back into memory.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub vocabulary: Vocabulary,
    pub optimizer: AdamW,
    pub pool: StatePool,
    pub clusters: ClusterModel,
    pub history: Vec<EpochRow>,
}

/// Restores a checkpoint exactly: parameter values, optimizer moments,
/// pool contents, and cluster centers are bitwise those that were saved.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let config: ModelConfig = serde_json::from_str(&read_text(&dir.join("config.json"))?)?;
    let vocabulary: Vocabulary = serde_json::from_str(&read_text(&dir.join("vocab.json"))?)?;
    let mut model = Model::new(&config, vocabulary.n_concepts(), vocabulary.n_exercises())?;

    let metas: Vec<ParamMeta> = serde_json::from_str(&read_text(&dir.join("params.json"))?)?;
    let ids: Vec<_> = model.store.ids().collect();
    if metas.len() != ids.len() {
        return Err(Error::Config(format!(
            "checkpoint lists {} parameters but the model registers {}",
            metas.len(),
            ids.len()
        )));
    }
    for (meta, &id) in metas.iter().zip(&ids) {
        let name = model.store.name(id);
        if meta.name != name {
            return Err(Error::Config(format!(
                "checkpoint parameter `{}` does not match registered `{name}`",
                meta.name
            )));
        }
        if meta.shape != model.store.value(id).shape() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                meta.shape,
                model.store.value(id).shape()
            )));
        }
    }
    let values = bytes_to_f64s(&read_named(&dir.join("params.bin"))?, "params.bin")?;
    if values.len() != model.store.total_values() {
        return Err(Error::Config(format!(
            "params.bin holds {} values but the model expects {}",
            values.len(),
            model.store.total_values()
        )));
    }
    let mut cursor = 0;
    for &id in &ids {
        let slot = model.store.value_mut(id);
        let n = slot.len();
        slot.data_mut().copy_from_slice(&values[cursor..cursor + n]);
        cursor += n;
    }

    let opt_meta: OptimizerMeta = serde_json::from_str(&read_text(&dir.join("optimizer.json"))?)?;
    let mut optimizer = AdamW::new(&model.store, config.lr, config.weight_decay);
    optimizer.restore(opt_meta.step, &read_named(&dir.join("optimizer.bin"))?)?;

    let pool_meta: PoolMeta = serde_json::from_str(&read_text(&dir.join("pool.json"))?)?;
    let pool_values = bytes_to_f64s(&read_named(&dir.join("pool.bin"))?, "pool.bin")?;
    let entry_total: usize = pool_meta
        .entry_shapes
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum();
    let center_total = if pool_meta.clusters.fitted {
        pool_meta.clusters.n * pool_meta.clusters.dim
    } else {
        0
    };
    if pool_values.len() != entry_total + center_total {
        return Err(Error::Config(format!(
            "pool.bin holds {} values but pool.json describes {}",
            pool_values.len(),
            entry_total + center_total
        )));
    }
    let mut cursor = 0;
    let mut entries = Vec::new();
    for shape in &pool_meta.entry_shapes {
        let n: usize = shape.iter().product();
        entries.push(Tensor::new(shape.clone(), pool_values[cursor..cursor + n].to_vec())?);
        cursor += n;
    }
    let pool = StatePool::from_entries(pool_meta.capacity, entries);
    let centers: Vec<Vec<f64>> = if pool_meta.clusters.fitted {
        (0..pool_meta.clusters.n)
            .map(|_| {
                let c = pool_values[cursor..cursor + pool_meta.clusters.dim].to_vec();
                cursor += pool_meta.clusters.dim;
                c
            })
            .collect()
    } else {
        Vec::new()
    };
    let clusters = ClusterModel {
        centers,
        n: pool_meta.clusters.n,
        fitted: pool_meta.clusters.fitted,
    };

    let history = history_from_csv(&read_text(&dir.join("history.csv"))?)?;

    Ok(LoadedCheckpoint { model, vocabulary, optimizer, pool, clusters, history })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, tiny_dataset};
    use super::super::train;
    use super::*;
    use crate::data::split_by_learner;

    fn trained_fixture(
        dir: &Path,
    ) -> (Model, Vocabulary, Vec<EpochRow>) {
        let set = tiny_dataset(6, 9, 30);
        let config = tiny_config();
        let (train_seqs, val_seqs) = split_by_learner(&set.sequences, 0.8, config.seed).unwrap();
        let mut model = Model::new(
            &config,
            set.vocabulary.n_concepts(),
            set.vocabulary.n_exercises(),
        )
        .unwrap();
        let outcome = train(&mut model, &train_seqs, &val_seqs, |_| Ok(())).unwrap();
        save_checkpoint(
            dir,
            &model,
            &set.vocabulary,
            &outcome.optimizer,
            &outcome.pool,
            &outcome.clusters,
            &outcome.history,
        )
        .unwrap();
        (model, set.vocabulary, outcome.history)
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (model, vocabulary, history) = trained_fixture(dir.path());
        let loaded = load_checkpoint(dir.path()).unwrap();

        assert_eq!(loaded.model.config, model.config);
        assert_eq!(loaded.vocabulary, vocabulary);
        assert_eq!(loaded.history, history);
        for id in model.store.ids().collect::<Vec<_>>() {
            let a = model.store.value(id).data();
            let b = loaded.model.store.value(id).data();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", model.store.name(id));
            }
        }
    }

    #[test]
    fn history_floats_survive_csv_round_trip() {
        let rows = vec![EpochRow {
            epoch: 1,
            train_loss: 0.1 + 0.2,
            val_auc: 1.0 / 3.0,
            val_acc: f64::MIN_POSITIVE,
            val_rmse: 0.987654321987654,
            val_mae: 1e-17,
        }];
        let parsed = history_from_csv(&history_to_csv(&rows)).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].train_loss.to_bits(), rows[0].train_loss.to_bits());
        assert_eq!(parsed[0].val_auc.to_bits(), rows[0].val_auc.to_bits());
        assert_eq!(parsed[0].val_acc.to_bits(), rows[0].val_acc.to_bits());
        assert_eq!(parsed[0].val_mae.to_bits(), rows[0].val_mae.to_bits());
    }

    #[test]
    fn truncated_blob_is_rejected_with_shapes() {
        let dir = tempfile::tempdir().unwrap();
        trained_fixture(dir.path());
        let blob = std::fs::read(dir.path().join("params.bin")).unwrap();
        std::fs::write(dir.path().join("params.bin"), &blob[..blob.len() - 8]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
        assert!(err.to_string().contains("expects"));
    }

    #[test]
    fn missing_checkpoint_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(&dir.path().join("nope")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
