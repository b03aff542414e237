//! Persistent per-class prototype memory, refreshed from sample pools
//! with the current encoder and queried when pathway classes lack
//! support data in the current task.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::encoder::{embed_plain, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::ClassId;
use crate::store::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct MemoryEntry {
    vector: Vec<f64>,
    last_refresh: u64,
}

/// Map from class to its stored prototype and last refresh episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeMemory {
    entries: BTreeMap<ClassId, MemoryEntry>,
}

/// Which classes a refresh touched and which it skipped for lack of data.
#[derive(Clone, Debug, Default)]
pub struct RefreshOutcome {
    pub refreshed: Vec<ClassId>,
    pub skipped_empty: Vec<ClassId>,
}

impl PrototypeMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, y: ClassId) -> bool {
        self.entries.contains_key(&y)
    }

    /// Read-only prototype lookup; `None` excludes the class from pathways.
    pub fn fetch(&self, y: ClassId) -> Option<&[f64]> {
        self.entries.get(&y).map(|e| e.vector.as_slice())
    }

    pub fn last_refresh(&self, y: ClassId) -> Option<u64> {
        self.entries.get(&y).map(|e| e.last_refresh)
    }

    /// All stored prototypes, for pathway edge weighting.
    pub fn protos(&self) -> BTreeMap<ClassId, Vec<f64>> {
        self.entries
            .iter()
            .map(|(&y, e)| (y, e.vector.clone()))
            .collect()
    }

    /// Re-embeds up to `cap` samples per class (uniform without
    /// replacement when the pool is larger) and stores the mean embedding
    /// with stamp `episode`. Classes with empty pools are skipped and
    /// reported.
    pub fn refresh<R: Rng>(
        &mut self,
        store: &ParameterStore,
        enc_cfg: &EncoderConfig,
        class_data: &BTreeMap<ClassId, Vec<Vec<f64>>>,
        episode: u64,
        cap: usize,
        rng: &mut R,
    ) -> Result<RefreshOutcome> {
        if cap == 0 {
            return Err(Error::Argument("refresh sample cap must be >= 1".into()));
        }
        let mut outcome = RefreshOutcome::default();
        let mut fresh: BTreeMap<ClassId, MemoryEntry> = BTreeMap::new();
        for (&y, pool) in class_data {
            if pool.is_empty() {
                outcome.skipped_empty.push(y);
                continue;
            }
            if let Some(old) = self.entries.get(&y) {
                if episode < old.last_refresh {
                    return Err(Error::State(format!(
                        "refresh stamp for class {y} would decrease ({} -> {episode})",
                        old.last_refresh
                    )));
                }
            }
            let picked: Vec<usize> = if pool.len() <= cap {
                (0..pool.len()).collect()
            } else {
                let mut idx = rand::seq::index::sample(rng, pool.len(), cap).into_vec();
                idx.sort_unstable();
                idx
            };
            let mut mean = vec![0.0; enc_cfg.embed_dim];
            for &i in &picked {
                let emb = embed_plain(store, enc_cfg, &pool[i])?;
                for (m, e) in mean.iter_mut().zip(&emb) {
                    *m += e;
                }
            }
            let n = picked.len() as f64;
            for m in &mut mean {
                *m /= n;
            }
            if !mean.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite memory prototype for class {y}"
                )));
            }
            fresh.insert(y, MemoryEntry { vector: mean, last_refresh: episode });
            outcome.refreshed.push(y);
        }
        // swap in all updates at once so readers never see a half refresh
        self.entries.extend(fresh);
        Ok(outcome)
    }

    /// Writes the memory as a parameter container with `memory/<id>`
    /// vector slots and `stamp/<id>` scalar slots.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = ParameterStore::new();
        for (&y, e) in &self.entries {
            store.insert(&format!("memory/{y}"), Tensor::vector(e.vector.clone()), false);
            store.insert(&format!("stamp/{y}"), Tensor::scalar(e.last_refresh as f64), false);
        }
        store.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = ParameterStore::load(path)?;
        let mut entries = BTreeMap::new();
        for name in store.names() {
            if let Some(id) = name.strip_prefix("memory/") {
                let y = ClassId(id.parse::<u32>().map_err(|_| {
                    Error::Parse(format!("bad memory slot name `{name}`"))
                })?);
                let vector = store.value(name).unwrap().data().to_vec();
                let stamp = store
                    .value(&format!("stamp/{y}"))
                    .map_err(|_| Error::Parse(format!("missing stamp for class {y}")))?
                    .as_scalar() as u64;
                entries.insert(y, MemoryEntry { vector, last_refresh: stamp });
            } else if !name.starts_with("stamp/") {
                return Err(Error::Parse(format!(
                    "unexpected slot `{name}` in memory snapshot"
                )));
            }
        }
        Ok(PrototypeMemory { entries })
    }
}
