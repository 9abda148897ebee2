use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vit::{init_vit, patchify, vit_forward, VitConfig};
use crate::data::TeacherTable;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    SeededFrozenEncoder,
    PrecomputedFile,
}

/// Frozen source of distillation targets.
///
/// Either a seed-initialized copy of the student transformer architecture or a
/// table of exported embeddings keyed by sample id. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherHandle<T: Scalar> {
    Seeded {
        cfg: VitConfig,
        params: ParamStore<T>,
    },
    Precomputed {
        table: BTreeMap<u64, Vec<f32>>,
        file_dim: usize,
        /// Frozen `[file_dim, D]` map, present when the file width differs from `D`.
        adapter: Option<Tensor<T>>,
    },
}

impl<T: Scalar> TeacherHandle<T> {
    pub fn seeded(cfg: &VitConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::Seeded {
            cfg: *cfg,
            params: init_vit(cfg, &mut rng),
        }
    }

    /// Wraps a teacher table for a student of width `student_dim`.
    ///
    /// A width mismatch is an error unless `adapter` is set, in which case a
    /// seeded random linear map (std `1/sqrt(file_dim)`) is inserted.
    pub fn precomputed(table: TeacherTable, student_dim: usize, adapter: bool, seed: u64) -> Result<Self> {
        let adapter = if table.dim == student_dim {
            None
        } else if adapter {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(normal_tensor(&mut rng, &[table.dim, student_dim], (1.0 / table.dim as f64).sqrt()))
        } else {
            return Err(Error::format(format!(
                "teacher embedding width {} does not match student width {student_dim}",
                table.dim
            )));
        };
        Ok(Self::Precomputed {
            table: table.entries,
            file_dim: table.dim,
            adapter,
        })
    }

    pub fn mode(&self) -> TeacherMode {
        match self {
            Self::Seeded { .. } => TeacherMode::SeededFrozenEncoder,
            Self::Precomputed { .. } => TeacherMode::PrecomputedFile,
        }
    }

    /// Hash of everything that determines the teacher's outputs.
    pub fn content_hash(&self) -> String {
        match self {
            Self::Seeded { params, .. } => params.content_hash(),
            Self::Precomputed { table, adapter, .. } => {
                let mut bytes = Vec::new();
                for (id, v) in table {
                    bytes.extend(id.to_le_bytes());
                    for x in v {
                        bytes.extend(x.to_le_bytes());
                    }
                }
                if let Some(a) = adapter {
                    for x in a.data() {
                        bytes.extend(x.as_f64().to_le_bytes());
                    }
                }
                crate::params::sha256_hex(bytes)
            }
        }
    }

    /// Ids absent from a precomputed table (always empty in seeded mode).
    pub fn missing_ids(&self, ids: &[u64]) -> Vec<u64> {
        match self {
            Self::Seeded { .. } => Vec::new(),
            Self::Precomputed { table, .. } => ids.iter().copied().filter(|id| !table.contains_key(id)).collect(),
        }
    }

    /// Detached `[B, D]` teacher class-token embeddings for a batch.
    ///
    /// `images` is `[B, C, H, W]`; `ids` are the matching sample ids.
    pub fn embed(&self, images: &Tensor<T>, ids: &[u64]) -> Result<Tensor<T>> {
        match self {
            Self::Seeded { cfg, params } => {
                let tape = Tape::new();
                let p = params.bind(&tape, |_| false);
                let patches = tape.constant(&patchify(images, cfg)?);
                let (f_cls, _) = vit_forward(cfg, &p, patches)?;
                Ok(f_cls.value())
            }
            Self::Precomputed {
                table,
                file_dim,
                adapter,
            } => {
                let mut data = Vec::with_capacity(ids.len() * file_dim);
                for id in ids {
                    let row = table
                        .get(id)
                        .ok_or_else(|| Error::format(format!("teacher table has no embedding for sample id {id}")))?;
                    data.extend(row.iter().map(|&x| T::of_f32(x)));
                }
                let raw = Tensor::new([ids.len(), *file_dim], data)?;
                match adapter {
                    None => Ok(raw),
                    Some(a) => {
                        let tape = Tape::new();
                        Ok(tape.constant(&raw).matmul(tape.constant(a))?.value())
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(dim: usize) -> TeacherTable {
        let mut entries = BTreeMap::new();
        entries.insert(3u64, (0..dim).map(|i| i as f32 * 0.5).collect());
        entries.insert(9u64, vec![1.0; dim]);
        TeacherTable { dim, entries }
    }

    #[test]
    fn seeded_is_deterministic() {
        let cfg = VitConfig::default();
        let imgs = Tensor::<f64>::full([2, 3, 32, 32], 0.25);
        let a = TeacherHandle::seeded(&cfg, 42).embed(&imgs, &[0, 1]).unwrap();
        let b = TeacherHandle::seeded(&cfg, 42).embed(&imgs, &[0, 1]).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[2, 64]);
    }

    #[test]
    fn precomputed_lookup_and_missing_ids() {
        let t = TeacherHandle::<f64>::precomputed(table(4), 4, false, 0).unwrap();
        let dummy = Tensor::zeros([2, 3, 32, 32]);
        let e = t.embed(&dummy, &[9, 3]).unwrap();
        assert_eq!(e.row(0), &[1.0; 4]);
        assert_eq!(e.row(1), &[0.0, 0.5, 1.0, 1.5]);
        assert_eq!(t.missing_ids(&[3, 4, 9, 5]), vec![4, 5]);
        assert!(t.embed(&dummy, &[3, 4]).is_err());
    }

    #[test]
    fn width_mismatch_needs_adapter() {
        assert!(TeacherHandle::<f64>::precomputed(table(6), 4, false, 0).is_err());
        let t = TeacherHandle::<f64>::precomputed(table(6), 4, true, 0).unwrap();
        let e = t.embed(&Tensor::zeros([1, 3, 32, 32]), &[9]).unwrap();
        assert_eq!(e.shape(), &[1, 4]);
    }
}
