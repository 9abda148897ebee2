//! Few-shot episodes: a support set where every novel class occurs exactly
//! `K` times (counted with multiplicity) and a disjoint query set.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub shots: usize,
    pub episodes: usize,
    pub query_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Dataset indices.
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl EpisodeSpec {
    fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::config("episodes.shots: must be at least 1"));
        }
        if self.novel_classes.is_empty() {
            return Err(Error::config("episodes.novel_classes: must not be empty"));
        }
        let base: HashSet<usize> = self.base_classes.iter().copied().collect();
        let mut novel = HashSet::new();
        for &c in &self.novel_classes {
            if c >= ds.classes {
                return Err(Error::config(format!("episodes.novel_classes: class {c} out of range")));
            }
            if base.contains(&c) {
                return Err(Error::config(format!("episodes: class {c} is both base and novel")));
            }
            if !novel.insert(c) {
                return Err(Error::config(format!("episodes.novel_classes: class {c} listed twice")));
            }
        }
        if let Some(&c) = self.base_classes.iter().find(|&&c| c >= ds.classes) {
            return Err(Error::config(format!("episodes.base_classes: class {c} out of range")));
        }
        let counts = ds.class_counts();
        for &c in &self.novel_classes {
            if counts[c] < self.shots {
                return Err(Error::config(format!(
                    "insufficient samples: novel class {c} has {} samples, {} shots requested",
                    counts[c], self.shots
                )));
            }
        }
        Ok(())
    }
}

fn try_support(ds: &Dataset, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let mut have = vec![0usize; ds.classes];
    let mut chosen = Vec::new();
    let mut used = HashSet::new();
    let mut order = spec.novel_classes.clone();
    order.shuffle(rng);
    for &c in &order {
        let mut pool: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].labels[c] && !used.contains(&i)).collect();
        pool.shuffle(rng);
        for i in pool {
            if have[c] == spec.shots {
                break;
            }
            let fits = spec
                .novel_classes
                .iter()
                .all(|&n| have[n] + ds.samples[i].labels[n] as usize <= spec.shots);
            if fits {
                for &n in &spec.novel_classes {
                    have[n] += ds.samples[i].labels[n] as usize;
                }
                used.insert(i);
                chosen.push(i);
            }
        }
        if have[c] != spec.shots {
            return None;
        }
    }
    Some(chosen)
}

pub fn sample_episodes(ds: &Dataset, spec: &EpisodeSpec) -> Result<Vec<Episode>> {
    spec.validate(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.episodes);
    for e in 0..spec.episodes {
        let support = (0..64)
            .find_map(|_| try_support(ds, spec, &mut rng))
            .ok_or_else(|| {
                Error::config(format!(
                    "episode {e}: could not place exactly {} occurrences of every novel class",
                    spec.shots
                ))
            })?;
        let taken: HashSet<usize> = support.iter().copied().collect();
        let mut query: Vec<usize> = (0..ds.len())
            .filter(|i| !taken.contains(i))
            .filter(|&i| spec.novel_classes.iter().any(|&c| ds.samples[i].labels[c]))
            .collect();
        query.shuffle(&mut rng);
        query.truncate(spec.query_size);
        query.sort_unstable();
        out.push(Episode { support, query });
    }
    Ok(out)
}
