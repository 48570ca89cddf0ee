use rand::seq::index;
use rand::Rng;

use super::Dataset;
use crate::error::{RapError, Result};

/// An N-way K-shot Q-query task. Images are listed class-major; the
/// episode-local label of class `classes[n]` is `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub queries: Vec<usize>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.support.len()).map(|i| i / self.shot).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.queries.len()).map(|i| i / self.query).collect()
    }

    /// Support images followed by query images.
    pub fn images(&self) -> Vec<usize> {
        self.support.iter().chain(&self.queries).copied().collect()
    }
}

/// Draws episodes from a fixed pool of classes.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    classes: Vec<usize>,
    by_class: Vec<Vec<usize>>,
    way: usize,
    shot: usize,
    query: usize,
}

impl EpisodeSampler {
    pub fn new(dataset: &Dataset, classes: &[usize], way: usize, shot: usize, query: usize) -> Result<Self> {
        if way == 0 || shot == 0 || query == 0 {
            return Err(RapError::InvalidConfig("way, shot and query must be positive".into()));
        }
        if classes.len() < way {
            return Err(RapError::InsufficientData(format!(
                "{way}-way episodes need {way} classes, split has {} (short by {})",
                classes.len(),
                way - classes.len()
            )));
        }
        let index = dataset.class_index();
        let mut by_class = Vec::with_capacity(classes.len());
        for &c in classes {
            let imgs = index.get(c).cloned().unwrap_or_default();
            if imgs.len() < shot + query {
                return Err(RapError::InsufficientData(format!(
                    "class {c} has {} images, episodes need {} (short by {})",
                    imgs.len(),
                    shot + query,
                    shot + query - imgs.len()
                )));
            }
            by_class.push(imgs);
        }
        Ok(Self {
            classes: classes.to_vec(),
            by_class,
            way,
            shot,
            query,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Episode {
        let picked = index::sample(rng, self.classes.len(), self.way).into_vec();
        let mut support = Vec::with_capacity(self.way * self.shot);
        let mut queries = Vec::with_capacity(self.way * self.query);
        let mut classes = Vec::with_capacity(self.way);
        for &p in &picked {
            let imgs = &self.by_class[p];
            let chosen = index::sample(rng, imgs.len(), self.shot + self.query).into_vec();
            support.extend(chosen[..self.shot].iter().map(|&i| imgs[i]));
            queries.extend(chosen[self.shot..].iter().map(|&i| imgs[i]));
            classes.push(self.classes[p]);
        }
        Episode {
            way: self.way,
            shot: self.shot,
            query: self.query,
            classes,
            support,
            queries,
        }
    }
}

pub fn sample_episode(
    dataset: &Dataset,
    classes: &[usize],
    way: usize,
    shot: usize,
    query: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    Ok(EpisodeSampler::new(dataset, classes, way, shot, query)?.sample(rng))
}
