//! Metrics, purification defenses and report assembly.

pub mod metrics;
pub mod purify;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::attacks::item_seed;
use crate::diffusion::Cond;
use crate::error::Result;
use crate::models::LatentModel;
use crate::tensor::Tensor;
use crate::threats::{sdedit, DEFAULT_DDIM_STEPS};

/// How edits are compared. Image `i` gets a reference edit under one seed
/// and a probe edit under another, so a "clean" comparison measures the
/// editor's own seed variability and a protected comparison adds the
/// effect of the perturbation on top of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditProtocol {
    pub strength: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    DEFAULT_DDIM_STEPS
}

impl EditProtocol {
    pub fn new(strength: f64, seed: u64) -> Self {
        Self {
            strength,
            steps: DEFAULT_DDIM_STEPS,
            seed,
        }
    }

    pub fn reference_seed(&self, index: usize) -> u64 {
        item_seed(self.seed, index)
    }

    pub fn probe_seed(&self, index: usize) -> u64 {
        item_seed(self.seed ^ 0x9e37_79b9_7f4a_7c15, index)
    }

    /// Edit of image `index` under its reference seed.
    pub fn reference(&self, x: &Tensor, model: &dyn LatentModel, index: usize) -> Result<Tensor> {
        sdedit(x, model, self.strength, self.steps, &Cond::None, self.reference_seed(index))
    }

    /// Edit of image `index` under its probe seed.
    pub fn probe(&self, x: &Tensor, model: &dyn LatentModel, index: usize) -> Result<Tensor> {
        sdedit(x, model, self.strength, self.steps, &Cond::None, self.probe_seed(index))
    }
}

/// Runs `f` over `0..n` on a pool of `jobs` threads, keeping order.
pub(crate) fn par_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| crate::error::Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}
