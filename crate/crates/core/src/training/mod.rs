//! Optimisation loops for both stages, loss logs and checkpoint selection.

mod ldm;
mod run;
mod vae;

pub use ldm::{diffusion_loss, LdmLossReport, LdmTrainer};
pub use run::{encode_dataset, train_ldm, train_vae, CheckpointSeries, RunDir, LDM_LOSS_HEADER, VAE_LOSS_HEADER};
pub use vae::VaeTrainer;

use std::collections::VecDeque;

/// Bounded history of recent loss rows.
#[derive(Clone, Debug)]
pub struct LossHistory<R> {
    cap: usize,
    rows: VecDeque<(u64, R)>,
}

impl<R: Clone> LossHistory<R> {
    pub fn new(cap: usize) -> Self {
        Self { cap, rows: VecDeque::with_capacity(cap) }
    }

    pub fn push(&mut self, iteration: u64, row: R) {
        if self.rows.len() == self.cap {
            self.rows.pop_front();
        }
        self.rows.push_back((iteration, row));
    }

    pub fn rows(&self) -> impl Iterator<Item = &(u64, R)> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// A scored checkpoint candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate<C> {
    pub iteration: u64,
    pub score: f64,
    pub checkpoint: C,
}

/// Lowest score wins; ties go to the earlier iteration.
pub fn select_checkpoint<C>(series: Vec<Candidate<C>>) -> Option<Candidate<C>> {
    series.into_iter().reduce(|best, c| {
        if c.score < best.score || (c.score == best.score && c.iteration < best.iteration) {
            c
        } else {
            best
        }
    })
}

/// Scores each checkpoint with `metric` and returns the best.
pub fn select_by<C, E>(
    checkpoints: Vec<(u64, C)>,
    mut metric: impl FnMut(&C) -> Result<f64, E>,
) -> Result<Option<Candidate<C>>, E> {
    let mut scored = Vec::with_capacity(checkpoints.len());
    for (iteration, checkpoint) in checkpoints {
        let score = metric(&checkpoint)?;
        scored.push(Candidate { iteration, score, checkpoint });
    }
    Ok(select_checkpoint(scored))
}
