//! Seed expansion into labelled random streams.
//!
//! A run is driven by one base seed. Each consumer (Monte Carlo sampling,
//! ball points for the surrogate, subproblem multi-starts) gets its own
//! ChaCha stream selected by a fixed label, so adding or reordering consumers
//! never perturbs the others.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream labels. The numeric values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamLabel {
    Sampling = 1,
    BallPoints = 2,
    MultiStart = 3,
}

/// Build the generator for `label` under `seed`.
pub fn labelled_rng(seed: u64, label: StreamLabel) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label as u64);
    rng
}

/// How successive full reliability evaluations within one run draw their
/// samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplePolicy {
    /// Every full evaluation restarts the sampling stream, so all evaluations
    /// of a run share the same underlying random numbers and the estimated
    /// constraint is a deterministic function of the design.
    #[default]
    Common,
    /// The sampling stream advances, giving statistically independent
    /// evaluations.
    Fresh,
}

/// The random streams owned by one optimization run.
#[derive(Debug, Clone)]
pub struct RunStreams {
    seed: u64,
    policy: SamplePolicy,
    sampling: ChaCha8Rng,
    pub ball: ChaCha8Rng,
    pub multistart: ChaCha8Rng,
}

impl RunStreams {
    pub fn new(seed: u64, policy: SamplePolicy) -> Self {
        Self {
            seed,
            policy,
            sampling: labelled_rng(seed, StreamLabel::Sampling),
            ball: labelled_rng(seed, StreamLabel::BallPoints),
            multistart: labelled_rng(seed, StreamLabel::MultiStart),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn policy(&self) -> SamplePolicy {
        self.policy
    }

    /// Generator to hand to the next full reliability evaluation.
    pub fn sampling(&mut self) -> ChaCha8Rng {
        match self.policy {
            SamplePolicy::Common => labelled_rng(self.seed, StreamLabel::Sampling),
            SamplePolicy::Fresh => {
                let mut child = ChaCha8Rng::seed_from_u64(self.sampling.next_u64());
                child.set_stream(StreamLabel::Sampling as u64);
                child
            }
        }
    }
}
