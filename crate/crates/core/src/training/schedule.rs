//! The interleaved phase plan.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseKind {
    /// Value-modeler masked-token training before the first round.
    Pretrain,
    /// Value-modeler masked-token training inside a round.
    Tvm,
    /// Key representations recomputed with frozen value-modeler weights.
    KrBuild,
    /// Aggregator classification training on frozen key representations.
    Ka,
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseKind::Pretrain => "pretrain",
            PhaseKind::Tvm => "tvm",
            PhaseKind::KrBuild => "kr-build",
            PhaseKind::Ka => "ka",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: PhaseKind,
    /// 0 for pretraining, 1-based otherwise.
    pub round: usize,
    /// Optimizer steps; 0 for key-representation builds.
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterleaveSchedule {
    pub rounds: usize,
    pub pretrain_steps: usize,
    pub tvm_steps_per_round: usize,
    pub ka_steps_per_round: usize,
}

impl Default for InterleaveSchedule {
    fn default() -> Self {
        InterleaveSchedule {
            rounds: 3,
            pretrain_steps: 600,
            tvm_steps_per_round: 400,
            ka_steps_per_round: 200,
        }
    }
}

impl InterleaveSchedule {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rounds == 0 {
            out.push("schedule.rounds must be >= 1".to_string());
        }
        if self.ka_steps_per_round == 0 {
            out.push("schedule.ka_steps_per_round must be >= 1".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Pretraining, then per round: value-modeler steps, a key-representation
    /// build and aggregator steps.
    pub fn phases(&self) -> Vec<Phase> {
        let mut out = vec![Phase {
            kind: PhaseKind::Pretrain,
            round: 0,
            steps: self.pretrain_steps,
        }];
        for round in 1..=self.rounds {
            out.push(Phase {
                kind: PhaseKind::Tvm,
                round,
                steps: self.tvm_steps_per_round,
            });
            out.push(Phase {
                kind: PhaseKind::KrBuild,
                round,
                steps: 0,
            });
            out.push(Phase {
                kind: PhaseKind::Ka,
                round,
                steps: self.ka_steps_per_round,
            });
        }
        out
    }

    /// The schedule without interleaving: pretraining and a single round.
    pub fn without_interleaving(&self) -> Self {
        InterleaveSchedule {
            rounds: 1,
            ..self.clone()
        }
    }
}
