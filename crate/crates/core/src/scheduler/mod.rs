// SPDX-License-Identifier: Apache-2.0
//! Schedule primitives and the reduction-fusion transformations.
//!
//! Every primitive works on a scratch copy of the state and only commits it
//! on success, so a failed call leaves the program exactly as it was. The
//! repair-based transformations report failures as [`Diagnostic`]s naming
//! the step that gave up.

mod fusion;
mod pattern;
mod primitives;
mod privatize;
mod rolling;
mod script;
mod split_k;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::expr::{Reducer, SolveError};
use crate::loop_ir::{validate, BlockRef, IrError, Path, Program};
use crate::repair_solver::RepairCertificate;

pub use pattern::{match_reduce_pattern, ReducePattern};
pub use script::{parse_script, Command, LoopRef, ScriptError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("unknown handle `{0}`")]
    UnknownHandle(String),
    #[error("illegal fusion: {0}")]
    FusionIllegal(String),
    #[error("invalid tile: {0}")]
    InvalidTile(String),
    #[error("`{0}` has no reduce predecessor")]
    NoReducePredecessor(String),
    #[error("pattern mismatch: {0}")]
    PatternMismatch(String),
    #[error(transparent)]
    NotInvertible(#[from] SolveError),
    #[error("repair `{h}` rejected: {reason}")]
    NotCommuting { h: String, reason: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// Why a transformation returned the program unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub primitive: String,
    pub target: String,
    pub step: &'static str,
    pub error: ScheduleError,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}) failed at {}: {}", self.primitive, self.target, self.step, self.error)
    }
}

impl std::error::Error for Diagnostic {}

/// Cached previous/current buffers of one reduce predecessor, plus the
/// blocks that maintain them.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairBinding {
    pub block: String,
    pub prev: String,
    pub curr: String,
    pub reducer: Reducer,
    pub init: String,
    pub carry: String,
}

/// A reduction split into partial results and their combination.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedPair {
    pub local_block: String,
    pub global_block: String,
    pub local_tensor: String,
    pub tensor: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Applied,
    /// Recorded only; no effect on semantics.
    Annotation,
    Repaired(RepairCertificate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub command: String,
    pub outcome: Result<Outcome, Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScheduleState {
    pub program: Program,
    pub log: Vec<LogEntry>,
    pub bindings: Vec<RepairBinding>,
    pub privatized: Vec<PrivatizedPair>,
    /// Blocks that were renamed, mapped to the block now standing for them.
    pub aliases: BTreeMap<String, String>,
}

impl ScheduleState {
    pub fn new(program: Program) -> Self {
        ScheduleState { program, ..Default::default() }
    }

    pub fn resolve_block(&self, name: &str) -> Result<String, ScheduleError> {
        let mut cur = name.to_string();
        for _ in 0..=self.aliases.len() {
            if self.program.block(&cur).is_some() {
                return Ok(cur);
            }
            match self.aliases.get(&cur) {
                Some(next) => cur = next.clone(),
                None => break,
            }
        }
        Err(ScheduleError::UnknownHandle(name.to_string()))
    }

    pub fn resolve_loop(&self, l: &LoopRef) -> Result<Path, ScheduleError> {
        let b = self.resolve_block(&l.block)?;
        self.program
            .loop_of_block(&b, &l.var)
            .ok_or_else(|| ScheduleError::UnknownHandle(format!("{}.{}", l.block, l.var)))
    }

    pub fn binding_of(&self, block: &str) -> Option<&RepairBinding> {
        self.bindings.iter().find(|b| b.block == block)
    }

    pub fn pair_with_global(&self, block: &str) -> Option<&PrivatizedPair> {
        self.privatized.iter().find(|p| p.global_block == block)
    }

    pub fn pair_with_local(&self, block: &str) -> Option<&PrivatizedPair> {
        self.privatized.iter().find(|p| p.local_block == block)
    }

    /// Reductions for dataflow purposes: structural ones plus cached
    /// predecessors, whose rewritten store no longer reads itself.
    pub(crate) fn is_reduce(&self, b: &BlockRef<'_>) -> bool {
        b.structural_reducer().is_some() || self.binding_of(&b.store.name).is_some()
    }

    pub(crate) fn carry_blocks(&self) -> Vec<String> {
        self.bindings.iter().map(|b| b.carry.clone()).collect()
    }

    /// Runs `op` on a scratch copy and commits it only if it succeeds and
    /// the result still validates.
    pub(crate) fn transact<T>(
        &mut self,
        op: impl FnOnce(&mut ScheduleState) -> Result<T, ScheduleError>,
    ) -> Result<T, ScheduleError> {
        let mut scratch = self.clone();
        let out = op(&mut scratch)?;
        validate(&scratch.program)?;
        *self = scratch;
        Ok(out)
    }

    /// Applies one script command and logs it.
    pub fn apply(&mut self, cmd: &Command) -> Result<Outcome, Diagnostic> {
        let outcome = script::dispatch(self, cmd);
        self.log.push(LogEntry { command: cmd.to_string(), outcome: outcome.clone() });
        outcome
    }

    /// Applies commands in order, stopping at the first failure.
    pub fn run(&mut self, cmds: &[Command]) -> Result<(), Diagnostic> {
        for c in cmds {
            self.apply(c)?;
        }
        Ok(())
    }

    pub fn certificates(&self) -> Vec<&RepairCertificate> {
        self.log
            .iter()
            .filter_map(|e| match &e.outcome {
                Ok(Outcome::Repaired(c)) => Some(c),
                _ => None,
            })
            .collect()
    }
}

pub(crate) fn is_under(path: &[usize], l: &[usize]) -> bool {
    path.len() > l.len() && path.starts_with(l)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::loop_ir::{parse_program, Program};

    pub const SOFTMAX: &str = include_str!("../../tests/fixtures/softmax.ir");

    pub fn softmax() -> Program {
        parse_program(SOFTMAX).unwrap()
    }
}
