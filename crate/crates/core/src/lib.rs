// SPDX-License-Identifier: Apache-2.0
//! Reduction fusion for loop-nest programs.
//!
//! The crate fuses a reduction into the reduce loop of the reduction it
//! depends on, derives the algebraic repair term that keeps the fused program
//! correct, and checks every transformation against a reference interpreter.

pub mod cli;
pub mod expr;
pub mod frontend;
pub mod interpreter;
pub mod loop_ir;
pub mod repair_solver;
pub mod scheduler;
pub mod tile_ir;

/// The guide's code snippets, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/loop_ir.md")]
    mod loop_ir {}
    #[doc = include_str!("../../../book/src/repair.md")]
    mod repair {}
    #[doc = include_str!("../../../book/src/scheduling.md")]
    mod scheduling {}
    #[doc = include_str!("../../../book/src/tile_ir.md")]
    mod tile_ir {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
