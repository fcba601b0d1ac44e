// SPDX-License-Identifier: Apache-2.0
//! Line-oriented schedule scripts.
//!
//! One command per line, `#` starts a comment. Loops are written
//! `block.var`; a bare `var` refers to a loop of the command's own block.
//!
//! ```text
//! tile s_max j 2
//! split_k_update s_sum s_max.j0
//! ```

use std::fmt;

use thiserror::Error;

use super::{Diagnostic, Outcome, ScheduleError, ScheduleState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopRef {
    pub block: String,
    pub var: String,
}

impl LoopRef {
    fn parse(s: &str, default_block: &str) -> LoopRef {
        match s.split_once('.') {
            Some((b, v)) => LoopRef { block: b.into(), var: v.into() },
            None => LoopRef { block: default_block.into(), var: s.into() },
        }
    }
}

impl fmt::Display for LoopRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.var)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Tile { block: String, vars: Vec<String>, sizes: Vec<i64> },
    Fuse { block: String, at: LoopRef },
    ComputeAt { block: String, at: LoopRef },
    ReverseComputeAt { block: String, at: LoopRef },
    DecomposeReduction { block: String, var: String },
    PrivatizeReduce { block: String, var: String, k: i64 },
    FuseAndPrivatize { block: String, at: LoopRef },
    Inline { producer: String, consumer: String },
    /// `factor_axis` is recorded but has no effect.
    RollingUpdate { block: String, at: LoopRef, factor_axis: Option<i64> },
    SplitKUpdate { block: String, at: LoopRef },
    CacheRead { block: String, index: usize, scope: String },
    SetScope { block: String, index: usize, scope: String },
    BindBlockIdx { loops: Vec<LoopRef>, names: Vec<String> },
    /// Accepted for compatibility; recorded only.
    SplitScanBuffer { block: String, var: String, axis: i64 },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Tile { .. } => "tile",
            Command::Fuse { .. } => "fuse",
            Command::ComputeAt { .. } => "compute_at",
            Command::ReverseComputeAt { .. } => "reverse_compute_at",
            Command::DecomposeReduction { .. } => "decompose_reduction",
            Command::PrivatizeReduce { .. } => "privatize_reduce",
            Command::FuseAndPrivatize { .. } => "fuse_and_privatize",
            Command::Inline { .. } => "inline",
            Command::RollingUpdate { .. } => "rolling_update",
            Command::SplitKUpdate { .. } => "split_k_update",
            Command::CacheRead { .. } => "cache_read",
            Command::SetScope { .. } => "set_scope",
            Command::BindBlockIdx { .. } => "bind_block_idx",
            Command::SplitScanBuffer { .. } => "split_scan_buffer",
        }
    }

    /// The block the command is about, for diagnostics.
    pub fn target(&self) -> String {
        match self {
            Command::Tile { block, .. }
            | Command::Fuse { block, .. }
            | Command::ComputeAt { block, .. }
            | Command::ReverseComputeAt { block, .. }
            | Command::DecomposeReduction { block, .. }
            | Command::PrivatizeReduce { block, .. }
            | Command::FuseAndPrivatize { block, .. }
            | Command::RollingUpdate { block, .. }
            | Command::SplitKUpdate { block, .. }
            | Command::CacheRead { block, .. }
            | Command::SetScope { block, .. }
            | Command::SplitScanBuffer { block, .. } => block.clone(),
            Command::Inline { consumer, .. } => consumer.clone(),
            Command::BindBlockIdx { loops, .. } => loops.first().map_or_else(String::new, |l| l.block.clone()),
        }
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.name();
        match self {
            Command::Tile { block, vars, sizes } => write!(f, "{n} {block} {} {}", join(vars), join(sizes)),
            Command::Fuse { block, at }
            | Command::ComputeAt { block, at }
            | Command::ReverseComputeAt { block, at }
            | Command::FuseAndPrivatize { block, at }
            | Command::SplitKUpdate { block, at } => write!(f, "{n} {block} {at}"),
            Command::RollingUpdate { block, at, factor_axis } => {
                write!(f, "{n} {block} {at}")?;
                match factor_axis {
                    Some(a) => write!(f, " factor_axis={a}"),
                    None => Ok(()),
                }
            }
            Command::DecomposeReduction { block, var } => write!(f, "{n} {block} {var}"),
            Command::PrivatizeReduce { block, var, k } => write!(f, "{n} {block} {var} {k}"),
            Command::Inline { producer, consumer } => write!(f, "{n} {producer} {consumer}"),
            Command::CacheRead { block, index, scope } | Command::SetScope { block, index, scope } => {
                write!(f, "{n} {block} {index} {scope}")
            }
            Command::BindBlockIdx { loops, names } => write!(f, "{n} {} {}", join(loops), join(names)),
            Command::SplitScanBuffer { block, var, axis } => write!(f, "{n} {block} {var} {axis}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("script line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

fn parse_line(words: &[&str]) -> Result<Command, String> {
    let (&op, args) = words.split_first().ok_or("empty command")?;
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("`{op}` takes {n} arguments, got {}", args.len()))
        }
    };
    let int = |s: &str| s.parse::<i64>().map_err(|_| format!("`{s}` is not an integer"));
    let list = |s: &str| s.split(',').map(str::to_string).collect::<Vec<_>>();
    let b = || args[0].to_string();
    let lr = || LoopRef::parse(args[1], args[0]);
    Ok(match op {
        "tile" => {
            arity(3)?;
            let sizes = args[2].split(',').map(int).collect::<Result<Vec<_>, _>>()?;
            Command::Tile { block: b(), vars: list(args[1]), sizes }
        }
        "fuse" => arity(2).map(|_| Command::Fuse { block: b(), at: lr() })?,
        "compute_at" => arity(2).map(|_| Command::ComputeAt { block: b(), at: lr() })?,
        "reverse_compute_at" => arity(2).map(|_| Command::ReverseComputeAt { block: b(), at: lr() })?,
        "fuse_and_privatize" => arity(2).map(|_| Command::FuseAndPrivatize { block: b(), at: lr() })?,
        "split_k_update" => arity(2).map(|_| Command::SplitKUpdate { block: b(), at: lr() })?,
        "decompose_reduction" => arity(2).map(|_| Command::DecomposeReduction { block: b(), var: args[1].into() })?,
        "inline" => arity(2).map(|_| Command::Inline { producer: b(), consumer: args[1].into() })?,
        "privatize_reduce" => {
            arity(3)?;
            Command::PrivatizeReduce { block: b(), var: args[1].into(), k: int(args[2])? }
        }
        "rolling_update" => {
            let factor_axis = match args {
                [_, _] => None,
                [_, _, fa] => Some(int(fa.strip_prefix("factor_axis=").ok_or(format!("unexpected `{fa}`"))?)?),
                _ => return Err(format!("`{op}` takes 2 arguments and an optional factor_axis=N")),
            };
            Command::RollingUpdate { block: b(), at: lr(), factor_axis }
        }
        "cache_read" | "set_scope" => {
            arity(3)?;
            let index = args[1].parse::<usize>().map_err(|_| format!("`{}` is not a buffer index", args[1]))?;
            let (block, scope) = (b(), args[2].to_string());
            if op == "cache_read" {
                Command::CacheRead { block, index, scope }
            } else {
                Command::SetScope { block, index, scope }
            }
        }
        "bind_block_idx" => {
            arity(2)?;
            let loops: Vec<LoopRef> = args[0]
                .split(',')
                .map(|s| s.split_once('.').map(|_| LoopRef::parse(s, "")).ok_or(format!("`{s}` is not block.var")))
                .collect::<Result<_, _>>()?;
            let names = list(args[1]);
            if loops.len() != names.len() {
                return Err(format!("{} loops but {} names", loops.len(), names.len()));
            }
            Command::BindBlockIdx { loops, names }
        }
        "split_scan_buffer" => {
            arity(3)?;
            Command::SplitScanBuffer { block: b(), var: args[1].into(), axis: int(args[2])? }
        }
        _ => return Err(format!("unknown command `{op}`")),
    })
}

pub fn parse_script(src: &str) -> Result<Vec<Command>, ScriptError> {
    let mut out = Vec::new();
    for (k, raw) in src.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        out.push(parse_line(&words).map_err(|msg| ScriptError { line: k + 1, msg })?);
    }
    Ok(out)
}

pub(crate) fn dispatch(s: &mut ScheduleState, cmd: &Command) -> Result<Outcome, Diagnostic> {
    let step = cmd.name();
    let wrap = |r: Result<(), ScheduleError>| {
        r.map(|_| Outcome::Applied).map_err(|error| Diagnostic {
            primitive: step.into(),
            target: cmd.target(),
            step,
            error,
        })
    };
    match cmd {
        Command::Tile { block, vars, sizes } => wrap(s.tile(block, vars, sizes)),
        Command::Fuse { block, at } => wrap(s.fuse(block, at)),
        Command::ComputeAt { block, at } => wrap(s.compute_at(block, at)),
        Command::ReverseComputeAt { block, at } => wrap(s.reverse_compute_at(block, at)),
        Command::DecomposeReduction { block, var } => wrap(s.decompose_reduction(block, var).map(|_| ())),
        Command::PrivatizeReduce { block, var, k } => wrap(s.privatize_reduce(block, var, *k).map(|_| ())),
        Command::FuseAndPrivatize { block, at } => wrap(s.fuse_and_privatize(block, at).map(|_| ())),
        Command::Inline { producer, consumer } => wrap(s.inline(producer, consumer)),
        Command::RollingUpdate { block, at, .. } => s.rolling_update(block, at).map(Outcome::Repaired),
        Command::SplitKUpdate { block, at } => s.split_k_update(block, at).map(|(_, c)| Outcome::Repaired(c)),
        Command::CacheRead { block, index, scope } => wrap(s.cache_read(block, *index, scope).map(|_| ())),
        Command::SetScope { block, index, scope } => wrap(s.set_scope(block, *index, scope)),
        Command::BindBlockIdx { loops, names } => wrap(s.bind_block_idx(loops, names)),
        Command::SplitScanBuffer { block, .. } => {
            wrap(s.resolve_block(block).map(|_| ())).map(|_| Outcome::Annotation)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loop_ir::{equivalent_modulo_names, parse_program};
    use crate::scheduler::fixtures::softmax;

    #[test]
    fn round_trip() {
        let src = "\
tile batch_matmul i,j 4,8
reverse_compute_at T_score_mod batch_matmul.j
rolling_update T_softmax_expsum batch_matmul.j0 factor_axis=0
privatize_reduce s_max j 2
bind_block_idx a.i,a.j blockIdx.x,blockIdx.y
split_scan_buffer b2 j0 0
set_scope a 0 shared
inline s_exp s_sum
";
        let cmds = parse_script(src).unwrap();
        let printed: Vec<String> = cmds.iter().map(|c| c.to_string()).collect();
        assert_eq!(printed.join("\n") + "\n", src);
    }

    #[test]
    fn bare_loop_names_refer_to_the_block() {
        let c = parse_script("fuse s_sum j  # trailing comment\n\n").unwrap();
        assert_eq!(c, vec![Command::Fuse { block: "s_sum".into(), at: LoopRef { block: "s_sum".into(), var: "j".into() } }]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_script("# header\ntile a i x\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(parse_script("frobnicate a").is_err());
        assert!(parse_script("fuse a").is_err());
    }

    #[test]
    fn scripted_run_logs_certificates() {
        let mut s = ScheduleState::new(softmax());
        s.run(&parse_script("inline s_exp s_sum\nfuse s_sum s_max.j\nrolling_update s_sum s_max.j\n").unwrap()).unwrap();
        assert_eq!(s.log.len(), 3);
        assert_eq!(s.certificates().len(), 1);
        let mut t = ScheduleState::new(softmax());
        t.rolling_update("s_sum", &LoopRef { block: "s_max".into(), var: "j".into() }).unwrap();
        equivalent_modulo_names(&s.program, &t.program).unwrap();
    }

    #[test]
    fn failed_command_is_logged_and_stops_the_run() {
        let mut s = ScheduleState::new(softmax());
        let before = s.program.clone();
        let d = s.run(&parse_script("tile s_max j 3\nfuse s_sum s_max.j\n").unwrap()).unwrap_err();
        assert_eq!(d.step, "tile");
        assert_eq!(s.log.len(), 1);
        assert_eq!(s.program, before);
        assert!(parse_program(&crate::loop_ir::print_loop_ir(&s.program)).is_ok());
    }
}
