// SPDX-License-Identifier: Apache-2.0
//! Driver behind the `reduxion` binary: load a program, run a schedule
//! script over it, then verify, emit tile text, or dump every stage.
//!
//! Each command returns a [`Report`] carrying the text to print and the
//! process exit code, so the binary stays a thin argument parser.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use thiserror::Error;

use crate::frontend::{self, builtin, FrontendError, DECODE_SCRIPT, PREFILL_SCRIPT, SOFTMAX_SCRIPT};
use crate::interpreter::{compare, execute, interpret, random_inputs, CompareReport, InterpError, Options, TensorError};
use crate::loop_ir::{parse_program, print_loop_ir, IrError, Program};
use crate::scheduler::{parse_script, Outcome, ScheduleState, ScriptError};
use crate::tile_ir::{print_pseudo_python, print_tile, translate_report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_BREACH: i32 = 1;
pub const EXIT_IDENTITY: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// A builtin benchmark and its dimensions; `None` picks the default.
    Benchmark { name: String, shape: Option<Vec<usize>> },
    IrFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Empty,
    File(PathBuf),
    /// The script shipped with the benchmark.
    Builtin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmitMode {
    #[default]
    Tile,
    PseudoPython,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: Source,
    pub schedule: Schedule,
    pub seed: u64,
    pub trials: usize,
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub dump_dir: Option<PathBuf>,
    pub emit: EmitMode,
    /// Run the scheduled program on inputs rounded to f32.
    pub f32_inputs: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: Source::Benchmark { name: "softmax_denom".into(), shape: None },
            schedule: Schedule::Empty,
            seed: 0,
            trials: 10,
            tol_rel: 1e-10,
            tol_abs: 0.0,
            dump_dir: None,
            emit: EmitMode::Tile,
            f32_inputs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub code: i32,
    pub text: String,
}

pub fn default_shape(benchmark: &str) -> Vec<usize> {
    match benchmark {
        "softmax_denom" => vec![8, 64],
        "decode_attn" => vec![1, 2, 1, 16, 8],
        _ => vec![1, 2, 16, 16, 8],
    }
}

pub fn builtin_script(benchmark: &str) -> &'static str {
    match benchmark {
        "softmax_denom" => SOFTMAX_SCRIPT,
        "decode_attn" => DECODE_SCRIPT,
        _ => PREFILL_SCRIPT,
    }
}

fn read(path: &PathBuf) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.clone(), source })
}

impl RunConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.trials == 0 {
            return Err(CliError::Usage("--trials must be at least 1".into()));
        }
        if !(self.tol_rel > 0.0 || self.tol_abs > 0.0) || self.tol_rel < 0.0 || self.tol_abs < 0.0 {
            return Err(CliError::Usage("tolerances must be non-negative and not both zero".into()));
        }
        Ok(())
    }

    fn benchmark(&self) -> Option<&str> {
        match &self.source {
            Source::Benchmark { name, .. } => Some(name),
            Source::IrFile(_) => None,
        }
    }

    pub fn load(&self) -> Result<Program, CliError> {
        match &self.source {
            Source::Benchmark { name, shape } => {
                let dims = shape.clone().unwrap_or_else(|| default_shape(name));
                Ok(builtin(name, &dims)?.lower()?)
            }
            Source::IrFile(path) => Ok(parse_program(&read(path)?)?),
        }
    }

    pub fn script(&self) -> Result<String, CliError> {
        match &self.schedule {
            Schedule::Empty => Ok(String::new()),
            Schedule::File(path) => read(path),
            Schedule::Builtin => match self.benchmark() {
                Some(b) => Ok(builtin_script(b).to_string()),
                None => Err(CliError::Usage("the builtin schedule needs --benchmark".into())),
            },
        }
    }
}

/// The program, the schedule state after the script, and the log lines.
/// Stops at the first failing command, whose program is left unchanged.
fn schedule(cfg: &RunConfig, out: &mut String) -> Result<(Program, ScheduleState, bool), CliError> {
    cfg.validate()?;
    let cmds = parse_script(&cfg.script()?)?;
    let p = cfg.load()?;
    let mut st = ScheduleState::new(p.clone());
    let mut failed = false;
    for (k, c) in cmds.iter().enumerate() {
        match st.apply(c) {
            Ok(Outcome::Applied) => writeln!(out, "[{}] {c}: applied", k + 1).unwrap(),
            Ok(Outcome::Annotation) => writeln!(out, "[{}] {c}: recorded (no semantic effect)", k + 1).unwrap(),
            Ok(Outcome::Repaired(cert)) => writeln!(out, "[{}] {c}: repaired, {cert}", k + 1).unwrap(),
            Err(d) => {
                writeln!(out, "[{}] {c}: identity-transform, {d}", k + 1).unwrap();
                failed = true;
                break;
            }
        }
    }
    Ok((p, st, failed))
}

/// Per-tensor maxima over several comparisons; a tensor passes only if it
/// passed every time.
fn merge(acc: &mut Option<CompareReport>, r: CompareReport) {
    let Some(a) = acc else {
        *acc = Some(r);
        return;
    };
    for t in r.tensors {
        match a.tensors.iter_mut().find(|u| u.name == t.name) {
            Some(u) => {
                *u = TensorError {
                    name: t.name,
                    max_abs: u.max_abs.max(t.max_abs),
                    max_rel: u.max_rel.max(t.max_rel),
                    pass: u.pass && t.pass,
                }
            }
            None => a.tensors.push(t),
        }
    }
}

/// Compares the scheduled program against the original over `trials`
/// seeded inputs, and against the dense reference for benchmarks.
pub fn cmd_verify(cfg: &RunConfig) -> Result<Report, CliError> {
    let mut out = String::new();
    let (p, st, failed) = schedule(cfg, &mut out)?;
    if failed {
        writeln!(out, "result: identity-transform (program returned unchanged, not verified)").unwrap();
        return Ok(Report { code: EXIT_IDENTITY, text: out });
    }
    let q = &st.program;
    let mut vs_original = None;
    let mut vs_oracle = None;
    let mut runtime = None;
    for t in 0..cfg.trials {
        let x = random_inputs(&p, cfg.seed.wrapping_add(t as u64), -1.0, 1.0);
        let mut run = || -> Result<(), InterpError> {
            let want = interpret(&p, &x)?;
            let got = execute(q, &x, Options { f32_inputs: cfg.f32_inputs, trace: false })?.outputs(q);
            merge(&mut vs_original, compare(&got, &want, cfg.tol_rel, cfg.tol_abs)?);
            if let Some(b) = cfg.benchmark() {
                if let Ok(oracle) = frontend::reference(b, &x) {
                    merge(&mut vs_oracle, compare(&got, &oracle, cfg.tol_rel, cfg.tol_abs)?);
                }
            }
            Ok(())
        };
        if let Err(e) = run() {
            runtime = Some(e);
            break;
        }
    }
    if let Some(e) = runtime {
        writeln!(out, "result: FAIL, {e}").unwrap();
        return Ok(Report { code: EXIT_BREACH, text: out });
    }
    for c in st.certificates() {
        writeln!(out, "certificate: {c}").unwrap();
    }
    let mut pass = true;
    for (label, r) in [("vs original", vs_original), ("vs reference", vs_oracle)] {
        if let Some(r) = r {
            writeln!(out, "{label} ({} trials, tol_rel={:e}, tol_abs={:e}):", cfg.trials, cfg.tol_rel, cfg.tol_abs).unwrap();
            for line in r.to_string().lines() {
                writeln!(out, "  {line}").unwrap();
            }
            pass &= r.pass();
        }
    }
    writeln!(out, "result: {}", if pass { "PASS" } else { "FAIL" }).unwrap();
    Ok(Report { code: if pass { EXIT_OK } else { EXIT_BREACH }, text: out })
}

fn tile_text(p: &Program, mode: EmitMode, log: &mut String) -> String {
    let (t, rej) = translate_report(p);
    for r in rej {
        writeln!(log, "tensorize: `{}` keeps loops {}: {}", r.store, r.kept.join(", "), r.reason).unwrap();
    }
    match mode {
        EmitMode::Tile => print_tile(&t),
        EmitMode::PseudoPython => print_pseudo_python(&t),
    }
}

/// Tile text of the scheduled program in `text`; schedule log and
/// tensorization notes go to `log`.
pub fn cmd_emit(cfg: &RunConfig) -> Result<(Report, String), CliError> {
    let mut log = String::new();
    let (_, st, failed) = schedule(cfg, &mut log)?;
    let text = tile_text(&st.program, cfg.emit, &mut log);
    let code = if failed { EXIT_IDENTITY } else { EXIT_OK };
    Ok((Report { code, text }, log))
}

/// Writes `00_input.ir`, one `NN_<primitive>.ir` per script line, repair
/// certificates next to the stage that produced them, and the final tile
/// program as `NN_tile.ir`.
pub fn cmd_dump(cfg: &RunConfig) -> Result<Report, CliError> {
    cfg.validate()?;
    let dir = cfg.dump_dir.clone().ok_or_else(|| CliError::Usage("dump needs --dump-dir".into()))?;
    fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
    let write = |name: String, body: &str| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|source| CliError::Io { path, source })
    };
    let cmds = parse_script(&cfg.script()?)?;
    let p = cfg.load()?;
    let mut out = String::new();
    write("00_input.ir".into(), &print_loop_ir(&p))?;
    writeln!(out, "00_input.ir").unwrap();
    let mut st = ScheduleState::new(p);
    let mut code = EXIT_OK;
    let mut stage = 0;
    for c in &cmds {
        stage += 1;
        let name = format!("{stage:02}_{}", c.name());
        let outcome = st.apply(c);
        write(format!("{name}.ir"), &print_loop_ir(&st.program))?;
        match outcome {
            Ok(Outcome::Repaired(cert)) => {
                write(format!("{name}.cert"), &format!("{cert}\n"))?;
                writeln!(out, "{name}.ir  {cert}").unwrap();
            }
            Ok(_) => writeln!(out, "{name}.ir").unwrap(),
            Err(d) => {
                writeln!(out, "{name}.ir  identity-transform, {d}").unwrap();
                code = EXIT_IDENTITY;
                break;
            }
        }
    }
    let mut log = String::new();
    let tile = tile_text(&st.program, EmitMode::Tile, &mut log);
    let name = format!("{:02}_tile.ir", stage + 1);
    write(name.clone(), &tile)?;
    writeln!(out, "{name}").unwrap();
    out.push_str(&log);
    Ok(Report { code, text: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bench(name: &str, schedule: Schedule) -> RunConfig {
        RunConfig { source: Source::Benchmark { name: name.into(), shape: None }, schedule, trials: 3, ..Default::default() }
    }

    #[test]
    fn softmax_builtin_schedule_verifies() {
        let r = cmd_verify(&RunConfig { tol_rel: 1e-12, ..bench("softmax_denom", Schedule::Builtin) }).unwrap();
        assert_eq!(r.code, EXIT_OK, "{}", r.text);
        assert!(r.text.contains("certificate: h(t,r,r') = exp(r - r') * t  [commutes: yes]"), "{}", r.text);
    }

    #[test]
    fn empty_schedule_trivially_passes() {
        let r = cmd_verify(&bench("softmax_denom", Schedule::Empty)).unwrap();
        assert_eq!(r.code, EXIT_OK);
        assert!(r.text.contains("max_abs=0.000e0"), "{}", r.text);
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        assert!(matches!(cmd_verify(&RunConfig { trials: 0, ..Default::default() }), Err(CliError::Usage(_))));
        let ir = RunConfig { source: Source::IrFile("x.ir".into()), schedule: Schedule::Builtin, ..Default::default() };
        assert!(matches!(cmd_verify(&ir), Err(CliError::Usage(_))));
    }
}
