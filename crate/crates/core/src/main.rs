// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use reduxion::cli::{cmd_dump, cmd_emit, cmd_verify, EmitMode, RunConfig, Schedule, Source, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "reduxion", version, about = "Schedule, verify and tensorize loop-nest programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compare the scheduled program with the original on random inputs.
    Verify(Opts),
    /// Print the scheduled program as tile IR.
    Emit(Opts),
    /// Write the loop IR after every schedule line, then the tile IR.
    Dump(Opts),
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Tile,
    TilePseudoPython,
}

#[derive(Args)]
struct Opts {
    /// Builtin benchmark (softmax_denom, global_attn, causal_attn, alibi_attn,
    /// softcap_attn, window_attn, decode_attn).
    #[arg(long, conflicts_with = "ir", required_unless_present = "ir")]
    benchmark: Option<String>,
    /// Benchmark dimensions: rows,cols or B,N,Sq,Skv,H.
    #[arg(long, value_delimiter = ',', requires = "benchmark")]
    shape: Option<Vec<usize>>,
    /// Loop IR file to load instead of a benchmark.
    #[arg(long)]
    ir: Option<PathBuf>,
    /// Schedule script; `builtin` uses the benchmark's own script.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    tol_rel: f64,
    #[arg(long, default_value_t = 0.0)]
    tol_abs: f64,
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tile")]
    emit: Emit,
    /// Round inputs of the scheduled program to f32.
    #[arg(long)]
    f32: bool,
}

impl Opts {
    fn config(self) -> RunConfig {
        let source = match (self.benchmark, self.ir) {
            (Some(name), _) => Source::Benchmark { name, shape: self.shape },
            (None, Some(path)) => Source::IrFile(path),
            (None, None) => unreachable!("clap requires one of them"),
        };
        let schedule = match self.schedule.as_deref() {
            None => Schedule::Empty,
            Some("builtin") => Schedule::Builtin,
            Some(path) => Schedule::File(path.into()),
        };
        RunConfig {
            source,
            schedule,
            seed: self.seed,
            trials: self.trials,
            tol_rel: self.tol_rel,
            tol_abs: self.tol_abs,
            dump_dir: self.dump_dir,
            emit: match self.emit {
                Emit::Tile => EmitMode::Tile,
                Emit::TilePseudoPython => EmitMode::PseudoPython,
            },
            f32_inputs: self.f32,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_USAGE as u8 } else { 0 });
        }
    };
    let result = match cli.cmd {
        Cmd::Verify(o) => cmd_verify(&o.config()).map(|r| {
            print!("{}", r.text);
            r.code
        }),
        Cmd::Emit(o) => cmd_emit(&o.config()).map(|(r, log)| {
            eprint!("{log}");
            print!("{}", r.text);
            r.code
        }),
        Cmd::Dump(o) => cmd_dump(&o.config()).map(|r| {
            print!("{}", r.text);
            r.code
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE as u8)
        }
    }
}
