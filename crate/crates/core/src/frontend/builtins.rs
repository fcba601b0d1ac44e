// SPDX-License-Identifier: Apache-2.0
//! Built-in benchmark graphs and the schedules that go with them.

use crate::expr::{BinOp, CmpOp, Cond, Reducer, ScalarExpr};
use crate::loop_ir::DType;

use super::{reduce_axis, FrontendError, TensorExprGraph};

/// Rolling update of the softmax denominator under the maximum's loop.
pub const SOFTMAX_SCRIPT: &str = include_str!("../../schedules/softmax_denom.sched");
/// Prefill attention fused into one nest per (batch, head).
pub const PREFILL_SCRIPT: &str = include_str!("../../schedules/attn_prefill.sched");
/// Single-query attention split over key/value blocks.
pub const DECODE_SCRIPT: &str = include_str!("../../schedules/attn_decode.sched");

/// Softcap bound for `softcap_attn`.
pub const SOFTCAP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnVariant {
    Global,
    Causal,
    Alibi,
    Softcap,
    /// Causal with a sliding window of `max(1, S_kv / 4)` keys.
    Window,
}

impl AttnVariant {
    pub fn window(skv: usize) -> usize {
        (skv / 4).max(1)
    }

    pub fn is_causal(self) -> bool {
        self != AttnVariant::Global
    }
}

pub fn builtin_names() -> &'static [&'static str] {
    &["softmax_denom", "global_attn", "causal_attn", "alibi_attn", "softcap_attn", "window_attn", "decode_attn"]
}

/// `dims` is `[rows, cols]` for `softmax_denom` and `[B, N, S_q, S_kv, H]`
/// for the attention benchmarks.
pub fn builtin(name: &str, dims: &[usize]) -> Result<TensorExprGraph, FrontendError> {
    if dims.contains(&0) {
        return Err(FrontendError::InvalidShape(format!("{dims:?} has a zero extent")));
    }
    let variant = match name {
        "softmax_denom" => {
            let &[rows, cols] = dims else {
                return Err(FrontendError::InvalidShape("softmax_denom takes rows,cols".into()));
            };
            return softmax_denom(rows, cols);
        }
        "global_attn" => AttnVariant::Global,
        "causal_attn" | "decode_attn" => AttnVariant::Causal,
        "alibi_attn" => AttnVariant::Alibi,
        "softcap_attn" => AttnVariant::Softcap,
        "window_attn" => AttnVariant::Window,
        _ => return Err(FrontendError::UnknownBenchmark(name.into())),
    };
    let &[b, n, sq, skv, h] = dims else {
        return Err(FrontendError::InvalidShape(format!("{name} takes B,N,S_q,S_kv,H")));
    };
    if name == "decode_attn" && sq != 1 {
        return Err(FrontendError::InvalidShape("decode_attn needs S_q = 1".into()));
    }
    if variant.is_causal() && sq > skv {
        return Err(FrontendError::InvalidShape("causal attention needs S_q <= S_kv".into()));
    }
    attention(variant, b, n, sq, skv, h)
}

fn softmax_denom(rows: usize, cols: usize) -> Result<TensorExprGraph, FrontendError> {
    let mut g = TensorExprGraph::new();
    let inp = g.placeholder("inp", &[rows, cols], DType::F32)?;
    let xmax = g.reduce_as("s_max", "xmax", &[rows], &["i"], Reducer::Max, &[reduce_axis("j", cols)], inp.at_vars(&["i", "j"]))?;
    let xexp = g.compute_as(
        "s_exp",
        "xexp",
        &[rows, cols],
        &["i", "j"],
        ScalarExpr::exp(ScalarExpr::bin(BinOp::Sub, inp.at_vars(&["i", "j"]), xmax.at_vars(&["i"]))),
    )?;
    g.reduce_as("s_sum", "xsum", &[rows], &["i"], Reducer::Add, &[reduce_axis("j", cols)], xexp.at_vars(&["i", "j"]))?;
    Ok(g)
}

fn lit(v: f64) -> ScalarExpr {
    ScalarExpr::lit(v)
}

fn var(v: &str) -> ScalarExpr {
    ScalarExpr::var(v)
}

fn bin(op: BinOp, a: ScalarExpr, b: ScalarExpr) -> ScalarExpr {
    ScalarExpr::bin(op, a, b)
}

fn attention(variant: AttnVariant, b: usize, n: usize, sq: usize, skv: usize, h: usize) -> Result<TensorExprGraph, FrontendError> {
    let mut g = TensorExprGraph::new();
    let q = g.placeholder("q", &[b, n, sq, h], DType::F16)?;
    let k = g.placeholder("k", &[b, n, skv, h], DType::F16)?;
    let v = g.placeholder("v", &[b, n, skv, h], DType::F16)?;
    let p = g.batch_matmul("batch_matmul", "batch_matmul", &q, &k, true, ["b", "n", "i", "j", "k"])?;

    // Query i sits at key position i + offset, so the last query sees every key.
    let offset = skv - sq;
    let pos = if offset == 0 { var("i") } else { bin(BinOp::Add, var("i"), lit(offset as f64)) };
    let scaled = bin(BinOp::Mul, p.at_vars(&["b", "n", "i", "j"]), lit(1.0 / (h as f64).sqrt()));
    let modded = match variant {
        AttnVariant::Alibi => {
            // slope_n = 2^(-8 (n + 1) / N)
            let slope = ScalarExpr::exp(bin(
                BinOp::Mul,
                lit(-8.0 * std::f64::consts::LN_2 / n as f64),
                bin(BinOp::Add, var("n"), lit(1.0)),
            ));
            bin(BinOp::Add, scaled, bin(BinOp::Mul, slope, bin(BinOp::Sub, var("j"), pos.clone())))
        }
        AttnVariant::Softcap => bin(BinOp::Mul, lit(SOFTCAP), ScalarExpr::tanh(bin(BinOp::Div, scaled, lit(SOFTCAP)))),
        _ => scaled,
    };
    let mut clauses = Vec::new();
    if variant.is_causal() {
        clauses.push((CmpOp::Le, var("j"), pos.clone()));
    }
    if variant == AttnVariant::Window {
        let w = AttnVariant::window(skv) as f64;
        clauses.push((CmpOp::Gt, var("j"), bin(BinOp::Sub, pos, lit(w))));
    }
    let score_body = if clauses.is_empty() { modded } else { ScalarExpr::select(Cond { clauses }, modded, lit(f64::NEG_INFINITY)) };
    let bnij = ["b", "n", "i", "j"];
    let score = g.compute("score_mod", &[b, n, sq, skv], &bnij, score_body)?;
    let m = g.reduce("softmax_maxelem", &[b, n, sq], &["b", "n", "i"], Reducer::Max, &[reduce_axis("j", skv)], score.at_vars(&bnij))?;
    let e = g.compute(
        "softmax_exp",
        &[b, n, sq, skv],
        &bnij,
        ScalarExpr::exp(bin(BinOp::Sub, score.at_vars(&bnij), m.at_vars(&["b", "n", "i"]))),
    )?;
    let s = g.reduce("softmax_expsum", &[b, n, sq], &["b", "n", "i"], Reducer::Add, &[reduce_axis("j", skv)], e.at_vars(&bnij))?;
    let sv = g.batch_matmul("T_batch_matmul_NN", "batch_matmul_NN", &e, &v, false, ["b", "n", "i", "h", "j"])?;
    let bnih = ["b", "n", "i", "h"];
    let norm = g.compute(
        "softmax_norm",
        &[b, n, sq, h],
        &bnih,
        bin(BinOp::Div, sv.at_vars(&bnih), s.at_vars(&["b", "n", "i"])),
    )?;
    // The final precision cast is an identity copy at a single compute precision.
    g.compute("cast", &[b, n, sq, h], &bnih, norm.at_vars(&bnih))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loop_ir::parse_program;
    use crate::scheduler::fixtures::SOFTMAX;

    #[test]
    fn softmax_denom_lowers_to_the_fixture() {
        assert_eq!(builtin("softmax_denom", &[2, 4]).unwrap().lower().unwrap(), parse_program(SOFTMAX).unwrap());
    }

    #[test]
    fn attention_nest_names() {
        let p = builtin("causal_attn", &[1, 2, 8, 8, 4]).unwrap().lower().unwrap();
        assert_eq!(
            p.block_names(),
            [
                "batch_matmul",
                "T_score_mod",
                "T_softmax_maxelem",
                "T_softmax_exp",
                "T_softmax_expsum",
                "T_batch_matmul_NN",
                "T_softmax_norm",
                "T_cast"
            ]
        );
        assert_eq!(p.outputs().map(|d| d.name.as_str()).collect::<Vec<_>>(), ["cast"]);
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(builtin("flash", &[1]), Err(FrontendError::UnknownBenchmark(_))));
        assert!(matches!(builtin("global_attn", &[1, 2, 3]), Err(FrontendError::InvalidShape(_))));
        assert!(matches!(builtin("decode_attn", &[1, 2, 4, 8, 4]), Err(FrontendError::InvalidShape(_))));
        assert!(matches!(builtin("causal_attn", &[1, 2, 8, 4, 4]), Err(FrontendError::InvalidShape(_))));
        assert!(matches!(builtin("softmax_denom", &[0, 4]), Err(FrontendError::InvalidShape(_))));
    }
}
