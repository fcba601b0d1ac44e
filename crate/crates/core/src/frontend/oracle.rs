// SPDX-License-Identifier: Apache-2.0
//! Dense reference implementations of the built-in benchmarks, written
//! directly over arrays so they share nothing with the IR interpreter.

use crate::interpreter::{TensorValue, Tensors};

use super::builtins::SOFTCAP;
use super::{AttnVariant, FrontendError};

pub fn softmax_denom(inp: &TensorValue) -> TensorValue {
    let (rows, cols) = (inp.shape[0], inp.shape[1]);
    let data = (0..rows)
        .map(|i| {
            let row = &inp.data[i * cols..(i + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().map(|x| (x - m).exp()).sum()
        })
        .collect();
    TensorValue::new(&[rows], data)
}

/// Masked, modified score for query `i` (at key position `pos`) and key `j`,
/// or `None` when masked out.
fn score(variant: AttnVariant, dot: f64, h: usize, head: usize, heads: usize, pos: usize, j: usize, skv: usize) -> Option<f64> {
    let s = dot / (h as f64).sqrt();
    let visible = match variant {
        AttnVariant::Global => true,
        AttnVariant::Window => j <= pos && pos - j < AttnVariant::window(skv),
        _ => j <= pos,
    };
    visible.then(|| match variant {
        AttnVariant::Alibi => s + 2f64.powf(-8.0 * (head + 1) as f64 / heads as f64) * (j as f64 - pos as f64),
        AttnVariant::Softcap => SOFTCAP * (s / SOFTCAP).tanh(),
        _ => s,
    })
}

/// softmax(mask(score_mod(q k^T))) v, per (batch, head, query).
pub fn attention(variant: AttnVariant, q: &TensorValue, k: &TensorValue, v: &TensorValue) -> TensorValue {
    let [b, n, sq, h] = q.shape[..] else { panic!("q must be rank 4") };
    let skv = k.shape[2];
    let mut out = TensorValue::filled(&[b, n, sq, h], 0.0);
    for bb in 0..b {
        for nn in 0..n {
            for i in 0..sq {
                let pos = i + skv - sq;
                let scores: Vec<Option<f64>> = (0..skv)
                    .map(|j| {
                        let dot: f64 = (0..h).map(|c| q.get(&[bb, nn, i, c]) * k.get(&[bb, nn, j, c])).sum();
                        score(variant, dot, h, nn, n, pos, j, skv)
                    })
                    .collect();
                let m = scores.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - m).exp())).collect();
                let z: f64 = w.iter().sum();
                for c in 0..h {
                    let acc: f64 = (0..skv).map(|j| w[j] * v.get(&[bb, nn, j, c])).sum();
                    out.set(&[bb, nn, i, c], acc / z);
                }
            }
        }
    }
    out
}

/// Reference outputs of builtin `name`, keyed like the lowered program's outputs.
pub fn reference(name: &str, inputs: &Tensors) -> Result<Tensors, FrontendError> {
    let get = |t: &str| inputs.get(t).ok_or_else(|| FrontendError::UnknownTensor(t.into()));
    let variant = match name {
        "softmax_denom" => return Ok(Tensors::from([("xsum".to_string(), softmax_denom(get("inp")?))])),
        "global_attn" => AttnVariant::Global,
        "causal_attn" | "decode_attn" => AttnVariant::Causal,
        "alibi_attn" => AttnVariant::Alibi,
        "softcap_attn" => AttnVariant::Softcap,
        "window_attn" => AttnVariant::Window,
        _ => return Err(FrontendError::UnknownBenchmark(name.into())),
    };
    Ok(Tensors::from([("cast".to_string(), attention(variant, get("q")?, get("k")?, get("v")?))]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::builtin;
    use crate::interpreter::{compare, interpret, random_inputs};

    #[test]
    fn single_key_attention_returns_v() {
        let p = builtin("causal_attn", &[1, 2, 1, 1, 3]).unwrap().lower().unwrap();
        let x = random_inputs(&p, 3, -1.0, 1.0);
        let out = reference("causal_attn", &x).unwrap();
        let got = interpret(&p, &x).unwrap();
        for t in [&out["cast"], &got["cast"]] {
            for (a, b) in t.data.iter().zip(&x["v"].data) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn lowered_builtins_match_the_reference() {
        for (name, dims) in [
            ("softmax_denom", vec![3, 5]),
            ("global_attn", vec![1, 2, 4, 4, 3]),
            ("causal_attn", vec![2, 1, 4, 6, 3]),
            ("alibi_attn", vec![1, 2, 5, 5, 2]),
            ("softcap_attn", vec![1, 2, 4, 4, 3]),
            ("window_attn", vec![1, 1, 8, 8, 2]),
            ("decode_attn", vec![1, 2, 1, 8, 4]),
        ] {
            let p = builtin(name, &dims).unwrap().lower().unwrap();
            for seed in 0..3 {
                let x = random_inputs(&p, seed, -2.0, 2.0);
                let r = compare(&interpret(&p, &x).unwrap(), &reference(name, &x).unwrap(), 1e-10, 0.0).unwrap();
                assert!(r.pass(), "{name}: {r}");
            }
        }
    }
}
