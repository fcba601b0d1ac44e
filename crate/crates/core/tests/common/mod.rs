// SPDX-License-Identifier: Apache-2.0
//! Checks shared by the property tests and the acceptance run.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reduxion::expr::{eval_scalar, parse_expr, Reducer};
use reduxion::interpreter::{compare, interpret, random_inputs};
use reduxion::loop_ir::{parse_program, print_loop_ir, Program};
use reduxion::repair_solver::{derive, primed, RepairCertificate};
use reduxion::scheduler::{parse_script, ScheduleState};

pub const REL: f64 = 1e-10;

/// A reduction `X_t = X_t f g(r.., c..)` whose repair is expected to be
/// usable, and the reducers of its predecessors in `r_args` order.
pub struct RepairCase {
    pub f: Reducer,
    pub g: &'static str,
    pub preds: &'static [Reducer],
}

pub const CASES: &[RepairCase] = &[
    RepairCase { f: Reducer::Add, g: "exp(c - x)", preds: &[Reducer::Max] },
    RepairCase { f: Reducer::Add, g: "exp(c1 - x) * c2", preds: &[Reducer::Max] },
    RepairCase { f: Reducer::Add, g: "c / exp(x)", preds: &[Reducer::Max] },
    RepairCase { f: Reducer::Add, g: "exp(c - a) * exp(-b)", preds: &[Reducer::Max, Reducer::Add] },
    RepairCase { f: Reducer::Max, g: "c - x", preds: &[Reducer::Add] },
    RepairCase { f: Reducer::Max, g: "c", preds: &[] },
];

pub fn certificate(case: &RepairCase) -> RepairCertificate {
    let cert = derive(case.f, &parse_expr(case.g).unwrap()).unwrap();
    assert!(cert.commutes, "{}: {cert}", case.g);
    assert_eq!(cert.r_args.len(), case.preds.len(), "{}", case.g);
    cert
}

/// Constant arguments of a certificate's `g`.
pub fn c_args(cert: &RepairCertificate) -> Vec<String> {
    let mut v: Vec<String> = cert.g.free_vars().into_iter().filter(|x| !cert.r_args.contains(x)).collect();
    v.sort();
    v.dedup();
    v
}

/// One randomized reduce domain: per-iteration constants and predecessor
/// data, each of length `n`.
#[derive(Debug, Clone)]
pub struct Domain {
    pub c: BTreeMap<String, Vec<f64>>,
    pub pred_data: Vec<Vec<f64>>,
}

impl Domain {
    pub fn random(cert: &RepairCertificate, n: usize, rng: &mut impl Rng) -> Domain {
        let vals = |rng: &mut dyn rand::RngCore| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let c = c_args(cert).into_iter().map(|k| (k, vals(rng))).collect();
        let pred_data = cert.r_args.iter().map(|_| vals(rng)).collect();
        Domain { c, pred_data }
    }

    pub fn len(&self) -> usize {
        self.c.values().chain(&self.pred_data).map(Vec::len).next().unwrap_or(0)
    }

    /// `X_r<j>` for every predecessor: the running reduction of its data.
    pub fn pred_at(&self, preds: &[Reducer], j: usize) -> Vec<f64> {
        preds.iter().zip(&self.pred_data).map(|(f, d)| d[..=j].iter().fold(f.identity(), |a, &x| f.apply(a, x))).collect()
    }

    fn g(&self, cert: &RepairCertificate, r: &[f64], jp: usize) -> f64 {
        let mut env: BTreeMap<String, f64> = cert.r_args.iter().cloned().zip(r.iter().copied()).collect();
        for (k, v) in &self.c {
            env.insert(k.clone(), v[jp]);
        }
        eval_scalar(&cert.g, &env).unwrap()
    }

    /// `R(f, 0 <= j' <= j, g(r, C<j'>))` and the largest `|g|` it combines.
    pub fn explicit(&self, cert: &RepairCertificate, r: &[f64], j: usize) -> (f64, f64) {
        let mut acc = cert.f.identity();
        let mut scale: f64 = 0.0;
        for jp in 0..=j {
            let v = self.g(cert, r, jp);
            scale = scale.max(v.abs());
            acc = cert.f.apply(acc, v);
        }
        (acc, scale)
    }
}

pub fn h(cert: &RepairCertificate, t: f64, prev: &[f64], cur: &[f64]) -> f64 {
    let mut env = BTreeMap::from([("t".to_string(), t)]);
    for (k, r) in cert.r_args.iter().enumerate() {
        env.insert(r.clone(), prev[k]);
        env.insert(primed(r), cur[k]);
    }
    eval_scalar(&cert.h, &env).unwrap()
}

pub fn close(got: f64, want: f64, scale: f64) -> bool {
    got == want || (got - want).abs() <= REL * want.abs().max(scale)
}

/// `h` moves a partial result at every prefix from `X_r<j>` to `X_r<j+1>`.
pub fn tag_update_holds(cert: &RepairCertificate, case: &RepairCase, d: &Domain) -> Result<(), String> {
    for j in 0..d.len().saturating_sub(1) {
        let (r, r1) = (d.pred_at(case.preds, j), d.pred_at(case.preds, j + 1));
        let (t, _) = d.explicit(cert, &r, j);
        let (want, scale) = d.explicit(cert, &r1, j);
        let got = h(cert, t, &r, &r1);
        if !close(got, want, scale) {
            return Err(format!("{}: j={j}: h gives {got}, expected {want}", case.g));
        }
    }
    Ok(())
}

/// `g(r, g_c^-1(r, g(r, c))) = g(r, c)` at one random point.
pub fn round_trip_holds(cert: &RepairCertificate, rng: &mut impl Rng) -> Result<(), String> {
    let mut env: BTreeMap<String, f64> = BTreeMap::new();
    for v in cert.r_args.iter().chain(&c_args(cert)) {
        env.insert(v.clone(), rng.gen_range(-2.0..2.0));
    }
    let y = eval_scalar(&cert.g, &env).unwrap();
    let mut inv_env = env.clone();
    inv_env.insert("t".into(), y);
    let c = eval_scalar(&cert.g_inv, &inv_env).unwrap();
    let mut back = env.clone();
    back.insert(cert.c_arg.clone(), c);
    let got = eval_scalar(&cert.g, &back).unwrap();
    if close(got, y, 0.0) {
        Ok(())
    } else {
        Err(format!("{}: g(x, g_inv(x, y)) = {got}, y = {y} at {env:?}", cert.g))
    }
}

/// The repaired recurrence, started from the reducers' identities, equals
/// the explicit form after every iteration.
pub fn recurrent_matches_explicit(cert: &RepairCertificate, case: &RepairCase, d: &Domain) -> Result<(), String> {
    let mut x = cert.f.identity();
    let mut prev: Vec<f64> = case.preds.iter().map(|f| f.identity()).collect();
    for j in 0..d.len() {
        let cur = d.pred_at(case.preds, j);
        x = cert.f.apply(h(cert, x, &prev, &cur), d.g(cert, &cur, j));
        let (want, scale) = d.explicit(cert, &cur, j);
        if !close(x, want, scale) {
            return Err(format!("{}: j={j}: recurrent {x}, explicit {want}", case.g));
        }
        prev = cur;
    }
    Ok(())
}

/// A small softmax-shaped program: a reduction over `inp`, an elementwise
/// map of it, and a second reduction, with randomly picked operators.
pub fn fuzz_program(rng: &mut impl Rng) -> (Program, usize) {
    let rows = rng.gen_range(1..=3);
    let cols = *[1usize, 2, 3, 4, 6, 8].choose(rng).unwrap();
    let first = *["xmax[i] = max(xmax[i], inp[i, j])", "xmax[i] = min(xmax[i], inp[i, j])", "xmax[i] += inp[i, j]"]
        .choose(rng)
        .unwrap();
    let map = *[
        "exp(inp[i, j] - xmax[i])",
        "exp(inp[i, j] - xmax[i]) * w[i, j]",
        "inp[i, j] - xmax[i]",
        "inp[i, j] * xmax[i]",
        "inp[i, j] + xmax[i]",
        "max(inp[i, j], xmax[i])",
        "w[i, j] / exp(xmax[i])",
    ]
    .choose(rng)
    .unwrap();
    let second = *["xsum[i] += xexp[i, j]", "xsum[i] = max(xsum[i], xexp[i, j])"].choose(rng).unwrap();
    let src = format!(
        "tensor inp: f32[{rows}, {cols}] input\ntensor w: f32[{rows}, {cols}] input\ntensor xmax: f32[{rows}]\n\
         tensor xexp: f32[{rows}, {cols}]\ntensor xsum: f32[{rows}] output\n\
         for i, j in grid({rows}, {cols}):\n    # s_max:\n    {first}\n\
         for i, j in grid({rows}, {cols}):\n    # s_exp:\n    xexp[i, j] = {map}\n\
         for i, j in grid({rows}, {cols}):\n    # s_sum:\n    {second}\n"
    );
    (parse_program(&src).unwrap(), cols)
}

/// A few schedule steps for [`fuzz_program`], some of which will not
/// apply. Naive fusion ignores temporal dependences on purpose, so it only
/// appears followed by the rolling update that repairs it; each step is
/// checked as a whole.
pub fn fuzz_script(cols: usize, rng: &mut impl Rng) -> Vec<String> {
    // Sizes that do not divide `cols` exercise the rejection path.
    let ks: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=4).min(cols + 1)).collect();
    let pool = [
        "inline s_exp s_sum".to_string(),
        "fuse s_sum s_max.j\nrolling_update s_sum s_max.j".into(),
        "rolling_update s_sum s_max.j".into(),
        format!("tile s_max j {}", ks[0]),
        format!("tile s_sum j {}", ks[1]),
        "split_k_update s_sum s_max.j0".into(),
        "split_k_update s_sum s_max.j".into(),
        format!("privatize_reduce s_max j {}", ks[2]),
        format!("privatize_reduce s_sum j {}", ks[2]),
        "rolling_update s_sum_global s_max_global.j0".into(),
        "decompose_reduction s_sum j".into(),
        "reverse_compute_at s_exp s_max.j".into(),
        "compute_at s_max s_exp.i".into(),
    ];
    let n = rng.gen_range(1..=4);
    (0..n).map(|_| pool.choose(rng).unwrap().clone()).collect()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzTally {
    pub applied: usize,
    pub identity: usize,
}

/// Applies each step of `steps`. A failed command must leave the program
/// byte-identical; a step whose commands all applied must still compute
/// the same outputs as the original. A step that applied only partly
/// ends the run, since its intermediate program is not meant to be sound.
pub fn check_schedule(p: &Program, steps: &[String], seed: u64, tally: &mut FuzzTally) -> Result<(), String> {
    let mut st = ScheduleState::new(p.clone());
    let inputs: Vec<_> = (0..2).map(|k| random_inputs(p, seed.wrapping_mul(2).wrapping_add(k), -2.0, 2.0)).collect();
    let want: Vec<_> = inputs.iter().map(|x| interpret(p, x).unwrap()).collect();
    for step in steps {
        let cmds = parse_script(step).map_err(|e| e.to_string())?;
        let mut applied = 0;
        for cmd in &cmds {
            let before = print_loop_ir(&st.program);
            if let Err(d) = st.apply(cmd) {
                if print_loop_ir(&st.program) != before {
                    return Err(format!("`{cmd}` failed ({d}) but changed the program"));
                }
                break;
            }
            applied += 1;
        }
        if applied == 0 {
            tally.identity += 1;
            continue;
        }
        if applied < cmds.len() {
            return Ok(());
        }
        tally.applied += 1;
        for (x, w) in inputs.iter().zip(&want) {
            let got = interpret(&st.program, x).map_err(|e| format!("after `{step}`: {e}"))?;
            let r = compare(&got, w, REL, 0.0).map_err(|e| e.to_string())?;
            if !r.pass() {
                return Err(format!("after `{step}`:\n{r}{}", print_loop_ir(&st.program)));
            }
        }
    }
    Ok(())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
