// SPDX-License-Identifier: Apache-2.0
//! Dense reference executor for loop programs. Every schedule is checked
//! against this.
//!
//! Execution is sequential in program order with loops counting upwards.
//! Arithmetic is f64 throughout; inputs may optionally be rounded to f32
//! first so mixed-precision runs differ only in their data.

mod compare;
mod io;
mod plan;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::loop_ir::{validate, IrError, Program, Role};

pub use compare::{compare, CompareReport, TensorError};
pub use io::{read_binary, read_text, write_binary, write_text, IoError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterpError {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("tensor `{0}` is present on one side only")]
    MissingTensor(String),
    #[error("`{tensor}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { tensor: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("`{block}` reads `{tensor}{index:?}` before it is written")]
    UninitializedRead { block: String, tensor: String, index: Vec<usize> },
    #[error("`{block}`: {msg}")]
    DomainError { block: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorValue {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "element count does not match shape");
        TensorValue { shape: shape.to_vec(), data }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        TensorValue::new(shape, vec![v; shape.iter().product()])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|o| f(&plan::unflatten(o, shape))).collect();
        TensorValue::new(shape, data)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        TensorValue::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    fn offset(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |o, (i, n)| {
            assert!(i < n, "index {idx:?} out of shape {:?}", self.shape);
            o * n + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f32_precision(&self) -> Self {
        TensorValue { shape: self.shape.clone(), data: self.data.iter().map(|v| *v as f32 as f64).collect() }
    }

    pub fn nan_count(&self) -> usize {
        self.data.iter().filter(|v| v.is_nan()).count()
    }
}

pub type Tensors = BTreeMap<String, TensorValue>;

/// One store executed in trace mode: the write and the loop counters of the
/// loops around it, outermost first.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub block: String,
    pub tensor: String,
    pub index: Vec<usize>,
    pub iteration: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    /// Round inputs to f32 before execution.
    pub f32_inputs: bool,
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    /// Every declared tensor's final contents.
    pub tensors: Tensors,
    pub trace: Vec<TraceEntry>,
}

impl Execution {
    pub fn outputs(&self, p: &Program) -> Tensors {
        p.outputs().map(|d| (d.name.clone(), self.tensors[&d.name].clone())).collect()
    }

    /// Writes to `tensor[index]` in execution order.
    pub fn history(&self, tensor: &str, index: &[usize]) -> Vec<&TraceEntry> {
        self.trace.iter().filter(|e| e.tensor == tensor && e.index == index).collect()
    }
}

pub fn execute(p: &Program, inputs: &Tensors, opts: Options) -> Result<Execution, InterpError> {
    validate(p)?;
    let plan = plan::compile(p);
    let mut bufs = Vec::new();
    for d in &p.tensors {
        if d.role != Role::Input {
            bufs.push(None);
            continue;
        }
        let v = inputs.get(&d.name).ok_or_else(|| InterpError::MissingInput(d.name.clone()))?;
        if v.shape != d.shape {
            return Err(InterpError::ShapeMismatch { tensor: d.name.clone(), expected: d.shape.clone(), got: v.shape.clone() });
        }
        let v = if opts.f32_inputs { v.to_f32_precision() } else { v.clone() };
        bufs.push(Some(v.data));
    }
    let mut m = plan::Machine::new(&plan, bufs, opts.trace);
    m.run()?;
    let trace = m.trace.take().unwrap_or_default();
    let tensors = plan
        .tensors
        .iter()
        .zip(&plan.shapes)
        .zip(m.data)
        .map(|((n, s), d)| (n.clone(), TensorValue { shape: s.clone(), data: d }))
        .collect();
    Ok(Execution { tensors, trace })
}

/// Output-role tensors after running `p`.
pub fn interpret(p: &Program, inputs: &Tensors) -> Result<Tensors, InterpError> {
    Ok(execute(p, inputs, Options::default())?.outputs(p))
}

/// Seeded uniform data for every input of `p`, in declaration order.
pub fn random_inputs(p: &Program, seed: u64, lo: f64, hi: f64) -> Tensors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.inputs().map(|d| (d.name.clone(), TensorValue::random(&d.shape, lo, hi, &mut rng))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loop_ir::parse_program;

    const FIG2A: &str = "\
tensor inp: f32[2, 4] input
tensor xmax: f32[2]
tensor xexp: f32[2, 4]
tensor xsum: f32[2] output
for i, j in grid(2, 4):
    # s_max:
    xmax[i] = max(xmax[i], inp[i, j])
for i, j in grid(2, 4):
    # s_exp:
    xexp[i, j] = exp(inp[i, j] - xmax[i])
for i, j in grid(2, 4):
    # s_sum:
    xsum[i] += xexp[i, j]
";

    // Naively fused and repaired, with the running maximum cached as a
    // previous/current pair.
    const FIG2C: &str = "\
tensor inp: f32[2, 4] input
tensor xmax_0: f32[2]
tensor xmax_1: f32[2]
tensor xsum: f32[2] output
for i in range(2):
    # init:
    xmax_0[i] = -inf
    for j in range(4):
        # s_max:
        xmax_1[i] = max(xmax_0[i], inp[i, j])
        # s_sum:
        xsum[i] = xsum[i] * exp(xmax_0[i] - xmax_1[i]) + exp(inp[i, j] - xmax_1[i])
        # carry:
        xmax_0[i] = xmax_1[i]
";

    fn softmax_denominators(x: &TensorValue) -> Vec<f64> {
        // Direct two-pass formula.
        (0..x.shape[0])
            .map(|i| {
                let row: Vec<f64> = (0..x.shape[1]).map(|j| x.get(&[i, j])).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter().map(|v| (v - m).exp()).sum()
            })
            .collect()
    }

    #[test]
    fn constant_rows_sum_to_row_length() {
        let p = parse_program(FIG2A).unwrap();
        let inp = TensorValue::new(&[2, 4], vec![3.0, 3.0, 3.0, 3.0, -1.5, -1.5, -1.5, -1.5]);
        let ex = execute(&p, &Tensors::from([("inp".into(), inp)]), Options::default()).unwrap();
        assert_eq!(ex.tensors["xmax"].data, [3.0, -1.5]);
        assert_eq!(ex.tensors["xsum"].data, [4.0, 4.0]);
    }

    #[test]
    fn unfused_and_repaired_agree_with_direct_formula() {
        let a = parse_program(FIG2A).unwrap();
        let c = parse_program(FIG2C).unwrap();
        for seed in 0..20 {
            let x = random_inputs(&a, seed, -4.0, 4.0);
            let want = softmax_denominators(&x["inp"]);
            let ya = interpret(&a, &x).unwrap();
            let yc = interpret(&c, &x).unwrap();
            for i in 0..2 {
                assert!((ya["xsum"].data[i] - want[i]).abs() < 1e-12);
                assert!((yc["xsum"].data[i] - want[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn repaired_partials_differ_but_final_sum_matches() {
        let a = parse_program(FIG2A).unwrap();
        let c = parse_program(FIG2C).unwrap();
        let x = Tensors::from([("inp".into(), TensorValue::new(&[2, 4], vec![1.0, 3.0, 2.0, 5.0, 0.0, 0.0, 0.0, 0.0]))]);
        let opts = Options { trace: true, ..Options::default() };
        let ea = execute(&a, &x, opts).unwrap();
        let ec = execute(&c, &x, opts).unwrap();
        let ha: Vec<f64> = ea.history("xsum", &[0]).iter().map(|e| e.value).collect();
        let hc: Vec<f64> = ec.history("xsum", &[0]).iter().map(|e| e.value).collect();
        assert_eq!(ha.len(), 4);
        assert_eq!(hc.len(), 4);
        // Rising maxima: every partial (j < 3) is taken against a stale maximum.
        for j in 0..3 {
            assert!((ha[j] - hc[j]).abs() > 1e-3, "j = {j}");
        }
        assert!((ha[3] - hc[3]).abs() < 1e-12);
        assert_eq!(ec.history("xsum", &[0])[2].iteration, [0, 2]);
    }

    #[test]
    fn uninitialized_intermediate_is_reported() {
        let src = "tensor a: f32[2] input\ntensor t: f32[2]\ntensor b: f32[2] output\nfor i in range(2):\n    # s0:\n    b[i] = t[i] + a[i]\n    # s1:\n    t[i] = a[i]\n";
        let p = parse_program(src).unwrap();
        let x = random_inputs(&p, 1, 0.0, 1.0);
        assert_eq!(
            interpret(&p, &x),
            Err(InterpError::UninitializedRead { block: "s0".into(), tensor: "t".into(), index: vec![0] })
        );
    }

    #[test]
    fn explicit_init_disables_auto_init() {
        let src = "tensor a: f32[3] input\ntensor s: f32[1] output\n# z:\ns[0] = 10\nfor i in range(3):\n    s[0] += a[i]\n";
        let p = parse_program(src).unwrap();
        let x = Tensors::from([("a".into(), TensorValue::new(&[3], vec![1.0, 2.0, 3.0]))]);
        assert_eq!(interpret(&p, &x).unwrap()["s"].data, [16.0]);
    }

    #[test]
    fn log_of_negative_is_a_domain_error() {
        let src = "tensor a: f32[1] input\ntensor b: f32[1] output\n# s_log:\nb[0] = log(a[0])\n";
        let p = parse_program(src).unwrap();
        let x = Tensors::from([("a".into(), TensorValue::new(&[1], vec![-1.0]))]);
        assert!(matches!(interpret(&p, &x), Err(InterpError::DomainError { block, .. }) if block == "s_log"));
    }

    #[test]
    fn input_validation() {
        let p = parse_program(FIG2A).unwrap();
        assert_eq!(interpret(&p, &Tensors::new()), Err(InterpError::MissingInput("inp".into())));
        let x = Tensors::from([("inp".into(), TensorValue::filled(&[4, 2], 0.0))]);
        assert!(matches!(interpret(&p, &x), Err(InterpError::ShapeMismatch { .. })));
    }

    #[test]
    fn f32_inputs_are_rounded() {
        let src = "tensor a: f32[1] input\ntensor b: f64[1] output\n# cp:\nb[0] = a[0]\n";
        let p = parse_program(src).unwrap();
        let x = Tensors::from([("a".into(), TensorValue::new(&[1], vec![0.1]))]);
        let opts = Options { f32_inputs: true, ..Options::default() };
        assert_eq!(execute(&p, &x, opts).unwrap().tensors["b"].data, [0.1f32 as f64]);
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let p = parse_program(FIG2C).unwrap();
        let x = random_inputs(&p, 7, -3.0, 3.0);
        let a = interpret(&p, &x).unwrap();
        let b = interpret(&p, &x).unwrap();
        assert!(a["xsum"].data.iter().zip(&b["xsum"].data).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}
