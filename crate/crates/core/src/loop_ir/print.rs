// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write;

use super::{is_add_sugar, Loop, Program, Stmt, TensorDecl};

pub(crate) const INDENT: &str = "    ";

pub(crate) fn decl_line(t: &TensorDecl) -> String {
    let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
    let mut s = format!("tensor {}: {}[{}] {}", t.name, t.dtype.name(), dims.join(", "), t.role.name());
    if let Some(sc) = &t.scope {
        write!(s, " @{sc}").unwrap();
    }
    s
}

/// Loops printed on one header: a chain of unannotated loops, each the only
/// statement of its parent.
fn grid_chain<'a>(l: &'a Loop, inner_loop: impl Fn(&'a Loop) -> Option<&'a Loop>) -> Vec<&'a Loop> {
    let mut chain = vec![l];
    let mut cur = l;
    while let Some(next) = inner_loop(cur) {
        if cur.annotation.is_some() || next.annotation.is_some() {
            break;
        }
        chain.push(next);
        cur = next;
    }
    chain
}

pub(crate) fn loop_header(chain: &[(&str, usize)], annotation: Option<&str>) -> String {
    let prefix = annotation.map(|a| format!("{a} ")).unwrap_or_default();
    if chain.len() == 1 {
        format!("{prefix}for {} in range({}):", chain[0].0, chain[0].1)
    } else {
        let vars: Vec<&str> = chain.iter().map(|c| c.0).collect();
        let ext: Vec<String> = chain.iter().map(|c| c.1.to_string()).collect();
        format!("{prefix}for {} in grid({}):", vars.join(", "), ext.join(", "))
    }
}

fn single_loop(l: &Loop) -> Option<&Loop> {
    match l.body.as_slice() {
        [Stmt::Loop(inner)] => Some(inner),
        _ => None,
    }
}

fn stmts(out: &mut String, body: &[Stmt], depth: usize) {
    let pad = INDENT.repeat(depth);
    for s in body {
        match s {
            Stmt::Loop(l) => {
                let chain = grid_chain(l, single_loop);
                let hdr: Vec<(&str, usize)> = chain.iter().map(|c| (c.var.as_str(), c.extent)).collect();
                writeln!(out, "{pad}{}", loop_header(&hdr, l.annotation.as_deref())).unwrap();
                stmts(out, &chain.last().unwrap().body, depth + 1);
            }
            Stmt::Store(st) => {
                writeln!(out, "{pad}# {}:", st.name).unwrap();
                let idx: Vec<String> = st.indices.iter().map(|i| i.to_string()).collect();
                match is_add_sugar(st) {
                    Some(rhs) => writeln!(out, "{pad}{}[{}] += {rhs}", st.tensor, idx.join(", ")).unwrap(),
                    None => writeln!(out, "{pad}{}[{}] = {}", st.tensor, idx.join(", "), st.value).unwrap(),
                }
            }
        }
    }
}

pub fn print_loop_ir(p: &Program) -> String {
    let mut out = String::new();
    for t in &p.tensors {
        writeln!(out, "{}", decl_line(t)).unwrap();
    }
    if !p.body.is_empty() {
        out.push('\n');
        stmts(&mut out, &p.body, 0);
    }
    out
}

#[cfg(test)]
mod tests {
    use crate::loop_ir::parse_program;

    use super::*;

    #[test]
    fn empty_program_prints_declarations_only() {
        let p = parse_program("tensor a: f32[3] input\n").unwrap();
        assert_eq!(print_loop_ir(&p), "tensor a: f32[3] input\n");
    }

    #[test]
    fn grid_sugar_and_accumulate_sugar() {
        let src = "\
tensor inp: f32[2, 4] input
tensor xsum: f32[2] output

for i, j in grid(2, 4):
    # s_sum:
    xsum[i] += exp(inp[i, j])
";
        let p = parse_program(src).unwrap();
        assert_eq!(print_loop_ir(&p), src);
    }

    #[test]
    fn sequenced_bodies_use_range() {
        let src = "\
tensor inp: f32[2, 4] input
tensor xmax_0: f32[2] intermediate
tensor xmax_1: f32[2] output

for i in range(2):
    # init:
    xmax_0[i] = -inf
    for j in range(4):
        # s_max:
        xmax_1[i] = max(xmax_0[i], inp[i, j])
        # carry:
        xmax_0[i] = xmax_1[i]
";
        let p = parse_program(src).unwrap();
        assert_eq!(print_loop_ir(&p), src);
    }
}
