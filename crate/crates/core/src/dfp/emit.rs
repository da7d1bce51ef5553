//! Per-flavor source text for a [`KernelIR`].

use serde::{Deserialize, Serialize};

use super::ir::*;
use super::FlavorId;

/// Generated kernel source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceText {
    pub flavor: FlavorId,
    pub text: String,
    /// Function to call to run the whole kernel.
    pub entry: String,
}

impl SourceText {
    /// Conventional file extension for the flavor's dialect.
    pub fn extension(&self) -> &'static str {
        match self.flavor {
            FlavorId::Scalar | FlavorId::LongVector { .. } => "c",
            FlavorId::ShortVector { .. } => "ispc",
            FlavorId::WarpGroup { .. } => "cu",
        }
    }
}

struct Emitter {
    flavor: FlavorId,
    out: String,
}

fn fmt_const(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-INFINITY".into()
    } else if v == f64::INFINITY {
        "INFINITY".into()
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}f")
    }
}

impl Emitter {
    fn shortvec(&self) -> bool {
        matches!(self.flavor, FlavorId::ShortVector { .. })
    }

    fn max_fn(&self) -> &'static str {
        if self.shortvec() {
            "max"
        } else {
            "fmaxf"
        }
    }

    fn exp_fn(&self) -> &'static str {
        match self.flavor {
            FlavorId::ShortVector { .. } => "sol_ispc_exp",
            FlavorId::WarpGroup { .. } => "__expf",
            _ => "expf",
        }
    }

    fn int(&self) -> &'static str {
        if self.shortvec() {
            "uniform int"
        } else {
            "int"
        }
    }

    fn line(&mut self, depth: usize, s: &str) {
        for _ in 0..depth {
            self.out.push('\t');
        }
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn value(&self, v: &Value) -> String {
        match v {
            Value::Const(c) => fmt_const(*c),
            Value::Acc(a) => a.clone(),
            Value::Load { buf, index } => format!("{buf}[{index}]"),
        }
    }

    fn map_rhs(&self, acc: &str, f: &MapFn) -> String {
        match f {
            MapFn::Relu => format!("{}({acc}, 0)", self.max_fn()),
            MapFn::Exp => format!("{}({acc})", self.exp_fn()),
            MapFn::Add(v) => format!("{acc} + {}", self.value(v)),
            MapFn::Sub(v) => format!("{acc} - {}", self.value(v)),
            MapFn::Mul(v) => format!("{acc} * {}", self.value(v)),
            MapFn::Div(v) => format!("{acc} / {}", self.value(v)),
            MapFn::MulRsqrt { value, eps } => {
                let arg = format!("{} + {}", self.value(value), fmt_const(*eps));
                match self.flavor {
                    FlavorId::ShortVector { .. } => format!("{acc} * rsqrt({arg})"),
                    FlavorId::WarpGroup { .. } => format!("{acc} * rsqrtf({arg})"),
                    _ => format!("{acc} / sqrtf({arg})"),
                }
            }
        }
    }

    fn derived(&mut self, depth: usize, l: &Loop, int: &str) {
        let used: Vec<String> = l
            .derived
            .iter()
            .filter(|d| l.body.iter().any(|s| s.mentions(&d.name)))
            .map(|d| {
                let q = if d.div > 1 {
                    format!("{} / {}", d.var, d.div)
                } else {
                    d.var.clone()
                };
                let e = match d.modulo {
                    Some(m) if d.div > 1 => format!("({q}) % {m}"),
                    Some(m) => format!("{q} % {m}"),
                    None => q,
                };
                format!("{} = {e}", d.name)
            })
            .collect();
        if !used.is_empty() {
            self.line(depth, &format!("{int} {};", used.join(", ")));
        }
    }

    fn for_header(&self, l: &Loop, int: &str) -> String {
        format!(
            "for({int} {v} = {s}; {v} < {e}; {v}++) {{",
            v = l.var,
            s = l.start,
            e = l.start + l.extent as i64
        )
    }

    fn stmts(&mut self, depth: usize, body: &[Stmt]) {
        let mut i = 0;
        while i < body.len() {
            if let (
                Stmt::Map { acc, f },
                Some(Stmt::Store {
                    buf,
                    index,
                    acc: stored,
                }),
            ) = (&body[i], body.get(i + 1))
            {
                if acc == stored {
                    let rhs = self.map_rhs(acc, f);
                    self.line(depth, &format!("{buf}[{index}] = {rhs};"));
                    i += 2;
                    continue;
                }
            }
            self.stmt(depth, &body[i]);
            i += 1;
        }
    }

    fn stmt(&mut self, depth: usize, s: &Stmt) {
        match s {
            Stmt::Loop(l) => self.looped(depth, l),
            Stmt::Let { acc, value } => {
                let v = self.value(value);
                self.line(depth, &format!("float {acc} = {v};"));
            }
            Stmt::Accumulate {
                acc,
                op,
                value,
                weight,
            } => {
                let mut v = self.value(value);
                if let Some(w) = weight {
                    v = format!("{} * {v}", self.value(w));
                }
                let text = match op {
                    Reduce::Add => format!("{acc} += {v};"),
                    Reduce::Max => format!("{acc} = {}({acc}, {v});", self.max_fn()),
                };
                self.line(depth, &text);
            }
            Stmt::Map { acc, f } => {
                let rhs = self.map_rhs(acc, f);
                self.line(depth, &format!("{acc} = {rhs};"));
            }
            Stmt::Store { buf, index, acc } => {
                self.line(depth, &format!("{buf}[{index}] = {acc};"));
            }
            Stmt::If { guards, body } => {
                let cond: Vec<String> = guards
                    .iter()
                    .map(|g| {
                        if g.lo == 0 {
                            format!("{e} >= 0 && {e} < {}", g.hi, e = g.expr)
                        } else {
                            format!("{e} >= {} && {e} < {}", g.lo, g.hi, e = g.expr)
                        }
                    })
                    .collect();
                self.line(depth, &format!("if({}) {{", cond.join(" && ")));
                self.stmts(depth + 1, body);
                self.line(depth, "}");
            }
        }
    }

    fn close(&mut self, depth: usize, l: &Loop) {
        self.derived(depth + 1, l, self.int());
        self.stmts(depth + 1, &l.body);
        self.line(depth, "}");
    }

    fn looped(&mut self, depth: usize, l: &Loop) {
        match (self.flavor, l.annotation) {
            (FlavorId::ShortVector { .. }, Annotation::ParallelTask) => {
                self.line(depth, &format!("uniform int {} = taskIndex;", l.var));
                self.derived(depth, l, "uniform int");
                self.stmts(depth, &l.body);
            }
            (FlavorId::ShortVector { .. }, Annotation::Vector) => {
                let mut chain = vec![l];
                let mut cur = l;
                while let [Stmt::Loop(inner)] = cur.body.as_slice() {
                    if inner.annotation != Annotation::Vector || !cur.derived.is_empty() {
                        break;
                    }
                    chain.push(inner);
                    cur = inner;
                }
                let ranges: Vec<String> = chain
                    .iter()
                    .map(|c| format!("{} = {} ... {}", c.var, c.start, c.start + c.extent as i64))
                    .collect();
                self.line(depth, &format!("foreach({}) {{", ranges.join(", ")));
                self.derived(depth + 1, cur, "int");
                self.stmts(depth + 1, &cur.body);
                self.line(depth, "}");
            }
            (FlavorId::LongVector { .. }, Annotation::ParallelTask) => {
                let mut n = 1;
                let mut cur = l;
                while let [Stmt::Loop(inner)] = cur.body.as_slice() {
                    if inner.annotation != Annotation::ParallelTask || !cur.derived.is_empty() {
                        break;
                    }
                    n += 1;
                    cur = inner;
                }
                if n > 1 {
                    self.line(depth, &format!("#pragma omp parallel for collapse({n})"));
                } else {
                    self.line(depth, "#pragma omp parallel for");
                }
                self.parallel_chain(depth, l, n);
            }
            (FlavorId::LongVector { .. }, Annotation::VectorIvdep) => {
                self.line(depth, "#pragma _NEC ivdep");
                let h = self.for_header(l, "int");
                self.line(depth, &h);
                self.close(depth, l);
            }
            (
                FlavorId::WarpGroup {
                    block_threads,
                    warp,
                    simd_groups,
                },
                Annotation::Block,
            ) => {
                if simd_groups {
                    let groups = (block_threads / warp).max(1);
                    self.line(
                        depth,
                        &format!("int {} = blockIdx.x * {groups} + threadIdx.x / {warp};", l.var),
                    );
                    self.line(depth, &format!("if({} >= {}) return;", l.var, l.extent));
                } else {
                    self.line(depth, &format!("int {} = blockIdx.x;", l.var));
                }
                self.derived(depth, l, "int");
                self.stmts(depth, &l.body);
            }
            (FlavorId::WarpGroup { warp, simd_groups, .. }, Annotation::ThreadStride) => {
                let (first, step) = if simd_groups {
                    (format!("threadIdx.x % {warp}"), warp.to_string())
                } else {
                    ("threadIdx.x".to_string(), "blockDim.x".to_string())
                };
                self.line(
                    depth,
                    &format!(
                        "for(int {v} = {first}; {v} < {e}; {v} += {step}) {{",
                        v = l.var,
                        e = l.extent
                    ),
                );
                self.close(depth, l);
            }
            _ => {
                let h = self.for_header(l, self.int());
                self.line(depth, &h);
                self.close(depth, l);
            }
        }
    }

    /// `n` perfectly nested parallel loops under one collapse pragma.
    fn parallel_chain(&mut self, depth: usize, l: &Loop, n: usize) {
        let h = self.for_header(l, "int");
        self.line(depth, &h);
        if n > 1 {
            let Stmt::Loop(inner) = &l.body[0] else {
                unreachable!("chain checked by caller")
            };
            self.parallel_chain(depth + 1, inner, n - 1);
        } else {
            self.derived(depth + 1, l, "int");
            self.stmts(depth + 1, &l.body);
        }
        self.line(depth, "}");
    }

    fn params(&self, k: &KernelIR) -> String {
        k.buffers
            .iter()
            .map(|b| {
                let ro = matches!(b.role, BufRole::Input | BufRole::Param);
                match (self.shortvec(), ro) {
                    (true, true) => format!("const uniform float* uniform {}", b.name),
                    (true, false) => format!("uniform float* uniform {}", b.name),
                    (false, true) => format!("const float* {}", b.name),
                    (false, false) => format!("float* {}", b.name),
                }
            })
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn function(&mut self, name: &str, params: &str, nest: &Stmt, entry: bool) {
        let prefix = match self.flavor {
            FlavorId::ShortVector { .. } => {
                if has(nest, Annotation::ParallelTask) {
                    "task void"
                } else if entry {
                    "export void"
                } else {
                    "static void"
                }
            }
            FlavorId::WarpGroup { .. } => "__global__ void",
            _ => "void",
        };
        self.line(0, &format!("{prefix} {name}({params}) {{"));
        self.stmts(1, std::slice::from_ref(nest));
        self.line(0, "}");
    }

    /// Host-side wrapper running nests in order.
    fn launcher(&mut self, k: &KernelIR, params: &str, nests: &[(String, &Stmt)]) {
        let args: Vec<&str> = k.buffers.iter().map(|b| b.name.as_str()).collect();
        let args = args.join(", ");
        let prefix = if self.shortvec() { "export void" } else { "void" };
        self.line(0, &format!("{prefix} {}({params}) {{", k.name));
        for (name, nest) in nests {
            let call = match self.flavor {
                FlavorId::ShortVector { .. } if has(nest, Annotation::ParallelTask) => {
                    format!("launch[{}] {name}({args});", extent_of(nest, Annotation::ParallelTask))
                }
                FlavorId::WarpGroup {
                    block_threads,
                    warp,
                    simd_groups,
                } => {
                    let blocks = extent_of(nest, Annotation::Block);
                    let grid = if simd_groups {
                        blocks.div_ceil((block_threads / warp).max(1))
                    } else {
                        blocks
                    };
                    format!("{name}<<<{grid}, {block_threads}>>>({args});")
                }
                _ => format!("{name}({args});"),
            };
            self.line(1, &call);
            if self.shortvec() && has(nest, Annotation::ParallelTask) {
                self.line(1, "sync;");
            }
        }
        self.line(0, "}");
    }
}

fn has(s: &Stmt, a: Annotation) -> bool {
    match s {
        Stmt::Loop(l) => l.annotation == a || l.body.iter().any(|s| has(s, a)),
        Stmt::If { body, .. } => body.iter().any(|s| has(s, a)),
        _ => false,
    }
}

fn extent_of(s: &Stmt, a: Annotation) -> usize {
    match s {
        Stmt::Loop(l) if l.annotation == a => l.extent,
        Stmt::Loop(l) => l.body.iter().map(|s| extent_of(s, a)).max().unwrap_or(1),
        _ => 1,
    }
}

/// Renders `k` in the dialect of `flavor`. Kernels with several nests get one
/// function per nest plus a wrapper named after the kernel.
pub fn emit_source(k: &KernelIR, flavor: FlavorId) -> SourceText {
    let mut e = Emitter {
        flavor,
        out: String::new(),
    };
    let params = e.params(k);
    let nests: Vec<&Stmt> = k.body.iter().collect();
    if nests.len() == 1 {
        e.function(&k.name, &params, nests[0], true);
    } else {
        let named: Vec<(String, &Stmt)> = nests
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("{}_{i}", k.name), *s))
            .collect();
        for (name, nest) in &named {
            e.function(name, &params, nest, false);
            e.out.push('\n');
        }
        e.launcher(k, &params, &named);
    }
    SourceText {
        flavor,
        text: e.out,
        entry: k.name.clone(),
    }
}
