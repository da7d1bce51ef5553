//! Reference execution of [`KernelIR`].

use std::collections::HashMap;

use super::ir::*;
use crate::error::{Error, Result};
use crate::runtime::DeviceKernel;
use crate::scalar::Scalar;

struct PExpr {
    terms: Vec<(usize, i64)>,
    constant: i64,
}

struct PIndex(Vec<(PExpr, i64)>);

enum PVal {
    Const(f64),
    Load(usize, PIndex),
    Acc(usize),
}

enum PMap {
    Relu,
    Exp,
    Add(PVal),
    Sub(PVal),
    Mul(PVal),
    Div(PVal),
    MulRsqrt(PVal, f64),
}

struct PDerived {
    slot: usize,
    src: usize,
    div: i64,
    modulo: Option<i64>,
}

enum PStmt {
    Loop {
        var: usize,
        start: i64,
        extent: i64,
        derived: Vec<PDerived>,
        body: Vec<PStmt>,
    },
    Let(usize, PVal),
    Accumulate(usize, Reduce, PVal, Option<PVal>),
    Map(usize, PMap),
    Store(usize, PIndex, usize),
    If(Vec<(PExpr, i64, i64)>, Vec<PStmt>),
}

#[derive(Default)]
struct Slots {
    vars: HashMap<String, usize>,
    accs: HashMap<String, usize>,
    bufs: HashMap<String, usize>,
}

fn bad(msg: String) -> Error {
    Error::InvalidArgument(format!("malformed kernel: {msg}"))
}

impl Slots {
    fn var(&self, name: &str) -> Result<usize> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| bad(format!("variable `{name}` used outside its loop")))
    }

    fn bind(&mut self, name: &str) -> usize {
        let n = self.vars.len();
        *self.vars.entry(name.to_string()).or_insert(n)
    }

    fn acc(&mut self, name: &str) -> usize {
        let n = self.accs.len();
        *self.accs.entry(name.to_string()).or_insert(n)
    }

    fn expr(&self, e: &Expr) -> Result<PExpr> {
        Ok(PExpr {
            terms: e
                .terms
                .iter()
                .map(|(v, c)| Ok((self.var(v)?, *c)))
                .collect::<Result<_>>()?,
            constant: e.constant,
        })
    }

    fn index(&self, i: &Index) -> Result<PIndex> {
        Ok(PIndex(
            i.terms
                .iter()
                .map(|(e, s)| Ok((self.expr(e)?, *s as i64)))
                .collect::<Result<_>>()?,
        ))
    }

    fn value(&mut self, v: &Value) -> Result<PVal> {
        Ok(match v {
            Value::Const(c) => PVal::Const(*c),
            Value::Acc(a) => PVal::Acc(self.acc(a)),
            Value::Load { buf, index } => {
                let b = *self
                    .bufs
                    .get(buf)
                    .ok_or_else(|| bad(format!("unknown buffer `{buf}`")))?;
                PVal::Load(b, self.index(index)?)
            }
        })
    }

    fn stmts(&mut self, s: &[Stmt]) -> Result<Vec<PStmt>> {
        s.iter().map(|s| self.stmt(s)).collect()
    }

    fn stmt(&mut self, s: &Stmt) -> Result<PStmt> {
        Ok(match s {
            Stmt::Loop(l) => {
                let var = self.bind(&l.var);
                let mut derived = Vec::new();
                for d in &l.derived {
                    let src = self.var(&d.var)?;
                    derived.push(PDerived {
                        slot: self.bind(&d.name),
                        src,
                        div: d.div.max(1) as i64,
                        modulo: d.modulo.map(|m| m as i64),
                    });
                }
                PStmt::Loop {
                    var,
                    start: l.start,
                    extent: l.extent as i64,
                    derived,
                    body: self.stmts(&l.body)?,
                }
            }
            Stmt::Let { acc, value } => {
                let v = self.value(value)?;
                PStmt::Let(self.acc(acc), v)
            }
            Stmt::Accumulate {
                acc,
                op,
                value,
                weight,
            } => {
                let v = self.value(value)?;
                let w = weight.as_ref().map(|w| self.value(w)).transpose()?;
                PStmt::Accumulate(self.acc(acc), *op, v, w)
            }
            Stmt::Map { acc, f } => {
                let m = match f {
                    MapFn::Relu => PMap::Relu,
                    MapFn::Exp => PMap::Exp,
                    MapFn::Add(v) => PMap::Add(self.value(v)?),
                    MapFn::Sub(v) => PMap::Sub(self.value(v)?),
                    MapFn::Mul(v) => PMap::Mul(self.value(v)?),
                    MapFn::Div(v) => PMap::Div(self.value(v)?),
                    MapFn::MulRsqrt { value, eps } => PMap::MulRsqrt(self.value(value)?, *eps),
                };
                PStmt::Map(self.acc(acc), m)
            }
            Stmt::Store { buf, index, acc } => {
                let b = *self
                    .bufs
                    .get(buf)
                    .ok_or_else(|| bad(format!("unknown buffer `{buf}`")))?;
                PStmt::Store(b, self.index(index)?, self.acc(acc))
            }
            Stmt::If { guards, body } => PStmt::If(
                guards
                    .iter()
                    .map(|g| Ok((self.expr(&g.expr)?, g.lo, g.hi)))
                    .collect::<Result<_>>()?,
                self.stmts(body)?,
            ),
        })
    }
}

struct Machine<'a, T> {
    vars: Vec<i64>,
    accs: Vec<T>,
    bufs: &'a mut [Vec<T>],
    fault: Option<String>,
}

impl<T: Scalar> Machine<'_, T> {
    #[inline]
    fn expr(&self, e: &PExpr) -> i64 {
        e.terms
            .iter()
            .fold(e.constant, |a, &(v, c)| a + self.vars[v] * c)
    }

    #[inline]
    fn offset(&self, i: &PIndex) -> i64 {
        i.0.iter().map(|(e, s)| self.expr(e) * s).sum()
    }

    #[inline]
    fn value(&mut self, v: &PVal) -> T {
        match v {
            PVal::Const(c) => T::from_f64_lossy(*c),
            PVal::Acc(a) => self.accs[*a],
            PVal::Load(b, i) => {
                let off = self.offset(i);
                match usize::try_from(off).ok().and_then(|o| self.bufs[*b].get(o)) {
                    Some(v) => *v,
                    None => {
                        self.fault.get_or_insert_with(|| format!("load at {off} out of range"));
                        T::zero()
                    }
                }
            }
        }
    }

    fn run(&mut self, stmts: &[PStmt]) {
        for s in stmts {
            match s {
                PStmt::Loop {
                    var,
                    start,
                    extent,
                    derived,
                    body,
                } => {
                    for i in *start..*start + *extent {
                        self.vars[*var] = i;
                        for d in derived {
                            let q = self.vars[d.src] / d.div;
                            self.vars[d.slot] = d.modulo.map_or(q, |m| q % m);
                        }
                        self.run(body);
                    }
                }
                PStmt::Let(a, v) => self.accs[*a] = self.value(v),
                PStmt::Accumulate(a, op, v, w) => {
                    let mut x = self.value(v);
                    if let Some(w) = w {
                        x *= self.value(w);
                    }
                    let acc = &mut self.accs[*a];
                    match op {
                        Reduce::Add => *acc += x,
                        Reduce::Max => {
                            if x > *acc {
                                *acc = x
                            }
                        }
                    }
                }
                PStmt::Map(a, f) => {
                    let cur = self.accs[*a];
                    let out = match f {
                        PMap::Relu => {
                            if cur > T::zero() {
                                cur
                            } else {
                                T::zero()
                            }
                        }
                        PMap::Exp => cur.exp(),
                        PMap::Add(v) => cur + self.value(v),
                        PMap::Sub(v) => cur - self.value(v),
                        PMap::Mul(v) => cur * self.value(v),
                        PMap::Div(v) => cur / self.value(v),
                        PMap::MulRsqrt(v, eps) => {
                            cur * (self.value(v) + T::from_f64_lossy(*eps)).sqrt().recip()
                        }
                    };
                    self.accs[*a] = out;
                }
                PStmt::Store(b, i, a) => {
                    let off = self.offset(i);
                    let v = self.accs[*a];
                    match usize::try_from(off).ok().and_then(|o| self.bufs[*b].get_mut(o)) {
                        Some(slot) => *slot = v,
                        None => {
                            self.fault.get_or_insert_with(|| format!("store at {off} out of range"));
                        }
                    }
                }
                PStmt::If(guards, body) => {
                    if guards.iter().all(|(e, lo, hi)| {
                        let v = self.expr(e);
                        *lo <= v && v < *hi
                    }) {
                        self.run(body);
                    }
                }
            }
        }
    }
}

/// Executes `k` over `bufs`, one buffer per declaration in order.
pub fn interpret<T: Scalar>(k: &KernelIR, bufs: &mut [Vec<T>]) -> Result<()> {
    if bufs.len() != k.buffers.len() {
        return Err(bad(format!(
            "{} buffers declared, {} given",
            k.buffers.len(),
            bufs.len()
        )));
    }
    let mut slots = Slots::default();
    for (i, (decl, b)) in k.buffers.iter().zip(bufs.iter()).enumerate() {
        if b.len() < decl.len {
            return Err(bad(format!("buffer `{}` needs {} elements", decl.name, decl.len)));
        }
        slots.bufs.insert(decl.name.clone(), i);
    }
    let prog = slots.stmts(&k.body)?;
    let mut m = Machine {
        vars: vec![0; slots.vars.len()],
        accs: vec![T::zero(); slots.accs.len()],
        bufs,
        fault: None,
    };
    m.run(&prog);
    match m.fault {
        Some(f) => Err(bad(f)),
        None => Ok(()),
    }
}

/// Runs `k` with the given inputs and parameters (in declaration order) and
/// returns its output buffers.
pub fn run_kernel<T: Scalar>(k: &KernelIR, inputs: &[&[T]], params: &[&[T]]) -> Result<Vec<Vec<T>>> {
    let (mut ins, mut ps) = (inputs.iter(), params.iter());
    let mut bufs: Vec<Vec<T>> = Vec::with_capacity(k.buffers.len());
    for b in &k.buffers {
        let src = match b.role {
            BufRole::Input => ins.next(),
            BufRole::Param => ps.next(),
            BufRole::Output | BufRole::Temp => None,
        };
        bufs.push(match src {
            Some(s) => s.to_vec(),
            None if matches!(b.role, BufRole::Input | BufRole::Param) => {
                return Err(bad(format!("missing data for `{}`", b.name)))
            }
            None => vec![T::zero(); b.len],
        });
    }
    interpret(k, &mut bufs)?;
    Ok(k.buffers
        .iter()
        .zip(bufs)
        .filter(|(d, _)| d.role == BufRole::Output)
        .map(|(_, b)| b)
        .collect())
}

/// A [`KernelIR`] launched on a device queue. Arguments follow the buffer
/// declarations.
pub struct IrKernel {
    pub ir: KernelIR,
}

impl DeviceKernel for IrKernel {
    fn name(&self) -> &str {
        &self.ir.name
    }

    fn arity(&self) -> usize {
        self.ir.buffers.len()
    }

    fn arg_len(&self, i: usize) -> usize {
        self.ir.buffers[i].len
    }

    fn outputs(&self) -> Vec<usize> {
        (0..self.ir.buffers.len())
            .filter(|&i| matches!(self.ir.buffers[i].role, BufRole::Output | BufRole::Temp))
            .collect()
    }

    fn work_elements(&self) -> u64 {
        self.outputs().iter().map(|&i| self.ir.buffers[i].len as u64).sum()
    }

    fn run(&self, args: &mut [Vec<f32>]) {
        interpret(&self.ir, args).expect("kernel validated at lowering");
    }
}
