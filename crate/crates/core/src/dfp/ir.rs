//! Loop-nest kernel representation shared by the interpreter and emitter.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Affine expression `Σ coef·var + constant`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Expr {
    pub terms: Vec<(String, i64)>,
    pub constant: i64,
}

impl Expr {
    pub fn var(name: &str) -> Self {
        Expr::scaled(name, 1)
    }

    pub fn scaled(name: &str, coef: i64) -> Self {
        Expr {
            terms: vec![(name.to_string(), coef)],
            constant: 0,
        }
    }

    pub fn constant(c: i64) -> Self {
        Expr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn plus(mut self, other: &Expr) -> Self {
        for (v, c) in &other.terms {
            match self.terms.iter_mut().find(|(n, _)| n == v) {
                Some(t) => t.1 += c,
                None => self.terms.push((v.clone(), *c)),
            }
        }
        self.terms.retain(|(_, c)| *c != 0);
        self.constant += other.constant;
        self
    }

    pub fn times(mut self, k: i64) -> Self {
        for t in &mut self.terms {
            t.1 *= k;
        }
        self.terms.retain(|(_, c)| *c != 0);
        self.constant *= k;
        self
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() && self.constant == 0
    }

    fn is_compound(&self) -> bool {
        self.terms.len() + usize::from(self.constant != 0) > 1
    }

    pub fn mentions(&self, var: &str) -> bool {
        self.terms.iter().any(|(n, _)| n == var)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (v, c) in &self.terms {
            let (neg, mag) = (*c < 0, c.unsigned_abs());
            match (first, neg) {
                (true, true) => f.write_str("-")?,
                (false, true) => f.write_str(" - ")?,
                (false, false) => f.write_str(" + ")?,
                (true, false) => {}
            }
            if mag == 1 {
                f.write_str(v)?;
            } else {
                write!(f, "{v} * {mag}")?;
            }
            first = false;
        }
        if first {
            write!(f, "{}", self.constant)
        } else if self.constant > 0 {
            write!(f, " + {}", self.constant)
        } else if self.constant < 0 {
            write!(f, " - {}", -self.constant)
        } else {
            Ok(())
        }
    }
}

/// Flat element offset `Σ expr·stride`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Index {
    pub terms: Vec<(Expr, usize)>,
}

impl Index {
    pub fn mentions(&self, var: &str) -> bool {
        self.terms.iter().any(|(e, _)| e.mentions(var))
    }
}

impl fmt::Display for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        let many = self.terms.len() > 1;
        for (i, (e, s)) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            if e.is_compound() && (many || *s != 1) {
                write!(f, "({e})")?;
            } else {
                write!(f, "{e}")?;
            }
            if *s != 1 {
                write!(f, " * {s}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Const(f64),
    Load { buf: String, index: Index },
    Acc(String),
}

impl Value {
    pub fn mentions(&self, var: &str) -> bool {
        match self {
            Value::Load { index, .. } => index.mentions(var),
            _ => false,
        }
    }
}

/// In-place update of an accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MapFn {
    Relu,
    Exp,
    Add(Value),
    Sub(Value),
    Mul(Value),
    Div(Value),
    /// `acc * 1/sqrt(value + eps)`
    MulRsqrt { value: Value, eps: f64 },
}

impl MapFn {
    fn operand(&self) -> Option<&Value> {
        match self {
            MapFn::Relu | MapFn::Exp => None,
            MapFn::Add(v) | MapFn::Sub(v) | MapFn::Mul(v) | MapFn::Div(v) => Some(v),
            MapFn::MulRsqrt { value, .. } => Some(value),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduce {
    Add,
    Max,
}

/// `lo <= expr < hi`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guard {
    pub expr: Expr,
    pub lo: i64,
    pub hi: i64,
}

/// `name = (var / div) % modulo`, recomputed on every iteration of the loop
/// that declares it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derived {
    pub name: String,
    pub var: String,
    pub div: usize,
    pub modulo: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Annotation {
    Serial,
    ParallelTask,
    Vector,
    VectorIvdep,
    Block,
    ThreadStride,
    Reduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loop {
    pub var: String,
    pub start: i64,
    pub extent: usize,
    pub annotation: Annotation,
    pub derived: Vec<Derived>,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Stmt {
    Loop(Loop),
    Let {
        acc: String,
        value: Value,
    },
    Accumulate {
        acc: String,
        op: Reduce,
        value: Value,
        weight: Option<Value>,
    },
    Map {
        acc: String,
        f: MapFn,
    },
    Store {
        buf: String,
        index: Index,
        acc: String,
    },
    If {
        guards: Vec<Guard>,
        body: Vec<Stmt>,
    },
}

impl Stmt {
    /// Whether `var` is read anywhere in this statement.
    pub fn mentions(&self, var: &str) -> bool {
        match self {
            Stmt::Loop(l) => {
                l.derived.iter().any(|d| d.var == var) || l.body.iter().any(|s| s.mentions(var))
            }
            Stmt::Let { value, .. } => value.mentions(var),
            Stmt::Accumulate { value, weight, .. } => {
                value.mentions(var) || weight.as_ref().is_some_and(|w| w.mentions(var))
            }
            Stmt::Map { f, .. } => f.operand().is_some_and(|v| v.mentions(var)),
            Stmt::Store { index, .. } => index.mentions(var),
            Stmt::If { guards, body } => {
                guards.iter().any(|g| g.expr.mentions(var)) || body.iter().any(|s| s.mentions(var))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BufRole {
    Input,
    Param,
    Output,
    /// Intermediate result stored and reloaded within the kernel.
    Temp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferDecl {
    pub name: String,
    pub role: BufRole,
    pub len: usize,
    /// Graph tensor, node or parameter the buffer holds.
    pub source: String,
}

/// A fused kernel: buffers in signature order and a list of loop nests run
/// one after another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelIR {
    pub name: String,
    pub buffers: Vec<BufferDecl>,
    pub body: Vec<Stmt>,
}

impl KernelIR {
    pub fn buffer(&self, name: &str) -> Option<usize> {
        self.buffers.iter().position(|b| b.name == name)
    }

    /// Indices of buffers with `role`.
    pub fn buffers_with(&self, role: BufRole) -> Vec<usize> {
        (0..self.buffers.len())
            .filter(|&i| self.buffers[i].role == role)
            .collect()
    }

    /// Total number of loops in the tree.
    pub fn loop_count(&self) -> usize {
        fn count(s: &[Stmt]) -> usize {
            s.iter()
                .map(|s| match s {
                    Stmt::Loop(l) => 1 + count(&l.body),
                    Stmt::If { body, .. } => count(body),
                    _ => 0,
                })
                .sum()
        }
        count(&self.body)
    }

    /// Top-level loops of each nest, outermost first, following single
    /// nested loops.
    pub fn nests(&self) -> Vec<Vec<&Loop>> {
        self.body
            .iter()
            .filter_map(|s| match s {
                Stmt::Loop(l) => Some(l),
                _ => None,
            })
            .map(|l| {
                let mut chain = vec![l];
                let mut cur = l;
                while let [Stmt::Loop(inner)] = cur.body.as_slice() {
                    if inner.annotation == Annotation::Reduction {
                        break;
                    }
                    chain.push(inner);
                    cur = inner;
                }
                chain
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_rendering() {
        let idx = Index {
            terms: vec![
                (Expr::var("OC0x"), 16384),
                (Expr::var("OP1").plus(&Expr::var("K1")), 128),
                (Expr::var("OP0").plus(&Expr::var("K0")), 1),
            ],
        };
        assert_eq!(idx.to_string(), "OC0x * 16384 + (OP1 + K1) * 128 + (OP0 + K0)");
        let e = Expr::scaled("OP1", 2).plus(&Expr::var("K1")).plus(&Expr::constant(-1));
        assert_eq!(e.to_string(), "OP1 * 2 + K1 - 1");
        let single = Index {
            terms: vec![(Expr::var("OP0").plus(&Expr::constant(1)), 1)],
        };
        assert_eq!(single.to_string(), "OP0 + 1");
        assert_eq!(Index::default().to_string(), "0");
    }
}
