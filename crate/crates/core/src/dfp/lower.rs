//! Lowering of a fused group to a [`KernelIR`].
//!
//! Each materialized tensor (unit outputs, multiply-consumed nodes, softmax
//! and flatten) gets one loop nest over its own coordinates. Every other
//! node is recomputed inline at the coordinates its consumer needs, so a
//! chain of element-wise ops costs no loops beyond the one nest.

use std::collections::{HashMap, HashSet};

use super::ir::*;
use super::{is_heavy, ExecUnit, FlavorId, UnitKind};
use crate::error::{Error, Result};
use crate::model_ir::{ConvAttrs, Dim, DimTag, LayoutId, ModelGraph, Op, PoolAttrs, TensorMeta};

/// Coordinates of one point of an iteration domain.
#[derive(Debug, Clone, Default)]
struct Coords {
    /// Several canonical-adjacent dims addressed by one collapsed variable.
    groups: Vec<(Expr, Vec<Dim>)>,
    each: HashMap<DimTag, Expr>,
}

impl Coords {
    fn without_pixel_groups(&self) -> Coords {
        Coords {
            groups: self
                .groups
                .iter()
                .filter(|(_, d)| !d.iter().any(|d| d.tag.is_pixel()))
                .cloned()
                .collect(),
            each: self.each.clone(),
        }
    }
}

fn index_of(meta: &TensorMeta, c: &Coords) -> Result<Index> {
    if meta.layout != LayoutId::RowMajorTagged {
        return Err(Error::UnsupportedInGroup(format!("blocked tensor {meta}")));
    }
    let strides = meta.strides();
    let mut covered: HashSet<DimTag> = HashSet::new();
    let mut terms: Vec<(usize, Expr, usize)> = Vec::new();
    for (expr, dims) in &c.groups {
        if dims.len() < 2 {
            continue;
        }
        let Some(first) = meta.position(dims[0].tag) else {
            continue;
        };
        let fits = dims
            .iter()
            .enumerate()
            .all(|(k, d)| meta.dims.get(first + k) == Some(d));
        if fits {
            terms.push((first, expr.clone(), strides[first + dims.len() - 1]));
            covered.extend(dims.iter().map(|d| d.tag));
        }
    }
    for (pos, d) in meta.dims.iter().enumerate() {
        if covered.contains(&d.tag) || d.extent == 1 {
            continue;
        }
        let e = c
            .each
            .get(&d.tag)
            .ok_or_else(|| Error::UnsupportedInGroup(format!("no coordinate for {} of {meta}", d.tag)))?;
        if !e.is_zero() {
            terms.push((pos, e.clone(), strides[pos]));
        }
    }
    terms.sort_by_key(|t| t.0);
    Ok(Index {
        terms: terms.into_iter().map(|(_, e, s)| (e, s)).collect(),
    })
}

struct LoopSpec {
    var: String,
    extent: usize,
    annotation: Annotation,
    derived: Vec<Derived>,
}

fn collapsed(dims: &[Dim], var: &str) -> Vec<Derived> {
    let mut out = Vec::new();
    for (i, d) in dims.iter().enumerate() {
        let div: usize = dims[i + 1..].iter().map(|d| d.extent).product();
        out.push(Derived {
            name: format!("O{}", d.tag),
            var: var.to_string(),
            div,
            modulo: (i > 0).then_some(d.extent),
        });
    }
    out
}

struct Lowerer<'a> {
    g: &'a ModelGraph,
    members: HashSet<String>,
    names: HashMap<String, String>,
    materialized: HashSet<String>,
    params: Vec<(String, String)>,
    flavor: FlavorId,
    depth: usize,
}

impl<'a> Lowerer<'a> {
    fn meta(&self, id: &str) -> TensorMeta {
        self.g.meta_of(id).expect("shape-annotated graph")
    }

    fn name(&self, id: &str) -> &str {
        &self.names[id]
    }

    fn param(&mut self, p: &str) -> String {
        if let Some((_, n)) = self.params.iter().find(|(q, _)| q == p) {
            return n.clone();
        }
        let n = format!("P{}", self.params.len());
        self.params.push((p.to_string(), n.clone()));
        n
    }

    fn param_at(&mut self, p: &str, index: Index) -> Value {
        Value::Load {
            buf: self.param(p),
            index,
        }
    }

    fn coord(c: &Coords, tag: DimTag) -> Result<Expr> {
        c.each
            .get(&tag)
            .cloned()
            .ok_or_else(|| Error::UnsupportedInGroup(format!("no coordinate for {tag}")))
    }

    fn value(&mut self, id: &str, c: &Coords) -> Result<(Vec<Stmt>, Value)> {
        if !self.members.contains(id) || self.materialized.contains(id) {
            let index = index_of(&self.meta(id), c)?;
            return Ok((
                Vec::new(),
                Value::Load {
                    buf: self.name(id).to_string(),
                    index,
                },
            ));
        }
        self.node(id, c)
    }

    fn node(&mut self, id: &str, c: &Coords) -> Result<(Vec<Stmt>, Value)> {
        let node = self.g.node(id).expect("member").clone();
        let acc = format!("{}_s", self.name(id));
        let x = node.inputs.first().cloned().unwrap_or_default();
        match &node.op {
            Op::ReLU => {
                let (mut s, v) = self.value(&x, c)?;
                s.push(Stmt::Let { acc: acc.clone(), value: v });
                s.push(Stmt::Map { acc: acc.clone(), f: MapFn::Relu });
                Ok((s, Value::Acc(acc)))
            }
            Op::Add => {
                let (mut s, a) = self.value(&x, c)?;
                let (s2, b) = self.value(&node.inputs[1], c)?;
                s.extend(s2);
                s.push(Stmt::Let { acc: acc.clone(), value: a });
                s.push(Stmt::Map { acc: acc.clone(), f: MapFn::Add(b) });
                Ok((s, Value::Acc(acc)))
            }
            Op::BatchNorm2d(a) => {
                let (mut s, v) = self.value(&x, c)?;
                let ch = Index {
                    terms: vec![(Self::coord(c, DimTag::C0)?, 1)],
                };
                let p = &node.params;
                let mean = self.param_at(&p[2], ch.clone());
                let var = self.param_at(&p[3], ch.clone());
                let gamma = self.param_at(&p[0], ch.clone());
                let beta = self.param_at(&p[1], ch);
                s.push(Stmt::Let { acc: acc.clone(), value: v });
                for f in [
                    MapFn::Sub(mean),
                    MapFn::MulRsqrt { value: var, eps: a.eps },
                    MapFn::Mul(gamma),
                    MapFn::Add(beta),
                ] {
                    s.push(Stmt::Map { acc: acc.clone(), f });
                }
                Ok((s, Value::Acc(acc)))
            }
            Op::Copy(_) | Op::Flatten => self.value(&x, c),
            Op::MaxPool2d(a) => self.window(&node.id, &x, c, Window::Max(a.clone())),
            Op::AvgPool2d(a) => self.window(&node.id, &x, c, Window::Avg(a.clone())),
            Op::Conv2d(a) if !is_heavy(self.g, id) => {
                let w = node.params[0].clone();
                let b = node.params.get(1).cloned();
                self.window(&node.id, &x, c, Window::Depthwise(a.clone(), w, b))
            }
            Op::GlobalAvgPool => self.global_pool(&node.id, &x, c),
            _ => Err(Error::UnsupportedInGroup(id.to_string())),
        }
    }

    fn kvars(&mut self) -> String {
        let suffix = if self.depth == 0 {
            String::new()
        } else {
            format!("_{}", self.depth)
        };
        self.depth += 1;
        suffix
    }

    fn window(&mut self, id: &str, x: &str, c: &Coords, w: Window) -> Result<(Vec<Stmt>, Value)> {
        let acc = format!("{}_s", self.name(id));
        let cnt = format!("{}_n", self.name(id));
        let (k, s, p) = w.geometry();
        let in_meta = self.meta(x);
        let extents = [in_meta.extent(DimTag::P1), in_meta.extent(DimTag::P0)];
        let suffix = self.kvars();
        let kv = [format!("K1{suffix}"), format!("K0{suffix}")];
        let mut inner = c.without_pixel_groups();
        let mut guards = Vec::new();
        for (i, tag) in [DimTag::P1, DimTag::P0].into_iter().enumerate() {
            let e = Self::coord(c, tag)?
                .times(s[i] as i64)
                .plus(&Expr::var(&kv[i]));
            if p[i] > 0 {
                guards.push(Guard {
                    expr: e.clone(),
                    lo: 0,
                    hi: extents[i].expect("pixel dims") as i64,
                });
            }
            inner.each.insert(tag, e);
        }
        let (mut body, v) = self.value(x, &inner)?;
        let count_in_bounds = matches!(&w, Window::Avg(a) if !a.count_padding) && !guards.is_empty();
        let weight = match &w {
            Window::Depthwise(_, wname, _) => {
                let ch = Self::coord(c, DimTag::C0)?;
                let index = Index {
                    terms: vec![
                        (ch, k[0] * k[1]),
                        (Expr::var(&kv[0]).plus(&Expr::constant(p[0] as i64)), k[1]),
                        (Expr::var(&kv[1]).plus(&Expr::constant(p[1] as i64)), 1),
                    ],
                };
                Some(self.param_at(wname, index))
            }
            _ => None,
        };
        let op = if matches!(w, Window::Max(_)) { Reduce::Max } else { Reduce::Add };
        body.push(Stmt::Accumulate {
            acc: acc.clone(),
            op,
            value: v,
            weight,
        });
        if count_in_bounds {
            body.push(Stmt::Accumulate {
                acc: cnt.clone(),
                op: Reduce::Add,
                value: Value::Const(1.0),
                weight: None,
            });
        }
        if !guards.is_empty() {
            body = vec![Stmt::If { guards, body }];
        }
        let inner_loop = Stmt::Loop(Loop {
            var: kv[1].clone(),
            start: -(p[1] as i64),
            extent: k[1],
            annotation: Annotation::Reduction,
            derived: Vec::new(),
            body,
        });
        let outer_loop = Stmt::Loop(Loop {
            var: kv[0].clone(),
            start: -(p[0] as i64),
            extent: k[0],
            annotation: Annotation::Reduction,
            derived: Vec::new(),
            body: vec![inner_loop],
        });
        let init = match &w {
            Window::Max(a) => a.min_init,
            _ => 0.0,
        };
        let mut s = vec![Stmt::Let {
            acc: acc.clone(),
            value: Value::Const(init),
        }];
        if count_in_bounds {
            s.push(Stmt::Let {
                acc: cnt.clone(),
                value: Value::Const(0.0),
            });
        }
        s.push(outer_loop);
        match &w {
            Window::Avg(_) => {
                let div = if count_in_bounds {
                    Value::Acc(cnt)
                } else {
                    Value::Const((k[0] * k[1]) as f64)
                };
                s.push(Stmt::Map { acc: acc.clone(), f: MapFn::Div(div) });
            }
            Window::Depthwise(_, _, Some(b)) => {
                let ch = Index {
                    terms: vec![(Self::coord(c, DimTag::C0)?, 1)],
                };
                let bias = self.param_at(b, ch);
                s.push(Stmt::Map { acc: acc.clone(), f: MapFn::Add(bias) });
            }
            _ => {}
        }
        Ok((s, Value::Acc(acc)))
    }

    fn global_pool(&mut self, id: &str, x: &str, c: &Coords) -> Result<(Vec<Stmt>, Value)> {
        let acc = format!("{}_s", self.name(id));
        let in_meta = self.meta(x);
        let pixels: Vec<Dim> = in_meta
            .canonical_dims()
            .into_iter()
            .filter(|d| d.tag.is_pixel())
            .collect();
        let suffix = self.kvars();
        let mut inner = c.without_pixel_groups();
        for d in &pixels {
            inner.each.insert(d.tag, Expr::var(&format!("K{}{suffix}", d.tag.index)));
        }
        let (mut body, v) = self.value(x, &inner)?;
        body.push(Stmt::Accumulate {
            acc: acc.clone(),
            op: Reduce::Add,
            value: v,
            weight: None,
        });
        for d in pixels.iter().rev() {
            body = vec![Stmt::Loop(Loop {
                var: format!("K{}{suffix}", d.tag.index),
                start: 0,
                extent: d.extent,
                annotation: Annotation::Reduction,
                derived: Vec::new(),
                body,
            })];
        }
        let area: usize = pixels.iter().map(|d| d.extent).product();
        let mut s = vec![Stmt::Let {
            acc: acc.clone(),
            value: Value::Const(0.0),
        }];
        s.extend(body);
        s.push(Stmt::Map {
            acc: acc.clone(),
            f: MapFn::Div(Value::Const(area as f64)),
        });
        Ok((s, Value::Acc(acc)))
    }

    /// Loop skeleton over `domain` (canonical order) with flavor annotations.
    fn skeleton(&self, domain: &[Dim]) -> (Vec<LoopSpec>, Coords) {
        let np: Vec<Dim> = domain.iter().copied().filter(|d| !d.tag.is_pixel()).collect();
        let px: Vec<Dim> = domain.iter().copied().filter(|d| d.tag.is_pixel()).collect();
        let mut coords = Coords::default();
        let mut outer: Vec<LoopSpec> = Vec::new();
        let mut inner: Vec<LoopSpec> = Vec::new();
        let collapse_px = matches!(
            self.flavor,
            FlavorId::LongVector { .. } | FlavorId::WarpGroup { .. }
        );
        for (dims, into, collapse) in [(&np, &mut outer, true), (&px, &mut inner, collapse_px)] {
            if dims.len() > 1 && collapse {
                let var = format!("O{}x", dims.last().expect("non-empty").tag);
                let derived = collapsed(dims, &var);
                for (d, dv) in dims.iter().zip(&derived) {
                    coords.each.insert(d.tag, Expr::var(&dv.name));
                }
                coords.groups.push((Expr::var(&var), dims.clone()));
                into.push(LoopSpec {
                    var,
                    extent: dims.iter().map(|d| d.extent).product(),
                    annotation: Annotation::Serial,
                    derived,
                });
            } else {
                for d in dims.iter() {
                    let var = format!("O{}", d.tag);
                    coords.each.insert(d.tag, Expr::var(&var));
                    into.push(LoopSpec {
                        var,
                        extent: d.extent,
                        annotation: Annotation::Serial,
                        derived: Vec::new(),
                    });
                }
            }
        }
        let (a, b) = (outer.len(), inner.len());
        let mut loops: Vec<LoopSpec> = outer.into_iter().chain(inner).collect();
        let n = loops.len();
        use Annotation::*;
        match self.flavor {
            FlavorId::Scalar => {}
            FlavorId::ShortVector { .. } => {
                if b == 0 {
                    loops[n - 1].annotation = Vector;
                } else {
                    for l in &mut loops[a..] {
                        l.annotation = Vector;
                    }
                }
                if n > 1 && a > 0 {
                    loops[0].annotation = ParallelTask;
                }
            }
            FlavorId::LongVector { .. } => {
                for l in &mut loops {
                    l.annotation = ParallelTask;
                }
                loops[n - 1].annotation = VectorIvdep;
            }
            FlavorId::WarpGroup { .. } => {
                loops[n - 1].annotation = ThreadStride;
                if n > 1 {
                    loops[0].annotation = Block;
                }
            }
        }
        (loops, coords)
    }

    fn nest(&mut self, domain: &[Dim], body: impl FnOnce(&mut Self, &Coords) -> Result<Vec<Stmt>>) -> Result<Stmt> {
        self.depth = 0;
        let (loops, coords) = self.skeleton(domain);
        let mut stmts = body(self, &coords)?;
        for spec in loops.into_iter().rev() {
            stmts = vec![Stmt::Loop(Loop {
                var: spec.var,
                start: 0,
                extent: spec.extent,
                annotation: spec.annotation,
                derived: spec.derived,
                body: stmts,
            })];
        }
        Ok(stmts.pop().expect("at least one loop"))
    }

    fn store(&self, id: &str, meta: &TensorMeta, c: &Coords, mut s: Vec<Stmt>, v: Value) -> Result<Vec<Stmt>> {
        let acc = match v {
            Value::Acc(a) => a,
            other => {
                let a = format!("{}_s", self.name(id));
                s.push(Stmt::Let {
                    acc: a.clone(),
                    value: other,
                });
                a
            }
        };
        s.push(Stmt::Store {
            buf: self.name(id).to_string(),
            index: index_of(meta, c)?,
            acc,
        });
        Ok(s)
    }

    fn materialize(&mut self, id: &str) -> Result<Stmt> {
        let node = self.g.node(id).expect("member").clone();
        let meta = self.meta(id);
        match &node.op {
            Op::Flatten => {
                let in_meta = self.meta(&node.inputs[0]).canonical();
                let domain = in_meta.dims.clone();
                self.nest(&domain, |me, c| {
                    let (s, v) = me.value(&node.inputs[0], c)?;
                    me.store(id, &in_meta, c, s, v)
                })
            }
            Op::Softmax => {
                let domain: Vec<Dim> = meta
                    .canonical_dims()
                    .into_iter()
                    .filter(|d| !d.tag.is_channel())
                    .collect();
                let channels = meta.extent(DimTag::C0).expect("softmax channel");
                if meta.dims.iter().filter(|d| d.tag.is_channel()).count() != 1 {
                    return Err(Error::UnsupportedInGroup(id.to_string()));
                }
                let name = self.name(id).to_string();
                let (m, s_acc, e) = (format!("{name}_m"), format!("{name}_s"), format!("{name}_e"));
                self.nest(&domain, |me, c| {
                    let mut with_c = c.clone();
                    with_c.each.insert(DimTag::C0, Expr::var("KC0"));
                    let chan = |annotation, body| {
                        Stmt::Loop(Loop {
                            var: "KC0".into(),
                            start: 0,
                            extent: channels,
                            annotation,
                            derived: Vec::new(),
                            body,
                        })
                    };
                    let exp_of = |me: &mut Self| -> Result<Vec<Stmt>> {
                        let (mut s, v) = me.value(&node.inputs[0], &with_c)?;
                        s.push(Stmt::Let { acc: e.clone(), value: v });
                        s.push(Stmt::Map { acc: e.clone(), f: MapFn::Sub(Value::Acc(m.clone())) });
                        s.push(Stmt::Map { acc: e.clone(), f: MapFn::Exp });
                        Ok(s)
                    };
                    let (mut s1, v) = me.value(&node.inputs[0], &with_c)?;
                    s1.push(Stmt::Accumulate {
                        acc: m.clone(),
                        op: Reduce::Max,
                        value: v,
                        weight: None,
                    });
                    let mut s2 = exp_of(me)?;
                    s2.push(Stmt::Accumulate {
                        acc: s_acc.clone(),
                        op: Reduce::Add,
                        value: Value::Acc(e.clone()),
                        weight: None,
                    });
                    let mut s3 = exp_of(me)?;
                    s3.push(Stmt::Map { acc: e.clone(), f: MapFn::Div(Value::Acc(s_acc.clone())) });
                    s3.push(Stmt::Store {
                        buf: name.clone(),
                        index: index_of(&meta, &with_c)?,
                        acc: e.clone(),
                    });
                    Ok(vec![
                        Stmt::Let { acc: m.clone(), value: Value::Const(f64::NEG_INFINITY) },
                        chan(Annotation::Reduction, s1),
                        Stmt::Let { acc: s_acc.clone(), value: Value::Const(0.0) },
                        chan(Annotation::Reduction, s2),
                        chan(Annotation::Serial, s3),
                    ])
                })
            }
            _ => {
                let domain = meta.canonical_dims();
                self.nest(&domain, |me, c| {
                    let (s, v) = me.node(id, c)?;
                    me.store(id, &meta, c, s, v)
                })
            }
        }
    }
}

enum Window {
    Max(PoolAttrs),
    Avg(PoolAttrs),
    /// Depthwise convolution as a weighted pooling: attrs, weight, bias.
    Depthwise(ConvAttrs, String, Option<String>),
}

impl Window {
    fn geometry(&self) -> ([usize; 2], [usize; 2], [usize; 2]) {
        match self {
            Window::Max(a) | Window::Avg(a) => (a.kernel, a.stride(), a.padding),
            Window::Depthwise(a, _, _) => (a.kernel, a.stride, a.padding),
        }
    }
}

/// Lowers a fused group of a shape-annotated graph into one kernel named
/// `name`. Buffers are `L<k>` for tensors (unit inputs first, then member
/// nodes in order) and `P<k>` for parameters.
pub fn lower_group(g: &ModelGraph, unit: &ExecUnit, flavor: FlavorId, name: &str) -> Result<KernelIR> {
    let UnitKind::DfpGroup(members) = &unit.kind else {
        return Err(Error::UnsupportedInGroup(unit.nodes().join(",")));
    };
    for id in members {
        let node = g
            .node(id)
            .ok_or_else(|| Error::MalformedModel(format!("unknown node `{id}`")))?;
        if is_heavy(g, id) || node.op == Op::CrossEntropyLoss {
            return Err(Error::UnsupportedInGroup(id.clone()));
        }
    }
    let member_set: HashSet<String> = members.iter().cloned().collect();
    let mut names = HashMap::new();
    for (i, id) in unit.inputs.iter().chain(members).enumerate() {
        names.insert(id.clone(), format!("L{i}"));
    }
    let mut materialized: HashSet<String> = unit.outputs.iter().cloned().collect();
    for id in members {
        let node = g.node(id).expect("member");
        let uses: usize = members
            .iter()
            .map(|m| g.node(m).expect("member").inputs.iter().filter(|i| *i == id).count())
            .sum();
        if uses > 1 || matches!(node.op, Op::Softmax | Op::Flatten) {
            materialized.insert(id.clone());
        }
    }
    let mut lw = Lowerer {
        g,
        members: member_set,
        names,
        materialized,
        params: Vec::new(),
        flavor,
        depth: 0,
    };
    let mut body = Vec::new();
    for id in members {
        if lw.materialized.contains(id) {
            body.push(lw.materialize(id)?);
        }
    }
    let mut buffers: Vec<BufferDecl> = unit
        .inputs
        .iter()
        .map(|id| BufferDecl {
            name: lw.names[id].clone(),
            role: BufRole::Input,
            len: lw.meta(id).numel(),
            source: id.clone(),
        })
        .collect();
    for (p, n) in &lw.params {
        buffers.push(BufferDecl {
            name: n.clone(),
            role: BufRole::Param,
            len: g.params[p].numel(),
            source: p.clone(),
        });
    }
    for id in members {
        if lw.materialized.contains(id) {
            buffers.push(BufferDecl {
                name: lw.names[id].clone(),
                role: if unit.outputs.contains(id) {
                    BufRole::Output
                } else {
                    BufRole::Temp
                },
                len: lw.meta(id).numel(),
                source: id.clone(),
            });
        }
    }
    Ok(KernelIR {
        name: name.to_string(),
        buffers,
        body,
    })
}
