//! Built-in kernel providers and the strided f32 kernels behind them.

use crate::kernels::Window;
use crate::model_ir::{relayout, DimTag, LayoutId, LayoutKind, Op, TensorMeta};

use super::{HeavyCall, HeavyGrads, Impl, KernelProvider, OpClass};

/// Strided 4-d view; 2-d tensors get unit spatial extents.
#[derive(Debug, Clone, Copy)]
struct View4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    sn: usize,
    sc: usize,
    sh: usize,
    sw: usize,
}

impl View4 {
    fn of(m: &TensorMeta) -> View4 {
        let e = |t| m.extent(t).unwrap_or(1);
        let s = |t| m.stride(t).unwrap_or(0);
        View4 {
            n: e(DimTag::N0),
            c: e(DimTag::C0),
            h: e(DimTag::P1),
            w: e(DimTag::P0),
            sn: s(DimTag::N0),
            sc: s(DimTag::C0),
            sh: s(DimTag::P1),
            sw: s(DimTag::P0),
        }
    }

    #[inline]
    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        n * self.sn + c * self.sc + y * self.sh + x * self.sw
    }
}

/// Row-major view of a tensor the strided kernels can address directly.
pub(crate) fn strided_meta(m: &TensorMeta) -> TensorMeta {
    if m.layout == LayoutId::RowMajorTagged && m.dims.iter().all(|d| {
        [DimTag::N0, DimTag::C0, DimTag::P1, DimTag::P0].contains(&d.tag)
    }) {
        m.clone()
    } else {
        m.canonical()
    }
}

/// Dense `m × n` product of `a` (`m × k`, or `k × m` when `ta`) and `b`
/// (`k × n`, or `n × k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, ta: bool, tb: bool, tile: Option<usize>) -> Vec<f32> {
    let a = if ta { transpose(a, k, m) } else { a.to_vec() };
    let b = if tb { transpose(b, n, k) } else { b.to_vec() };
    let mut c = vec![0.0f32; m * n];
    match tile {
        None => {
            for i in 0..m {
                let row = &mut c[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = a[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    for (cv, bv) in row.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                        *cv += av * bv;
                    }
                }
            }
        }
        Some(t) => {
            for i0 in (0..m).step_by(t) {
                for l0 in (0..k).step_by(t) {
                    for j0 in (0..n).step_by(t) {
                        let (i1, l1, j1) = ((i0 + t).min(m), (l0 + t).min(k), (j0 + t).min(n));
                        for i in i0..i1 {
                            for l in l0..l1 {
                                let av = a[i * k + l];
                                for j in j0..j1 {
                                    c[i * n + j] += av * b[l * n + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    c
}

/// `rows × cols` to `cols × rows`.
pub(crate) fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn conv_attrs(call: &HeavyCall) -> &crate::model_ir::ConvAttrs {
    match &call.op {
        Op::Conv2d(a) => a,
        other => panic!("conv kernel called for {other}"),
    }
}

struct ConvGeom {
    x: View4,
    y: View4,
    win: Window,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl ConvGeom {
    fn of(call: &HeavyCall) -> ConvGeom {
        let a = conv_attrs(call);
        let x = View4::of(&call.x);
        let y = View4::of(&call.y);
        ConvGeom {
            x,
            y,
            win: Window::of_conv(a),
            groups: a.groups,
            cin_g: x.c / a.groups,
            cout_g: y.c / a.groups,
        }
    }

    fn ksize(&self) -> usize {
        self.cin_g * self.win.kh * self.win.kw
    }

    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = Window::src(oy, ky, self.win.sh, self.win.ph, self.x.h)?;
        let ix = Window::src(ox, kx, self.win.sw, self.win.pw, self.x.w)?;
        Some((iy, ix))
    }
}

fn conv_direct(call: &HeavyCall, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Vec<f32> {
    let g = ConvGeom::of(call);
    let mut y = vec![0.0f32; call.y.numel()];
    let (kh, kw) = (g.win.kh, g.win.kw);
    for n in 0..g.y.n {
        for o in 0..g.y.c {
            let grp = o / g.cout_g;
            let bias = b.map_or(0.0, |b| b[o]);
            for oy in 0..g.y.h {
                for ox in 0..g.y.w {
                    let mut acc = bias;
                    for ci in 0..g.cin_g {
                        let c = grp * g.cin_g + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                                    acc += w[((o * g.cin_g + ci) * kh + ky) * kw + kx] * x[g.x.at(n, c, iy, ix)];
                                }
                            }
                        }
                    }
                    y[g.y.at(n, o, oy, ox)] = acc;
                }
            }
        }
    }
    y
}

fn conv_direct_backward(call: &HeavyCall, x: &[f32], w: &[f32], dy: &[f32]) -> HeavyGrads {
    let g = ConvGeom::of(call);
    let (kh, kw) = (g.win.kh, g.win.kw);
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; g.y.c];
    for n in 0..g.y.n {
        for o in 0..g.y.c {
            let grp = o / g.cout_g;
            for oy in 0..g.y.h {
                for ox in 0..g.y.w {
                    let gy = dy[g.y.at(n, o, oy, ox)];
                    db[o] += gy;
                    for ci in 0..g.cin_g {
                        let c = grp * g.cin_g + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                                    let wi = ((o * g.cin_g + ci) * kh + ky) * kw + kx;
                                    let xi = g.x.at(n, c, iy, ix);
                                    dx[xi] += w[wi] * gy;
                                    dw[wi] += x[xi] * gy;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    HeavyGrads { dx, dw, db }
}

/// `K × P` patch matrix of image `n`, group `grp`.
fn im2col(g: &ConvGeom, x: &[f32], n: usize, grp: usize) -> Vec<f32> {
    let p = g.y.h * g.y.w;
    let mut col = vec![0.0f32; g.ksize() * p];
    for ci in 0..g.cin_g {
        let c = grp * g.cin_g + ci;
        for ky in 0..g.win.kh {
            for kx in 0..g.win.kw {
                let row = (ci * g.win.kh + ky) * g.win.kw + kx;
                for oy in 0..g.y.h {
                    for ox in 0..g.y.w {
                        if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                            col[row * p + oy * g.y.w + ox] = x[g.x.at(n, c, iy, ix)];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(g: &ConvGeom, col: &[f32], dx: &mut [f32], n: usize, grp: usize) {
    let p = g.y.h * g.y.w;
    for ci in 0..g.cin_g {
        let c = grp * g.cin_g + ci;
        for ky in 0..g.win.kh {
            for kx in 0..g.win.kw {
                let row = (ci * g.win.kh + ky) * g.win.kw + kx;
                for oy in 0..g.y.h {
                    for ox in 0..g.y.w {
                        if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                            dx[g.x.at(n, c, iy, ix)] += col[row * p + oy * g.y.w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_im2col(call: &HeavyCall, x: &[f32], w: &[f32], b: Option<&[f32]>, tile: Option<usize>) -> Vec<f32> {
    let g = ConvGeom::of(call);
    let (k, p) = (g.ksize(), g.y.h * g.y.w);
    let mut y = vec![0.0f32; call.y.numel()];
    for n in 0..g.x.n {
        for grp in 0..g.groups {
            let col = im2col(&g, x, n, grp);
            let wg = &w[grp * g.cout_g * k..(grp + 1) * g.cout_g * k];
            let yg = gemm(wg, &col, g.cout_g, k, p, false, false, tile);
            for oo in 0..g.cout_g {
                let o = grp * g.cout_g + oo;
                let bias = b.map_or(0.0, |b| b[o]);
                for oy in 0..g.y.h {
                    for ox in 0..g.y.w {
                        y[g.y.at(n, o, oy, ox)] = yg[oo * p + oy * g.y.w + ox] + bias;
                    }
                }
            }
        }
    }
    y
}

fn conv_im2col_backward(call: &HeavyCall, x: &[f32], w: &[f32], dy: &[f32], tile: Option<usize>) -> HeavyGrads {
    let g = ConvGeom::of(call);
    let (k, p) = (g.ksize(), g.y.h * g.y.w);
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; g.y.c];
    for n in 0..g.x.n {
        for grp in 0..g.groups {
            let mut dyg = vec![0.0f32; g.cout_g * p];
            for oo in 0..g.cout_g {
                let o = grp * g.cout_g + oo;
                for oy in 0..g.y.h {
                    for ox in 0..g.y.w {
                        let v = dy[g.y.at(n, o, oy, ox)];
                        dyg[oo * p + oy * g.y.w + ox] = v;
                        db[o] += v;
                    }
                }
            }
            let col = im2col(&g, x, n, grp);
            let dwg = gemm(&dyg, &col, g.cout_g, p, k, false, true, tile);
            for (d, v) in dw[grp * g.cout_g * k..(grp + 1) * g.cout_g * k].iter_mut().zip(dwg) {
                *d += v;
            }
            let wg = &w[grp * g.cout_g * k..(grp + 1) * g.cout_g * k];
            let dcol = gemm(wg, &dyg, k, g.cout_g, p, true, false, tile);
            col2im(&g, &dcol, &mut dx, n, grp);
        }
    }
    HeavyGrads { dx, dw, db }
}

fn linear_dims(call: &HeavyCall) -> (usize, usize, usize) {
    match &call.op {
        Op::Linear(a) => (call.x.numel() / a.in_features, a.in_features, a.out_features),
        other => panic!("linear kernel called for {other}"),
    }
}

fn linear_forward(call: &HeavyCall, imp: &Impl, x: &[f32], w: &[f32], b: Option<&[f32]>, tile: Option<usize>) -> Vec<f32> {
    let (n, inf, outf) = linear_dims(call);
    let out_in = imp.orientation == super::WeightOrientation::OutIn;
    let mut y = gemm(x, w, n, inf, outf, false, out_in, tile);
    if let Some(b) = b {
        for row in y.chunks_mut(outf) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    y
}

fn linear_backward(call: &HeavyCall, imp: &Impl, x: &[f32], w: &[f32], dy: &[f32], tile: Option<usize>) -> HeavyGrads {
    let (n, inf, outf) = linear_dims(call);
    let out_in = imp.orientation == super::WeightOrientation::OutIn;
    let dx = gemm(dy, w, n, outf, inf, false, !out_in, tile);
    let dw = if out_in {
        gemm(dy, x, outf, n, inf, true, false, tile)
    } else {
        gemm(x, dy, inf, n, outf, true, false, tile)
    };
    let mut db = vec![0.0f32; outf];
    for row in dy.chunks(outf) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    HeavyGrads { dx, dw, db }
}

/// Runs a strided kernel on data in any arrangement of the call's tag sets.
fn with_strided<R>(
    call: &HeavyCall,
    x: &[f32],
    f: impl FnOnce(&HeavyCall, &[f32]) -> R,
) -> (R, HeavyCall) {
    let inner = HeavyCall {
        op: call.op.clone(),
        x: strided_meta(&call.x),
        y: strided_meta(&call.y),
        has_bias: call.has_bias,
    };
    let xs = if inner.x == call.x { x.to_vec() } else { relayout(x, &call.x, &inner.x) };
    (f(&inner, &xs), inner)
}

fn run_forward(call: &HeavyCall, x: &[f32], body: impl FnOnce(&HeavyCall, &[f32]) -> Vec<f32>) -> Vec<f32> {
    let (y, inner) = with_strided(call, x, body);
    if inner.y == call.y {
        y
    } else {
        relayout(&y, &inner.y, &call.y)
    }
}

fn run_backward(
    call: &HeavyCall,
    x: &[f32],
    dy: &[f32],
    body: impl FnOnce(&HeavyCall, &[f32], &[f32]) -> HeavyGrads,
) -> HeavyGrads {
    let inner_y = strided_meta(&call.y);
    let dys = if inner_y == call.y { dy.to_vec() } else { relayout(dy, &call.y, &inner_y) };
    let (mut g, inner) = with_strided(call, x, |c, xs| body(c, xs, &dys));
    if inner.x != call.x {
        g.dx = relayout(&g.dx, &inner.x, &call.x);
    }
    g
}

const CHANNEL_LAYOUTS: [LayoutKind; 2] = [LayoutKind::ChannelsFirst, LayoutKind::ChannelsLast];

/// Naive loops for both heavy ops.
pub struct DirectProvider;

impl KernelProvider for DirectProvider {
    fn name(&self) -> &str {
        "direct"
    }

    fn algorithms(&self, op: OpClass) -> Vec<String> {
        match op {
            OpClass::Conv => vec!["direct".into()],
            OpClass::Linear => vec!["naive_gemm".into()],
        }
    }

    fn layouts(&self) -> Vec<LayoutKind> {
        CHANNEL_LAYOUTS.to_vec()
    }

    fn forward(&self, imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Vec<f32> {
        run_forward(call, x, |c, xs| match OpClass::of(&c.op) {
            Some(OpClass::Conv) => conv_direct(c, xs, w, b),
            _ => linear_forward(c, imp, xs, w, b, None),
        })
    }

    fn backward(&self, imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], dy: &[f32]) -> HeavyGrads {
        run_backward(call, x, dy, |c, xs, dys| match OpClass::of(&c.op) {
            Some(OpClass::Conv) => conv_direct_backward(c, xs, w, dys),
            _ => linear_backward(c, imp, xs, w, dys, None),
        })
    }
}

/// Convolution lowered to patch extraction plus a dense product.
pub struct Im2colProvider;

impl KernelProvider for Im2colProvider {
    fn name(&self) -> &str {
        "im2col_gemm"
    }

    fn algorithms(&self, op: OpClass) -> Vec<String> {
        match op {
            OpClass::Conv => vec!["im2col_gemm".into()],
            OpClass::Linear => Vec::new(),
        }
    }

    fn layouts(&self) -> Vec<LayoutKind> {
        CHANNEL_LAYOUTS.to_vec()
    }

    fn forward(&self, _imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Vec<f32> {
        run_forward(call, x, |c, xs| conv_im2col(c, xs, w, b, None))
    }

    fn backward(&self, _imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], dy: &[f32]) -> HeavyGrads {
        run_backward(call, x, dy, |c, xs, dys| conv_im2col_backward(c, xs, w, dys, None))
    }
}

/// Tiled matrix product for fully connected layers.
pub struct BlockedGemmProvider {
    pub tile: usize,
}

impl Default for BlockedGemmProvider {
    fn default() -> Self {
        BlockedGemmProvider { tile: 32 }
    }
}

impl KernelProvider for BlockedGemmProvider {
    fn name(&self) -> &str {
        "blocked_gemm"
    }

    fn algorithms(&self, op: OpClass) -> Vec<String> {
        match op {
            OpClass::Conv => Vec::new(),
            OpClass::Linear => vec!["blocked_gemm".into()],
        }
    }

    fn layouts(&self) -> Vec<LayoutKind> {
        CHANNEL_LAYOUTS.to_vec()
    }

    fn forward(&self, imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Vec<f32> {
        run_forward(call, x, |c, xs| linear_forward(c, imp, xs, w, b, Some(self.tile)))
    }

    fn backward(&self, imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], dy: &[f32]) -> HeavyGrads {
        run_backward(call, x, dy, |c, xs, dys| linear_backward(c, imp, xs, w, dys, Some(self.tile)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f32> = (0..35).map(|v| (v as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..77).map(|v| (v as f32 * 0.11).cos()).collect();
        let plain = gemm(&a, &b, 5, 7, 11, false, false, None);
        let tiled = gemm(&a, &b, 5, 7, 11, false, false, Some(2));
        let at = transpose(&a, 5, 7);
        let bt = transpose(&b, 7, 11);
        let both = gemm(&at, &bt, 5, 7, 11, true, true, Some(32));
        for ((p, t), q) in plain.iter().zip(&tiled).zip(&both) {
            assert!((p - t).abs() < 1e-5 && (p - q).abs() < 1e-5);
        }
        assert_eq!(gemm(&[1.0, 2.0], &[3.0, 4.0], 1, 2, 1, false, false, None), vec![11.0]);
    }
}
