//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Batches are carried as stacked
//! row blocks (`batch * n` rows), and the few operations that must not mix
//! samples (attention, mask decoding, the loss) take an explicit block size.
//!
//! Parameters are bound as borrowed leaves, so building a graph does not copy
//! weights. Leaves bound with `requires_grad = false` are constants: no
//! gradient is accumulated for them and operations whose inputs are all
//! constant skip their backward pass entirely.

use std::borrow::Cow;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

const LN_EPS: f64 = 1e-6;
const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Precomputed 2-tap-per-axis interpolation table mapping a `gh x gw` grid to
/// an `out_h x out_w` image.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub grid_h: usize,
    pub grid_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    // per output pixel: four (cell index, weight) taps
    taps: Vec<[(usize, f64); 4]>,
}

impl Resampler {
    /// Bilinear interpolation with half-pixel centers and edge clamping.
    pub fn bilinear(grid_h: usize, grid_w: usize, out_h: usize, out_w: usize) -> Self {
        let axis = |out: usize, grid: usize| -> Vec<(usize, usize, f64)> {
            let scale = grid as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (grid - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(grid - 1);
                    (lo, hi, src - lo as f64)
                })
                .collect()
        };
        let ys = axis(out_h, grid_h);
        let xs = axis(out_w, grid_w);
        let mut taps = Vec::with_capacity(out_h * out_w);
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                taps.push([
                    (y0 * grid_w + x0, (1.0 - wy) * (1.0 - wx)),
                    (y0 * grid_w + x1, (1.0 - wy) * wx),
                    (y1 * grid_w + x0, wy * (1.0 - wx)),
                    (y1 * grid_w + x1, wy * wx),
                ]);
            }
        }
        Self { grid_h, grid_w, out_h, out_w, taps }
    }

    /// Nearest-cell lookup; used only at inference.
    pub fn nearest(grid_h: usize, grid_w: usize, out_h: usize, out_w: usize) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let gy = (y * grid_h / out_h).min(grid_h - 1);
            for x in 0..out_w {
                let gx = (x * grid_w / out_w).min(grid_w - 1);
                let cell = gy * grid_w + gx;
                taps.push([(cell, 1.0), (cell, 0.0), (cell, 0.0), (cell, 0.0)]);
            }
        }
        Self { grid_h, grid_w, out_h, out_w, taps }
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Resamples each column of a `(blocks * cells) x k` matrix.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let cells = self.cells();
        let blocks = x.nrows() / cells;
        let mut out = Array2::zeros((blocks * self.pixels(), x.ncols()));
        for b in 0..blocks {
            let src = x.slice(s![b * cells..(b + 1) * cells, ..]);
            for (p, taps) in self.taps.iter().enumerate() {
                let mut row = out.row_mut(b * self.pixels() + p);
                for &(cell, w) in taps {
                    if w != 0.0 {
                        row.scaled_add(w, &src.row(cell));
                    }
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: ArrayView2<f64>) -> Array2<f64> {
        let cells = self.cells();
        let blocks = g.nrows() / self.pixels();
        let mut out = Array2::zeros((blocks * cells, g.ncols()));
        for b in 0..blocks {
            for (p, taps) in self.taps.iter().enumerate() {
                let grow = g.row(b * self.pixels() + p);
                for &(cell, w) in taps {
                    if w != 0.0 {
                        out.row_mut(b * cells + cell).scaled_add(w, &grow);
                    }
                }
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    /// Per-block `a_b * b_b^T` for row blocks of `a` and `b`.
    BlockMatMulNT(Var, Var, usize),
    /// Per-block `a_b * b_b` where `a` has `block_a` rows and `b` has `block_b` rows per block.
    BlockMatMul(Var, Var, usize, usize),
    Transpose(Var),
    TileRows(Var, usize),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    GatedAdd(Var, Var, Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Sigmoid(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    DepthwiseConv { x: Var, w: Var, grid_h: usize, grid_w: usize, k: usize },
    Resample(Var, Resampler),
    Clamp01(Var),
    SumAll(Var),
    SegLoss { p: Var, gt: Array2<f64>, block: usize },
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array2<f64>>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced on tape");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Binds a borrowed parameter as a leaf.
    pub fn param(&mut self, value: &'a Array2<f64>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A leaf that owns its value but still receives gradients.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), Op::MatMul(a, b), rg)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), Op::MatMulNT(a, b), rg)
    }

    pub fn block_matmul_nt(&mut self, a: Var, b: Var, block: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.nrows(), bv.nrows());
        assert_eq!(av.nrows() % block, 0);
        let blocks = av.nrows() / block;
        let mut out = Array2::zeros((av.nrows(), block));
        for i in 0..blocks {
            let r = i * block..(i + 1) * block;
            let prod = av.slice(s![r.clone(), ..]).dot(&bv.slice(s![r.clone(), ..]).t());
            out.slice_mut(s![r, ..]).assign(&prod);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), Op::BlockMatMulNT(a, b, block), rg)
    }

    pub fn block_matmul(&mut self, a: Var, b: Var, block_a: usize, block_b: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.nrows() / block_a, bv.nrows() / block_b);
        assert_eq!(av.ncols(), block_b);
        let blocks = av.nrows() / block_a;
        let mut out = Array2::zeros((av.nrows(), bv.ncols()));
        for i in 0..blocks {
            let prod = av
                .slice(s![i * block_a..(i + 1) * block_a, ..])
                .dot(&bv.slice(s![i * block_b..(i + 1) * block_b, ..]));
            out.slice_mut(s![i * block_a..(i + 1) * block_a, ..]).assign(&prod);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), Op::BlockMatMul(a, b, block_a, block_b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Transpose(a), rg)
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let v = self.value(a);
        let views = vec![v.view(); times];
        let out = ndarray::concatenate(Axis(0), &views).unwrap();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::TileRows(a, times), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), Op::Add(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let out = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(Cow::Owned(out), Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let out = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(Cow::Owned(out), Op::MulRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Scale(a, k), rg)
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let out = self.value(a) * self.scalar(s);
        let rg = self.rg(a) || self.rg(s);
        self.push(Cow::Owned(out), Op::ScaleBy(a, s), rg)
    }

    /// `base + gate * delta` with a `1 x 1` gate. A zero gate returns `base`
    /// bit for bit while still propagating a gradient to the gate.
    pub fn gated_add(&mut self, base: Var, delta: Var, gate: Var) -> Var {
        assert_eq!(self.shape(gate), (1, 1));
        let k = self.scalar(gate);
        let out = if k == 0.0 {
            self.value(base).clone()
        } else {
            let mut o = self.value(delta) * k;
            o += self.value(base);
            o
        };
        let rg = self.rg(base) || self.rg(delta) || self.rg(gate);
        self.push(Cow::Owned(out), Op::GatedAdd(base, delta, gate), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Softmax(a), rg)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(out.nrows());
        let c = out.ncols() as f64;
        for mut row in out.rows_mut() {
            let mean = row.sum() / c;
            row.mapv_inplace(|x| x - mean);
            let var = row.iter().map(|x| x * x).sum::<f64>() / c;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::LayerNorm(a, inv_std), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Sigmoid(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Zero-padded depthwise `k x k` convolution over row blocks laid out as
    /// a `grid_h x grid_w` raster. `w` is `k*k x c`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, grid_h: usize, grid_w: usize, k: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.dim(), (k * k, xv.ncols()));
        let n = grid_h * grid_w;
        let mut out = Array2::zeros(xv.dim());
        for_each_conv_tap(xv.nrows() / n, grid_h, grid_w, k, |dst, src, tap| {
            let mut row = out.row_mut(dst);
            Zip::from(&mut row)
                .and(&xv.row(src))
                .and(&wv.row(tap))
                .for_each(|o, &xi, &wi| *o += xi * wi);
        });
        let rg = self.rg(x) || self.rg(w);
        self.push(Cow::Owned(out), Op::DepthwiseConv { x, w, grid_h, grid_w, k }, rg)
    }

    pub fn resample(&mut self, a: Var, r: &Resampler) -> Var {
        assert_eq!(self.value(a).nrows() % r.cells(), 0);
        let out = r.apply(self.value(a).view());
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Resample(a, r.clone()), rg)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(0.0, 1.0));
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Clamp01(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::SumAll(a), rg)
    }

    /// Mean over blocks of `BCE(p, gt) + 1 - soft_dice(p, gt)`.
    ///
    /// `p` and `gt` are `(blocks * block) x 1` columns.
    pub fn seg_loss(&mut self, p: Var, gt: Array2<f64>, block: usize) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), gt.dim());
        assert_eq!(pv.ncols(), 1);
        let blocks = pv.nrows() / block;
        let mut total = 0.0;
        for b in 0..blocks {
            let r = b * block..(b + 1) * block;
            let pb = pv.slice(s![r.clone(), 0]);
            let gb = gt.slice(s![r, 0]);
            total += seg_loss_value(pb.iter().copied(), gb.iter().copied(), block);
        }
        let out = Array2::from_elem((1, 1), total / blocks as f64);
        let rg = self.rg(p);
        self.push(Cow::Owned(out), Op::SegLoss { p, gt, block }, rg)
    }

    /// Runs the reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let out = &*node.value;
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a b^T
                if self.rg(*a) {
                    acc(*a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::BlockMatMulNT(a, b, block) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let blocks = av.nrows() / block;
                let mut ga = Array2::zeros(av.dim());
                let mut gb = Array2::zeros(bv.dim());
                for i in 0..blocks {
                    let r = i * block..(i + 1) * block;
                    let gi = g.slice(s![r.clone(), ..]);
                    if self.rg(*a) {
                        ga.slice_mut(s![r.clone(), ..]).assign(&gi.dot(&bv.slice(s![r.clone(), ..])));
                    }
                    if self.rg(*b) {
                        gb.slice_mut(s![r.clone(), ..]).assign(&gi.t().dot(&av.slice(s![r, ..])));
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::BlockMatMul(a, b, ba, bb) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let blocks = av.nrows() / ba;
                let mut ga = Array2::zeros(av.dim());
                let mut gb = Array2::zeros(bv.dim());
                for i in 0..blocks {
                    let ra = i * ba..(i + 1) * ba;
                    let rb = i * bb..(i + 1) * bb;
                    let gi = g.slice(s![ra.clone(), ..]);
                    if self.rg(*a) {
                        ga.slice_mut(s![ra.clone(), ..]).assign(&gi.dot(&bv.slice(s![rb.clone(), ..]).t()));
                    }
                    if self.rg(*b) {
                        gb.slice_mut(s![rb, ..]).assign(&av.slice(s![ra, ..]).t().dot(&gi));
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::TileRows(a, times) => {
                let rows = g.nrows() / times;
                let mut d = g.slice(s![0..rows, ..]).to_owned();
                for i in 1..*times {
                    d += &g.slice(s![i * rows..(i + 1) * rows, ..]);
                }
                acc(*a, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*row));
                }
                if self.rg(*row) {
                    acc(*row, (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::ScaleBy(a, sv) => {
                if self.rg(*a) {
                    acc(*a, g * self.scalar(*sv));
                }
                if self.rg(*sv) {
                    let d = (g * self.value(*a)).sum();
                    acc(*sv, Array2::from_elem((1, 1), d));
                }
            }
            Op::GatedAdd(base, delta, gate) => {
                acc(*base, g.clone());
                if self.rg(*delta) {
                    acc(*delta, g * self.scalar(*gate));
                }
                if self.rg(*gate) {
                    let d = (g * self.value(*delta)).sum();
                    acc(*gate, Array2::from_elem((1, 1), d));
                }
            }
            Op::Softmax(a) => {
                let mut d = g * out;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| *dv -= y * dot);
                }
                acc(*a, d);
            }
            Op::LayerNorm(a, inv_std) => {
                let c = out.ncols() as f64;
                let mut d = g.clone();
                for ((mut drow, yrow), &is) in d.rows_mut().into_iter().zip(out.rows()).zip(inv_std) {
                    let mean_g = drow.sum() / c;
                    let mean_gy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &y| *dv = is * (*dv - mean_g - y * mean_gy));
                }
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = out.mapv(|y| y * (1.0 - y));
                d *= g;
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    acc(p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::DepthwiseConv { x, w, grid_h, grid_w, k } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = grid_h * grid_w;
                let mut gx = Array2::<f64>::zeros(xv.dim());
                let mut gw = Array2::<f64>::zeros(wv.dim());
                let (need_x, need_w) = (self.rg(*x), self.rg(*w));
                for_each_conv_tap(xv.nrows() / n, *grid_h, *grid_w, *k, |dst, src, tap| {
                    if need_x {
                        let mut row = gx.row_mut(src);
                        Zip::from(&mut row)
                            .and(&g.row(dst))
                            .and(&wv.row(tap))
                            .for_each(|o, &gi, &wi| *o += gi * wi);
                    }
                    if need_w {
                        let mut row = gw.row_mut(tap);
                        Zip::from(&mut row)
                            .and(&g.row(dst))
                            .and(&xv.row(src))
                            .for_each(|o, &gi, &xi| *o += gi * xi);
                    }
                });
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::Resample(a, r) => acc(*a, r.apply_transpose(g.view())),
            Op::Clamp01(a) => {
                let av = self.value(*a);
                let d = Zip::from(g).and(av).map_collect(|&gi, &x| if (0.0..=1.0).contains(&x) { gi } else { 0.0 });
                acc(*a, d);
            }
            Op::SumAll(a) => acc(*a, Array2::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::SegLoss { p, gt, block } => {
                let pv = self.value(*p);
                let blocks = pv.nrows() / block;
                let scale = g[[0, 0]] / blocks as f64;
                let mut d = Array2::zeros(pv.dim());
                for b in 0..blocks {
                    let r = b * block..(b + 1) * block;
                    let pb = pv.slice(s![r.clone(), 0]);
                    let gb = gt.slice(s![r.clone(), 0]);
                    let mut db = d.slice_mut(s![r, 0]);
                    seg_loss_grad(pb, gb, *block, scale, &mut db);
                }
                acc(*p, d);
            }
        }
    }
}

fn for_each_conv_tap(
    blocks: usize,
    grid_h: usize,
    grid_w: usize,
    k: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let half = (k / 2) as isize;
    let n = grid_h * grid_w;
    for b in 0..blocks {
        for y in 0..grid_h as isize {
            for x in 0..grid_w as isize {
                let dst = b * n + (y as usize) * grid_w + x as usize;
                for dy in 0..k as isize {
                    let sy = y + dy - half;
                    if sy < 0 || sy >= grid_h as isize {
                        continue;
                    }
                    for dx in 0..k as isize {
                        let sx = x + dx - half;
                        if sx < 0 || sx >= grid_w as isize {
                            continue;
                        }
                        let src = b * n + (sy as usize) * grid_w + sx as usize;
                        f(dst, src, (dy as usize) * k + dx as usize);
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smoothing constant of the soft Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

pub(crate) fn seg_loss_value(p: impl Iterator<Item = f64>, g: impl Iterator<Item = f64>, len: usize) -> f64 {
    let (mut bce, mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0, 0.0);
    for (p, g) in p.zip(g) {
        bce -= g * p.max(LOG_FLOOR).ln() + (1.0 - g) * (1.0 - p).max(LOG_FLOOR).ln();
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    let dice = (2.0 * inter + DICE_SMOOTH) / (sum_p + sum_g + DICE_SMOOTH);
    bce / len as f64 + 1.0 - dice
}

fn seg_loss_grad(
    p: ndarray::ArrayView1<f64>,
    g: ndarray::ArrayView1<f64>,
    len: usize,
    scale: f64,
    out: &mut ndarray::ArrayViewMut1<f64>,
) {
    let inter: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    let denom = p.sum() + g.sum() + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let n = len as f64;
    for ((o, &pi), &gi) in out.iter_mut().zip(p.iter()).zip(g.iter()) {
        let mut d = 0.0;
        if pi > LOG_FLOOR {
            d -= gi / (pi * n);
        }
        if 1.0 - pi > LOG_FLOOR {
            d += (1.0 - gi) / ((1.0 - pi) * n);
        }
        // d(1 - dice)/dp
        d -= (2.0 * gi * denom - numer) / (denom * denom);
        *o = d * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(x) for a single input matrix.
    fn check(x0: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let analytic = {
            let mut t = Tape::new();
            let x = t.input(x0.clone());
            let y = build(&mut t, x);
            let root = t.sum_all(y);
            t.backward(root).get(x).cloned().unwrap()
        };
        let eval = |xv: Array2<f64>| {
            let mut t = Tape::new();
            let x = t.input(xv);
            let y = build(&mut t, x);
            t.value(y).sum()
        };
        let eps = 1e-5;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut plus = x0.clone();
            plus[[r, c]] += eps;
            let mut minus = x0.clone();
            minus[[r, c]] -= eps;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
            let a = analytic[[r, c]];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry ({r},{c}): analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_and_row_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 4, 3);
        let row = random(&mut rng, 1, 3);
        let other = random(&mut rng, 5, 3);
        let x0 = random(&mut rng, 5, 4);
        check(x0.clone(), |t, x| {
            let w = t.constant(w.clone());
            let y = t.matmul(x, w);
            let row = t.constant(row.clone());
            let y = t.add_row(y, row);
            let y = t.mul_row(y, row);
            let y = t.gelu(y);
            let y = t.layer_norm(y);
            let o = t.constant(other.clone());
            let y = t.mul(y, o);
            let y = t.softmax_rows(y);
            t.sigmoid(y)
        });
    }

    #[test]
    fn block_attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random(&mut rng, 6, 4);
        let v = random(&mut rng, 6, 2);
        check(random(&mut rng, 6, 4), |t, x| {
            let k = t.constant(k.clone());
            let v = t.constant(v.clone());
            let s = t.block_matmul_nt(x, k, 3);
            let p = t.softmax_rows(s);
            let o = t.block_matmul(p, v, 3, 3);
            let q = t.slice_cols(x, 1, 2);
            let q = t.tile_rows(q, 2);
            let q = t.scale(q, 0.5);
            let o2 = t.tile_rows(o, 2);
            let c = t.concat_cols(&[o2, q]);
            t.add(c, c)
        });
        // gradient w.r.t. the right operand
        let a = random(&mut rng, 6, 4);
        check(random(&mut rng, 6, 4), |t, x| {
            let a = t.constant(a.clone());
            let s = t.block_matmul_nt(a, x, 2);
            let s2 = t.block_matmul(s, x, 2, 2);
            t.transpose(s2)
        });
    }

    #[test]
    fn depthwise_conv_and_resample_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 9, 2);
        check(random(&mut rng, 2 * 12, 2), |t, x| {
            let w = t.constant(w.clone());
            t.depthwise_conv(x, w, 3, 4, 3)
        });
        let x = random(&mut rng, 2 * 12, 2);
        check(random(&mut rng, 9, 2), |t, w| {
            let x = t.constant(x.clone());
            t.depthwise_conv(x, w, 3, 4, 3)
        });
        let r = Resampler::bilinear(3, 4, 7, 9);
        check(random(&mut rng, 24, 3), |t, x| t.resample(x, &r));
    }

    #[test]
    fn scale_by_and_matmul_nt_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 3, 4);
        check(random(&mut rng, 1, 1), |t, s| {
            let a = t.constant(a.clone());
            t.scale_by(a, s)
        });
        let base = random(&mut rng, 3, 4);
        check(random(&mut rng, 1, 1), |t, s| {
            let a = t.constant(a.clone());
            let b = t.constant(base.clone());
            t.gated_add(b, a, s)
        });
        let gate = Array2::from_elem((1, 1), 0.7);
        check(random(&mut rng, 3, 4), |t, x| {
            let g = t.constant(gate.clone());
            t.gated_add(x, x, g)
        });
        let b = random(&mut rng, 5, 4);
        check(random(&mut rng, 3, 4), |t, x| {
            let b = t.constant(b.clone());
            let y = t.matmul_nt(x, b);
            let y2 = t.matmul_nt(b, x);
            let y2 = t.transpose(y2);
            let y = t.add(y, y2);
            t.scale(y, 0.5)
        });
    }

    #[test]
    fn seg_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = Array2::from_shape_fn((8, 1), |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let p0 = Array2::from_shape_fn((8, 1), |_| rng.random_range(0.1..0.9));
        check(p0, |t, p| t.seg_loss(p, gt.clone(), 4));
    }

    #[test]
    fn bilinear_resample_preserves_constants_and_identity() {
        let r = Resampler::bilinear(4, 4, 16, 16);
        let out = r.apply(Array2::from_elem((16, 2), 0.3).view());
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let same = Resampler::bilinear(3, 3, 3, 3);
        let x = array![[1.0], [2.0], [3.0], [4.0], [5.0], [6.0], [7.0], [8.0], [9.0]];
        assert_eq!(same.apply(x.view()), x);
    }

    #[test]
    fn frozen_inputs_receive_no_gradient() {
        let w = Array2::from_elem((2, 2), 1.0);
        let mut t = Tape::new();
        let wv = t.param(&w, false);
        let x = t.input(Array2::from_elem((1, 2), 2.0));
        let y = t.matmul(x, wv);
        let root = t.sum_all(y);
        let g = t.backward(root);
        assert!(g.get(wv).is_none());
        assert_eq!(g.get(x).unwrap(), &array![[2.0, 2.0]]);
    }
}
