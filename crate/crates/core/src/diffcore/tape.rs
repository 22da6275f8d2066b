//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one node holding its output value and, when
//! tracking is on, the data its backward rule needs. `backward` replays the
//! recorded nodes in reverse order, visiting each reachable node once.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
///
/// `input_grads[i]` arrives zeroed with the length of input `i`; the rule adds
/// the vector-Jacobian product for `output_grad` into it.
pub trait CustomBackward: Send + Sync {
    fn backward(
        &self,
        inputs: &[&[f64]],
        output_grad: &[f64],
        input_grads: &mut [Vec<f64>],
    );
}

enum Op {
    Leaf,
    /// Recorded with tracking disabled; gradients stop here.
    Untracked,
    Conv2d { x: Var, w: Var, b: Var, padding: usize },
    Sigmoid { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Add { a: Var, b: Var },
    ConcatChannels { inputs: Vec<Var> },
    Upsample2x { x: Var },
    MaxPool2x { x: Var, argmax: Vec<usize> },
    Mean { x: Var },
    L1Loss { x: Var, target: Vec<f64> },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records a straight-line computation for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    tracking: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), tracking: true }
    }

    /// A tape that computes values only; `backward` on it is an error.
    pub fn without_grad() -> Self {
        Tape { nodes: Vec::new(), tracking: false }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if self.tracking || matches!(op, Op::Leaf) { op } else { Op::Untracked };
        self.nodes.push(Node { shape, value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf value (parameter or input).
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Copies a recorded value out as a tensor (without gradient).
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn chw(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(contract!("{what}: expected a [C,H,W] tensor, got shape {s:?}")),
        }
    }

    /// 2D cross-correlation of `x: [C_in,H,W]` with `w: [C_out,C_in,k,k]`
    /// plus per-channel bias, zero padding on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        let (cin, h, wd) = self.chw(x, "conv2d input")?;
        let (cout, wcin, k) = match self.shape(w) {
            &[co, ci, kh, kw] if kh == kw => (co, ci, kh),
            s => return Err(contract!("conv2d weights: expected [C_out,C_in,k,k], got {s:?}")),
        };
        if wcin != cin {
            return Err(contract!(
                "conv2d: input channel dimension C_in is {cin} but weights expect {wcin}"
            ));
        }
        if k % 2 == 0 {
            return Err(contract!("conv2d: kernel size k must be odd, got {k}"));
        }
        if self.shape(b) != [cout] {
            return Err(contract!(
                "conv2d: bias shape {:?} does not match C_out = {cout}",
                self.shape(b)
            ));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(contract!(
                "conv2d: output would be empty (H={h}, W={wd}, k={k}, padding={padding})"
            ));
        }
        let geo = ConvGeometry { cin, h, w: wd, cout, k, padding };
        let out = conv_forward(&geo, self.value(x), self.value(w), self.value(b));
        Ok(self.push(vec![cout, geo.ho(), geo.wo()], out, Op::Conv2d { x, w, b, padding }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::LeakyRelu { x, slope })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(contract!(
                "add: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }))
    }

    /// Stacks `[C_i,H,W]` tensors along the channel axis, in order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| contract!("concat_channels: no inputs"))?;
        let (_, h, w) = self.chw(first, "concat_channels")?;
        let mut channels = 0;
        let mut out = Vec::new();
        for &v in inputs {
            let (c, hh, ww) = self.chw(v, "concat_channels")?;
            if hh != h {
                return Err(contract!("concat_channels: height H mismatch ({hh} vs {h})"));
            }
            if ww != w {
                return Err(contract!("concat_channels: width W mismatch ({ww} vs {w})"));
            }
            channels += c;
            out.extend_from_slice(self.value(v));
        }
        Ok(self.push(vec![channels, h, w], out, Op::ConcatChannels { inputs: inputs.to_vec() }))
    }

    /// Nearest-neighbour upsampling doubling H and W.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "upsample_nearest2x")?;
        let src = self.value(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(vec![c, h2, w2], out, Op::Upsample2x { x }))
    }

    /// 2×2 max pooling with stride 2; H and W must be even. Ties resolve to
    /// the first element in row-major block order.
    pub fn max_pool2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x, "max_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(contract!("max_pool2x: H={h} and W={w} must both be even"));
        }
        let src = self.value(x);
        let (h2, w2) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * h2 * w2);
        let mut argmax = Vec::with_capacity(c * h2 * w2);
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let mut best = (ch * h + 2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let saved = if self.tracking { argmax } else { Vec::new() };
        Ok(self.push(vec![c, h2, w2], out, Op::MaxPool2x { x, argmax: saved }))
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(contract!("mean of an empty tensor"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(vec![1], vec![m], Op::Mean { x }))
    }

    /// Mean absolute difference between `x` and a constant target. The
    /// subgradient at exact ties is 0.
    pub fn l1_loss(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(contract!("l1_loss: empty batch"));
        }
        if v.len() != target.len() {
            return Err(contract!(
                "l1_loss: {} predictions but {} targets",
                v.len(),
                target.len()
            ));
        }
        let m = v.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / v.len() as f64;
        Ok(self.push(vec![1], vec![m], Op::L1Loss { x, target: target.to_vec() }))
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(contract!(
                "custom op: shape {shape:?} does not match {} values",
                value.len()
            ));
        }
        Ok(self.push(shape, value, Op::Custom { inputs: inputs.to_vec(), rule }))
    }

    /// Back-propagates from a one-element output, accumulating into the
    /// gradient of every node that contributes to it.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if !self.tracking {
            return Err(contract!("backward on a tape recorded without gradient tracking"));
        }
        if self.node(output).value.len() != 1 {
            return Err(contract!(
                "backward requires a scalar output, got shape {:?}",
                self.node(output).shape
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if let Some(a) = a {
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&a).for_each(|(x, y)| *x += y),
                    None => node.grad = Some(a),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Untracked => {}
            Op::Conv2d { x, w, b, padding } => {
                let (cin, h, wd) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (cout, k) = (self.shape(*w)[0], self.shape(*w)[2]);
                let geo = ConvGeometry { cin, h, w: wd, cout, k, padding: *padding };
                let (dx, dw, db) = conv_backward(&geo, self.value(*x), self.value(*w), g);
                accumulate(adj, *x, &dx);
                accumulate(adj, *w, &dw);
                accumulate(adj, *b, &db);
            }
            Op::Sigmoid { x } => {
                let d: Vec<f64> =
                    node.value.iter().zip(g).map(|(&y, &gy)| gy * y * (1.0 - y)).collect();
                accumulate(adj, *x, &d);
            }
            Op::LeakyRelu { x, slope } => {
                let d: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gy)| if v > 0.0 { gy } else { slope * gy })
                    .collect();
                accumulate(adj, *x, &d);
            }
            Op::Add { a, b } => {
                accumulate(adj, *a, g);
                accumulate(adj, *b, g);
            }
            Op::ConcatChannels { inputs } => {
                let mut start = 0;
                for v in inputs {
                    let n = self.value(*v).len();
                    accumulate(adj, *v, &g[start..start + n]);
                    start += n;
                }
            }
            Op::Upsample2x { x } => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (h2, w2) = (2 * h, 2 * w);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            d[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                        }
                    }
                }
                accumulate(adj, *x, &d);
            }
            Op::MaxPool2x { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (&src, &gy) in argmax.iter().zip(g) {
                    d[src] += gy;
                }
                accumulate(adj, *x, &d);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let d = vec![g[0] / n as f64; n];
                accumulate(adj, *x, &d);
            }
            Op::L1Loss { x, target } => {
                let n = target.len() as f64;
                let d: Vec<f64> = self
                    .value(*x)
                    .iter()
                    .zip(target)
                    .map(|(a, b)| {
                        let r = a - b;
                        let s = if r > 0.0 {
                            1.0
                        } else if r < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[0] * s / n
                    })
                    .collect();
                accumulate(adj, *x, &d);
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&[f64]> = inputs.iter().map(|v| self.value(*v)).collect();
                let mut grads: Vec<Vec<f64>> = values.iter().map(|v| vec![0.0; v.len()]).collect();
                rule.backward(&values, g, &mut grads);
                for (v, d) in inputs.iter().zip(&grads) {
                    accumulate(adj, *v, d);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut adj[v.0] {
        Some(a) => a.iter_mut().zip(d).for_each(|(x, y)| *x += y),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

/// Numerically safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    padding: usize,
}

impl ConvGeometry {
    fn ho(&self) -> usize {
        self.h + 2 * self.padding + 1 - self.k
    }
    fn wo(&self) -> usize {
        self.w + 2 * self.padding + 1 - self.k
    }
    /// Output index range `[lo, hi)` whose tap `t` lands inside `[0, n)`.
    fn valid(&self, t: usize, n: usize, n_out: usize) -> (usize, usize) {
        let p = self.padding;
        let lo = p.saturating_sub(t);
        let hi = (n + p).saturating_sub(t).min(n_out);
        (lo, hi.max(lo))
    }
}

fn conv_forward(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (ho, wo, k, p) = (g.ho(), g.wo(), g.k, g.padding);
    let plane = ho * wo;
    let mut out = vec![0.0; g.cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(co, dst)| {
        dst.fill(b[co]);
        for ci in 0..g.cin {
            let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, g.h, ho);
                for kx in 0..k {
                    let wv = w[((co * g.cin + ci) * k + ky) * k + kx];
                    let (x0, x1) = g.valid(kx, g.w, wo);
                    for y in y0..y1 {
                        let sy = y + ky - p;
                        let drow = &mut dst[y * wo + x0..y * wo + x1];
                        let srow = &src[sy * g.w + x0 + kx - p..sy * g.w + x1 + kx - p];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo, k, p) = (g.ho(), g.wo(), g.k, g.padding);
    let plane = ho * wo;
    let in_plane = g.h * g.w;

    let db: Vec<f64> = (0..g.cout).map(|co| gout[co * plane..(co + 1) * plane].iter().sum()).collect();

    let per_out = g.cin * k * k;
    let mut dw = vec![0.0; g.cout * per_out];
    dw.par_chunks_mut(per_out).enumerate().for_each(|(co, dst)| {
        let go = &gout[co * plane..(co + 1) * plane];
        for ci in 0..g.cin {
            let src = &x[ci * in_plane..(ci + 1) * in_plane];
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, g.h, ho);
                for kx in 0..k {
                    let (x0, x1) = g.valid(kx, g.w, wo);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - p;
                        let grow = &go[y * wo + x0..y * wo + x1];
                        let srow = &src[sy * g.w + x0 + kx - p..sy * g.w + x1 + kx - p];
                        for (a, b) in grow.iter().zip(srow) {
                            acc += a * b;
                        }
                    }
                    dst[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let mut dx = vec![0.0; g.cin * in_plane];
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(ci, dst)| {
        for co in 0..g.cout {
            let go = &gout[co * plane..(co + 1) * plane];
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, g.h, ho);
                for kx in 0..k {
                    let wv = w[((co * g.cin + ci) * k + ky) * k + kx];
                    let (x0, x1) = g.valid(kx, g.w, wo);
                    for y in y0..y1 {
                        let sy = y + ky - p;
                        let grow = &go[y * wo + x0..y * wo + x1];
                        let drow = &mut dst[sy * g.w + x0 + kx - p..sy * g.w + x1 + kx - p];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    });
    (dx, dw, db)
}
