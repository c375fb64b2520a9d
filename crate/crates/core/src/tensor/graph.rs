use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` is C×1×1 against `a` of C×H×W.
    Channel,
    /// `b` is 1×H×W against `a` of C×H×W.
    Spatial,
}

#[derive(Clone, Copy, Debug)]
enum DenseLayout {
    /// Rank-1 vector or rank-3 C×H×W map: the feature axis is the first axis.
    Columns { positions: usize },
    /// Rank-2 N×in: one vector per row.
    Rows { rows: usize },
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Mul,
}

enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        layout: DenseLayout,
    },
    Relu(Var),
    Sigmoid(Var),
    /// Average or max reduction; `routes[j]` lists the input indices feeding
    /// output element `j`, and in max mode `winners[j]` is the one selected.
    Pool {
        input: Var,
        mode: PoolMode,
        routes: Vec<Vec<usize>>,
        winners: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Bce {
        probs: Var,
        labels: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind: Binary::Add, .. } => "add",
            Op::Binary { kind: Binary::Mul, .. } => "mul",
            Op::Conv2d { .. } => "conv2d",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Pool { .. } => "pool",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Bce { .. } => "bce",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probabilities are clamped into this band before taking logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Append-only tape of tensor operations.
///
/// Every node's inputs are recorded before it, so reverse insertion order is a
/// valid topological order for backpropagation.
pub struct Graph {
    nodes: Vec<Node>,
    sigmoid_grad_scale: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            sigmoid_grad_scale: 1.0,
        }
    }

    /// Deliberately corrupts the sigmoid backward rule by `factor`.
    /// Only for exercising gradient-check negative controls.
    #[doc(hidden)]
    pub fn with_sigmoid_grad_fault(mut self, factor: f64) -> Self {
        self.sigmoid_grad_scale = factor;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant that receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient `backward` reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Shape, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn check(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        match vars.iter().find(|v| v.0 >= self.nodes.len()) {
            Some(v) => Err(Error::Graph(format!("{op}: {v:?} does not belong to this graph"))),
            None => Ok(()),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    /// Element-wise product, with channel (C×1×1) or spatial (1×H×W)
    /// broadcasting of `b` against a C×H×W `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Mul => "mul",
        };
        self.check(op_name, &[a, b])?;
        let av = self.value(a);
        let bv = self.value(b);
        let bcast = broadcast_rule(av.dims(), bv.dims()).ok_or_else(|| {
            Error::shape(op_name, format!("cannot broadcast {} against {}", bv.shape(), av.shape()))
        })?;
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data = map_broadcast(av, bv, bcast, f);
        let shape = av.shape().clone();
        self.push(shape, data, Op::Binary { kind, a, b, bcast }, &[a, b])
    }

    /// Zero-padded cross-correlation of a C_in×H×W input with a
    /// C_out×C_in×kH×kW kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        self.check("conv2d", &[input, kernel, bias])?;
        let x = self.value(input).dims();
        let k = self.value(kernel).dims();
        let b = self.value(bias).dims();
        if x.len() != 3 || k.len() != 4 || b.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("expected C×H×W input, 4-d kernel, 1-d bias; got {x:?}, {k:?}, {b:?}"),
            ));
        }
        let (c_in, h, w) = (x[0], x[1], x[2]);
        let (c_out, k_cin, kh, kw) = (k[0], k[1], k[2], k[3]);
        if k_cin != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {k_cin} input channels, input has {c_in}"),
            ));
        }
        if b[0] != c_out {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} for {c_out} output channels", b[0]),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidConfig(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be at least 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("{kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            padding,
            stride,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let shape = Shape(vec![c_out, geom.out_h, geom.out_w]);
        self.push(
            shape,
            data,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        )
    }

    /// Affine layer with an out×in weight.
    ///
    /// Rank-1 and rank-2 inputs are mapped along their last axis. A rank-3
    /// C×H×W input (with in = C) is mapped along the channel axis at every
    /// spatial position, producing out×H×W.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check("dense", &[input, weight, bias])?;
        let x = self.value(input).dims().to_vec();
        let wd = self.value(weight).dims();
        let bd = self.value(bias).dims();
        if wd.len() != 2 || bd.len() != 1 || bd[0] != wd[0] {
            return Err(Error::shape(
                "dense",
                format!("weight {wd:?} and bias {bd:?} are inconsistent"),
            ));
        }
        let (out_dim, in_dim) = (wd[0], wd[1]);
        let (layout, feature_extent, out_shape) = match x.len() {
            1 => (DenseLayout::Columns { positions: 1 }, x[0], vec![out_dim]),
            2 => (DenseLayout::Rows { rows: x[0] }, x[1], vec![x[0], out_dim]),
            3 => (
                DenseLayout::Columns {
                    positions: x[1] * x[2],
                },
                x[0],
                vec![out_dim, x[1], x[2]],
            ),
            _ => {
                return Err(Error::shape("dense", format!("unsupported input rank {}", x.len())));
            }
        };
        if feature_extent != in_dim {
            return Err(Error::shape(
                "dense",
                format!("input feature extent {feature_extent} but weight expects {in_dim}"),
            ));
        }
        let (xv, wv, bv) = (self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let data = match layout {
            DenseLayout::Columns { positions } => {
                kernels::dense_cols_forward(xv, wv, bv, in_dim, out_dim, positions)
            }
            DenseLayout::Rows { rows } => kernels::dense_rows_forward(xv, wv, bv, in_dim, out_dim, rows),
        };
        self.push(
            Shape(out_shape),
            data,
            Op::Dense {
                input,
                weight,
                bias,
                layout,
            },
            &[input, weight, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check("relu", &[x])?;
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let shape = v.shape().clone();
        self.push(shape, data, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check("sigmoid", &[x])?;
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let shape = v.shape().clone();
        self.push(shape, data, Op::Sigmoid(x), &[x])
    }

    /// Per-channel mean or max over all spatial positions: C×H×W → C×1×1.
    pub fn spatial_pool(&mut self, mode: PoolMode, f: Var) -> Result<Var> {
        self.check("spatial_pool", &[f])?;
        let (c, h, w) = rank3(self.value(f), "spatial_pool")?;
        let plane = h * w;
        let routes: Vec<Vec<usize>> = (0..c).map(|ch| (ch * plane..(ch + 1) * plane).collect()).collect();
        self.pool(f, mode, routes, vec![c, 1, 1])
    }

    /// Per-position mean or max across channels: C×H×W → 1×H×W.
    pub fn channel_pool(&mut self, mode: PoolMode, f: Var) -> Result<Var> {
        self.check("channel_pool", &[f])?;
        let (c, h, w) = rank3(self.value(f), "channel_pool")?;
        let plane = h * w;
        let routes: Vec<Vec<usize>> = (0..plane).map(|p| (0..c).map(|ch| ch * plane + p).collect()).collect();
        self.pool(f, mode, routes, vec![1, h, w])
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, f: Var) -> Result<Var> {
        self.check("max_pool2", &[f])?;
        let (c, h, w) = rank3(self.value(f), "max_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape("max_pool2", format!("{h}x{w} map too small to pool")));
        }
        let mut routes = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    routes.push(vec![base, base + 1, base + w, base + w + 1]);
                }
            }
        }
        self.pool(f, PoolMode::Max, routes, vec![c, oh, ow])
    }

    fn pool(&mut self, f: Var, mode: PoolMode, routes: Vec<Vec<usize>>, out: Vec<usize>) -> Result<Var> {
        let src = self.value(f).data();
        let (data, winners): (Vec<f64>, Vec<usize>) = match mode {
            PoolMode::Avg => (
                routes.iter().map(|r| shifted_mean(r.iter().map(|&i| src[i]))).collect(),
                Vec::new(),
            ),
            PoolMode::Max => routes
                .iter()
                .map(|r| {
                    let (best, v) = kernels::first_argmax(r.iter().map(|&i| (i, src[i])));
                    (v, best)
                })
                .unzip(),
        };
        self.push(
            Shape(out),
            data,
            Op::Pool {
                input: f,
                mode,
                routes,
                winners,
            },
            &[f],
        )
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        self.check("reshape", &[x])?;
        let v = self.value(x).reshape(dims)?;
        let shape = v.shape().clone();
        self.push(shape, v.to_vec(), Op::Reshape(x), &[x])
    }

    /// Row-major flatten to a single axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, &[n])
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.check("concat", parts)?;
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let tail = self.value(*first).dims()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.dims()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{} does not match trailing extents {tail:?}", v.shape()),
                ));
            }
            lead += v.dims()[0];
            data.extend_from_slice(v.data());
        }
        let mut dims = vec![lead];
        dims.extend(tail);
        let shape = Shape::new(&dims)?;
        self.push(shape, data, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check("sum", &[x])?;
        let s = self.value(x).data().iter().sum();
        self.push(Shape(vec![1]), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check("mean", &[x])?;
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Shape(vec![1]), vec![m], Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`; the clamp
    /// passes no gradient where it is active.
    pub fn bce(&mut self, probs: Var, labels: &Tensor) -> Result<Var> {
        self.check("bce", &[probs])?;
        let p = self.value(probs);
        if p.numel() != labels.numel() {
            return Err(Error::shape(
                "bce",
                format!("{} probabilities for {} labels", p.numel(), labels.numel()),
            ));
        }
        if let Some(&bad) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidLabel { value: bad });
        }
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&pi, &y)| {
                let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        self.push(
            Shape(vec![1]),
            vec![loss],
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        )
    }

    /// Exact change in `target` when each listed leaf moves by its delta,
    /// replayed forward over the recorded tape.
    ///
    /// Each op maps its inputs' changes to its output's change with rules that
    /// avoid subtracting nearly equal values, so the result keeps full relative
    /// precision even when the change is far below the rounding error of the
    /// values themselves. The backward rules are not involved.
    pub(crate) fn secant_change(&self, changes: &[(Var, &[f64])], target: Var) -> Result<f64> {
        self.check("secant_change", &[target])?;
        let mut deltas: Vec<Option<Vec<f64>>> = vec![None; target.0 + 1];
        let mut start = target.0 + 1;
        for &(leaf, delta) in changes {
            self.check("secant_change", &[leaf])?;
            if !matches!(self.nodes[leaf.0].op, Op::Leaf) || delta.len() != self.value(leaf).numel() {
                return Err(Error::Graph(format!("{leaf:?} is not a leaf of {} elements", delta.len())));
            }
            if leaf <= target {
                deltas[leaf.0] = Some(delta.to_vec());
                start = start.min(leaf.0 + 1);
            }
        }
        for idx in start..=target.0 {
            let op = &self.nodes[idx].op;
            if let Some(d) = self.forward_delta(op, &deltas) {
                if d.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical { op: op.name() });
                }
                deltas[idx] = Some(d);
            }
        }
        Ok(deltas[target.0].as_ref().map_or(0.0, |d| d.iter().sum()))
    }

    fn forward_delta(&self, op: &Op, deltas: &[Option<Vec<f64>>]) -> Option<Vec<f64>> {
        let d = |v: &Var| deltas[v.0].as_deref();
        let val = |v: &Var| self.value(*v).data();
        match op {
            Op::Leaf => None,
            Op::Pool {
                input,
                mode,
                routes,
                winners,
            } => d(input).map(|df| {
                let src = val(input);
                routes
                    .iter()
                    .enumerate()
                    .map(|(j, r)| match mode {
                        PoolMode::Avg => r.iter().map(|&i| df[i]).sum::<f64>() / r.len() as f64,
                        PoolMode::Max => {
                            let lo = winners[j];
                            let (hi, _) = kernels::first_argmax(r.iter().map(|&i| (i, src[i] + df[i])));
                            (src[hi] - src[lo]) + df[hi]
                        }
                    })
                    .collect()
            }),
            Op::Binary { kind, a, b, bcast } => {
                let (da, db) = (d(a), d(b));
                if da.is_none() && db.is_none() {
                    return None;
                }
                let dims = self.value(*a).dims();
                let plane = if dims.len() == 3 { dims[1] * dims[2] } else { 1 };
                let (av, bv) = (val(a), val(b));
                Some(
                    (0..av.len())
                        .map(|i| {
                            let r = match bcast {
                                Broadcast::Same => i,
                                Broadcast::Channel => i / plane,
                                Broadcast::Spatial => i % plane,
                            };
                            let dx = da.map_or(0.0, |v| v[i]);
                            let dy = db.map_or(0.0, |v| v[r]);
                            match kind {
                                Binary::Add => dx + dy,
                                Binary::Mul => dx * bv[r] + av[i] * dy + dx * dy,
                            }
                        })
                        .collect(),
                )
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) = (d(input), d(kernel), d(bias));
                if dx.is_none() && dk.is_none() && db.is_none() {
                    return None;
                }
                let zero_bias = vec![0.0; geom.c_out];
                let mut acc = vec![0.0; geom.out_len()];
                if let Some(dx) = dx {
                    let k_hi = shifted(val(kernel), dk);
                    add_into(&mut acc, &kernels::conv2d_forward(geom, dx, &k_hi, &zero_bias));
                }
                if let Some(dk) = dk {
                    add_into(&mut acc, &kernels::conv2d_forward(geom, val(input), dk, &zero_bias));
                }
                if let Some(db) = db {
                    let plane = geom.out_h * geom.out_w;
                    for (o, chunk) in acc.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += db[o]);
                    }
                }
                Some(acc)
            }
            Op::Dense {
                input,
                weight,
                bias,
                layout,
            } => {
                let (dx, dw, db) = (d(input), d(weight), d(bias));
                if dx.is_none() && dw.is_none() && db.is_none() {
                    return None;
                }
                let wd = self.value(*weight).dims();
                let (out_dim, in_dim) = (wd[0], wd[1]);
                let zero_bias = vec![0.0; out_dim];
                let apply = |x: &[f64], w: &[f64]| match layout {
                    DenseLayout::Columns { positions } => {
                        kernels::dense_cols_forward(x, w, &zero_bias, in_dim, out_dim, *positions)
                    }
                    DenseLayout::Rows { rows } => kernels::dense_rows_forward(x, w, &zero_bias, in_dim, out_dim, *rows),
                };
                let mut acc = vec![0.0; self.value(*input).numel() / in_dim * out_dim];
                if let Some(dx) = dx {
                    add_into(&mut acc, &apply(dx, &shifted(val(weight), dw)));
                }
                if let Some(dw) = dw {
                    add_into(&mut acc, &apply(val(input), dw));
                }
                if let Some(db) = db {
                    for (i, v) in acc.iter_mut().enumerate() {
                        *v += match layout {
                            DenseLayout::Columns { positions } => db[i / positions],
                            DenseLayout::Rows { .. } => db[i % out_dim],
                        };
                    }
                }
                Some(acc)
            }
            Op::Relu(x) => d(x).map(|dx| {
                val(x)
                    .iter()
                    .zip(dx)
                    .map(|(&a, &da)| match (a > 0.0, a + da > 0.0) {
                        (true, true) => da,
                        (false, false) => 0.0,
                        _ => (a + da).max(0.0) - a.max(0.0),
                    })
                    .collect()
            }),
            // σ(a + d) − σ(a) = −σ(a + d) · σ(−a) · expm1(−d)
            Op::Sigmoid(x) => d(x).map(|dx| {
                val(x)
                    .iter()
                    .zip(dx)
                    .map(|(&a, &da)| -sigmoid(a + da) * sigmoid(-a) * (-da).exp_m1())
                    .collect()
            }),
            Op::Reshape(x) => d(x).map(<[f64]>::to_vec),
            Op::Concat(parts) => {
                if parts.iter().all(|p| d(p).is_none()) {
                    return None;
                }
                let mut out = Vec::new();
                for p in parts {
                    match d(p) {
                        Some(dp) => out.extend_from_slice(dp),
                        None => out.extend(std::iter::repeat_n(0.0, self.value(*p).numel())),
                    }
                }
                Some(out)
            }
            Op::Sum(x) => d(x).map(|dx| vec![dx.iter().sum()]),
            Op::Mean(x) => d(x).map(|dx| vec![dx.iter().sum::<f64>() / dx.len() as f64]),
            Op::Bce { probs, labels } => d(probs).map(|dp| {
                let p = val(probs);
                let band = BCE_CLAMP..=1.0 - BCE_CLAMP;
                let total: f64 = p
                    .iter()
                    .zip(dp)
                    .zip(labels)
                    .map(|((&pi, &di), &y)| {
                        let lo = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        let step = if band.contains(&pi) && band.contains(&(pi + di)) {
                            di
                        } else {
                            (pi + di).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP) - lo
                        };
                        if y == 1.0 {
                            -(step / lo).ln_1p()
                        } else {
                            -(-step / (1.0 - lo)).ln_1p()
                        }
                    })
                    .sum();
                vec![total / p.len() as f64]
            }),
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Every parameter leaf gets an
    /// entry; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check("backward", &[loss])?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, g, idx, &mut grads, &mut out)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.entry(Var(i)).or_insert_with(|| {
                    Tensor::from_parts(node.value.shape().clone(), vec![0.0; node.value.numel()])
                });
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node,
        g: Vec<f64>,
        idx: usize,
        grads: &mut [Option<Vec<f64>>],
        out: &mut BTreeMap<Var, Tensor>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {
                out.insert(Var(idx), Tensor::from_parts(node.value.shape().clone(), g));
            }
            Op::Binary { kind, a, b, bcast } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.wants(*a) {
                    let ga = match kind {
                        Binary::Add => g.clone(),
                        Binary::Mul => map_broadcast_slice(&g, av.dims(), bv.data(), *bcast, |gi, bi| gi * bi),
                    };
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let contrib: Vec<f64> = match kind {
                        Binary::Add => g,
                        Binary::Mul => g.iter().zip(av.data()).map(|(gi, ai)| gi * ai).collect(),
                    };
                    accumulate(grads, *b, reduce_broadcast(&contrib, av.dims(), bv.numel(), *bcast));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want = [self.wants(*input), self.wants(*kernel), self.wants(*bias)];
                let r = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    &g,
                    want,
                );
                accumulate_opt(grads, *input, r.input);
                accumulate_opt(grads, *kernel, r.kernel);
                accumulate_opt(grads, *bias, r.bias);
            }
            Op::Dense {
                input,
                weight,
                bias,
                layout,
            } => {
                let want = [self.wants(*input), self.wants(*weight), self.wants(*bias)];
                let xv = self.value(*input).data();
                let wd = self.value(*weight).dims();
                let (out_dim, in_dim) = (wd[0], wd[1]);
                let wv = self.value(*weight).data();
                let r = match layout {
                    DenseLayout::Columns { positions } => {
                        kernels::dense_cols_backward(xv, wv, &g, in_dim, out_dim, *positions, want)
                    }
                    DenseLayout::Rows { rows } => {
                        kernels::dense_rows_backward(xv, wv, &g, in_dim, out_dim, *rows, want)
                    }
                };
                accumulate_opt(grads, *input, r.input);
                accumulate_opt(grads, *weight, r.weight);
                accumulate_opt(grads, *bias, r.bias);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let s = node.value.data();
                let scale = self.sigmoid_grad_scale;
                let gx = g
                    .iter()
                    .zip(s)
                    .map(|(gi, si)| gi * si * (1.0 - si) * scale)
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Pool {
                input,
                mode,
                routes,
                winners,
            } => {
                let mut gx = vec![0.0; self.value(*input).numel()];
                for (j, (gj, route)) in g.iter().zip(routes).enumerate() {
                    match mode {
                        PoolMode::Max => gx[winners[j]] += gj,
                        PoolMode::Avg => {
                            let share = gj / route.len() as f64;
                            for &i in route {
                                gx[i] += share;
                            }
                        }
                    }
                }
                accumulate(grads, *input, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if self.wants(*p) {
                        accumulate(grads, *p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Bce { probs, labels } => {
                let p = self.value(*probs).data();
                let n = p.len() as f64;
                let gp = p
                    .iter()
                    .zip(labels)
                    .map(|(&pi, &y)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pi) {
                            0.0
                        } else {
                            g[0] * (-y / pi + (1.0 - y) / (1.0 - pi)) / n
                        }
                    })
                    .collect();
                accumulate(grads, *probs, gp);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rank3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.dims() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::shape(op, format!("expected C×H×W, got {other:?}"))),
    }
}

fn broadcast_rule(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Same);
    }
    match (a, b) {
        (&[c, _, _], &[bc, 1, 1]) if bc == c => Some(Broadcast::Channel),
        (&[_, h, w], &[1, bh, bw]) if bh == h && bw == w => Some(Broadcast::Spatial),
        _ => None,
    }
}

fn map_broadcast(a: &Tensor, b: &Tensor, bcast: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    map_broadcast_slice(a.data(), a.dims(), b.data(), bcast, f)
}

/// Applies `f(a[i], b[resolve(i)])` for every index of the full-shape operand.
fn map_broadcast_slice(
    a: &[f64],
    a_dims: &[usize],
    b: &[f64],
    bcast: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    match bcast {
        Broadcast::Same => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
        Broadcast::Channel => {
            let plane = a_dims[1] * a_dims[2];
            a.chunks(plane)
                .zip(b)
                .flat_map(|(chunk, &bv)| chunk.iter().map(move |&x| (x, bv)))
                .map(|(x, y)| f(x, y))
                .collect()
        }
        Broadcast::Spatial => {
            let plane = a_dims[1] * a_dims[2];
            a.chunks(plane)
                .flat_map(|chunk| chunk.iter().zip(b).map(|(x, y)| (*x, *y)))
                .map(|(x, y)| f(x, y))
                .collect()
        }
    }
}

/// Sums a full-shape gradient down onto the broadcast operand's extents.
fn reduce_broadcast(g: &[f64], a_dims: &[usize], b_len: usize, bcast: Broadcast) -> Vec<f64> {
    match bcast {
        Broadcast::Same => g.to_vec(),
        Broadcast::Channel => {
            let plane = a_dims[1] * a_dims[2];
            g.chunks(plane).map(|c| c.iter().sum()).collect()
        }
        Broadcast::Spatial => {
            let plane = a_dims[1] * a_dims[2];
            let mut out = vec![0.0; b_len];
            for chunk in g.chunks(plane) {
                for (o, v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            out
        }
    }
}

/// Mean computed relative to the first element, so a constant input comes
/// back bit-exact.
fn shifted_mean(mut values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    let first = values.next().unwrap_or(0.0);
    first + values.map(|v| v - first).sum::<f64>() / n
}

fn shifted(values: &[f64], delta: Option<&[f64]>) -> Vec<f64> {
    match delta {
        Some(d) => values.iter().zip(d).map(|(v, dv)| v + dv).collect(),
        None => values.to_vec(),
    }
}

fn add_into(acc: &mut [f64], more: &[f64]) {
    for (a, m) in acc.iter_mut().zip(more) {
        *a += m;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_opt(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        accumulate(grads, v, g);
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn mul_identity_broadcast() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..48).map(|i| i as f64 * 0.37 - 3.0).collect();
        let a = g.input(t(&[3, 4, 4], &data));
        let ones_c = g.input(Tensor::ones(&[3, 1, 1]).unwrap());
        let ones_s = g.input(Tensor::ones(&[1, 4, 4]).unwrap());
        let y = g.mul(a, ones_c).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let z = g.mul(a, ones_s).unwrap();
        assert_eq!(g.value(z).data(), &data[..]);
    }

    #[test]
    fn mul_channel_broadcast_trace() {
        let mut g = Graph::new();
        let a = g.input(Tensor::ones(&[2, 2, 2]).unwrap());
        let b = g.input(t(&[2, 1, 1], &[2.0, 3.0]));
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn add_identity_and_mismatch() {
        let mut g = Graph::new();
        let a = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.input(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        let c = g.input(t(&[2], &[0.0, 0.0]));
        assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { .. })));
        let f = g.input(Tensor::ones(&[2, 3, 3]).unwrap());
        let bad = g.input(Tensor::ones(&[2, 3, 1]).unwrap());
        assert!(matches!(g.mul(f, bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv2d_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.input(Tensor::ones(&[1, 1, 2, 2]).unwrap());
        let b = g.input(t(&[1], &[0.0]));
        // even kernels are rejected
        assert!(matches!(g.conv2d(x, k, b, 0, 1), Err(Error::InvalidConfig(_))));

        let k1 = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k1, b, 0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = g.input(Tensor::zeros(&[1, 3, 3]).unwrap());
        let k7 = g.input(Tensor::full(&[1, 1, 7, 7], 0.3).unwrap());
        let b7 = g.input(t(&[1], &[1.5]));
        let y = g.conv2d(z, k7, b7, 3, 1).unwrap();
        assert_eq!(g.value(y).dims(), &[1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.5));

        let wrong_c = g.input(Tensor::ones(&[1, 2, 1, 1]).unwrap());
        assert!(matches!(g.conv2d(x, wrong_c, b, 0, 1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv2d_sum_with_three_by_three() {
        // 3×3 ones kernel over 1×3×3 with no padding sums all nine values.
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let k = g.input(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b, 0, 1).unwrap();
        assert_eq!(g.value(y).data(), &[45.0]);
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let w = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.input(t(&[2], &[0.0, 0.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.input(t(&[2], &[1.0, 1.0]));
        let w = g.input(t(&[1, 2], &[1.0, 1.0]));
        let b = g.input(t(&[1], &[0.0]));
        let v = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(v).data(), &[2.0]);

        let x = g.input(t(&[1], &[5.0]));
        let w = g.input(t(&[1, 1], &[0.0]));
        let b = g.input(t(&[1], &[7.0]));
        let v = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(v).data(), &[7.0]);

        let bad = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.dense(bad, w, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn dense_rank3_maps_channels_per_position() {
        let mut g = Graph::new();
        // 2 channels, 1×2 spatial: positions (1,3) and (2,4)
        let x = g.input(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.input(t(&[1, 2], &[10.0, 1.0]));
        let b = g.input(t(&[1], &[0.5]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).dims(), &[1, 1, 2]);
        assert_eq!(g.value(y).data(), &[13.5, 24.5]);
    }

    #[test]
    fn dense_rank2_maps_rows() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.input(t(&[1, 2], &[1.0, -1.0]));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).dims(), &[2, 1]);
        assert_eq!(g.value(y).data(), &[-1.0, -1.0]);
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[0.0]));
        let v = g.sigmoid(x).unwrap();
        assert_eq!(g.value(v).data(), &[0.5]);
        let x = g.input(t(&[1], &[2.0]));
        let s = g.sigmoid(x).unwrap();
        // 1 / (1 + e^-2), evaluated independently
        assert_relative_eq!(g.value(s).data()[0], 0.8807970779778823, epsilon = 1e-15);
        let x = g.input(t(&[3], &[-1.0, 0.0, 3.0]));
        let v = g.relu(x).unwrap();
        assert_eq!(g.value(v).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        let l = g.sum(r).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pool_examples() {
        let mut g = Graph::new();
        let f = g.input(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let v = g.spatial_pool(PoolMode::Avg, f).unwrap();
        assert_eq!(g.value(v).data(), &[2.5]);
        let v = g.spatial_pool(PoolMode::Max, f).unwrap();
        assert_eq!(g.value(v).data(), &[4.0]);
        let c = g.input(Tensor::full(&[1, 3, 3], -1.25).unwrap());
        let v = g.spatial_pool(PoolMode::Avg, c).unwrap();
        assert_eq!(g.value(v).data(), &[-1.25]);
        let v = g.spatial_pool(PoolMode::Max, c).unwrap();
        assert_eq!(g.value(v).data(), &[-1.25]);

        let two = g.input(t(&[2, 1, 2], &[1.0, 1.0, 3.0, 3.0]));
        let avg = g.channel_pool(PoolMode::Avg, two).unwrap();
        let max = g.channel_pool(PoolMode::Max, two).unwrap();
        assert_eq!(g.value(avg).dims(), &[1, 1, 2]);
        assert_eq!(g.value(avg).data(), &[2.0, 2.0]);
        assert_eq!(g.value(max).data(), &[3.0, 3.0]);

        let single = g.input(t(&[1, 2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let v = g.channel_pool(PoolMode::Avg, single).unwrap();
        assert_eq!(g.value(v).data(), &[0.1, 0.2, 0.3, 0.4]);
        let v = g.channel_pool(PoolMode::Max, single).unwrap();
        assert_eq!(g.value(v).data(), &[0.1, 0.2, 0.3, 0.4]);

        let sym = g.input(t(&[2, 1, 1], &[5.0, -5.0]));
        let v = g.channel_pool(PoolMode::Avg, sym).unwrap();
        assert_eq!(g.value(v).data(), &[0.0]);
    }

    #[test]
    fn max_pool_gradient_goes_to_first_maximum() {
        let mut g = Graph::new();
        let f = g.param(t(&[1, 2, 2], &[4.0, 4.0, 1.0, 4.0]));
        let m = g.spatial_pool(PoolMode::Max, f).unwrap();
        let l = g.sum(m).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(f).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

        let mut g = Graph::new();
        let f = g.param(t(&[2, 1, 1], &[2.0, 2.0]));
        let m = g.channel_pool(PoolMode::Max, f).unwrap();
        let l = g.sum(m).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(f).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn max_pool2_halves_and_floors() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..15).map(f64::from).collect();
        let f = g.input(t(&[1, 3, 5], &data));
        let p = g.max_pool2(f).unwrap();
        assert_eq!(g.value(p).dims(), &[1, 1, 2]);
        assert_eq!(g.value(p).data(), &[6.0, 8.0]);
    }

    #[test]
    fn flatten_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let f = g.flatten(x).unwrap();
        assert_eq!(g.value(f).dims(), &[4]);
        assert_eq!(g.value(f).data(), &[1.0, 2.0, 3.0, 4.0]);
        let x = g.input(t(&[1, 1, 1], &[7.0]));
        let v = g.flatten(x).unwrap();
        assert_eq!(g.value(v).data(), &[7.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.3, -2.0, 5.0]));
        let l = g.sum(x).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.25]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(3.0));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_unreachable() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(Tensor::ones(&[2, 2]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]).unwrap());
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn reused_value_accumulates_gradient() {
        // loss = sum(x * x) -> 2x
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -4.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[3.0, -8.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[f64::MAX]));
        assert!(matches!(g.add(x, x), Err(Error::Numerical { op: "add" })));
    }

    #[test]
    fn bce_values_and_label_validation() {
        let mut g = Graph::new();
        let p = g.input(t(&[1], &[0.5]));
        let l = g.bce(p, &t(&[1], &[1.0])).unwrap();
        assert_relative_eq!(g.value(l).data()[0], std::f64::consts::LN_2, epsilon = 1e-15);

        let p = g.input(t(&[1], &[1.0 - 1e-7]));
        let l = g.bce(p, &t(&[1], &[1.0])).unwrap();
        assert_relative_eq!(g.value(l).data()[0], 1e-7, max_relative = 1e-6);

        let p = g.input(t(&[2], &[0.5, 0.5]));
        let l = g.bce(p, &t(&[2], &[0.0, 1.0])).unwrap();
        assert_relative_eq!(g.value(l).data()[0], std::f64::consts::LN_2, epsilon = 1e-15);

        assert!(matches!(g.bce(p, &t(&[2], &[0.0, 0.5])), Err(Error::InvalidLabel { .. })));
        assert!(matches!(g.bce(p, &t(&[1], &[0.0])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn bce_through_sigmoid_gradient_is_p_minus_y_over_n() {
        let logits = [-3.0, -0.4, 0.0, 1.7, 6.0];
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0];
        let mut g = Graph::new();
        let z = g.param(t(&[5], &logits));
        let p = g.sigmoid(z).unwrap();
        let l = g.bce(p, &t(&[5], &labels)).unwrap();
        let grads = g.backward(l).unwrap();
        let dz = grads.get(z).unwrap().data();
        for i in 0..5 {
            let expected = (sigmoid(logits[i]) - labels[i]) / 5.0;
            assert!((dz[i] - expected).abs() < 1e-10, "{i}: {} vs {expected}", dz[i]);
        }
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Graph::new();
        let mut b = Graph::new();
        let _ = a.input(Tensor::scalar(1.0));
        let v = a.input(Tensor::scalar(2.0));
        assert!(matches!(b.relu(v), Err(Error::Graph(_))));
    }
}
