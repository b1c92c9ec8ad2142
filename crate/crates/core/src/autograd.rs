//! Tape-based reverse-mode differentiation over the handful of operators the
//! segmentation network needs.
//!
//! Every operator appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse, starting from caller-supplied output gradients.
//! Rank-3 tensors are `C × H × W`; vectors are rank 1. Concatenation and
//! slicing always act on the leading axis.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ResizePlan<F> {
    in_h: usize,
    in_w: usize,
    rows: Vec<(usize, usize, F, F)>,
    cols: Vec<(usize, usize, F, F)>,
}

pub(crate) fn axis_plan<F: Element>(n_in: usize, n_out: usize) -> Vec<(usize, usize, F, F)> {
    // half-pixel centers (align_corners = false), edges clamped
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            (i0, i1, F::of(1.0 - frac), F::of(frac))
        })
        .collect()
}

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        /// im2col buffer; `None` for 1×1 stride-1 convolutions, which read `x`.
        cols: Option<Vec<F>>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Resize {
        x: Var,
        plan: ResizePlan<F>,
    },
    GlobalMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<F: Element>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Per-channel element count of a tensor viewed along its leading axis.
fn row_len(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn im2col<F: Element>(
    x: &[F],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<F> {
    let hw_out = ho * wo;
    let mut cols = vec![F::zero(); c * k * k * hw_out];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Element>(
    cols: &[F],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [F],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for parameter `id`; repeated calls return the same node so that
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, id: usize, value: &Tensor<F>) -> Var {
        if id >= self.param_vars.len() {
            self.param_vars.resize(id + 1, None);
        }
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    /// 2-D convolution of a `C × H × W` input with `O × C × k × k` weights
    /// and an `O` bias, zero padding on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv weight {ws:?} incompatible with {c}-channel input"
            )));
        }
        let (o, k) = (ws[0], ws[2]);
        if self.value(b).len() != o {
            return Err(Error::Shape(format!("conv bias must have {o} entries")));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!("{h}x{wd} input smaller than kernel {k}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let hw_out = ho * wo;
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols = if direct {
            None
        } else {
            Some(im2col(self.value(x).data(), (c, h, wd), k, stride, pad, (ho, wo)))
        };
        let mut out = vec![F::zero(); o * hw_out];
        for (oc, bias) in self.value(b).data().iter().enumerate() {
            out[oc * hw_out..(oc + 1) * hw_out].fill(*bias);
        }
        {
            let kk = c * k * k;
            let rhs = cols.as_deref().unwrap_or(self.value(x).data());
            gemm(
                MatRef::new(self.value(w).data(), o, kk),
                MatRef::new(rhs, kk, hw_out),
                F::one(),
                &mut out,
            );
        }
        let value = Tensor::from_vec(&[o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut v = self.value(a).clone();
        for (x, &y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x = *x * y;
        }
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(F::zero()));
        self.push(v, Op::Relu(a))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::EmptyInput("concat".into()))?)
            .shape()
            .to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::Shape(format!("concat: {s:?} vs {first:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// `len` leading-axis entries starting at `start`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if start + len > shape[0] {
            return Err(Error::Shape(format!(
                "slice {start}..{} of leading axis {}",
                start + len,
                shape[0]
            )));
        }
        let rl = row_len(&shape);
        let data = self.value(x).data()[start * rl..(start + len) * rl].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let v = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(v, Op::Slice { x, start }))
    }

    /// Bilinear resampling of every channel to `out_h × out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let plan = ResizePlan {
            in_h: h,
            in_w: w,
            rows: axis_plan::<F>(h, out_h),
            cols: axis_plan::<F>(w, out_w),
        };
        let src = self.value(x).data();
        let mut out = vec![F::zero(); c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy0, wy1)) in plan.rows.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in plan.cols.iter().enumerate() {
                    dst[oy * out_w + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                        + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                }
            }
        }
        let v = Tensor::from_vec(&[c, out_h, out_w], out).expect("resize shape");
        self.push(v, Op::Resize { x, plan })
    }

    /// Channel-wise maximum over all spatial positions, giving a `C` vector.
    pub fn global_max(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let src = self.value(x).data();
        let mut argmax = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            argmax.push(ch * hw + best);
            out.push(plane[best]);
        }
        let v = Tensor::from_vec(&[c], out).expect("pool shape");
        self.push(v, Op::GlobalMax { x, argmax })
    }

    /// `w · x + b` for a vector `x`, weights `O × I`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let n_in = self.value(x).len();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || ws[1] != n_in || self.value(b).len() != ws[0] {
            return Err(Error::Shape(format!(
                "linear weight {ws:?} incompatible with {n_in}-vector"
            )));
        }
        let mut out = self.value(b).data().to_vec();
        gemm(
            MatRef::new(self.value(w).data(), ws[0], n_in),
            MatRef::new(self.value(x).data(), n_in, 1),
            F::one(),
            &mut out,
        );
        let v = Tensor::from_vec(&[ws[0]], out)?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let m = src.data().iter().cloned().fold(F::neg_infinity(), F::max);
        let mut v = src.map(|x| (x - m).exp());
        let s: F = v.data().iter().cloned().sum();
        v.scale(F::one() / s);
        self.push(v, Op::Softmax(a))
    }

    /// Reverse pass seeded with `d(objective)/d(var)` for each listed output.
    /// Returns the gradient of every node (`None` where nothing flowed).
    pub fn backward(&self, seeds: &[(Var, Tensor<F>)]) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, vb, |g, y| g * y);
                let gb = zip_map(g, va, |g, x| g * x);
                accumulate_owned(grads, *a, ga);
                accumulate_owned(grads, *b, gb);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(g, out, |g, y| g * y * (F::one() - y));
                accumulate_owned(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(g, out, |g, y| g * (F::one() - y * y));
                accumulate_owned(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = zip_map(g, out, |g, y| if y > F::zero() { g } else { F::zero() });
                accumulate_owned(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    let n = self.value(p).len();
                    let part = Tensor::from_vec(shape, g.data()[offset..offset + n].to_vec())
                        .expect("concat grad");
                    accumulate_owned(grads, p, part);
                    offset += n;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.value(*x).shape();
                let off = start * row_len(xs);
                let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(xs));
                for (d, &s) in slot.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
            Op::Resize { x, plan } => {
                let (c, oh, ow) = out.chw();
                let (h, w) = (plan.in_h, plan.in_w);
                let mut dx = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    let src = &g.data()[ch * oh * ow..(ch + 1) * oh * ow];
                    let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in plan.rows.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in plan.cols.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            plane[y0 * w + x0] += gv * wy0 * wx0;
                            plane[y0 * w + x1] += gv * wy0 * wx1;
                            plane[y1 * w + x0] += gv * wy1 * wx0;
                            plane[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                let t = Tensor::from_vec(&[c, h, w], dx).expect("resize grad");
                accumulate_owned(grads, *x, t);
            }
            Op::GlobalMax { x, argmax } => {
                let xs = self.value(*x).shape();
                let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(xs));
                for (&pos, &gv) in argmax.iter().zip(g.data()) {
                    slot.data_mut()[pos] += gv;
                }
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (o, n_in) = (vw.shape()[0], vw.shape()[1]);
                // dW = g ⊗ x
                let mut dw = vec![F::zero(); o * n_in];
                gemm(
                    MatRef::new(g.data(), o, 1),
                    MatRef::new(vx.data(), 1, n_in),
                    F::zero(),
                    &mut dw,
                );
                let mut dx = vec![F::zero(); n_in];
                gemm(
                    MatRef::new(vw.data(), o, n_in).t(),
                    MatRef::new(g.data(), o, 1),
                    F::zero(),
                    &mut dx,
                );
                accumulate_owned(grads, *w, Tensor::from_vec(vw.shape(), dw).expect("dw"));
                accumulate(grads, *b, g);
                accumulate_owned(grads, *x, Tensor::from_vec(vx.shape(), dx).expect("dx"));
            }
            Op::Softmax(a) => {
                let dot: F = g.data().iter().zip(out.data()).map(|(&g, &y)| g * y).sum();
                let ga = zip_map(g, out, |g, y| y * (g - dot));
                accumulate_owned(grads, *a, ga);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (c, h, wd) = vx.chw();
                let (o, ho, wo) = out.chw();
                let k = vw.shape()[2];
                let kk = c * k * k;
                let hw_out = ho * wo;
                let rhs = cols.as_deref().unwrap_or(vx.data());

                let mut dw = vec![F::zero(); o * kk];
                gemm(
                    MatRef::new(g.data(), o, hw_out),
                    MatRef::new(rhs, kk, hw_out).t(),
                    F::zero(),
                    &mut dw,
                );
                let db: Vec<F> = g
                    .data()
                    .chunks_exact(hw_out)
                    .map(|row| row.iter().cloned().sum())
                    .collect();
                let mut dcols = vec![F::zero(); kk * hw_out];
                gemm(
                    MatRef::new(vw.data(), o, kk).t(),
                    MatRef::new(g.data(), o, hw_out),
                    F::zero(),
                    &mut dcols,
                );
                let dx = if cols.is_none() {
                    dcols
                } else {
                    let mut dx = vec![F::zero(); c * h * wd];
                    col2im(&dcols, (c, h, wd), k, *stride, *pad, (ho, wo), &mut dx);
                    dx
                };
                accumulate_owned(grads, *w, Tensor::from_vec(vw.shape(), dw).expect("dw"));
                accumulate_owned(grads, *b, Tensor::from_vec(&[o], db).expect("db"));
                accumulate_owned(grads, *x, Tensor::from_vec(vx.shape(), dx).expect("dx"));
            }
        }
    }

    /// Gradients of the parameter leaves, indexed by parameter id. Parameters
    /// that never entered the graph get zero tensors of the given shapes.
    pub fn param_grads(&self, grads: &Gradients<F>, shapes: &[Vec<usize>]) -> Vec<Tensor<F>> {
        let mut out: Vec<Tensor<F>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[idx] {
                    out[id] = g.clone();
                }
            }
        }
        out
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

fn zip_map<F: Element>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip shape")
}

fn accumulate<F: Element>(grads: &mut [Option<Tensor<F>>], v: Var, g: &Tensor<F>) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned<F: Element>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `sum(out ⊙ probe)` w.r.t. every input entry.
    fn check(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eval = |inputs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(&inputs);
        let probe = rand_tensor(&mut rng, g.value(out).shape());
        let objective = |inputs: &[Tensor<f64>]| {
            let (g, _, out) = eval(inputs);
            g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let grads = g.backward(&[(out, probe.clone())]);
        let h = 1e-6;
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            for j in 0..inputs[i].len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i}[{j}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let x = rand_tensor(&mut rng, &[2, 6, 5]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], v[2], stride, pad).unwrap());
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 5, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let out = g.conv2d(vx, vw, vb, 2, 1).unwrap();
        let (o, ho, wo) = g.value(out).chw();
        assert_eq!((o, ho, wo), (3, 3, 2));
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.data()[oc];
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    s += w.data()[((oc * 2 + ic) * 3 + ky) * 3 + kx]
                                        * x.data()[(ic * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = g.value(out).data()[(oc * ho + oy) * wo + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[4, 3, 3]);
        let b = rand_tensor(&mut rng, &[4, 3, 3]);
        check(vec![a.clone(), b.clone()], |g, v| {
            let m = g.mul(v[0], v[1]).unwrap();
            let s = g.sigmoid(m);
            let t = g.tanh(v[1]);
            let r = g.add(s, t).unwrap();
            let cat = g.concat(&[r, v[0]]).unwrap();
            g.slice(cat, 2, 4).unwrap()
        });
        check(vec![a], |g, v| {
            let up = g.resize_bilinear(v[0], 6, 6);
            let down = g.resize_bilinear(up, 5, 7);
            g.relu(down)
        });
    }

    #[test]
    fn head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 4, 4]);
        let w = rand_tensor(&mut rng, &[5, 3]);
        let b = rand_tensor(&mut rng, &[5]);
        check(vec![x, w, b], |g, v| {
            let p = g.global_max(v[0]);
            let l = g.linear(p, v[1], v[2]).unwrap();
            g.softmax(l)
        });
    }

    #[test]
    fn resize_identity_and_doubling() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let same = g.resize_bilinear(x, 2, 2);
        assert_eq!(g.value(same).data(), g.value(x).data());
        let up = g.resize_bilinear(x, 4, 4);
        // half-pixel centers: first row is 0, .25, .75, 1
        assert_eq!(&g.value(up).data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        let constant = g.input(Tensor::from_vec(&[1, 2, 2], vec![0.3; 4]).unwrap());
        let up = g.resize_bilinear(constant, 8, 8);
        assert!(g.value(up).data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let a = g.param(0, &t);
        let b = g.param(0, &t);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let grads = g.backward(&[(s, Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap())]);
        let pg = g.param_grads(&grads, &[vec![2], vec![3]]);
        assert_eq!(pg[0].data(), &[2.0, 2.0]);
        assert_eq!(pg[1].data(), &[0.0; 3]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3, 3]));
        let b = g.input(Tensor::zeros(&[3, 3, 3]));
        assert!(g.add(a, b).is_err());
        let w = g.input(Tensor::zeros(&[4, 3, 3, 3]));
        let bias = g.input(Tensor::zeros(&[4]));
        assert!(g.conv2d(a, w, bias, 1, 1).is_err());
        assert!(g.slice(a, 1, 2).is_err());
    }
}
