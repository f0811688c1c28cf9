//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! The tape owns an arena of flat f32 buffers. Forward helpers compute
//! eagerly, record the primitive when recording is enabled, and return a
//! [`Value`] handle. `backward` replays the recorded ops in reverse,
//! accumulating vector-Jacobian products.
//!
//! Parameter buffers registered from a [`ParamStore`](super::params::ParamStore)
//! carry a group id. Ops recorded while that group is inside a stop scope skip
//! parameter-gradient accumulation during backward while still propagating
//! gradients to their data inputs.

use super::params::{GroupId, ParamId, ParamStore};

/// Handle to a buffer in the tape arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

struct Buf {
    data: Vec<f32>,
    shape: Vec<usize>,
    needs_grad: bool,
    group: Option<GroupId>,
    param: Option<ParamId>,
}

#[derive(Debug, Clone)]
enum Op {
    /// 3x3 convolution, input [C,H,W], weight [O,C,3,3], bias [O].
    Conv2d { x: usize, w: usize, b: usize, out: usize, stride: usize, pad: usize, stop: bool },
    /// 2x2 max-pool, stride 2, ceil mode. Identity when the input is 1x1.
    MaxPool2 { x: usize, out: usize, skipped: bool },
    Relu { x: usize, out: usize },
    /// input [B,N] (or [N]), weight [M,N], bias [M].
    Linear { x: usize, w: usize, b: usize, out: usize, stop: bool },
    /// lo + span * sigmoid(x)
    SigmoidScaled { x: usize, out: usize, lo: f32, span: f32 },
    /// Concatenate along axis 0 (plain append for equal trailing dims).
    Concat0 { a: usize, b: usize, out: usize },
    /// Concatenate two matrices column-wise: [B,n1] ++ [B,n2] -> [B,n1+n2].
    ConcatCols { a: usize, b: usize, out: usize },
    /// [n] -> [rows,n], each row a copy.
    BroadcastRows { x: usize, out: usize, rows: usize },
    /// [M,n] -> [M*times,n], row i repeated `times` consecutive times.
    RepeatRows { x: usize, out: usize, times: usize },
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { x: usize, out: usize, c: f32 },
    Ln { x: usize, out: usize },
    /// Sum of all elements -> scalar [1].
    Sum { x: usize, out: usize },
    /// Row-wise mean: [M,U] -> [M].
    RowMean { x: usize, out: usize },
    /// Elementwise division by a scalar buffer: out = x / s.
    DivByScalar { x: usize, s: usize, out: usize },
    /// Isotropic 2-D Gaussian density of each row of x around `target`.
    Gauss2 { x: usize, out: usize, target: [f32; 2], sigma: f32 },
    /// Same data, new shape.
    Reshape { x: usize, out: usize },
}

/// The recorded forward pass plus everything needed for backward.
pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
    registered: Vec<Option<Value>>,
    stop_stack: Vec<GroupId>,
    recording: bool,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            registered: Vec::new(),
            stop_stack: Vec::new(),
            recording: true,
            ran_backward: false,
        }
    }

    /// Disable op recording; forward results are still computed.
    pub fn no_grad() -> Self {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    // ── buffers ──────────────────────────────────────────────────────

    fn alloc(&mut self, data: Vec<f32>, shape: Vec<usize>, needs_grad: bool) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.bufs.push(Buf { data, shape, needs_grad, group: None, param: None });
        self.grads.push(None);
        Value(self.bufs.len() - 1)
    }

    /// A constant input: no gradient flows into it.
    pub fn leaf(&mut self, data: Vec<f32>, shape: Vec<usize>) -> Value {
        self.alloc(data, shape, false)
    }

    /// A leaf copy of an existing value; severs the gradient path.
    pub fn detach(&mut self, v: Value) -> Value {
        let data = self.bufs[v.0].data.clone();
        let shape = self.bufs[v.0].shape.clone();
        self.alloc(data, shape, false)
    }

    /// Register a parameter from the store, memoized per tape so repeated
    /// applications of the same network share one buffer (and one gradient
    /// accumulator).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Value {
        if self.registered.len() < store.len() {
            self.registered.resize(store.len(), None);
        }
        if let Some(v) = self.registered[id.0] {
            return v;
        }
        let t = store.tensor(id);
        let v = self.alloc(t.data().to_vec(), t.shape().to_vec(), true);
        self.bufs[v.0].group = Some(store.group_of(id));
        self.bufs[v.0].param = Some(id);
        self.registered[id.0] = Some(v);
        v
    }

    pub fn data(&self, v: Value) -> &[f32] {
        &self.bufs[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.bufs[v.0].shape
    }

    pub fn numel(&self, v: Value) -> usize {
        self.bufs[v.0].data.len()
    }

    pub fn scalar(&self, v: Value) -> f32 {
        debug_assert_eq!(self.numel(v), 1);
        self.bufs[v.0].data[0]
    }

    /// Rows of a [T,2] value as keypoint pairs.
    pub fn rows2(&self, v: Value) -> Vec<[f32; 2]> {
        let d = self.data(v);
        d.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
    }

    // ── stop scopes ──────────────────────────────────────────────────

    /// Run `f` with parameter-gradient accumulation disabled for `group`.
    /// Gradients still flow through the recorded ops to their data inputs.
    pub fn stop_scope<R>(&mut self, group: GroupId, f: impl FnOnce(&mut Tape) -> R) -> R {
        self.stop_stack.push(group);
        let r = f(self);
        self.stop_stack.pop();
        r
    }

    fn stopped(&self, v: Value) -> bool {
        match self.bufs[v.0].group {
            Some(g) => self.stop_stack.contains(&g),
            None => false,
        }
    }

    fn push(&mut self, op: Op) {
        if self.recording {
            self.ops.push(op);
        }
    }

    fn out_needs_grad(&self, inputs: &[Value]) -> bool {
        self.recording && inputs.iter().any(|v| self.bufs[v.0].needs_grad)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Value, w: Value, b: Value, stride: usize, pad: usize) -> Value {
        let (c_in, h, wd) = dims3(self.shape(x));
        let ws = self.shape(w);
        assert_eq!(ws.len(), 4, "conv weight must be [O,C,3,3], got {:?}", ws);
        assert_eq!(ws[1], c_in, "conv channel mismatch: weight {:?} input C={}", ws, c_in);
        assert_eq!((ws[2], ws[3]), (3, 3), "conv kernels are 3x3");
        let o = ws[0];
        let oh = (h + 2 * pad - 3) / stride + 1;
        let ow = (wd + 2 * pad - 3) / stride + 1;
        let mut out = vec![0.0f32; o * oh * ow];
        conv2d_fwd(
            &self.bufs[x.0].data,
            &self.bufs[w.0].data,
            &self.bufs[b.0].data,
            &mut out,
            c_in,
            h,
            wd,
            o,
            oh,
            ow,
            stride,
            pad,
        );
        let ng = self.out_needs_grad(&[x, w, b]);
        let stop = self.stopped(w);
        let out = self.alloc(out, vec![o, oh, ow], ng);
        self.push(Op::Conv2d { x: x.0, w: w.0, b: b.0, out: out.0, stride, pad, stop });
        out
    }

    pub fn maxpool2(&mut self, x: Value) -> Value {
        let (c, h, w) = dims3(self.shape(x));
        if h == 1 && w == 1 {
            // Pooling a 1x1 map is the identity; keep the schedule well-defined.
            let data = self.bufs[x.0].data.clone();
            let ng = self.out_needs_grad(&[x]);
            let out = self.alloc(data, vec![c, 1, 1], ng);
            self.push(Op::MaxPool2 { x: x.0, out: out.0, skipped: true });
            return out;
        }
        let oh = h.div_ceil(2);
        let ow = w.div_ceil(2);
        let mut out = vec![0.0f32; c * oh * ow];
        maxpool2_fwd(&self.bufs[x.0].data, &mut out, c, h, w, oh, ow);
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(out, vec![c, oh, ow], ng);
        self.push(Op::MaxPool2 { x: x.0, out: out.0, skipped: false });
        out
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let data: Vec<f32> = self.bufs[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.bufs[x.0].shape.clone();
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(data, shape, ng);
        self.push(Op::Relu { x: x.0, out: out.0 });
        out
    }

    pub fn linear(&mut self, x: Value, w: Value, b: Value) -> Value {
        let xs = self.shape(x).to_vec();
        let (rows, n) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => panic!("linear input must be rank 1 or 2, got {:?}", xs),
        };
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear weight must be [M,N]");
        assert_eq!(ws[1], n, "linear fan-in mismatch: weight {:?} input N={}", ws, n);
        let m = ws[0];
        assert_eq!(self.numel(b), m, "linear bias length mismatch");
        let mut out = vec![0.0f32; rows * m];
        linear_fwd(&self.bufs[x.0].data, &self.bufs[w.0].data, &self.bufs[b.0].data, &mut out, rows, n, m);
        let shape = if xs.len() == 1 { vec![m] } else { vec![rows, m] };
        let ng = self.out_needs_grad(&[x, w, b]);
        let stop = self.stopped(w);
        let out = self.alloc(out, shape, ng);
        self.push(Op::Linear { x: x.0, w: w.0, b: b.0, out: out.0, stop });
        out
    }

    /// lo + (hi - lo) * sigmoid(x)
    pub fn sigmoid_scaled(&mut self, x: Value, lo: f32, hi: f32) -> Value {
        let span = hi - lo;
        let data: Vec<f32> = self.bufs[x.0].data.iter().map(|&v| lo + span * sigmoid(v)).collect();
        let shape = self.bufs[x.0].shape.clone();
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(data, shape, ng);
        self.push(Op::SigmoidScaled { x: x.0, out: out.0, lo, span });
        out
    }

    pub fn concat0(&mut self, a: Value, b: Value) -> Value {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[1..], sb[1..], "concat0 trailing dims differ: {:?} vs {:?}", sa, sb);
        let mut data = self.bufs[a.0].data.clone();
        data.extend_from_slice(&self.bufs[b.0].data);
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let ng = self.out_needs_grad(&[a, b]);
        let out = self.alloc(data, shape, ng);
        self.push(Op::Concat0 { a: a.0, b: b.0, out: out.0 });
        out
    }

    pub fn concat_cols(&mut self, a: Value, b: Value) -> Value {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[0], sb[0], "concat_cols row mismatch: {:?} vs {:?}", sa, sb);
        let (rows, n1, n2) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0f32; rows * (n1 + n2)];
        for r in 0..rows {
            data[r * (n1 + n2)..r * (n1 + n2) + n1]
                .copy_from_slice(&self.bufs[a.0].data[r * n1..(r + 1) * n1]);
            data[r * (n1 + n2) + n1..(r + 1) * (n1 + n2)]
                .copy_from_slice(&self.bufs[b.0].data[r * n2..(r + 1) * n2]);
        }
        let ng = self.out_needs_grad(&[a, b]);
        let out = self.alloc(data, vec![rows, n1 + n2], ng);
        self.push(Op::ConcatCols { a: a.0, b: b.0, out: out.0 });
        out
    }

    pub fn broadcast_rows(&mut self, x: Value, rows: usize) -> Value {
        let n = self.numel(x);
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(&self.bufs[x.0].data);
        }
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(data, vec![rows, n], ng);
        self.push(Op::BroadcastRows { x: x.0, out: out.0, rows });
        out
    }

    pub fn repeat_rows(&mut self, x: Value, times: usize) -> Value {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        let (m, n) = (xs[0], xs[1]);
        let mut data = Vec::with_capacity(m * times * n);
        for r in 0..m {
            let row = &self.bufs[x.0].data[r * n..(r + 1) * n];
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(data, vec![m * times, n], ng);
        self.push(Op::RepeatRows { x: x.0, out: out.0, times });
        out
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        self.ew2(a, b, |x, y| x + y, |t, a, b, out| t.push(Op::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        self.ew2(a, b, |x, y| x - y, |t, a, b, out| t.push(Op::Sub { a, b, out }))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        self.ew2(a, b, |x, y| x * y, |t, a, b, out| t.push(Op::Mul { a, b, out }))
    }

    fn ew2(
        &mut self,
        a: Value,
        b: Value,
        f: impl Fn(f32, f32) -> f32,
        rec: impl Fn(&mut Tape, usize, usize, usize),
    ) -> Value {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise op shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<f32> = self.bufs[a.0]
            .data
            .iter()
            .zip(self.bufs[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.bufs[a.0].shape.clone();
        let ng = self.out_needs_grad(&[a, b]);
        let out = self.alloc(data, shape, ng);
        rec(self, a.0, b.0, out.0);
        out
    }

    pub fn scale(&mut self, x: Value, c: f32) -> Value {
        let data: Vec<f32> = self.bufs[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.bufs[x.0].shape.clone();
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(data, shape, ng);
        self.push(Op::Scale { x: x.0, out: out.0, c });
        out
    }

    pub fn ln(&mut self, x: Value) -> Value {
        let data: Vec<f32> = self.bufs[x.0].data.iter().map(|&v| v.ln()).collect();
        let shape = self.bufs[x.0].shape.clone();
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(data, shape, ng);
        self.push(Op::Ln { x: x.0, out: out.0 });
        out
    }

    pub fn sum(&mut self, x: Value) -> Value {
        let s: f32 = self.bufs[x.0].data.iter().sum();
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(vec![s], vec![1], ng);
        self.push(Op::Sum { x: x.0, out: out.0 });
        out
    }

    pub fn row_mean(&mut self, x: Value) -> Value {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        let (m, u) = (xs[0], xs[1]);
        let inv = 1.0 / u as f32;
        let data: Vec<f32> = (0..m)
            .map(|r| self.bufs[x.0].data[r * u..(r + 1) * u].iter().sum::<f32>() * inv)
            .collect();
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(data, vec![m], ng);
        self.push(Op::RowMean { x: x.0, out: out.0 });
        out
    }

    pub fn div_by_scalar(&mut self, x: Value, s: Value) -> Value {
        assert_eq!(self.numel(s), 1, "divisor must be scalar");
        let sv = self.bufs[s.0].data[0];
        let data: Vec<f32> = self.bufs[x.0].data.iter().map(|&v| v / sv).collect();
        let shape = self.bufs[x.0].shape.clone();
        let ng = self.out_needs_grad(&[x, s]);
        let out = self.alloc(data, shape, ng);
        self.push(Op::DivByScalar { x: x.0, s: s.0, out: out.0 });
        out
    }

    /// Isotropic 2-D Gaussian density evaluated at `target` with each row of
    /// `x` as the mean: out[i] = N(target; x[i], sigma^2 I).
    pub fn gauss2(&mut self, x: Value, target: [f32; 2], sigma: f32) -> Value {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], 2, "gauss2 expects [T,2] means");
        let t = xs[0];
        let norm = 1.0 / (2.0 * std::f32::consts::PI * sigma * sigma);
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let data: Vec<f32> = (0..t)
            .map(|r| {
                let dx = self.bufs[x.0].data[r * 2] - target[0];
                let dy = self.bufs[x.0].data[r * 2 + 1] - target[1];
                norm * (-(dx * dx + dy * dy) * inv2s2).exp()
            })
            .collect();
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(data, vec![t], ng);
        self.push(Op::Gauss2 { x: x.0, out: out.0, target, sigma });
        out
    }

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Value {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(x),
            "reshape to {:?} changes element count",
            shape
        );
        let data = self.bufs[x.0].data.clone();
        let ng = self.out_needs_grad(&[x]);
        let out = self.alloc(data, shape, ng);
        self.push(Op::Reshape { x: x.0, out: out.0 });
        out
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass seeded with 1.0 on a scalar output.
    pub fn backward(&mut self, loss: Value) -> Result<(), String> {
        if self.numel(loss) != 1 {
            return Err(format!(
                "backward seed must be scalar, output has {} elements; pass an explicit seed",
                self.numel(loss)
            ));
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Reverse pass with an explicit seed gradient.
    pub fn backward_with_seed(&mut self, output: Value, seed: &[f32]) -> Result<(), String> {
        if self.ops.is_empty() {
            return Err("backward called before any forward op was recorded".into());
        }
        if seed.len() != self.numel(output) {
            return Err(format!(
                "seed gradient has {} elements but output has {}",
                seed.len(),
                self.numel(output)
            ));
        }
        self.ran_backward = true;
        self.grads[output.0] = Some(seed.to_vec());
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    pub fn ran_backward(&self) -> bool {
        self.ran_backward
    }

    pub fn grad(&self, v: Value) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for a registered parameter; zeros if nothing flowed to it
    /// (including when every use sat inside a stop scope).
    pub fn param_grad(&self, store: &ParamStore, id: ParamId) -> Vec<f32> {
        let n = store.tensor(id).numel();
        match self.registered.get(id.0).copied().flatten() {
            Some(v) => self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; n]),
            None => vec![0.0; n],
        }
    }

    fn acc(&mut self, idx: usize, grad: &[f32]) {
        if !self.bufs[idx].needs_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            }
            None => self.grads[idx] = Some(grad.to_vec()),
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match *op {
            Op::Conv2d { x, w, b, out, stride, pad, stop } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let (c_in, h, wd) = dims3(&self.bufs[x].shape);
                let os = &self.bufs[out].shape;
                let (o, oh, ow) = (os[0], os[1], os[2]);
                if self.bufs[x].needs_grad {
                    let mut d_x = vec![0.0f32; c_in * h * wd];
                    conv2d_bwd_input(
                        &d_out, &self.bufs[w].data, &mut d_x, c_in, h, wd, o, oh, ow, stride, pad,
                    );
                    self.acc(x, &d_x);
                }
                if !stop {
                    let mut d_w = vec![0.0f32; o * c_in * 9];
                    let mut d_b = vec![0.0f32; o];
                    conv2d_bwd_params(
                        &d_out,
                        &self.bufs[x].data,
                        &mut d_w,
                        &mut d_b,
                        c_in,
                        h,
                        wd,
                        o,
                        oh,
                        ow,
                        stride,
                        pad,
                    );
                    self.acc(w, &d_w);
                    self.acc(b, &d_b);
                }
            }
            Op::MaxPool2 { x, out, skipped } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                if skipped {
                    self.acc(x, &d_out);
                    return;
                }
                let (c, h, w) = dims3(&self.bufs[x].shape);
                let os = &self.bufs[out].shape;
                let (oh, ow) = (os[1], os[2]);
                let mut d_x = vec![0.0f32; c * h * w];
                maxpool2_bwd(&self.bufs[x].data, &d_out, &mut d_x, c, h, w, oh, ow);
                self.acc(x, &d_x);
            }
            Op::Relu { x, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let d_x: Vec<f32> = self.bufs[x]
                    .data
                    .iter()
                    .zip(&d_out)
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                self.acc(x, &d_x);
            }
            Op::Linear { x, w, b, out, stop } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let xs = &self.bufs[x].shape;
                let (rows, n) = if xs.len() == 1 { (1, xs[0]) } else { (xs[0], xs[1]) };
                let m = self.bufs[w].shape[0];
                if self.bufs[x].needs_grad {
                    // d_x = d_out @ W
                    let mut d_x = vec![0.0f32; rows * n];
                    let wdat = &self.bufs[w].data;
                    for r in 0..rows {
                        let dr = &d_out[r * m..(r + 1) * m];
                        let xr = &mut d_x[r * n..(r + 1) * n];
                        for j in 0..m {
                            let dj = dr[j];
                            if dj != 0.0 {
                                let wrow = &wdat[j * n..(j + 1) * n];
                                for k in 0..n {
                                    xr[k] += dj * wrow[k];
                                }
                            }
                        }
                    }
                    self.acc(x, &d_x);
                }
                if !stop {
                    // d_W = d_out^T @ x, d_b = colsum(d_out)
                    let mut d_w = vec![0.0f32; m * n];
                    let mut d_b = vec![0.0f32; m];
                    let xdat = &self.bufs[x].data;
                    for r in 0..rows {
                        let dr = &d_out[r * m..(r + 1) * m];
                        let xr = &xdat[r * n..(r + 1) * n];
                        for j in 0..m {
                            let dj = dr[j];
                            d_b[j] += dj;
                            if dj != 0.0 {
                                let wrow = &mut d_w[j * n..(j + 1) * n];
                                for k in 0..n {
                                    wrow[k] += dj * xr[k];
                                }
                            }
                        }
                    }
                    self.acc(w, &d_w);
                    self.acc(b, &d_b);
                }
            }
            Op::SigmoidScaled { x, out, lo, span } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let d_x: Vec<f32> = self.bufs[out]
                    .data
                    .iter()
                    .zip(&d_out)
                    .map(|(&o, &d)| {
                        let s = (o - lo) / span;
                        d * span * s * (1.0 - s)
                    })
                    .collect();
                self.acc(x, &d_x);
            }
            Op::Concat0 { a, b, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let na = self.bufs[a].data.len();
                self.acc(a, &d_out[..na]);
                self.acc(b, &d_out[na..]);
            }
            Op::ConcatCols { a, b, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let rows = self.bufs[a].shape[0];
                let n1 = self.bufs[a].shape[1];
                let n2 = self.bufs[b].shape[1];
                let mut d_a = vec![0.0f32; rows * n1];
                let mut d_b = vec![0.0f32; rows * n2];
                for r in 0..rows {
                    d_a[r * n1..(r + 1) * n1]
                        .copy_from_slice(&d_out[r * (n1 + n2)..r * (n1 + n2) + n1]);
                    d_b[r * n2..(r + 1) * n2]
                        .copy_from_slice(&d_out[r * (n1 + n2) + n1..(r + 1) * (n1 + n2)]);
                }
                self.acc(a, &d_a);
                self.acc(b, &d_b);
            }
            Op::BroadcastRows { x, out, rows } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let n = self.bufs[x].data.len();
                let mut d_x = vec![0.0f32; n];
                for r in 0..rows {
                    for k in 0..n {
                        d_x[k] += d_out[r * n + k];
                    }
                }
                self.acc(x, &d_x);
            }
            Op::RepeatRows { x, out, times } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let xs = &self.bufs[x].shape;
                let (m, n) = (xs[0], xs[1]);
                let mut d_x = vec![0.0f32; m * n];
                for r in 0..m {
                    for t in 0..times {
                        let src = &d_out[(r * times + t) * n..(r * times + t + 1) * n];
                        for k in 0..n {
                            d_x[r * n + k] += src[k];
                        }
                    }
                }
                self.acc(x, &d_x);
            }
            Op::Add { a, b, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                self.acc(a, &d_out);
                self.acc(b, &d_out);
            }
            Op::Sub { a, b, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                self.acc(a, &d_out);
                let neg: Vec<f32> = d_out.iter().map(|d| -d).collect();
                self.acc(b, &neg);
            }
            Op::Mul { a, b, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let d_a: Vec<f32> =
                    d_out.iter().zip(&self.bufs[b].data).map(|(&d, &v)| d * v).collect();
                let d_b: Vec<f32> =
                    d_out.iter().zip(&self.bufs[a].data).map(|(&d, &v)| d * v).collect();
                self.acc(a, &d_a);
                self.acc(b, &d_b);
            }
            Op::Scale { x, out, c } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let d_x: Vec<f32> = d_out.iter().map(|&d| d * c).collect();
                self.acc(x, &d_x);
            }
            Op::Ln { x, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let d_x: Vec<f32> =
                    d_out.iter().zip(&self.bufs[x].data).map(|(&d, &v)| d / v).collect();
                self.acc(x, &d_x);
            }
            Op::Sum { x, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let d = d_out[0];
                let d_x = vec![d; self.bufs[x].data.len()];
                self.acc(x, &d_x);
            }
            Op::RowMean { x, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let xs = &self.bufs[x].shape;
                let (m, u) = (xs[0], xs[1]);
                let inv = 1.0 / u as f32;
                let mut d_x = vec![0.0f32; m * u];
                for r in 0..m {
                    let d = d_out[r] * inv;
                    for k in 0..u {
                        d_x[r * u + k] = d;
                    }
                }
                self.acc(x, &d_x);
            }
            Op::DivByScalar { x, s, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let sv = self.bufs[s].data[0];
                if self.bufs[x].needs_grad {
                    let d_x: Vec<f32> = d_out.iter().map(|&d| d / sv).collect();
                    self.acc(x, &d_x);
                }
                if self.bufs[s].needs_grad {
                    let dot: f32 =
                        d_out.iter().zip(&self.bufs[out].data).map(|(&d, &o)| d * o).sum();
                    self.acc(s, &[-dot / sv]);
                }
            }
            Op::Gauss2 { x, out, target, sigma } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                let t = self.bufs[out].data.len();
                let inv_s2 = 1.0 / (sigma * sigma);
                let mut d_x = vec![0.0f32; t * 2];
                for r in 0..t {
                    let g = d_out[r] * self.bufs[out].data[r] * inv_s2;
                    d_x[r * 2] = -g * (self.bufs[x].data[r * 2] - target[0]);
                    d_x[r * 2 + 1] = -g * (self.bufs[x].data[r * 2 + 1] - target[1]);
                }
                self.acc(x, &d_x);
            }
            Op::Reshape { x, out } => {
                let Some(d_out) = self.grads[out].clone() else { return };
                self.acc(x, &d_out);
            }
        }
    }

    // ── replay ───────────────────────────────────────────────────────

    /// Re-execute every recorded op in order, overwriting output buffers.
    /// With unchanged leaf data this reproduces the forward pass bit-exactly.
    pub fn replay(&mut self) {
        for i in 0..self.ops.len() {
            let op = self.ops[i].clone();
            self.replay_op(&op);
        }
    }

    fn replay_op(&mut self, op: &Op) {
        match *op {
            Op::Conv2d { x, w, b, out, stride, pad, .. } => {
                let (c_in, h, wd) = dims3(&self.bufs[x].shape);
                let os = self.bufs[out].shape.clone();
                let mut o = vec![0.0f32; self.bufs[out].data.len()];
                conv2d_fwd(
                    &self.bufs[x].data,
                    &self.bufs[w].data,
                    &self.bufs[b].data,
                    &mut o,
                    c_in,
                    h,
                    wd,
                    os[0],
                    os[1],
                    os[2],
                    stride,
                    pad,
                );
                self.bufs[out].data = o;
            }
            Op::MaxPool2 { x, out, skipped } => {
                if skipped {
                    self.bufs[out].data = self.bufs[x].data.clone();
                } else {
                    let (c, h, w) = dims3(&self.bufs[x].shape);
                    let os = self.bufs[out].shape.clone();
                    let mut o = vec![0.0f32; self.bufs[out].data.len()];
                    maxpool2_fwd(&self.bufs[x].data, &mut o, c, h, w, os[1], os[2]);
                    self.bufs[out].data = o;
                }
            }
            Op::Relu { x, out } => {
                self.bufs[out].data = self.bufs[x].data.iter().map(|v| v.max(0.0)).collect();
            }
            Op::Linear { x, w, b, out, .. } => {
                let xs = &self.bufs[x].shape;
                let (rows, n) = if xs.len() == 1 { (1, xs[0]) } else { (xs[0], xs[1]) };
                let m = self.bufs[w].shape[0];
                let mut o = vec![0.0f32; rows * m];
                linear_fwd(&self.bufs[x].data, &self.bufs[w].data, &self.bufs[b].data, &mut o, rows, n, m);
                self.bufs[out].data = o;
            }
            Op::SigmoidScaled { x, out, lo, span } => {
                self.bufs[out].data =
                    self.bufs[x].data.iter().map(|&v| lo + span * sigmoid(v)).collect();
            }
            Op::Concat0 { a, b, out } => {
                let mut d = self.bufs[a].data.clone();
                d.extend_from_slice(&self.bufs[b].data);
                self.bufs[out].data = d;
            }
            Op::ConcatCols { a, b, out } => {
                let rows = self.bufs[a].shape[0];
                let n1 = self.bufs[a].shape[1];
                let n2 = self.bufs[b].shape[1];
                let mut d = vec![0.0f32; rows * (n1 + n2)];
                for r in 0..rows {
                    d[r * (n1 + n2)..r * (n1 + n2) + n1]
                        .copy_from_slice(&self.bufs[a].data[r * n1..(r + 1) * n1]);
                    d[r * (n1 + n2) + n1..(r + 1) * (n1 + n2)]
                        .copy_from_slice(&self.bufs[b].data[r * n2..(r + 1) * n2]);
                }
                self.bufs[out].data = d;
            }
            Op::BroadcastRows { x, out, rows } => {
                let mut d = Vec::with_capacity(rows * self.bufs[x].data.len());
                for _ in 0..rows {
                    d.extend_from_slice(&self.bufs[x].data);
                }
                self.bufs[out].data = d;
            }
            Op::RepeatRows { x, out, times } => {
                let xs = &self.bufs[x].shape;
                let (m, n) = (xs[0], xs[1]);
                let mut d = Vec::with_capacity(m * times * n);
                for r in 0..m {
                    let row = &self.bufs[x].data[r * n..(r + 1) * n];
                    for _ in 0..times {
                        d.extend_from_slice(row);
                    }
                }
                self.bufs[out].data = d;
            }
            Op::Add { a, b, out } => {
                self.bufs[out].data = self.bufs[a]
                    .data
                    .iter()
                    .zip(&self.bufs[b].data)
                    .map(|(&x, &y)| x + y)
                    .collect();
            }
            Op::Sub { a, b, out } => {
                self.bufs[out].data = self.bufs[a]
                    .data
                    .iter()
                    .zip(&self.bufs[b].data)
                    .map(|(&x, &y)| x - y)
                    .collect();
            }
            Op::Mul { a, b, out } => {
                self.bufs[out].data = self.bufs[a]
                    .data
                    .iter()
                    .zip(&self.bufs[b].data)
                    .map(|(&x, &y)| x * y)
                    .collect();
            }
            Op::Scale { x, out, c } => {
                self.bufs[out].data = self.bufs[x].data.iter().map(|&v| v * c).collect();
            }
            Op::Ln { x, out } => {
                self.bufs[out].data = self.bufs[x].data.iter().map(|&v| v.ln()).collect();
            }
            Op::Sum { x, out } => {
                self.bufs[out].data = vec![self.bufs[x].data.iter().sum()];
            }
            Op::RowMean { x, out } => {
                let xs = &self.bufs[x].shape;
                let (m, u) = (xs[0], xs[1]);
                let inv = 1.0 / u as f32;
                self.bufs[out].data = (0..m)
                    .map(|r| self.bufs[x].data[r * u..(r + 1) * u].iter().sum::<f32>() * inv)
                    .collect();
            }
            Op::DivByScalar { x, s, out } => {
                let sv = self.bufs[s].data[0];
                self.bufs[out].data = self.bufs[x].data.iter().map(|&v| v / sv).collect();
            }
            Op::Gauss2 { x, out, target, sigma } => {
                let t = self.bufs[out].data.len();
                let norm = 1.0 / (2.0 * std::f32::consts::PI * sigma * sigma);
                let inv2s2 = 1.0 / (2.0 * sigma * sigma);
                self.bufs[out].data = (0..t)
                    .map(|r| {
                        let dx = self.bufs[x].data[r * 2] - target[0];
                        let dy = self.bufs[x].data[r * 2 + 1] - target[1];
                        norm * (-(dx * dx + dy * dy) * inv2s2).exp()
                    })
                    .collect();
            }
            Op::Reshape { x, out } => {
                self.bufs[out].data = self.bufs[x].data.clone();
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected [C,H,W], got {:?}", shape);
    (shape[0], shape[1], shape[2])
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

// ── kernels ──────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn conv2d_fwd(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    out: &mut [f32],
    c_in: usize,
    h: usize,
    wd: usize,
    o: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
) {
    for oc in 0..o {
        let bias = b[oc];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                let iy0 = (oy * stride) as isize - pad as isize;
                let ix0 = (ox * stride) as isize - pad as isize;
                for ic in 0..c_in {
                    let xoff = ic * h * wd;
                    let woff = (oc * c_in + ic) * 9;
                    for ky in 0..3 {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x[xoff + iy as usize * wd + ix as usize] * w[woff + ky * 3 + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_input(
    d_out: &[f32],
    w: &[f32],
    d_x: &mut [f32],
    c_in: usize,
    h: usize,
    wd: usize,
    o: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
) {
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = d_out[(oc * oh + oy) * ow + ox];
                if d == 0.0 {
                    continue;
                }
                let iy0 = (oy * stride) as isize - pad as isize;
                let ix0 = (ox * stride) as isize - pad as isize;
                for ic in 0..c_in {
                    let xoff = ic * h * wd;
                    let woff = (oc * c_in + ic) * 9;
                    for ky in 0..3 {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            d_x[xoff + iy as usize * wd + ix as usize] += d * w[woff + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_params(
    d_out: &[f32],
    x: &[f32],
    d_w: &mut [f32],
    d_b: &mut [f32],
    c_in: usize,
    h: usize,
    wd: usize,
    o: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
) {
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = d_out[(oc * oh + oy) * ow + ox];
                if d == 0.0 {
                    continue;
                }
                d_b[oc] += d;
                let iy0 = (oy * stride) as isize - pad as isize;
                let ix0 = (ox * stride) as isize - pad as isize;
                for ic in 0..c_in {
                    let xoff = ic * h * wd;
                    let woff = (oc * c_in + ic) * 9;
                    for ky in 0..3 {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            d_w[woff + ky * 3 + kx] += d * x[xoff + iy as usize * wd + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn maxpool2_fwd(x: &[f32], out: &mut [f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) {
    for ch in 0..c {
        let xoff = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for dy in 0..2 {
                    let iy = oy * 2 + dy;
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..2 {
                        let ix = ox * 2 + dx;
                        if ix >= w {
                            continue;
                        }
                        let v = x[xoff + iy * w + ix];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
            }
        }
    }
}

fn maxpool2_bwd(
    x: &[f32],
    d_out: &[f32],
    d_x: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    for ch in 0..c {
        let xoff = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut arg = 0usize;
                for dy in 0..2 {
                    let iy = oy * 2 + dy;
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..2 {
                        let ix = ox * 2 + dx;
                        if ix >= w {
                            continue;
                        }
                        let v = x[xoff + iy * w + ix];
                        if v > best {
                            best = v;
                            arg = xoff + iy * w + ix;
                        }
                    }
                }
                d_x[arg] += d_out[(ch * oh + oy) * ow + ox];
            }
        }
    }
}

fn linear_fwd(x: &[f32], w: &[f32], b: &[f32], out: &mut [f32], rows: usize, n: usize, m: usize) {
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let or = &mut out[r * m..(r + 1) * m];
        for j in 0..m {
            let wrow = &w[j * n..(j + 1) * n];
            let mut acc = b[j];
            for k in 0..n {
                acc += xr[k] * wrow[k];
            }
            or[j] = acc;
        }
    }
}
