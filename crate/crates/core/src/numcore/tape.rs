use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_finite, NumError, Tensor};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`]. Cheap to copy; only valid for
/// the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: u32,
}

struct Val {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Val {
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => (1, self.data.len()),
        }
    }
}

/// Per-value gradient buffers; an empty buffer stands for all zeros.
struct Grads {
    slots: Vec<Vec<f64>>,
}

impl Grads {
    fn slot(&mut self, idx: u32, len: usize) -> &mut [f64] {
        let v = &mut self.slots[idx as usize];
        if v.is_empty() {
            v.resize(len, 0.0);
        }
        v
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[Val], &mut Grads)>;

struct Node {
    out: u32,
    backward: BackwardFn,
}

/// Gradients of one scalar root with respect to every tape value, produced
/// by [`Tape::backward`].
pub struct GradMap {
    tape: u64,
    slots: Vec<Vec<f64>>,
}

impl GradMap {
    /// Gradient for `v`, or `None` when the root does not depend on it
    /// (equivalent to an all-zero gradient).
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        let slot = self.slots.get(v.idx as usize)?;
        if slot.is_empty() {
            None
        } else {
            Some(slot)
        }
    }
}

/// Records tensor-granular operations and replays their local gradients in
/// reverse. One tape serves one optimizer step; create a fresh tape per step.
pub struct Tape {
    id: u64,
    vals: Vec<Val>,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            vals: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Number of recorded differentiable operations.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.vals.push(Val { shape, data, requires_grad });
        Var { tape: self.id, idx: (self.vals.len() - 1) as u32 }
    }

    fn get(&self, v: Var, op: &'static str) -> Result<&Val, NumError> {
        if v.tape != self.id {
            return Err(NumError::ForeignVar { op });
        }
        self.vals.get(v.idx as usize).ok_or(NumError::ForeignVar { op })
    }

    fn record(&mut self, out: Var, backward: BackwardFn) {
        self.nodes.push(Node { out: out.idx, backward });
    }

    /// Copies a tensor onto the tape, keeping its trainability.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Copies a tensor onto the tape with trainability stripped. Passes
    /// through frozen snapshots record no backward nodes.
    pub fn frozen_leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// A non-trainable value.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, NumError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumError::ShapeDataMismatch { shape, len: data.len() });
        }
        check_finite("constant", &data)?;
        Ok(self.push(shape, data, false))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Var, NumError> {
        self.constant(Vec::new(), vec![v])
    }

    pub fn constant_vec(&mut self, data: &[f64]) -> Result<Var, NumError> {
        self.constant(vec![data.len()], data.to_vec())
    }

    pub fn value(&self, v: Var) -> Result<&[f64], NumError> {
        Ok(&self.get(v, "value")?.data)
    }

    pub fn shape_of(&self, v: Var) -> Result<&[usize], NumError> {
        Ok(&self.get(v, "shape_of")?.shape)
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64, NumError> {
        let val = self.get(v, "scalar_value")?;
        if val.data.len() != 1 {
            return Err(NumError::BadShape {
                op: "scalar_value",
                shape: val.shape.clone(),
                expected: "scalar".into(),
            });
        }
        Ok(val.data[0])
    }

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var, NumError> {
        let (va, vb) = (self.get(a, op)?, self.get(b, op)?);
        if va.shape != vb.shape {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let data: Vec<f64> =
            va.data.iter().zip(vb.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        check_finite(op, &data)?;
        let rg = va.requires_grad || vb.requires_grad;
        let shape = va.shape.clone();
        let out = self.push(shape, data, rg);
        if rg {
            let (ai, bi, n) = (a.idx, b.idx, self.vals[a.idx as usize].data.len());
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let (xa, xb) = (&vals[ai as usize].data, &vals[bi as usize].data);
                    if vals[ai as usize].requires_grad {
                        let sa = grads.slot(ai, n);
                        for i in 0..n {
                            sa[i] += g[i] * da(xa[i], xb[i]);
                        }
                    }
                    if vals[bi as usize].requires_grad {
                        let sb = grads.slot(bi, n);
                        for i in 0..n {
                            sb[i] += g[i] * db(xa[i], xb[i]);
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    /// Sums any number of same-shaped values.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let op = "add_n";
        if parts.is_empty() {
            return Err(NumError::Domain { op, detail: "empty operand list".into() });
        }
        let shape = self.get(parts[0], op)?.shape.clone();
        let mut data = vec![0.0; shape.iter().product()];
        let mut rg = false;
        for &p in parts {
            let v = self.get(p, op)?;
            if v.shape != shape {
                return Err(NumError::ShapeMismatch {
                    op,
                    lhs: shape,
                    rhs: v.shape.clone(),
                });
            }
            rg |= v.requires_grad;
            for (d, x) in data.iter_mut().zip(v.data.iter()) {
                *d += x;
            }
        }
        check_finite(op, &data)?;
        let n = data.len();
        let out = self.push(shape, data, rg);
        if rg {
            let idxs: Vec<u32> = parts.iter().map(|p| p.idx).collect();
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    for &pi in &idxs {
                        if vals[pi as usize].requires_grad {
                            let s = grads.slot(pi, n);
                            for i in 0..n {
                                s[i] += g[i];
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64, f64) -> f64 + 'static, // (x, y) -> dy/dx
    ) -> Result<Var, NumError> {
        let va = self.get(a, op)?;
        let data: Vec<f64> = va.data.iter().map(|&x| f(x)).collect();
        check_finite(op, &data)?;
        let rg = va.requires_grad;
        let shape = va.shape.clone();
        let out = self.push(shape, data, rg);
        if rg {
            let (ai, oi) = (a.idx, out.idx);
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let x = &vals[ai as usize].data;
                    let y = &vals[oi as usize].data;
                    let n = x.len();
                    let s = grads.slot(ai, n);
                    for i in 0..n {
                        s[i] += g[i] * dfdx(x[i], y[i]);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Elementwise `k * a + c`.
    pub fn affine_scalar(&mut self, a: Var, k: f64, c: f64) -> Result<Var, NumError> {
        self.unary("affine_scalar", a, |x| k * x + c, move |_, _| k)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary("relu", a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary("tanh", a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumError> {
        self.unary("exp", a, f64::exp, |_, y| y)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, NumError> {
        // Subgradient 0 at the kink.
        self.unary("abs", a, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, NumError> {
        let va = self.get(a, "log")?;
        if va.data.iter().any(|&x| x <= 0.0) {
            return Err(NumError::Domain {
                op: "log",
                detail: "input must be strictly positive".into(),
            });
        }
        self.unary("log", a, f64::ln, |x, _| 1.0 / x)
    }

    /// `ln(max(x, floor))`; the gradient is `1/x` above the floor and zero at
    /// or below it, which is the exact derivative of the clamped composite.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var, NumError> {
        if !(floor > 0.0) {
            return Err(NumError::Domain {
                op: "log_clamped",
                detail: format!("floor must be positive, got {floor}"),
            });
        }
        self.unary(
            "log_clamped",
            a,
            move |x| x.max(floor).ln(),
            move |x, _| if x > floor { 1.0 / x } else { 0.0 },
        )
    }

    /// Full reduction to a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, NumError> {
        let va = self.get(a, "sum_all")?;
        let s: f64 = va.data.iter().sum();
        check_finite("sum_all", &[s])?;
        let rg = va.requires_grad;
        let n = va.data.len();
        let out = self.push(Vec::new(), vec![s], rg);
        if rg {
            let ai = a.idx;
            self.record(
                out,
                Box::new(move |g, _, grads| {
                    let s = grads.slot(ai, n);
                    for gi in s.iter_mut() {
                        *gi += g[0];
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Column means of an `n x d` matrix: the token-pooling reduction.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let va = self.get(a, "mean_rows")?;
        if va.shape.len() != 2 || va.shape[0] == 0 {
            return Err(NumError::BadShape {
                op: "mean_rows",
                shape: va.shape.clone(),
                expected: "rank-2 with at least one row".into(),
            });
        }
        let (n, d) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                data[j] += va.data[i * d + j];
            }
        }
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        check_finite("mean_rows", &data)?;
        let rg = va.requires_grad;
        let out = self.push(vec![d], data, rg);
        if rg {
            let ai = a.idx;
            self.record(
                out,
                Box::new(move |g, _, grads| {
                    let s = grads.slot(ai, n * d);
                    for i in 0..n {
                        for j in 0..d {
                            s[i * d + j] += g[j] * inv;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// `a (n x p) . b (p x q)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let op = "matmul";
        let (va, vb) = (self.get(a, op)?, self.get(b, op)?);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (n, p, q) = (va.shape[0], va.shape[1], vb.shape[1]);
        let data = matmul_raw(&va.data, &vb.data, n, p, q);
        check_finite(op, &data)?;
        let rg = va.requires_grad || vb.requires_grad;
        let out = self.push(vec![n, q], data, rg);
        if rg {
            let (ai, bi) = (a.idx, b.idx);
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let (xa, xb) = (&vals[ai as usize].data, &vals[bi as usize].data);
                    if vals[ai as usize].requires_grad {
                        // dA[i,k] += sum_j G[i,j] B[k,j]
                        let sa = grads.slot(ai, n * p);
                        for i in 0..n {
                            for k in 0..p {
                                let mut s = 0.0;
                                for j in 0..q {
                                    s += g[i * q + j] * xb[k * q + j];
                                }
                                sa[i * p + k] += s;
                            }
                        }
                    }
                    if vals[bi as usize].requires_grad {
                        // dB[k,j] += sum_i A[i,k] G[i,j]
                        let sb = grads.slot(bi, p * q);
                        for i in 0..n {
                            for k in 0..p {
                                let aik = xa[i * p + k];
                                if aik != 0.0 {
                                    for j in 0..q {
                                        sb[k * q + j] += aik * g[i * q + j];
                                    }
                                }
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// `m (k x d) . v (d)` giving a length-`k` vector.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, NumError> {
        let op = "matvec";
        let (vm, vv) = (self.get(m, op)?, self.get(v, op)?);
        if vm.shape.len() != 2 || vv.shape.len() != 1 || vm.shape[1] != vv.shape[0] {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: vm.shape.clone(),
                rhs: vv.shape.clone(),
            });
        }
        let (k, d) = (vm.shape[0], vm.shape[1]);
        let mut data = vec![0.0; k];
        for i in 0..k {
            let row = &vm.data[i * d..(i + 1) * d];
            data[i] = row.iter().zip(vv.data.iter()).map(|(a, b)| a * b).sum();
        }
        check_finite(op, &data)?;
        let rg = vm.requires_grad || vv.requires_grad;
        let out = self.push(vec![k], data, rg);
        if rg {
            let (mi, vi) = (m.idx, v.idx);
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let (xm, xv) = (&vals[mi as usize].data, &vals[vi as usize].data);
                    if vals[mi as usize].requires_grad {
                        let sm = grads.slot(mi, k * d);
                        for i in 0..k {
                            for j in 0..d {
                                sm[i * d + j] += g[i] * xv[j];
                            }
                        }
                    }
                    if vals[vi as usize].requires_grad {
                        let sv = grads.slot(vi, d);
                        for i in 0..k {
                            let gi = g[i];
                            if gi != 0.0 {
                                for j in 0..d {
                                    sv[j] += gi * xm[i * d + j];
                                }
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let va = self.get(a, "transpose")?;
        if va.shape.len() != 2 {
            return Err(NumError::BadShape {
                op: "transpose",
                shape: va.shape.clone(),
                expected: "rank-2 tensor".into(),
            });
        }
        let (n, p) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                data[j * n + i] = va.data[i * p + j];
            }
        }
        let rg = va.requires_grad;
        let out = self.push(vec![p, n], data, rg);
        if rg {
            let ai = a.idx;
            self.record(
                out,
                Box::new(move |g, _, grads| {
                    let s = grads.slot(ai, n * p);
                    for i in 0..n {
                        for j in 0..p {
                            s[i * p + j] += g[j * n + i];
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// `x (n x p) . w (p x q) + b (q)` with the bias added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let op = "affine";
        let (vx, vw, vb) = (self.get(x, op)?, self.get(w, op)?, self.get(b, op)?);
        if vx.shape.len() != 2 || vw.shape.len() != 2 || vx.shape[1] != vw.shape[0] {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: vx.shape.clone(),
                rhs: vw.shape.clone(),
            });
        }
        if vb.shape.len() != 1 || vb.shape[0] != vw.shape[1] {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: vw.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (n, p, q) = (vx.shape[0], vx.shape[1], vw.shape[1]);
        let mut data = matmul_raw(&vx.data, &vw.data, n, p, q);
        for i in 0..n {
            for j in 0..q {
                data[i * q + j] += vb.data[j];
            }
        }
        check_finite(op, &data)?;
        let rg = vx.requires_grad || vw.requires_grad || vb.requires_grad;
        let out = self.push(vec![n, q], data, rg);
        if rg {
            let (xi, wi, bi) = (x.idx, w.idx, b.idx);
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let (xd, wd) = (&vals[xi as usize].data, &vals[wi as usize].data);
                    if vals[xi as usize].requires_grad {
                        let sx = grads.slot(xi, n * p);
                        for i in 0..n {
                            for k in 0..p {
                                let mut s = 0.0;
                                for j in 0..q {
                                    s += g[i * q + j] * wd[k * q + j];
                                }
                                sx[i * p + k] += s;
                            }
                        }
                    }
                    if vals[wi as usize].requires_grad {
                        let sw = grads.slot(wi, p * q);
                        for i in 0..n {
                            for k in 0..p {
                                let xik = xd[i * p + k];
                                if xik != 0.0 {
                                    for j in 0..q {
                                        sw[k * q + j] += xik * g[i * q + j];
                                    }
                                }
                            }
                        }
                    }
                    if vals[bi as usize].requires_grad {
                        let sb = grads.slot(bi, q);
                        for i in 0..n {
                            for j in 0..q {
                                sb[j] += g[i * q + j];
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Stacks parts vertically. Rank-1 parts count as single rows; all parts
    /// must agree on the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let op = "concat_rows";
        if parts.is_empty() {
            return Err(NumError::Domain { op, detail: "empty operand list".into() });
        }
        let (_, cols) = self.get(parts[0], op)?.rows_cols();
        let mut total_rows = 0usize;
        let mut rg = false;
        for &p in parts {
            let v = self.get(p, op)?;
            let (r, c) = v.rows_cols();
            if c != cols || v.shape.len() > 2 {
                return Err(NumError::ShapeMismatch {
                    op,
                    lhs: vec![total_rows, cols],
                    rhs: v.shape.clone(),
                });
            }
            total_rows += r;
            rg |= v.requires_grad;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.vals[p.idx as usize].data);
        }
        let out = self.push(vec![total_rows, cols], data, rg);
        if rg {
            let idxs: Vec<u32> = parts.iter().map(|p| p.idx).collect();
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let mut offset = 0usize;
                    for &pi in &idxs {
                        let len = vals[pi as usize].data.len();
                        if vals[pi as usize].requires_grad {
                            let s = grads.slot(pi, len);
                            for i in 0..len {
                                s[i] += g[offset + i];
                            }
                        }
                        offset += len;
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Selects rows of a rank-2 tensor; duplicate indices are allowed and
    /// their gradients accumulate.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumError> {
        let op = "gather_rows";
        let va = self.get(a, op)?;
        if va.shape.len() != 2 {
            return Err(NumError::BadShape {
                op,
                shape: va.shape.clone(),
                expected: "rank-2 tensor".into(),
            });
        }
        let (n, d) = (va.shape[0], va.shape[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(NumError::IndexOutOfBounds { op, index: i, len: n });
            }
            data.extend_from_slice(&va.data[i * d..(i + 1) * d]);
        }
        let rg = va.requires_grad;
        let out = self.push(vec![idx.len(), d], data, rg);
        if rg {
            let ai = a.idx;
            let idx = idx.to_vec();
            self.record(
                out,
                Box::new(move |g, _, grads| {
                    let s = grads.slot(ai, n * d);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            s[i * d + j] += g[k * d + j];
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// One row of a rank-2 tensor as a rank-1 vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, NumError> {
        let op = "row";
        let va = self.get(a, op)?;
        if va.shape.len() != 2 {
            return Err(NumError::BadShape {
                op,
                shape: va.shape.clone(),
                expected: "rank-2 tensor".into(),
            });
        }
        let (n, d) = (va.shape[0], va.shape[1]);
        if i >= n {
            return Err(NumError::IndexOutOfBounds { op, index: i, len: n });
        }
        let data = va.data[i * d..(i + 1) * d].to_vec();
        let rg = va.requires_grad;
        let out = self.push(vec![d], data, rg);
        if rg {
            let ai = a.idx;
            self.record(
                out,
                Box::new(move |g, _, grads| {
                    let s = grads.slot(ai, n * d);
                    for j in 0..d {
                        s[i * d + j] += g[j];
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Selects elements of a rank-1 vector.
    pub fn gather_elems(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumError> {
        let op = "gather_elems";
        let va = self.get(a, op)?;
        if va.shape.len() != 1 {
            return Err(NumError::BadShape {
                op,
                shape: va.shape.clone(),
                expected: "rank-1 vector".into(),
            });
        }
        let n = va.shape[0];
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= n {
                return Err(NumError::IndexOutOfBounds { op, index: i, len: n });
            }
            data.push(va.data[i]);
        }
        let rg = va.requires_grad;
        let out = self.push(vec![idx.len()], data, rg);
        if rg {
            let ai = a.idx;
            let idx = idx.to_vec();
            self.record(
                out,
                Box::new(move |g, _, grads| {
                    let s = grads.slot(ai, n);
                    for (k, &i) in idx.iter().enumerate() {
                        s[i] += g[k];
                    }
                }),
            );
        }
        Ok(out)
    }

    /// L2-normalizes each row (a rank-1 input counts as one row). An exactly
    /// zero row maps to the zero row and passes no gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let op = "normalize_rows";
        let va = self.get(a, op)?;
        if va.shape.is_empty() || va.shape.len() > 2 {
            return Err(NumError::BadShape {
                op,
                shape: va.shape.clone(),
                expected: "rank-1 or rank-2 tensor".into(),
            });
        }
        let (n, d) = va.rows_cols();
        let mut data = vec![0.0; n * d];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &va.data[i * d..(i + 1) * d];
            let r = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[i] = r;
            if r > 0.0 {
                for j in 0..d {
                    data[i * d + j] = row[j] / r;
                }
            }
        }
        check_finite(op, &data)?;
        let rg = va.requires_grad;
        let shape = va.shape.clone();
        let out = self.push(shape, data, rg);
        if rg {
            let (ai, oi) = (a.idx, out.idx);
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let y = &vals[oi as usize].data;
                    let s = grads.slot(ai, n * d);
                    for i in 0..n {
                        let r = norms[i];
                        if r == 0.0 {
                            continue;
                        }
                        let (ys, gs) = (&y[i * d..(i + 1) * d], &g[i * d..(i + 1) * d]);
                        let gy: f64 = ys.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            s[i * d + j] += (gs[j] - ys[j] * gy) / r;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Temperature softmax of a vector, with max subtraction for stability.
    pub fn softmax_t(&mut self, z: Var, tau: f64) -> Result<Var, NumError> {
        let shape = self.get(z, "softmax_t")?.shape.clone();
        if shape.len() != 1 || shape[0] == 0 {
            return Err(NumError::BadShape {
                op: "softmax_t",
                shape,
                expected: "non-empty rank-1 vector".into(),
            });
        }
        self.softmax_impl("softmax_t", z, tau)
    }

    /// Row-wise temperature softmax of an `n x k` matrix.
    pub fn softmax_rows(&mut self, z: Var, tau: f64) -> Result<Var, NumError> {
        let shape = self.get(z, "softmax_rows")?.shape.clone();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(NumError::BadShape {
                op: "softmax_rows",
                shape,
                expected: "rank-2 with non-empty rows".into(),
            });
        }
        self.softmax_impl("softmax_rows", z, tau)
    }

    fn softmax_impl(&mut self, op: &'static str, z: Var, tau: f64) -> Result<Var, NumError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(NumError::Domain {
                op,
                detail: format!("temperature must be positive and finite, got {tau}"),
            });
        }
        let vz = self.get(z, op)?;
        let (n, k) = vz.rows_cols();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let row = &vz.data[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = ((row[j] - m) / tau).exp();
                data[i * k + j] = e;
                sum += e;
            }
            for j in 0..k {
                data[i * k + j] /= sum;
            }
        }
        check_finite(op, &data)?;
        let rg = vz.requires_grad;
        let shape = vz.shape.clone();
        let out = self.push(shape, data, rg);
        if rg {
            let (zi, oi) = (z.idx, out.idx);
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let p = &vals[oi as usize].data;
                    let s = grads.slot(zi, n * k);
                    for i in 0..n {
                        let (ps, gs) = (&p[i * k..(i + 1) * k], &g[i * k..(i + 1) * k]);
                        let dot: f64 = ps.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            s[i * k + j] += ps[j] * (gs[j] - dot) / tau;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Cosine similarity of two vectors; rejects zero vectors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var, NumError> {
        let op = "cosine";
        let (vu, vv) = (self.get(u, op)?, self.get(v, op)?);
        if vu.shape.len() != 1 || vu.shape != vv.shape {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: vu.shape.clone(),
                rhs: vv.shape.clone(),
            });
        }
        let d = vu.shape[0];
        let dot: f64 = vu.data.iter().zip(vv.data.iter()).map(|(a, b)| a * b).sum();
        let ru = vu.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rv = vv.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        if ru == 0.0 || rv == 0.0 {
            return Err(NumError::Domain { op, detail: "zero vector has no direction".into() });
        }
        let c = dot / (ru * rv);
        check_finite(op, &[c])?;
        let rg = vu.requires_grad || vv.requires_grad;
        let out = self.push(Vec::new(), vec![c], rg);
        if rg {
            let (ui, vi) = (u.idx, v.idx);
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let (xu, xv) = (&vals[ui as usize].data, &vals[vi as usize].data);
                    let g0 = g[0];
                    if vals[ui as usize].requires_grad {
                        let s = grads.slot(ui, d);
                        for j in 0..d {
                            s[j] += g0 * (xv[j] / (ru * rv) - c * xu[j] / (ru * ru));
                        }
                    }
                    if vals[vi as usize].requires_grad {
                        let s = grads.slot(vi, d);
                        for j in 0..d {
                            s[j] += g0 * (xu[j] / (ru * rv) - c * xv[j] / (rv * rv));
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Scales every element of `a` by the scalar value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let op = "scale_by";
        let (va, vs) = (self.get(a, op)?, self.get(s, op)?);
        if vs.data.len() != 1 {
            return Err(NumError::BadShape {
                op,
                shape: vs.shape.clone(),
                expected: "scalar".into(),
            });
        }
        let sv = vs.data[0];
        let data: Vec<f64> = va.data.iter().map(|&x| x * sv).collect();
        check_finite(op, &data)?;
        let rg = va.requires_grad || vs.requires_grad;
        let shape = va.shape.clone();
        let out = self.push(shape, data, rg);
        if rg {
            let (ai, si) = (a.idx, s.idx);
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let xa = &vals[ai as usize].data;
                    let n = xa.len();
                    if vals[ai as usize].requires_grad {
                        let sa = grads.slot(ai, n);
                        for i in 0..n {
                            sa[i] += g[i] * sv;
                        }
                    }
                    if vals[si as usize].requires_grad {
                        let acc: f64 = g.iter().zip(xa.iter()).map(|(a, b)| a * b).sum();
                        grads.slot(si, 1)[0] += acc;
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Batch normalization over the rows of `x (n x d)` using batch
    /// statistics. Returns the output plus the biased batch mean and variance
    /// per column so the caller can maintain running statistics, which stay
    /// outside the gradient flow.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), NumError> {
        let op = "batchnorm_train";
        let (vx, vg, vb) = (self.get(x, op)?, self.get(gamma, op)?, self.get(beta, op)?);
        if vx.shape.len() != 2 || vx.shape[0] == 0 {
            return Err(NumError::BadShape {
                op,
                shape: vx.shape.clone(),
                expected: "rank-2 with at least one row".into(),
            });
        }
        let (n, d) = (vx.shape[0], vx.shape[1]);
        if vg.shape != [d] || vb.shape != [d] {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: vx.shape.clone(),
                rhs: vg.shape.clone(),
            });
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += vx.data[i * d + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let c = vx.data[i * d + j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (vx.data[i * d + j] - mean[j]) * inv[j];
                xhat[i * d + j] = h;
                data[i * d + j] = vg.data[j] * h + vb.data[j];
            }
        }
        check_finite(op, &data)?;
        let rg = vx.requires_grad || vg.requires_grad || vb.requires_grad;
        let out = self.push(vec![n, d], data, rg);
        if rg {
            let (xi, gi, bi) = (x.idx, gamma.idx, beta.idx);
            let inv_b = inv.clone();
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let gam = &vals[gi as usize].data;
                    if vals[gi as usize].requires_grad {
                        let sg = grads.slot(gi, d);
                        for i in 0..n {
                            for j in 0..d {
                                sg[j] += g[i * d + j] * xhat[i * d + j];
                            }
                        }
                    }
                    if vals[bi as usize].requires_grad {
                        let sb = grads.slot(bi, d);
                        for i in 0..n {
                            for j in 0..d {
                                sb[j] += g[i * d + j];
                            }
                        }
                    }
                    if vals[xi as usize].requires_grad {
                        // Gradient through the batch statistics.
                        let mut sum_dh = vec![0.0; d];
                        let mut sum_dh_h = vec![0.0; d];
                        for i in 0..n {
                            for j in 0..d {
                                let dh = g[i * d + j] * gam[j];
                                sum_dh[j] += dh;
                                sum_dh_h[j] += dh * xhat[i * d + j];
                            }
                        }
                        let sx = grads.slot(xi, n * d);
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..d {
                                let dh = g[i * d + j] * gam[j];
                                sx[i * d + j] += inv_b[j] / nf
                                    * (nf * dh - sum_dh[j] - xhat[i * d + j] * sum_dh_h[j]);
                            }
                        }
                    }
                }),
            );
        }
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, NumError> {
        let op = "batchnorm_eval";
        let (vx, vg, vb) = (self.get(x, op)?, self.get(gamma, op)?, self.get(beta, op)?);
        if vx.shape.len() != 2 {
            return Err(NumError::BadShape {
                op,
                shape: vx.shape.clone(),
                expected: "rank-2 tensor".into(),
            });
        }
        let (n, d) = (vx.shape[0], vx.shape[1]);
        if vg.shape != [d] || vb.shape != [d] || running_mean.len() != d || running_var.len() != d
        {
            return Err(NumError::ShapeMismatch {
                op,
                lhs: vx.shape.clone(),
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        if running_var.iter().any(|&v| v + eps <= 0.0) {
            return Err(NumError::Domain {
                op,
                detail: "running variance must keep variance + eps positive".into(),
            });
        }
        let inv: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * d];
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (vx.data[i * d + j] - running_mean[j]) * inv[j];
                xhat[i * d + j] = h;
                data[i * d + j] = vg.data[j] * h + vb.data[j];
            }
        }
        check_finite(op, &data)?;
        let rg = vx.requires_grad || vg.requires_grad || vb.requires_grad;
        let out = self.push(vec![n, d], data, rg);
        if rg {
            let (xi, gi, bi) = (x.idx, gamma.idx, beta.idx);
            self.record(
                out,
                Box::new(move |g, vals, grads| {
                    let gam = &vals[gi as usize].data;
                    if vals[xi as usize].requires_grad {
                        let sx = grads.slot(xi, n * d);
                        for i in 0..n {
                            for j in 0..d {
                                sx[i * d + j] += g[i * d + j] * gam[j] * inv[j];
                            }
                        }
                    }
                    if vals[gi as usize].requires_grad {
                        let sg = grads.slot(gi, d);
                        for i in 0..n {
                            for j in 0..d {
                                sg[j] += g[i * d + j] * xhat[i * d + j];
                            }
                        }
                    }
                    if vals[bi as usize].requires_grad {
                        let sb = grads.slot(bi, d);
                        for i in 0..n {
                            for j in 0..d {
                                sb[j] += g[i * d + j];
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// rescales kept elements by `1/(1 - rate)`. `rate == 0` is the identity.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, NumError> {
        let op = "dropout";
        if !(0.0..1.0).contains(&rate) {
            return Err(NumError::Domain {
                op,
                detail: format!("rate must lie in [0, 1), got {rate}"),
            });
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let vx = self.get(x, op)?;
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..vx.data.len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let data: Vec<f64> = vx.data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        check_finite(op, &data)?;
        let rg = vx.requires_grad;
        let shape = vx.shape.clone();
        let out = self.push(shape, data, rg);
        if rg {
            let ai = x.idx;
            self.record(
                out,
                Box::new(move |g, _, grads| {
                    let s = grads.slot(ai, mask.len());
                    for i in 0..mask.len() {
                        s[i] += g[i] * mask[i];
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Reverse accumulation from a scalar root. Every value reachable from a
    /// trainable leaf receives its gradient; multiple uses of a value add up.
    pub fn backward(&self, root: Var) -> Result<GradMap, NumError> {
        let vr = self.get(root, "backward")?;
        if vr.data.len() != 1 {
            return Err(NumError::NonScalarRoot { shape: vr.shape.clone() });
        }
        let mut grads = Grads { slots: vec![Vec::new(); self.vals.len()] };
        grads.slot(root.idx, 1)[0] = 1.0;
        for node in self.nodes.iter().rev() {
            let g = std::mem::take(&mut grads.slots[node.out as usize]);
            if !g.is_empty() && g.iter().any(|&v| v != 0.0) {
                (node.backward)(&g, &self.vals, &mut grads);
            }
            grads.slots[node.out as usize] = g;
        }
        Ok(GradMap { tape: self.id, slots: grads.slots })
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * q];
    for i in 0..n {
        for k in 0..p {
            let aik = a[i * p + k];
            if aik != 0.0 {
                let (crow, brow) = (&mut c[i * q..(i + 1) * q], &b[k * q..(k + 1) * q]);
                for j in 0..q {
                    crow[j] += aik * brow[j];
                }
            }
        }
    }
    c
}
