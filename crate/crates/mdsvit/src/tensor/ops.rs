//! Differentiable tensor primitives.
//!
//! Each op computes its forward value eagerly and registers a backward rule
//! capturing only scalar parameters; input and output buffers are read back
//! through the graph during the reverse pass.

use super::{check_shape, par_chunks, Elem, OpCtx, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Raw kernels (shared by matmul, linear, conv, attention)
// ---------------------------------------------------------------------------

/// C[m,n] += A[m,k] * B[k,n]
pub(crate) fn matmul_acc<T: Elem>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    par_chunks(c, 8 * n, |start, chunk| {
        let row0 = start / n;
        for (ri, crow) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + ri;
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    });
}

/// C[m,n] += A[m,k] * B[n,k]^T  (dot products over contiguous rows)
pub(crate) fn matmul_nt_acc<T: Elem>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    par_chunks(c, 8 * n, |start, chunk| {
        let row0 = start / n;
        for (ri, crow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(row0 + ri) * k..(row0 + ri + 1) * k];
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut s = T::zero();
                for (&av, &bv) in arow.iter().zip(brow) {
                    s += av * bv;
                }
                *cv += s;
            }
        }
    });
}

/// C[k,n] += A[m,k]^T * B[m,n]
pub(crate) fn matmul_tn_acc<T: Elem>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    // Serial over m; each i-step is a rank-1 update of the whole output.
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape, or one side single-element)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Broadcast {
    None,
    ScalarLhs,
    ScalarRhs,
}

fn broadcast_kind<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::None)
    } else if b.numel() == 1 {
        Ok(Broadcast::ScalarRhs)
    } else if a.numel() == 1 {
        Ok(Broadcast::ScalarLhs)
    } else {
        Err(Error::shape(format!("{op}: shapes {:?} and {:?} do not match", a.shape(), b.shape())))
    }
}

macro_rules! binary_op {
    ($name:ident, $opname:literal, $fwd:expr, $da:expr, $db:expr) => {
        pub fn $name(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
            let kind = broadcast_kind(self, other, $opname)?;
            let (av, bv) = (self.data(), other.data());
            let fwd = $fwd;
            let data: Vec<T> = match kind {
                Broadcast::None => av.iter().zip(bv.iter()).map(|(&x, &y)| fwd(x, y)).collect(),
                Broadcast::ScalarRhs => {
                    let y = bv[0];
                    av.iter().map(|&x| fwd(x, y)).collect()
                }
                Broadcast::ScalarLhs => {
                    let x = av[0];
                    bv.iter().map(|&y| fwd(x, y)).collect()
                }
            };
            let shape = match kind {
                Broadcast::ScalarLhs => other.shape().to_vec(),
                _ => self.shape().to_vec(),
            };
            drop(av);
            drop(bv);
            Ok(Tensor::from_op(
                shape,
                data,
                $opname,
                vec![self.clone(), other.clone()],
                move |ctx: &OpCtx<'_, T>| {
                    let a = ctx.inputs[0].data();
                    let b = ctx.inputs[1].data();
                    let da_f = $da;
                    let db_f = $db;
                    let ea = |i: usize| match kind {
                        Broadcast::ScalarLhs => a[0],
                        _ => a[i],
                    };
                    let eb = |i: usize| match kind {
                        Broadcast::ScalarRhs => b[0],
                        _ => b[i],
                    };
                    let ga = ctx.needs(0).then(|| match kind {
                        Broadcast::ScalarLhs => {
                            vec![ctx.grad_out.iter().enumerate().map(|(i, &g)| da_f(ea(i), eb(i), g)).sum()]
                        }
                        _ => ctx
                            .grad_out
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| da_f(ea(i), eb(i), g))
                            .collect(),
                    });
                    let gb = ctx.needs(1).then(|| match kind {
                        Broadcast::ScalarRhs => {
                            vec![ctx.grad_out.iter().enumerate().map(|(i, &g)| db_f(ea(i), eb(i), g)).sum()]
                        }
                        _ => ctx
                            .grad_out
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| db_f(ea(i), eb(i), g))
                            .collect(),
                    });
                    vec![ga, gb]
                },
            ))
        }
    };
}

impl<T: Elem> Tensor<T> {
    binary_op!(add, "add", |x: T, y: T| x + y, |_a, _b, g: T| g, |_a, _b, g: T| g);
    binary_op!(sub, "sub", |x: T, y: T| x - y, |_a, _b, g: T| g, |_a: T, _b: T, g: T| -g);
    binary_op!(mul, "mul", |x: T, y: T| x * y, |_a, b: T, g: T| g * b, |a: T, _b, g: T| g * a);
    binary_op!(
        div,
        "div",
        |x: T, y: T| x / y,
        |_a, b: T, g: T| g / b,
        |a: T, b: T, g: T| -g * a / (b * b)
    );

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn minimum(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "minimum: shapes {:?} and {:?} do not match",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<T> =
            self.data().iter().zip(other.data().iter()).map(|(&x, &y)| if y < x { y } else { x }).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "minimum",
            vec![self.clone(), other.clone()],
            |ctx| {
                let a = ctx.inputs[0].data();
                let b = ctx.inputs[1].data();
                let ga = ctx.needs(0).then(|| {
                    ctx.grad_out
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| if a[i] <= b[i] { g } else { T::zero() })
                        .collect()
                });
                let gb = ctx.needs(1).then(|| {
                    ctx.grad_out
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| if b[i] < a[i] { g } else { T::zero() })
                        .collect()
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, "add_scalar", vec![self.clone()], |ctx| {
            vec![ctx.needs(0).then(|| ctx.grad_out.to_vec())]
        })
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, "mul_scalar", vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| ctx.grad_out.iter().map(|&g| g * c).collect())]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }
}

// ---------------------------------------------------------------------------
// Unary ops
// ---------------------------------------------------------------------------

macro_rules! unary_op {
    ($name:ident, $opname:literal, $fwd:expr, $bwd:expr) => {
        pub fn $name(&self) -> Tensor<T> {
            let fwd = $fwd;
            let data: Vec<T> = self.data().iter().map(|&x| fwd(x)).collect();
            Tensor::from_op(self.shape().to_vec(), data, $opname, vec![self.clone()], |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let bwd = $bwd;
                vec![ctx.needs(0).then(|| {
                    ctx.grad_out.iter().enumerate().map(|(i, &g)| g * bwd(x[i], y[i])).collect()
                })]
            })
        }
    };
}

impl<T: Elem> Tensor<T> {
    unary_op!(exp, "exp", |x: T| x.exp(), |_x, y: T| y);
    unary_op!(ln, "ln", |x: T| x.ln(), |x: T, _y| x.recip());
    unary_op!(sqrt, "sqrt", |x: T| x.sqrt(), |_x, y: T| (y + y).recip());
    unary_op!(relu, "relu", |x: T| x.max(T::zero()), |x: T, _y| if x > T::zero() {
        T::one()
    } else {
        T::zero()
    });
    unary_op!(sigmoid, "sigmoid", |x: T| (T::one() + (-x).exp()).recip(), |_x, y: T| y
        * (T::one() - y));
    unary_op!(tanh, "tanh", |x: T| x.tanh(), |_x, y: T| T::one() - y * y);

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&x| {
                let u = c * (x + a * x * x * x);
                half * x * (T::one() + u.tanh())
            })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, "gelu", vec![self.clone()], move |ctx| {
            let x = ctx.inputs[0].data();
            vec![ctx.needs(0).then(|| {
                ctx.grad_out
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let xi = x[i];
                        let u = c * (xi + a * xi * xi * xi);
                        let t = u.tanh();
                        let sech2 = T::one() - t * t;
                        let du = c * (T::one() + (a + a + a) * xi * xi);
                        g * (half * (T::one() + t) + half * xi * sech2 * du)
                    })
                    .collect()
            })]
        })
    }

    /// Custom elementwise op with a caller-supplied derivative. `df` receives
    /// `(x, y)` and returns dy/dx.
    pub fn custom_unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T + 'static,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, name, vec![self.clone()], move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            vec![ctx
                .needs(0)
                .then(|| ctx.grad_out.iter().enumerate().map(|(i, &g)| g * df(x[i], y[i])).collect())]
        })
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

fn validate_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() {
        return Err(Error::shape(format!("duplicate reduction axes {axes:?}")));
    }
    for &a in &sorted {
        if a >= rank {
            return Err(Error::Axis { axis: a, rank });
        }
    }
    Ok(sorted)
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let keep: Vec<usize> =
        shape.iter().enumerate().filter(|(d, _)| !axes.contains(d)).map(|(_, &e)| e).collect();
    if keep.is_empty() {
        vec![1]
    } else {
        keep
    }
}

/// For each input linear index, the linear index of its reduction output.
fn out_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let out_shape = reduced_shape(shape, axes);
    let out_strides = strides_of(&out_shape);
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let n: usize = shape.iter().product();
    let mut map = vec![0usize; n];
    for (i, m) in map.iter_mut().enumerate() {
        let mut out = 0;
        for (od, &d) in kept.iter().enumerate() {
            let coord = (i / in_strides[d]) % shape[d];
            out += coord * out_strides[od];
        }
        *m = out;
    }
    map
}

impl<T: Elem> Tensor<T> {
    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![1], vec![s], "sum", vec![self.clone()], |ctx| {
            let g = ctx.grad_out[0];
            vec![ctx.needs(0).then(|| vec![g; ctx.inputs[0].numel()])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64(self.numel() as f64);
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![1], vec![s / n], "mean", vec![self.clone()], move |ctx| {
            let g = ctx.grad_out[0] / n;
            vec![ctx.needs(0).then(|| vec![g; ctx.inputs[0].numel()])]
        })
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let axes = validate_axes(axes, self.rank())?;
        let out_shape = reduced_shape(self.shape(), &axes);
        let map = out_index_map(self.shape(), &axes);
        let mut data = vec![T::zero(); out_shape.iter().product()];
        for (i, &x) in self.data().iter().enumerate() {
            data[map[i]] += x;
        }
        Ok(Tensor::from_op(out_shape, data, "sum", vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| map.iter().map(|&o| ctx.grad_out[o]).collect())]
        }))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let axes = validate_axes(axes, self.rank())?;
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        let inv = T::from_f64(1.0 / count as f64);
        Ok(self.sum_axes(&axes)?.mul_scalar(inv))
    }

    fn extremum(&self, axes: &[usize], take_max: bool) -> Result<Tensor<T>> {
        let axes = validate_axes(axes, self.rank())?;
        let out_shape = reduced_shape(self.shape(), &axes);
        let map = out_index_map(self.shape(), &axes);
        let n_out: usize = out_shape.iter().product();
        let mut best = vec![if take_max { T::neg_infinity() } else { T::infinity() }; n_out];
        let mut arg = vec![usize::MAX; n_out];
        // Strict comparison keeps the first extremum in row-major order.
        for (i, &x) in self.data().iter().enumerate() {
            let o = map[i];
            let better = if take_max { x > best[o] } else { x < best[o] };
            if better || arg[o] == usize::MAX {
                best[o] = x;
                arg[o] = i;
            }
        }
        let name = if take_max { "max" } else { "min" };
        Ok(Tensor::from_op(out_shape, best, name, vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut g = vec![T::zero(); ctx.inputs[0].numel()];
                for (o, &i) in arg.iter().enumerate() {
                    g[i] += ctx.grad_out[o];
                }
                g
            })]
        }))
    }

    pub fn max_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.extremum(axes, true)
    }

    pub fn min_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.extremum(axes, false)
    }

    pub fn max_all(&self) -> Tensor<T> {
        let all: Vec<usize> = (0..self.rank()).collect();
        self.extremum(&all, true).expect("full-rank axes are valid")
    }

    pub fn min_all(&self) -> Tensor<T> {
        let all: Vec<usize> = (0..self.rank()).collect();
        self.extremum(&all, false).expect("full-rank axes are valid")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::Axis { axis, rank: self.rank() });
        }
        let shape = self.shape().to_vec();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..axis_len {
                    m = m.max(x[base + k * inner]);
                }
                let mut z = T::zero();
                for k in 0..axis_len {
                    let e = (x[base + k * inner] - m).exp();
                    data[base + k * inner] = e;
                    z += e;
                }
                let inv = z.recip();
                for k in 0..axis_len {
                    data[base + k * inner] *= inv;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(shape, data, "softmax", vec![self.clone()], move |ctx| {
            let y = ctx.output.data();
            vec![ctx.needs(0).then(|| {
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = T::zero();
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            dot += y[idx] * ctx.grad_out[idx];
                        }
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            g[idx] = y[idx] * (ctx.grad_out[idx] - dot);
                        }
                    }
                }
                g
            })]
        }))
    }
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

impl<T: Elem> Tensor<T> {
    /// Matrix product. Accepts `[m,k] x [k,n]`, batched `[b,m,k] x [b,k,n]`,
    /// and a batched lhs against a shared 2-D rhs.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (ashape, bshape) = (self.shape().to_vec(), other.shape().to_vec());
        let (batch, m, k, n, shared_rhs) = match (ashape.len(), bshape.len()) {
            (2, 2) => {
                if ashape[1] != bshape[0] {
                    return Err(Error::shape(format!("matmul: inner dims {} vs {}", ashape[1], bshape[0])));
                }
                (1, ashape[0], ashape[1], bshape[1], true)
            }
            (3, 2) => {
                if ashape[2] != bshape[0] {
                    return Err(Error::shape(format!("matmul: inner dims {} vs {}", ashape[2], bshape[0])));
                }
                (ashape[0], ashape[1], ashape[2], bshape[1], true)
            }
            (3, 3) => {
                if ashape[0] != bshape[0] || ashape[2] != bshape[1] {
                    return Err(Error::shape(format!("matmul: {ashape:?} x {bshape:?}")));
                }
                (ashape[0], ashape[1], ashape[2], bshape[2], false)
            }
            _ => return Err(Error::shape(format!("matmul: unsupported ranks {ashape:?} x {bshape:?}"))),
        };
        let a = self.data();
        let b = other.data();
        let mut data = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ab = &a[bi * m * k..(bi + 1) * m * k];
            let bb = if shared_rhs { &b[..] } else { &b[bi * k * n..(bi + 1) * k * n] };
            matmul_acc(ab, bb, &mut data[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        drop(a);
        drop(b);
        let out_shape = if ashape.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(Tensor::from_op(
            out_shape,
            data,
            "matmul",
            vec![self.clone(), other.clone()],
            move |ctx| {
                let a = ctx.inputs[0].data();
                let b = ctx.inputs[1].data();
                let g = ctx.grad_out;
                let ga = ctx.needs(0).then(|| {
                    // dA = dC * B^T
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let bb = if shared_rhs { &b[..] } else { &b[bi * k * n..(bi + 1) * k * n] };
                        matmul_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            bb,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    da
                });
                let gb = ctx.needs(1).then(|| {
                    // dB = A^T * dC, summed over the batch when rhs is shared
                    let len = if shared_rhs { k * n } else { batch * k * n };
                    let mut db = vec![T::zero(); len];
                    for bi in 0..batch {
                        let dst =
                            if shared_rhs { &mut db[..] } else { &mut db[bi * k * n..(bi + 1) * k * n] };
                        matmul_tn_acc(
                            &a[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            dst,
                            m,
                            k,
                            n,
                        );
                    }
                    db
                });
                vec![ga, gb]
            },
        ))
    }

    /// Fused affine map: flattens leading dims, `y = x @ w + b` with
    /// `w: [k, n]`, `b: [n]`.
    pub fn linear(&self, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let k = *self.shape().last().ok_or_else(|| Error::shape("linear: scalar input"))?;
        if w.rank() != 2 || w.shape()[0] != k {
            return Err(Error::shape(format!("linear: x[..,{k}] vs w{:?}", w.shape())));
        }
        let n = w.shape()[1];
        if b.shape() != [n] {
            return Err(Error::shape(format!("linear: bias {:?}, expected [{n}]", b.shape())));
        }
        let m = self.numel() / k;
        let mut data = vec![T::zero(); m * n];
        {
            let bv = b.data();
            for row in data.chunks_mut(n) {
                row.copy_from_slice(&bv);
            }
            matmul_acc(&self.data(), &w.data(), &mut data, m, k, n);
        }
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        Ok(Tensor::from_op(
            out_shape,
            data,
            "linear",
            vec![self.clone(), w.clone(), b.clone()],
            move |ctx| {
                let x = ctx.inputs[0].data();
                let w = ctx.inputs[1].data();
                let g = ctx.grad_out;
                let gx = ctx.needs(0).then(|| {
                    let mut dx = vec![T::zero(); m * k];
                    matmul_nt_acc(g, &w, &mut dx, m, n, k);
                    dx
                });
                let gw = ctx.needs(1).then(|| {
                    let mut dw = vec![T::zero(); k * n];
                    matmul_tn_acc(&x, g, &mut dw, m, k, n);
                    dw
                });
                let gb = ctx.needs(2).then(|| {
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    db
                });
                vec![gx, gw, gb]
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

impl<T: Elem> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} ({} elems) -> {:?} ({} elems)",
                self.shape(),
                self.numel(),
                shape,
                n
            )));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), "reshape", vec![self.clone()], |ctx| {
            vec![ctx.needs(0).then(|| ctx.grad_out.to_vec())]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return Err(Error::shape(format!("permute: {axes:?} on rank {rank}")));
        }
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::shape(format!("permute: invalid axes {axes:?}")));
            }
            seen[a] = true;
        }
        let in_shape = self.shape().to_vec();
        let in_strides = strides_of(&in_shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        // Stride in the input for each output axis.
        let map_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        fill_permuted(&x, &mut data, &out_shape, &map_strides);
        drop(x);
        let axes_owned = axes.to_vec();
        Ok(Tensor::from_op(out_shape.clone(), data, "permute", vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| {
                // Inverse permutation sends the gradient back.
                let mut inv = vec![0usize; axes_owned.len()];
                for (d, &a) in axes_owned.iter().enumerate() {
                    inv[a] = d;
                }
                let out_strides = strides_of(&out_shape);
                let back_strides: Vec<usize> = inv.iter().map(|&a| out_strides[a]).collect();
                let mut g = vec![T::zero(); ctx.grad_out.len()];
                fill_permuted(ctx.grad_out, &mut g, &in_shape, &back_strides);
                g
            })]
        }))
    }

    /// Contiguous slice along axis 0.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let d0 = self.shape()[0];
        if start + len > d0 {
            return Err(Error::shape(format!("narrow0: [{start}, {}) out of {d0}", start + len)));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let data = self.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        Ok(Tensor::from_op(shape, data, "narrow", vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut g = vec![T::zero(); ctx.inputs[0].numel()];
                g[start * inner..(start + len) * inner].copy_from_slice(ctx.grad_out);
                g
            })]
        }))
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat of zero tensors".into()));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        let mut out_shape = parts[0].shape().to_vec();
        for p in &parts[1..] {
            if p.rank() != rank {
                return Err(Error::shape("concat: rank mismatch".to_string()));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != out_shape[d] {
                    return Err(Error::shape(format!(
                        "concat: {:?} vs {:?} along axis {axis}",
                        p.shape(),
                        out_shape
                    )));
                }
            }
        }
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_axis = out_shape[axis];
        let mut data = vec![T::zero(); outer * total_axis * inner];
        let mut offset = 0;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        for (p, &sz) in parts.iter().zip(&sizes) {
            let pd = p.data();
            for o in 0..outer {
                let src = &pd[o * sz * inner..(o + 1) * sz * inner];
                let dst_base = o * total_axis * inner + offset * inner;
                data[dst_base..dst_base + sz * inner].copy_from_slice(src);
            }
            offset += sz;
        }
        let inputs: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(out_shape, data, "concat", inputs, move |ctx| {
            let mut grads = Vec::with_capacity(ctx.inputs.len());
            let mut offset = 0;
            for (i, &sz) in sizes.iter().enumerate() {
                let g = ctx.needs(i).then(|| {
                    let mut g = vec![T::zero(); outer * sz * inner];
                    for o in 0..outer {
                        let src_base = o * total_axis * inner + offset * inner;
                        g[o * sz * inner..(o + 1) * sz * inner]
                            .copy_from_slice(&ctx.grad_out[src_base..src_base + sz * inner]);
                    }
                    g
                });
                grads.push(g);
                offset += sz;
            }
            grads
        }))
    }

    /// Zero-pads the two trailing spatial dims of an `[N,C,H,W]` tensor.
    pub fn pad_hw(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = dims4(self, "pad_hw")?;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let x = self.data();
        let mut data = vec![T::zero(); n * c * oh * ow];
        for img in 0..n * c {
            for row in 0..h {
                let src = &x[img * h * w + row * w..img * h * w + (row + 1) * w];
                let dst = img * oh * ow + (row + top) * ow + left;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
        drop(x);
        Ok(Tensor::from_op(vec![n, c, oh, ow], data, "pad2d", vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut g = vec![T::zero(); n * c * h * w];
                for img in 0..n * c {
                    for row in 0..h {
                        let src = img * oh * ow + (row + top) * ow + left;
                        g[img * h * w + row * w..img * h * w + (row + 1) * w]
                            .copy_from_slice(&ctx.grad_out[src..src + w]);
                    }
                }
                g
            })]
        }))
    }

    /// Crops a spatial region from an `[N,C,H,W]` tensor.
    pub fn crop_hw(&self, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = dims4(self, "crop_hw")?;
        if top + out_h > h || left + out_w > w {
            return Err(Error::shape(format!("crop_hw: region out of bounds ({h}x{w})")));
        }
        let x = self.data();
        let mut data = vec![T::zero(); n * c * out_h * out_w];
        for img in 0..n * c {
            for row in 0..out_h {
                let src = img * h * w + (row + top) * w + left;
                data[img * out_h * out_w + row * out_w..img * out_h * out_w + (row + 1) * out_w]
                    .copy_from_slice(&x[src..src + out_w]);
            }
        }
        drop(x);
        Ok(Tensor::from_op(vec![n, c, out_h, out_w], data, "crop2d", vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut g = vec![T::zero(); n * c * h * w];
                for img in 0..n * c {
                    for row in 0..out_h {
                        let dst = img * h * w + (row + top) * w + left;
                        g[dst..dst + out_w].copy_from_slice(
                            &ctx.grad_out
                                [img * out_h * out_w + row * out_w..img * out_h * out_w + (row + 1) * out_w],
                        );
                    }
                }
                g
            })]
        }))
    }

    /// Cyclic shift of the spatial dims: the element at `(h, w)` moves to
    /// `((h + dy) mod H, (w + dx) mod W)`.
    pub fn roll_hw(&self, dy: isize, dx: isize) -> Result<Tensor<T>> {
        let [n, c, h, w] = dims4(self, "roll_hw")?;
        let data = roll_raw(&self.data(), n * c, h, w, dy, dx);
        Ok(Tensor::from_op(self.shape().to_vec(), data, "roll2d", vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| roll_raw(ctx.grad_out, n * c, h, w, -dy, -dx))]
        }))
    }

    /// Gathers rows of a 2-D table; backward scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::shape(format!("gather_rows: need 2-D table, got {:?}", self.shape())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        for &i in idx {
            if i >= r {
                return Err(Error::shape(format!("gather_rows: index {i} out of {r}")));
            }
        }
        let x = self.data();
        let mut data = vec![T::zero(); idx.len() * c];
        for (o, &i) in idx.iter().enumerate() {
            data[o * c..(o + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
        }
        drop(x);
        let idx = idx.to_vec();
        Ok(Tensor::from_op(vec![idx.len(), c], data, "gather_rows", vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut g = vec![T::zero(); r * c];
                for (o, &i) in idx.iter().enumerate() {
                    for (gv, &v) in g[i * c..(i + 1) * c].iter_mut().zip(&ctx.grad_out[o * c..(o + 1) * c]) {
                        *gv += v;
                    }
                }
                g
            })]
        }))
    }

    /// Repeats the whole tensor `reps` times along a widened leading dim.
    pub fn tile0(&self, reps: usize) -> Tensor<T> {
        let block = self.numel();
        let mut data = Vec::with_capacity(block * reps);
        for _ in 0..reps {
            data.extend_from_slice(&self.data());
        }
        let mut shape = self.shape().to_vec();
        shape[0] *= reps;
        Tensor::from_op(shape, data, "tile", vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut g = vec![T::zero(); block];
                for chunk in ctx.grad_out.chunks(block) {
                    for (gv, &v) in g.iter_mut().zip(chunk) {
                        *gv += v;
                    }
                }
                g
            })]
        })
    }

    /// Repeats each slice along dim 0 `reps` times consecutively.
    pub fn repeat_interleave0(&self, reps: usize) -> Tensor<T> {
        let d0 = self.shape()[0];
        let inner = self.numel() / d0;
        let x = self.data();
        let mut data = Vec::with_capacity(self.numel() * reps);
        for i in 0..d0 {
            for _ in 0..reps {
                data.extend_from_slice(&x[i * inner..(i + 1) * inner]);
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[0] *= reps;
        Tensor::from_op(shape, data, "repeat_interleave", vec![self.clone()], move |ctx| {
            vec![ctx.needs(0).then(|| {
                let mut g = vec![T::zero(); d0 * inner];
                for (o, chunk) in ctx.grad_out.chunks(inner).enumerate() {
                    let i = o / reps;
                    for (gv, &v) in g[i * inner..(i + 1) * inner].iter_mut().zip(chunk) {
                        *gv += v;
                    }
                }
                g
            })]
        })
    }

    /// Adds a per-position tensor to every batch item: `x[N, rest] + p[rest]`.
    pub fn add_bcast_batch(&self, p: &Tensor<T>) -> Result<Tensor<T>> {
        let d0 = self.shape()[0];
        let inner = self.numel() / d0;
        if p.numel() != inner || self.shape()[1..] != *p.shape() {
            return Err(Error::shape(format!(
                "add_bcast_batch: x{:?} vs p{:?}",
                self.shape(),
                p.shape()
            )));
        }
        let x = self.data();
        let pv = p.data();
        let mut data = Vec::with_capacity(x.len());
        for b in 0..d0 {
            data.extend(x[b * inner..(b + 1) * inner].iter().zip(pv.iter()).map(|(&a, &c)| a + c));
        }
        drop(x);
        drop(pv);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "add_pos",
            vec![self.clone(), p.clone()],
            move |ctx| {
                let gx = ctx.needs(0).then(|| ctx.grad_out.to_vec());
                let gp = ctx.needs(1).then(|| {
                    let mut g = vec![T::zero(); inner];
                    for chunk in ctx.grad_out.chunks(inner) {
                        for (gv, &v) in g.iter_mut().zip(chunk) {
                            *gv += v;
                        }
                    }
                    g
                });
                vec![gx, gp]
            },
        ))
    }
}

fn dims4<T: Elem>(t: &Tensor<T>, op: &str) -> Result<[usize; 4]> {
    if t.rank() != 4 {
        return Err(Error::shape(format!("{op}: expected rank-4 tensor, got {:?}", t.shape())));
    }
    Ok([t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]])
}

fn roll_raw<T: Elem>(x: &[T], imgs: usize, h: usize, w: usize, dy: isize, dx: isize) -> Vec<T> {
    let dy = dy.rem_euclid(h as isize) as usize;
    let dx = dx.rem_euclid(w as isize) as usize;
    let mut out = vec![T::zero(); x.len()];
    for img in 0..imgs {
        let base = img * h * w;
        for row in 0..h {
            let orow = (row + dy) % h;
            for col in 0..w {
                let ocol = (col + dx) % w;
                out[base + orow * w + ocol] = x[base + row * w + col];
            }
        }
    }
    out
}

fn fill_permuted<T: Elem>(src: &[T], dst: &mut [T], out_shape: &[usize], in_strides_for_out: &[usize]) {
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    for d in dst.iter_mut() {
        let mut src_idx = 0;
        for (c, s) in coords.iter().zip(in_strides_for_out) {
            src_idx += c * s;
        }
        *d = src[src_idx];
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Fused scaled dot-product attention
// ---------------------------------------------------------------------------

impl<T: Elem> Tensor<T> {
    /// `softmax(q k^T / sqrt(d) + bias) v` over a batch of token sets.
    ///
    /// `q`, `k`, `v` are `[B, T, D]`. `bias`, when given, is `[G, T, T]` with
    /// `B % G == 0`; batch item `b` uses slab `b % G`. Scores are materialized
    /// one batch item at a time and recomputed in the backward pass, so peak
    /// memory stays at `O(T^2)` regardless of batch and head count.
    pub fn attention(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let [b, t, d] = dims3(q, "attention q")?;
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(Error::shape(format!(
                "attention: q{:?} k{:?} v{:?} must match",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if t == 0 {
            return Err(Error::EmptyInput("attention over zero tokens".into()));
        }
        let g = match bias {
            Some(bt) => {
                if bt.rank() != 3 || bt.shape()[1] != t || bt.shape()[2] != t || b % bt.shape()[0] != 0 {
                    return Err(Error::shape(format!(
                        "attention: bias {:?} incompatible with [{b},{t},{t}]",
                        bt.shape()
                    )));
                }
                bt.shape()[0]
            }
            None => 0,
        };
        let scale = T::from_f64(1.0 / (d as f64).sqrt());

        let mut data = vec![T::zero(); b * t * d];
        {
            let qd = q.data();
            let kd = k.data();
            let vd = v.data();
            let bias_data = bias.map(|bt| bt.data());
            let mut scores = vec![T::zero(); t * t];
            for bi in 0..b {
                let qs = &qd[bi * t * d..(bi + 1) * t * d];
                let ks = &kd[bi * t * d..(bi + 1) * t * d];
                let vs = &vd[bi * t * d..(bi + 1) * t * d];
                let bs = bias_data.as_ref().map(|bd| &bd[(bi % g) * t * t..(bi % g + 1) * t * t]);
                attn_forward(qs, ks, vs, bs, scale, t, d, &mut scores, &mut data[bi * t * d..(bi + 1) * t * d]);
            }
        }

        let mut inputs = vec![q.clone(), k.clone(), v.clone()];
        if let Some(bt) = bias {
            inputs.push(bt.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(vec![b, t, d], data, "attention", inputs, move |ctx| {
            let qd = ctx.inputs[0].data();
            let kd = ctx.inputs[1].data();
            let vd = ctx.inputs[2].data();
            let bias_data = has_bias.then(|| ctx.inputs[3].data());
            let mut dq = ctx.needs(0).then(|| vec![T::zero(); b * t * d]);
            let mut dk = ctx.needs(1).then(|| vec![T::zero(); b * t * d]);
            let mut dv = ctx.needs(2).then(|| vec![T::zero(); b * t * d]);
            let mut dbias = (has_bias && ctx.needs(3)).then(|| vec![T::zero(); g * t * t]);

            let mut scores = vec![T::zero(); t * t];
            let mut probs = vec![T::zero(); t * t];
            let mut dscores = vec![T::zero(); t * t];
            for bi in 0..b {
                let span = bi * t * d..(bi + 1) * t * d;
                let qs = &qd[span.clone()];
                let ks = &kd[span.clone()];
                let vs = &vd[span.clone()];
                let bs = bias_data.as_ref().map(|bd| &bd[(bi % g) * t * t..(bi % g + 1) * t * t]);
                let go = &ctx.grad_out[span.clone()];

                // Recompute probabilities.
                scores.iter_mut().for_each(|s| *s = T::zero());
                matmul_nt_acc(qs, ks, &mut scores, t, d, t);
                for s in scores.iter_mut() {
                    *s *= scale;
                }
                if let Some(bs) = bs {
                    for (s, &bv) in scores.iter_mut().zip(bs) {
                        *s += bv;
                    }
                }
                softmax_rows(&scores, &mut probs, t);

                if let Some(dv) = dv.as_mut() {
                    matmul_tn_acc(&probs, go, &mut dv[span.clone()], t, t, d);
                }
                // dP = dO * V^T, then dS = P .* (dP - rowsum(dP .* P))
                dscores.iter_mut().for_each(|s| *s = T::zero());
                matmul_nt_acc(go, vs, &mut dscores, t, d, t);
                for row in 0..t {
                    let p = &probs[row * t..(row + 1) * t];
                    let dp = &mut dscores[row * t..(row + 1) * t];
                    let mut dot = T::zero();
                    for (&pv, &dpv) in p.iter().zip(dp.iter()) {
                        dot += pv * dpv;
                    }
                    for (dpv, &pv) in dp.iter_mut().zip(p) {
                        *dpv = pv * (*dpv - dot);
                    }
                }
                if let Some(db) = dbias.as_mut() {
                    let dst = &mut db[(bi % g) * t * t..(bi % g + 1) * t * t];
                    for (d, &s) in dst.iter_mut().zip(&dscores) {
                        *d += s;
                    }
                }
                for s in dscores.iter_mut() {
                    *s *= scale;
                }
                if let Some(dq) = dq.as_mut() {
                    matmul_acc(&dscores, ks, &mut dq[span.clone()], t, t, d);
                }
                if let Some(dk) = dk.as_mut() {
                    matmul_tn_acc(&dscores, qs, &mut dk[span], t, t, d);
                }
            }
            let mut grads = vec![dq, dk, dv];
            if has_bias {
                grads.push(dbias);
            }
            grads
        }))
    }
}

fn dims3<T: Elem>(t: &Tensor<T>, op: &str) -> Result<[usize; 3]> {
    if t.rank() != 3 {
        return Err(Error::shape(format!("{op}: expected rank-3 tensor, got {:?}", t.shape())));
    }
    Ok([t.shape()[0], t.shape()[1], t.shape()[2]])
}

fn attn_forward<T: Elem>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    scale: T,
    t: usize,
    d: usize,
    scores: &mut [T],
    out: &mut [T],
) {
    scores.iter_mut().for_each(|s| *s = T::zero());
    matmul_nt_acc(q, k, scores, t, d, t);
    for s in scores.iter_mut() {
        *s *= scale;
    }
    if let Some(b) = bias {
        for (s, &bv) in scores.iter_mut().zip(b) {
            *s += bv;
        }
    }
    softmax_rows_inplace(scores, t);
    out.iter_mut().for_each(|o| *o = T::zero());
    matmul_acc(scores, v, out, t, t, d);
}

fn softmax_rows_inplace<T: Elem>(scores: &mut [T], t: usize) {
    for row in scores.chunks_mut(t) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for s in row.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        let inv = z.recip();
        for s in row.iter_mut() {
            *s *= inv;
        }
    }
}

fn softmax_rows<T: Elem>(scores: &[T], probs: &mut [T], t: usize) {
    probs.copy_from_slice(scores);
    softmax_rows_inplace(probs, t);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t32(data: &[f32], shape: &[usize]) -> Tensor<f32> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn add_hand() {
        let y = t32(&[1.0, 2.0], &[2]).add(&t32(&[3.0, 4.0], &[2])).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn mul_by_scalar_tensor_zero() {
        let y = t32(&[2.0, 3.0], &[2]).mul(&Tensor::scalar(0.0)).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(t32(&[1.0, 2.0], &[2]).add(&t32(&[1.0, 2.0, 3.0], &[3])).is_err());
    }

    #[test]
    fn div_by_zero_propagates_inf() {
        let y = t32(&[1.0, -1.0], &[2]).div(&t32(&[0.0, 0.0], &[2])).unwrap();
        assert!(y.to_vec()[0].is_infinite());
        assert!(y.to_vec()[1].is_infinite());
    }

    #[test]
    fn gradient_of_mul_is_other_factor() {
        let a = t32(&[1.0, 2.0, 3.0], &[3]).with_requires_grad();
        let b = t32(&[4.0, 5.0, 6.0], &[3]);
        a.mul(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = t32(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let m = t32(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[3, 3]);
        assert_eq!(eye.matmul(&m).unwrap().to_vec(), m.to_vec());
    }

    #[test]
    fn matmul_hand() {
        let a = t32(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t32(&[5.0, 6.0], &[2, 1]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::rand_uniform(&[5, 4], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng).unwrap();
        let c = a.matmul(&b).unwrap();
        let (av, bv) = (a.to_vec(), b.to_vec());
        let mut expect = vec![0.0f64; 15];
        for i in 0..5 {
            for j in 0..3 {
                for p in 0..4 {
                    expect[i * 3 + j] += av[i * 4 + p] * bv[p * 3 + j];
                }
            }
        }
        for (got, want) in c.to_vec().iter().zip(&expect) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = t32(&[0.0; 6], &[2, 3]);
        let b = t32(&[0.0; 8], &[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn sum_hand_and_mean_identity() {
        assert_eq!(t32(&[1.0, 2.0, 3.0], &[3]).sum_all().item(), 6.0);
        let c = Tensor::<f32>::full(&[4, 4], 2.5).unwrap();
        assert_eq!(c.mean_all().item(), 2.5);
    }

    #[test]
    fn sum_axis_matches_per_column_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Tensor::<f64>::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng).unwrap();
        let s = m.sum_axes(&[0]).unwrap();
        let mv = m.to_vec();
        for j in 0..4 {
            let want: f64 = (0..3).map(|i| mv[i * 4 + j]).sum();
            assert_eq!(s.to_vec()[j], want);
        }
        assert_eq!(s.shape(), &[4]);
    }

    #[test]
    fn invalid_axis_rejected() {
        assert!(t32(&[0.0; 4], &[2, 2]).sum_axes(&[2]).is_err());
    }

    #[test]
    fn max_routes_gradient_to_first_extremum() {
        let a = t32(&[1.0, 3.0, 3.0, 0.0], &[4]).with_requires_grad();
        a.max_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let y = t32(&[0.0, 0.0, 0.0], &[3]).softmax(0).unwrap();
        for v in y.to_vec() {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-6);
        }
        let y = t32(&[1000.0, 0.0], &[2]).softmax(0).unwrap();
        let v = y.to_vec();
        assert!(v[0] > 0.999_999 && v[1] < 1e-6);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::rand_uniform(&[4, 7], -5.0, 5.0, &mut rng).unwrap();
        let y = x.softmax(1).unwrap();
        for row in y.to_vec().chunks(7) {
            let s: f32 = row.iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng).unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let a = t32(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t32(&[5.0, 6.0], &[1, 2]);
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.narrow0(2, 1).unwrap().to_vec(), vec![5.0, 6.0]);
    }

    #[test]
    fn roll_shifts_cyclically() {
        let x = t32(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = x.roll_hw(1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0, 1.0, 2.0]);
        let z = y.roll_hw(-1, 0).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn attention_single_token_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::<f32>::rand_uniform(&[1, 1, 4], -1.0, 1.0, &mut rng).unwrap();
        let k = Tensor::<f32>::rand_uniform(&[1, 1, 4], -1.0, 1.0, &mut rng).unwrap();
        let v = Tensor::<f32>::rand_uniform(&[1, 1, 4], -1.0, 1.0, &mut rng).unwrap();
        let out = Tensor::attention(&q, &k, &v, None).unwrap();
        assert_eq!(out.to_vec(), v.to_vec());
    }

    #[test]
    fn attention_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor::<f64>::rand_uniform(&[2, 5, 3], -1.0, 1.0, &mut rng).unwrap();
        let k = Tensor::<f64>::rand_uniform(&[2, 5, 3], -1.0, 1.0, &mut rng).unwrap();
        let v = Tensor::<f64>::rand_uniform(&[2, 5, 3], -1.0, 1.0, &mut rng).unwrap();
        let fused = Tensor::attention(&q, &k, &v, None).unwrap();
        let kt = k.permute(&[0, 2, 1]).unwrap();
        let scores = q.matmul(&kt).unwrap().mul_scalar(1.0 / 3.0f64.sqrt());
        let composed = scores.softmax(2).unwrap().matmul(&v).unwrap();
        for (a, b) in fused.to_vec().iter().zip(composed.to_vec()) {
            assert_relative_eq!(a, &b, max_relative = 1e-12);
        }
    }
}
