//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! A `Tape` records every operation in insertion order; `backward` walks the
//! nodes in exact reverse order and accumulates gradients additively. Scalars
//! are rank-0 tensors. Broadcasting is limited to scalar-with-tensor for the
//! elementwise ops; anything richer is out of scope for this model family.

use crate::error::{GgdError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GgdError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    /// One-hot vector of length `len` with a 1.0 at `index`.
    pub fn one_hot(index: usize, len: usize) -> Self {
        let mut data = vec![0.0; len];
        data[index] = 1.0;
        Tensor::vector(data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(GgdError::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sub_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape, "sub_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= *b;
        }
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// Index of the largest element; ties break toward the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically-stable softmax of a slice (max subtraction).
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    out
}

/// Numerically-stable log-softmax of a slice.
pub fn log_softmax_slice(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|&x| x - lse).collect()
}

// ── raw matrix kernels ──────────────────────────────────────────────

/// c[m,n] = a[m,k] · b[k,n], accumulating over rows of b to keep the inner
/// loop contiguous in both operands.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// c[m] = a[m,k] · v[k]
fn mv(a: &[f64], v: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        c[i] = arow.iter().zip(v).map(|(x, y)| x * y).sum();
    }
    c
}

/// c[n] = v[k] · b[k,n]
fn vm(v: &[f64], b: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n];
    for (p, &vv) in v.iter().enumerate().take(k) {
        if vv == 0.0 {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (cv, &bv) in c.iter_mut().zip(brow) {
            *cv += vv * bv;
        }
    }
    c
}

/// outer(u, v)[i,j] = u[i]·v[j]
fn outer(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; u.len() * v.len()];
    for (i, &uv) in u.iter().enumerate() {
        if uv == 0.0 {
            continue;
        }
        let crow = &mut c[i * v.len()..(i + 1) * v.len()];
        for (cv, &vv) in crow.iter_mut().zip(v) {
            *cv = uv * vv;
        }
    }
    c
}

// ── tape ────────────────────────────────────────────────────────────

/// Handle to a value recorded on a `Tape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tape, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a differentiable leaf (weights, relaxed token inputs).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Vec::new(), value, None, true)
    }

    /// Record a non-differentiable input; backward never reaches it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Vec::new(), value, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        parents: Vec<Var>,
        value: Tensor,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced on tape: {:?}",
            value.shape()
        );
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, parents: &[Var]) -> bool {
        parents.iter().any(|&p| self.nodes[p.0].requires_grad)
    }

    /// Record an op with an arbitrary backward rule. `backward` receives the
    /// tape and the output gradient and must return one contribution per
    /// parent, in parent order.
    pub fn custom<F>(&mut self, parents: Vec<Var>, value: Tensor, backward: F) -> Var
    where
        F: Fn(&Tape, &Tensor) -> Vec<Tensor> + 'static,
    {
        let req = self.any_requires(&parents);
        let bw: Option<BackwardFn> = if req { Some(Box::new(backward)) } else { None };
        self.push(parents, value, bw, req)
    }

    // ── ops ─────────────────────────────────────────────────────────

    /// Matrix product. Supports [m,k]·[k,n], [k]·[k,n] and [m,k]·[k].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, br) = (self.value(a).rank(), self.value(b).rank());
        let (ashape, bshape) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let value = match (ar, br) {
            (2, 2) => {
                let (m, k, k2, n) = (ashape[0], ashape[1], bshape[0], bshape[1]);
                if k != k2 {
                    return Err(GgdError::Dimension(format!(
                        "matmul [{m},{k}]x[{k2},{n}]"
                    )));
                }
                Tensor::new(vec![m, n], mm(self.value(a).data(), self.value(b).data(), m, k, n))?
            }
            (1, 2) => {
                let (k, k2, n) = (ashape[0], bshape[0], bshape[1]);
                if k != k2 {
                    return Err(GgdError::Dimension(format!("matmul [{k}]x[{k2},{n}]")));
                }
                Tensor::vector(vm(self.value(a).data(), self.value(b).data(), k, n))
            }
            (2, 1) => {
                let (m, k, k2) = (ashape[0], ashape[1], bshape[0]);
                if k != k2 {
                    return Err(GgdError::Dimension(format!("matmul [{m},{k}]x[{k2}]")));
                }
                Tensor::vector(mv(self.value(a).data(), self.value(b).data(), m, k))
            }
            _ => {
                return Err(GgdError::Dimension(format!(
                    "matmul unsupported ranks {ar}x{br}"
                )))
            }
        };
        Ok(self.custom(vec![a, b], value, move |tape, g| {
            let (av, bv) = (tape.value(a), tape.value(b));
            match (av.rank(), bv.rank()) {
                (2, 2) => {
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    // dA = g·Bᵀ computed as scatter; dB = Aᵀ·g.
                    let gd = g.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            darow[p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let arow = &av.data()[i * k..(i + 1) * k];
                        let grow = &gd[i * n..(i + 1) * n];
                        for (p, &ax) in arow.iter().enumerate() {
                            if ax == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for (d, &gx) in dbrow.iter_mut().zip(grow) {
                                *d += ax * gx;
                            }
                        }
                    }
                    vec![
                        Tensor::new(vec![m, k], da).unwrap(),
                        Tensor::new(vec![k, n], db).unwrap(),
                    ]
                }
                (1, 2) => {
                    let k = av.shape()[0];
                    let n = bv.shape()[1];
                    let mut da = vec![0.0; k];
                    for p in 0..k {
                        let brow = &bv.data()[p * n..(p + 1) * n];
                        da[p] = g.data().iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                    let db = outer(av.data(), g.data());
                    vec![Tensor::vector(da), Tensor::new(vec![k, n], db).unwrap()]
                }
                (2, 1) => {
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let da = outer(g.data(), bv.data());
                    let mut db = vec![0.0; k];
                    for i in 0..m {
                        let gx = g.data()[i];
                        if gx == 0.0 {
                            continue;
                        }
                        let arow = &av.data()[i * k..(i + 1) * k];
                        for (d, &ax) in db.iter_mut().zip(arow) {
                            *d += gx * ax;
                        }
                    }
                    vec![Tensor::new(vec![m, k], da).unwrap(), Tensor::vector(db)]
                }
                _ => unreachable!(),
            }
        }))
    }

    fn broadcast_shapes(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb || self.value(a).numel() == 1 || self.value(b).numel() == 1 {
            Ok(())
        } else {
            Err(GgdError::Dimension(format!("{op}: {sa:?} vs {sb:?}")))
        }
    }

    /// Elementwise sum; one operand may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_shapes(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.numel() == 1 && !bv.shape().is_empty() {
            let s = av.data()[0];
            Tensor::new(bv.shape().to_vec(), bv.data().iter().map(|x| s + x).collect())?
        } else if bv.numel() == 1 && !av.shape().is_empty() {
            let s = bv.data()[0];
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x + s).collect())?
        } else {
            Tensor::new(
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
            )?
        };
        Ok(self.custom(vec![a, b], value, move |tape, g| {
            let reduce = |shape: &[usize]| -> Tensor {
                if shape.iter().product::<usize>() == 1 && shape.len() != g.rank() {
                    Tensor::new(shape.to_vec(), vec![g.data().iter().sum()]).unwrap()
                } else {
                    g.clone()
                }
            };
            vec![
                reduce(tape.value(a).shape()),
                reduce(tape.value(b).shape()),
            ]
        }))
    }

    /// Elementwise product; one operand may be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_shapes(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.numel() == 1 && !bv.shape().is_empty() {
            let s = av.data()[0];
            Tensor::new(bv.shape().to_vec(), bv.data().iter().map(|x| s * x).collect())?
        } else if bv.numel() == 1 && !av.shape().is_empty() {
            let s = bv.data()[0];
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * s).collect())?
        } else {
            Tensor::new(
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
            )?
        };
        Ok(self.custom(vec![a, b], value, move |tape, g| {
            let (av, bv) = (tape.value(a), tape.value(b));
            let side = |this: &Tensor, other: &Tensor| -> Tensor {
                if this.numel() == 1 && this.rank() != g.rank() {
                    let s: f64 = g.data().iter().zip(other.data()).map(|(x, y)| x * y).sum();
                    Tensor::new(this.shape().to_vec(), vec![s]).unwrap()
                } else if other.numel() == 1 && other.rank() != g.rank() {
                    let s = other.data()[0];
                    Tensor::new(
                        this.shape().to_vec(),
                        g.data().iter().map(|x| x * s).collect(),
                    )
                    .unwrap()
                } else {
                    Tensor::new(
                        this.shape().to_vec(),
                        g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect(),
                    )
                    .unwrap()
                }
            };
            vec![side(av, bv), side(bv, av)]
        }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| k * x).collect(),
        )
        .unwrap();
        self.custom(vec![a], value, move |_, g| {
            vec![Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| k * x).collect()).unwrap()]
        })
    }

    /// Add a compile-time constant to every element.
    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| x + k).collect(),
        )
        .unwrap();
        self.custom(vec![a], value, move |_, g| vec![g.clone()])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| x.tanh()).collect(),
        )
        .unwrap();
        let out = self.custom(vec![a], value, move |_, _| unreachable!());
        self.replace_backward(out, move |tape: &Tape, g: &Tensor| {
            let y = tape.value(out);
            vec![Tensor::new(
                y.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(y.data())
                    .map(|(gx, yx)| gx * (1.0 - yx * yx))
                    .collect(),
            )
            .unwrap()]
        });
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .map(|x| 1.0 / (1.0 + (-x).exp()))
                .collect(),
        )
        .unwrap();
        let out = self.custom(vec![a], value, move |_, _| unreachable!());
        self.replace_backward(out, move |tape: &Tape, g: &Tensor| {
            let y = tape.value(out);
            vec![Tensor::new(
                y.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(y.data())
                    .map(|(gx, yx)| gx * yx * (1.0 - yx))
                    .collect(),
            )
            .unwrap()]
        });
        out
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| x.exp()).collect(),
        )
        .unwrap();
        let out = self.custom(vec![a], value, move |_, _| unreachable!());
        self.replace_backward(out, move |tape: &Tape, g: &Tensor| {
            let y = tape.value(out);
            vec![Tensor::new(
                y.shape().to_vec(),
                g.data().iter().zip(y.data()).map(|(gx, yx)| gx * yx).collect(),
            )
            .unwrap()]
        });
        out
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(GgdError::Domain("log of non-positive value".into()));
        }
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|x| x.ln()).collect(),
        )
        .unwrap();
        Ok(self.custom(vec![a], value, move |tape, g| {
            let x = tape.value(a);
            vec![Tensor::new(
                x.shape().to_vec(),
                g.data().iter().zip(x.data()).map(|(gx, xv)| gx / xv).collect(),
            )
            .unwrap()]
        }))
    }

    /// Softmax over a vector, with the exact Jacobian y_i(δ_ij − y_j) as the
    /// backward rule.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 1 || self.value(a).numel() == 0 {
            return Err(GgdError::Dimension("softmax expects a nonempty vector".into()));
        }
        let value = Tensor::vector(softmax_slice(self.value(a).data()));
        let out = self.custom(vec![a], value, move |_, _| unreachable!());
        self.replace_backward(out, move |tape: &Tape, g: &Tensor| {
            let y = tape.value(out).data();
            let s: f64 = g.data().iter().zip(y).map(|(gx, yx)| gx * yx).sum();
            vec![Tensor::vector(
                g.data().iter().zip(y).map(|(gx, yx)| yx * (gx - s)).collect(),
            )]
        });
        Ok(out)
    }

    /// log(softmax(a)) in one fused, stable op.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 1 || self.value(a).numel() == 0 {
            return Err(GgdError::Dimension("log_softmax expects a nonempty vector".into()));
        }
        let xs = self.value(a).data();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        let value = Tensor::vector(xs.iter().map(|&x| x - lse).collect());
        let out = self.custom(vec![a], value, move |_, _| unreachable!());
        self.replace_backward(out, move |tape: &Tape, g: &Tensor| {
            let y = tape.value(out).data(); // log-probs
            let gsum: f64 = g.data().iter().sum();
            vec![Tensor::vector(
                g.data()
                    .iter()
                    .zip(y)
                    .map(|(gx, ly)| gx - ly.exp() * gsum)
                    .collect(),
            )]
        });
        Ok(out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.custom(vec![a], value, move |tape, g| {
            let shape = tape.value(a).shape().to_vec();
            let gx = g.data()[0];
            let numel: usize = shape.iter().product();
            vec![Tensor::new(shape, vec![gx; numel]).unwrap()]
        })
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 1 || bv.rank() != 1 || av.numel() != bv.numel() {
            return Err(GgdError::Dimension(format!(
                "dot: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let value = Tensor::scalar(av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum());
        Ok(self.custom(vec![a, b], value, move |tape, g| {
            let gx = g.data()[0];
            let (av, bv) = (tape.value(a), tape.value(b));
            vec![
                Tensor::vector(bv.data().iter().map(|x| gx * x).collect()),
                Tensor::vector(av.data().iter().map(|x| gx * x).collect()),
            ]
        }))
    }

    /// Concatenate rank-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(GgdError::Dimension("concat expects vectors".into()));
            }
            lens.push(v.numel());
            data.extend_from_slice(v.data());
        }
        let value = Tensor::vector(data);
        Ok(self.custom(parts.to_vec(), value, move |_, g| {
            let mut out = Vec::with_capacity(lens.len());
            let mut off = 0;
            for &l in &lens {
                out.push(Tensor::vector(g.data()[off..off + l].to_vec()));
                off += l;
            }
            out
        }))
    }

    /// Stack equal-length rank-1 vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(GgdError::Dimension("stack_rows of nothing".into()));
        }
        let n = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.numel() != n {
                return Err(GgdError::Dimension("stack_rows ragged input".into()));
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.custom(rows.to_vec(), value, move |_, g| {
            (0..g.shape()[0])
                .map(|i| Tensor::vector(g.data()[i * n..(i + 1) * n].to_vec()))
                .collect()
        }))
    }

    /// Collect scalars into a rank-1 vector.
    pub fn stack_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            data.push(self.value(x).as_scalar()?);
        }
        let value = Tensor::vector(data);
        Ok(self.custom(xs.to_vec(), value, move |_, g| {
            g.data().iter().map(|&gx| Tensor::scalar(gx)).collect()
        }))
    }

    /// Extract row `i` of a matrix as a vector.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let v = self.value(m);
        if v.rank() != 2 || i >= v.shape()[0] {
            return Err(GgdError::Dimension(format!(
                "row {i} of shape {:?}",
                v.shape()
            )));
        }
        let n = v.shape()[1];
        let value = Tensor::vector(v.data()[i * n..(i + 1) * n].to_vec());
        Ok(self.custom(vec![m], value, move |tape, g| {
            let shape = tape.value(m).shape().to_vec();
            let mut out = Tensor::zeros(&shape);
            out.data_mut()[i * n..(i + 1) * n].copy_from_slice(g.data());
            vec![out]
        }))
    }

    /// Sum a list of scalars into one scalar.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let v = self.stack_scalars(xs)?;
        Ok(self.sum(v))
    }

    fn replace_backward<F>(&mut self, v: Var, f: F)
    where
        F: Fn(&Tape, &Tensor) -> Vec<Tensor> + 'static,
    {
        let node = &mut self.nodes[v.0];
        if node.requires_grad {
            node.backward = Some(Box::new(f));
        } else {
            node.backward = None;
        }
    }

    /// Reverse sweep from a scalar loss. Gradient accumulation is a plain
    /// running sum in reverse insertion order, which keeps runs bit-identical.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(GgdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let contribs = bw(self, &g);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (p, c) in node.parents.iter().zip(contribs) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert!(c.all_finite(), "non-finite gradient contribution");
                match &mut grads[p.0] {
                    slot @ None => *slot = Some(c),
                    Some(t) => t.add_assign(&c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep; holds gradients for leaves (and any interior
/// node that still carried one when the sweep passed it).
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngHandle;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn matmul_identity_maps_vector_to_itself() {
        let mut tape = Tape::new();
        let id = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(t(vec![3.5, -2.0]));
        let out = tape.matmul(id, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.5, -2.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]]·[[1],[1]] = [[3],[7]]
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap());
        let out = tape.matmul(z, b).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(GgdError::Dimension(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![0.0]));
        let th = tape.tanh(x);
        assert_eq!(tape.value(th).data()[0], 0.0);
        let sg = tape.sigmoid(x);
        assert_eq!(tape.value(sg).data()[0], 0.5);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(GgdError::Domain(_))));
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let a = tape.constant(t(vec![0.3, -1.2, 2.0]));
        let sa = tape.softmax(a).unwrap();
        let b = tape.constant(t(vec![0.3 + 7.0, -1.2 + 7.0, 2.0 + 7.0]));
        let sb = tape.softmax(b).unwrap();
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        // softmax([ln 4, 0]) = [0.8, 0.2]
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![4.0_f64.ln(), 0.0]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.8).abs() < 1e-12);
        assert!((d[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = RngHandle::new(1);
        let mut tape = Tape::new();
        for _ in 0..50 {
            let xs: Vec<f64> = (0..17).map(|_| rng.uniform01() * 20.0 - 10.0).collect();
            let v = tape.constant(t(xs));
            let s = tape.softmax(v).unwrap();
            let total: f64 = tape.value(s).data().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(tape.value(s).data().iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_empty_is_dimension_error() {
        let mut tape = Tape::new();
        let v = tape.constant(t(vec![]));
        assert!(matches!(tape.softmax(v), Err(GgdError::Dimension(_))));
    }

    #[test]
    fn backward_of_identity_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_through_softmax_sum_is_zero() {
        // sum(softmax(a)) ≡ 1  ⇒  gradient ≡ 0
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![0.4, -1.0, 2.2]));
        let s = tape.softmax(a).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        for &g in grads.get(a).unwrap().data() {
            assert!(g.abs() < 1e-15, "expected ~0, got {g}");
        }
    }

    #[test]
    fn backward_non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(GgdError::Contract(_))));
    }

    /// Central finite difference of a scalar-valued function of one tensor
    /// entry. Used as the independent oracle below.
    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, xs: &[f64], i: usize, h: f64) -> f64 {
        let mut plus = xs.to_vec();
        plus[i] += h;
        let mut minus = xs.to_vec();
        minus[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    #[test]
    fn tanh_gradient_matches_finite_difference() {
        let f = |xs: &[f64]| xs[0].tanh();
        let fd = finite_diff(f, &[1.0], 0, 1e-5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.tanh(x);
        let grads = tape.backward(y).unwrap();
        let ad = grads.get(x).unwrap().data()[0];
        assert!((ad - fd).abs() < 1e-8, "ad {ad} vs fd {fd}");
    }

    /// A three-layer composition with every op kind, evaluated raw (no tape)
    /// so the finite-difference oracle is independent of the tape path.
    fn composition(xs: &[f64], w1: &[f64], w2: &[f64]) -> f64 {
        // layer 1: h = tanh(W1 x), W1 4x3
        let mut h = [0.0; 4];
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..3 {
                s += w1[i * 3 + j] * xs[j];
            }
            h[i] = s.tanh();
        }
        // layer 2: u = sigmoid(W2 h), W2 3x4
        let mut u = [0.0; 3];
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..4 {
                s += w2[i * 4 + j] * h[j];
            }
            u[i] = 1.0 / (1.0 + (-s).exp());
        }
        // layer 3: weighted log-softmax score
        let sm = softmax_slice(&u);
        sm.iter()
            .enumerate()
            .map(|(i, &p)| (i as f64 + 1.0) * p.ln())
            .sum()
    }

    #[test]
    fn random_composition_gradient_matches_finite_difference() {
        let mut rng = RngHandle::new(42);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.uniform01() * 4.0 - 2.0).collect()
        };
        for _ in 0..5 {
            let xs = draw(3);
            let w1 = draw(12);
            let w2 = draw(12);

            let mut tape = Tape::new();
            let x = tape.leaf(t(xs.clone()));
            let w1v = tape.leaf(Tensor::matrix(4, 3, w1.clone()).unwrap());
            let w2v = tape.leaf(Tensor::matrix(3, 4, w2.clone()).unwrap());
            let h0 = tape.matmul(w1v, x).unwrap();
            let h = tape.tanh(h0);
            let u0 = tape.matmul(w2v, h).unwrap();
            let u = tape.sigmoid(u0);
            let sm = tape.softmax(u).unwrap();
            let lsm = tape.log(sm).unwrap();
            let w = tape.constant(t(vec![1.0, 2.0, 3.0]));
            let loss = tape.dot(lsm, w).unwrap();
            let grads = tape.backward(loss).unwrap();

            let mut max_rel = 0.0_f64;
            let gx = grads.get(x).unwrap();
            for i in 0..3 {
                let fd = finite_diff(|p| composition(p, &w1, &w2), &xs, i, 1e-5);
                let ad = gx.data()[i];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
            let gw1 = grads.get(w1v).unwrap();
            for i in 0..12 {
                let fd = finite_diff(|p| composition(&xs, p, &w2), &w1, i, 1e-5);
                let ad = gw1.data()[i];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
        }
    }

    #[test]
    fn softmax_backward_is_exact_jacobian() {
        // Pull back each unit vector and compare with y_i(δ_ij − y_j).
        let xs = vec![0.2, -0.7, 1.5, 0.0];
        for j in 0..4 {
            let mut tape = Tape::new();
            let a = tape.leaf(t(xs.clone()));
            let y = tape.softmax(a).unwrap();
            let e = tape.constant(Tensor::one_hot(j, 4));
            let yj = tape.dot(y, e).unwrap();
            let grads = tape.backward(yj).unwrap();
            let got = grads.get(a).unwrap().data().to_vec();
            let probs = softmax_slice(&xs);
            for i in 0..4 {
                let delta = if i == j { 1.0 } else { 0.0 };
                let expect = probs[j] * (delta - probs[i]);
                assert!(
                    (got[i] - expect).abs() < 1e-15,
                    "jacobian mismatch at ({i},{j}): {} vs {expect}",
                    got[i]
                );
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut rng = RngHandle::new(99);
            let xs: Vec<f64> = (0..6).map(|_| rng.uniform01() * 4.0 - 2.0).collect();
            let mut tape = Tape::new();
            let a = tape.leaf(t(xs[..3].to_vec()));
            let b = tape.leaf(t(xs[3..].to_vec()));
            let p = tape.mul(a, b).unwrap();
            let q = tape.tanh(p);
            let s = tape.softmax(q).unwrap();
            let l = tape.log(s).unwrap();
            let loss = tape.sum(l);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).data().to_vec(),
                grads.get(a).unwrap().data().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn concat_row_stack_backwards() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![1.0, 2.0]));
        let b = tape.leaf(t(vec![3.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let m = tape.stack_rows(&[c, c]).unwrap();
        // summing row 1 reaches the shared parent once
        let r1 = tape.row(m, 1).unwrap();
        let s = tape.sum(r1);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0]);
        // summing the whole stack reaches it twice
        let s2 = tape.sum(m);
        let grads2 = tape.backward(s2).unwrap();
        assert_eq!(grads2.get(a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads2.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(vec![1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let a = tape.add(v, s).unwrap();
        assert_eq!(tape.value(a).data(), &[3.0, 4.0, 5.0]);
        let m = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(m).data(), &[6.0, 8.0, 10.0]);
        let loss = tape.sum(m);
        let grads = tape.backward(loss).unwrap();
        let f = |s: f64| -> f64 { [1.0, 2.0, 3.0].iter().map(|x| (x + s) * s).sum() };
        let fd = (f(2.0 + 1e-6) - f(2.0 - 1e-6)) / 2e-6;
        let ad = grads.get(s).unwrap().data()[0];
        assert!((ad - fd).abs() < 1e-6, "{ad} vs {fd}");
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
