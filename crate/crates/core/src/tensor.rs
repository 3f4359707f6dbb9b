//! Dense f64 tensors with reverse-mode differentiation on a flat tape.
//!
//! Covers exactly what the two policy networks need: affine layers, strided
//! valid 2D convolution, pointwise nonlinearities, concatenation, reductions,
//! the dueling aggregation head, row gathering, and a smooth-L1 loss.
//! Matrix products go through ndarray; everything else is straight loops.
//! All computation is single-threaded and deterministic.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayView2;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient in parameter '{0}'")]
    BadGradient(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Contiguous row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape does not match data length"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How the right operand of a binary op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right is a single value.
    Scalar,
    /// Left is [B, D], right is [D].
    Row,
}

#[derive(Debug, Clone, Copy)]
struct ConvMeta {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, meta: ConvMeta },
    Relu { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Scale { a: Var, c: f64 },
    AddConst { a: Var },
    Add { a: Var, b: Var, bc: Broadcast },
    Sub { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    Concat { parts: Vec<Var> },
    Reshape { a: Var },
    RowSum { a: Var },
    MeanAll { a: Var },
    Dueling { v: Var, a: Var },
    Gather { q: Var, idx: Vec<usize> },
    SmoothL1 { pred: Var, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape; build a graph by calling op methods, then run
/// `backward` from a scalar root.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul(a: &[f64], (m, k): (usize, usize), b: &[f64], (k2, n): (usize, usize)) -> Vec<f64> {
    assert_eq!(k, k2, "inner dimensions differ");
    let av = ArrayView2::from_shape((m, k), a).expect("lhs layout");
    let bv = ArrayView2::from_shape((k2, n), b).expect("rhs layout");
    av.dot(&bv).into_raw_vec()
}

fn matmul_tb(a: &[f64], (m, k): (usize, usize), b: &[f64], (n, k2): (usize, usize)) -> Vec<f64> {
    // a · bᵀ
    assert_eq!(k, k2);
    let av = ArrayView2::from_shape((m, k), a).expect("lhs layout");
    let bv = ArrayView2::from_shape((n, k2), b).expect("rhs layout");
    av.dot(&bv.t()).into_raw_vec()
}

fn matmul_ta(a: &[f64], (m, k): (usize, usize), b: &[f64], (m2, n): (usize, usize)) -> Vec<f64> {
    // aᵀ · b
    assert_eq!(m, m2);
    let av = ArrayView2::from_shape((m, k), a).expect("lhs layout");
    let bv = ArrayView2::from_shape((m2, n), b).expect("rhs layout");
    av.t().dot(&bv).into_raw_vec()
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Broadcast {
    if a == b {
        Broadcast::Same
    } else if b.iter().product::<usize>() == 1 {
        Broadcast::Scalar
    } else if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        Broadcast::Row
    } else {
        panic!("incompatible shapes {:?} vs {:?}", a, b);
    }
}

fn im2col(x: &[f64], m: &ConvMeta) -> Vec<f64> {
    let ckk = m.c_in * m.kh * m.kw;
    let rows = m.batch * m.oh * m.ow;
    let mut cols = vec![0.0; rows * ckk];
    let (h, w) = (m.h, m.w);
    for bi in 0..m.batch {
        for oy in 0..m.oh {
            for ox in 0..m.ow {
                let r = (bi * m.oh + oy) * m.ow + ox;
                let base = r * ckk;
                for c in 0..m.c_in {
                    let xc = (bi * m.c_in + c) * h * w;
                    for di in 0..m.kh {
                        let xr = xc + (oy * m.stride + di) * w + ox * m.stride;
                        let q = base + (c * m.kh + di) * m.kw;
                        cols[q..q + m.kw].copy_from_slice(&x[xr..xr + m.kw]);
                    }
                }
            }
        }
    }
    cols
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// y = x·W + b with x [B, I], W [I, O], b [O].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws, bs) = (
            self.value(x).shape.clone(),
            self.value(w).shape.clone(),
            self.value(b).shape.clone(),
        );
        assert_eq!(xs.len(), 2, "affine input must be 2D");
        assert_eq!(ws.len(), 2, "affine weight must be 2D");
        assert_eq!(xs[1], ws[0], "affine inner dim mismatch");
        assert_eq!(bs, vec![ws[1]], "affine bias shape mismatch");
        let (bsz, o) = (xs[0], ws[1]);
        let mut y = matmul(
            &self.value(x).data,
            (bsz, xs[1]),
            &self.value(w).data,
            (ws[0], o),
        );
        let bias = &self.value(b).data;
        for r in 0..bsz {
            for j in 0..o {
                y[r * o + j] += bias[j];
            }
        }
        self.push(Tensor::from_vec(&[bsz, o], y), Op::Affine { x, w, b })
    }

    /// Valid cross-correlation: x [B, C, H, W], k [F, C, kh, kw], b [F].
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Var {
        assert!(stride >= 1);
        let xs = self.value(x).shape.clone();
        let ks = self.value(k).shape.clone();
        assert_eq!(xs.len(), 4, "conv input must be 4D");
        assert_eq!(ks.len(), 4, "conv kernel must be 4D");
        assert_eq!(xs[1], ks[1], "conv channel mismatch");
        assert!(ks[2] <= xs[2] && ks[3] <= xs[3], "kernel larger than input");
        let meta = ConvMeta {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            oh: (xs[2] - ks[2]) / stride + 1,
            ow: (xs[3] - ks[3]) / stride + 1,
        };
        assert_eq!(self.value(b).shape, vec![meta.c_out], "conv bias mismatch");
        let ckk = meta.c_in * meta.kh * meta.kw;
        let rows = meta.batch * meta.oh * meta.ow;
        let cols = im2col(&self.value(x).data, &meta);
        // Kernel as [F, CKK]; multiply cols [R, CKK] by its transpose.
        let y2 = matmul_tb(&cols, (rows, ckk), &self.value(k).data, (meta.c_out, ckk));
        let bias = &self.value(b).data;
        let plane = meta.oh * meta.ow;
        let mut y = vec![0.0; meta.batch * meta.c_out * plane];
        for bi in 0..meta.batch {
            for f in 0..meta.c_out {
                for p in 0..plane {
                    y[(bi * meta.c_out + f) * plane + p] =
                        y2[(bi * plane + p) * meta.c_out + f] + bias[f];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[meta.batch, meta.c_out, meta.oh, meta.ow], y),
            Op::Conv2d { x, k, b, meta },
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| x.max(0.0)).collect(),
        };
        self.push(t, Op::Relu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| x.tanh()).collect(),
        };
        self.push(t, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data: self
                .value(a)
                .data
                .iter()
                .map(|&x| 1.0 / (1.0 + (-x).exp()))
                .collect(),
        };
        self.push(t, Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| x.exp()).collect(),
        };
        self.push(t, Op::Exp { a })
    }

    /// Clamp with pass-through gradient strictly inside the window.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| x.clamp(lo, hi)).collect(),
        };
        self.push(t, Op::Clamp { a, lo, hi })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| x * c).collect(),
        };
        self.push(t, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = Tensor {
            shape: self.value(a).shape.clone(),
            data: self.value(a).data.iter().map(|&x| x + c).collect(),
        };
        self.push(t, Op::AddConst { a })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Tensor, Broadcast) {
        let bc = broadcast_kind(&self.value(a).shape, &self.value(b).shape);
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let data = match bc {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::Row => {
                let d = bv.len();
                av.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv[i % d]))
                    .collect()
            }
        };
        (
            Tensor {
                shape: self.value(a).shape.clone(),
                data,
            },
            bc,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (t, bc) = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (t, bc) = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub { a, b, bc })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (t, bc) = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul { a, b, bc })
    }

    /// Concatenate 2D tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let bsz = self.value(parts[0]).shape[0];
        let mut width = 0;
        for &p in parts {
            let s = &self.value(p).shape;
            assert_eq!(s.len(), 2, "concat expects 2D parts");
            assert_eq!(s[0], bsz, "concat batch mismatch");
            width += s[1];
        }
        let mut data = vec![0.0; bsz * width];
        let mut off = 0;
        for &p in parts {
            let d = self.value(p).shape[1];
            let src = &self.value(p).data;
            for r in 0..bsz {
                data[r * width + off..r * width + off + d]
                    .copy_from_slice(&src[r * d..(r + 1) * d]);
            }
            off += d;
        }
        self.push(
            Tensor::from_vec(&[bsz, width], data),
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).numel(),
            "reshape element count mismatch"
        );
        let t = Tensor::from_vec(shape, self.value(a).data.clone());
        self.push(t, Op::Reshape { a })
    }

    /// [B, D] -> [B] row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).shape.clone();
        assert_eq!(s.len(), 2, "row_sum expects 2D");
        let d = s[1];
        let data = self.value(a).data.chunks(d).map(|r| r.iter().sum()).collect();
        self.push(Tensor::from_vec(&[s[0]], data), Op::RowSum { a })
    }

    /// Mean over every element -> scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let m = self.value(a).data.iter().sum::<f64>() / n;
        self.push(Tensor::scalar(m), Op::MeanAll { a })
    }

    /// Q = V + A - mean(A) per row; v [B, 1], a [B, N].
    pub fn dueling_aggregate(&mut self, v: Var, a: Var) -> Var {
        let vs = self.value(v).shape.clone();
        let as_ = self.value(a).shape.clone();
        assert_eq!(vs.len(), 2, "dueling V must be 2D");
        assert_eq!(vs[1], 1, "dueling V must be [B, 1]");
        assert_eq!(as_.len(), 2, "dueling A must be 2D");
        assert_eq!(vs[0], as_[0], "dueling batch mismatch");
        let n = as_[1];
        let mut data = vec![0.0; vs[0] * n];
        for r in 0..vs[0] {
            let row = &self.value(a).data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let base = self.value(v).data[r];
            for j in 0..n {
                data[r * n + j] = base + row[j] - mean;
            }
        }
        self.push(Tensor::from_vec(&as_, data), Op::Dueling { v, a })
    }

    /// Pick one column per row: q [B, N], idx len B -> [B].
    pub fn gather(&mut self, q: Var, idx: &[usize]) -> Var {
        let s = self.value(q).shape.clone();
        assert_eq!(s.len(), 2, "gather expects 2D");
        assert_eq!(idx.len(), s[0], "gather index count mismatch");
        let n = s[1];
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &j)| {
                assert!(j < n, "gather index out of range");
                self.value(q).data[r * n + j]
            })
            .collect();
        self.push(
            Tensor::from_vec(&[s[0]], data),
            Op::Gather {
                q,
                idx: idx.to_vec(),
            },
        )
    }

    /// Mean smooth-L1 (Huber, delta 1) between predictions and constants.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64]) -> Var {
        let p = &self.value(pred).data;
        assert_eq!(p.len(), target.len(), "smooth_l1 length mismatch");
        let mut acc = 0.0;
        for (x, t) in p.iter().zip(target) {
            let d = x - t;
            acc += if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            };
        }
        let m = acc / p.len() as f64;
        self.push(
            Tensor::scalar(m),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar root; returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.accumulate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut bump = |v: Var, add: Vec<f64>| {
            match &mut grads[v.0] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(&add) {
                        *a += b;
                    }
                }
                slot => *slot = Some(add),
            };
        };
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Affine { x, w, b } => {
                let xs = &self.value(*x).shape;
                let ws = &self.value(*w).shape;
                let (bsz, inp, out) = (xs[0], xs[1], ws[1]);
                bump(*x, matmul_tb(gy, (bsz, out), &self.value(*w).data, (inp, out)));
                bump(
                    *w,
                    matmul_ta(&self.value(*x).data, (bsz, inp), gy, (bsz, out)),
                );
                let mut db = vec![0.0; out];
                for r in 0..bsz {
                    for j in 0..out {
                        db[j] += gy[r * out + j];
                    }
                }
                bump(*b, db);
            }
            Op::Conv2d { x, k, b, meta } => {
                let m = *meta;
                let ckk = m.c_in * m.kh * m.kw;
                let plane = m.oh * m.ow;
                let rows = m.batch * plane;
                // dy back to the [R, F] layout used by the matmul.
                let mut dy2 = vec![0.0; rows * m.c_out];
                for bi in 0..m.batch {
                    for f in 0..m.c_out {
                        for p in 0..plane {
                            dy2[(bi * plane + p) * m.c_out + f] =
                                gy[(bi * m.c_out + f) * plane + p];
                        }
                    }
                }
                let mut db = vec![0.0; m.c_out];
                for r in 0..rows {
                    for f in 0..m.c_out {
                        db[f] += dy2[r * m.c_out + f];
                    }
                }
                bump(*b, db);
                let cols = im2col(&self.value(*x).data, &m);
                // dK[F, CKK] = dy2ᵀ · cols
                bump(*k, matmul_ta(&dy2, (rows, m.c_out), &cols, (rows, ckk)));
                // dcols [R, CKK] = dy2 · K
                let dcols = matmul(&dy2, (rows, m.c_out), &self.value(*k).data, (m.c_out, ckk));
                let mut dx = vec![0.0; m.batch * m.c_in * m.h * m.w];
                for bi in 0..m.batch {
                    for oy in 0..m.oh {
                        for ox in 0..m.ow {
                            let r = (bi * m.oh + oy) * m.ow + ox;
                            let base = r * ckk;
                            for c in 0..m.c_in {
                                let xc = (bi * m.c_in + c) * m.h * m.w;
                                for di in 0..m.kh {
                                    let xr = xc + (oy * m.stride + di) * m.w + ox * m.stride;
                                    let q = base + (c * m.kh + di) * m.kw;
                                    for dj in 0..m.kw {
                                        dx[xr + dj] += dcols[q + dj];
                                    }
                                }
                            }
                        }
                    }
                }
                bump(*x, dx);
            }
            Op::Relu { a } => {
                let src = &self.value(*a).data;
                bump(
                    *a,
                    gy.iter()
                        .zip(src)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Tanh { a } => {
                let y = &self.nodes[i].value.data;
                bump(*a, gy.iter().zip(y).map(|(&g, &t)| g * (1.0 - t * t)).collect());
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[i].value.data;
                bump(*a, gy.iter().zip(y).map(|(&g, &s)| g * s * (1.0 - s)).collect());
            }
            Op::Exp { a } => {
                let y = &self.nodes[i].value.data;
                bump(*a, gy.iter().zip(y).map(|(&g, &e)| g * e).collect());
            }
            Op::Clamp { a, lo, hi } => {
                let src = &self.value(*a).data;
                bump(
                    *a,
                    gy.iter()
                        .zip(src)
                        .map(|(&g, &x)| if x > *lo && x < *hi { g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Scale { a, c } => {
                bump(*a, gy.iter().map(|&g| g * c).collect());
            }
            Op::AddConst { a } => {
                bump(*a, gy.to_vec());
            }
            Op::Add { a, b, bc } => {
                bump(*a, gy.to_vec());
                bump(*b, reduce_broadcast(gy, &self.value(*b).shape, *bc));
            }
            Op::Sub { a, b, bc } => {
                bump(*a, gy.to_vec());
                let mut db = reduce_broadcast(gy, &self.value(*b).shape, *bc);
                for v in &mut db {
                    *v = -*v;
                }
                bump(*b, db);
            }
            Op::Mul { a, b, bc } => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                let da: Vec<f64> = match bc {
                    Broadcast::Same => gy.iter().zip(bv).map(|(&g, &y)| g * y).collect(),
                    Broadcast::Scalar => gy.iter().map(|&g| g * bv[0]).collect(),
                    Broadcast::Row => {
                        let d = bv.len();
                        gy.iter().enumerate().map(|(j, &g)| g * bv[j % d]).collect()
                    }
                };
                bump(*a, da);
                let gmul: Vec<f64> = gy.iter().zip(av).map(|(&g, &x)| g * x).collect();
                bump(*b, reduce_broadcast(&gmul, &self.value(*b).shape, *bc));
            }
            Op::Concat { parts } => {
                let bsz = self.nodes[i].value.shape[0];
                let width = self.nodes[i].value.shape[1];
                let mut off = 0;
                for &p in parts {
                    let d = self.value(p).shape[1];
                    let mut dp = vec![0.0; bsz * d];
                    for r in 0..bsz {
                        dp[r * d..(r + 1) * d]
                            .copy_from_slice(&gy[r * width + off..r * width + off + d]);
                    }
                    bump(p, dp);
                    off += d;
                }
            }
            Op::Reshape { a } => {
                bump(*a, gy.to_vec());
            }
            Op::RowSum { a } => {
                let d = self.value(*a).shape[1];
                let mut da = vec![0.0; self.value(*a).numel()];
                for (r, &g) in gy.iter().enumerate() {
                    for j in 0..d {
                        da[r * d + j] = g;
                    }
                }
                bump(*a, da);
            }
            Op::MeanAll { a } => {
                let n = self.value(*a).numel();
                bump(*a, vec![gy[0] / n as f64; n]);
            }
            Op::Dueling { v, a } => {
                let n = self.value(*a).shape[1];
                let bsz = self.value(*a).shape[0];
                let mut dv = vec![0.0; bsz];
                let mut da = vec![0.0; bsz * n];
                for r in 0..bsz {
                    let row = &gy[r * n..(r + 1) * n];
                    let s: f64 = row.iter().sum();
                    dv[r] = s;
                    for j in 0..n {
                        da[r * n + j] = row[j] - s / n as f64;
                    }
                }
                bump(*v, dv);
                bump(*a, da);
            }
            Op::Gather { q, idx } => {
                let n = self.value(*q).shape[1];
                let mut dq = vec![0.0; self.value(*q).numel()];
                for (r, (&j, &g)) in idx.iter().zip(gy).enumerate() {
                    dq[r * n + j] = g;
                }
                bump(*q, dq);
            }
            Op::SmoothL1 { pred, target } => {
                let p = &self.value(*pred).data;
                let n = p.len() as f64;
                bump(
                    *pred,
                    p.iter()
                        .zip(target)
                        .map(|(&x, &t)| {
                            let d = x - t;
                            gy[0] * if d.abs() < 1.0 { d } else { d.signum() } / n
                        })
                        .collect(),
                );
            }
        }
    }
}

fn reduce_broadcast(gy: &[f64], bshape: &[usize], bc: Broadcast) -> Vec<f64> {
    match bc {
        Broadcast::Same => gy.to_vec(),
        Broadcast::Scalar => vec![gy.iter().sum()],
        Broadcast::Row => {
            let d = bshape[0];
            let mut out = vec![0.0; d];
            for (j, &g) in gy.iter().enumerate() {
                out[j % d] += g;
            }
            out
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Named parameters with adaptive-moment state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
    pub step: u64,
}

#[derive(Debug, Clone)]
struct ParamEntry {
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        let n = t.numel();
        let prev = self.entries.insert(
            name.to_string(),
            ParamEntry {
                value: t,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        assert!(prev.is_none(), "duplicate parameter '{}'", name);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter '{}'", name)).value
    }

    pub fn set(&mut self, name: &str, data: Vec<f64>) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{}'", name));
        assert_eq!(e.value.data.len(), data.len(), "parameter '{}' resized", name);
        e.value.data = data;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn total_len(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// All parameter values flattened in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for e in self.entries.values() {
            out.extend_from_slice(&e.value.data);
        }
        out
    }

    /// Overwrite all parameters from a flat vector in name order.
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_len(), "flat parameter size mismatch");
        let mut off = 0;
        for e in self.entries.values_mut() {
            let n = e.value.data.len();
            e.value.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// One adaptive-moment update with bias correction.
    pub fn adam_step(
        &mut self,
        grads: &[(String, Vec<f64>)],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<(), TensorError> {
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::BadGradient(name.clone()));
            }
            if !self.entries.contains_key(name) {
                return Err(TensorError::Shape(format!("unknown parameter '{}'", name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let e = self.entries.get_mut(name).unwrap();
            assert_eq!(g.len(), e.value.data.len(), "gradient shape for '{}'", name);
            for i in 0..g.len() {
                e.m[i] = beta1 * e.m[i] + (1.0 - beta1) * g[i];
                e.v[i] = beta2 * e.v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = e.m[i] / c1;
                let vh = e.v[i] / c2;
                e.value.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn save(&self, w: &mut impl Write) -> Result<(), TensorError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, e) in &self.entries {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(e.value.shape.len() as u8)?;
            for &d in &e.value.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &x in &e.value.data {
                w.write_f32::<LittleEndian>(x as f32)?;
            }
            for &x in &e.m {
                w.write_f32::<LittleEndian>(x as f32)?;
            }
            for &x in &e.v {
                w.write_f32::<LittleEndian>(x as f32)?;
            }
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<ParamSet, TensorError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Format(format!(
                "unsupported version {}",
                version
            )));
        }
        let step = r.read_u64::<LittleEndian>()?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut out = ParamSet::new();
        out.step = step;
        for _ in 0..count {
            let nlen = r.read_u16::<LittleEndian>()? as usize;
            let mut nb = vec![0u8; nlen];
            r.read_exact(&mut nb)?;
            let name =
                String::from_utf8(nb).map_err(|_| TensorError::Format("bad name".into()))?;
            let ndim = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut read_block = |len: usize| -> Result<Vec<f64>, TensorError> {
                let mut v = Vec::with_capacity(len);
                for _ in 0..len {
                    v.push(r.read_f32::<LittleEndian>()? as f64);
                }
                Ok(v)
            };
            let data = read_block(n)?;
            let m = read_block(n)?;
            let vv = read_block(n)?;
            out.entries.insert(
                name,
                ParamEntry {
                    value: Tensor::from_vec(&shape, data),
                    m,
                    v: vv,
                },
            );
        }
        Ok(out)
    }
}

/// Checkpoint layout: magic, format version (u32), optimizer step (u64),
/// parameter count (u32), then per parameter: name (u16 length + UTF-8),
/// rank (u8), dims (u32 each), values, first moments, second moments, all
/// f32. Every integer and float is little-endian.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NVSIMCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fan-in scaled uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn init_uniform(rng: &mut impl rand::Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..shape.iter().product())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Finite-difference checking utilities shared by unit and acceptance tests.
pub mod check {
    use super::*;

    /// Max relative error between analytic and central-difference gradients
    /// of `f` (a scalar-valued graph over the given inputs).
    pub fn finite_diff(
        inputs: &[Tensor],
        h: f64,
        f: impl Fn(&mut Tape, &[Var]) -> Var,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let root = f(&mut tape, &vars);
        let grads = tape.backward(root);
        let mut worst: f64 = 0.0;
        for (vi, input) in inputs.iter().enumerate() {
            let g = grads
                .wrt(vars[vi])
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; input.numel()]);
            for e in 0..input.numel() {
                let eval = |delta: f64| -> f64 {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == vi {
                                t.data[e] += delta;
                            }
                            tape.input(t)
                        })
                        .collect();
                    let root = f(&mut tape, &vars);
                    tape.value(root).data[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = g[e];
                let denom = analytic.abs().max(numeric.abs()).max(1.0);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::check::finite_diff;
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]));
        let w = tape.input(Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let b = tape.input(Tensor::zeros(&[3]));
        let y = tape.affine(x, w, b);
        assert_eq!(tape.value(y).data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn affine_scalar_worked_case() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[1, 1], vec![2.0]));
        let w = tape.input(Tensor::from_vec(&[1, 1], vec![3.0]));
        let b = tape.input(Tensor::from_vec(&[1], vec![1.0]));
        let y = tape.affine(x, w, b);
        assert_eq!(tape.value(y).data, vec![7.0]);
        let m = tape.mean_all(y);
        let g = tape.backward(m);
        assert_eq!(g.wrt(x).unwrap(), &[3.0]);
        assert_eq!(g.wrt(w).unwrap(), &[2.0]);
        assert_eq!(g.wrt(b).unwrap(), &[1.0]);
    }

    #[test]
    fn affine_matches_finite_differences() {
        let mut rng = crate::rng::stream(61, 0);
        let inputs = vec![
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        let err = finite_diff(&inputs, 1e-4, |t, v| {
            let y = t.affine(v[0], v[1], v[2]);
            t.mean_all(y)
        });
        assert!(err < 1e-5, "rel err {}", err);
    }

    #[test]
    fn conv_unit_kernel_is_identity() {
        let mut rng = crate::rng::stream(62, 0);
        let x = rand_tensor(&mut rng, &[2, 1, 4, 4]);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let k = tape.input(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]));
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv2d(xv, k, b, 1);
        assert_eq!(tape.value(y).data, x.data);
    }

    #[test]
    fn conv_ones_kernel_sums_window() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[1, 1, 5, 5], vec![2.0; 25]));
        let k = tape.input(Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]));
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 1);
        assert_eq!(tape.value(y).shape, vec![1, 1, 3, 3]);
        assert!(tape.value(y).data.iter().all(|&v| (v - 18.0).abs() < 1e-12));
    }

    #[test]
    fn conv_matches_finite_differences() {
        let mut rng = crate::rng::stream(63, 0);
        for &stride in &[1usize, 2] {
            let inputs = vec![
                rand_tensor(&mut rng, &[2, 3, 6, 6]),
                rand_tensor(&mut rng, &[4, 3, 3, 3]),
                rand_tensor(&mut rng, &[4]),
            ];
            let err = finite_diff(&inputs, 1e-4, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride);
                t.mean_all(y)
            });
            assert!(err < 1e-5, "stride {} rel err {}", stride, err);
        }
    }

    #[test]
    fn pointwise_ops_match_finite_differences() {
        let mut rng = crate::rng::stream(64, 0);
        let x = rand_tensor(&mut rng, &[3, 4]);
        for (name, f) in [
            ("relu", 0usize),
            ("tanh", 1),
            ("sigmoid", 2),
            ("exp", 3),
        ] {
            let err = finite_diff(std::slice::from_ref(&x), 1e-4, |t, v| {
                let y = match f {
                    0 => t.relu(v[0]),
                    1 => t.tanh(v[0]),
                    2 => t.sigmoid(v[0]),
                    _ => t.exp(v[0]),
                };
                t.mean_all(y)
            });
            assert!(err < 1e-4, "{} rel err {}", name, err);
        }
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = crate::rng::stream(65, 0);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[3, 2]),
            rand_tensor(&mut rng, &[6, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[2]),
        ];
        let err = finite_diff(&inputs, 1e-4, |t, v| {
            let cat = t.concat(&[v[0], v[1]]);
            let h = t.affine(cat, v[2], v[3]);
            let h = t.tanh(h);
            let s = t.row_sum(h);
            let s2 = t.reshape(s, &[3, 1]);
            let q = t.dueling_aggregate(s2, h);
            let picked = t.gather(q, &[0, 2, 4]);
            let w2 = t.reshape(v[4], &[1, 2]);
            let wsum = t.row_sum(w2);
            let scaled = t.mul(picked, wsum);
            t.smooth_l1(scaled, &[0.3, -0.2, 1.4])
        });
        assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn dueling_worked_values() {
        let mut tape = Tape::new();
        let v = tape.input(Tensor::from_vec(&[1, 1], vec![1.0]));
        let a = tape.input(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]));
        let q = tape.dueling_aggregate(v, a);
        let got = &tape.value(q).data;
        assert!((got[0] - 0.0).abs() < 1e-12);
        assert!((got[1] - 1.0).abs() < 1e-12);
        assert!((got[2] - 2.0).abs() < 1e-12);
        // Constant advantages collapse to V.
        let mut tape = Tape::new();
        let v = tape.input(Tensor::from_vec(&[1, 1], vec![0.7]));
        let a = tape.input(Tensor::from_vec(&[1, 4], vec![5.0; 4]));
        let q = tape.dueling_aggregate(v, a);
        assert!(tape.value(q).data.iter().all(|&x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn dueling_preserves_argmax() {
        let mut rng = crate::rng::stream(66, 0);
        for _ in 0..100 {
            let v = rand_tensor(&mut rng, &[1, 1]);
            let a = rand_tensor(&mut rng, &[1, 9]);
            let argmax = |d: &[f64]| {
                d.iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .unwrap()
                    .0
            };
            let mut tape = Tape::new();
            let vv = tape.input(v);
            let av = tape.input(a.clone());
            let q = tape.dueling_aggregate(vv, av);
            assert_eq!(argmax(&tape.value(q).data), argmax(&a.data));
        }
    }

    #[test]
    fn adam_zero_grads_keep_params() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[2], vec![1.5, -0.5]));
        p.adam_step(&[("w".into(), vec![0.0, 0.0])], 0.01, 0.9, 0.999, 1e-8)
            .unwrap();
        assert_eq!(p.get("w").data, vec![1.5, -0.5]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // With bias correction the first step is -lr * g / (|g| + eps').
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[1], vec![0.0]));
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let g = 2.0;
        p.adam_step(&[("w".into(), vec![g])], lr, b1, b2, eps).unwrap();
        let mh = g; // m / (1 - b1)
        let vh = g * g; // v / (1 - b2)
        let expect = -lr * mh / (vh.sqrt() + eps);
        assert!((p.get("w").data[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_runs_are_bit_identical() {
        let run = || {
            let mut rng = crate::rng::stream(67, 0);
            let mut p = ParamSet::new();
            p.insert("w", init_uniform(&mut rng, &[8], 8));
            for i in 0..50 {
                let g: Vec<f64> = (0..8).map(|j| ((i * 7 + j) as f64).sin()).collect();
                p.adam_step(&[("w".into(), g)], 1e-3, 0.9, 0.999, 1e-8).unwrap();
            }
            p.get("w").data.clone()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn adam_rejects_nan_with_name() {
        let mut p = ParamSet::new();
        p.insert("conv1_w", Tensor::zeros(&[2]));
        let err = p
            .adam_step(&[("conv1_w".into(), vec![f64::NAN, 0.0])], 0.01, 0.9, 0.999, 1e-8)
            .unwrap_err();
        assert!(err.to_string().contains("conv1_w"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = crate::rng::stream(68, 0);
        let mut p = ParamSet::new();
        p.insert("a", init_uniform(&mut rng, &[3, 4], 4));
        p.insert("b", init_uniform(&mut rng, &[7], 7));
        p.adam_step(
            &[("a".into(), vec![0.1; 12]), ("b".into(), vec![-0.2; 7])],
            1e-3,
            0.9,
            0.999,
            1e-8,
        )
        .unwrap();
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        let q = ParamSet::load(&mut buf.as_slice()).unwrap();
        assert_eq!(q.step, p.step);
        for name in ["a", "b"] {
            let orig = &p.get(name).data;
            let back = &q.get(name).data;
            assert_eq!(orig.len(), back.len());
            for (o, r) in orig.iter().zip(back) {
                assert_eq!(*o as f32, *r as f32);
            }
        }
        // Saving twice yields identical bytes.
        let mut buf2 = Vec::new();
        p.save(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let mut rng = crate::rng::stream(69, 0);
        let mut p = ParamSet::new();
        p.insert("x", init_uniform(&mut rng, &[5], 5));
        p.insert("y", init_uniform(&mut rng, &[2, 3], 3));
        let flat = p.flatten();
        assert_eq!(flat.len(), 11);
        let mut q = p.clone();
        let shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        q.unflatten(&shifted);
        let back = q.flatten();
        for (a, b) in flat.iter().zip(&back) {
            assert!((b - a - 1.0).abs() < 1e-15);
        }
    }
}
