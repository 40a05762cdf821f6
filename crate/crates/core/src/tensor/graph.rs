use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::{Element, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
        cout: usize,
        cols: Option<Vec<E>>,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, E),
    Sum(NodeId),
    Mean(NodeId),
    Relu(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    ChannelAffine {
        x: NodeId,
        scale: Option<NodeId>,
        shift: NodeId,
    },
    GlobalAvgPool(NodeId),
    SpatialMean(NodeId),
    ChannelWeightedSum {
        x: NodeId,
        w: NodeId,
    },
    MinMax {
        x: NodeId,
        /// `(argmin, argmax, max - min)`; `None` for a constant input.
        bounds: Option<(usize, usize, E)>,
    },
    ChannelScale {
        x: NodeId,
        h: NodeId,
    },
    Concat(Vec<NodeId>),
    GatherColumns {
        x: NodeId,
        index: Vec<usize>,
    },
    Narrow {
        x: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    MaxOverColumns {
        x: NodeId,
        argmax: Vec<usize>,
    },
    TemporalShift {
        x: NodeId,
        fold: usize,
    },
    AvgPool {
        x: NodeId,
        kh: usize,
        kw: usize,
    },
    Energy(NodeId),
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<E>,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
}

/// A reverse-mode tape. Nodes are appended in evaluation order, so every
/// input id precedes the node that consumes it.
pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
    params: Vec<(String, NodeId)>,
    param_ids: HashMap<String, NodeId>,
    track_branches: bool,
    branches: Vec<u64>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn hash_of(v: impl Hash) -> u64 {
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

fn expect_rank<E: Element>(
    op: &'static str,
    t: &Tensor<E>,
    ok: impl Fn(usize) -> bool,
    expected: &'static str,
) -> Result<()> {
    if ok(t.rank()) {
        Ok(())
    } else {
        Err(Error::Rank {
            op,
            expected,
            found: t.dims().to_vec(),
        })
    }
}

fn same_dims<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.dims() != b.dims() {
        let (expected, found) = if a.len() != b.len() {
            (a.len(), b.len())
        } else {
            (a.rank(), b.rank())
        };
        return Err(Error::ShapeMismatch {
            op,
            dim: "operand shape",
            expected,
            found,
        });
    }
    Ok(())
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_ids: HashMap::new(),
            track_branches: false,
            branches: Vec::new(),
        }
    }

    /// Records the discrete decisions of non-smooth operators (ReLU masks,
    /// argmax/argmin picks, selections) so finite-difference checks can
    /// detect when a perturbation crosses a kink.
    pub fn with_branch_tracking() -> Self {
        Self {
            track_branches: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    pub fn record_branch(&mut self, decision: impl Hash) {
        if self.track_branches {
            self.branches.push(hash_of(decision));
        }
    }

    pub fn branch_signature(&self) -> u64 {
        hash_of(&self.branches)
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a named parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore<E>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(value, Op::Leaf);
        self.params.push((name.to_string(), id));
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Frame-wise 2D cross-correlation. `x` is `Cin×H×W` or `Cin×T×H×W`,
    /// `w` is `Cout×Cin×k×k` with odd `k`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let wd = self.val(w).dims();
        if wd.len() == 4 && wd[2] != wd[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "kernel width",
                expected: wd[2],
                found: wd[3],
            });
        }
        self.conv2d_rect(x, w, (stride, stride), (padding, padding))
    }

    /// [`conv2d`](Self::conv2d) with a `kh×kw` kernel (both odd) and
    /// per-axis stride and padding.
    pub fn conv2d_rect(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<NodeId> {
        let (xv, wv) = (self.val(x), self.val(w));
        expect_rank("conv2d", xv, |r| r == 3 || r == 4, "3 or 4")?;
        expect_rank("conv2d", wv, |r| r == 4, "4")?;
        let wd = wv.dims();
        let (cout, cin, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv2d: kernel {kh}x{kw} must have odd extents")));
        }
        let xd = xv.dims();
        if xd[0] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "input channels",
                expected: cin,
                found: xd[0],
            });
        }
        let (batch, h, wid) = if xd.len() == 4 {
            (xd[1], xd[2], xd[3])
        } else {
            (1, xd[1], xd[2])
        };
        let geom = ConvGeom::new("conv2d", cin, batch, (h, wid), (kh, kw), stride, padding)?;
        let (out, cols) = kernels::conv_forward(xv.data(), wv.data(), cout, &geom);
        let dims = if xd.len() == 4 {
            vec![cout, batch, geom.oh, geom.ow]
        } else {
            vec![cout, geom.oh, geom.ow]
        };
        Ok(self.push(
            Tensor::from_parts(dims, out),
            Op::Conv {
                x,
                w,
                geom,
                cout,
                cols,
            },
        ))
    }

    /// 1D cross-correlation of `Cin×L` with `Cout×Cin×k`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (xv, wv) = (self.val(x), self.val(w));
        expect_rank("conv1d", xv, |r| r == 2, "2")?;
        expect_rank("conv1d", wv, |r| r == 3, "3")?;
        let (cout, cin, k) = (wv.dims()[0], wv.dims()[1], wv.dims()[2]);
        if xv.dims()[0] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                dim: "input channels",
                expected: cin,
                found: xv.dims()[0],
            });
        }
        let geom = ConvGeom::new(
            "conv1d",
            cin,
            1,
            (1, xv.dims()[1]),
            (1, k),
            (1, stride),
            (0, padding),
        )?;
        let (out, cols) = kernels::conv_forward(xv.data(), wv.data(), cout, &geom);
        Ok(self.push(
            Tensor::from_parts(vec![cout, geom.ow], out),
            Op::Conv {
                x,
                w,
                geom,
                cout,
                cols,
            },
        ))
    }

    /// `w·x + b` for a vector `x`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.val(x), self.val(w), self.val(b));
        expect_rank("dense", xv, |r| r == 1, "1")?;
        expect_rank("dense", wv, |r| r == 2, "2")?;
        let (dout, din) = (wv.dims()[0], wv.dims()[1]);
        if xv.len() != din {
            return Err(Error::ShapeMismatch {
                op: "dense",
                dim: "input features",
                expected: din,
                found: xv.len(),
            });
        }
        if bv.dims() != [dout] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                dim: "bias length",
                expected: dout,
                found: bv.len(),
            });
        }
        let mut out = bv.data().to_vec();
        E::gemm(
            dout,
            din,
            1,
            E::one(),
            wv.data(),
            (din as isize, 1),
            xv.data(),
            (1, 1),
            E::one(),
            &mut out,
            (1, 1),
        );
        Ok(self.push(Tensor::from_parts(vec![dout], out), Op::Dense { x, w, b }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        expect_rank("matmul", av, |r| r == 2, "2")?;
        expect_rank("matmul", bv, |r| r == 2, "2")?;
        let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
        if bv.dims()[0] != k {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                dim: "inner dimension",
                expected: k,
                found: bv.dims()[0],
            });
        }
        let mut out = vec![E::zero(); m * n];
        E::gemm(
            m,
            k,
            n,
            E::one(),
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            E::zero(),
            &mut out,
            (n as isize, 1),
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        expect_rank("transpose", xv, |r| r == 2, "2")?;
        let (r, c) = (xv.dims()[0], xv.dims()[1]);
        let d = xv.data();
        let out = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        same_dims("add", av, bv)?;
        let out = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let dims = av.dims().to_vec();
        Ok(self.push(Tensor::from_parts(dims, out), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        same_dims("elementwise_mul", av, bv)?;
        let out = av.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect();
        let dims = av.dims().to_vec();
        Ok(self.push(Tensor::from_parts(dims, out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: E) -> NodeId {
        let out = self.val(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x);
        let s = v.sum() / E::lit(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.val(x).map(|v| if v > E::zero() { v } else { E::zero() });
        if self.track_branches {
            let mask: Vec<bool> = self.val(x).data().iter().map(|&v| v > E::zero()).collect();
            self.record_branch(mask);
        }
        self.push(out, Op::Relu(x))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.val(x);
        if axis >= xv.rank() {
            return Err(Error::invalid(format!(
                "softmax: axis {axis} out of range for dims {:?}",
                xv.dims()
            )));
        }
        let (outer, len, inner) = split_axis(xv.dims(), axis);
        let d = xv.data();
        let mut out = vec![E::zero(); d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let m = (0..len).map(|i| d[at(i)]).fold(E::neg_infinity(), E::max);
                let mut z = E::zero();
                for i in 0..len {
                    let e = (d[at(i)] - m).exp();
                    out[at(i)] = e;
                    z = z + e;
                }
                for i in 0..len {
                    out[at(i)] = out[at(i)] / z;
                }
            }
        }
        let dims = xv.dims().to_vec();
        Ok(self.push(Tensor::from_parts(dims, out), Op::Softmax { x, axis }))
    }

    /// `x[c, ..]·scale[c] + shift[c]`; `scale` may be omitted (bias only).
    pub fn channel_affine(&mut self, x: NodeId, scale: Option<NodeId>, shift: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        expect_rank("channel_affine", xv, |r| r >= 2, ">= 2")?;
        let c = xv.dims()[0];
        for p in scale.iter().chain(std::iter::once(&shift)) {
            let pv = self.val(*p);
            if pv.dims() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "channel_affine",
                    dim: "channel count",
                    expected: c,
                    found: pv.len(),
                });
            }
        }
        let inner = xv.len() / c;
        let sh = self.val(shift).data();
        let sc = scale.map(|s| self.val(s).data());
        let d = xv.data();
        let mut out = Vec::with_capacity(d.len());
        for ch in 0..c {
            let a = sc.map_or(E::one(), |s| s[ch]);
            out.extend(d[ch * inner..(ch + 1) * inner].iter().map(|&v| v * a + sh[ch]));
        }
        let dims = xv.dims().to_vec();
        Ok(self.push(
            Tensor::from_parts(dims, out),
            Op::ChannelAffine { x, scale, shift },
        ))
    }

    /// Mean over every axis but the first: `C×… → C`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        expect_rank("global_avg_pool", xv, |r| r >= 2, ">= 2")?;
        let c = xv.dims()[0];
        let inner = xv.len() / c;
        let n = E::lit(inner as f64);
        let out = xv
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().copied().fold(E::zero(), |a, b| a + b) / n)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::GlobalAvgPool(x)))
    }

    /// Per-frame spatial mean: `C×T×H×W → T×C`.
    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        expect_rank("spatial_mean", xv, |r| r == 4, "4")?;
        let (c, t) = (xv.dims()[0], xv.dims()[1]);
        let plane = xv.dims()[2] * xv.dims()[3];
        let n = E::lit(plane as f64);
        let d = xv.data();
        let mut out = vec![E::zero(); t * c];
        for ch in 0..c {
            for f in 0..t {
                let s = &d[(ch * t + f) * plane..(ch * t + f + 1) * plane];
                out[f * c + ch] = s.iter().copied().fold(E::zero(), |a, b| a + b) / n;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![t, c], out), Op::SpatialMean(x)))
    }

    /// `y[t,i,j] = Σ_c w[t,c]·x[c,t,i,j]` for `x: C×T×H×W`, `w: T×C`.
    pub fn channel_weighted_sum(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.val(x), self.val(w));
        expect_rank("channel_weighted_sum", xv, |r| r == 4, "4")?;
        let (c, t, h, wd) = (xv.dims()[0], xv.dims()[1], xv.dims()[2], xv.dims()[3]);
        if wv.dims() != [t, c] {
            return Err(Error::ShapeMismatch {
                op: "channel_weighted_sum",
                dim: "weight element count (T×C)",
                expected: t * c,
                found: wv.len(),
            });
        }
        let plane = h * wd;
        let (d, wt) = (xv.data(), wv.data());
        let mut out = vec![E::zero(); t * plane];
        for ch in 0..c {
            for f in 0..t {
                let a = wt[f * c + ch];
                let src = &d[(ch * t + f) * plane..(ch * t + f + 1) * plane];
                let dst = &mut out[f * plane..(f + 1) * plane];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = *o + a * v;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![t, h, wd], out),
            Op::ChannelWeightedSum { x, w },
        ))
    }

    /// `(x - min)/(max - min)` over the whole tensor; constant input maps
    /// to 0.5 everywhere.
    pub fn minmax_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        if !xv.all_finite() {
            return Err(Error::NonFinite("minmax_normalize"));
        }
        let d = xv.data();
        let (mut lo, mut hi) = (0, 0);
        for (i, &v) in d.iter().enumerate() {
            if v < d[lo] {
                lo = i;
            }
            if v > d[hi] {
                hi = i;
            }
        }
        let range = d[hi] - d[lo];
        let (out, bounds) = if range > E::zero() {
            let m = d[lo];
            (
                xv.map(|v| (v - m) / range),
                Some((lo, hi, range)),
            )
        } else {
            (Tensor::full(xv.dims().to_vec(), E::lit(0.5)), None)
        };
        self.record_branch((lo, hi));
        Ok(self.push(out, Op::MinMax { x, bounds }))
    }

    /// Multiplies every channel of `x: C×S…` elementwise by `h: S…`.
    pub fn channel_scale(&mut self, x: NodeId, h: NodeId) -> Result<NodeId> {
        let (xv, hv) = (self.val(x), self.val(h));
        if xv.dims().len() != hv.dims().len() + 1 || xv.dims()[1..] != *hv.dims() {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                dim: "per-channel extent",
                expected: hv.len(),
                found: xv.len() / xv.dims()[0],
            });
        }
        let inner = hv.len();
        let hd = hv.data();
        let out = xv
            .data()
            .chunks(inner)
            .flat_map(|ch| ch.iter().zip(hd).map(|(&v, &s)| v * s))
            .collect();
        let dims = xv.dims().to_vec();
        Ok(self.push(Tensor::from_parts(dims, out), Op::ChannelScale { x, h }))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let tail = self.val(first).dims()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let v = self.val(x);
            if v.dims()[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    dim: "trailing extent",
                    expected: tail.iter().product(),
                    found: v.dims()[1..].iter().product(),
                });
            }
            rows += v.dims()[0];
            out.extend_from_slice(v.data());
        }
        let mut dims = vec![rows];
        dims.extend(tail);
        Ok(self.push(Tensor::from_parts(dims, out), Op::Concat(xs.to_vec())))
    }

    /// Gathers flat positions of `x: C×S…` into a `C×N` matrix.
    pub fn gather_columns(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let xv = self.val(x);
        expect_rank("gather_columns", xv, |r| r >= 2, ">= 2")?;
        if index.is_empty() {
            return Err(Error::invalid("gather_columns: empty index"));
        }
        let c = xv.dims()[0];
        let m = xv.len() / c;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::ShapeMismatch {
                op: "gather_columns",
                dim: "position index bound",
                expected: m,
                found: bad,
            });
        }
        let d = xv.data();
        let n = index.len();
        let mut out = Vec::with_capacity(c * n);
        for ch in 0..c {
            let row = &d[ch * m..(ch + 1) * m];
            out.extend(index.iter().map(|&i| row[i]));
        }
        self.record_branch(index);
        Ok(self.push(
            Tensor::from_parts(vec![c, n], out),
            Op::GatherColumns {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Rows `start..start+len` of the first axis.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.val(x);
        let rows = xv.dims()[0];
        if len == 0 || start + len > rows {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                dim: "row range end",
                expected: rows,
                found: start + len,
            });
        }
        let inner = xv.len() / rows;
        let out = xv.data()[start * inner..(start + len) * inner].to_vec();
        let mut dims = xv.dims().to_vec();
        dims[0] = len;
        Ok(self.push(Tensor::from_parts(dims, out), Op::Narrow { x, start }))
    }

    pub fn reshape(&mut self, x: NodeId, dims: impl Into<Vec<usize>>) -> Result<NodeId> {
        let out = self.val(x).clone().reshape(dims)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Row-wise maximum of `C×N`.
    pub fn max_over_columns(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        expect_rank("max_over_columns", xv, |r| r == 2, "2")?;
        let (c, n) = (xv.dims()[0], xv.dims()[1]);
        let mut argmax = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for row in xv.data().chunks(n) {
            let (i, &v) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            argmax.push(i);
            out.push(v);
        }
        self.record_branch(&argmax);
        Ok(self.push(
            Tensor::from_parts(vec![c], out),
            Op::MaxOverColumns { x, argmax },
        ))
    }

    /// Temporal shift of `x: C×T×…` (see [`crate::backbone::temporal_shift`]).
    pub fn temporal_shift(&mut self, x: NodeId, fraction: f64) -> Result<NodeId> {
        let xv = self.val(x);
        expect_rank("temporal_shift", xv, |r| r >= 2, ">= 2")?;
        if !(0.0..=0.5).contains(&fraction) {
            return Err(Error::invalid(format!(
                "temporal_shift: fraction {fraction} outside [0, 0.5]"
            )));
        }
        let c = xv.dims()[0];
        let fold = (fraction * c as f64).floor() as usize;
        let out = shift_frames(xv, fold, false);
        Ok(self.push(out, Op::TemporalShift { x, fold }))
    }

    /// Non-overlapping average pooling over the spatial axes of `C×H×W` /
    /// `C×T×H×W`, or along the length of `C×L`.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xv = self.val(x);
        expect_rank("avg_pool", xv, |r| (2..=4).contains(&r), "2, 3 or 4")?;
        if k == 0 {
            return Err(Error::invalid("avg_pool: kernel must be positive"));
        }
        let d = xv.dims();
        let (kh, kw) = if d.len() == 2 { (1, k) } else { (k, k) };
        let (h, w) = if d.len() == 2 {
            (1, d[1])
        } else {
            (d[d.len() - 2], d[d.len() - 1])
        };
        if h < kh || w < kw {
            return Err(Error::ShapeMismatch {
                op: "avg_pool",
                dim: "pooled extent",
                expected: k,
                found: h.min(w),
            });
        }
        let (oh, ow) = (h / kh, w / kw);
        let planes = xv.len() / (h * w);
        let norm = E::lit((kh * kw) as f64);
        let src = xv.data();
        let mut out = vec![E::zero(); planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = E::zero();
                    for dy in 0..kh {
                        for dx in 0..kw {
                            s = s + src[p * h * w + (oy * kh + dy) * w + ox * kw + dx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = s / norm;
                }
            }
        }
        let mut dims = d.to_vec();
        if d.len() == 2 {
            dims[1] = ow;
        } else {
            let r = dims.len();
            dims[r - 2] = oh;
            dims[r - 1] = ow;
        }
        Ok(self.push(Tensor::from_parts(dims, out), Op::AvgPool { x, kh, kw }))
    }

    /// Mean of `4·h·(1-h)` over every element.
    pub fn energy(&mut self, h: NodeId) -> NodeId {
        let hv = self.val(h);
        let four = E::lit(4.0);
        let s = hv
            .data()
            .iter()
            .fold(E::zero(), |a, &v| a + four * v * (E::one() - v));
        let r = s / E::lit(hv.len() as f64);
        self.push(Tensor::scalar(r), Op::Energy(h))
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lv = self.val(logits);
        expect_rank("cross_entropy", lv, |r| r == 1, "1")?;
        let k = lv.len();
        if label >= k {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                dim: "class count",
                expected: k,
                found: label + 1,
            });
        }
        let d = lv.data();
        let m = d.iter().copied().fold(E::neg_infinity(), E::max);
        let exps: Vec<E> = d.iter().map(|&v| (v - m).exp()).collect();
        let z = exps.iter().copied().fold(E::zero(), |a, b| a + b);
        let loss = z.ln() + m - d[label];
        let probs = exps.into_iter().map(|e| e / z).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<E>> {
        let out = self.val(output);
        if out.len() != 1 {
            return Err(Error::NonScalarOutput(out.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(vec![E::one()]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let by_node = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.dims().to_vec(), g)))
            .collect();
        Ok(Gradients {
            by_node,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[i];
        let mut acc = |id: NodeId, delta: Vec<E>| match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e = *e + d;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                geom,
                cout,
                cols,
            } => {
                let cols = cols.as_deref().unwrap_or(self.val(*x).data());
                let (dx, dw) = kernels::conv_backward(g, self.val(*w).data(), cols, *cout, geom);
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.val(*x).data(), self.val(*w).data());
                let (dout, din) = (g.len(), xv.len());
                let mut dw = Vec::with_capacity(dout * din);
                for &go in g {
                    dw.extend(xv.iter().map(|&xi| go * xi));
                }
                let mut dx = vec![E::zero(); din];
                E::gemm(
                    din,
                    dout,
                    1,
                    E::one(),
                    wv,
                    (1, din as isize),
                    g,
                    (1, 1),
                    E::zero(),
                    &mut dx,
                    (1, 1),
                );
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, g.to_vec());
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                let mut da = vec![E::zero(); m * k];
                E::gemm(
                    m,
                    n,
                    k,
                    E::one(),
                    g,
                    (n as isize, 1),
                    bv.data(),
                    (1, n as isize),
                    E::zero(),
                    &mut da,
                    (k as isize, 1),
                );
                let mut db = vec![E::zero(); k * n];
                E::gemm(
                    k,
                    m,
                    n,
                    E::one(),
                    av.data(),
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    E::zero(),
                    &mut db,
                    (n as isize, 1),
                );
                acc(*a, da);
                acc(*b, db);
            }
            Op::Transpose(x) => {
                let (r, c) = (self.val(*x).dims()[0], self.val(*x).dims()[1]);
                // g is c×r
                let dx = (0..r * c).map(|idx| g[(idx % c) * r + idx / c]).collect();
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                acc(*a, g.iter().zip(bv).map(|(&gi, &q)| gi * q).collect());
                acc(*b, g.iter().zip(av).map(|(&gi, &p)| gi * p).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&gi| gi * *c).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.val(*x).len()]),
            Op::Mean(x) => {
                let n = self.val(*x).len();
                acc(*x, vec![g[0] / E::lit(n as f64); n]);
            }
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gi, &v)| if v > E::zero() { gi } else { E::zero() })
                        .collect(),
                );
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.dims(), *axis);
                let mut dx = vec![E::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + j;
                        let dot = (0..len).fold(E::zero(), |s, i| s + g[at(i)] * y[at(i)]);
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xv = self.val(*x);
                let c = xv.dims()[0];
                let inner = xv.len() / c;
                let xd = xv.data();
                let sc = scale.map(|s| self.val(s).data());
                let mut dx = Vec::with_capacity(xd.len());
                let mut dscale = vec![E::zero(); c];
                let mut dshift = vec![E::zero(); c];
                for ch in 0..c {
                    let a = sc.map_or(E::one(), |s| s[ch]);
                    let gs = &g[ch * inner..(ch + 1) * inner];
                    let xs = &xd[ch * inner..(ch + 1) * inner];
                    dx.extend(gs.iter().map(|&gi| gi * a));
                    dscale[ch] = gs.iter().zip(xs).fold(E::zero(), |s, (&gi, &v)| s + gi * v);
                    dshift[ch] = gs.iter().copied().fold(E::zero(), |s, v| s + v);
                }
                acc(*x, dx);
                if let Some(s) = scale {
                    acc(*s, dscale);
                }
                acc(*shift, dshift);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.val(*x);
                let inner = xv.len() / xv.dims()[0];
                let n = E::lit(inner as f64);
                acc(
                    *x,
                    g.iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi / n, inner))
                        .collect(),
                );
            }
            Op::SpatialMean(x) => {
                let xv = self.val(*x);
                let (c, t) = (xv.dims()[0], xv.dims()[1]);
                let plane = xv.dims()[2] * xv.dims()[3];
                let n = E::lit(plane as f64);
                let mut dx = Vec::with_capacity(xv.len());
                for ch in 0..c {
                    for f in 0..t {
                        dx.extend(std::iter::repeat_n(g[f * c + ch] / n, plane));
                    }
                }
                acc(*x, dx);
            }
            Op::ChannelWeightedSum { x, w } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (c, t) = (xv.dims()[0], xv.dims()[1]);
                let plane = xv.dims()[2] * xv.dims()[3];
                let (xd, wd) = (xv.data(), wv.data());
                let mut dx = vec![E::zero(); xd.len()];
                let mut dw = vec![E::zero(); wd.len()];
                for ch in 0..c {
                    for f in 0..t {
                        let gs = &g[f * plane..(f + 1) * plane];
                        let off = (ch * t + f) * plane;
                        let a = wd[f * c + ch];
                        let mut s = E::zero();
                        for p in 0..plane {
                            dx[off + p] = a * gs[p];
                            s = s + xd[off + p] * gs[p];
                        }
                        dw[f * c + ch] = s;
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::MinMax { x, bounds } => {
                let n = g.len();
                let Some((lo, hi, range)) = *bounds else {
                    acc(*x, vec![E::zero(); n]);
                    return;
                };
                let y = node.value.data();
                let mut dx: Vec<E> = g.iter().map(|&gi| gi / range).collect();
                let (mut dlo, mut dhi) = (E::zero(), E::zero());
                for (&gi, &yi) in g.iter().zip(y) {
                    dlo = dlo + gi * (yi - E::one());
                    dhi = dhi - gi * yi;
                }
                dx[lo] = dx[lo] + dlo / range;
                dx[hi] = dx[hi] + dhi / range;
                acc(*x, dx);
            }
            Op::ChannelScale { x, h } => {
                let (xv, hv) = (self.val(*x).data(), self.val(*h).data());
                let inner = hv.len();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dh = vec![E::zero(); inner];
                for (gs, xs) in g.chunks(inner).zip(xv.chunks(inner)) {
                    for q in 0..inner {
                        dx.push(gs[q] * hv[q]);
                        dh[q] = dh[q] + gs[q] * xs[q];
                    }
                }
                acc(*x, dx);
                acc(*h, dh);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.val(x).len();
                    acc(x, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::GatherColumns { x, index } => {
                let xv = self.val(*x);
                let c = xv.dims()[0];
                let m = xv.len() / c;
                let n = index.len();
                let mut dx = vec![E::zero(); xv.len()];
                for ch in 0..c {
                    for (j, &pos) in index.iter().enumerate() {
                        dx[ch * m + pos] = dx[ch * m + pos] + g[ch * n + j];
                    }
                }
                acc(*x, dx);
            }
            Op::Narrow { x, start } => {
                let xv = self.val(*x);
                let inner = xv.len() / xv.dims()[0];
                let mut dx = vec![E::zero(); xv.len()];
                dx[start * inner..start * inner + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::MaxOverColumns { x, argmax } => {
                let xv = self.val(*x);
                let n = xv.dims()[1];
                let mut dx = vec![E::zero(); xv.len()];
                for (ch, &j) in argmax.iter().enumerate() {
                    dx[ch * n + j] = g[ch];
                }
                acc(*x, dx);
            }
            Op::TemporalShift { x, fold } => {
                let gt = Tensor::from_parts(node.value.dims().to_vec(), g.to_vec());
                acc(*x, shift_frames(&gt, *fold, true).into_data());
            }
            Op::AvgPool { x, kh, kw } => {
                let xv = self.val(*x);
                let d = xv.dims();
                let (h, w) = if d.len() == 2 {
                    (1, d[1])
                } else {
                    (d[d.len() - 2], d[d.len() - 1])
                };
                let (oh, ow) = (h / kh, w / kw);
                let planes = xv.len() / (h * w);
                let norm = E::lit((kh * kw) as f64);
                let mut dx = vec![E::zero(); xv.len()];
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(p * oh + oy) * ow + ox] / norm;
                            for dy in 0..*kh {
                                for dxx in 0..*kw {
                                    dx[p * h * w + (oy * kh + dy) * w + ox * kw + dxx] = gv;
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Energy(h) => {
                let hv = self.val(*h).data();
                let n = E::lit(hv.len() as f64);
                let (four, eight) = (E::lit(4.0), E::lit(8.0));
                acc(*h, hv.iter().map(|&v| g[0] * (four - eight * v) / n).collect());
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut d: Vec<E> = probs.iter().map(|&p| p * g[0]).collect();
                d[*label] = d[*label] - g[0];
                acc(*logits, d);
            }
        }
    }
}

fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Shifts the first `fold` channels forward in time and the next `fold`
/// backward; `inverse` applies the adjoint permutation.
pub(crate) fn shift_frames<E: Element>(x: &Tensor<E>, fold: usize, inverse: bool) -> Tensor<E> {
    let d = x.dims();
    let (c, t) = (d[0], d[1]);
    let inner: usize = d[2..].iter().product();
    let src = x.data();
    let mut out = vec![E::zero(); src.len()];
    let fold = fold.min(c / 2);
    for ch in 0..c {
        // +1 means frame f reads from frame f-1.
        let dir: isize = if ch < fold {
            1
        } else if ch < 2 * fold {
            -1
        } else {
            0
        };
        let dir = if inverse { -dir } else { dir };
        for f in 0..t {
            let from = f as isize - dir;
            if from < 0 || from >= t as isize {
                continue;
            }
            let s = (ch * t + from as usize) * inner;
            let o = (ch * t + f) * inner;
            out[o..o + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    Tensor::from_parts(d.to_vec(), out)
}

/// Result of [`Graph::backward`]: gradients for every node reached from
/// the output.
pub struct Gradients<E: Element = f32> {
    by_node: Vec<Option<Tensor<E>>>,
    params: Vec<(String, NodeId)>,
}

impl<E: Element> Gradients<E> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.by_node.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.node(*id))
    }

    /// Gradients of every parameter reachable from the output.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.params
            .iter()
            .filter_map(|(n, id)| self.node(*id).map(|g| (n.as_str(), g)))
    }

    pub fn into_store(self) -> ParamStore<E> {
        let mut store = ParamStore::new();
        let Gradients { mut by_node, params } = self;
        for (name, id) in params {
            if let Some(g) = by_node[id.0].take() {
                store.insert(name, g);
            }
        }
        store
    }
}
