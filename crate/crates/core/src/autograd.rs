//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Graph`] records every op applied during one forward evaluation. Values
//! are computed eagerly; `backward` walks the tape in reverse and returns the
//! gradient of a scalar output with respect to every node that requires one.
//! The op set is exactly what the denoisers in this crate need: padded
//! convolutions, dense layers, group norm, SiLU, scale/shift modulation,
//! channel concat, pooling/upsampling, multi-head self-attention, embedding
//! lookup and squared-error reductions.

use crate::params::ParamStore;
use crate::tensor::{gemm, Float, Layout, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Modulate {
        h: Var,
        ss: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    AvgPool {
        x: Var,
        f: usize,
    },
    Upsample {
        x: Var,
        f: usize,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SquaredError {
        pred: Var,
        target: Tensor<T>,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// `(param index, gradient)` for every parameter touched by the forward.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.params
            .iter()
            .filter_map(|&(p, v)| self.grads[v.0].as_deref().map(|g| (p, g)))
    }
}

fn shape4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected NCHW tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// `[B, C, rest...]` -> (B, C, prod(rest)).
fn shape_bcs(s: &[usize]) -> (usize, usize, usize) {
    assert!(s.len() >= 2, "expected [B, C, ...], got {s:?}");
    (s[0], s[1], s[2..].iter().product())
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn add_into<T: Float>(acc: &mut Option<Vec<T>>, g: &[T]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

fn add_owned<T: Float>(acc: &mut Option<Vec<T>>, g: Vec<T>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x += y),
        None => *acc = Some(g),
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            param_vars: Vec::new(),
        }
    }

    /// A graph that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { strip(op) };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind parameter `idx` of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, idx: usize) -> Var {
        if idx >= self.param_vars.len() {
            self.param_vars.resize(idx + 1, None);
        }
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(idx).clone(),
            op: Op::Param,
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[idx] = Some(v);
        v
    }

    /// Same-padded stride-1 convolution. `w` is `[Cout, Cin, k, k]`, `k` odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (bsz, cin, h, wd) = shape4(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv input channels");
        assert_eq!(ws[3], k);
        assert_eq!(k % 2, 1, "odd kernels only");
        let hw = h * wd;
        let kk = cin * k * k;
        let n = bsz * hw;
        let cols = im2col(self.value(x).data(), bsz, cin, h, wd, k);
        let mut tmp = vec![T::zero(); cout * n];
        gemm(
            cout,
            kk,
            n,
            self.value(w).data(),
            Layout::N,
            &cols,
            Layout::N,
            &mut tmp,
            false,
        );
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); bsz * cout * hw];
        for bi in 0..bsz {
            for co in 0..cout {
                let src = &tmp[co * n + bi * hw..co * n + (bi + 1) * hw];
                let dst = &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                let bv = bias[co];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let value = Tensor::new(&[bsz, cout, h, wd], out).expect("conv shape");
        self.push(value, Op::Conv2d { x, w, b, k, cols }, &[x, w, b])
    }

    /// `y = x Wᵀ + b` with `x: [B, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x);
        assert_eq!(xs.len(), 2);
        let (bsz, fin) = (xs[0], xs[1]);
        let ws = self.shape(w);
        assert_eq!(ws[1], fin, "linear input width");
        let fout = ws[0];
        let mut out = vec![T::zero(); bsz * fout];
        gemm(
            bsz,
            fin,
            fout,
            self.value(x).data(),
            Layout::N,
            self.value(w).data(),
            Layout::T,
            &mut out,
            false,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
        }
        let value = Tensor::new(&[bsz, fout], out).expect("linear shape");
        self.push(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (bsz, c, s) = shape_bcs(&shape);
        assert!(groups > 0 && c % groups == 0, "groups must divide channels");
        let cg = c / groups;
        let n = cg * s;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); bsz * groups];
        let mut out = vec![T::zero(); xd.len()];
        let nf = T::from_usize(n).unwrap();
        let eps = T::from_f64_lossy(NORM_EPS);
        for bi in 0..bsz {
            for gi in 0..groups {
                let start = (bi * c + gi * cg) * s;
                let seg = &xd[start..start + n];
                let mean = seg.iter().copied().sum::<T>() / nf;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[bi * groups + gi] = r;
                for j in 0..n {
                    let xh = (seg[j] - mean) * r;
                    xhat[start + j] = xh;
                    let ch = gi * cg + j / s;
                    out[start + j] = xh * g[ch] + be[ch];
                }
            }
        }
        let value = Tensor::new(&shape, out).expect("norm shape");
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), |p, q| p + q)
            .expect("add shapes");
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    /// `h * (1 + scale) + shift`, with `ss = [scale | shift]` of shape `[B, 2C]`.
    pub fn modulate(&mut self, h: Var, ss: Var) -> Var {
        let shape = self.shape(h).to_vec();
        let (bsz, c, s) = shape_bcs(&shape);
        assert_eq!(self.shape(ss), &[bsz, 2 * c], "modulation width");
        let hd = self.value(h).data();
        let sd = self.value(ss).data();
        let mut out = vec![T::zero(); hd.len()];
        for bi in 0..bsz {
            for ci in 0..c {
                let sc = T::one() + sd[bi * 2 * c + ci];
                let sh = sd[bi * 2 * c + c + ci];
                let o = (bi * c + ci) * s;
                for j in o..o + s {
                    out[j] = hd[j] * sc + sh;
                }
            }
        }
        let value = Tensor::new(&shape, out).expect("modulate shape");
        self.push(value, Op::Modulate { h, ss }, &[h, ss])
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (bsz, ca, s) = shape_bcs(&sa);
        let (bb, cb, s2) = shape_bcs(&sb);
        assert!(bsz == bb && s == s2 && sa[2..] == sb[2..], "concat shapes");
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for bi in 0..bsz {
            out.extend_from_slice(&ad[bi * ca * s..(bi + 1) * ca * s]);
            out.extend_from_slice(&bd[bi * cb * s..(bi + 1) * cb * s]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        let value = Tensor::new(&shape, out).expect("concat shape");
        self.push(value, Op::Concat { a, b }, &[a, b])
    }

    pub fn avg_pool(&mut self, x: Var, f: usize) -> Var {
        let value = avg_pool(self.value(x), f);
        self.push(value, Op::AvgPool { x, f }, &[x])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, f: usize) -> Var {
        let (bsz, c, h, w) = shape4(self.shape(x));
        let xd = self.value(x).data();
        let (ho, wo) = (h * f, w * f);
        let mut out = vec![T::zero(); bsz * c * ho * wo];
        for p in 0..bsz * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[p * ho * wo + y * wo + xx] = xd[p * h * w + (y / f) * w + xx / f];
                }
            }
        }
        let value = Tensor::new(&[bsz, c, ho, wo], out).expect("upsample shape");
        self.push(value, Op::Upsample { x, f }, &[x])
    }

    /// Multi-head softmax attention. `qkv` is `[B, 3C, ...spatial]` holding
    /// queries, keys and values stacked along channels; output is `[B, C, ...]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let shape = self.shape(qkv).to_vec();
        let (bsz, c3, l) = shape_bcs(&shape);
        assert_eq!(c3 % 3, 0);
        let c = c3 / 3;
        assert!(heads > 0 && c % heads == 0, "heads must divide channels");
        let d = c / heads;
        let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
        let qd = self.value(qkv).data();
        let mut probs = vec![T::zero(); bsz * heads * l * l];
        let mut out = vec![T::zero(); bsz * c * l];
        for bi in 0..bsz {
            for hd in 0..heads {
                let q = &qd[(bi * c3 + hd * d) * l..(bi * c3 + hd * d + d) * l];
                let k = &qd[(bi * c3 + c + hd * d) * l..(bi * c3 + c + hd * d + d) * l];
                let v = &qd[(bi * c3 + 2 * c + hd * d) * l..(bi * c3 + 2 * c + hd * d + d) * l];
                let p = &mut probs[(bi * heads + hd) * l * l..(bi * heads + hd + 1) * l * l];
                gemm(l, d, l, q, Layout::T, k, Layout::N, p, false);
                for row in p.chunks_mut(l) {
                    let mut mx = T::neg_infinity();
                    for r in row.iter_mut() {
                        *r *= scale;
                        mx = mx.max(*r);
                    }
                    let mut sum = T::zero();
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        sum += *r;
                    }
                    for r in row.iter_mut() {
                        *r = *r / sum;
                    }
                }
                let o = &mut out[(bi * c + hd * d) * l..(bi * c + hd * d + d) * l];
                gemm(d, l, l, v, Layout::N, p, Layout::T, o, false);
            }
        }
        let mut oshape = shape;
        oshape[1] = c;
        let value = Tensor::new(&oshape, out).expect("attention shape");
        self.push(value, Op::Attention { qkv, heads, probs }, &[qkv])
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let ts = self.shape(table);
        assert_eq!(ts.len(), 2);
        let (rows, e) = (ts[0], ts[1]);
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            assert!(i < rows, "embedding id {i} out of range {rows}");
            out.extend_from_slice(&td[i * e..(i + 1) * e]);
        }
        let value = Tensor::new(&[ids.len(), e], out).expect("embedding shape");
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// `scale * Σ (pred - target)²` as a one-element tensor.
    pub fn squared_error(&mut self, pred: Var, target: &Tensor<T>, scale: T) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "squared_error shapes");
        let s: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(s * scale);
        self.push(
            value,
            Op::SquaredError {
                pred,
                target: target.clone(),
                scale,
            },
            &[pred],
        )
    }

    /// Gradients of the scalar `out` with respect to every node requiring one.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(p, v)| v.map(|v| (p, v)))
            .collect();
        Gradients { grads, params }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, k, cols } => {
                let (bsz, cin, h, wd) = shape4(self.shape(*x));
                let cout = self.shape(*w)[0];
                let hw = h * wd;
                let n = bsz * hw;
                let kk = cin * k * k;
                let mut tmp = vec![T::zero(); cout * n];
                for bi in 0..bsz {
                    for co in 0..cout {
                        tmp[co * n + bi * hw..co * n + (bi + 1) * hw]
                            .copy_from_slice(&g[(bi * cout + co) * hw..(bi * cout + co + 1) * hw]);
                    }
                }
                if self.needs(*b) {
                    let db: Vec<T> = (0..cout)
                        .map(|co| tmp[co * n..(co + 1) * n].iter().copied().sum())
                        .collect();
                    add_owned(&mut grads[b.0], db);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); cout * kk];
                    gemm(cout, n, kk, &tmp, Layout::N, cols, Layout::T, &mut dw, false);
                    add_owned(&mut grads[w.0], dw);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); kk * n];
                    gemm(
                        kk,
                        cout,
                        n,
                        self.value(*w).data(),
                        Layout::T,
                        &tmp,
                        Layout::N,
                        &mut dcols,
                        false,
                    );
                    let dx = col2im(&dcols, bsz, cin, h, wd, *k);
                    add_owned(&mut grads[x.0], dx);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (bsz, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[0];
                if self.needs(*b) {
                    let mut db = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    add_owned(&mut grads[b.0], db);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(
                        fout,
                        bsz,
                        fin,
                        g,
                        Layout::T,
                        self.value(*x).data(),
                        Layout::N,
                        &mut dw,
                        false,
                    );
                    add_owned(&mut grads[w.0], dw);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); bsz * fin];
                    gemm(
                        bsz,
                        fout,
                        fin,
                        g,
                        Layout::N,
                        self.value(*w).data(),
                        Layout::N,
                        &mut dx,
                        false,
                    );
                    add_owned(&mut grads[x.0], dx);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (bsz, c, s) = shape_bcs(self.shape(*x));
                let cg = c / groups;
                let n = cg * s;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                let nf = T::from_usize(n).unwrap();
                for bi in 0..bsz {
                    for gi in 0..*groups {
                        let start = (bi * c + gi * cg) * s;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..n {
                            let ch = gi * cg + j / s;
                            let gv = g[start + j];
                            let xh = xhat[start + j];
                            dgamma[ch] += gv * xh;
                            dbeta[ch] += gv;
                            let dxh = gv * gm[ch];
                            sum_d += dxh;
                            sum_dx += dxh * xh;
                        }
                        let r = rstd[bi * groups + gi];
                        for j in 0..n {
                            let ch = gi * cg + j / s;
                            let dxh = g[start + j] * gm[ch];
                            dx[start + j] = r / nf * (nf * dxh - sum_d - xhat[start + j] * sum_dx);
                        }
                    }
                }
                if self.needs(*x) {
                    add_owned(&mut grads[x.0], dx);
                }
                if self.needs(*gamma) {
                    add_owned(&mut grads[gamma.0], dgamma);
                }
                if self.needs(*beta) {
                    add_owned(&mut grads[beta.0], dbeta);
                }
            }
            Op::Silu { x } => {
                let xd = self.value(*x).data();
                let dx = xd
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                add_owned(&mut grads[x.0], dx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Modulate { h, ss } => {
                let (bsz, c, s) = shape_bcs(self.shape(*h));
                let hd = self.value(*h).data();
                let sd = self.value(*ss).data();
                let mut dh = vec![T::zero(); hd.len()];
                let mut dss = vec![T::zero(); bsz * 2 * c];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let sc = T::one() + sd[bi * 2 * c + ci];
                        let o = (bi * c + ci) * s;
                        let mut dscale = T::zero();
                        let mut dshift = T::zero();
                        for j in o..o + s {
                            dh[j] = g[j] * sc;
                            dscale += g[j] * hd[j];
                            dshift += g[j];
                        }
                        dss[bi * 2 * c + ci] = dscale;
                        dss[bi * 2 * c + c + ci] = dshift;
                    }
                }
                if self.needs(*h) {
                    add_owned(&mut grads[h.0], dh);
                }
                if self.needs(*ss) {
                    add_owned(&mut grads[ss.0], dss);
                }
            }
            Op::Concat { a, b } => {
                let (bsz, ca, s) = shape_bcs(self.shape(*a));
                let cb = self.shape(*b)[1];
                let ct = ca + cb;
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(bsz * ca * s);
                    for bi in 0..bsz {
                        da.extend_from_slice(&g[bi * ct * s..(bi * ct + ca) * s]);
                    }
                    add_owned(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(bsz * cb * s);
                    for bi in 0..bsz {
                        db.extend_from_slice(&g[(bi * ct + ca) * s..(bi + 1) * ct * s]);
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::AvgPool { x, f } => {
                let (bsz, c, h, w) = shape4(self.shape(*x));
                let (ho, wo) = (h / f, w / f);
                let inv = T::one() / T::from_usize(f * f).unwrap();
                let mut dx = vec![T::zero(); bsz * c * h * w];
                for p in 0..bsz * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[p * h * w + y * w + xx] =
                                g[p * ho * wo + (y / f) * wo + xx / f] * inv;
                        }
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::Upsample { x, f } => {
                let (bsz, c, h, w) = shape4(self.shape(*x));
                let (ho, wo) = (h * f, w * f);
                let mut dx = vec![T::zero(); bsz * c * h * w];
                for p in 0..bsz * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            dx[p * h * w + (y / f) * w + xx / f] += g[p * ho * wo + y * wo + xx];
                        }
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::Attention { qkv, heads, probs } => {
                let (bsz, c3, l) = shape_bcs(self.shape(*qkv));
                let c = c3 / 3;
                let d = c / heads;
                let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
                let qd = self.value(*qkv).data();
                let mut dqkv = vec![T::zero(); qd.len()];
                let mut dp = vec![T::zero(); l * l];
                for bi in 0..bsz {
                    for hd in 0..*heads {
                        let qo = (bi * c3 + hd * d) * l;
                        let ko = (bi * c3 + c + hd * d) * l;
                        let vo = (bi * c3 + 2 * c + hd * d) * l;
                        let p = &probs[(bi * heads + hd) * l * l..(bi * heads + hd + 1) * l * l];
                        let go = &g[(bi * c + hd * d) * l..(bi * c + hd * d + d) * l];
                        // dV = dO · P
                        gemm(d, l, l, go, Layout::N, p, Layout::N, &mut dqkv[vo..vo + d * l], false);
                        // dP = dOᵀ · V
                        gemm(l, d, l, go, Layout::T, &qd[vo..vo + d * l], Layout::N, &mut dp, false);
                        for (prow, drow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        // dQ = K · dSᵀ, dK = Q · dS (scale folded into dS)
                        let (head, tail) = dqkv.split_at_mut(ko);
                        gemm(
                            d,
                            l,
                            l,
                            &qd[ko..ko + d * l],
                            Layout::N,
                            &dp,
                            Layout::T,
                            &mut head[qo..qo + d * l],
                            false,
                        );
                        gemm(
                            d,
                            l,
                            l,
                            &qd[qo..qo + d * l],
                            Layout::N,
                            &dp,
                            Layout::N,
                            &mut tail[..d * l],
                            false,
                        );
                    }
                }
                add_owned(&mut grads[qkv.0], dqkv);
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table);
                let e = ts[1];
                let mut dt = vec![T::zero(); ts[0] * e];
                for (row, &i) in ids.iter().enumerate() {
                    dt[i * e..(i + 1) * e]
                        .iter_mut()
                        .zip(&g[row * e..(row + 1) * e])
                        .for_each(|(d, &v)| *d += v);
                }
                add_owned(&mut grads[table.0], dt);
            }
            Op::SquaredError {
                pred,
                target,
                scale,
            } => {
                let two = T::one() + T::one();
                let k = g[0] * two * *scale;
                let dp = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| k * (a - b))
                    .collect();
                add_owned(&mut grads[pred.0], dp);
            }
        }
    }
}

/// Drop cached buffers for nodes that will never be differentiated.
fn strip<T>(op: Op<T>) -> Op<T> {
    match op {
        Op::Conv2d { x, w, b, k, .. } => Op::Conv2d {
            x,
            w,
            b,
            k,
            cols: Vec::new(),
        },
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            ..
        } => Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat: Vec::new(),
            rstd: Vec::new(),
        },
        Op::Attention { qkv, heads, .. } => Op::Attention {
            qkv,
            heads,
            probs: Vec::new(),
        },
        other => other,
    }
}

/// `[B, C, H, W]` -> columns `[C·k·k, B·H·W]` for a same-padded kernel.
fn im2col<T: Float>(x: &[T], bsz: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let n = bsz * hw;
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for bi in 0..bsz {
                    let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let d = &mut dst[bi * hw..(bi + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut d[y * w..(y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        for xx in x0..x1 {
                            drow[xx] = srow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], bsz: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let n = bsz * hw;
    let pad = (k / 2) as isize;
    let mut x = vec![T::zero(); bsz * c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for bi in 0..bsz {
                    let s = &src[bi * hw..(bi + 1) * hw];
                    let d = &mut x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        for xx in x0..x1 {
                            d[sy as usize * w + (xx as isize + dx) as usize] += s[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Block-mean pooling of an NCHW tensor.
pub(crate) fn avg_pool<T: Float>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (bsz, c, h, w) = shape4(x.shape());
    assert!(f > 0 && h % f == 0 && w % f == 0, "pool factor must divide");
    let (ho, wo) = (h / f, w / f);
    let xd = x.data();
    let inv = T::one() / T::from_usize(f * f).unwrap();
    let mut out = vec![T::zero(); bsz * c * ho * wo];
    for p in 0..bsz * c {
        for y in 0..h {
            for xx in 0..w {
                out[p * ho * wo + (y / f) * wo + xx / f] += xd[p * h * w + y * w + xx];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[bsz, c, ho, wo], out).expect("pool shape")
}
