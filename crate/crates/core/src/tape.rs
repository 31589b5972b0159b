//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A `Tape` records every operation of a forward pass; `backward` walks the
//! record in reverse and accumulates gradients. The op set is exactly what
//! the denoiser, conditioning pathways, and downstream segmenter need, in
//! f64 so analytic gradients can be checked against central differences.

use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type GradFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    value: Rc<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, vec![], None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, grad_fn: Option<GradFn>) -> Var {
        self.nodes.push(Node { parents, grad_fn, value: Rc::new(value) });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Accumulate gradients of a scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(f) = &self.nodes[id].grad_fn {
                let parent_grads = f(&g);
                debug_assert_eq!(parent_grads.len(), self.nodes[id].parents.len());
                for (pid, pg) in self.nodes[id].parents.iter().zip(parent_grads) {
                    match &mut grads[*pid] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let out = Tensor::new(ta.shape(), ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect());
        self.push(out, vec![a.0, b.0], Some(Box::new(move |g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let out = Tensor::new(ta.shape(), ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect());
        self.push(out, vec![a.0, b.0], Some(Box::new(move |g| vec![g.clone(), g.map(|x| -x)])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let out = Tensor::new(ta.shape(), ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect());
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let ga = Tensor::new(g.shape(), g.data().iter().zip(cb.data()).map(|(x, y)| x * y).collect());
                let gb = Tensor::new(g.shape(), g.data().iter().zip(ca.data()).map(|(x, y)| x * y).collect());
                vec![ga, gb]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.rc(a);
        let out = ta.map(|x| c * x);
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![g.map(|x| c * x)])))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.rc(a);
        let out = ta.map(|x| x + c);
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![g.clone()])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let out = ta.map(|x| x.max(0.0));
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape(),
                    g.data().iter().zip(ta.data()).map(|(gx, &x)| if x > 0.0 { *gx } else { 0.0 }).collect(),
                )]
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let out = ta.map(|x| x * sigmoid(x));
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(gx, &x)| {
                            let s = sigmoid(x);
                            gx * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                )]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let out = ta.map(sigmoid);
        let co = Rc::new(out.clone());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape(),
                    g.data().iter().zip(co.data()).map(|(gx, &y)| gx * y * (1.0 - y)).collect(),
                )]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let out = Tensor::scalar(ta.data().iter().sum());
        let shape = ta.shape().to_vec();
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![Tensor::full(&shape, g.item())])))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Entrywise absolute sum (L1 norm).
    pub fn abs_sum(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let out = Tensor::scalar(ta.data().iter().map(|x| x.abs()).sum());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let gs = g.item();
                vec![Tensor::new(ta.shape(), ta.data().iter().map(|&x| gs * sign(x)).collect())]
            })),
        )
    }

    /// Dot product with a constant weight tensor; returns a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor) -> Var {
        let ta = self.rc(a);
        assert_eq!(ta.shape(), weights.shape(), "weighted_sum shape mismatch");
        let out = Tensor::scalar(ta.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum());
        let w = weights.clone();
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![w.map(|x| x * g.item())])))
    }

    // ---- linear algebra ----

    /// `a` is `[m,k]`, `b` is `[k,n]`; returns `[m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = matmul_raw(&ta, &tb);
        let (ca, cb) = (Rc::clone(&ta), Rc::clone(&tb));
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                // dA = G * B^T, dB = A^T * G
                let mut da = Tensor::zeros(&[m, k]);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        for l in 0..k {
                            da.data_mut()[i * k + l] += gij * cb.data()[l * n + j];
                        }
                    }
                }
                let mut db = Tensor::zeros(&[k, n]);
                for i in 0..m {
                    for l in 0..k {
                        let ail = ca.data()[i * k + l];
                        for j in 0..n {
                            db.data_mut()[l * n + j] += ail * g.data()[i * n + j];
                        }
                    }
                }
                vec![da, db]
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let out = transpose_raw(&ta);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..n {
                        ga.data_mut()[i * n + j] = g.data()[j * m + i];
                    }
                }
                vec![ga]
            })),
        )
    }

    /// Row-wise softmax of a `[m,n]` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                out.data_mut()[i * n + j] = exps[j] / z;
            }
        }
        let co = Rc::new(out.clone());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let y = &co.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga.data_mut()[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![ga]
            })),
        )
    }

    /// `[m,n]` plus a `[n]` bias broadcast over rows.
    pub fn add_bias_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        assert_eq!(tb.len(), n, "bias length mismatch");
        let mut out = ta.as_ref().clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] += tb.data()[j];
            }
        }
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let mut gb = Tensor::zeros(&[n]);
                for i in 0..m {
                    for j in 0..n {
                        gb.data_mut()[j] += g.data()[i * n + j];
                    }
                }
                vec![g.clone(), gb]
            })),
        )
    }

    /// `[C,H,W]` plus a `[C]` bias broadcast over the spatial grid.
    pub fn add_bias_chan(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        let (c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        assert_eq!(tb.len(), c, "channel bias mismatch");
        let hw = h * w;
        let mut out = ta.as_ref().clone();
        for ch in 0..c {
            for p in 0..hw {
                out.data_mut()[ch * hw + p] += tb.data()[ch];
            }
        }
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let mut gb = Tensor::zeros(&[c]);
                for ch in 0..c {
                    for p in 0..hw {
                        gb.data_mut()[ch] += g.data()[ch * hw + p];
                    }
                }
                vec![g.clone(), gb]
            })),
        )
    }

    /// `[C,H,W]` times a `[C]` factor broadcast over the spatial grid.
    pub fn mul_bias_chan(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        let (c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        assert_eq!(tb.len(), c, "channel factor mismatch");
        let hw = h * w;
        let mut out = ta.as_ref().clone();
        for ch in 0..c {
            for p in 0..hw {
                out.data_mut()[ch * hw + p] *= tb.data()[ch];
            }
        }
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(&[c]);
                for ch in 0..c {
                    for p in 0..hw {
                        let idx = ch * hw + p;
                        gb.data_mut()[ch] += g.data()[idx] * ta.data()[idx];
                        ga.data_mut()[idx] = g.data()[idx] * tb.data()[ch];
                    }
                }
                vec![ga, gb]
            })),
        )
    }

    // ---- convolutional ----

    /// 3x3 convolution, stride 1, zero padding 1. `x` is `[Cin,H,W]`,
    /// `w` is `[Cout,Cin,3,3]`; returns `[Cout,H,W]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.rc(x), self.rc(w));
        let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let cout = tw.shape()[0];
        assert_eq!(tw.shape(), &[cout, cin, 3, 3], "conv weight shape");
        let out = conv3x3_raw(&tx, &tw, cout, cin, h, wd);
        let (cx, cw) = (Rc::clone(&tx), Rc::clone(&tw));
        self.push(
            out,
            vec![x.0, w.0],
            Some(Box::new(move |g| {
                let hw = h * wd;
                let mut gx = Tensor::zeros(&[cin, h, wd]);
                let mut gw = Tensor::zeros(&[cout, cin, 3, 3]);
                for co in 0..cout {
                    for ci in 0..cin {
                        let wbase = (co * cin + ci) * 9;
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let wv = cw.data()[wbase + dy * 3 + dx];
                                let mut gwacc = 0.0;
                                for y in 0..h {
                                    let sy = y as isize + dy as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    let sy = sy as usize;
                                    for xph in 0..wd {
                                        let sx = xph as isize + dx as isize - 1;
                                        if sx < 0 || sx >= wd as isize {
                                            continue;
                                        }
                                        let sx = sx as usize;
                                        let go = g.data()[co * hw + y * wd + xph];
                                        gwacc += go * cx.data()[ci * hw + sy * wd + sx];
                                        gx.data_mut()[ci * hw + sy * wd + sx] += go * wv;
                                    }
                                }
                                gw.data_mut()[wbase + dy * 3 + dx] = gwacc;
                            }
                        }
                    }
                }
                vec![gx, gw]
            })),
        )
    }

    /// 2x2 average pooling of `[C,H,W]` with even H, W.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let (c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += ta.data()[ch * h * w + (2 * y + dy) * w + 2 * x + dx];
                        }
                    }
                    out.data_mut()[ch * oh * ow + y * ow + x] = s / 4.0;
                }
            }
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = g.data()[ch * oh * ow + y * ow + x] / 4.0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    ga.data_mut()[ch * h * w + (2 * y + dy) * w + 2 * x + dx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![ga]
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling of `[C,H,W]`.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let (c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out.data_mut()[ch * oh * ow + y * ow + x] = ta.data()[ch * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            ga.data_mut()[ch * h * w + (y / 2) * w + x / 2] += g.data()[ch * oh * ow + y * ow + x];
                        }
                    }
                }
                vec![ga]
            })),
        )
    }

    /// Per-channel spatial mean of `[C,H,W]`; returns `[1,C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let (c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let hw = (h * w) as f64;
        let mut out = Tensor::zeros(&[1, c]);
        for ch in 0..c {
            out.data_mut()[ch] = ta.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw;
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    let gv = g.data()[ch] / hw;
                    for p in 0..h * w {
                        ga.data_mut()[ch * h * w + p] = gv;
                    }
                }
                vec![ga]
            })),
        )
    }

    // ---- layout ----

    /// Free reshape (row-major data unchanged).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let ta = self.rc(a);
        assert_eq!(shape.iter().product::<usize>(), ta.len(), "reshape size mismatch");
        let old = ta.shape().to_vec();
        let out = ta.reshaped(shape);
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![g.reshaped(&old)])))
    }

    /// `[C,H,W]` to `[H*W, C]` (one row per spatial position).
    pub fn chw_to_nc(&mut self, a: Var) -> Var {
        let ta = self.rc(a);
        let (c, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let flat = self.reshape(a, &[c, h * w]);
        self.transpose(flat)
    }

    /// `[H*W, C]` back to `[C,H,W]`.
    pub fn nc_to_chw(&mut self, a: Var, h: usize, w: usize) -> Var {
        let c = self.value(a).shape()[1];
        let t = self.transpose(a);
        self.reshape(t, &[c, h, w])
    }

    /// Concatenate along the channel axis of `[C,H,W]` tensors.
    pub fn concat_chan(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.rc(a), self.rc(b));
        let (ca, h, w) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let cb = tb.shape()[0];
        assert_eq!(&tb.shape()[1..], &[h, w], "concat_chan spatial mismatch");
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::new(&[ca + cb, h, w], data);
        let na = ta.len();
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let ga = Tensor::new(&[ca, h, w], g.data()[..na].to_vec());
                let gb = Tensor::new(&[cb, h, w], g.data()[na..].to_vec());
                vec![ga, gb]
            })),
        )
    }

    /// Stack 2-D blocks `[r_i, n]` on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        let mut sizes = Vec::new();
        for &p in parts {
            let tp = self.rc(p);
            assert_eq!(tp.shape()[1], n, "concat_rows width mismatch");
            rows += tp.shape()[0];
            sizes.push((tp.shape()[0], tp.len()));
            data.extend_from_slice(tp.data());
        }
        let out = Tensor::new(&[rows, n], data);
        let parents: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&(r, len)| {
                        let part = Tensor::new(&[r, n], g.data()[offset..offset + len].to_vec());
                        offset += len;
                        part
                    })
                    .collect()
            })),
        )
    }

    /// Mean softmax cross-entropy of `[m,k]` logits against class labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Var {
        let tl = self.rc(logits);
        let (m, k) = (tl.shape()[0], tl.shape()[1]);
        assert_eq!(labels.len(), m, "one label per logit row");
        let mut total = 0.0;
        let mut probs = Tensor::zeros(&[m, k]);
        for i in 0..m {
            let row = &tl.data()[i * k..(i + 1) * k];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += z.ln() + mx - row[labels[i]];
            for j in 0..k {
                probs.data_mut()[i * k + j] = exps[j] / z;
            }
        }
        let labels = labels.to_vec();
        let out = Tensor::scalar(total / m as f64);
        self.push(
            out,
            vec![logits.0],
            Some(Box::new(move |g| {
                let gs = g.item() / m as f64;
                let mut gl = probs.clone();
                for i in 0..m {
                    gl.data_mut()[i * k + labels[i]] -= 1.0;
                }
                vec![gl.map(|x| x * gs)]
            })),
        )
    }

    /// Mean binary cross-entropy of logits against constant targets in [0,1].
    pub fn bce_logits(&mut self, logits: Var, targets: &Tensor) -> Var {
        let tl = self.rc(logits);
        assert_eq!(tl.shape(), targets.shape(), "bce shape mismatch");
        let n = tl.len() as f64;
        let mut total = 0.0;
        for (&x, &y) in tl.data().iter().zip(targets.data()) {
            total += x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).ln();
        }
        let t = targets.clone();
        let out = Tensor::scalar(total / n);
        self.push(
            out,
            vec![logits.0],
            Some(Box::new(move |g| {
                let gs = g.item() / n;
                vec![Tensor::new(
                    tl.shape(),
                    tl.data().iter().zip(t.data()).map(|(&x, &y)| gs * (sigmoid(x) - y)).collect(),
                )]
            })),
        )
    }

    /// Contiguous row slice `[start, start+len)` of a `[m,n]` matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.rc(a);
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        assert!(start + len <= m, "slice_rows out of range");
        let out = Tensor::new(&[len, n], ta.data()[start * n..(start + len) * n].to_vec());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut ga = Tensor::zeros(&[m, n]);
                ga.data_mut()[start * n..(start + len) * n].copy_from_slice(g.data());
                vec![ga]
            })),
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for l in 0..k {
            let ail = a.data()[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data_mut()[i * n + j] += ail * b.data()[l * n + j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = a.data()[i * n + j];
        }
    }
    out
}

fn conv3x3_raw(x: &Tensor, w: &Tensor, cout: usize, cin: usize, h: usize, wd: usize) -> Tensor {
    let hw = h * wd;
    let mut out = Tensor::zeros(&[cout, h, wd]);
    for co in 0..cout {
        for ci in 0..cin {
            let wbase = (co * cin + ci) * 9;
            for dy in 0..3usize {
                let sy0 = dy as isize - 1;
                for dx in 0..3usize {
                    let sx0 = dx as isize - 1;
                    let wv = w.data()[wbase + dy * 3 + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + sy0;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let orow = co * hw + y * wd;
                        let irow = ci * hw + sy * wd;
                        for xp in 0..wd {
                            let sx = xp as isize + sx0;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            out.data_mut()[orow + xp] += wv * x.data()[irow + sx as usize];
                        }
                    }
                }
            }
        }
    }
    out
}
