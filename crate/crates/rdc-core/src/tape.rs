//! Define-by-run reverse-mode autodiff over [`Arr`] values.
//!
//! The tape is rebuilt per forward pass. Nodes are appended in creation
//! order, so the vector itself is a topological order and the backward
//! sweep is a single reverse pass that visits each node once.

use crate::arr::Arr;
use crate::entropy::factorized;
use crate::error::{RdcError, Result};
use crate::ops;

pub type Id = usize;

#[derive(Debug, Clone)]
#[allow(dead_code)] // some payload fields exist only for Debug output
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, f64),
    AddScalar(Id, f64),
    Conv2d {
        x: Id,
        w: Id,
        b: Id,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Id,
        w: Id,
        b: Id,
        stride: usize,
        pad: usize,
    },
    LeakyRelu(Id, f64),
    ConcatCh(Id, Id),
    SliceCh {
        x: Id,
        from: usize,
        to: usize,
    },
    Softplus(Id),
    Tanh(Id),
    Sigmoid(Id),
    Softmax2(Id),
    Mean(Id),
    Sum(Id),
    GaussianRate {
        y: Id,
        mu: Id,
        sigma: Id,
    },
    FactorizedBits {
        z: Id,
        params: [Id; 8],
    },
    BroadcastCh(Id, usize),
    StHard(Id),
    Reshape(Id),
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Id) -> &Arr {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: Id) -> &[usize] {
        &self.nodes[id].value.shape
    }

    /// Gradient of the last `backward` call w.r.t. node `id`, if tracked.
    pub fn grad(&self, id: Id) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> Id {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input: gradients are never tracked through it.
    pub fn constant(&mut self, value: Arr) -> Id {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: `backward` will populate its gradient.
    pub fn var(&mut self, value: Arr) -> Id {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Arr, requires_grad: bool) -> Id {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if !av.same_shape(bv) {
            return Err(shape_err("add", av, bv));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let v = Arr {
            shape: av.shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if !av.same_shape(bv) {
            return Err(shape_err("sub", av, bv));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let v = Arr {
            shape: av.shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if !av.same_shape(bv) {
            return Err(shape_err("mul", av, bv));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let v = Arr {
            shape: av.shape.clone(),
            data,
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Id, s: f64) -> Id {
        let v = self.nodes[a].value.map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Id, s: f64) -> Id {
        let v = self.nodes[a].value.map(|x| x + s);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a, s), ng)
    }

    pub fn conv2d(&mut self, x: Id, w: Id, b: Id, stride: usize, pad: usize) -> Result<Id> {
        let v = ops::conv2d(
            &self.nodes[x].value,
            &self.nodes[w].value,
            Some(&self.nodes[b].value),
            stride,
            pad,
        )?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn conv_t2d(
        &mut self,
        x: Id,
        w: Id,
        b: Id,
        stride: usize,
        pad: usize,
        outpad: usize,
    ) -> Result<Id> {
        let v = ops::conv_t2d(
            &self.nodes[x].value,
            &self.nodes[w].value,
            Some(&self.nodes[b].value),
            stride,
            pad,
            outpad,
        )?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(v, Op::ConvT2d { x, w, b, stride, pad }, ng))
    }

    pub fn leaky_relu(&mut self, x: Id, slope: f64) -> Id {
        let v = self.nodes[x].value.map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.needs(x);
        self.push(v, Op::LeakyRelu(x, slope), ng)
    }

    pub fn concat_ch(&mut self, a: Id, b: Id) -> Result<Id> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape.len() != 3 || bv.shape.len() != 3 || av.shape[1..] != bv.shape[1..] {
            return Err(shape_err("concat_ch", av, bv));
        }
        let shape = vec![av.shape[0] + bv.shape[0], av.shape[1], av.shape[2]];
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(&av.data);
        data.extend_from_slice(&bv.data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Arr { shape, data }, Op::ConcatCh(a, b), ng))
    }

    pub fn slice_ch(&mut self, x: Id, from: usize, to: usize) -> Result<Id> {
        let xv = &self.nodes[x].value;
        if xv.shape.len() != 3 || to > xv.shape[0] || from >= to {
            return Err(RdcError::InvalidArgument(format!(
                "slice_ch {from}..{to} on shape {:?}",
                xv.shape
            )));
        }
        let (h, w) = (xv.shape[1], xv.shape[2]);
        let data = xv.data[from * h * w..to * h * w].to_vec();
        let v = Arr {
            shape: vec![to - from, h, w],
            data,
        };
        let ng = self.needs(x);
        Ok(self.push(v, Op::SliceCh { x, from, to }, ng))
    }

    pub fn softplus(&mut self, x: Id) -> Id {
        let v = self.nodes[x].value.map(ops::softplus);
        let ng = self.needs(x);
        self.push(v, Op::Softplus(x), ng)
    }

    pub fn tanh(&mut self, x: Id) -> Id {
        let v = self.nodes[x].value.map(f64::tanh);
        let ng = self.needs(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Id) -> Id {
        let v = self.nodes[x].value.map(ops::sigmoid);
        let ng = self.needs(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    /// Softmax over the class axis of a [2,H,W] logit map.
    pub fn softmax2(&mut self, x: Id) -> Result<Id> {
        let xv = &self.nodes[x].value;
        if xv.shape.len() != 3 || xv.shape[0] != 2 {
            return Err(RdcError::InvalidArgument(format!(
                "softmax2 expects [2,H,W], got {:?}",
                xv.shape
            )));
        }
        let hw = xv.shape[1] * xv.shape[2];
        let mut data = vec![0.0; 2 * hw];
        for i in 0..hw {
            let (a, b) = (xv.data[i], xv.data[hw + i]);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let s = ea + eb;
            data[i] = ea / s;
            data[hw + i] = eb / s;
        }
        let v = Arr {
            shape: xv.shape.clone(),
            data,
        };
        let ng = self.needs(x);
        Ok(self.push(v, Op::Softmax2(x), ng))
    }

    pub fn mean(&mut self, x: Id) -> Id {
        let xv = &self.nodes[x].value;
        let m = xv.data.iter().sum::<f64>() / xv.len() as f64;
        let ng = self.needs(x);
        self.push(Arr::scalar(m), Op::Mean(x), ng)
    }

    pub fn sum(&mut self, x: Id) -> Id {
        let s = self.nodes[x].value.data.iter().sum::<f64>();
        let ng = self.needs(x);
        self.push(Arr::scalar(s), Op::Sum(x), ng)
    }

    pub fn gaussian_rate(&mut self, y: Id, mu: Id, sigma: Id) -> Result<Id> {
        let v = ops::gaussian_rate_fwd(
            &self.nodes[y].value,
            &self.nodes[mu].value,
            &self.nodes[sigma].value,
        )?;
        let ng = self.needs(y) || self.needs(mu) || self.needs(sigma);
        Ok(self.push(v, Op::GaussianRate { y, mu, sigma }, ng))
    }

    /// Per-element bits of z under the factorized prior with the given
    /// parameter tensors (see `entropy::factorized` for the layout).
    pub fn factorized_bits(&mut self, z: Id, params: [Id; 8]) -> Result<Id> {
        let pvals: Vec<&Arr> = params.iter().map(|&p| &self.nodes[p].value).collect();
        let v = factorized::bits_fwd(&self.nodes[z].value, &pvals)?;
        let ng = self.needs(z) || params.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::FactorizedBits { z, params }, ng))
    }

    /// Broadcast an [H,W] (or [1,H,W]) map across `c` channels.
    pub fn broadcast_ch(&mut self, m: Id, c: usize) -> Result<Id> {
        let mv = &self.nodes[m].value;
        let (h, w) = plane_dims(mv)?;
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            data.extend_from_slice(&mv.data);
        }
        let v = Arr {
            shape: vec![c, h, w],
            data,
        };
        let ng = self.needs(m);
        Ok(self.push(v, Op::BroadcastCh(m, c), ng))
    }

    /// Straight-through binarization at 0.5: hard forward, identity backward.
    pub fn st_hard(&mut self, x: Id) -> Id {
        let v = self.nodes[x].value.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let ng = self.needs(x);
        self.push(v, Op::StHard(x), ng)
    }

    pub fn reshape(&mut self, x: Id, shape: &[usize]) -> Result<Id> {
        let xv = &self.nodes[x].value;
        if shape.iter().product::<usize>() != xv.len() {
            return Err(RdcError::InvalidArgument(format!(
                "reshape {:?} -> {:?}",
                xv.shape, shape
            )));
        }
        let v = Arr {
            shape: shape.to_vec(),
            data: xv.data.clone(),
        };
        let ng = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Reverse sweep from a scalar loss. Gradients of tracked nodes become
    /// readable through [`Tape::grad`]; previous gradients are discarded.
    pub fn backward(&mut self, loss: Id) -> Result<()> {
        let node = &self.nodes[loss];
        if node.value.len() != 1 {
            return Err(RdcError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.shape
            )));
        }
        if matches!(node.op, Op::Leaf) {
            return Err(RdcError::InvalidArgument(
                "backward on a leaf tensor: not produced by taped ops".into(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            self.accumulate_operands(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: Id, delta: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = &mut self.grads[id];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_operands(&mut self, id: Id, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                self.acc(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc(b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[b].value.data)
                    .map(|(g, b)| g * b)
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a].value.data)
                    .map(|(g, a)| g * a)
                    .collect();
                self.acc(a, &ga);
                self.acc(b, &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                self.acc(a, &ga);
            }
            Op::AddScalar(a, _) => self.acc(a, g),
            Op::Conv2d { x, w, b, stride, pad } => {
                let gy = Arr {
                    shape: self.nodes[id].value.shape.clone(),
                    data: g.to_vec(),
                };
                let (gx, gw, gb) =
                    ops::conv2d_backward(&self.nodes[x].value, &self.nodes[w].value, &gy, stride, pad);
                self.acc(x, &gx.data);
                self.acc(w, &gw.data);
                self.acc(b, &gb.data);
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let gy = Arr {
                    shape: self.nodes[id].value.shape.clone(),
                    data: g.to_vec(),
                };
                let (gx, gw, gb) =
                    ops::conv_t2d_backward(&self.nodes[x].value, &self.nodes[w].value, &gy, stride, pad);
                self.acc(x, &gx.data);
                self.acc(w, &gw.data);
                self.acc(b, &gb.data);
            }
            Op::LeakyRelu(x, slope) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x].value.data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                    .collect();
                self.acc(x, &gx);
            }
            Op::ConcatCh(a, b) => {
                let na = self.nodes[a].value.len();
                self.acc(a, &g[..na]);
                self.acc(b, &g[na..]);
            }
            Op::SliceCh { x, from, to: _ } => {
                let xv = &self.nodes[x].value;
                let hw = xv.shape[1] * xv.shape[2];
                let mut gx = vec![0.0; xv.len()];
                gx[from * hw..from * hw + g.len()].copy_from_slice(g);
                self.acc(x, &gx);
            }
            Op::Softplus(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x].value.data)
                    .map(|(g, x)| g * ops::softplus_deriv(*x))
                    .collect();
                self.acc(x, &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].value.data)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.acc(x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].value.data)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.acc(x, &gx);
            }
            Op::Softmax2(x) => {
                let y = &self.nodes[id].value;
                let hw = y.shape[1] * y.shape[2];
                let mut gx = vec![0.0; 2 * hw];
                for i in 0..hw {
                    let (y0, y1) = (y.data[i], y.data[hw + i]);
                    let dot = g[i] * y0 + g[hw + i] * y1;
                    gx[i] = y0 * (g[i] - dot);
                    gx[hw + i] = y1 * (g[hw + i] - dot);
                }
                self.acc(x, &gx);
            }
            Op::Mean(x) => {
                let n = self.nodes[x].value.len() as f64;
                let gx = vec![g[0] / n; self.nodes[x].value.len()];
                self.acc(x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.nodes[x].value.len()];
                self.acc(x, &gx);
            }
            Op::GaussianRate { y, mu, sigma } => {
                let gy = Arr {
                    shape: self.nodes[id].value.shape.clone(),
                    data: g.to_vec(),
                };
                let (g_y, g_mu, g_s) = ops::gaussian_rate_backward(
                    &self.nodes[y].value,
                    &self.nodes[mu].value,
                    &self.nodes[sigma].value,
                    &gy,
                );
                self.acc(y, &g_y.data);
                self.acc(mu, &g_mu.data);
                self.acc(sigma, &g_s.data);
            }
            Op::FactorizedBits { z, params } => {
                let pvals: Vec<&Arr> = params.iter().map(|&p| &self.nodes[p].value).collect();
                let (gz, gparams) = factorized::bits_backward(&self.nodes[z].value, &pvals, g);
                self.acc(z, &gz.data);
                for (pid, gp) in params.iter().zip(gparams) {
                    self.acc(*pid, &gp.data);
                }
            }
            Op::BroadcastCh(m, c) => {
                let n = self.nodes[m].value.len();
                let mut gm = vec![0.0; n];
                for ch in 0..c {
                    for i in 0..n {
                        gm[i] += g[ch * n + i];
                    }
                }
                self.acc(m, &gm);
            }
            Op::StHard(x) => self.acc(x, g),
            Op::Reshape(x) => self.acc(x, g),
        }
    }
}

fn plane_dims(a: &Arr) -> Result<(usize, usize)> {
    match a.shape.as_slice() {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        _ => Err(RdcError::InvalidArgument(format!(
            "expected [H,W] plane, got {:?}",
            a.shape
        ))),
    }
}

fn shape_err(context: &str, a: &Arr, b: &Arr) -> RdcError {
    RdcError::ShapeMismatch {
        context: context.into(),
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], rng: &mut impl Rng) -> Arr {
        let n: usize = shape.iter().product();
        Arr::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.var(Arr::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mean_product_gradient() {
        let mut t = Tape::new();
        let a = t.var(Arr::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.var(Arr::from_vec(&[4], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let p = t.mul(a, b).unwrap();
        let loss = t.mean(p);
        t.backward(loss).unwrap();
        // d mean(a*b)/da = b/4
        assert_eq!(t.grad(a).unwrap(), &[1.25, 1.5, 1.75, 2.0]);
        assert_eq!(t.grad(b).unwrap(), &[0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.var(Arr::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = t.scale(x, 2.0);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn constants_carry_no_gradient() {
        let mut t = Tape::new();
        let x = t.var(Arr::scalar(2.0));
        let c = t.constant(Arr::scalar(5.0));
        let y = t.mul(x, c).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[5.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn identity_grad_check_is_exact() {
        let rep = grad_check(
            |t, xs| Ok(t.sum(xs[0])),
            &[Arr::from_vec(&[3], vec![0.2, -0.4, 0.9]).unwrap()],
            1e-6,
        )
        .unwrap();
        assert!(rep.pass);
        assert!(rep.max_rel_err < 1e-9, "{}", rep.max_rel_err);
    }

    #[test]
    fn leaky_relu_grad_away_from_kink() {
        // Inputs kept > 1e-3 away from zero so finite differences are clean.
        let rep = grad_check(
            |t, xs| {
                let y = t.leaky_relu(xs[0], 0.01);
                Ok(t.sum(y))
            },
            &[Arr::from_vec(&[4], vec![0.7, -0.6, 1.3, -0.05]).unwrap()],
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn primitive_gradients_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let tol = 1e-4;

        // conv2d: loss over x, w, b.
        let rep = grad_check(
            |t, xs| {
                let y = t.conv2d(xs[0], xs[1], xs[2], 2, 1)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            &[randn(&[2, 6, 6], &mut rng), randn(&[3, 2, 3, 3], &mut rng), randn(&[3], &mut rng)],
            tol,
        )
        .unwrap();
        assert!(rep.pass, "conv2d: {}", rep.max_rel_err);

        // conv_t2d.
        let rep = grad_check(
            |t, xs| {
                let y = t.conv_t2d(xs[0], xs[1], xs[2], 2, 1, 1)?;
                let y = t.sigmoid(y);
                Ok(t.sum(y))
            },
            &[randn(&[2, 3, 3], &mut rng), randn(&[2, 3, 3, 3], &mut rng), randn(&[3], &mut rng)],
            tol,
        )
        .unwrap();
        assert!(rep.pass, "conv_t2d: {}", rep.max_rel_err);

        // add/sub/mul/scale/add_scalar/softplus chain.
        let rep = grad_check(
            |t, xs| {
                let s = t.add(xs[0], xs[1])?;
                let d = t.sub(s, xs[2])?;
                let m = t.mul(d, xs[0])?;
                let m = t.scale(m, 0.3);
                let m = t.add_scalar(m, -0.1);
                let m = t.softplus(m);
                Ok(t.mean(m))
            },
            &[randn(&[5], &mut rng), randn(&[5], &mut rng), randn(&[5], &mut rng)],
            tol,
        )
        .unwrap();
        assert!(rep.pass, "elementwise: {}", rep.max_rel_err);

        // concat_ch / slice_ch / broadcast_ch / reshape.
        let rep = grad_check(
            |t, xs| {
                let c = t.concat_ch(xs[0], xs[1])?;
                let s = t.slice_ch(c, 1, 3)?;
                let b = t.broadcast_ch(xs[2], 2)?;
                let p = t.mul(s, b)?;
                let p = t.reshape(p, &[2 * 3 * 3])?;
                Ok(t.sum(p))
            },
            &[randn(&[2, 3, 3], &mut rng), randn(&[2, 3, 3], &mut rng), randn(&[3, 3], &mut rng)],
            tol,
        )
        .unwrap();
        assert!(rep.pass, "structure ops: {}", rep.max_rel_err);

        // softmax2.
        let rep = grad_check(
            |t, xs| {
                let s = t.softmax2(xs[0])?;
                let top = t.slice_ch(s, 1, 2)?;
                let top = t.mul(top, top)?;
                Ok(t.sum(top))
            },
            &[randn(&[2, 3, 3], &mut rng)],
            tol,
        )
        .unwrap();
        assert!(rep.pass, "softmax2: {}", rep.max_rel_err);

        // gaussian_rate, sigma through softplus to stay positive.
        let rep = grad_check(
            |t, xs| {
                let sig = t.softplus(xs[2]);
                let sig = t.add_scalar(sig, 0.2);
                let r = t.gaussian_rate(xs[0], xs[1], sig)?;
                Ok(t.sum(r))
            },
            &[randn(&[2, 3, 3], &mut rng), randn(&[2, 3, 3], &mut rng), randn(&[2, 3, 3], &mut rng)],
            tol,
        )
        .unwrap();
        assert!(rep.pass, "gaussian_rate: {}", rep.max_rel_err);
    }

    #[test]
    fn factorized_bits_gradients_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let prior = crate::entropy::FactorizedPrior::init(2, 6, &mut rng);
        let z = randn(&[2, 3, 3], &mut rng);
        let mut inputs = vec![z];
        inputs.extend(prior.params.iter().cloned());
        let rep = grad_check(
            |t, xs| {
                let params: [Id; 8] = core::array::from_fn(|i| xs[i + 1]);
                let r = t.factorized_bits(xs[0], params)?;
                Ok(t.sum(r))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "factorized_bits: {}", rep.max_rel_err);
    }

    #[test]
    fn st_hard_passes_gradient_through() {
        // Forward binarizes; backward is the identity (straight-through).
        let mut t = Tape::new();
        let x = t.var(Arr::from_vec(&[3], vec![0.2, 0.6, 0.9]).unwrap());
        let w = t.constant(Arr::from_vec(&[3], vec![2.0, 3.0, 4.0]).unwrap());
        let h = t.st_hard(x);
        assert_eq!(t.value(h).data, vec![0.0, 1.0, 1.0]);
        let p = t.mul(h, w).unwrap();
        let loss = t.sum(p);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x0 = randn(&[2, 4, 4], &mut rng);
        let w0 = randn(&[2, 2, 3, 3], &mut rng);
        let b0 = randn(&[2], &mut rng);
        let run = || {
            let mut t = Tape::new();
            let x = t.var(x0.clone());
            let w = t.var(w0.clone());
            let b = t.var(b0.clone());
            let y = t.conv2d(x, w, b, 1, 1).unwrap();
            let y = t.leaky_relu(y, 0.01);
            let loss = t.mean(y);
            t.backward(loss).unwrap();
            (t.value(loss).data[0], t.grad(w).unwrap().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
