//! Execution contexts: the same network code runs either directly on
//! arrays (inference) or on the grad tape (training), selected by the
//! `Ctx` implementation.

use crate::arr::Arr;
use crate::error::Result;
use crate::ops;
use crate::tape::{Id, Tape};
use std::collections::BTreeMap;

pub trait Ctx {
    type T: Clone;

    fn constant(&mut self, a: Arr) -> Self::T;
    /// Named model parameter; the tape context registers it once and
    /// reuses the node on later lookups.
    fn param(&mut self, key: &str, a: &Arr) -> Self::T;
    fn shape(&self, t: &Self::T) -> Vec<usize>;

    fn conv2d(&mut self, x: &Self::T, w: &Self::T, b: &Self::T, stride: usize, pad: usize)
        -> Result<Self::T>;
    fn conv_t2d(
        &mut self,
        x: &Self::T,
        w: &Self::T,
        b: &Self::T,
        stride: usize,
        pad: usize,
        outpad: usize,
    ) -> Result<Self::T>;
    fn lrelu(&mut self, x: &Self::T) -> Self::T;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn scale(&mut self, a: &Self::T, s: f64) -> Self::T;
    fn add_scalar(&mut self, a: &Self::T, s: f64) -> Self::T;
    fn softplus(&mut self, a: &Self::T) -> Self::T;
    fn concat_ch(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn slice_ch(&mut self, a: &Self::T, from: usize, to: usize) -> Result<Self::T>;
    fn broadcast_ch(&mut self, m: &Self::T, c: usize) -> Result<Self::T>;
}

pub const LRELU_SLOPE: f64 = 0.01;

/// Direct evaluation on arrays.
#[derive(Default)]
pub struct PureCtx;

impl Ctx for PureCtx {
    type T = Arr;

    fn constant(&mut self, a: Arr) -> Arr {
        a
    }

    fn param(&mut self, _key: &str, a: &Arr) -> Arr {
        a.clone()
    }

    fn shape(&self, t: &Arr) -> Vec<usize> {
        t.shape.clone()
    }

    fn conv2d(&mut self, x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize) -> Result<Arr> {
        ops::conv2d(x, w, Some(b), stride, pad)
    }

    fn conv_t2d(
        &mut self,
        x: &Arr,
        w: &Arr,
        b: &Arr,
        stride: usize,
        pad: usize,
        outpad: usize,
    ) -> Result<Arr> {
        ops::conv_t2d(x, w, Some(b), stride, pad, outpad)
    }

    fn lrelu(&mut self, x: &Arr) -> Arr {
        x.map(|v| if v > 0.0 { v } else { LRELU_SLOPE * v })
    }

    fn add(&mut self, a: &Arr, b: &Arr) -> Result<Arr> {
        ew(a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Arr, b: &Arr) -> Result<Arr> {
        ew(a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Arr, b: &Arr) -> Result<Arr> {
        ew(a, b, |x, y| x * y)
    }

    fn scale(&mut self, a: &Arr, s: f64) -> Arr {
        a.map(|v| v * s)
    }

    fn add_scalar(&mut self, a: &Arr, s: f64) -> Arr {
        a.map(|v| v + s)
    }

    fn softplus(&mut self, a: &Arr) -> Arr {
        a.map(ops::softplus)
    }

    fn concat_ch(&mut self, a: &Arr, b: &Arr) -> Result<Arr> {
        let shape = vec![a.shape[0] + b.shape[0], a.shape[1], a.shape[2]];
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Arr::from_vec(&shape, data)
    }

    fn slice_ch(&mut self, a: &Arr, from: usize, to: usize) -> Result<Arr> {
        let hw = a.shape[1] * a.shape[2];
        Arr::from_vec(
            &[to - from, a.shape[1], a.shape[2]],
            a.data[from * hw..to * hw].to_vec(),
        )
    }

    fn broadcast_ch(&mut self, m: &Arr, c: usize) -> Result<Arr> {
        let (h, w) = match m.shape.as_slice() {
            [h, w] | [1, h, w] => (*h, *w),
            _ => {
                return Err(crate::error::RdcError::InvalidArgument(format!(
                    "broadcast_ch expects a plane, got {:?}",
                    m.shape
                )))
            }
        };
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            data.extend_from_slice(&m.data);
        }
        Arr::from_vec(&[c, h, w], data)
    }
}

fn ew(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Result<Arr> {
    if !a.same_shape(b) {
        return Err(crate::error::RdcError::ShapeMismatch {
            context: "elementwise".into(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(Arr {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
    })
}

/// Recording context: parameters become tape leaves, trainable unless the
/// freeze predicate matches their key.
pub struct TapeCtx<'a> {
    pub tape: &'a mut Tape,
    pub params: BTreeMap<String, Id>,
    frozen: Box<dyn Fn(&str) -> bool + 'a>,
}

impl<'a> TapeCtx<'a> {
    pub fn new(tape: &'a mut Tape) -> Self {
        TapeCtx {
            tape,
            params: BTreeMap::new(),
            frozen: Box::new(|_| false),
        }
    }

    pub fn with_freeze(tape: &'a mut Tape, frozen: impl Fn(&str) -> bool + 'a) -> Self {
        TapeCtx {
            tape,
            params: BTreeMap::new(),
            frozen: Box::new(frozen),
        }
    }

    pub fn is_frozen(&self, key: &str) -> bool {
        (self.frozen)(key)
    }
}

impl Ctx for TapeCtx<'_> {
    type T = Id;

    fn constant(&mut self, a: Arr) -> Id {
        self.tape.constant(a)
    }

    fn param(&mut self, key: &str, a: &Arr) -> Id {
        if let Some(&id) = self.params.get(key) {
            return id;
        }
        let requires_grad = !(self.frozen)(key);
        let id = self.tape.leaf(a.clone(), requires_grad);
        self.params.insert(key.to_string(), id);
        id
    }

    fn shape(&self, t: &Id) -> Vec<usize> {
        self.tape.shape(*t).to_vec()
    }

    fn conv2d(&mut self, x: &Id, w: &Id, b: &Id, stride: usize, pad: usize) -> Result<Id> {
        self.tape.conv2d(*x, *w, *b, stride, pad)
    }

    fn conv_t2d(
        &mut self,
        x: &Id,
        w: &Id,
        b: &Id,
        stride: usize,
        pad: usize,
        outpad: usize,
    ) -> Result<Id> {
        self.tape.conv_t2d(*x, *w, *b, stride, pad, outpad)
    }

    fn lrelu(&mut self, x: &Id) -> Id {
        self.tape.leaky_relu(*x, LRELU_SLOPE)
    }

    fn add(&mut self, a: &Id, b: &Id) -> Result<Id> {
        self.tape.add(*a, *b)
    }

    fn sub(&mut self, a: &Id, b: &Id) -> Result<Id> {
        self.tape.sub(*a, *b)
    }

    fn mul(&mut self, a: &Id, b: &Id) -> Result<Id> {
        self.tape.mul(*a, *b)
    }

    fn scale(&mut self, a: &Id, s: f64) -> Id {
        self.tape.scale(*a, s)
    }

    fn add_scalar(&mut self, a: &Id, s: f64) -> Id {
        self.tape.add_scalar(*a, s)
    }

    fn softplus(&mut self, a: &Id) -> Id {
        self.tape.softplus(*a)
    }

    fn concat_ch(&mut self, a: &Id, b: &Id) -> Result<Id> {
        self.tape.concat_ch(*a, *b)
    }

    fn slice_ch(&mut self, a: &Id, from: usize, to: usize) -> Result<Id> {
        self.tape.slice_ch(*a, from, to)
    }

    fn broadcast_ch(&mut self, m: &Id, c: usize) -> Result<Id> {
        self.tape.broadcast_ch(*m, c)
    }
}
