//! Scalar reverse-mode differentiation on a thread-local tape.
//!
//! Numerical code throughout the crate is written once, generic over the
//! [`Real`] trait. Instantiated with `f64` it is a plain forward evaluation;
//! instantiated with [`Var`] every operation is recorded on the tape of the
//! current thread so that adjoints can be propagated afterwards.
//!
//! Two kinds of composite nodes keep the tape small on the hot paths:
//! agent calls (the agent supplies its own vector-Jacobian product) and the
//! Bayes reweighting of a whole particle ensemble.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::agents::{Agent, Query};

const CONST: u32 = u32::MAX;

/// A scalar recorded on the thread-local tape, or a constant.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

enum Block {
    Agent {
        out_start: u32,
        n_out: u32,
        inputs: Vec<u32>,
        query: Query,
    },
    Reweight {
        out_start: u32,
        w: Vec<u32>,
        p: Vec<u32>,
        wv: Vec<f64>,
        pv: Vec<f64>,
        z: f64,
    },
}

impl Block {
    fn last_output(&self) -> u32 {
        match self {
            Block::Agent { out_start, n_out, .. } => out_start + n_out - 1,
            Block::Reweight { out_start, w, .. } => out_start + w.len() as u32 - 1,
        }
    }
}

/// Recorded computation graph of one evaluation.
#[derive(Default)]
pub struct Tape {
    vals: Vec<f64>,
    edge_end: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    blocks: Vec<Block>,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

impl Tape {
    /// Discards whatever the current thread has recorded.
    pub fn reset() {
        TAPE.with(|t| *t.borrow_mut() = Tape::default());
    }

    /// Moves the current thread's recording out, leaving an empty tape.
    pub fn take() -> Tape {
        TAPE.with(|t| std::mem::take(&mut *t.borrow_mut()))
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push_node(&mut self, val: f64, edges: impl Iterator<Item = (u32, f64)>) -> u32 {
        for (p, d) in edges {
            self.parents.push(p);
            self.partials.push(d);
        }
        let idx = self.vals.len() as u32;
        assert!(idx < CONST, "tape overflow");
        self.vals.push(val);
        self.edge_end.push(self.parents.len() as u32);
        idx
    }

    /// Propagates the seed adjoints back through the recording.
    ///
    /// Parameter gradients of agent blocks are accumulated into `grad`.
    /// Returns the adjoint of every recorded node.
    pub fn backward(&self, seeds: &[(Var, f64)], agent: Option<&dyn Agent>, grad: &mut [f64]) -> Vec<f64> {
        let n = self.vals.len();
        let mut adj = vec![0.0; n];
        for (v, s) in seeds {
            if v.idx != CONST {
                adj[v.idx as usize] += s;
            }
        }
        let mut nb = self.blocks.len();
        let mut in_adj = Vec::new();
        for i in (0..n).rev() {
            if nb > 0 && self.blocks[nb - 1].last_output() as usize == i {
                nb -= 1;
                self.block_backward(&self.blocks[nb], &mut adj, agent, grad, &mut in_adj);
                continue;
            }
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let start = if i == 0 { 0 } else { self.edge_end[i - 1] as usize };
            let end = self.edge_end[i] as usize;
            for e in start..end {
                adj[self.parents[e] as usize] += a * self.partials[e];
            }
        }
        adj
    }

    fn block_backward(
        &self,
        block: &Block,
        adj: &mut [f64],
        agent: Option<&dyn Agent>,
        grad: &mut [f64],
        in_adj: &mut Vec<f64>,
    ) {
        match block {
            Block::Agent { out_start, n_out, inputs, query } => {
                let s = *out_start as usize;
                let out_adj = &adj[s..s + *n_out as usize];
                if out_adj.iter().all(|&a| a == 0.0) {
                    return;
                }
                let out_adj = out_adj.to_vec();
                let agent = agent.expect("agent block on tape but no agent supplied to backward");
                in_adj.clear();
                in_adj.resize(inputs.len(), 0.0);
                agent.backward(query, &out_adj, in_adj, grad);
                for (k, &idx) in inputs.iter().enumerate() {
                    if idx != CONST {
                        adj[idx as usize] += in_adj[k];
                    }
                }
            }
            Block::Reweight { out_start, w, p, wv, pv, z } => {
                let s = *out_start as usize;
                let n = w.len();
                let mut dot = 0.0;
                let mut any = false;
                for j in 0..n {
                    let a = adj[s + j];
                    if a != 0.0 {
                        any = true;
                        dot += a * wv[j] * pv[j] / z;
                    }
                }
                if !any {
                    return;
                }
                for j in 0..n {
                    let g = (adj[s + j] - dot) / z;
                    if w[j] != CONST {
                        adj[w[j] as usize] += g * pv[j];
                    }
                    if p[j] != CONST {
                        adj[p[j] as usize] += g * wv[j];
                    }
                }
            }
        }
    }
}

impl Var {
    /// A new independent input recorded on the tape.
    pub fn leaf(val: f64) -> Var {
        let idx = TAPE.with(|t| t.borrow_mut().push_node(val, std::iter::empty()));
        Var { idx, val }
    }

    pub fn constant(val: f64) -> Var {
        Var { idx: CONST, val }
    }

    pub fn value(self) -> f64 {
        self.val
    }

    pub fn is_constant(self) -> bool {
        self.idx == CONST
    }

    /// Tape index, `None` for constants.
    pub fn index(self) -> Option<usize> {
        (self.idx != CONST).then_some(self.idx as usize)
    }

    fn derived(val: f64, edges: &[(Var, f64)]) -> Var {
        if edges.iter().all(|(v, _)| v.idx == CONST) {
            return Var::constant(val);
        }
        let idx = TAPE.with(|t| {
            t.borrow_mut()
                .push_node(val, edges.iter().filter(|(v, _)| v.idx != CONST).map(|(v, d)| (v.idx, *d)))
        });
        Var { idx, val }
    }

    fn unary(self, val: f64, d: f64) -> Var {
        if self.idx == CONST {
            Var::constant(val)
        } else {
            Var::derived(val, &[(self, d)])
        }
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, o: Var) -> Var {
        Var::derived(self.val + o.val, &[(self, 1.0), (o, 1.0)])
    }
}
impl Sub for Var {
    type Output = Var;
    fn sub(self, o: Var) -> Var {
        Var::derived(self.val - o.val, &[(self, 1.0), (o, -1.0)])
    }
}
impl Mul for Var {
    type Output = Var;
    fn mul(self, o: Var) -> Var {
        Var::derived(self.val * o.val, &[(self, o.val), (o, self.val)])
    }
}
impl Div for Var {
    type Output = Var;
    fn div(self, o: Var) -> Var {
        let q = self.val / o.val;
        Var::derived(q, &[(self, 1.0 / o.val), (o, -q / o.val)])
    }
}
impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}
impl Add<f64> for Var {
    type Output = Var;
    fn add(self, o: f64) -> Var {
        self.unary(self.val + o, 1.0)
    }
}
impl Sub<f64> for Var {
    type Output = Var;
    fn sub(self, o: f64) -> Var {
        self.unary(self.val - o, 1.0)
    }
}
impl Mul<f64> for Var {
    type Output = Var;
    fn mul(self, o: f64) -> Var {
        self.unary(self.val * o, o)
    }
}
impl Div<f64> for Var {
    type Output = Var;
    fn div(self, o: f64) -> Var {
        self.unary(self.val / o, 1.0 / o)
    }
}
impl AddAssign for Var {
    fn add_assign(&mut self, o: Var) {
        *self = *self + o;
    }
}

/// Scalar arithmetic shared by `f64` and [`Var`].
pub trait Real:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(x: f64) -> Self;
    fn val(self) -> f64;
    /// A node with the given value and local partial derivatives.
    fn node(val: f64, parents: &[(Self, f64)]) -> Self;
    /// `Σ c_i x_i` as a single node.
    fn dot(xs: &[Self], c: &[f64]) -> Self;
    /// Bayes reweighting `w_i p_i / Σ_j w_j p_j`; `None` when the evidence vanishes.
    fn reweight(w: &[Self], p: &[Self]) -> Option<Vec<Self>>;
    /// Evaluates an agent on `inputs`, recording a composite node.
    fn agent<A: Agent + ?Sized>(agent: &A, query: Query, inputs: &[Self]) -> Vec<Self>;

    fn zero() -> Self {
        Self::cst(0.0)
    }
    fn one() -> Self {
        Self::cst(1.0)
    }
    fn exp(self) -> Self {
        let e = self.val().exp();
        Self::node(e, &[(self, e)])
    }
    fn ln(self) -> Self {
        let v = self.val();
        Self::node(v.ln(), &[(self, 1.0 / v)])
    }
    fn sin(self) -> Self {
        let v = self.val();
        Self::node(v.sin(), &[(self, v.cos())])
    }
    fn cos(self) -> Self {
        let v = self.val();
        Self::node(v.cos(), &[(self, -v.sin())])
    }
    fn sqrt(self) -> Self {
        let s = self.val().sqrt();
        Self::node(s, &[(self, 0.5 / s)])
    }
    fn tanh(self) -> Self {
        let t = self.val().tanh();
        Self::node(t, &[(self, 1.0 - t * t)])
    }
    fn abs(self) -> Self {
        let v = self.val();
        Self::node(v.abs(), &[(self, if v < 0.0 { -1.0 } else { 1.0 })])
    }
    fn powi(self, k: i32) -> Self {
        let v = self.val();
        let d = if k == 0 { 0.0 } else { k as f64 * v.powi(k - 1) };
        Self::node(v.powi(k), &[(self, d)])
    }
    fn powf(self, e: f64) -> Self {
        let v = self.val();
        let p = v.powf(e);
        let d = if v == 0.0 { 0.0 } else { e * p / v };
        Self::node(p, &[(self, d)])
    }
    fn recip(self) -> Self {
        let v = self.val();
        Self::node(1.0 / v, &[(self, -1.0 / (v * v))])
    }
    /// The smaller operand by value (its derivative is passed through).
    fn min_r(self, o: Self) -> Self {
        if o.val() < self.val() {
            o
        } else {
            self
        }
    }
    fn max_r(self, o: Self) -> Self {
        if o.val() > self.val() {
            o
        } else {
            self
        }
    }
    fn sum(xs: &[Self]) -> Self {
        Self::dot(xs, &vec![1.0; xs.len()])
    }
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn val(self) -> f64 {
        self
    }
    fn node(val: f64, _: &[(Self, f64)]) -> Self {
        val
    }
    fn dot(xs: &[Self], c: &[f64]) -> Self {
        xs.iter().zip(c).map(|(x, c)| x * c).sum()
    }
    fn reweight(w: &[Self], p: &[Self]) -> Option<Vec<Self>> {
        let z: f64 = w.iter().zip(p).map(|(w, p)| w * p).sum();
        if !(z > 0.0) || !z.is_finite() {
            return None;
        }
        Some(w.iter().zip(p).map(|(w, p)| w * p / z).collect())
    }
    fn agent<A: Agent + ?Sized>(agent: &A, mut query: Query, inputs: &[Self]) -> Vec<Self> {
        query.inputs = inputs.to_vec();
        let mut out = vec![0.0; agent.n_outputs()];
        agent.forward(&query, &mut out);
        out
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn powi(self, k: i32) -> Self {
        f64::powi(self, k)
    }
    fn powf(self, e: f64) -> Self {
        f64::powf(self, e)
    }
    fn recip(self) -> Self {
        1.0 / self
    }
}

impl Real for Var {
    fn cst(x: f64) -> Self {
        Var::constant(x)
    }
    fn val(self) -> f64 {
        self.val
    }
    fn node(val: f64, parents: &[(Self, f64)]) -> Self {
        Var::derived(val, parents)
    }
    fn dot(xs: &[Self], c: &[f64]) -> Self {
        let val = xs.iter().zip(c).map(|(x, c)| x.val * c).sum();
        if xs.iter().all(|x| x.idx == CONST) {
            return Var::constant(val);
        }
        let idx = TAPE.with(|t| {
            t.borrow_mut().push_node(
                val,
                xs.iter().zip(c).filter(|(x, c)| x.idx != CONST && **c != 0.0).map(|(x, c)| (x.idx, *c)),
            )
        });
        Var { idx, val }
    }
    fn reweight(w: &[Self], p: &[Self]) -> Option<Vec<Self>> {
        let wv: Vec<f64> = w.iter().map(|x| x.val).collect();
        let pv: Vec<f64> = p.iter().map(|x| x.val).collect();
        let out = <f64 as Real>::reweight(&wv, &pv)?;
        if w.iter().chain(p).all(|x| x.idx == CONST) {
            return Some(out.into_iter().map(Var::constant).collect());
        }
        let z: f64 = wv.iter().zip(&pv).map(|(a, b)| a * b).sum();
        let vars = TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let out_start = t.vals.len() as u32;
            let vars: Vec<Var> =
                out.iter().map(|&v| Var { idx: t.push_node(v, std::iter::empty()), val: v }).collect();
            t.blocks.push(Block::Reweight {
                out_start,
                w: w.iter().map(|x| x.idx).collect(),
                p: p.iter().map(|x| x.idx).collect(),
                wv,
                pv,
                z,
            });
            vars
        });
        Some(vars)
    }
    fn agent<A: Agent + ?Sized>(agent: &A, mut query: Query, inputs: &[Self]) -> Vec<Self> {
        query.inputs = inputs.iter().map(|x| x.val).collect();
        let mut out = vec![0.0; agent.n_outputs()];
        agent.forward(&query, &mut out);
        if agent.params().is_empty() && inputs.iter().all(|x| x.idx == CONST) {
            return out.into_iter().map(Var::constant).collect();
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let out_start = t.vals.len() as u32;
            let vars: Vec<Var> =
                out.iter().map(|&v| Var { idx: t.push_node(v, std::iter::empty()), val: v }).collect();
            t.blocks.push(Block::Agent {
                out_start,
                n_out: out.len() as u32,
                inputs: inputs.iter().map(|x| x.idx).collect(),
                query,
            });
            vars
        })
    }
}
