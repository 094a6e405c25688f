//! Temporal branch: a GRU over the per-date feature vectors followed by
//! attention pooling of the hidden states.
//!
//! With `H` the `N x d` matrix of stacked hidden states, the pooling is
//!
//! ```text
//! v      = tanh(H W_a + b_a)      (b_a added to every row)
//! lambda = softmax(v u_a)
//! feat   = sum_i lambda_i h_i
//! ```

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::grad::{ParamStore, Tape, Tensor, Var};
use crate::init::uniform;

/// Handle to the nine GRU tensors stored under `prefix` in a [`ParamStore`].
///
/// Gates follow the usual formulation, with the reset gate applied to the
/// previous state inside the candidate:
///
/// ```text
/// z  = sigmoid(x W_z + h U_z + b_z)
/// r  = sigmoid(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r * h) U_h + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    prefix: String,
    input_dim: usize,
    hidden: usize,
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl GruParams {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden: usize) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Invalid(format!(
                "GRU needs positive dimensions, got input {input_dim}, hidden {hidden}"
            )));
        }
        Ok(GruParams {
            prefix: prefix.into(),
            input_dim,
            hidden,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_weight(&self, gate: &str) -> String {
        format!("{}.w_{gate}", self.prefix)
    }

    pub fn recurrent_weight(&self, gate: &str) -> String {
        format!("{}.u_{gate}", self.prefix)
    }

    pub fn bias(&self, gate: &str) -> String {
        format!("{}.b_{gate}", self.prefix)
    }

    pub fn names(&self) -> Vec<String> {
        GATES
            .iter()
            .flat_map(|g| [self.input_weight(g), self.recurrent_weight(g), self.bias(g)])
            .collect()
    }

    /// Matrices uniform in `[-1/sqrt(d), 1/sqrt(d)]`, biases zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        for g in GATES {
            store.insert(
                self.input_weight(g),
                uniform(&[self.input_dim, self.hidden], bound, rng),
            );
            store.insert(
                self.recurrent_weight(g),
                uniform(&[self.hidden, self.hidden], bound, rng),
            );
            store.insert(self.bias(g), Tensor::zeros([self.hidden]));
        }
    }

    /// One step for a batch: `x` is `[batch, input_dim]`, `h_prev` is
    /// `[batch, hidden]`.
    pub fn cell(&self, tape: &mut Tape, store: &ParamStore, x: Var, h_prev: Var) -> Result<Var> {
        self.check_rows("gru_cell", tape.shape(x), self.input_dim)?;
        self.check_rows("gru_cell", tape.shape(h_prev), self.hidden)?;
        let mut proj = [x; 3];
        for (p, g) in proj.iter_mut().zip(GATES) {
            let w = tape.param(store, &self.input_weight(g))?;
            *p = tape.matmul(x, w)?;
        }
        self.step(tape, store, proj, h_prev)
    }

    /// Runs the recurrence over `[batch, N, input_dim]` from `h0`
    /// (`[batch, hidden]`), returning the stacked states `[batch, N, hidden]`.
    pub fn sequence(&self, tape: &mut Tape, store: &ParamStore, ts: Var, h0: Var) -> Result<Var> {
        let (batch, steps, input) = match *tape.shape(ts) {
            [b, n, f] => (b, n, f),
            ref s => return dim_err("gru_sequence", format!("expected [batch, N, features], got {s:?}")),
        };
        if input != self.input_dim {
            return dim_err(
                "gru_sequence",
                format!("{input} input features, GRU expects {}", self.input_dim),
            );
        }
        self.check_rows("gru_sequence", tape.shape(h0), self.hidden)?;
        // Input projections for all dates at once.
        let flat = tape.reshape(ts, &[batch * steps, input])?;
        let mut all = [flat; 3];
        for (p, g) in all.iter_mut().zip(GATES) {
            let w = tape.param(store, &self.input_weight(g))?;
            let xw = tape.matmul(flat, w)?;
            *p = tape.reshape(xw, &[batch, steps, self.hidden])?;
        }
        let mut h = h0;
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut proj = [h; 3];
            for (p, a) in proj.iter_mut().zip(all) {
                *p = tape.select_step(a, t)?;
            }
            h = self.step(tape, store, proj, h)?;
            states.push(h);
        }
        tape.stack_steps(&states)
    }

    fn step(&self, tape: &mut Tape, store: &ParamStore, proj: [Var; 3], h: Var) -> Result<Var> {
        let [xz, xr, xh] = proj;
        let z = self.gate(tape, store, "z", xz, h)?;
        let z = tape.sigmoid(z);
        let r = self.gate(tape, store, "r", xr, h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let cand = self.gate(tape, store, "h", xh, rh)?;
        let cand = tape.tanh(cand);
        let delta = tape.sub(cand, h)?;
        let delta = tape.mul(z, delta)?;
        tape.add(h, delta)
    }

    fn gate(&self, tape: &mut Tape, store: &ParamStore, g: &str, xw: Var, h: Var) -> Result<Var> {
        let u = tape.param(store, &self.recurrent_weight(g))?;
        let b = tape.param(store, &self.bias(g))?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add_bias(s, b)
    }

    fn check_rows(&self, op: &'static str, shape: &[usize], cols: usize) -> Result<()> {
        if shape.len() != 2 || shape[1] != cols {
            return dim_err(op, format!("expected [batch, {cols}], got {shape:?}"));
        }
        Ok(())
    }
}

/// Handle to `W_a` (`d x d`), `b_a` (`d`) and `u_a` (`d`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    prefix: String,
    hidden: usize,
}

/// Pooled feature `[batch, d]` and attention weights `[batch, N]`.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub feature: Var,
    pub weights: Var,
}

impl AttentionParams {
    pub fn new(prefix: impl Into<String>, hidden: usize) -> Self {
        AttentionParams {
            prefix: prefix.into(),
            hidden,
        }
    }

    pub fn w(&self) -> String {
        format!("{}.w_a", self.prefix)
    }

    pub fn b(&self) -> String {
        format!("{}.b_a", self.prefix)
    }

    pub fn u(&self) -> String {
        format!("{}.u_a", self.prefix)
    }

    pub fn names(&self) -> Vec<String> {
        vec![self.w(), self.b(), self.u()]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        store.insert(self.w(), uniform(&[self.hidden, self.hidden], bound, rng));
        store.insert(self.b(), Tensor::zeros([self.hidden]));
        store.insert(self.u(), uniform(&[self.hidden], bound, rng));
    }

    /// Unnormalized attention scores `tanh(H W_a + b_a) u_a`, `[batch, N]`.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let (batch, steps, d) = match *tape.shape(hidden) {
            [b, n, d] => (b, n, d),
            ref s => return dim_err("attention", format!("expected [batch, N, d], got {s:?}")),
        };
        if d != self.hidden {
            return dim_err("attention", format!("hidden size {d}, attention expects {}", self.hidden));
        }
        let w = tape.param(store, &self.w())?;
        let b = tape.param(store, &self.b())?;
        let u = tape.param(store, &self.u())?;
        let rows = tape.reshape(hidden, &[batch * steps, d])?;
        let v = tape.matmul(rows, w)?;
        let v = tape.add_bias(v, b)?;
        let v = tape.tanh(v);
        let u = tape.reshape(u, &[d, 1])?;
        let s = tape.matmul(v, u)?;
        tape.reshape(s, &[batch, steps])
    }

    /// Softmax-normalizes `scores` and takes the weighted sum of the rows of
    /// `hidden`.
    pub fn combine(&self, tape: &mut Tape, scores: Var, hidden: Var) -> Result<Pooled> {
        let weights = tape.softmax(scores)?;
        let feature = tape.weighted_sum(weights, hidden)?;
        Ok(Pooled { feature, weights })
    }

    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Pooled> {
        let s = self.scores(tape, store, hidden)?;
        self.combine(tape, s, hidden)
    }
}

/// GRU followed by attention pooling, started from a zero state.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnBranch {
    pub gru: GruParams,
    pub attention: AttentionParams,
}

impl RnnBranch {
    pub fn new(input_dim: usize, hidden: usize) -> Result<Self> {
        Ok(RnnBranch {
            gru: GruParams::new("gru", input_dim, hidden)?,
            attention: AttentionParams::new("att", hidden),
        })
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden()
    }

    pub fn names(&self) -> Vec<String> {
        let mut n = self.gru.names();
        n.extend(self.attention.names());
        n
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.gru.init(store, rng);
        self.attention.init(store, rng);
    }

    /// `ts` is `[batch, N, input_dim]`; returns the pooled `[batch, d]`
    /// feature and the attention weights.
    pub fn features(&self, tape: &mut Tape, store: &ParamStore, ts: Var) -> Result<Pooled> {
        let batch = tape.shape(ts)[0];
        let h0 = tape.input(Tensor::zeros([batch, self.hidden()]));
        let h = self.gru.sequence(tape, store, ts, h0)?;
        self.attention.pool(tape, store, h)
    }
}
