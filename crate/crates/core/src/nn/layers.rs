//! Layer primitives built on the tape.
//!
//! Each layer is a set of [`ParamId`] handles into a [`ParamStore`]; layers
//! hold no values themselves, so a model's structure can be rebuilt from its
//! configuration and then filled from a checkpoint.

use ndarray::Axis;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::params::{Matrix, ParamId, ParamStore};
use super::tape::{sigmoid, ConvGeometry, Tape, Var};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    pub fn apply_value(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

/// Registers parameters under a name prefix with seeded initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: impl Into<String>) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.into(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn insert(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        self.store.insert(join(&self.prefix, name), value)
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> Result<ParamId> {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let v = Matrix::from_shape_fn((rows, cols), |_| dist.sample(self.rng));
        self.insert(name, v)
    }

    pub fn fan_in(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.uniform(name, rows, cols, 1.0 / (rows.max(1) as f64).sqrt())
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.insert(name, Matrix::zeros((rows, cols)))
    }

    pub fn value(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        self.insert(name, value)
    }

    /// `[n × blocks·n]` matrix made of independent orthogonal `n×n` blocks.
    pub fn orthogonal_blocks(&mut self, name: &str, n: usize, blocks: usize) -> Result<ParamId> {
        let mut m = Matrix::zeros((n, n * blocks));
        for b in 0..blocks {
            let q = random_orthogonal(n, self.rng);
            m.slice_mut(ndarray::s![.., b * n..(b + 1) * n]).assign(&q);
        }
        self.insert(name, m)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Orthogonal matrix from modified Gram–Schmidt on a Gaussian draw.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Matrix {
    loop {
        let mut a = Matrix::from_shape_fn((n, n), |_| StandardNormal.sample(rng));
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let proj = a.column(j).dot(&a.column(k));
                let col_k = a.column(k).to_owned();
                a.column_mut(j).scaled_add(-proj, &col_k);
            }
            let norm = a.column(j).dot(&a.column(j)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            a.column_mut(j).mapv_inplace(|v| v / norm);
        }
        if ok {
            return a;
        }
    }
}

/// `activation(x·W + b)`, with `W` stored as `[in × out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub activation: Activation,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(pb: &mut ParamBuilder<'_>, input: usize, output: usize, activation: Activation) -> Result<Self> {
        Ok(Self {
            w: pb.fan_in("w", input, output)?,
            b: pb.zeros("b", 1, output)?,
            activation,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (_, n) = tape.shape(x);
        if n != self.input {
            return Err(shape_err("dense", self.input, n));
        }
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let h = tape.matmul(x, w)?;
        let h = tape.add_row(h, b)?;
        Ok(self.activation.apply(tape, h))
    }

    /// Tape-free evaluation for inference loops.
    pub fn eval(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input {
            return Err(shape_err("dense", self.input, x.ncols()));
        }
        let mut h = x.dot(store.value(self.w)) + store.value(self.b);
        h.mapv_inplace(|v| self.activation.apply_value(v));
        Ok(h)
    }
}

/// Standard four-gate LSTM cell, gate order `i, f, g, o`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(pb: &mut ParamBuilder<'_>, input: usize, hidden: usize) -> Result<Self> {
        let mut bias = Matrix::zeros((1, 4 * hidden));
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        Ok(Self {
            w_ih: pb.fan_in("w_ih", input, 4 * hidden)?,
            w_hh: pb.orthogonal_blocks("w_hh", hidden, 4)?,
            b: pb.value("b", bias)?,
            input,
            hidden,
        })
    }

    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (_, n) = tape.shape(x);
        if n != self.input {
            return Err(shape_err("lstm_step", self.input, n));
        }
        let hd = self.hidden;
        let w_ih = tape.param(self.w_ih);
        let w_hh = tape.param(self.w_hh);
        let b = tape.param(self.b);
        let xi = tape.matmul(x, w_ih)?;
        let hh = tape.matmul(h, w_hh)?;
        let gates = tape.add(xi, hh)?;
        let gates = tape.add_row(gates, b)?;
        let i = tape.slice_cols(gates, 0, hd)?;
        let f = tape.slice_cols(gates, hd, hd)?;
        let g = tape.slice_cols(gates, 2 * hd, hd)?;
        let o = tape.slice_cols(gates, 3 * hd, hd)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new);
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Unrolls over `inputs` from a zero state. Where a step's mask (`[B×1]`,
    /// 0 or 1) is zero the state is carried through unchanged, so front-padded
    /// rows yield exactly the state of their unpadded sequence.
    pub fn run(&self, tape: &mut Tape<'_>, inputs: &[Var], masks: Option<&[Var]>) -> Result<(Var, Var)> {
        let Some(first) = inputs.first() else {
            return Err(crate::error::Error::InvalidInput("lstm over empty sequence".into()));
        };
        let rows = tape.shape(*first).0;
        let mut h = tape.constant(Matrix::zeros((rows, self.hidden)));
        let mut c = tape.constant(Matrix::zeros((rows, self.hidden)));
        for (t, &x) in inputs.iter().enumerate() {
            let (h_new, c_new) = self.step(tape, x, h, c)?;
            match masks {
                Some(m) => {
                    h = masked_update(tape, h, h_new, m[t])?;
                    c = masked_update(tape, c, c_new, m[t])?;
                }
                None => {
                    h = h_new;
                    c = c_new;
                }
            }
        }
        Ok((h, c))
    }
}

fn masked_update(tape: &mut Tape<'_>, old: Var, new: Var, mask: Var) -> Result<Var> {
    let delta = tape.sub(new, old)?;
    let delta = tape.mul_col(delta, mask)?;
    tape.add(old, delta)
}

/// GRU cell in the `r, z, n` formulation:
/// `h' = (1 − z)·n + z·h`, `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`.
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(pb: &mut ParamBuilder<'_>, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_ih: pb.fan_in("w_ih", input, 3 * hidden)?,
            w_hh: pb.orthogonal_blocks("w_hh", hidden, 3)?,
            b_ih: pb.zeros("b_ih", 1, 3 * hidden)?,
            b_hh: pb.zeros("b_hh", 1, 3 * hidden)?,
            input,
            hidden,
        })
    }

    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let (_, n) = tape.shape(x);
        if n != self.input {
            return Err(shape_err("gru_step", self.input, n));
        }
        let hd = self.hidden;
        let w_ih = tape.param(self.w_ih);
        let w_hh = tape.param(self.w_hh);
        let b_ih = tape.param(self.b_ih);
        let b_hh = tape.param(self.b_hh);
        let gi = tape.matmul(x, w_ih)?;
        let gi = tape.add_row(gi, b_ih)?;
        let gh = tape.matmul(h, w_hh)?;
        let gh = tape.add_row(gh, b_hh)?;
        let (ir, iz, inn) = (
            tape.slice_cols(gi, 0, hd)?,
            tape.slice_cols(gi, hd, hd)?,
            tape.slice_cols(gi, 2 * hd, hd)?,
        );
        let (hr, hz, hn) = (
            tape.slice_cols(gh, 0, hd)?,
            tape.slice_cols(gh, hd, hd)?,
            tape.slice_cols(gh, 2 * hd, hd)?,
        );
        let r = tape.add(ir, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(iz, hz)?;
        let z = tape.sigmoid(z);
        let rh = tape.mul(r, hn)?;
        let n = tape.add(inn, rh)?;
        let n = tape.tanh(n);
        // h' = n + z ⊙ (h − n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    pub fn eval_step(&self, store: &ParamStore, x: &Matrix, h: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input {
            return Err(shape_err("gru_step", self.input, x.ncols()));
        }
        let hd = self.hidden;
        let gi = x.dot(store.value(self.w_ih)) + store.value(self.b_ih);
        let gh = h.dot(store.value(self.w_hh)) + store.value(self.b_hh);
        let mut out = Matrix::zeros(h.dim());
        for (row, mut o) in out.axis_iter_mut(Axis(0)).enumerate() {
            for j in 0..hd {
                let r = sigmoid(gi[[row, j]] + gh[[row, j]]);
                let z = sigmoid(gi[[row, hd + j]] + gh[[row, hd + j]]);
                let n = (gi[[row, 2 * hd + j]] + r * gh[[row, 2 * hd + j]]).tanh();
                o[j] = n + z * (h[[row, j]] - n);
            }
        }
        Ok(out)
    }
}

/// Forward and backward LSTMs whose final hidden states are concatenated.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new(pb: &mut ParamBuilder<'_>, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            forward: Lstm::new(&mut pb.scope("fwd"), input, hidden)?,
            backward: Lstm::new(&mut pb.scope("bwd"), input, hidden)?,
        })
    }

    pub fn output_width(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }

    pub fn encode(&self, tape: &mut Tape<'_>, seq: &[Var], masks: Option<&[Var]>) -> Result<Var> {
        if seq.is_empty() {
            return Err(crate::error::Error::InvalidInput(
                "bidirectional encode of empty sequence".into(),
            ));
        }
        let (hf, _) = self.forward.run(tape, seq, masks)?;
        let rev: Vec<Var> = seq.iter().rev().copied().collect();
        let rev_masks: Option<Vec<Var>> = masks.map(|m| m.iter().rev().copied().collect());
        let (hb, _) = self.backward.run(tape, &rev, rev_masks.as_deref())?;
        tape.concat_cols(&[hf, hb])
    }
}

/// One convolution layer with activation.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
    pub activation: Activation,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, geom: ConvGeometry, activation: Activation) -> Result<Self> {
        geom.validate()?;
        Ok(Self {
            kernel: pb.uniform(
                "kernel",
                geom.out_channels,
                geom.patch_len(),
                1.0 / (geom.patch_len() as f64).sqrt(),
            )?,
            bias: pb.zeros("bias", 1, geom.out_channels)?,
            geom,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let k = tape.param(self.kernel);
        let b = tape.param(self.bias);
        let y = tape.conv2d(x, k, b, self.geom)?;
        Ok(self.activation.apply(tape, y))
    }
}

/// Additive (Bahdanau) attention: `score_k = vᵀ tanh(W_q q + W_k k_k)`.
#[derive(Debug, Clone)]
pub struct AdditiveAttention {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub v: ParamId,
    pub query_dim: usize,
    pub key_dim: usize,
}

impl AdditiveAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, query_dim: usize, key_dim: usize, attn_dim: usize) -> Result<Self> {
        Ok(Self {
            w_query: pb.fan_in("w_query", query_dim, attn_dim)?,
            w_key: pb.fan_in("w_key", key_dim, attn_dim)?,
            v: pb.fan_in("v", attn_dim, 1)?,
            query_dim,
            key_dim,
        })
    }

    /// Returns `(context, weights)`; `mask` is `[B × K]` with 1 for keys that
    /// exist. Rows with no key get zero weights and a zero context.
    pub fn forward(&self, tape: &mut Tape<'_>, query: Var, keys: &[Var], mask: &Matrix) -> Result<(Var, Var)> {
        if keys.is_empty() {
            return Err(crate::error::Error::InvalidInput("attention over zero keys".into()));
        }
        let wq = tape.param(self.w_query);
        let wk = tape.param(self.w_key);
        let v = tape.param(self.v);
        let q = tape.matmul(query, wq)?;
        let mut scores = Vec::with_capacity(keys.len());
        for &k in keys {
            let kp = tape.matmul(k, wk)?;
            let s = tape.add(q, kp)?;
            let s = tape.tanh(s);
            scores.push(tape.matmul(s, v)?);
        }
        let scores = tape.concat_cols(&scores)?;
        let weights = tape.masked_softmax(scores, mask)?;
        let mut context = None;
        for (j, &k) in keys.iter().enumerate() {
            let w = tape.slice_cols(weights, j, 1)?;
            let term = tape.mul_col(k, w)?;
            context = Some(match context {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok((context.expect("at least one key"), weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn builder_store() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(3))
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn dense_zero_and_identity() {
        let (mut store, mut rng) = builder_store();
        let d = Dense::new(
            &mut ParamBuilder::new(&mut store, &mut rng, "theta/d"),
            3,
            3,
            Activation::Identity,
        )
        .unwrap();
        let x = array![[0.4, -2.0, 7.5]];
        zero_all(&mut store);
        {
            let mut t = Tape::new(&store);
            let xv = t.constant(x.clone());
            let y = d.forward(&mut t, xv).unwrap();
            assert!(t.value(y).iter().all(|v| *v == 0.0));
        }
        *store.value_mut(d.w) = Matrix::eye(3);
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone());
        let y = d.forward(&mut t, xv).unwrap();
        assert_eq!(t.value(y), &x);
        assert_eq!(d.eval(&store, &x).unwrap(), x);
    }

    #[test]
    fn lstm_zero_weights_closed_form() {
        let (mut store, mut rng) = builder_store();
        let l = Lstm::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/l"), 2, 3).unwrap();
        zero_all(&mut store);
        let mut t = Tape::new(&store);
        let x = t.constant(array![[1.0, -1.0]]);
        let h = t.constant(array![[0.3, 0.1, -0.2]]);
        let c0 = array![[0.8, -1.2, 2.0]];
        let c = t.constant(c0.clone());
        let (h1, c1) = l.step(&mut t, x, h, c).unwrap();
        for j in 0..3 {
            let expect_c = 0.5 * c0[[0, j]];
            assert!((t.value(c1)[[0, j]] - expect_c).abs() < 1e-15);
            assert!((t.value(h1)[[0, j]] - 0.5 * expect_c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_forget_bias_initialized_to_one() {
        let (mut store, mut rng) = builder_store();
        let l = Lstm::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/l"), 2, 4).unwrap();
        let b = store.value(l.b);
        assert!(b.slice(ndarray::s![.., 4..8]).iter().all(|v| *v == 1.0));
        assert!(b.slice(ndarray::s![.., 0..4]).iter().all(|v| *v == 0.0));
        let w = store.value(l.w_hh).slice(ndarray::s![.., 0..4]).to_owned();
        let wtw = w.t().dot(&w);
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((wtw[[i, j]] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lstm_single_step_run_matches_step() {
        let (mut store, mut rng) = builder_store();
        let l = Lstm::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/l"), 2, 3).unwrap();
        let mut t = Tape::new(&store);
        let x = t.constant(array![[0.2, 0.9]]);
        let (h_run, _) = l.run(&mut t, &[x], None).unwrap();
        let z = t.constant(Matrix::zeros((1, 3)));
        let (h_step, _) = l.step(&mut t, x, z, z).unwrap();
        assert_eq!(t.value(h_run), t.value(h_step));
    }

    #[test]
    fn masked_front_padding_equals_unpadded_run() {
        let (mut store, mut rng) = builder_store();
        let l = Lstm::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/l"), 2, 3).unwrap();
        let seq = [array![[0.1, 0.2]], array![[-0.4, 0.5]]];
        let mut t = Tape::new(&store);
        let xs: Vec<Var> = seq.iter().map(|m| t.constant(m.clone())).collect();
        let (h_plain, _) = l.run(&mut t, &xs, None).unwrap();
        let pad = t.constant(array![[9.0, -9.0]]);
        let m0 = t.constant(array![[0.0]]);
        let m1 = t.constant(array![[1.0]]);
        let (h_pad, _) = l.run(&mut t, &[pad, xs[0], xs[1]], Some(&[m0, m1, m1])).unwrap();
        let diff = (t.value(h_plain) - t.value(h_pad)).mapv(f64::abs).sum();
        assert!(diff < 1e-15);
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let (mut store, mut rng) = builder_store();
        let g = Gru::new(&mut ParamBuilder::new(&mut store, &mut rng, "psi/g"), 2, 3).unwrap();
        zero_all(&mut store);
        let mut t = Tape::new(&store);
        let x = t.constant(array![[1.0, 2.0]]);
        let h = t.constant(array![[0.6, -0.4, 1.0]]);
        let h1 = g.step(&mut t, x, h).unwrap();
        assert_eq!(t.value(h1), &array![[0.3, -0.2, 0.5]]);
        let h0 = t.constant(Matrix::zeros((1, 3)));
        let h2 = g.step(&mut t, x, h0).unwrap();
        assert!(t.value(h2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gru_eval_matches_tape() {
        let (mut store, mut rng) = builder_store();
        let g = Gru::new(&mut ParamBuilder::new(&mut store, &mut rng, "psi/g"), 3, 4).unwrap();
        let x = array![[0.5, -0.1, 0.3], [1.0, 2.0, -1.0]];
        let h = array![[0.1, 0.2, -0.3, 0.0], [0.9, -0.9, 0.5, 0.2]];
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone());
        let hv = t.constant(h.clone());
        let out = g.step(&mut t, xv, hv).unwrap();
        let eval = g.eval_step(&store, &x, &h).unwrap();
        assert!((t.value(out) - &eval).mapv(f64::abs).sum() < 1e-14);
    }

    #[test]
    fn bilstm_palindrome_with_shared_weights_gives_equal_halves() {
        let (mut store, mut rng) = builder_store();
        let b = BiLstm::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/b"), 2, 3).unwrap();
        for (src, dst) in [
            (b.forward.w_ih, b.backward.w_ih),
            (b.forward.w_hh, b.backward.w_hh),
            (b.forward.b, b.backward.b),
        ] {
            let v = store.value(src).clone();
            *store.value_mut(dst) = v;
        }
        let mut t = Tape::new(&store);
        let a = t.constant(array![[0.3, -0.5]]);
        let m = t.constant(array![[1.2, 0.4]]);
        let out = b.encode(&mut t, &[a, m, a], None).unwrap();
        let v = t.value(out);
        for j in 0..3 {
            assert!((v[[0, j]] - v[[0, 3 + j]]).abs() < 1e-15);
        }
        assert!(b.encode(&mut t, &[], None).is_err());
    }

    #[test]
    fn attention_single_and_identical_keys() {
        let (mut store, mut rng) = builder_store();
        let a = AdditiveAttention::new(&mut ParamBuilder::new(&mut store, &mut rng, "theta/a"), 3, 2, 4).unwrap();
        let mut t = Tape::new(&store);
        let q = t.constant(array![[0.1, 0.2, 0.3]]);
        let k = t.constant(array![[1.5, -0.5]]);
        let (ctx, w) = a.forward(&mut t, q, &[k], &array![[1.0]]).unwrap();
        assert_eq!(t.value(ctx), &array![[1.5, -0.5]]);
        assert_eq!(t.value(w)[[0, 0]], 1.0);
        let (_, w3) = a.forward(&mut t, q, &[k, k, k], &array![[1.0, 1.0, 1.0]]).unwrap();
        for j in 0..3 {
            assert!((t.value(w3)[[0, j]] - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
