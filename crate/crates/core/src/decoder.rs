//! GRU decoder emitting per-step bivariate velocity mixtures, plus the
//! mixture algebra (density, sampling, mode search) and integration.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::standardize::ClassStats;
use crate::error::{Error, Result};
use crate::nn::{logsumexp, Activation, Dense, Gru, Matrix, ParamBuilder, ParamStore, Tape, Var};
use crate::scene::AgentClass;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Gradient-ascent iterations per candidate in [`Gmm2D::mode_velocity`].
pub const MODE_ASCENT_STEPS: usize = 10;

/// Bivariate Gaussian mixture over velocity (m/s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm2D {
    pub log_weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub sigmas: Vec<[f64; 2]>,
    pub rhos: Vec<f64>,
}

impl Gmm2D {
    pub fn new(logits: &[f64], means: Vec<[f64; 2]>, sigmas: Vec<[f64; 2]>, rhos: Vec<f64>) -> Result<Self> {
        let k = logits.len();
        if k == 0 || means.len() != k || sigmas.len() != k || rhos.len() != k {
            return Err(Error::InvalidInput("mixture parameter lengths disagree".into()));
        }
        if sigmas.iter().flatten().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(
                "mixture standard deviations must be positive".into(),
            ));
        }
        if rhos.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(Error::InvalidInput("mixture correlations must lie in (-1, 1)".into()));
        }
        if means.iter().flatten().chain(logits).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite mixture parameter".into()));
        }
        let lse = logsumexp(logits.iter().copied());
        Ok(Self {
            log_weights: logits.iter().map(|l| l - lse).collect(),
            means,
            sigmas,
            rhos,
        })
    }

    pub fn components(&self) -> usize {
        self.log_weights.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn component_log_prob(&self, k: usize, v: [f64; 2]) -> f64 {
        let [sx, sy] = self.sigmas[k];
        let r = self.rhos[k];
        let dx = (v[0] - self.means[k][0]) / sx;
        let dy = (v[1] - self.means[k][1]) / sy;
        let one_m = 1.0 - r * r;
        -LN_2PI - sx.ln() - sy.ln() - 0.5 * one_m.ln() - (dx * dx - 2.0 * r * dx * dy + dy * dy) / (2.0 * one_m)
    }

    pub fn log_prob(&self, v: [f64; 2]) -> f64 {
        logsumexp((0..self.components()).map(|k| self.log_weights[k] + self.component_log_prob(k, v)))
    }

    pub fn mean(&self) -> [f64; 2] {
        let w = self.weights();
        let mut m = [0.0; 2];
        for (wk, mu) in w.iter().zip(&self.means) {
            m[0] += wk * mu[0];
            m[1] += wk * mu[1];
        }
        m
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                k = i;
                break;
            }
        }
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let [sx, sy] = self.sigmas[k];
        let r = self.rhos[k];
        [
            self.means[k][0] + sx * z1,
            self.means[k][1] + sy * (r * z1 + (1.0 - r * r).sqrt() * z2),
        ]
    }

    /// Gradient of the log mixture density at `v`.
    pub fn grad_log_prob(&self, v: [f64; 2]) -> [f64; 2] {
        let lp = self.log_prob(v);
        let mut g = [0.0; 2];
        for k in 0..self.components() {
            let resp = (self.log_weights[k] + self.component_log_prob(k, v) - lp).exp();
            let [sx, sy] = self.sigmas[k];
            let r = self.rhos[k];
            let one_m = 1.0 - r * r;
            let dx = (v[0] - self.means[k][0]) / sx;
            let dy = (v[1] - self.means[k][1]) / sy;
            g[0] -= resp * (dx - r * dy) / (one_m * sx);
            g[1] -= resp * (dy - r * dx) / (one_m * sy);
        }
        g
    }

    fn min_eigenvalue(&self, k: usize) -> f64 {
        let [sx, sy] = self.sigmas[k];
        let (a, d, b) = (sx * sx, sy * sy, self.rhos[k] * sx * sy);
        let tr = a + d;
        let disc = ((a - d).powi(2) + 4.0 * b * b).sqrt();
        ((tr - disc) / 2.0).max(f64::MIN_POSITIVE)
    }

    /// Approximate global mode: gradient ascent from every component mean
    /// with a backtracking step, keeping the densest point visited.
    pub fn mode_velocity(&self) -> [f64; 2] {
        let mut best = self.means[0];
        let mut best_lp = self.log_prob(best);
        for k in 0..self.components() {
            let mut v = self.means[k];
            let mut lp = self.log_prob(v);
            let mut eta = 0.5 * self.min_eigenvalue(k);
            for _ in 0..MODE_ASCENT_STEPS {
                let g = self.grad_log_prob(v);
                let mut accepted = false;
                while eta > 1e-12 * self.min_eigenvalue(k) {
                    let cand = [v[0] + eta * g[0], v[1] + eta * g[1]];
                    let clp = self.log_prob(cand);
                    if clp > lp {
                        v = cand;
                        lp = clp;
                        accepted = true;
                        break;
                    }
                    eta *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            if lp > best_lp {
                best = v;
                best_lp = lp;
            }
        }
        best
    }
}

/// Per-step velocity mixtures for one future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSequence {
    pub steps: Vec<Gmm2D>,
    pub dt: f64,
    pub origin: [f64; 2],
}

/// Forward-Euler single integrator: `p_k = p_{k−1} + v_k·dt`.
pub fn integrate(velocities: &[[f64; 2]], origin: [f64; 2], dt: f64) -> Vec<[f64; 2]> {
    let mut p = origin;
    velocities
        .iter()
        .map(|v| {
            p = [p[0] + v[0] * dt, p[1] + v[1] * dt];
            p
        })
        .collect()
}

/// Maps the network's standardized velocities to m/s and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityScale {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl VelocityScale {
    pub fn from_stats(s: &ClassStats) -> Self {
        Self {
            mean: s.vel_mean(),
            std: s.vel_std(),
        }
    }

    pub fn standardize(&self, v: [f64; 2]) -> [f64; 2] {
        [(v[0] - self.mean[0]) / self.std[0], (v[1] - self.mean[1]) / self.std[1]]
    }
}

/// How the decoder picks the velocity fed back into the next step.
#[derive(Debug)]
pub enum Feedback<'a, R: Rng> {
    /// Ground-truth velocities (teacher forcing).
    Teacher,
    /// One seeded draw per row from the step's mixture.
    Sampled(&'a mut [R]),
    /// The mixture's approximate mode.
    Mode,
}

/// `psi/<class>/decoder`: initial-state projection, GRU cell and mixture head.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub init: Dense,
    pub gru: Gru,
    pub head: Dense,
    pub components: usize,
    pub latent: usize,
    pub backbone: usize,
    pub sigma_min: f64,
    pub rho_max: f64,
}

impl Decoder {
    pub fn new(root: &mut ParamBuilder<'_>, cfg: &ModelConfig, class: AgentClass) -> Result<Self> {
        let mut pb = root.scope(&format!("psi/{class}/decoder"));
        let backbone = cfg.backbone_width(class);
        let cond = backbone + cfg.latent_size;
        Ok(Self {
            init: Dense::new(&mut pb.scope("init"), cond, cfg.decoder_hidden, Activation::Tanh)?,
            gru: Gru::new(&mut pb.scope("gru"), cond + 2, cfg.decoder_hidden)?,
            head: Dense::new(
                &mut pb.scope("head"),
                cfg.decoder_hidden,
                6 * cfg.mixture_components,
                Activation::Identity,
            )?,
            components: cfg.mixture_components,
            latent: cfg.latent_size,
            backbone,
            sigma_min: cfg.sigma_min,
            rho_max: cfg.rho_max,
        })
    }

    /// Mixture for one row of head output.
    pub fn gmm_from_raw(&self, raw: &[f64], scale: &VelocityScale) -> Result<Gmm2D> {
        let k = self.components;
        if raw.len() != 6 * k {
            return Err(Error::Shape {
                op: "gmm_from_raw",
                expected: (6 * k).to_string(),
                got: raw.len().to_string(),
            });
        }
        let means = (0..k)
            .map(|j| {
                [
                    scale.mean[0] + scale.std[0] * raw[k + j],
                    scale.mean[1] + scale.std[1] * raw[2 * k + j],
                ]
            })
            .collect();
        let sigmas = (0..k)
            .map(|j| {
                [
                    self.sigma_min + scale.std[0] * raw[3 * k + j].exp(),
                    self.sigma_min + scale.std[1] * raw[4 * k + j].exp(),
                ]
            })
            .collect();
        let rhos = (0..k).map(|j| self.rho_max * raw[5 * k + j].tanh()).collect();
        Gmm2D::new(&raw[..k], means, sigmas, rhos)
    }

    /// Per-row mixture log-density `[R × 1]` of raw velocities `v` under the
    /// head output `raw` (`[R × 6K]`).
    pub fn log_prob_tape(&self, tape: &mut Tape<'_>, raw: Var, v: &Matrix, scale: &VelocityScale) -> Result<Var> {
        mixture_log_prob_tape(tape, raw, v, scale, self.components, self.sigma_min, self.rho_max)
    }

    fn condition(&self, tape: &mut Tape<'_>, e_x: Var, z: &Matrix) -> Result<Var> {
        let zc = tape.constant(z.clone());
        tape.concat_cols(&[e_x, zc])
    }

    /// Summed log-likelihood `[R × 1]` of `targets` (raw m/s, `T × [R × 2]`)
    /// given rows of `e_x` and one-hot latents `z`. `start` holds each row's
    /// current velocity.
    pub fn sequence_log_prob<R: Rng>(
        &self,
        tape: &mut Tape<'_>,
        e_x: Var,
        z: &Matrix,
        start: &Matrix,
        targets: &[Matrix],
        scale: &VelocityScale,
        mut feedback: Feedback<'_, R>,
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::InvalidInput("empty decoding horizon".into()));
        }
        let cond = self.condition(tape, e_x, z)?;
        let mut h = self.init.forward(tape, cond)?;
        let mut prev = start.clone();
        let mut total: Option<Var> = None;
        for target in targets {
            let pv = tape.constant(standardize_rows(&prev, scale));
            let x = tape.concat_cols(&[cond, pv])?;
            h = self.gru.step(tape, x, h)?;
            let raw = self.head.forward(tape, h)?;
            let lp = self.log_prob_tape(tape, raw, target, scale)?;
            total = Some(match total {
                None => lp,
                Some(t) => tape.add(t, lp)?,
            });
            prev = match &mut feedback {
                Feedback::Teacher => target.clone(),
                Feedback::Sampled(rngs) => {
                    let raw_v = tape.value(raw);
                    let mut next = Matrix::zeros(target.raw_dim());
                    for (r, rng) in rngs.iter_mut().enumerate().take(target.nrows()) {
                        let g = self.gmm_from_raw(raw_v.row(r).as_slice().expect("row-major"), scale)?;
                        let s = g.sample(rng);
                        next[[r, 0]] = s[0];
                        next[[r, 1]] = s[1];
                    }
                    next
                }
                Feedback::Mode => {
                    let raw_v = tape.value(raw);
                    let mut next = Matrix::zeros(target.raw_dim());
                    for r in 0..target.nrows() {
                        let g = self.gmm_from_raw(raw_v.row(r).as_slice().expect("row-major"), scale)?;
                        let m = g.mode_velocity();
                        next[[r, 0]] = m[0];
                        next[[r, 1]] = m[1];
                    }
                    next
                }
            };
        }
        Ok(total.expect("nonempty horizon"))
    }

    /// Tape-free rollout. Rows share nothing but parameters; each row `r`
    /// conditions on `e_x[r]`, latent `z[r]`, and draws from `rngs[r]`.
    pub fn rollout<R: Rng>(
        &self,
        store: &ParamStore,
        e_x: &Matrix,
        z: &[usize],
        horizon: usize,
        start: [f64; 2],
        scale: &VelocityScale,
        mut feedback: Feedback<'_, R>,
    ) -> Result<Vec<Rollout>> {
        let rows = e_x.nrows();
        if z.len() != rows {
            return Err(Error::InvalidInput("one latent per row required".into()));
        }
        if horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        if matches!(feedback, Feedback::Teacher) {
            return Err(Error::InvalidInput("teacher forcing needs ground truth".into()));
        }
        let mut cond = Matrix::zeros((rows, e_x.ncols() + self.latent));
        cond.slice_mut(ndarray::s![.., ..e_x.ncols()]).assign(e_x);
        for (r, &zr) in z.iter().enumerate() {
            cond[[r, e_x.ncols() + zr]] = 1.0;
        }
        let mut h = self.init.eval(store, &cond)?;
        let mut prev = vec![start; rows];
        let mut out: Vec<Rollout> = (0..rows)
            .map(|_| Rollout {
                gmms: Vec::with_capacity(horizon),
                velocities: Vec::with_capacity(horizon),
            })
            .collect();
        let mut x = Matrix::zeros((rows, cond.ncols() + 2));
        x.slice_mut(ndarray::s![.., ..cond.ncols()]).assign(&cond);
        for _ in 0..horizon {
            for r in 0..rows {
                let s = scale.standardize(prev[r]);
                x[[r, cond.ncols()]] = s[0];
                x[[r, cond.ncols() + 1]] = s[1];
            }
            h = self.gru.eval_step(store, &x, &h)?;
            let raw = self.head.eval(store, &h)?;
            for r in 0..rows {
                let g = self.gmm_from_raw(raw.row(r).as_slice().expect("row-major"), scale)?;
                let v = match &mut feedback {
                    Feedback::Sampled(rngs) => g.sample(&mut rngs[r]),
                    Feedback::Mode => g.mode_velocity(),
                    Feedback::Teacher => unreachable!("rejected above"),
                };
                prev[r] = v;
                out[r].gmms.push(g);
                out[r].velocities.push(v);
            }
        }
        Ok(out)
    }
}

/// One decoded future: the mixture at each step and the velocity fed back.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub gmms: Vec<Gmm2D>,
    pub velocities: Vec<[f64; 2]>,
}

/// Per-row mixture log-density `[R × 1]` of raw velocities `v` under the
/// head output `raw` (`[R × 6K]`, column blocks: logits, μx, μy, log σx,
/// log σy, ρ pre-activation).
pub fn mixture_log_prob_tape(
    tape: &mut Tape<'_>,
    raw: Var,
    v: &Matrix,
    scale: &VelocityScale,
    k: usize,
    sigma_min: f64,
    rho_max: f64,
) -> Result<Var> {
    let (rows, _) = tape.shape(raw);
    let logits = tape.slice_cols(raw, 0, k)?;
    let log_w = tape.log_softmax(logits);
    let mut z = Vec::with_capacity(2);
    let mut log_sigma = Vec::with_capacity(2);
    for d in 0..2 {
        let mu_raw = tape.slice_cols(raw, (1 + d) * k, k)?;
        let s_raw = tape.slice_cols(raw, (3 + d) * k, k)?;
        let es = tape.exp(s_raw);
        let sigma = tape.scale(es, scale.std[d]);
        let sigma = tape.offset(sigma, sigma_min);
        // (v − μ)/σ with μ = mean + std·raw
        let target = Matrix::from_shape_fn((rows, k), |(r, _)| (v[[r, d]] - scale.mean[d]) / scale.std[d]);
        let target = tape.constant(target);
        let diff = tape.sub(target, mu_raw)?;
        let diff = tape.scale(diff, scale.std[d]);
        z.push(tape.div(diff, sigma)?);
        log_sigma.push(tape.ln_floor(sigma, f64::MIN_POSITIVE));
    }
    let r_raw = tape.slice_cols(raw, 5 * k, k)?;
    let rho = tape.tanh(r_raw);
    let rho = tape.scale(rho, rho_max);
    let rho2 = tape.square(rho);
    let one_m = tape.scale(rho2, -1.0);
    let one_m = tape.offset(one_m, 1.0);
    let zx2 = tape.square(z[0]);
    let zy2 = tape.square(z[1]);
    let zxy = tape.mul(z[0], z[1])?;
    let cross = tape.mul(rho, zxy)?;
    let cross = tape.scale(cross, -2.0);
    let quad = tape.add(zx2, zy2)?;
    let quad = tape.add(quad, cross)?;
    let quad = tape.div(quad, one_m)?;
    let quad = tape.scale(quad, -0.5);
    let log_one_m = tape.ln_floor(one_m, f64::MIN_POSITIVE);
    let log_one_m = tape.scale(log_one_m, -0.5);
    let norm = tape.add(log_sigma[0], log_sigma[1])?;
    let norm = tape.scale(norm, -1.0);
    let norm = tape.offset(norm, -LN_2PI);
    let comp = tape.add(norm, log_one_m)?;
    let comp = tape.add(comp, quad)?;
    let joint = tape.add(comp, log_w)?;
    Ok(tape.logsumexp(joint))
}

fn standardize_rows(v: &Matrix, scale: &VelocityScale) -> Matrix {
    Matrix::from_shape_fn(v.raw_dim(), |(r, d)| (v[[r, d]] - scale.mean[d]) / scale.std[d])
}
