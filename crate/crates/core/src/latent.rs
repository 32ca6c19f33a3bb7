//! Discrete latent variable: distributions, KL divergence, the batch
//! mutual-information estimate and latent selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Tape, Var};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidInput("distribution over zero classes".into()));
        }
        if logits.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("NaN logit".into()));
        }
        let lse = crate::nn::logsumexp(logits.iter().copied());
        let probs = logits.iter().map(|l| (l - lse).exp()).collect();
        Ok(Self { logits, probs })
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("probabilities sum to {total}")));
        }
        let logits = probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
        Ok(Self { logits, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }

    /// Argmax with ties going to the lowest index.
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding slack above the last cumulative sum
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `Σ q ln(q/p)` with `0·ln 0 = 0` and `p` floored.
pub fn kl_discrete(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::Shape {
            op: "kl_discrete",
            expected: q.len().to_string(),
            got: p.len().to_string(),
        });
    }
    Ok(q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.max(PROB_FLOOR).ln()))
        .sum())
}

/// `H(mean_b p_b) − mean_b H(p_b)`, in nats.
pub fn mutual_information(batch: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = batch.first() else {
        return Err(Error::InvalidInput("mutual information of an empty batch".into()));
    };
    let k = first.len();
    if batch.iter().any(|p| p.len() != k) {
        return Err(Error::InvalidInput("distributions of different sizes".into()));
    }
    let n = batch.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| batch.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let mean_h = batch.iter().map(|p| entropy(p)).sum::<f64>() / n;
    Ok((entropy(&mean) - mean_h).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZScheme {
    Sample,
    Mode,
    Enumerate,
}

/// Latent outcomes with their probabilities.
pub fn z_select(dist: &DiscreteDistribution, scheme: ZScheme, rng: &mut impl Rng) -> Vec<(usize, f64)> {
    match scheme {
        ZScheme::Sample => {
            let z = dist.sample(rng);
            vec![(z, dist.probs[z])]
        }
        ZScheme::Mode => {
            let z = dist.mode();
            vec![(z, dist.probs[z])]
        }
        ZScheme::Enumerate => dist.probs.iter().copied().enumerate().collect(),
    }
}

pub fn one_hot(rows: &[usize], size: usize) -> Matrix {
    let mut m = Matrix::zeros((rows.len(), size));
    for (r, &z) in rows.iter().enumerate() {
        m[[r, z]] = 1.0;
    }
    m
}

/// Per-row KL `Σ_z q (log q − log p)` from log-probabilities, `[B × 1]`.
pub fn kl_tape(tape: &mut Tape<'_>, log_q: Var, log_p: Var) -> Result<Var> {
    let q = tape.exp(log_q);
    let diff = tape.sub(log_q, log_p)?;
    let prod = tape.mul(q, diff)?;
    Ok(tape.sum_cols(prod))
}

/// Batch mutual-information estimate from `[B × Z]` log-probabilities.
pub fn mutual_information_tape(tape: &mut Tape<'_>, log_p: Var) -> Result<Var> {
    let (b, _) = tape.shape(log_p);
    let p = tape.exp(log_p);
    let plogp = tape.mul(p, log_p)?;
    let row_h = tape.sum_cols(plogp);
    let neg_mean_h = tape.mean_all(row_h);
    let col_sum = tape.sum_rows(p);
    let mean = tape.scale(col_sum, 1.0 / b as f64);
    let log_mean = tape.ln_floor(mean, PROB_FLOOR);
    let mlogm = tape.mul(mean, log_mean)?;
    let neg_h_mean = tape.sum_all(mlogm);
    // H(mean) − mean H = −Σ m ln m + mean Σ p ln p
    let h_mean = tape.scale(neg_h_mean, -1.0);
    tape.add(h_mean, neg_mean_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_logits_are_uniform() {
        let d = DiscreteDistribution::from_logits(vec![0.0; 4]).unwrap();
        assert!(d.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!((d.entropy() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_form() {
        assert!((kl_discrete(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_discrete(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(kl_discrete(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn mi_closed_forms() {
        let same = vec![vec![0.2, 0.3, 0.5]; 5];
        assert!(mutual_information(&same).unwrap().abs() < 1e-15);
        let onehots: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..4).map(|j| f64::from(u8::from(j == k))).collect())
            .collect();
        assert!((mutual_information(&onehots).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(mutual_information(&[]).is_err());
    }

    #[test]
    fn mode_breaks_ties_low() {
        let d = DiscreteDistribution::from_probs(vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(d.mode(), 1);
        let tie = DiscreteDistribution::from_probs(vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(tie.mode(), 0);
    }

    #[test]
    fn one_hot_always_selected() {
        let d = DiscreteDistribution::from_probs(vec![0.0, 1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(z_select(&d, ZScheme::Sample, &mut rng)[0].0, 1);
        }
        assert_eq!(z_select(&d, ZScheme::Mode, &mut rng)[0].0, 1);
        assert_eq!(z_select(&d, ZScheme::Enumerate, &mut rng).len(), 3);
    }
}
