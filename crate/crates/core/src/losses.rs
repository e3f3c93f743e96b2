//! Scoring functions for descriptors, type predictions and parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_pull: f64,
    pub nu_push: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            lambda_pull: 1.0,
            nu_push: 1.0,
            delta1: 0.5,
            delta2: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.lambda_pull, self.nu_push, self.delta1, self.delta2];
        if all.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights and margins must be finite and nonnegative".into()));
        }
        if self.delta2 <= self.delta1 {
            return Err(Error::InvalidArgument("delta2 must exceed delta1".into()));
        }
        Ok(())
    }
}

/// Groups point indices by label, in order of first appearance.
fn groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut ids: Vec<(usize, usize)> = Vec::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match ids.iter().find(|(lab, _)| *lab == l) {
            Some(&(_, g)) => out[g].push(i),
            None => {
                ids.push((l, out.len()));
                out.push(vec![i]);
            }
        }
    }
    out
}

/// Pull/push loss of descriptor rows against ground-truth groups, with its
/// gradient with respect to every descriptor entry.
pub fn embedding_loss(d: &DMatrix<f64>, labels: &[usize], cfg: &LossConfig) -> Result<(f64, DMatrix<f64>)> {
    let (n, m) = d.shape();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let gs = groups(labels);
    let k = gs.len();
    let kf = k as f64;
    let means: Vec<DVector<f64>> = gs
        .iter()
        .map(|g| {
            let mut mu = DVector::zeros(m);
            for &i in g {
                mu += d.row(i).transpose();
            }
            mu / g.len() as f64
        })
        .collect();
    let mut grad = DMatrix::zeros(n, m);

    let mut pull = 0.0;
    for (g, mu) in gs.iter().zip(&means) {
        let size = g.len() as f64;
        let mut inner = 0.0;
        let mut active_sum = DVector::zeros(m);
        let mut dirs: Vec<Option<DVector<f64>>> = Vec::with_capacity(g.len());
        for &i in g {
            let diff = d.row(i).transpose() - mu;
            let r = diff.norm();
            if r > cfg.delta1 {
                inner += r - cfg.delta1;
                let u = diff / r;
                active_sum += &u;
                dirs.push(Some(u));
            } else {
                dirs.push(None);
            }
        }
        pull += inner / size;
        let c = cfg.lambda_pull / (kf * size);
        for (&i, u) in g.iter().zip(&dirs) {
            let mut gi = -&active_sum / size;
            if let Some(u) = u {
                gi += u;
            }
            let mut row = grad.row_mut(i);
            row += (gi * c).transpose();
        }
    }
    pull /= kf;

    let mut push = 0.0;
    if k > 1 {
        let c = cfg.nu_push / (kf * (kf - 1.0));
        for a in 0..k {
            for b in a + 1..k {
                let diff = &means[a] - &means[b];
                let dist = diff.norm();
                if dist < cfg.delta2 {
                    push += cfg.delta2 - dist;
                    if dist > 0.0 {
                        // d(−dist)/dμ_a = −diff/dist, spread over each group's members.
                        let u = diff / dist;
                        for &i in &gs[a] {
                            let mut row = grad.row_mut(i);
                            row -= (&u * (c / gs[a].len() as f64)).transpose();
                        }
                        for &i in &gs[b] {
                            let mut row = grad.row_mut(i);
                            row += (&u * (c / gs[b].len() as f64)).transpose();
                        }
                    }
                }
            }
        }
        push /= kf * (kf - 1.0);
    }
    Ok((cfg.lambda_pull * pull + cfg.nu_push * push, grad))
}

/// Mean cross-entropy of predicted type distributions against true type codes.
pub fn type_loss(pred: &[[f64; 6]], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: pred.len(),
            found: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut s = 0.0;
    for (p, &t) in pred.iter().zip(gt) {
        if t >= 6 {
            return Err(Error::InvalidArgument(format!("type code {t} out of range")));
        }
        s -= p[t].max(1e-12).ln();
    }
    Ok(s / pred.len() as f64)
}

/// Mean squared Euclidean distance between parameter vectors.
pub fn param_loss(pred: &[ParamVector], gt: &[ParamVector]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: pred.len(),
            found: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub embedding: f64,
    pub type_: f64,
    pub param: f64,
}

pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    parts.embedding + cfg.alpha * parts.type_ + cfg.beta * parts.param
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pull_is_zero_for_identical_group() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let (l, g) = embedding_loss(&d, &[4, 4, 4], &LossConfig::default()).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, DMatrix::zeros(3, 2));
    }

    #[test]
    fn push_vanishes_at_margin() {
        let d = DMatrix::from_row_slice(2, 1, &[0.0, 1.5]);
        let (l, _) = embedding_loss(&d, &[0, 1], &LossConfig::default()).unwrap();
        assert_eq!(l, 0.0);
        let d = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let (l, _) = embedding_loss(&d, &[0, 1], &LossConfig::default()).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, m) = (30, 4);
        let d = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 2.0);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let (_, g) = embedding_loss(&d, &labels, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..n {
            for c in 0..m {
                let mut dp = d.clone();
                dp[(i, c)] += h;
                let mut dm = d.clone();
                dm[(i, c)] -= h;
                let num = (embedding_loss(&dp, &labels, &cfg).unwrap().0 - embedding_loss(&dm, &labels, &cfg).unwrap().0) / (2.0 * h);
                let rel = (num - g[(i, c)]).abs() / num.abs().max(g[(i, c)].abs()).max(1e-6);
                assert!(rel < 1e-5, "({i},{c}): {num} vs {}", g[(i, c)]);
            }
        }
    }

    #[test]
    fn type_loss_examples() {
        let onehot = vec![[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]; 4];
        assert!(type_loss(&onehot, &[1, 1, 1, 1]).unwrap().abs() < 1e-15);
        let uniform = vec![[1.0 / 6.0; 6]; 3];
        assert!((type_loss(&uniform, &[0, 3, 5]).unwrap() - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn param_loss_examples() {
        let a = vec![ParamVector::default(); 5];
        assert_eq!(param_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        for p in &mut b {
            p.0[0] += 1.0;
        }
        assert_eq!(param_loss(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        let one = LossParts {
            embedding: 1.0,
            type_: 1.0,
            param: 1.0,
        };
        assert!((total_loss(&one, &cfg) - 2.1).abs() < 1e-15);
        let zero_ab = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(&one, &zero_ab), 1.0);
    }

    #[test]
    fn single_group_has_no_push() {
        let d = DMatrix::from_row_slice(2, 1, &[0.0, 3.0]);
        let (l, _) = embedding_loss(&d, &[0, 0], &LossConfig::default()).unwrap();
        // Both points are 1.5 from the mean: pull = 1.0, no push.
        assert!((l - 1.0).abs() < 1e-15);
    }
}
