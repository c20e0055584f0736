//! Meta-space losses with hand-derived gradients. Embeddings are rows of
//! unit vectors; every loss returns its value and the gradient with respect
//! to each input.

use crate::error::{Error, Result};
use crate::numerics::{neg_log_sigmoid, sigmoid};

/// Tolerance for the unit-norm precondition.
pub const UNIT_TOL: f64 = 1e-6;

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dotp(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidInput(format!("{what} has norm {n}, expected a unit vector")));
    }
    Ok(())
}

/// Mean squared error and its gradient with respect to the predictions.
pub fn loss_perf(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("loss_perf on empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::shape("loss_perf", target.len(), pred.len()));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankGrad {
    pub loss: f64,
    pub d_dataset: Vec<f64>,
    pub d_models: Vec<Vec<f64>>,
}

/// `(1/|P|) Σ −log σ(β (d·e_j − d·e_k))` over pairs `(j, k)` where model `j`
/// outperforms model `k`. An empty pair list costs nothing.
pub fn loss_rank(d: &[f64], models: &[Vec<f64>], pairs: &[(usize, usize)], beta: f64) -> Result<RankGrad> {
    check_unit(d, "dataset embedding")?;
    for (i, m) in models.iter().enumerate() {
        if m.len() != d.len() {
            return Err(Error::shape("loss_rank", d.len(), m.len()));
        }
        check_unit(m, &format!("model embedding {i}"))?;
    }
    let mut out = RankGrad {
        loss: 0.0,
        d_dataset: vec![0.0; d.len()],
        d_models: vec![vec![0.0; d.len()]; models.len()],
    };
    if pairs.is_empty() {
        return Ok(out);
    }
    let inv = 1.0 / pairs.len() as f64;
    for &(j, k) in pairs {
        if j >= models.len() || k >= models.len() {
            return Err(Error::InvalidInput(format!("rank pair ({j}, {k}) out of range")));
        }
        let g = beta * (dotp(d, &models[j]) - dotp(d, &models[k]));
        out.loss += neg_log_sigmoid(g) * inv;
        // d/dg −log σ(g) = −σ(−g)
        let c = -sigmoid(-g) * beta * inv;
        for t in 0..d.len() {
            out.d_models[j][t] += c * d[t];
            out.d_models[k][t] -= c * d[t];
            out.d_dataset[t] += c * (models[j][t] - models[k][t]);
        }
    }
    Ok(out)
}

/// `(1/|P|) Σ_{i≠j} exp(−FID_ij/σ) ‖e_i − e_j‖²` over ordered pairs.
pub fn loss_fid(embs: &[Vec<f64>], fid: &[Vec<f64>], sigma: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("FID bandwidth must be positive, got {sigma}")));
    }
    let n = embs.len();
    if fid.len() != n || fid.iter().any(|r| r.len() != n) {
        return Err(Error::shape("loss_fid", format!("{n}x{n} FID matrix"), format!("{} rows", fid.len())));
    }
    let dim = embs.first().map_or(0, |e| e.len());
    let mut grads = vec![vec![0.0; dim]; n];
    if n < 2 {
        return Ok((0.0, grads));
    }
    let inv = 1.0 / (n * (n - 1)) as f64;
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = (-fid[i][j] / sigma).exp();
            if w == 0.0 {
                continue;
            }
            let mut d2 = 0.0;
            for t in 0..dim {
                let diff = embs[i][t] - embs[j][t];
                d2 += diff * diff;
                grads[i][t] += 2.0 * w * diff * inv;
                grads[j][t] -= 2.0 * w * diff * inv;
            }
            loss += w * d2 * inv;
        }
    }
    Ok((loss, grads))
}

/// `−log [Σ_{p∈pos} exp(d·e_p/τ) / Σ_m exp(d·e_m/τ)]`.
pub fn loss_contrastive(d: &[f64], models: &[Vec<f64>], positives: &[usize], temperature: f64) -> Result<RankGrad> {
    if positives.is_empty() {
        return Err(Error::InvalidInput("contrastive loss needs at least one positive".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    if positives.iter().any(|&p| p >= models.len()) {
        return Err(Error::InvalidInput("positive index out of range".into()));
    }
    let s: Vec<f64> = models.iter().map(|m| dotp(d, m) / temperature).collect();
    let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
    let z_all: f64 = e.iter().sum();
    let z_pos: f64 = positives.iter().map(|&p| e[p]).sum();
    let loss = (z_all.ln() - z_pos.ln()).max(0.0);
    let mut ds: Vec<f64> = e.iter().map(|v| v / z_all).collect();
    for &p in positives {
        ds[p] -= e[p] / z_pos;
    }
    let mut out = RankGrad {
        loss,
        d_dataset: vec![0.0; d.len()],
        d_models: vec![vec![0.0; d.len()]; models.len()],
    };
    for (m, &g) in models.iter().zip(&ds) {
        let c = g / temperature;
        for t in 0..d.len() {
            out.d_dataset[t] += c * m[t];
        }
    }
    for (dm, &g) in out.d_models.iter_mut().zip(&ds) {
        let c = g / temperature;
        for t in 0..d.len() {
            dm[t] = c * d[t];
        }
    }
    Ok(out)
}

/// Indices of the top `⌈q·n⌉` values (at least one); ties keep the lower index.
pub fn top_quantile(values: &[f64], q: f64) -> Vec<usize> {
    let k = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len().max(1));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = dotp(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn perf_examples() {
        assert_eq!(loss_perf(&[0.3, 0.6], &[0.3, 0.6]).unwrap().0, 0.0);
        assert!((loss_perf(&[0.5], &[0.7]).unwrap().0 - 0.04).abs() < 1e-12);
        assert!((loss_perf(&[0.5, 0.9], &[0.7, 0.9]).unwrap().0 - 0.02).abs() < 1e-12);
        assert!(loss_perf(&[], &[]).is_err());
    }

    #[test]
    fn rank_examples() {
        let d = vec![1.0, 0.0];
        let e = vec![0.0, 1.0];
        let r = loss_rank(&d, &[e.clone(), e], &[(0, 1)], 10.0).unwrap();
        assert!((r.loss - LN_2).abs() < 1e-12);
        // gap of 2 with β = 1: e_j = d, e_k = −d
        let r = loss_rank(&d, &[vec![1.0, 0.0], vec![-1.0, 0.0]], &[(0, 1)], 1.0).unwrap();
        assert!((r.loss - 0.1269280110429725).abs() < 1e-12);
        assert_eq!(loss_rank(&d, &[vec![0.0, 1.0]], &[], 10.0).unwrap().loss, 0.0);
        assert!(loss_rank(&[2.0, 0.0], &[], &[], 1.0).is_err());
    }

    #[test]
    fn fid_examples() {
        let same = vec![unit(&[1.0, 1.0]); 3];
        let fm = vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.0], vec![2.0, 1.0, 0.0]];
        assert_eq!(loss_fid(&same, &fm, 1.0).unwrap().0, 0.0);
        let two = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let z = vec![vec![0.0; 2]; 2];
        assert!((loss_fid(&two, &z, 1.0).unwrap().0 - 4.0).abs() < 1e-12);
        let far = vec![vec![0.0, 1e6], vec![1e6, 0.0]];
        assert!(loss_fid(&two, &far, 1.0).unwrap().0 < 1e-300);
        assert!(loss_fid(&two, &z, 0.0).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let d = unit(&[1.0, 2.0]);
        assert!(loss_contrastive(&d, &[unit(&[3.0, 1.0])], &[0], 0.1).unwrap().loss.abs() < 1e-12);
        let n = 5;
        let same = vec![unit(&[0.0, 1.0]); n];
        assert!((loss_contrastive(&d, &same, &[2], 0.1).unwrap().loss - (n as f64).ln()).abs() < 1e-12);
        let sat = loss_contrastive(&[1.0, 0.0], &[vec![1.0, 0.0], vec![-1.0, 0.0]], &[0], 0.01).unwrap();
        assert!(sat.loss < 1e-80);
        assert!(loss_contrastive(&d, &same, &[], 0.1).is_err());
    }

    #[test]
    fn quantile_positives() {
        assert_eq!(top_quantile(&[0.1, 0.9, 0.5, 0.9, 0.2], 0.2), vec![1]);
        assert_eq!(top_quantile(&[0.1, 0.9, 0.5, 0.8, 0.2, 0.3], 0.2), vec![1, 3]);
    }
}
