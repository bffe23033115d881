//! Metric (Pearson) and non-metric (cross-modal ordinal) fusion objectives,
//! with analytic gradients w.r.t. projected distances.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::MergedDistanceMatrix;
use crate::mfm::MfmConfig;

/// Entries of a square matrix that enter a Pearson term.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// Every off-diagonal entry.
    OffDiagonal,
    /// Every entry of a rectangular block.
    Block {
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonTerm {
    /// `-r`, or 0 when either side has no variance.
    pub loss: f64,
    /// Set when the correlation was undefined and the loss fell back to 0.
    pub degenerate: bool,
}

/// Negative Pearson correlation between `xs` and `ys`. If `grad` is given,
/// `weight * d(-r)/d ys[e]` is added to `grad[e]`.
pub fn pearson_term(xs: &[f64], ys: &[f64], grad: Option<(&mut [f64], f64)>) -> PearsonTerm {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (a, b) = (x - mx, y - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if xs.len() < 2 || sxx <= f64::MIN_POSITIVE || syy <= f64::MIN_POSITIVE {
        return PearsonTerm {
            loss: 0.0,
            degenerate: true,
        };
    }
    let (nx, ny) = (sxx.sqrt(), syy.sqrt());
    let r = sxy / (nx * ny);
    if let Some((g, w)) = grad {
        // d r / d y_e = a_e / (|a||b|) - r * b_e / |b|^2
        for (e, (x, y)) in xs.iter().zip(ys).enumerate() {
            let (a, b) = (x - mx, y - my);
            g[e] -= w * (a / (nx * ny) - r * b / syy);
        }
    }
    PearsonTerm {
        loss: -r,
        degenerate: false,
    }
}

/// Negative Pearson correlation of `m` and `p` over the masked entries.
pub fn pearson_loss(m: &DMatrix<f64>, p: &DMatrix<f64>, mask: &Mask) -> Result<PearsonTerm> {
    if m.shape() != p.shape() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch {:?} vs {:?}",
            m.shape(),
            p.shape()
        )));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    match mask {
        Mask::OffDiagonal => {
            for b in 0..m.ncols() {
                for a in 0..m.nrows() {
                    if a != b {
                        xs.push(m[(a, b)]);
                        ys.push(p[(a, b)]);
                    }
                }
            }
        }
        Mask::Block { rows, cols } => {
            if rows.end > m.nrows() || cols.end > m.ncols() {
                return Err(Error::InvalidArgument("mask exceeds matrix".into()));
            }
            for b in cols.clone() {
                for a in rows.clone() {
                    xs.push(m[(a, b)]);
                    ys.push(p[(a, b)]);
                }
            }
        }
    }
    Ok(pearson_term(&xs, &ys, None))
}

/// Image pairs `(j, k)` with `j < k` visited for each text row.
#[derive(Debug, Clone)]
pub enum OrdinalPairs {
    All,
    /// Per text row, sampled pairs and the factor that rescales their sum to
    /// an estimate of the full sum.
    Sampled { rows: Vec<Vec<(usize, usize)>>, scale: f64 },
}

impl OrdinalPairs {
    /// `budget` uniformly sampled pairs per text row.
    pub fn sample(n_text: usize, n_image: usize, budget: usize, rng: &mut impl Rng) -> Self {
        if n_image < 2 {
            return OrdinalPairs::All;
        }
        let total = n_image * (n_image - 1) / 2;
        let rows = (0..n_text)
            .map(|_| {
                (0..budget)
                    .map(|_| {
                        let j = rng.random_range(0..n_image);
                        let mut k = rng.random_range(0..n_image - 1);
                        if k >= j {
                            k += 1;
                        }
                        (j.min(k), j.max(k))
                    })
                    .collect()
            })
            .collect();
        OrdinalPairs::Sampled {
            rows,
            scale: total as f64 / budget as f64,
        }
    }
}

/// Order-violation penalty for one pair: `max(0, -(dti * dp))`.
#[inline]
fn violation(dti: f64, dp: f64) -> f64 {
    let x = dti * dp;
    if x < 0.0 {
        -x
    } else {
        0.0
    }
}

/// Cross-modal rank-order penalty: for every text row `i` and image pair
/// `j < k`, penalize `(TI[i,j] - TI[i,k]) * (Pti[i,j] - Pti[i,k]) < 0`, then divide
/// by the Frobenius norm of `Pti`. Zero iff every row's order is kept.
pub fn ordinal_loss(ti: &DMatrix<f64>, pti: &DMatrix<f64>) -> Result<f64> {
    ordinal_term(ti, pti, &OrdinalPairs::All, None)
}

/// As [`ordinal_loss`] with explicit pair selection; optionally accumulates
/// `weight * dL2/dPti` into `grad` (same shape as `pti`).
pub fn ordinal_term(
    ti: &DMatrix<f64>,
    pti: &DMatrix<f64>,
    pairs: &OrdinalPairs,
    grad: Option<(&mut DMatrix<f64>, f64)>,
) -> Result<f64> {
    if ti.shape() != pti.shape() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch {:?} vs {:?}",
            ti.shape(),
            pti.shape()
        )));
    }
    let norm = pti.norm();
    if norm <= f64::MIN_POSITIVE {
        return Err(Error::ZeroProjectedNorm);
    }
    let (n_text, n_image) = ti.shape();
    let mut numer = 0.0;
    let mut dnum = grad.as_ref().map(|_| DMatrix::<f64>::zeros(n_text, n_image));

    let mut visit = |i: usize, j: usize, k: usize, scale: f64| {
        let dti = ti[(i, j)] - ti[(i, k)];
        let dp = pti[(i, j)] - pti[(i, k)];
        let v = violation(dti, dp);
        if v > 0.0 {
            numer += scale * v;
            if let Some(d) = dnum.as_mut() {
                // d(-dti*dp)/dPti[i,j] = -dti, and +dti for Pti[i,k]
                d[(i, j)] -= scale * dti;
                d[(i, k)] += scale * dti;
            }
        }
    };
    match pairs {
        OrdinalPairs::All => {
            for i in 0..n_text {
                for j in 0..n_image {
                    for k in j + 1..n_image {
                        visit(i, j, k, 1.0);
                    }
                }
            }
        }
        OrdinalPairs::Sampled { rows, scale } => {
            for (i, row) in rows.iter().enumerate().take(n_text) {
                for &(j, k) in row {
                    visit(i, j, k, *scale);
                }
            }
        }
    }
    let loss = numer / norm;
    if let (Some((g, w)), Some(dn)) = (grad, dnum) {
        // d(N/F) = dN/F - (N/F^2) * P/F
        let coef = numer / (norm * norm * norm);
        for (gv, (dv, pv)) in g.iter_mut().zip(dn.iter().zip(pti.iter())) {
            *gv += w * (dv / norm - coef * pv);
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// `w1 * l_m + w2 * l_it + alpha * l2`
    pub total: f64,
    /// Pearson term over every off-diagonal entry.
    pub l_m: f64,
    /// Pearson term over the cross-modal block.
    pub l_it: f64,
    /// Ordinal term.
    pub l2: f64,
    /// A Pearson term hit zero variance and was set to 0.
    pub degenerate: bool,
}

/// Full loss of a projection given the projected distance matrix `p` in the
/// merged matrix's row order.
pub fn total_loss(m: &MergedDistanceMatrix, p: &DMatrix<f64>, config: &MfmConfig) -> Result<LossParts> {
    loss_and_grad(m, p, config, &OrdinalPairs::All, false).map(|(parts, _)| parts)
}

/// Loss parts plus (optionally) the symmetric gradient `dL/dP` in merged order.
/// Only the upper triangle of the gradient is filled.
pub(crate) fn loss_and_grad(
    m: &MergedDistanceMatrix,
    p: &DMatrix<f64>,
    config: &MfmConfig,
    pairs: &OrdinalPairs,
    want_grad: bool,
) -> Result<(LossParts, Option<DMatrix<f64>>)> {
    let n = m.len();
    if p.shape() != (n, n) {
        return Err(Error::InvalidArgument(format!(
            "projected matrix is {:?}, expected {n}x{n}",
            p.shape()
        )));
    }
    let ni = m.n_image;
    let nt = m.n_text;

    // Upper-triangle pairs; Pearson over both triangles of a symmetric matrix
    // equals Pearson over one.
    let npairs = n * (n - 1) / 2;
    let mut xs = Vec::with_capacity(npairs);
    let mut ys = Vec::with_capacity(npairs);
    for b in 1..n {
        for a in 0..b {
            xs.push(m.get(a, b));
            ys.push(p[(a, b)]);
        }
    }
    let mut g_full = want_grad.then(|| vec![0.0; npairs]);
    let lm = pearson_term(&xs, &ys, g_full.as_deref_mut().map(|g| (g, config.w1)));

    // Cross block, image-major: entry (a, t) is pair (a, ni + t).
    let mut xc = Vec::with_capacity(ni * nt);
    let mut yc = Vec::with_capacity(ni * nt);
    for t in 0..nt {
        for a in 0..ni {
            xc.push(m.it[(a, t)]);
            yc.push(p[(a, ni + t)]);
        }
    }
    let mut g_cross = want_grad.then(|| vec![0.0; ni * nt]);
    let lit = pearson_term(&xc, &yc, g_cross.as_deref_mut().map(|g| (g, config.w2)));

    let ti = m.ti();
    let pti = DMatrix::from_fn(nt, ni, |t, a| p[(a, ni + t)]);
    let mut g_ord = want_grad.then(|| DMatrix::<f64>::zeros(nt, ni));
    let l2 = ordinal_term(&ti, &pti, pairs, g_ord.as_mut().map(|g| (g, config.alpha)))?;

    let parts = LossParts {
        total: config.w1 * lm.loss + config.w2 * lit.loss + config.alpha * l2,
        l_m: lm.loss,
        l_it: lit.loss,
        l2,
        degenerate: lm.degenerate || lit.degenerate,
    };

    let grad = want_grad.then(|| {
        let mut g = DMatrix::<f64>::zeros(n, n);
        let gf = g_full.unwrap();
        let mut e = 0;
        for b in 1..n {
            for a in 0..b {
                g[(a, b)] += gf[e];
                e += 1;
            }
        }
        let gc = g_cross.unwrap();
        let go = g_ord.unwrap();
        for t in 0..nt {
            for a in 0..ni {
                g[(a, ni + t)] += gc[t * ni + a] + go[(t, a)];
            }
        }
        g
    });
    Ok((parts, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(n: usize, f: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |a, b| match a.cmp(&b) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => f(a, b),
            std::cmp::Ordering::Greater => f(b, a),
        })
    }

    #[test]
    fn pearson_perfect_and_anti_correlation() {
        let m = sym(4, |a, b| (a * 3 + b) as f64 * 0.7 + 0.1);
        let p = m.map(|v| 2.0 * v + 3.0);
        let mut p_masked = p.clone();
        p_masked.fill_diagonal(0.0);
        let r = pearson_loss(&m, &p_masked, &Mask::OffDiagonal).unwrap();
        assert!((r.loss + 1.0).abs() < 1e-12);
        let r = pearson_loss(&m, &(-&m), &Mask::OffDiagonal).unwrap();
        assert!((r.loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_four_entry_mask() {
        // (1,2,3,4) vs (1,3,2,4): sum dxdy = 4, sum dx^2 = sum dy^2 = 5, r = 0.8.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 4.0]);
        let mask = Mask::Block {
            rows: 0..2,
            cols: 0..2,
        };
        let r = pearson_loss(&m, &p, &mask).unwrap();
        assert!((r.loss + 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_degenerate_variance_is_zero_with_flag() {
        let m = sym(3, |a, b| (a + b) as f64);
        let p = sym(3, |_, _| 1.0);
        let r = pearson_loss(&m, &p, &Mask::OffDiagonal).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn ordinal_single_swapped_pair() {
        let ti = DMatrix::from_row_slice(1, 2, &[0.2, 0.4]);
        let pti = DMatrix::from_row_slice(1, 2, &[0.4, 0.2]);
        // One pair: (0.2-0.4)*(0.4-0.2) = -0.04 -> penalty 0.04; norm sqrt(0.2).
        let l = ordinal_loss(&ti, &pti).unwrap();
        assert!((l - 0.04 / 0.2f64.sqrt()).abs() < 1e-15);
        assert!((l - 0.08944).abs() < 1e-5);
    }

    #[test]
    fn ordinal_zero_when_orders_kept_or_no_pairs() {
        let ti = DMatrix::from_row_slice(2, 3, &[0.1, 0.5, 0.3, 0.9, 0.2, 0.4]);
        let pti = ti.map(|v| v * v * 4.0 + 1.0);
        assert_eq!(ordinal_loss(&ti, &pti).unwrap(), 0.0);
        let one = DMatrix::from_row_slice(2, 1, &[0.3, 0.7]);
        assert_eq!(ordinal_loss(&one, &one).unwrap(), 0.0);
        let zero = DMatrix::zeros(2, 1);
        assert_eq!(ordinal_loss(&one, &zero).unwrap_err().kind(), "ZeroProjectedNorm");
    }

    #[test]
    fn sampled_pairs_with_full_budget_estimate_is_unbiased_in_scale() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        match OrdinalPairs::sample(2, 10, 64, &mut rng) {
            OrdinalPairs::Sampled { rows, scale } => {
                assert_eq!(rows.len(), 2);
                assert!(rows.iter().all(|r| r.len() == 64 && r.iter().all(|&(j, k)| j < k && k < 10)));
                assert!((scale - 45.0 / 64.0).abs() < 1e-15);
            }
            OrdinalPairs::All => panic!("expected sampling"),
        }
    }
}
