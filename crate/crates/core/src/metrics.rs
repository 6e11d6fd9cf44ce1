//! Pearson and concordance correlation: evaluation metrics over plain
//! slices, and differentiable batch losses over graph values.
//!
//! All moments are population moments (divide by n).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub const NUM_CATEGORIES: usize = 7;

/// Column keys, in the fixed category order.
pub const CATEGORIES: [&str; NUM_CATEGORIES] = [
    "adoration",
    "amusement",
    "anxiety",
    "disgust",
    "empathic_pain",
    "fear",
    "surprise",
];

pub const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = [
    "Adoration",
    "Amusement",
    "Anxiety",
    "Disgust",
    "Empathic Pain",
    "Fear",
    "Surprise",
];

/// Variances below this are treated as zero by the metric functions.
const VARIANCE_FLOOR: f64 = 1e-12;

/// Denominator guard used by the loss forms.
pub const LOSS_EPS: f64 = 1e-8;

struct Moments {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Result<Moments> {
    if x.len() != y.len() {
        return Err(Error::RowCountMismatch {
            preds: x.len(),
            targets: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::BatchTooSmall {
            what: "correlation",
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    Ok(Moments {
        mean_x,
        mean_y,
        var_x: var_x / n,
        var_y: var_y / n,
        cov: cov / n,
    })
}

/// Pearson correlation, clamped to [−1, 1].
///
/// Fails with [`Error::ZeroVariance`] when either standard deviation is
/// below 1e-12.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    let m = moments(x, y)?;
    let (sx, sy) = (m.var_x.sqrt(), m.var_y.sqrt());
    if sx < VARIANCE_FLOOR || sy < VARIANCE_FLOOR {
        return Err(Error::ZeroVariance);
    }
    Ok((m.cov / (sx * sy)).clamp(-1.0, 1.0))
}

/// Lin's concordance correlation `2·cov / (σx² + σy² + (μx − μy)²)`.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    let m = moments(x, y)?;
    let shift = m.mean_x - m.mean_y;
    let denom = m.var_x + m.var_y + shift * shift;
    if denom < VARIANCE_FLOOR {
        return Err(Error::ZeroDenominator);
    }
    Ok((2.0 * m.cov / denom).clamp(-1.0, 1.0))
}

/// Per-category Pearson correlation over a whole split.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub per_category: [f64; NUM_CATEGORIES],
    /// Arithmetic mean of `per_category`; degenerate categories count as 0.
    pub mean_pcc: f64,
    pub n_samples: usize,
    /// Indices of categories where predictions or targets had zero variance.
    pub degenerate_categories: Vec<usize>,
}

impl fmt::Display for CorrelationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mean PCC {:.4} over {} samples", self.mean_pcc, self.n_samples)?;
        for (c, name) in CATEGORY_NAMES.iter().enumerate() {
            let flag = if self.degenerate_categories.contains(&c) {
                "  (degenerate)"
            } else {
                ""
            };
            writeln!(f, "  {:<14} {:>8.4}{}", name, self.per_category[c], flag)?;
        }
        Ok(())
    }
}

/// Mean PCC across the seven categories for row-aligned predictions and
/// targets.
pub fn evaluate_mean_pcc(
    preds: &[[f64; NUM_CATEGORIES]],
    targets: &[[f64; NUM_CATEGORIES]],
) -> Result<CorrelationReport> {
    if preds.len() != targets.len() {
        return Err(Error::RowCountMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    if preds.len() < 2 {
        return Err(Error::BatchTooSmall {
            what: "mean PCC evaluation",
            got: preds.len(),
        });
    }
    let mut per_category = [0.0; NUM_CATEGORIES];
    let mut degenerate_categories = Vec::new();
    for c in 0..NUM_CATEGORIES {
        let p: Vec<f64> = preds.iter().map(|r| r[c]).collect();
        let t: Vec<f64> = targets.iter().map(|r| r[c]).collect();
        match pcc(&p, &t) {
            Ok(r) => per_category[c] = r,
            Err(Error::ZeroVariance) => degenerate_categories.push(c),
            Err(e) => return Err(e),
        }
    }
    let mean_pcc = per_category.iter().sum::<f64>() / NUM_CATEGORIES as f64;
    Ok(CorrelationReport {
        per_category,
        mean_pcc,
        n_samples: preds.len(),
        degenerate_categories,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Pcc,
    Ccc,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Pcc => "pcc",
            LossKind::Ccc => "ccc",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcc" => Ok(LossKind::Pcc),
            "ccc" => Ok(LossKind::Ccc),
            other => Err(Error::ConfigInvalid(format!("unknown loss `{other}` (pcc|ccc)"))),
        }
    }
}

/// Per-column correlation between `pred` and `target` (both `[B×K]`),
/// computed over the batch axis. Returns a `[K]` node.
///
/// PCC uses `cov / (√(σp² + ε)·√(σt² + ε))`; CCC uses
/// `2·cov / (σp² + σt² + (μp − μt)² + ε)`.
pub fn batch_correlation(g: &mut Graph, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (g.shape(pred).to_vec(), g.shape(target));
    if ps.len() != 2 || ps != ts {
        return Err(Error::shape(
            "correlation loss",
            format!("pred {:?} vs target {:?}", ps, ts),
        ));
    }
    if ps[0] < 2 {
        return Err(Error::BatchTooSmall {
            what: "correlation loss",
            got: ps[0],
        });
    }
    let mean_p = g.mean(pred, &[0], true)?;
    let mean_t = g.mean(target, &[0], true)?;
    let dp = g.sub(pred, mean_p)?;
    let dt = g.sub(target, mean_t)?;
    let cross = g.mul(dp, dt)?;
    let cov = g.mean(cross, &[0], false)?;
    let dp2 = g.square(dp);
    let var_p = g.mean(dp2, &[0], false)?;
    let dt2 = g.square(dt);
    let var_t = g.mean(dt2, &[0], false)?;
    match kind {
        LossKind::Pcc => {
            let vp = g.add_scalar(var_p, LOSS_EPS);
            let sp = g.sqrt(vp);
            let vt = g.add_scalar(var_t, LOSS_EPS);
            let st = g.sqrt(vt);
            let denom = g.mul(sp, st)?;
            g.div(cov, denom)
        }
        LossKind::Ccc => {
            let shift = g.sub(mean_p, mean_t)?;
            let shift = g.reshape(shift, [ps[1]])?;
            let shift2 = g.square(shift);
            let denom = g.add(var_p, var_t)?;
            let denom = g.add(denom, shift2)?;
            let denom = g.add_scalar(denom, LOSS_EPS);
            let num = g.scale(cov, 2.0);
            g.div(num, denom)
        }
    }
}

/// `1 − mean_c corr(pred[:, c], target[:, c])`, a scalar node.
pub fn correlation_loss(g: &mut Graph, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
    let corr = batch_correlation(g, kind, pred, target)?;
    let mean = g.mean_all(corr);
    let neg = g.neg(mean);
    Ok(g.add_scalar(neg, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_linear_relations() {
        assert!((pcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn ccc_of_unit_shift() {
        let r = ccc(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(matches!(pcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::ZeroVariance)));
        assert!(matches!(ccc(&[2.0, 2.0], &[2.0, 2.0]), Err(Error::ZeroDenominator)));
        // constant but different: denominator is the mean shift
        assert_eq!(ccc(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(pcc(&[1.0], &[1.0]), Err(Error::BatchTooSmall { .. })));
        assert!(matches!(pcc(&[1.0, 2.0], &[1.0]), Err(Error::RowCountMismatch { .. })));
    }

    #[test]
    fn report_flags_degenerate_category() {
        let preds: Vec<[f64; 7]> = (0..5).map(|i| {
            let mut r = [i as f64; 7];
            r[3] = 0.5;
            r
        }).collect();
        let targets: Vec<[f64; 7]> = (0..5).map(|i| [2.0 * i as f64 + 1.0; 7]).collect();
        let rep = evaluate_mean_pcc(&preds, &targets).unwrap();
        assert_eq!(rep.degenerate_categories, vec![3]);
        assert_eq!(rep.per_category[3], 0.0);
        assert!((rep.mean_pcc - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn loss_kind_parses() {
        assert_eq!("ccc".parse::<LossKind>().unwrap(), LossKind::Ccc);
        assert!("mse".parse::<LossKind>().is_err());
    }
}
