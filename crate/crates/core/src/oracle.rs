//! Exact information quantities on finite joints, in nats.
//!
//! These are the ground truth the sample-based estimators are checked
//! against. Cells with zero probability contribute nothing (`0 log 0 = 0`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{domain, validation, Result};
use crate::estimators::{EstimatorKind, EstimatorSpec};
use crate::prob::{ConditionalTable, DiscreteJoint};

/// Alpha values reported by [`info_report`].
pub const REPORT_ALPHAS: [f64; 3] = [1.3, 1.5, 1.8];

/// Summary of the exact quantities for one joint and one variational
/// conditional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub mi: f64,
    pub h_y: f64,
    pub h_y_given_z: f64,
    /// KL(p_ZY || p_Z q).
    pub kl_term: f64,
    /// Renyi divergence of the same pair, keyed by alpha.
    pub renyi_terms: BTreeMap<String, f64>,
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn check_shapes(p: &DiscreteJoint, q: &ConditionalTable) -> Result<()> {
    if p.z_size() != q.z_size() || p.y_size() != q.y_size() {
        return Err(validation(format!(
            "joint is {}x{} but conditional is {}x{}",
            p.z_size(),
            p.y_size(),
            q.z_size(),
            q.y_size()
        )));
    }
    Ok(())
}

/// I(Z;Y) by direct summation of p log(p / (p_z p_y)).
pub fn exact_mi(joint: &DiscreteJoint) -> f64 {
    let pz = joint.p_z();
    let py = joint.p_y();
    let mut mi = 0.0;
    for ((z, y), &p) in joint.probs().indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (pz[z] * py[y])).ln();
        }
    }
    mi
}

/// Shannon entropy of the Y marginal.
pub fn exact_entropy(joint: &DiscreteJoint) -> f64 {
    -joint.p_y().iter().map(|&p| xlogx(p)).sum::<f64>()
}

/// H(Y|Z) = sum_z p(z) H(Y | Z = z).
pub fn exact_cond_entropy(joint: &DiscreteJoint) -> f64 {
    let mut h = 0.0;
    for row in joint.probs().outer_iter() {
        let pz = row.sum();
        if pz > 0.0 {
            h -= row.iter().map(|&p| xlogx(p / pz)).sum::<f64>() * pz;
        }
    }
    h
}

/// Support cells with their log density ratio log(p(y|z) / q(y|z)).
fn log_ratios(p: &DiscreteJoint, q: &ConditionalTable) -> Result<Vec<(f64, f64)>> {
    check_shapes(p, q)?;
    let pz = p.p_z();
    let qv = q.probs();
    let mut cells = Vec::new();
    for ((z, y), &pzy) in p.probs().indexed_iter() {
        if pzy <= 0.0 {
            continue;
        }
        let qzy = qv[[z, y]];
        if qzy <= 0.0 {
            return Err(domain(format!(
                "absolute continuity violated at cell (z={z}, y={y}): p = {pzy} but q(y|z) = 0"
            )));
        }
        cells.push((pzy, (pzy / pz[z]).ln() - qzy.ln()));
    }
    Ok(cells)
}

/// KL(p_ZY || p_Z q) = sum p(z,y) log(p(y|z) / q(y|z)).
pub fn exact_kl(p: &DiscreteJoint, ref_cond: &ConditionalTable) -> Result<f64> {
    Ok(log_ratios(p, ref_cond)?.iter().map(|&(w, lr)| w * lr).sum())
}

/// Renyi divergence of order `alpha > 1` between p_ZY and p_Z q, restricted
/// to the support of p_ZY.
pub fn exact_renyi(p: &DiscreteJoint, ref_cond: &ConditionalTable, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(domain(format!("renyi order must be a finite alpha > 1, got {alpha}")));
    }
    let cells = log_ratios(p, ref_cond)?;
    let a = alpha - 1.0;
    // log-sum-exp over log p + (alpha - 1) log R
    let terms: Vec<f64> = cells.iter().map(|&(w, lr)| w.ln() + a * lr).collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    Ok((max + sum.ln()) / a)
}

/// Cross-entropy -E_{YZ}[log q(Y|Z)] of the variational conditional.
pub fn exact_cross_entropy(p: &DiscreteJoint, ref_cond: &ConditionalTable) -> Result<f64> {
    check_shapes(p, ref_cond)?;
    let q = ref_cond.probs();
    let mut ce = 0.0;
    for ((z, y), &pzy) in p.probs().indexed_iter() {
        if pzy > 0.0 {
            let qzy = q[[z, y]];
            if qzy <= 0.0 {
                return Ok(f64::INFINITY);
            }
            ce -= pzy * qzy.ln();
        }
    }
    Ok(ce)
}

/// E_Y[-log sum_z q(Y|z) p(z)], the variational upper bound on H(Y).
pub fn exact_entropy_upper(p: &DiscreteJoint, ref_cond: &ConditionalTable) -> Result<f64> {
    check_shapes(p, ref_cond)?;
    let pz = p.p_z();
    let py = p.p_y();
    let q = ref_cond.probs();
    let mut h = 0.0;
    for (y, &w) in py.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let q_y: f64 = pz.iter().enumerate().map(|(z, &m)| m * q[[z, y]]).sum();
        if q_y <= 0.0 {
            return Ok(f64::INFINITY);
        }
        h -= w * q_y.ln();
    }
    Ok(h)
}

/// E_{YZ}[log q(Y|Z)] - E_Y E_Z[log q(Y|Z)], evaluated exactly.
pub fn exact_vclub(p: &DiscreteJoint, ref_cond: &ConditionalTable) -> Result<f64> {
    check_shapes(p, ref_cond)?;
    let pz = p.p_z();
    let py = p.p_y();
    let q = ref_cond.probs();
    let positive = -exact_cross_entropy(p, ref_cond)?;
    let mut marginal = 0.0;
    for (z, &wz) in pz.iter().enumerate() {
        for (y, &wy) in py.iter().enumerate() {
            if wz * wy > 0.0 {
                if q[[z, y]] <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                marginal += wz * wy * q[[z, y]].ln();
            }
        }
    }
    Ok(positive - marginal)
}

/// Exact value of the quantity the estimator kind targets.
///
/// `Kl` and `Renyi` give the variational upper bound
/// `E_Y[-log sum_z q(Y|z) p(z)] + E_{YZ}[log q] + D(p_ZY || p_Z q)`;
/// `VClubS` gives the contrastive bound with `q` in place of `p(y|z)`;
/// `AdvCe` gives the cross-entropy lower bound `H(Y) - CE(q)`.
pub fn exact_bound_rhs(joint: &DiscreteJoint, ref_cond: &ConditionalTable, spec: &EstimatorSpec) -> Result<f64> {
    match spec.kind {
        EstimatorKind::Kl => {
            let div = exact_kl(joint, ref_cond)?;
            Ok(exact_entropy_upper(joint, ref_cond)? - exact_cross_entropy(joint, ref_cond)? + div)
        }
        EstimatorKind::Renyi { alpha } => {
            let div = exact_renyi(joint, ref_cond, alpha)?;
            Ok(exact_entropy_upper(joint, ref_cond)? - exact_cross_entropy(joint, ref_cond)? + div)
        }
        EstimatorKind::VClubS => exact_vclub(joint, ref_cond),
        EstimatorKind::AdvCe => Ok(exact_entropy(joint) - exact_cross_entropy(joint, ref_cond)?),
    }
}

/// Exact report for `joint` against the variational conditional `ref_cond`.
pub fn info_report(joint: &DiscreteJoint, ref_cond: &ConditionalTable) -> Result<InfoReport> {
    let mut renyi_terms = BTreeMap::new();
    for alpha in REPORT_ALPHAS {
        renyi_terms.insert(format!("{alpha}"), exact_renyi(joint, ref_cond, alpha)?);
    }
    Ok(InfoReport {
        mi: exact_mi(joint),
        h_y: exact_entropy(joint),
        h_y_given_z: exact_cond_entropy(joint),
        kl_term: exact_kl(joint, ref_cond)?,
        renyi_terms,
    })
}

impl InfoReport {
    /// Rescale every field by `factor` (e.g. `1/ln 2` for bits).
    pub fn scaled(mut self, factor: f64) -> Self {
        self.mi *= factor;
        self.h_y *= factor;
        self.h_y_given_z *= factor;
        self.kl_term *= factor;
        self.renyi_terms.values_mut().for_each(|v| *v *= factor);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::f64::consts::LN_2;

    fn reference_joint() -> DiscreteJoint {
        DiscreteJoint::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap()
    }

    // -0.8 ln 0.8 - 0.2 ln 0.2
    fn binary_entropy_08() -> f64 {
        -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln())
    }

    #[test]
    fn independence_gives_zero() {
        let j = DiscreteJoint::product(&[0.2, 0.3, 0.5], &[0.6, 0.4]).unwrap();
        assert!(exact_mi(&j).abs() < 1e-15);
    }

    #[test]
    fn diagonal_gives_log2() {
        let j = DiscreteJoint::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert!((exact_mi(&j) - LN_2).abs() < 1e-15);
        assert_eq!(exact_cond_entropy(&j), 0.0);
        assert!((exact_entropy(&j) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn reference_joint_values() {
        let j = reference_joint();
        let h_cond = binary_entropy_08();
        assert!((h_cond - 0.500_402_423_538_188_4).abs() < 1e-15);
        assert!((exact_cond_entropy(&j) - h_cond).abs() < 1e-15);
        assert!((exact_mi(&j) - (LN_2 - h_cond)).abs() < 1e-15);
        assert!((exact_mi(&j) - 0.19274).abs() < 1e-5);
        let uniform = ConditionalTable::uniform(2, 2).unwrap();
        assert!((exact_kl(&j, &uniform).unwrap() - (LN_2 - h_cond)).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_at_true_conditional() {
        let j = DiscreteJoint::random(4, 3, 0.7, &mut Rng::new(2)).unwrap();
        let c = j.conditional();
        assert!(exact_kl(&j, &c).unwrap().abs() < 1e-14);
        assert!(exact_renyi(&j, &c, 1.5).unwrap().abs() < 1e-14);
        let q = ConditionalTable::random(4, 3, 1.0, &mut Rng::new(3)).unwrap();
        assert!(exact_kl(&j, &q).unwrap() > 0.0);
    }

    #[test]
    fn renyi_near_one_matches_kl() {
        // the gap grows like (alpha - 1) Var[log R] / 2, so draw moderately
        // concentrated tables
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let j = DiscreteJoint::random(3, 4, 5.0, &mut rng).unwrap();
            let q = ConditionalTable::random(3, 4, 5.0, &mut rng).unwrap();
            let kl = exact_kl(&j, &q).unwrap();
            let r = exact_renyi(&j, &q, 1.0 + 1e-3).unwrap();
            assert!((kl - r).abs() < 1e-3, "kl {kl} renyi {r}");
            let r13 = exact_renyi(&j, &q, 1.3).unwrap();
            let r18 = exact_renyi(&j, &q, 1.8).unwrap();
            assert!(kl <= r13 + 1e-12 && r13 <= r18 + 1e-12);
        }
    }

    #[test]
    fn renyi_rejects_bad_alpha() {
        let j = reference_joint();
        let q = j.conditional();
        for a in [1.0, 0.5, f64::NAN, f64::INFINITY] {
            assert!(matches!(exact_renyi(&j, &q, a), Err(crate::Error::Domain(_))));
        }
    }

    #[test]
    fn continuity_violation_names_cell() {
        let j = reference_joint();
        let q = ConditionalTable::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let err = exact_kl(&j, &q).unwrap_err();
        assert!(err.to_string().contains("z=0, y=1"), "{err}");
        assert!(exact_renyi(&j, &q, 1.5).is_err());
    }

    #[test]
    fn zero_cells_are_ignored() {
        // q vanishes only where p does
        let j = DiscreteJoint::from_rows(&[vec![0.5, 0.0], vec![0.25, 0.25]]).unwrap();
        let q = ConditionalTable::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!(exact_kl(&j, &q).unwrap().abs() < 1e-15);
        assert!(exact_renyi(&j, &q, 1.8).unwrap().abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let j = reference_joint();
        let q = ConditionalTable::uniform(3, 2).unwrap();
        assert!(matches!(exact_kl(&j, &q), Err(crate::Error::Validation(_))));
    }

    #[test]
    fn bound_rhs_examples() {
        let j = reference_joint();
        let truth = j.conditional();
        let mi = exact_mi(&j);
        let kl = EstimatorSpec::kl();
        assert!((exact_bound_rhs(&j, &truth, &kl).unwrap() - mi).abs() < 1e-10);
        let uniform = ConditionalTable::uniform(2, 2).unwrap();
        let rhs = exact_bound_rhs(&j, &uniform, &kl).unwrap();
        assert!((rhs - (LN_2 - binary_entropy_08())).abs() < 1e-12);
        let adv = exact_bound_rhs(&j, &truth, &EstimatorSpec::adv_ce()).unwrap();
        assert!((adv - mi).abs() < 1e-12);
        let club = exact_bound_rhs(&j, &truth, &EstimatorSpec::vclub_s()).unwrap();
        assert!(club >= mi);
    }

    #[test]
    fn report_scaling() {
        let j = reference_joint();
        let r = info_report(&j, &ConditionalTable::uniform(2, 2).unwrap()).unwrap();
        assert_eq!(r.renyi_terms.len(), 3);
        assert!(r.renyi_terms.contains_key("1.5"));
        let bits = r.clone().scaled(1.0 / LN_2);
        assert!((bits.h_y - 1.0).abs() < 1e-15);
    }
}
