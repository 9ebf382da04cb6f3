//! Error-aligned uncertainty (EaU) categorization and the differentiable
//! EaUC calibration loss.
//!
//! Every sample is placed in one of four classes by comparing its scaled
//! error against `ade_th` and its normalized certainty against `c_th`:
//!
//! |            | certain (c > c_th) | uncertain (c <= c_th) |
//! |------------|--------------------|-----------------------|
//! | ade <= th  | LC                 | LU                    |
//! | ade >  th  | HC                 | HU                    |
//!
//! The hard EaU measure is `(n_LC + n_HU) / n`. The loss replaces the
//! indicator counts with soft masses built from `tanh(ade)` and `c`, keeping
//! class membership itself fixed (no gradient through the thresholds).

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EaucConfig {
    /// Threshold on the scaled error.
    pub ade_th: f64,
    /// Threshold on normalized certainty, in (0, 1).
    pub c_th: f64,
    /// Weight of the calibration loss relative to the primary loss.
    pub beta: f64,
    /// Extra weight on the LC mass; 1 gives the unweighted loss.
    pub gamma: f64,
    /// Guard added to numerator and denominator inside the log.
    pub epsilon: f64,
    /// Multiplier applied to raw errors before thresholding.
    pub ade_scale: f64,
    pub c_clip_lo: f64,
    pub c_clip_hi: f64,
}

impl Default for EaucConfig {
    fn default() -> Self {
        EaucConfig {
            ade_th: 0.8,
            c_th: 0.6,
            beta: 200.0,
            gamma: 3.0,
            epsilon: 1e-8,
            ade_scale: 0.5,
            c_clip_lo: 0.0,
            c_clip_hi: 100.0,
        }
    }
}

impl EaucConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("eauc: {m}")));
        if !(self.ade_th > 0.0) {
            return fail("ade_th must be > 0");
        }
        if !(self.c_th > 0.0 && self.c_th < 1.0) {
            return fail("c_th must lie in (0, 1)");
        }
        if !(self.beta >= 0.0) {
            return fail("beta must be >= 0");
        }
        if !(self.gamma >= 1.0) {
            return fail("gamma must be >= 1");
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be > 0");
        }
        if !(self.ade_scale > 0.0) {
            return fail("ade_scale must be > 0");
        }
        if !(self.c_clip_lo < self.c_clip_hi) {
            return fail("c_clip_lo must be < c_clip_hi");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    /// Low error, certain.
    LC,
    /// Low error, uncertain.
    LU,
    /// High error, certain.
    HC,
    /// High error, uncertain.
    HU,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleAssessment {
    pub ade: f64,
    pub certainty: f64,
    pub category: Category,
}

impl SampleAssessment {
    pub fn new(ade: f64, certainty: f64, config: &EaucConfig) -> Self {
        SampleAssessment {
            ade,
            certainty,
            category: categorize(ade, certainty, config),
        }
    }
}

/// Clip-and-normalize a raw log-likelihood into [0, 1].
pub fn postprocess_certainty_value(loglik: f64, config: &EaucConfig) -> f64 {
    let (lo, hi) = (config.c_clip_lo, config.c_clip_hi);
    (loglik.clamp(lo, hi) - lo) / (hi - lo)
}

/// Differentiable form of [`postprocess_certainty_value`]; the gradient is
/// zero wherever the clip is active.
pub fn postprocess_certainty(tape: &mut Tape, loglik: NodeId, config: &EaucConfig) -> Result<NodeId> {
    let (lo, hi) = (config.c_clip_lo, config.c_clip_hi);
    let clipped = tape.clamp(loglik, lo, hi)?;
    let offset = tape.constant_scalar(lo);
    let shifted = tape.sub(clipped, offset)?;
    Ok(tape.scale(shifted, 1.0 / (hi - lo)))
}

pub fn scale_ade_value(raw_ade: f64, config: &EaucConfig) -> f64 {
    raw_ade * config.ade_scale
}

pub fn scale_ade(tape: &mut Tape, raw_ade: NodeId, config: &EaucConfig) -> NodeId {
    tape.scale(raw_ade, config.ade_scale)
}

pub fn categorize(ade: f64, certainty: f64, config: &EaucConfig) -> Category {
    let low_error = ade <= config.ade_th;
    let certain = certainty > config.c_th;
    match (low_error, certain) {
        (true, true) => Category::LC,
        (true, false) => Category::LU,
        (false, true) => Category::HC,
        (false, false) => Category::HU,
    }
}

/// Indicator counts per class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardCounts {
    pub lc: usize,
    pub lu: usize,
    pub hc: usize,
    pub hu: usize,
}

impl HardCounts {
    pub fn from_samples(ade: &[f64], certainty: &[f64], config: &EaucConfig) -> Self {
        let mut counts = HardCounts::default();
        for (&a, &c) in ade.iter().zip(certainty) {
            match categorize(a, c, config) {
                Category::LC => counts.lc += 1,
                Category::LU => counts.lu += 1,
                Category::HC => counts.hc += 1,
                Category::HU => counts.hu += 1,
            }
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.lc + self.lu + self.hc + self.hu
    }
}

/// Hard EaU measure `(n_LC + n_HU) / n`.
pub fn eau_measure(counts: &HardCounts) -> Result<f64> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::input("eau_measure: empty batch"));
    }
    Ok((counts.lc + counts.hu) as f64 / total as f64)
}

/// Differentiable class masses (scalar nodes).
#[derive(Debug, Clone, Copy)]
pub struct SoftCounts {
    pub lc: NodeId,
    pub lu: NodeId,
    pub hc: NodeId,
    pub hu: NodeId,
}

impl SoftCounts {
    pub fn values(&self, tape: &Tape) -> [f64; 4] {
        [
            tape.scalar(self.lc),
            tape.scalar(self.lu),
            tape.scalar(self.hc),
            tape.scalar(self.hu),
        ]
    }
}

/// Soft class masses over a batch. `ade` and `certainty` are equal-length
/// vector nodes holding scaled errors and normalized certainties.
pub fn soft_counts(tape: &mut Tape, ade: NodeId, certainty: NodeId, config: &EaucConfig) -> Result<SoftCounts> {
    let n = tape.shape(ade).len();
    if n == 0 {
        return Err(Error::input("soft_counts: empty batch"));
    }
    if tape.shape(certainty) != tape.shape(ade) {
        return Err(Error::ShapeMismatch {
            op: "soft_counts",
            lhs: tape.shape(ade),
            rhs: tape.shape(certainty),
        });
    }

    // Membership is read from detached values.
    let ade_d = tape.stop_gradient(ade);
    let c_d = tape.stop_gradient(certainty);
    let shape = tape.shape(ade);
    let mut masks = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let slot = match categorize(tape.value(ade_d).data()[i], tape.value(c_d).data()[i], config) {
            Category::LC => 0,
            Category::LU => 1,
            Category::HC => 2,
            Category::HU => 3,
        };
        masks[slot][i] = 1.0;
    }

    let one = tape.constant_scalar(1.0);
    let bounded = tape.tanh(ade);
    let low = tape.sub(one, bounded)?;
    let uncertain = tape.sub(one, certainty)?;

    let masked_sum = |tape: &mut Tape, mask: Vec<f64>, err: NodeId, cert: NodeId| -> Result<NodeId> {
        let m = tape.constant(Tensor::new(shape, mask));
        let prod = tape.mul(err, cert)?;
        let prod = tape.mul(prod, m)?;
        Ok(tape.sum(prod))
    };
    let [m_lc, m_lu, m_hc, m_hu] = masks;
    Ok(SoftCounts {
        lc: masked_sum(tape, m_lc, low, certainty)?,
        lu: masked_sum(tape, m_lu, low, uncertain)?,
        hc: masked_sum(tape, m_hc, bounded, certainty)?,
        hu: masked_sum(tape, m_hu, bounded, uncertain)?,
    })
}

/// [`soft_counts`] over per-sample scalar `(ade, certainty)` node pairs.
pub fn soft_counts_from_pairs(tape: &mut Tape, batch: &[(NodeId, NodeId)], config: &EaucConfig) -> Result<SoftCounts> {
    if batch.is_empty() {
        return Err(Error::input("soft_counts: empty batch"));
    }
    let ades: Vec<NodeId> = batch.iter().map(|p| p.0).collect();
    let certs: Vec<NodeId> = batch.iter().map(|p| p.1).collect();
    let ade = tape.concat(&ades)?;
    let cert = tape.concat(&certs)?;
    soft_counts(tape, ade, cert, config)
}

/// `-log((g*n_LC + n_HU + eps) / (g*n_LC + n_LU + n_HC + n_HU + eps))` with
/// `g = config.gamma`.
pub fn eauc_loss(tape: &mut Tape, counts: &SoftCounts, config: &EaucConfig) -> Result<NodeId> {
    let eps = tape.constant_scalar(config.epsilon);
    let weighted_lc = tape.scale(counts.lc, config.gamma);
    let num = tape.add(weighted_lc, counts.hu)?;
    let num = tape.add(num, eps)?;
    let den = tape.add(weighted_lc, counts.lu)?;
    let den = tape.add(den, counts.hc)?;
    let den = tape.add(den, counts.hu)?;
    let den = tape.add(den, eps)?;
    let log_den = tape.log(den)?;
    let log_num = tape.log(num)?;
    tape.sub(log_den, log_num)
}

/// Plain-number evaluation of [`eauc_loss`].
pub fn eauc_loss_value(counts: [f64; 4], config: &EaucConfig) -> f64 {
    let [lc, lu, hc, hu] = counts;
    let g = config.gamma;
    let num = g * lc + hu + config.epsilon;
    let den = g * lc + lu + hc + hu + config.epsilon;
    den.ln() - num.ln()
}

/// `primary + beta * eauc`. With `beta == 0` the primary node is returned
/// untouched so the baseline graph is unchanged.
pub fn total_loss(tape: &mut Tape, primary: NodeId, eauc: NodeId, config: &EaucConfig) -> Result<NodeId> {
    if config.beta == 0.0 {
        return Ok(primary);
    }
    let weighted = tape.scale(eauc, config.beta);
    tape.add(primary, weighted)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::grad_check;

    fn cfg(gamma: f64) -> EaucConfig {
        EaucConfig {
            gamma,
            ..EaucConfig::default()
        }
    }

    fn masses(ade: &[f64], c: &[f64], config: &EaucConfig) -> [f64; 4] {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(ade.to_vec()));
        let cc = tape.constant(Tensor::vector(c.to_vec()));
        soft_counts(&mut tape, a, cc, config).unwrap().values(&tape)
    }

    fn loss_of(ade: &[f64], c: &[f64], config: &EaucConfig) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(ade.to_vec()));
        let cc = tape.constant(Tensor::vector(c.to_vec()));
        let sc = soft_counts(&mut tape, a, cc, config).unwrap();
        let l = eauc_loss(&mut tape, &sc, config).unwrap();
        tape.scalar(l)
    }

    fn loss_from_counts(counts: [f64; 4], gamma: f64) -> f64 {
        let mut tape = Tape::new();
        let [lc, lu, hc, hu] = counts.map(|v| tape.constant_scalar(v));
        let sc = SoftCounts { lc, lu, hc, hu };
        let l = eauc_loss(&mut tape, &sc, &cfg(gamma)).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn defaults_match_reported_settings() {
        let c = EaucConfig::default();
        assert_eq!((c.beta, c.ade_th, c.c_th, c.gamma), (200.0, 0.8, 0.6, 3.0));
        assert_eq!((c.ade_scale, c.c_clip_lo, c.c_clip_hi), (0.5, 0.0, 100.0));
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        for bad in [
            EaucConfig { ade_th: 0.0, ..Default::default() },
            EaucConfig { c_th: 1.0, ..Default::default() },
            EaucConfig { beta: -1.0, ..Default::default() },
            EaucConfig { gamma: 0.5, ..Default::default() },
            EaucConfig { c_clip_lo: 5.0, c_clip_hi: 5.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn postprocess_certainty_examples() {
        let c = EaucConfig::default();
        assert_eq!(postprocess_certainty_value(120.0, &c), 1.0);
        assert_eq!(postprocess_certainty_value(-5.0, &c), 0.0);
        assert_eq!(postprocess_certainty_value(50.0, &c), 0.5);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![120.0, 50.0, -5.0]));
        let y = postprocess_certainty(&mut tape, x, &c).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.5, 0.0]);
        let root = tape.sum(y);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.01, 0.0]);
    }

    #[test]
    fn scale_ade_examples() {
        let c = EaucConfig::default();
        assert_eq!(scale_ade_value(1.6, &c), c.ade_th);
        assert_eq!(scale_ade_value(0.0, &c), 0.0);
        assert_eq!(scale_ade_value(3.0, &c), 1.5);
    }

    #[test]
    fn categorize_examples() {
        let c = EaucConfig::default();
        assert_eq!(categorize(0.4, 0.9, &c), Category::LC);
        assert_eq!(categorize(0.8, 0.6, &c), Category::LU);
        assert_eq!(categorize(1.2, 0.9, &c), Category::HC);
        assert_eq!(categorize(1.2, 0.6, &c), Category::HU);
        assert_eq!(SampleAssessment::new(0.4, 0.9, &c).category, Category::LC);
    }

    #[test]
    fn eau_measure_examples() {
        let m = |lc, lu, hc, hu| eau_measure(&HardCounts { lc, lu, hc, hu }).unwrap();
        assert_eq!(m(2, 0, 0, 2), 1.0);
        assert_eq!(m(1, 1, 1, 1), 0.5);
        assert_eq!(m(0, 2, 2, 0), 0.0);
        assert!(eau_measure(&HardCounts::default()).is_err());
    }

    #[test]
    fn soft_counts_examples() {
        let c = EaucConfig::default();
        assert_eq!(masses(&[0.0], &[1.0], &c), [1.0, 0.0, 0.0, 0.0]);

        let t2 = {
            let e4 = 4.0f64.exp();
            (e4 - 1.0) / (e4 + 1.0)
        };
        let [lc, lu, hc, hu] = masses(&[2.0], &[0.1], &c);
        assert_eq!([lc, lu, hc], [0.0; 3]);
        assert!((hu - t2 * 0.9).abs() < 1e-12);
        assert!((hu - 0.8676248).abs() < 1e-6);

        let t05 = {
            let e1 = 1.0f64.exp();
            (e1 - 1.0) / (e1 + 1.0)
        };
        assert!((t05 - 0.4621172).abs() < 1e-6);
        let [_, lu, _, _] = masses(&[0.5], &[0.5], &c);
        assert!((lu - (1.0 - t05) * 0.5).abs() < 1e-12);
        assert!((lu - 0.2689414).abs() < 1e-6);
    }

    #[test]
    fn soft_counts_rejects_empty_batch() {
        let mut tape = Tape::new();
        assert!(soft_counts_from_pairs(&mut tape, &[], &EaucConfig::default()).is_err());
        let e = tape.constant(Tensor::new(crate::autodiff::Shape::new(0, 1), vec![]));
        assert!(soft_counts(&mut tape, e, e, &EaucConfig::default()).is_err());
    }

    #[test]
    fn pairs_and_vector_forms_agree() {
        let c = EaucConfig::default();
        let ade = [0.1, 0.9, 1.7, 0.3];
        let cert = [0.8, 0.2, 0.7, 0.4];
        let mut tape = Tape::new();
        let pairs: Vec<_> = ade
            .iter()
            .zip(&cert)
            .map(|(&a, &cc)| (tape.constant_scalar(a), tape.constant_scalar(cc)))
            .collect();
        let sc = soft_counts_from_pairs(&mut tape, &pairs, &c).unwrap();
        assert_eq!(sc.values(&tape), masses(&ade, &cert, &c));
    }

    #[test]
    fn eauc_loss_examples() {
        assert!(loss_from_counts([2.0, 0.0, 0.0, 3.0], 1.0).abs() < 1e-12);
        let l = loss_from_counts([1.0, 1.0, 1.0, 1.0], 1.0);
        assert!((l - 2.0f64.ln()).abs() < 1e-6);
        assert!((l - 0.6931472).abs() < 1e-6);
        let l3 = loss_from_counts([1.0, 1.0, 1.0, 1.0], 3.0);
        assert!((l3 - (6.0f64 / 4.0).ln()).abs() < 1e-6);
        assert!((l3 - 0.4054651).abs() < 1e-6);
        assert!((eauc_loss_value([1.0, 1.0, 1.0, 1.0], &cfg(3.0)) - l3).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.constant_scalar(1.0);
        let e = tape.constant_scalar(0.5);
        let t = total_loss(&mut tape, p, e, &EaucConfig::default()).unwrap();
        assert_eq!(tape.scalar(t), 101.0);
        let off = EaucConfig { beta: 0.0, ..Default::default() };
        assert_eq!(total_loss(&mut tape, p, e, &off).unwrap(), p);
        let z = tape.constant_scalar(0.0);
        let t = total_loss(&mut tape, p, z, &EaucConfig::default()).unwrap();
        assert_eq!(tape.scalar(t), 1.0);
    }

    #[test]
    fn perfect_alignment_gives_zero_loss() {
        let c = cfg(1.0);
        let ade = [0.1, 0.2, 1.5, 2.5, 0.0];
        let cert = [0.9, 0.7, 0.3, 0.0, 1.0];
        assert!(loss_of(&ade, &cert, &c) < 1e-6);
        let hard = HardCounts::from_samples(&ade, &cert, &c);
        assert_eq!(eau_measure(&hard).unwrap(), 1.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = cfg(3.0);
        // (ade, certainty) interleaved, all away from both thresholds.
        let point = [0.3, 0.85, 1.4, 0.75, 0.5, 0.3, 1.9, 0.2, 0.2, 0.95, 1.1, 0.4];
        let err = grad_check(
            |tape, x| {
                let pairs: Vec<(NodeId, NodeId)> = (0..6)
                    .map(|i| {
                        let sel_a = tape.constant(Tensor::matrix(1, 12, (0..12).map(|j| f64::from(j == 2 * i)).collect()));
                        let sel_c =
                            tape.constant(Tensor::matrix(1, 12, (0..12).map(|j| f64::from(j == 2 * i + 1)).collect()));
                        (tape.matmul(sel_a, x).unwrap(), tape.matmul(sel_c, x).unwrap())
                    })
                    .collect();
                let sc = soft_counts_from_pairs(tape, &pairs, &c)?;
                eauc_loss(tape, &sc, &c)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn lowering_hc_certainty_lowers_loss() {
        let c = cfg(3.0);
        let ade = [0.2, 1.5, 1.8, 0.4];
        let mut cert = [0.9, 0.95, 0.2, 0.3];
        let mut prev = loss_of(&ade, &cert, &c);
        for _ in 0..5 {
            cert[1] -= 0.05;
            let l = loss_of(&ade, &cert, &c);
            assert!(l < prev, "{l} !< {prev}");
            prev = l;
        }
    }

    proptest! {
        #[test]
        fn eau_measure_in_unit_interval(lc in 0usize..50, lu in 0usize..50, hc in 0usize..50, hu in 0usize..50) {
            let counts = HardCounts { lc, lu, hc, hu };
            prop_assume!(counts.total() > 0);
            let m = eau_measure(&counts).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert_eq!(m == 1.0, lu == 0 && hc == 0);
        }

        #[test]
        fn loss_zero_for_any_gamma_when_aligned(lc in 0.01f64..10.0, hu in 0.0f64..10.0, gamma in 1.0f64..10.0) {
            prop_assert!(loss_from_counts([lc, 0.0, 0.0, hu], gamma).abs() < 1e-6);
        }

        #[test]
        fn loss_is_non_negative(lc in 0.0f64..5.0, lu in 0.0f64..5.0, hc in 0.0f64..5.0, hu in 0.0f64..5.0, gamma in 1.0f64..5.0) {
            prop_assert!(loss_from_counts([lc, lu, hc, hu], gamma) >= -1e-12);
        }

        #[test]
        fn soft_and_hard_agree_far_from_thresholds(
            samples in prop::collection::vec(
                (prop_oneof![0.0f64..0.5, 1.1f64..4.0], prop_oneof![0.0f64..0.3, 0.9f64..1.0]),
                1..20,
            )
        ) {
            let c = EaucConfig::default();
            let ade: Vec<f64> = samples.iter().map(|s| s.0).collect();
            let cert: Vec<f64> = samples.iter().map(|s| s.1).collect();
            let hard = HardCounts::from_samples(&ade, &cert, &c);
            let soft = masses(&ade, &cert, &c);
            let hard = [hard.lc, hard.lu, hard.hc, hard.hu];
            for k in 0..4 {
                prop_assert_eq!(soft[k] > 0.0, hard[k] > 0, "class {}: soft {:?} hard {:?}", k, soft, hard);
                prop_assert!(soft[k] <= hard[k] as f64 + 1e-12);
            }
        }
    }
}
