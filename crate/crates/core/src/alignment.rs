//! Adversarial losses on style vectors: discriminator BCE, the SROCC-gated
//! relaxation flag and the relaxed discriminator loss.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autograd::{relaxed_bce_value, Var};
use crate::error::{config_err, input_err, Result};
use crate::metrics::srocc;
use crate::tensor::Float;

/// Discriminator probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`
/// before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn check_batches(d_source: &[f64], d_target: &[f64]) -> Result<()> {
    if d_source.is_empty() || d_target.is_empty() {
        return Err(input_err!(
            "discriminator loss needs non-empty batches (source {}, target {})",
            d_source.len(),
            d_target.len()
        ));
    }
    Ok(())
}

fn clip(p: f64) -> f64 {
    p.max(PROB_CLAMP).min(1.0 - PROB_CLAMP)
}

/// `-(1/ns) sum log(1 - D(f^s)) - (1/nt) sum log D(f^t)`.
pub fn discriminator_bce(d_source: &[f64], d_target: &[f64]) -> Result<f64> {
    check_batches(d_source, d_target)?;
    let ns = d_source.len() as f64;
    let nt = d_target.len() as f64;
    let s = d_source.iter().map(|&p| -(1.0 - clip(p)).ln()).sum::<f64>() / ns;
    let t = d_target.iter().map(|&p| -clip(p).ln()).sum::<f64>() / nt;
    Ok(s + t)
}

/// `-(1/ns) sum log(1 - |D(f^s) - h|) - (1/nt) sum log D(f^t)`.
pub fn relaxed_discriminator_bce(d_source: &[f64], d_target: &[f64], h: u8) -> Result<f64> {
    check_batches(d_source, d_target)?;
    check_flag(h)?;
    Ok(relaxed_bce_value(d_source, d_target, f64::from(h), PROB_CLAMP))
}

fn check_flag(h: u8) -> Result<()> {
    if h > 1 {
        return Err(input_err!("relaxation flag must be 0 or 1, got {h}"));
    }
    Ok(())
}

/// Graph version of [`relaxed_discriminator_bce`]; `h = 0` gives the plain
/// discriminator loss.
pub fn relaxed_bce_var<'g, T: Float>(d_source: Var<'g, T>, d_target: Var<'g, T>, h: u8) -> Result<Var<'g, T>> {
    check_flag(h)?;
    d_source.relaxed_bce(d_target, T::cst(f64::from(h)), T::cst(PROB_CLAMP))
}

/// Mean absolute deviation of scalar scores (the per-sample l2 norm of a
/// one-dimensional residual).
pub fn quality_l2(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(input_err!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        ));
    }
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

pub fn quality_l2_var<'g, T: Float>(preds: Var<'g, T>, labels: &[f64]) -> Result<Var<'g, T>> {
    let labels: Vec<T> = labels.iter().map(|&v| T::cst(v)).collect();
    preds.mean_abs_error(&labels)
}

pub fn total_loss(l_q: f64, l_d: f64, lambda_adv: f64) -> Result<f64> {
    check_lambda(lambda_adv)?;
    Ok(l_q + lambda_adv * l_d)
}

fn check_lambda(lambda_adv: f64) -> Result<()> {
    if !(lambda_adv >= 0.0 && lambda_adv.is_finite()) {
        return Err(config_err!("lambda_adv must be a finite value >= 0, got {lambda_adv}"));
    }
    Ok(())
}

/// `l_q + lambda_adv * l_d` in the graph. With `l_d = None` the loss is `l_q`.
pub fn total_loss_var<'g, T: Float>(
    l_q: Var<'g, T>,
    l_d: Option<Var<'g, T>>,
    lambda_adv: f64,
) -> Result<Var<'g, T>> {
    check_lambda(lambda_adv)?;
    match l_d {
        Some(d) => l_q.add(d.scale(T::cst(lambda_adv))),
        None => Ok(l_q),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationState {
    pub tau: f64,
    pub h: u8,
    /// `None` when the batch correlation was undefined.
    pub batch_srocc: Option<f64>,
}

/// `h = 0` when the SROCC of source predictions against labels exceeds
/// `tau`, else `h = 1`. Degenerate batches (fewer than 3 samples or tied
/// ranks) are relaxed.
pub fn relaxation_flag(source_preds: &[f64], source_labels: &[f64], tau: f64) -> RelaxationState {
    match srocc(source_preds, source_labels) {
        Ok(r) => RelaxationState {
            tau,
            h: u8::from(r <= tau),
            batch_srocc: Some(r),
        },
        Err(e) => {
            log::warn!("relaxing alignment on degenerate batch: {e}");
            RelaxationState {
                tau,
                h: 1,
                batch_srocc: None,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SroccWindow {
    #[default]
    Batch,
    /// Mean SROCC over the most recent `RUNNING_WINDOW` batches.
    RunningAverage,
}

pub const RUNNING_WINDOW: usize = 10;

/// Stateful wrapper around [`relaxation_flag`] for the two SROCC windows.
#[derive(Clone, Debug)]
pub struct RelaxationTracker {
    tau: f64,
    window: SroccWindow,
    history: VecDeque<f64>,
}

impl RelaxationTracker {
    pub fn new(tau: f64, window: SroccWindow) -> Self {
        Self {
            tau,
            window,
            history: VecDeque::with_capacity(RUNNING_WINDOW),
        }
    }

    pub fn update(&mut self, source_preds: &[f64], source_labels: &[f64]) -> RelaxationState {
        let state = relaxation_flag(source_preds, source_labels, self.tau);
        if self.window == SroccWindow::Batch {
            return state;
        }
        if let Some(r) = state.batch_srocc {
            if self.history.len() == RUNNING_WINDOW {
                self.history.pop_front();
            }
            self.history.push_back(r);
        }
        if self.history.is_empty() {
            return state;
        }
        let avg = self.history.iter().sum::<f64>() / self.history.len() as f64;
        RelaxationState {
            tau: self.tau,
            h: u8::from(avg <= self.tau),
            batch_srocc: Some(avg),
        }
    }
}

/// One line of training telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_q: f64,
    pub l_d: f64,
    pub l_all: f64,
    pub h: u8,
    pub batch_srocc: Option<f64>,
    pub mixed: bool,
}

impl LossReport {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("loss report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::metrics::fractional_ranks;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_examples() {
        let l = discriminator_bce(&[0.5], &[0.5]).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let l = discriminator_bce(&[0.2], &[0.8]).unwrap();
        assert!((l + 2.0 * 0.8f64.ln()).abs() < 1e-12);
        assert!((l - 0.4463).abs() < 1e-4);
        assert!(discriminator_bce(&[], &[0.5]).is_err());
    }

    #[test]
    fn relaxed_examples() {
        let l0 = relaxed_discriminator_bce(&[0.8], &[0.5], 0).unwrap();
        assert!((l0 - (-(0.2f64).ln() - 0.5f64.ln())).abs() < 1e-12);
        assert!((l0 - 2.3026).abs() < 1e-4);
        let l1 = relaxed_discriminator_bce(&[0.8], &[0.5], 1).unwrap();
        assert!((l1 - 0.9163).abs() < 1e-4);
        assert!(relaxed_discriminator_bce(&[0.8], &[0.5], 2).is_err());
    }

    #[test]
    fn flag_examples() {
        let labels = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(relaxation_flag(&[0.1, 0.2, 0.3, 0.4], &labels, 0.9).h, 0);
        assert_eq!(relaxation_flag(&[4.0, 3.0, 2.0, 1.0], &labels, 0.9).h, 1);
        let s = relaxation_flag(&[1.0, 3.0, 2.0, 4.0], &labels, 0.9);
        assert_eq!((s.h, s.batch_srocc), (1, Some(0.8)));
        assert_eq!(relaxation_flag(&[1.0, 2.0], &[1.0, 2.0], 0.9).h, 1);
    }

    fn oracle_srocc(a: &[f64], b: &[f64]) -> Option<f64> {
        // Spearman via squared rank differences holds only without ties,
        // which the continuous draws below guarantee.
        let n = a.len() as f64;
        let (ra, rb) = (fractional_ranks(a), fractional_ranks(b));
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
        Some(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
    }

    #[test]
    fn flag_agrees_with_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.random_range(3..20);
            let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            let preds: Vec<f64> = labels.iter().map(|y| y + rng.random_range(-2.0..2.0)).collect();
            let tau = rng.random_range(-1.0..1.0);
            let r = oracle_srocc(&preds, &labels).unwrap();
            assert_eq!(relaxation_flag(&preds, &labels, tau).h, u8::from(r <= tau));
        }
    }

    #[test]
    fn running_average_window() {
        let mut t = RelaxationTracker::new(0.5, SroccWindow::RunningAverage);
        let labels = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(t.update(&[1.0, 2.0, 3.0, 4.0], &labels).h, 0);
        // average of 1.0 and -1.0 is 0 <= 0.5
        let s = t.update(&[4.0, 3.0, 2.0, 1.0], &labels);
        assert_eq!((s.h, s.batch_srocc), (1, Some(0.0)));
        let mut b = RelaxationTracker::new(0.5, SroccWindow::Batch);
        assert_eq!(b.update(&[1.0, 2.0, 3.0, 4.0], &labels).h, 0);
    }

    #[test]
    fn quality_and_total() {
        assert_eq!(quality_l2(&[1.0, 2.0], &[3.0, 2.0]).unwrap(), 1.0);
        assert_eq!(quality_l2(&[1.5, 2.5], &[1.5, 2.5]).unwrap(), 0.0);
        assert!(quality_l2(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(total_loss(1.0, 0.5, 2.0).unwrap(), 2.0);
        assert_eq!(total_loss(0.7, 3.0, 0.0).unwrap(), 0.7);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn clamped_extremes_stay_finite() {
        for h in [0, 1] {
            for &(s, t) in &[(0.0, 0.0), (1.0, 1.0), (0.0, 1.0), (1.0, 0.0)] {
                assert!(relaxed_discriminator_bce(&[s], &[t], h).unwrap().is_finite());
            }
        }
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let g = Graph::<f64>::new();
        let s = g.leaf(Tensor::from_f64(&[3], &[0.2, 0.7, 0.9]).unwrap());
        let t = g.leaf(Tensor::from_f64(&[2], &[0.4, 0.6]).unwrap());
        for h in [0, 1] {
            let v = relaxed_bce_var(s, t, h).unwrap().value().data()[0];
            assert_eq!(v, relaxed_discriminator_bce(&[0.2, 0.7, 0.9], &[0.4, 0.6], h).unwrap());
        }
        let report = LossReport {
            step: 3,
            l_q: 0.5,
            l_d: 1.0,
            l_all: 2.5,
            h: 1,
            batch_srocc: Some(0.4),
            mixed: true,
        };
        let back: LossReport = serde_json::from_str(report.to_json_line().trim()).unwrap();
        assert_eq!(back, report);
    }

    /// Tiny extractor `f = W x + b`, head on `f`, discriminator on
    /// `grl(f)`: checks the fused gradient against finite differences of the
    /// separate loss terms.
    #[test]
    fn fused_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(-0.8..0.8)).collect::<Vec<_>>()).unwrap()
        };
        let xs = rand(&[2, 3]);
        let xt = rand(&[2, 3]);
        let w = rand(&[4, 3]);
        let b = rand(&[4]);
        let hw = rand(&[1, 4]);
        let hb = rand(&[1]);
        let dw = rand(&[1, 4]);
        let db = rand(&[1]);
        let labels = [1.3, 2.1];
        let lambda = 2.0;

        let losses = |w: &Tensor<f64>, grl: bool| {
            let g = Graph::<f64>::new();
            let wv = g.param(0, w);
            let bv = g.constant(b.clone());
            let fs = g.constant(xs.clone()).linear(wv, bv).unwrap();
            let ft = g.constant(xt.clone()).linear(wv, bv).unwrap();
            let q = fs.linear(g.constant(hw.clone()), g.constant(hb.clone())).unwrap().reshape(&[2]).unwrap();
            let l_q = quality_l2_var(q, &labels).unwrap();
            let (ds, dt) = if grl { (fs.grl(1.0), ft.grl(1.0)) } else { (fs, ft) };
            let (dwv, dbv) = (g.constant(dw.clone()), g.constant(db.clone()));
            let ds = ds.linear(dwv, dbv).unwrap().sigmoid().reshape(&[2]).unwrap();
            let dt = dt.linear(dwv, dbv).unwrap().sigmoid().reshape(&[2]).unwrap();
            let l_d = relaxed_bce_var(ds, dt, 0).unwrap();
            let total = total_loss_var(l_q, Some(l_d), lambda).unwrap();
            let grads = g.backward(total).unwrap();
            (
                l_q.value().data()[0],
                l_d.value().data()[0],
                grads.param(0).unwrap().to_f64_vec(),
            )
        };

        let (_, _, fused) = losses(&w, true);
        let (_, _, no_grl) = losses(&w, false);
        let step = 1e-5;
        for i in 0..w.len() {
            let mut plus = w.clone();
            plus.data_mut()[i] += step;
            let mut minus = w.clone();
            minus.data_mut()[i] -= step;
            let (qp, dp, _) = losses(&plus, true);
            let (qm, dm, _) = losses(&minus, true);
            let gq = (qp - qm) / (2.0 * step);
            let gd = (dp - dm) / (2.0 * step);
            assert!((fused[i] - (gq - lambda * gd)).abs() < 1e-6, "param {i}");
            assert!((no_grl[i] - (gq + lambda * gd)).abs() < 1e-6, "param {i}");
        }
    }

    proptest! {
        #[test]
        fn relaxed_reduces_to_plain(s in proptest::collection::vec(0.0f64..=1.0, 1..8),
                                    t in proptest::collection::vec(0.0f64..=1.0, 1..8)) {
            prop_assert_eq!(
                relaxed_discriminator_bce(&s, &t, 0).unwrap().to_bits(),
                discriminator_bce(&s, &t).unwrap().to_bits()
            );
        }

        #[test]
        fn bce_is_positive_inside_unit_interval(s in 1e-3f64..0.999, t in 1e-3f64..0.999) {
            prop_assert!(discriminator_bce(&[s], &[t]).unwrap() > 0.0);
        }

        #[test]
        fn quality_loss_is_homogeneous(k in 0.0f64..10.0, r in proptest::collection::vec(-3.0f64..3.0, 1..10)) {
            let zeros = vec![0.0; r.len()];
            let scaled: Vec<f64> = r.iter().map(|v| k * v).collect();
            let base = quality_l2(&r, &zeros).unwrap();
            prop_assert!((quality_l2(&scaled, &zeros).unwrap() - k * base).abs() < 1e-9);
        }
    }
}
