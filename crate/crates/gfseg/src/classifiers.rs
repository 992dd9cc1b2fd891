//! Classifier heads, logit assembly and novel-classifier calibration.
//!
//! Each class owns one weight column θ_i that scores its *own* sub-feature:
//! `logit_i(x) = θ_i · f_i(x)`, with a dedicated background column scoring
//! the residual. There are no biases, so the per-epoch calibration of the
//! novel columns controls the entire affine behavior of the head.
//!
//! Calibration measures per-column channel means and population standard
//! deviations, shifts the novel block so its average mean matches the base
//! classifier's, then rescales each column to the base's average std. A
//! classifier trained on K images per class otherwise drifts to a wider
//! weight distribution than the base head and steals pixels from it.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::Decomposition;
use crate::tensor::{softmax_data, Data, Tape, Var};

/// Smallest usable per-column std; anything at or below is degenerate.
pub const SIGMA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierRole {
    Base,
    Novel,
    Background,
}

/// A (d, C) weight matrix; column i is the weight vector for class i.
#[derive(Debug, Clone)]
pub struct ClassifierWeights {
    pub theta: Array2<f64>,
    pub role: ClassifierRole,
}

impl ClassifierWeights {
    pub fn new(theta: Array2<f64>, role: ClassifierRole) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("classifier weights must be finite".into()));
        }
        if role == ClassifierRole::Background && theta.shape()[1] != 1 {
            return Err(Error::Shape(
                "background classifier must have exactly one column".into(),
            ));
        }
        Ok(ClassifierWeights { theta, role })
    }

    /// Seeded Gaussian init scaled by 1/sqrt(d).
    pub fn random(dim: usize, classes: usize, role: ClassifierRole, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc2b2_ae3d);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut theta = Array2::<f64>::zeros((dim, classes));
        for v in theta.iter_mut() {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        ClassifierWeights { theta, role }
    }

    pub fn dim(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.theta.shape()[1]
    }
}

/// Channel-direction statistics of classifier columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub mu_bar: f64,
    pub sigma_bar: f64,
}

/// Per-column mean and population standard deviation, plus their averages
/// across classes.
pub fn weight_stats(w: &ClassifierWeights) -> WeightStats {
    let d = w.dim() as f64;
    let mut mu = Vec::with_capacity(w.classes());
    let mut sigma = Vec::with_capacity(w.classes());
    for col in w.theta.columns() {
        let m: f64 = col.sum() / d;
        let var: f64 = col.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / d;
        mu.push(m);
        sigma.push(var.sqrt());
    }
    let mu_bar = mu.iter().sum::<f64>() / mu.len() as f64;
    let sigma_bar = sigma.iter().sum::<f64>() / sigma.len() as f64;
    WeightStats {
        mu,
        sigma,
        mu_bar,
        sigma_bar,
    }
}

/// Which σ enters the scaling step of calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaMode {
    /// Each column i is scaled by σ̄_b / σ_i (default): every column lands
    /// exactly on the base average std.
    PerClass,
    /// All columns share the factor σ̄_b / σ̄_n.
    Averaged,
}

/// Order of the two calibration steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibrationOrder {
    /// Shift to the base mean, then scale. With a nonzero target mean the
    /// scaling re-scales the just-aligned mean; kept as the default because
    /// it is the literal reading of the two update equations.
    ShiftThenScale,
    /// Scale each column about its own mean, then move the means.
    ScaleAboutMeanThenShift,
}

/// Outcome of one calibration call.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    /// Columns left untouched because their std was ≤ [`SIGMA_EPS`].
    pub degenerate_columns: Vec<usize>,
}

/// Calibrate the novel classifier toward the base classifier's weight
/// distribution, in place. The base classifier is never touched.
pub fn calibrate_novel(
    novel: &mut ClassifierWeights,
    base_stats: &WeightStats,
    sigma_mode: SigmaMode,
    order: CalibrationOrder,
) -> Result<CalibrationReport> {
    let novel_stats = weight_stats(novel);
    calibrate_block(
        &mut novel.theta,
        &novel_stats,
        base_stats.mu_bar,
        base_stats.sigma_bar,
        sigma_mode,
        order,
    )
}

fn calibrate_block(
    theta: &mut Array2<f64>,
    own_stats: &WeightStats,
    target_mu: f64,
    target_sigma: f64,
    sigma_mode: SigmaMode,
    order: CalibrationOrder,
) -> Result<CalibrationReport> {
    let mut degenerate = Vec::new();
    let shared_scale = match sigma_mode {
        SigmaMode::Averaged => {
            if own_stats.sigma_bar <= SIGMA_EPS {
                return Err(Error::Invariant(format!(
                    "average column std {} is degenerate",
                    own_stats.sigma_bar
                )));
            }
            Some(target_sigma / own_stats.sigma_bar)
        }
        SigmaMode::PerClass => None,
    };
    for (i, mut col) in theta.columns_mut().into_iter().enumerate() {
        let sigma_i = own_stats.sigma[i];
        let scale = match shared_scale {
            Some(s) => s,
            None => {
                if sigma_i <= SIGMA_EPS {
                    log::warn!(
                        "calibration: column {i} has degenerate std {sigma_i:.3e}; left as-is"
                    );
                    degenerate.push(i);
                    continue;
                }
                target_sigma / sigma_i
            }
        };
        match order {
            CalibrationOrder::ShiftThenScale => {
                let shift = target_mu - own_stats.mu_bar;
                col.mapv_inplace(|v| (v + shift) * scale);
            }
            CalibrationOrder::ScaleAboutMeanThenShift => {
                let mu_i = own_stats.mu[i];
                let shift = mu_i - own_stats.mu_bar + target_mu;
                col.mapv_inplace(|v| (v - mu_i) * scale + shift);
            }
        }
    }
    Ok(CalibrationReport {
        degenerate_columns: degenerate,
    })
}

/// Ablation variant: push both classifiers toward the pooled averages
/// ½(μ̄_b + μ̄_n) and ½(σ̄_b + σ̄_n) with the same two-step form.
pub fn calibrate_both_variant(
    base: &mut ClassifierWeights,
    novel: &mut ClassifierWeights,
    sigma_mode: SigmaMode,
    order: CalibrationOrder,
) -> Result<(CalibrationReport, CalibrationReport)> {
    let base_stats = weight_stats(base);
    let novel_stats = weight_stats(novel);
    let pooled_mu = 0.5 * (base_stats.mu_bar + novel_stats.mu_bar);
    let pooled_sigma = 0.5 * (base_stats.sigma_bar + novel_stats.sigma_bar);
    let rb = calibrate_block(
        &mut base.theta,
        &base_stats,
        pooled_mu,
        pooled_sigma,
        sigma_mode,
        order,
    )?;
    let rn = calibrate_block(
        &mut novel.theta,
        &novel_stats,
        pooled_mu,
        pooled_sigma,
        sigma_mode,
        order,
    )?;
    Ok((rb, rn))
}

/// Classifier weights placed on a tape: background column first, then base
/// columns, then (in phase 2) novel columns.
#[derive(Clone, Copy)]
pub struct HeadVars {
    pub background: Var,
    pub base: Var,
    pub novel: Option<Var>,
}

impl HeadVars {
    pub fn insert(
        tape: &Tape,
        background: &ClassifierWeights,
        base: &ClassifierWeights,
        novel: Option<&ClassifierWeights>,
        trainable_novel: bool,
        trainable_base: bool,
    ) -> Self {
        let put = |theta: &Array2<f64>, trainable: bool| {
            let data: Data = theta.clone().into_dyn();
            if trainable {
                tape.leaf(data)
            } else {
                tape.constant(data)
            }
        };
        HeadVars {
            background: put(&background.theta, trainable_base),
            base: put(&base.theta, trainable_base),
            novel: novel.map(|n| put(&n.theta, trainable_novel)),
        }
    }
}

/// Score each sub-feature with its own class column.
///
/// Channel layout of the result (B, P, C_total): 0 = background (residual ·
/// θ_bg), then base classes, then novel classes when a novel head is given.
pub fn score(tape: &Tape, decomposition: &Decomposition, heads: &HeadVars) -> Result<Var> {
    let n_subs = decomposition.subs.len();
    let bg_shape = tape.shape(heads.background);
    let base_shape = tape.shape(heads.base);
    let novel_cols = heads.novel.map(|n| tape.shape(n)[1]).unwrap_or(0);
    if bg_shape[1] != 1 {
        return Err(Error::Shape(
            "background head must have exactly one column".into(),
        ));
    }
    if base_shape[1] + novel_cols != n_subs {
        return Err(Error::Shape(format!(
            "{} sub-features but {} classifier columns",
            n_subs,
            base_shape[1] + novel_cols
        )));
    }
    let d = base_shape[0];
    let sub_shape = tape.shape(decomposition.subs[0]);
    if sub_shape[2] != d {
        return Err(Error::Shape(format!(
            "sub-feature dim {} vs classifier dim {d}",
            sub_shape[2]
        )));
    }
    let (b, p) = (sub_shape[0], sub_shape[1]);

    // stack into (B, P, C_total, d) against columns (C_total, d)
    let mut stacked = Vec::with_capacity(n_subs + 1);
    stacked.push(tape.reshape(decomposition.residual, &[b, p, 1, d]));
    for &s in &decomposition.subs {
        stacked.push(tape.reshape(s, &[b, p, 1, d]));
    }
    let stack = tape.concat(2, &stacked);
    let mut theta_cols = vec![tape.t(heads.background), tape.t(heads.base)];
    if let Some(novel) = heads.novel {
        theta_cols.push(tape.t(novel));
    }
    let theta = tape.concat(0, &theta_cols); // (C_total, d)
    let c_total = n_subs + 1;
    let theta4 = tape.reshape(theta, &[1, 1, c_total, d]);
    let prods = tape.mul(stack, theta4);
    Ok(tape.sum_axis(prods, 3)) // (B, P, C_total)
}

/// One softmax across all channels: the combined base+novel probability.
/// Channel order (and so the argmax) is exactly the logit order.
pub fn combine_probabilities(logits: &Data) -> Data {
    let axis = logits.ndim() - 1;
    softmax_data(logits, axis)
}

/// Argmax over the last axis with ties broken toward the lowest channel.
pub fn argmax_channels(values: &Data) -> ndarray::ArrayD<usize> {
    let axis = values.ndim() - 1;
    let c = values.shape()[axis];
    let out_shape: Vec<usize> = values.shape()[..axis].to_vec();
    let mut out = ndarray::ArrayD::<usize>::zeros(ndarray::IxDyn(&out_shape));
    let flat = values
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((values.len() / c, c))
        .unwrap();
    for (i, o) in out.iter_mut().enumerate() {
        let row = flat.row(i);
        let mut best = 0usize;
        let mut best_v = row[0];
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best = j;
                best_v = v;
            }
        }
        *o = best;
    }
    out
}

/// Format per-class weight statistics as an aligned text table.
pub fn stats_table(title: &str, class_ids: &[u8], stats: &WeightStats) -> String {
    let mut out = String::new();
    out.push_str(&format!("{title}\n"));
    out.push_str("class        mu       sigma\n");
    for (i, &id) in class_ids.iter().enumerate() {
        out.push_str(&format!(
            "{id:>5}  {mu:>9.5}  {sigma:>9.5}\n",
            mu = stats.mu[i],
            sigma = stats.sigma[i]
        ));
    }
    out.push_str(&format!(
        "  avg  {:>9.5}  {:>9.5}\n",
        stats.mu_bar, stats.sigma_bar
    ));
    out
}

/// Plain-array helper used by losses/tests: softmax over the last axis of a
/// 1-D logit slice.
pub fn softmax_1d(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::decompose;
    use crate::tensor::Tape;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};

    fn head(cols: &[&[f64]], role: ClassifierRole) -> ClassifierWeights {
        let d = cols[0].len();
        let mut theta = Array2::<f64>::zeros((d, cols.len()));
        for (c, col) in cols.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                theta[[r, c]] = *v;
            }
        }
        ClassifierWeights::new(theta, role).unwrap()
    }

    #[test]
    fn weight_stats_hand_values() {
        let w = head(&[&[1.0, 3.0]], ClassifierRole::Novel);
        let s = weight_stats(&w);
        assert_eq!(s.mu, vec![2.0]);
        assert_eq!(s.sigma, vec![1.0]);
        // constant column: zero std
        let c = head(&[&[4.0, 4.0, 4.0]], ClassifierRole::Novel);
        let cs = weight_stats(&c);
        assert_eq!(cs.mu, vec![4.0]);
        assert_eq!(cs.sigma, vec![0.0]);
        // class-average of means
        let two = head(&[&[0.0, 0.0], &[4.0, 4.0]], ClassifierRole::Base);
        assert_eq!(weight_stats(&two).mu_bar, 2.0);
    }

    #[test]
    fn calibration_hand_example() {
        // single column (1,3); targets mu=0, sigma=2
        let mut novel = head(&[&[1.0, 3.0]], ClassifierRole::Novel);
        let base_stats = WeightStats {
            mu: vec![0.0],
            sigma: vec![2.0],
            mu_bar: 0.0,
            sigma_bar: 2.0,
        };
        let report = calibrate_novel(
            &mut novel,
            &base_stats,
            SigmaMode::PerClass,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        assert!(report.degenerate_columns.is_empty());
        assert_eq!(novel.theta.column(0).to_vec(), vec![-2.0, 2.0]);
        let s = weight_stats(&novel);
        assert_eq!(s.mu, vec![0.0]);
        assert_eq!(s.sigma, vec![2.0]);
    }

    #[test]
    fn calibration_fixed_point() {
        // already matching distributions: shift 0, scale 1
        let mut novel = head(&[&[-1.0, 1.0], &[1.0, -1.0]], ClassifierRole::Novel);
        let base_stats = WeightStats {
            mu: vec![0.0],
            sigma: vec![1.0],
            mu_bar: 0.0,
            sigma_bar: 1.0,
        };
        let before = novel.theta.clone();
        calibrate_novel(
            &mut novel,
            &base_stats,
            SigmaMode::PerClass,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        assert_eq!(novel.theta, before);
    }

    #[test]
    fn calibration_post_state_means_and_stds() {
        // with mu_bar_b = 0, per-class means become (sigma_b/sigma_i)(mu_i - mu_bar_n)
        let mut novel = head(&[&[0.0, 2.0], &[3.0, 7.0]], ClassifierRole::Novel);
        let ns = weight_stats(&novel);
        let base_stats = WeightStats {
            mu: vec![0.0],
            sigma: vec![1.5],
            mu_bar: 0.0,
            sigma_bar: 1.5,
        };
        calibrate_novel(
            &mut novel,
            &base_stats,
            SigmaMode::PerClass,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        let after = weight_stats(&novel);
        for i in 0..2 {
            let expect_mu = (1.5 / ns.sigma[i]) * (ns.mu[i] - ns.mu_bar);
            assert!((after.mu[i] - expect_mu).abs() < 1e-12);
            assert!((after.sigma[i] - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_idempotent_at_zero_base_mean() {
        // single novel column, per-class sigma: second application changes nothing
        let mut novel = head(&[&[0.2, 1.4, -0.7]], ClassifierRole::Novel);
        let base_stats = WeightStats {
            mu: vec![0.0],
            sigma: vec![0.9],
            mu_bar: 0.0,
            sigma_bar: 0.9,
        };
        calibrate_novel(
            &mut novel,
            &base_stats,
            SigmaMode::PerClass,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        let once = novel.theta.clone();
        calibrate_novel(
            &mut novel,
            &base_stats,
            SigmaMode::PerClass,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        let drift = (&novel.theta - &once).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(drift < 1e-6, "drift {drift}");

        // with the averaged-sigma reading it is idempotent for any column count
        let mut multi = head(&[&[0.5, 2.5], &[-1.0, 4.0], &[3.0, 3.5]], ClassifierRole::Novel);
        calibrate_novel(
            &mut multi,
            &base_stats,
            SigmaMode::Averaged,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        let once = multi.theta.clone();
        calibrate_novel(
            &mut multi,
            &base_stats,
            SigmaMode::Averaged,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        let drift = (&multi.theta - &once).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(drift < 1e-6, "averaged-mode drift {drift}");
    }

    #[test]
    fn degenerate_column_is_skipped_with_report() {
        let mut novel = head(&[&[2.0, 2.0], &[1.0, 3.0]], ClassifierRole::Novel);
        let base_stats = WeightStats {
            mu: vec![0.0],
            sigma: vec![1.0],
            mu_bar: 0.0,
            sigma_bar: 1.0,
        };
        let before_col0 = novel.theta.column(0).to_vec();
        let report = calibrate_novel(
            &mut novel,
            &base_stats,
            SigmaMode::PerClass,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        assert_eq!(report.degenerate_columns, vec![0]);
        assert_eq!(novel.theta.column(0).to_vec(), before_col0);
        // the healthy column still lands on the target std
        let after = weight_stats(&novel);
        assert!((after.sigma[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_about_mean_order_aligns_average_mean_exactly() {
        let mut novel = head(&[&[0.0, 2.0], &[3.0, 7.0]], ClassifierRole::Novel);
        let base_stats = WeightStats {
            mu: vec![0.4],
            sigma: vec![1.2],
            mu_bar: 0.4,
            sigma_bar: 1.2,
        };
        calibrate_novel(
            &mut novel,
            &base_stats,
            SigmaMode::PerClass,
            CalibrationOrder::ScaleAboutMeanThenShift,
        )
        .unwrap();
        let after = weight_stats(&novel);
        assert!((after.mu_bar - 0.4).abs() < 1e-12);
        for s in &after.sigma {
            assert!((s - 1.2).abs() < 1e-12);
        }
    }

    #[test]
    fn nbcc_moves_both_toward_pooled_targets() {
        let mut base = head(&[&[1.0, 3.0]], ClassifierRole::Base);
        let mut novel = head(&[&[5.0, 7.0]], ClassifierRole::Novel);
        // pooled mu = (2 + 6)/2 = 4, pooled sigma = (1 + 1)/2 = 1
        calibrate_both_variant(
            &mut base,
            &mut novel,
            SigmaMode::PerClass,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        let bs = weight_stats(&base);
        let ns = weight_stats(&novel);
        assert!((bs.sigma[0] - 1.0).abs() < 1e-12);
        assert!((ns.sigma[0] - 1.0).abs() < 1e-12);
        assert!((bs.mu[0] - 4.0).abs() < 1e-12);
        assert!((ns.mu[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn nbcc_identity_when_distributions_match() {
        // every column already at the pooled std and the block means equal
        let mut base = head(&[&[-1.0, 1.0], &[2.0, 4.0]], ClassifierRole::Base);
        let mut novel = head(&[&[0.0, 2.0], &[1.0, 3.0]], ClassifierRole::Novel);
        let b0 = base.theta.clone();
        let n0 = novel.theta.clone();
        calibrate_both_variant(
            &mut base,
            &mut novel,
            SigmaMode::PerClass,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        let db = (&base.theta - &b0).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        let dn = (&novel.theta - &n0).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(db < 1e-12 && dn < 1e-12);
    }

    #[test]
    fn nbcc_symmetric_means_pool_to_zero() {
        let mut base = head(&[&[0.0, 2.0]], ClassifierRole::Base); // mu 1
        let mut novel = head(&[&[-2.0, 0.0]], ClassifierRole::Novel); // mu -1
        calibrate_both_variant(
            &mut base,
            &mut novel,
            SigmaMode::PerClass,
            CalibrationOrder::ShiftThenScale,
        )
        .unwrap();
        assert!((weight_stats(&base).mu_bar).abs() < 1e-12);
        assert!((weight_stats(&novel).mu_bar).abs() < 1e-12);
    }

    fn feature(vals: &[f64], d: usize) -> ArrayD<f64> {
        let p = vals.len() / d;
        ArrayD::from_shape_vec(IxDyn(&[1, p, d]), vals.to_vec()).unwrap()
    }

    #[test]
    fn scoring_hand_example() {
        // f=(3,4), u1=(1,0), theta1=(2,1): f1=(3,0), logit = 6
        let tape = Tape::new();
        let f = tape.constant(feature(&[3.0, 4.0], 2));
        let protos = tape.constant(arr2(&[[1.0, 0.0]]).into_dyn());
        let dec = decompose(&tape, f, protos).unwrap();
        let bg = head(&[&[0.0, 1.0]], ClassifierRole::Background);
        let base = head(&[&[2.0, 1.0]], ClassifierRole::Base);
        let heads = HeadVars::insert(&tape, &bg, &base, None, false, false);
        let logits = score(&tape, &dec, &heads).unwrap();
        let v = tape.value(logits);
        assert!((v[[0, 0, 1]] - 6.0).abs() < 1e-12, "class-1 logit");
        // background logit = theta_bg . f0 = (0,1).(0,4) = 4
        assert!((v[[0, 0, 0]] - 4.0).abs() < 1e-12, "background logit");
    }

    #[test]
    fn orthogonal_feature_scores_zero_everywhere() {
        let tape = Tape::new();
        let f = tape.constant(feature(&[0.0, 5.0], 2));
        let protos = tape.constant(arr2(&[[1.0, 0.0]]).into_dyn());
        let dec = decompose(&tape, f, protos).unwrap();
        let bg = head(&[&[0.0, 0.0]], ClassifierRole::Background);
        let base = head(&[&[7.0, -3.0]], ClassifierRole::Base);
        let heads = HeadVars::insert(&tape, &bg, &base, None, false, false);
        let logits = score(&tape, &dec, &heads).unwrap();
        assert!(tape.value(logits)[[0, 0, 1]].abs() < 1e-12);
    }

    #[test]
    fn unit_prototype_as_classifier_recovers_projection_norm() {
        // theta_i = u_i (unit), f parallel with norm c -> logit c
        let tape = Tape::new();
        let c = 2.5f64;
        let s = 1.0 / 2.0f64.sqrt();
        let f = tape.constant(feature(&[c * s, c * s], 2));
        let protos = tape.constant(arr2(&[[s, s]]).into_dyn());
        let dec = decompose(&tape, f, protos).unwrap();
        let bg = head(&[&[0.0, 0.0]], ClassifierRole::Background);
        let base = head(&[&[s, s]], ClassifierRole::Base);
        let heads = HeadVars::insert(&tape, &bg, &base, None, false, false);
        let logits = score(&tape, &dec, &heads).unwrap();
        assert!((tape.value(logits)[[0, 0, 1]] - c).abs() < 1e-12);
    }

    #[test]
    fn score_rejects_column_mismatch() {
        let tape = Tape::new();
        let f = tape.constant(feature(&[1.0, 2.0], 2));
        let protos = tape.constant(arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
        let dec = decompose(&tape, f, protos).unwrap();
        let bg = head(&[&[0.0, 0.0]], ClassifierRole::Background);
        let base = head(&[&[1.0, 0.0]], ClassifierRole::Base); // 1 column for 2 subs
        let heads = HeadVars::insert(&tape, &bg, &base, None, false, false);
        assert!(matches!(score(&tape, &dec, &heads), Err(Error::Shape(_))));
    }

    #[test]
    fn combine_probabilities_examples() {
        // equal logits -> uniform
        let logits = ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![2.0, 2.0, 2.0]).unwrap();
        let p = combine_probabilities(&logits);
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // dominant logit saturates
        let logits = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1e4, 0.0]).unwrap();
        let p = combine_probabilities(&logits);
        assert!(p[[0, 0]] > 0.999999);
        // scalar softmax check: logits (1,0)
        let logits = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap();
        let p = combine_probabilities(&logits);
        assert!((p[[0, 0]] - 0.7311).abs() < 1e-4);
        assert!((p[[0, 1]] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_preserves_argmax_and_scaling_invariance() {
        let logits =
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.3, -1.0, 2.0, 5.0, 4.9, -2.0]).unwrap();
        let p = combine_probabilities(&logits);
        assert_eq!(argmax_channels(&p), argmax_channels(&logits));
        let scaled = logits.mapv(|v| v * 3.7);
        assert_eq!(argmax_channels(&scaled), argmax_channels(&logits));
        // probabilities sum to one per row
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| p[[r, c]]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stats_table_lists_every_class() {
        let w = head(&[&[1.0, 3.0], &[0.0, 0.0]], ClassifierRole::Base);
        let s = weight_stats(&w);
        let table = stats_table("base classifier", &[4, 9], &s);
        assert!(table.contains("    4"));
        assert!(table.contains("    9"));
        assert!(table.contains("avg"));
    }

    #[test]
    fn softmax_1d_matches_scalar_computation() {
        let p = softmax_1d(&arr1(&[1.0, 0.0]));
        assert!((p[0] - 1.0f64.exp() / (1.0f64.exp() + 1.0)).abs() < 1e-12);
    }
}
