//! Frozen-encoder forecasting: extract per-window representations, fit a
//! closed-form ridge head with validation-selected regularization, and report
//! MSE/MAE plus a two-sample K-S comparison of input and predicted values.

use serde::{Deserialize, Serialize};

use crate::data::ForecastSample;
use crate::error::{Error, Result};
use crate::model::{encode, project, TeacherStudentState};
use crate::numeric::{Tape, Tensor};

/// Ridge-regression readout mapping a K-dim representation to the
/// flattened P*C future values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForecastHead {
    pub weights: Tensor,
    pub bias: Tensor,
    pub alpha: f64,
    pub horizon: usize,
    pub channels: usize,
}

/// Evaluation summary; `alpha` is 0 and the train/val counts are 0 for the
/// persistence baseline, which has nothing to fit.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub alpha: f64,
    pub ks_statistic: f64,
    pub ks_p: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

// ── representation extraction ───────────────────────────────────────

const ENCODE_CHUNK: usize = 16;

/// Pass each look-back window unmasked through projection + student encoder;
/// the representation at the final timestamp is the window's feature vector.
pub fn encode_windows(
    state: &TeacherStudentState,
    samples: &[ForecastSample],
) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Usage("no windows to encode".into()));
    }
    let dims = *state.dims();
    let shape = samples[0].window.shape().to_vec();
    if shape.len() != 2 || shape[1] != dims.input_channels {
        return Err(Error::Dim(format!(
            "windows must be [T, {}], got {:?}",
            dims.input_channels, shape
        )));
    }
    let (t, c, k) = (shape[0], shape[1], dims.repr_dim);
    let mut features = vec![0.0; samples.len() * k];
    for (chunk_idx, chunk) in samples.chunks(ENCODE_CHUNK).enumerate() {
        let b = chunk.len();
        let mut data = Vec::with_capacity(b * t * c);
        for s in chunk {
            if s.window.shape() != shape.as_slice() {
                return Err(Error::Dim("inconsistent window lengths".into()));
            }
            data.extend_from_slice(s.window.data());
        }
        let batch = Tensor::new(vec![b, t, c], data)?;
        let mut tape = Tape::new();
        let vars = tape.register_params(state.student(), false);
        let x = tape.constant(batch);
        let z = project(&mut tape, &vars, x, &dims)?;
        let h = encode(&mut tape, &vars, z, &dims)?;
        let hv = tape.value(h);
        for bi in 0..b {
            let row = chunk_idx * ENCODE_CHUNK + bi;
            for ki in 0..k {
                features[row * k + ki] = hv.at3(bi, t - 1, ki);
            }
        }
    }
    Tensor::new(vec![samples.len(), k], features)
}

/// Flatten sample targets to [n, P*C].
pub fn stack_targets(samples: &[ForecastSample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Usage("no samples".into()));
    }
    let pc = samples[0].target.len();
    let mut data = Vec::with_capacity(samples.len() * pc);
    for s in samples {
        if s.target.len() != pc {
            return Err(Error::Dim("inconsistent target lengths".into()));
        }
        data.extend_from_slice(s.target.data());
    }
    Tensor::new(vec![samples.len(), pc], data)
}

// ── ridge regression ────────────────────────────────────────────────

/// Cholesky solve of a symmetric positive-definite system with multiple
/// right-hand sides. `a` is n x n row-major, `rhs` is n x m.
fn cholesky_solve(a: &mut [f64], n: usize, rhs: &mut [f64], m: usize) -> Result<()> {
    let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0f64, f64::max);
    for j in 0..n {
        for kk in 0..j {
            let l = a[j * n + kk];
            for i in j..n {
                a[i * n + j] -= a[i * n + kk] * l;
            }
        }
        let pivot = a[j * n + j];
        if !(pivot > 1e-12 * max_diag.max(1.0)) {
            return Err(Error::Conditioning(
                "normal equations are singular; use a positive ridge alpha".into(),
            ));
        }
        let root = pivot.sqrt();
        for i in j..n {
            a[i * n + j] /= root;
        }
    }
    // forward substitution L y = rhs
    for col in 0..m {
        for i in 0..n {
            let mut acc = rhs[i * m + col];
            for kk in 0..i {
                acc -= a[i * n + kk] * rhs[kk * m + col];
            }
            rhs[i * m + col] = acc / a[i * n + i];
        }
        // back substitution L^T x = y
        for i in (0..n).rev() {
            let mut acc = rhs[i * m + col];
            for kk in (i + 1)..n {
                acc -= a[kk * n + i] * rhs[kk * m + col];
            }
            rhs[i * m + col] = acc / a[i * n + i];
        }
    }
    Ok(())
}

/// Closed-form regularized least squares: solve
/// (X^T X + alpha I) W = X^T Y with a constant-1 column appended for the
/// bias and excluded from the penalty.
pub fn ridge_fit(
    features: &Tensor,
    targets: &Tensor,
    alpha: f64,
    horizon: usize,
    channels: usize,
) -> Result<ForecastHead> {
    if features.rank() != 2 || targets.rank() != 2 {
        return Err(Error::Dim("features and targets must be rank 2".into()));
    }
    let (n, k) = (features.shape()[0], features.shape()[1]);
    let m = targets.shape()[1];
    if targets.shape()[0] != n {
        return Err(Error::Dim(format!(
            "{n} feature rows vs {} target rows",
            targets.shape()[0]
        )));
    }
    if n == 0 {
        return Err(Error::Usage("cannot fit on zero samples".into()));
    }
    if m != horizon * channels {
        return Err(Error::Dim(format!(
            "target width {m} is not horizon {horizon} x channels {channels}"
        )));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Param(format!("alpha must be >= 0, got {alpha}")));
    }

    // Gram matrix of [X | 1] with the penalty on the K feature rows only.
    let d = k + 1;
    let mut gram = vec![0.0; d * d];
    let x = features.data();
    for row in 0..n {
        let xr = &x[row * k..(row + 1) * k];
        for i in 0..k {
            let xi = xr[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..k {
                gram[i * d + j] += xi * xr[j];
            }
            gram[i * d + k] += xi;
        }
    }
    for i in 0..k {
        for j in i..k {
            gram[j * d + i] = gram[i * d + j];
        }
        gram[k * d + i] = gram[i * d + k];
        gram[i * d + i] += alpha;
    }
    gram[k * d + k] = n as f64;

    // right-hand side [X | 1]^T Y
    let mut rhs = vec![0.0; d * m];
    let y = targets.data();
    for row in 0..n {
        let xr = &x[row * k..(row + 1) * k];
        let yr = &y[row * m..(row + 1) * m];
        for i in 0..k {
            let xi = xr[i];
            if xi == 0.0 {
                continue;
            }
            for o in 0..m {
                rhs[i * m + o] += xi * yr[o];
            }
        }
        for o in 0..m {
            rhs[k * m + o] += yr[o];
        }
    }

    cholesky_solve(&mut gram, d, &mut rhs, m)?;

    let weights = Tensor::new(vec![k, m], rhs[..k * m].to_vec())?;
    let bias = Tensor::new(vec![m], rhs[k * m..].to_vec())?;
    Ok(ForecastHead {
        weights,
        bias,
        alpha,
        horizon,
        channels,
    })
}

impl ForecastHead {
    /// Predictions [n, P*C] for feature rows [n, K].
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let (n, k) = (features.shape()[0], features.shape()[1]);
        let m = self.bias.len();
        if self.weights.shape() != [k, m] {
            return Err(Error::Dim(format!(
                "head expects {} features, got {k}",
                self.weights.shape()[0]
            )));
        }
        let mut out = vec![0.0; n * m];
        for row in 0..n {
            out[row * m..(row + 1) * m].copy_from_slice(self.bias.data());
            for i in 0..k {
                let xi = features.data()[row * k + i];
                if xi == 0.0 {
                    continue;
                }
                for o in 0..m {
                    out[row * m + o] += xi * self.weights.data()[i * m + o];
                }
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Squared Frobenius norm of the penalized weights (bias excluded).
    pub fn weight_norm(&self) -> f64 {
        self.weights.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Fit on the training features for every grid value, evaluate validation
/// MSE, and return the winner; exact ties go to the larger (more
/// regularized) alpha.
pub fn alpha_select(
    train_features: &Tensor,
    train_targets: &Tensor,
    val_features: &Tensor,
    val_targets: &Tensor,
    grid: &[f64],
    horizon: usize,
    channels: usize,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Usage("alpha grid is empty".into()));
    }
    if val_features.shape()[0] == 0 {
        return Err(Error::Usage("validation set is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best = (f64::INFINITY, sorted[0]);
    for &alpha in &sorted {
        let head = ridge_fit(train_features, train_targets, alpha, horizon, channels)?;
        let preds = head.predict(val_features)?;
        let (mse, _) = metrics_from_predictions(&preds, val_targets)?;
        if mse <= best.0 {
            best = (mse, alpha);
        }
    }
    Ok(best.1)
}

/// MSE and MAE over all predicted values, 1/(P*C) per sample then averaged
/// over samples (equivalently one mean over every value).
pub fn metrics_from_predictions(predictions: &Tensor, targets: &Tensor) -> Result<(f64, f64)> {
    if predictions.shape() != targets.shape() {
        return Err(Error::Dim(format!(
            "prediction shape {:?} vs target shape {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Usage("no predictions to score".into()));
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, t) in predictions.data().iter().zip(targets.data()) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    let n = predictions.len() as f64;
    Ok((se / n, ae / n))
}

fn pooled_window_values(samples: &[ForecastSample]) -> Vec<f64> {
    samples
        .iter()
        .flat_map(|s| s.window.data().iter().copied())
        .collect()
}

fn report_from(
    predictions: &Tensor,
    samples: &[ForecastSample],
    horizon: usize,
    alpha: f64,
    n_train: usize,
    n_val: usize,
) -> Result<MetricsReport> {
    let targets = stack_targets(samples)?;
    let (mse, mae) = metrics_from_predictions(predictions, &targets)?;
    let inputs = pooled_window_values(samples);
    let (ks_statistic, ks_p) = ks_test(&inputs, predictions.data())?;
    Ok(MetricsReport {
        horizon,
        mse,
        mae,
        alpha,
        ks_statistic,
        ks_p,
        n_train,
        n_val,
        n_test: samples.len(),
    })
}

/// Score a fitted head on test samples. Metrics are computed in the
/// normalized space the head was trained in; the K-S entry compares pooled
/// look-back inputs with pooled predictions.
pub fn evaluate(
    head: &ForecastHead,
    state: &TeacherStudentState,
    samples: &[ForecastSample],
    n_train: usize,
    n_val: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Usage("empty test set".into()));
    }
    let features = encode_windows(state, samples)?;
    let predictions = head.predict(&features)?;
    report_from(&predictions, samples, head.horizon, head.alpha, n_train, n_val)
}

/// Repeat the last observed value of each window across the whole horizon.
pub fn persistence_baseline(samples: &[ForecastSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Usage("empty sample set".into()));
    }
    let c = samples[0].window.shape()[1];
    let horizon = samples[0].target.shape()[0];
    let m = horizon * c;
    let mut preds = vec![0.0; samples.len() * m];
    for (row, s) in samples.iter().enumerate() {
        let t = s.window.shape()[0];
        let last = &s.window.data()[(t - 1) * c..t * c];
        for p in 0..horizon {
            preds[row * m + p * c..row * m + (p + 1) * c].copy_from_slice(last);
        }
    }
    let predictions = Tensor::new(vec![samples.len(), m], preds)?;
    report_from(&predictions, samples, horizon, 0.0, 0, 0)
}

// ── two-sample Kolmogorov-Smirnov ───────────────────────────────────

/// Asymptotic Kolmogorov survival function Q(lambda) = P(D_n > lambda-ish),
/// evaluated with the series appropriate to the argument's size.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // complementary form converges fast for small arguments
        let w = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let sum = w + w.powi(9) + w.powi(25) + w.powi(49);
        let p = 1.0 - (std::f64::consts::TAU).sqrt() / lambda * sum;
        return p.clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample K-S test: D = sup |F_a - F_b| over the empirical CDFs, with
/// the p-value from the asymptotic Kolmogorov distribution at effective
/// size n_a * n_b / (n_a + n_b).
pub fn ks_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("K-S test needs non-empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample value"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample value"));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);

    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < sa.len() && j < sb.len() {
        let x = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }

    let n_eff = na * nb / (na + nb);
    let p = kolmogorov_survival(n_eff.sqrt() * d);
    Ok((d, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn exact_interpolation_through_the_origin_line() {
        // y = 2x with alpha = 0: W = [2], b = 0
        let x = Tensor::new(vec![4, 1], vec![-1.0, 0.5, 1.0, 2.0]).unwrap();
        let y = x.map(|v| 2.0 * v);
        let head = ridge_fit(&x, &y, 0.0, 1, 1).unwrap();
        assert!((head.weights.data()[0] - 2.0).abs() < 1e-10);
        assert!(head.bias.data()[0].abs() < 1e-10);
    }

    #[test]
    fn huge_alpha_shrinks_weights_to_zero_and_bias_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(&mut rng, 30, 4);
        let y = rand_matrix(&mut rng, 30, 2);
        let head = ridge_fit(&x, &y, 1e12, 2, 1).unwrap();
        for &w in head.weights.data() {
            assert!(w.abs() < 1e-9, "weight {w}");
        }
        for o in 0..2 {
            let mean: f64 = (0..30).map(|r| y.data()[r * 2 + o]).sum::<f64>() / 30.0;
            assert!((head.bias.data()[o] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn stationarity_of_the_ridge_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, k, m) = (20, 5, 3);
        let x = rand_matrix(&mut rng, n, k);
        let y = rand_matrix(&mut rng, n, m);
        for alpha in [0.0, 0.5, 10.0] {
            let head = ridge_fit(&x, &y, alpha, m, 1).unwrap();
            let preds = head.predict(&x).unwrap();
            // grad wrt W: X^T (XW + 1b - Y) + alpha W = 0; wrt b: 1^T r = 0
            for o in 0..m {
                let mut bias_grad = 0.0;
                for row in 0..n {
                    bias_grad += preds.data()[row * m + o] - y.data()[row * m + o];
                }
                assert!(bias_grad.abs() < 1e-8, "bias grad {bias_grad}");
                for i in 0..k {
                    let mut g = alpha * head.weights.data()[i * m + o];
                    for row in 0..n {
                        g += x.data()[row * k + i]
                            * (preds.data()[row * m + o] - y.data()[row * m + o]);
                    }
                    assert!(g.abs() < 1e-8, "weight grad {g}");
                }
            }
        }
    }

    #[test]
    fn underdetermined_at_alpha_zero_is_conditioning_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 3, 8); // n < K
        let y = rand_matrix(&mut rng, 3, 1);
        let err = ridge_fit(&x, &y, 0.0, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Conditioning(_)));
        assert!(err.to_string().contains("alpha"), "{err}");
        assert!(ridge_fit(&x, &y, 0.5, 1, 1).is_ok());
    }

    #[test]
    fn ridge_path_norm_is_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_matrix(&mut rng, 40, 6);
        let y = rand_matrix(&mut rng, 40, 2);
        let grid = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0];
        let mut last = f64::INFINITY;
        for alpha in grid {
            let norm = ridge_fit(&x, &y, alpha, 2, 1).unwrap().weight_norm();
            assert!(norm <= last + 1e-12, "norm {norm} grew at alpha {alpha}");
            last = norm;
        }
    }

    #[test]
    fn alpha_selection_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w_true = rand_matrix(&mut rng, 6, 2);
        let make = |rng: &mut ChaCha8Rng, n: usize| {
            let x = rand_matrix(rng, n, 6);
            let mut y = vec![0.0; n * 2];
            for r in 0..n {
                for o in 0..2 {
                    for i in 0..6 {
                        y[r * 2 + o] += x.data()[r * 6 + i] * w_true.data()[i * 2 + o];
                    }
                }
            }
            (x, Tensor::new(vec![n, 2], y).unwrap())
        };
        let (xt, yt) = make(&mut rng, 50);
        let (xv, yv) = make(&mut rng, 30);
        let grid = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0];
        // noiseless linear target: the least-regularized alpha wins
        let alpha = alpha_select(&xt, &yt, &xv, &yv, &grid, 2, 1).unwrap();
        assert_eq!(alpha, 0.1);
        assert!(grid.contains(&alpha));
        // single-element grid is forced
        let alpha = alpha_select(&xt, &yt, &xv, &yv, &[7.5], 2, 1).unwrap();
        assert_eq!(alpha, 7.5);
        // empty grid / empty validation set are usage errors
        assert!(alpha_select(&xt, &yt, &xv, &yv, &[], 2, 1).is_err());
    }

    #[test]
    fn metric_identities_and_oracle() {
        let preds = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let targs = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let (mse, mae) = metrics_from_predictions(&preds, &targs).unwrap();
        assert_eq!((mse, mae), (1.0, 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = rand_matrix(&mut rng, 7, 5);
        let t = rand_matrix(&mut rng, 7, 5);
        let (mse, mae) = metrics_from_predictions(&p, &t).unwrap();
        // direct two-loop oracle
        let mut se = 0.0;
        let mut ae = 0.0;
        for r in 0..7 {
            for cidx in 0..5 {
                let d = p.data()[r * 5 + cidx] - t.data()[r * 5 + cidx];
                se += d * d;
                ae += d.abs();
            }
        }
        assert!((mse - se / 35.0).abs() < 1e-12);
        assert!((mae - ae / 35.0).abs() < 1e-12);

        // perfect predictions
        let (mse, mae) = metrics_from_predictions(&p, &p).unwrap();
        assert_eq!((mse, mae), (0.0, 0.0));

        // MAE <= sqrt(MSE) (Jensen)
        let (mse, mae) = metrics_from_predictions(&p, &t).unwrap();
        assert!(mae <= mse.sqrt() + 1e-15);
    }

    fn sample_from(window: Vec<f64>, target: Vec<f64>, c: usize) -> ForecastSample {
        ForecastSample {
            window: Tensor::new(vec![window.len() / c, c], window).unwrap(),
            target: Tensor::new(vec![target.len() / c, c], target).unwrap(),
            origin: (0, 0),
        }
    }

    #[test]
    fn persistence_on_constant_series_is_perfect() {
        let samples = vec![sample_from(vec![2.0; 6], vec![2.0; 4], 1)];
        let report = persistence_baseline(&samples).unwrap();
        assert_eq!(report.mse, 0.0);
        assert_eq!(report.mae, 0.0);
    }

    #[test]
    fn persistence_on_half_period_sinusoid_matches_closed_form() {
        // pure sinusoid, period 24, horizon 12: predictions repeat x(t) so the
        // error at step p is x(t+p) - x(t), summable in closed form.
        let period = 24usize;
        let horizon = period / 2;
        let lookback = 4usize;
        let amp = 1.3;
        let xval = |t: usize| amp * (std::f64::consts::TAU * t as f64 / period as f64).sin();
        let total = 200usize;
        let mut samples = Vec::new();
        let mut expected_se = 0.0;
        let mut count = 0usize;
        for s in 0..(total - lookback - horizon) {
            let window: Vec<f64> = (s..s + lookback).map(xval).collect();
            let target: Vec<f64> = (s + lookback..s + lookback + horizon).map(xval).collect();
            let last = window[lookback - 1];
            for v in &target {
                expected_se += (v - last) * (v - last);
                count += 1;
            }
            samples.push(sample_from(window, target, 1));
        }
        let report = persistence_baseline(&samples).unwrap();
        let expected = expected_se / count as f64;
        assert!((report.mse - expected).abs() < 1e-9, "{} vs {}", report.mse, expected);
    }

    #[test]
    fn persistence_on_white_noise_doubles_the_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sigma = 0.8;
        let n = 60_000;
        let series: Vec<f64> = (0..n)
            .map(|_| sigma * crate::numeric::standard_normal(&mut rng))
            .collect();
        let mut samples = Vec::new();
        for s in (0..n - 2).step_by(2) {
            samples.push(sample_from(vec![series[s]], vec![series[s + 1]], 1));
        }
        let report = persistence_baseline(&samples).unwrap();
        let expected = 2.0 * sigma * sigma;
        assert!(
            (report.mse - expected).abs() < 0.05 * expected,
            "{} vs {}",
            report.mse,
            expected
        );
    }

    #[test]
    fn ks_identities() {
        let a = vec![0.3, 1.2, -0.5, 0.0];
        let (d, p) = ks_test(&a, &a).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(p, 1.0);

        let (d, _) = ks_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(d, 1.0);

        assert!(ks_test(&[], &a).is_err());
    }

    #[test]
    fn ks_shift_invariance_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..48).map(|_| rng.random_range(-0.5..1.5)).collect();
        let (d, p) = ks_test(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&p));
        let shift = 13.7;
        let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + shift).collect();
        let (d2, _) = ks_test(&a2, &b2).unwrap();
        assert!((d - d2).abs() < 1e-15);
    }

    #[test]
    fn ks_handles_ties_correctly() {
        // duplicated values force the tie-advancing branch
        let a = vec![1.0, 1.0, 1.0, 2.0];
        let b = vec![1.0, 2.0, 2.0, 2.0];
        let (d, _) = ks_test(&a, &b).unwrap();
        // F_a(1) = 0.75, F_b(1) = 0.25 -> D = 0.5
        assert!((d - 0.5).abs() < 1e-15);
    }
}
