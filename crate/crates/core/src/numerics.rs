//! Scalar and vector primitives shared by the losses and metrics.
//!
//! Everything here works on `f64` slices. Probabilities that feed a logarithm
//! are clamped to `[PROB_EPS, 1 - PROB_EPS]` first.

use thiserror::Error;

/// Clamp applied to probabilities before any logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Number of bins per valence/arousal dimension.
pub const NUM_VA_BINS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("value {value} outside bin range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite function value at coordinate {coord}")]
    GradCheckNonFinite { coord: usize },
}

/// A softmax output: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        entropy(&self.0)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Equal-width bins over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinGrid {
    num_bins: usize,
    lo: f64,
    hi: f64,
    centers: Vec<f64>,
}

impl Default for BinGrid {
    fn default() -> Self {
        Self::new(NUM_VA_BINS, -1.0, 1.0)
    }
}

impl BinGrid {
    pub fn new(num_bins: usize, lo: f64, hi: f64) -> Self {
        assert!(num_bins >= 1, "bin grid needs at least one bin");
        assert!(hi > lo, "bin grid needs hi > lo");
        let width = (hi - lo) / num_bins as f64;
        let centers = (0..num_bins).map(|k| lo + width * (k as f64 + 0.5)).collect();
        Self {
            num_bins,
            lo,
            hi,
            centers,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.num_bins as f64
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Bin index of `v`. Bins are left-closed/right-open except the last,
    /// which also contains `hi`.
    pub fn to_bin(&self, v: f64) -> Result<usize, NumericsError> {
        if !v.is_finite() {
            return Err(NumericsError::NonFinite(v));
        }
        if v < self.lo || v > self.hi {
            return Err(NumericsError::OutOfRange {
                value: v,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let idx = ((v - self.lo) / self.width()).floor() as usize;
        Ok(idx.min(self.num_bins - 1))
    }

    /// Dot product of the bin centers with `probs`.
    pub fn expectation(&self, probs: &[f64]) -> f64 {
        assert_eq!(probs.len(), self.num_bins, "probability/bin count mismatch");
        dot(&self.centers, probs)
    }
}

/// Free-function form of [`BinGrid::to_bin`].
pub fn to_bin(v: f64, grid: &BinGrid) -> Result<usize, NumericsError> {
    grid.to_bin(v)
}

/// Expected bin center under `probs`; always within the outermost centers.
pub fn bin_expectation(probs: &ProbVector, grid: &BinGrid) -> f64 {
    grid.expectation(probs.as_slice())
}

/// Logistic sigmoid, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn sigmoid(x: f64) -> Result<f64, NumericsError> {
    if !x.is_finite() {
        return Err(NumericsError::NonFinite(x));
    }
    Ok(sigmoid_clamped(x))
}

/// Sigmoid without the finiteness check, for inner loops over values the
/// caller already validated.
#[inline]
pub(crate) fn sigmoid_clamped(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Temperature-scaled softmax `exp(y_d / T) / sum_c exp(y_c / T)`.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Result<ProbVector, NumericsError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(NumericsError::NonPositiveTemperature(temperature));
    }
    assert!(!logits.is_empty(), "softmax of an empty vector");
    if let Some(&bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite(bad));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_t_into(logits, temperature, &mut out);
    Ok(ProbVector(out))
}

/// In-place softmax used by the loss kernels. Inputs must be finite and
/// `temperature > 0`.
pub(crate) fn softmax_t_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Total binary cross entropy `-sum_d [y log z + (1-y) log(1-z)]`.
///
/// Soft targets in `[0, 1]` are allowed. `z` is clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce(y: &[f64], z: &[f64]) -> f64 {
    assert_eq!(y.len(), z.len(), "bce: dimension mismatch");
    y.iter()
        .zip(z)
        .map(|(&y, &z)| {
            let z = z.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * z.ln() + (1.0 - y) * (1.0 - z).ln())
        })
        .sum()
}

/// Cross entropy `-sum_d y_d log z_d` with `z` clamped away from zero.
pub fn ce(y: &[f64], z: &[f64]) -> f64 {
    assert_eq!(y.len(), z.len(), "ce: dimension mismatch");
    y.iter()
        .zip(z)
        .map(|(&y, &z)| if y == 0.0 { 0.0 } else { -y * z.max(PROB_EPS).ln() })
        .sum()
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

/// Sum of element-wise binary entropies.
pub fn binary_entropy(p: &[f64]) -> f64 {
    p.iter()
        .map(|&v| {
            let v = v.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(v * v.ln() + (1.0 - v) * (1.0 - v).ln())
        })
        .sum()
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Population statistics used by [`ccc`] and its gradient.
#[derive(Debug, Clone, Copy)]
struct PairStats {
    mean_y: f64,
    mean_t: f64,
    var_y: f64,
    var_t: f64,
    cov: f64,
}

impl PairStats {
    fn new(y: &[f64], t: &[f64]) -> Self {
        let n = y.len() as f64;
        let mean_y = y.iter().sum::<f64>() / n;
        let mean_t = t.iter().sum::<f64>() / n;
        let (mut var_y, mut var_t, mut cov) = (0.0, 0.0, 0.0);
        for (&a, &b) in y.iter().zip(t) {
            let (da, db) = (a - mean_y, b - mean_t);
            var_y += da * da;
            var_t += db * db;
            cov += da * db;
        }
        Self {
            mean_y,
            mean_t,
            var_y: var_y / n,
            var_t: var_t / n,
            cov: cov / n,
        }
    }

    fn denominator(&self) -> f64 {
        let dm = self.mean_y - self.mean_t;
        self.var_y + self.var_t + dm * dm
    }
}

/// Concordance correlation coefficient in covariance form with population
/// statistics: `2 cov(y,t) / (var_y + var_t + (mean_y - mean_t)^2)`.
///
/// Returns 1 when the denominator is exactly zero (both sequences constant
/// and equal).
pub fn ccc(y: &[f64], t: &[f64]) -> Result<f64, NumericsError> {
    if y.len() != t.len() {
        return Err(NumericsError::LengthMismatch(y.len(), t.len()));
    }
    if y.len() < 2 {
        return Err(NumericsError::TooFewSamples(y.len()));
    }
    let s = PairStats::new(y, t);
    let den = s.denominator();
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * s.cov / den).clamp(-1.0, 1.0))
}

/// CCC together with its gradient with respect to each entry of `t`.
///
/// `y` is treated as fixed ground truth.
pub fn ccc_with_grad(y: &[f64], t: &[f64]) -> Result<(f64, Vec<f64>), NumericsError> {
    if y.len() != t.len() {
        return Err(NumericsError::LengthMismatch(y.len(), t.len()));
    }
    if y.len() < 2 {
        return Err(NumericsError::TooFewSamples(y.len()));
    }
    let s = PairStats::new(y, t);
    let den = s.denominator();
    let n = y.len() as f64;
    if den == 0.0 {
        return Ok((1.0, vec![0.0; t.len()]));
    }
    let num = 2.0 * s.cov;
    let value = num / den;
    // d num / d t_k = 2 (y_k - mean_y) / n, d den / d t_k = 2 (t_k - mean_y) / n
    let grad = y
        .iter()
        .zip(t)
        .map(|(&yk, &tk)| {
            let dnum = 2.0 * (yk - s.mean_y) / n;
            let dden = 2.0 * (tk - s.mean_y) / n;
            (dnum * den - num * dden) / (den * den)
        })
        .collect();
    Ok((value, grad))
}

/// Result of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|numeric - analytic| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_coord: usize,
}

/// Default central-difference step at 64-bit precision.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares `analytic` against central differences of `f` around `x0`.
pub fn grad_check<F>(mut f: F, x0: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if x0.len() != analytic.len() {
        return Err(NumericsError::LengthMismatch(x0.len(), analytic.len()));
    }
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericsError::GradCheckNonFinite { coord: i });
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = (numeric - analytic[i]).abs() / analytic[i].abs().max(1.0);
        if err > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_coord: i,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0).unwrap(), 0.5);
        assert_eq!(sigmoid(50.0).unwrap(), 1.0 - PROB_EPS);
        assert_eq!(sigmoid(-50.0).unwrap(), PROB_EPS);
        assert_abs_diff_eq!(sigmoid(1.0).unwrap(), 0.731_058_578_630_004_9, epsilon = 1e-15);
        assert!(matches!(sigmoid(f64::NAN), Err(NumericsError::NonFinite(_))));
        assert!(sigmoid(f64::INFINITY).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_t(&[3.0, 3.0, 3.0, 3.0], 0.7).unwrap();
        for &v in p.as_slice() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
        let p = softmax_t(&[2.0, 0.0], 2.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.731_058_578_630_004_9, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.268_941_421_369_995_1, epsilon = 1e-12);
        let q = softmax_t(&[1.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(q[0], p[0], epsilon = 1e-15);
        assert!(matches!(
            softmax_t(&[1.0], 0.0),
            Err(NumericsError::NonPositiveTemperature(_))
        ));
        assert!(softmax_t(&[1.0], -1.0).is_err());
        // overflow safety
        let p = softmax_t(&[1000.0, 999.0], 1.0).unwrap();
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bce_examples() {
        assert!(bce(&[1.0, 0.0], &[1.0 - PROB_EPS, PROB_EPS]) <= 1e-10);
        assert_abs_diff_eq!(bce(&[1.0], &[0.5]), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(bce(&[0.5], &[0.5]), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn bce_rejects_mismatch() {
        bce(&[1.0, 0.0], &[0.5]);
    }

    #[test]
    fn ce_examples() {
        assert_abs_diff_eq!(
            ce(&[0.0, 1.0, 0.0], &[0.25, 0.5, 0.25]),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert!(ce(&[0.0, 1.0], &[PROB_EPS, 1.0 - PROB_EPS]) < 1e-10);
        assert_abs_diff_eq!(
            ce(&[0.5, 0.5], &[0.25, 0.75]),
            -0.5 * (0.25f64.ln() + 0.75f64.ln()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn bin_examples() {
        let g = BinGrid::default();
        assert_eq!(g.to_bin(-1.0).unwrap(), 0);
        assert_eq!(g.to_bin(1.0).unwrap(), 19);
        assert_eq!(g.to_bin(0.0).unwrap(), 10);
        assert_eq!(g.to_bin(0.0999).unwrap(), 10);
        assert!(matches!(g.to_bin(1.000001), Err(NumericsError::OutOfRange { .. })));
        assert!(g.to_bin(-1.5).is_err());
        for (k, &c) in g.centers().iter().enumerate() {
            assert_eq!(g.to_bin(c).unwrap(), k);
        }
        assert!(g.centers().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bin_expectation_examples() {
        let g = BinGrid::default();
        let onehot = |k: usize| {
            let mut v = vec![0.0; 20];
            v[k] = 1.0;
            ProbVector(v)
        };
        assert_abs_diff_eq!(bin_expectation(&onehot(10), &g), 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(bin_expectation(&onehot(0), &g), -0.95, epsilon = 1e-12);
        let uniform = softmax_t(&[0.0; 20], 1.0).unwrap();
        assert_abs_diff_eq!(bin_expectation(&uniform, &g), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ccc_examples() {
        let y = [0.0, 1.0, -1.0];
        assert_abs_diff_eq!(ccc(&y, &y).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ccc(&[1.0, -1.0], &[-1.0, 1.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert_eq!(ccc(&[0.3, 0.3, 0.3], &[-1.0, 0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(ccc(&[0.2, 0.2], &[0.2, 0.2]).unwrap(), 1.0);
        assert!(matches!(ccc(&[1.0], &[1.0]), Err(NumericsError::TooFewSamples(1))));
    }

    #[test]
    fn grad_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        let r = grad_check(|x| x.iter().map(|v| v * v).sum(), &x0, &g, GRAD_CHECK_STEP).unwrap();
        assert!(r.max_rel_error < 1e-8);

        // bce(y, sigmoid(x)) has gradient sigmoid(x) - y
        let y = [1.0, 0.0, 0.3, 0.8, 0.0, 1.0];
        let g: Vec<f64> = x0.iter().zip(&y).map(|(&x, &y)| sigmoid_clamped(x) - y).collect();
        let f = |x: &[f64]| {
            let z: Vec<f64> = x.iter().map(|&v| sigmoid_clamped(v)).collect();
            bce(&y, &z)
        };
        assert!(grad_check(f, &x0, &g, GRAD_CHECK_STEP).unwrap().max_rel_error < 1e-6);

        let truth: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = ccc_with_grad(&truth, &x0).unwrap();
        let r = grad_check(|t| ccc(&truth, t).unwrap(), &x0, &g, GRAD_CHECK_STEP).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let err = grad_check(
            |x| if x[1] > 0.5 { f64::NAN } else { x[0] },
            &[0.0, 0.5],
            &[1.0, 0.0],
            0.1,
        )
        .unwrap_err();
        assert_eq!(err, NumericsError::GradCheckNonFinite { coord: 1 });
    }

    #[test]
    fn entropy_increases_with_temperature() {
        let logits = [1.5, -0.2, 0.7, 3.0, -1.0];
        let temps = [0.5, 1.0, 1.5, 3.0, 10.0];
        let h: Vec<f64> = temps
            .iter()
            .map(|&t| softmax_t(&logits, t).unwrap().entropy())
            .collect();
        assert!(h.windows(2).all(|w| w[0] < w[1]), "{h:?}");
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-30.0f64..30.0, 1..40)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in logits_strategy(), t in 0.1f64..100.0) {
            let p = softmax_t(&logits, t).unwrap();
            let s: f64 = p.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn softmax_preserves_argmax(logits in logits_strategy(), t in 0.05f64..50.0) {
            let p = softmax_t(&logits, t).unwrap();
            // exact ties in the logits can collapse differently; compare values
            prop_assert_eq!(logits[p.argmax()], logits[argmax(&logits)]);
        }

        #[test]
        fn bce_nonnegative(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..16)) {
            let (y, z): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(bce(&y, &z) >= 0.0);
        }

        #[test]
        fn ce_gibbs_inequality(a in prop::collection::vec(-5.0f64..5.0, 2..12), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y = softmax_t(&a, 1.0).unwrap();
            let z = softmax_t(&b, 1.0).unwrap();
            prop_assert!(ce(y.as_slice(), z.as_slice()) >= y.entropy() - 1e-12);
        }

        #[test]
        fn ccc_symmetric_and_bounded(pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..30)) {
            let (y, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let a = ccc(&y, &t).unwrap();
            let b = ccc(&t, &y).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a.abs() <= 1.0);
        }

        #[test]
        fn bin_expectation_in_center_range(logits in prop::collection::vec(-20.0f64..20.0, 20)) {
            let g = BinGrid::default();
            let v = bin_expectation(&softmax_t(&logits, 1.0).unwrap(), &g);
            prop_assert!((-0.95 - 1e-12..=0.95 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn ccc_bounded_on_many_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let n = rng.gen_range(2..12);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!(ccc(&y, &t).unwrap().abs() <= 1.0);
        }
    }
}
