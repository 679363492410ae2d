//! Monte Carlo verification of the two-step increment statistics.
//!
//! The quantity under study is the adapter output after one SGD step on the
//! up-projection from zero init,
//!
//!   w[i] = -lr * delta[i] * scaling^2 * (a x_t) . (a x_t1),
//!
//! sampled with i.i.d. unit-normal down-projection entries and inputs. This
//! module estimates its variance and the scaling of E[||w||] with rank, and
//! evaluates two reference formulas to compare against.
//!
//! The Monte Carlo loop is split into fixed-size chunks, each with a seed
//! derived from (experiment seed, chunk index). Chunks may be evaluated on
//! any number of worker threads; partial moments are merged in chunk order,
//! so results are byte-identical for every worker count.

use crate::adapters::{scaling_factor, ScalingPolicy};
use crate::error::{CoreError, Result};
use crate::grad::two_step_increment;
use crate::linalg::{
    gaussian_matrix_from, gaussian_vector_from, l2_norm, RngSeed, SeededRng, Vector,
};
use rayon::prelude::*;

/// Samples per Monte Carlo chunk; fixed so the chunk layout (and therefore
/// the byte-exact result) does not depend on worker count.
const CHUNK: usize = 8192;

/// Minimum sample count for any statistical claim.
pub const MIN_SAMPLES: usize = 1000;

/// Modeled variance of the two-step increment:
/// `lr^2 * delta^2 * scaling^4 * r^2 * p_in`.
///
/// This keeps the cross-rank pairings of the expanded square and drops the
/// same-row terms that scale like `r * p_in^2`, so it is accurate only in
/// the `r >> p_in` regime. Reports carry it side by side with
/// [`exact_increment_variance`].
pub fn closed_form_variance(lr: f64, delta: f64, scaling: f64, r: usize, p_in: usize) -> f64 {
    let g2 = scaling * scaling;
    lr * lr * delta * delta * g2 * g2 * (r * r) as f64 * p_in as f64
}

/// Exact variance of the two-step increment under the i.i.d. unit-normal
/// draw model: `lr^2 * delta^2 * scaling^4 * r * p_in * (p_in + r + 1)`.
///
/// With s = (a x_t) . (a x_t1) = sum_k (row_k . x_t)(row_k . x_t1), the
/// shared-row terms give E[||row||^4] = p_in (p_in + 2) each and the r(r-1)
/// cross-row pairs give E[(x_t . x_t1)^2] = p_in each, so
/// E[s^2] = r p_in (p_in + 2) + r (r - 1) p_in = r p_in (p_in + r + 1).
pub fn exact_increment_variance(lr: f64, delta: f64, scaling: f64, r: usize, p_in: usize) -> f64 {
    let g2 = scaling * scaling;
    lr * lr * delta * delta * g2 * g2 * (r * p_in) as f64 * (p_in + r + 1) as f64
}

/// Modeled magnitude of the increment vector:
/// `sqrt(p_out * p_in) * lr * scaling^2 * r * delta_m`,
/// the max-term approximation `c * scaling^2 * r` with
/// `c = sqrt(p_out p_in) * lr * delta_m`.
pub fn closed_form_norm(
    lr: f64,
    delta_m: f64,
    scaling: f64,
    r: usize,
    p_in: usize,
    p_out: usize,
) -> f64 {
    ((p_out * p_in) as f64).sqrt() * lr * scaling * scaling * r as f64 * delta_m
}

/// One Monte Carlo variance cell.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceExperiment {
    pub r: usize,
    pub p_in: usize,
    pub p_out: usize,
    pub lr: f64,
    /// Constant upstream sensitivity applied to every output.
    pub delta: f64,
    pub policy: ScalingPolicy,
    pub alpha: f64,
    pub n_samples: usize,
    pub seed: RngSeed,
}

impl VarianceExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.p_in == 0 || self.p_out == 0 {
            return Err(CoreError::InvalidArgument(
                "r, p_in, p_out must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "lr must be finite and > 0, got {}",
                self.lr
            )));
        }
        if !self.delta.is_finite() || self.delta < 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "delta must be finite and >= 0, got {}",
                self.delta
            )));
        }
        if self.n_samples < MIN_SAMPLES {
            return Err(CoreError::InvalidArgument(format!(
                "n_samples must be >= {MIN_SAMPLES}, got {}",
                self.n_samples
            )));
        }
        scaling_factor(self.policy, self.alpha, self.r)?;
        Ok(())
    }

    pub fn resolved_scaling(&self) -> Result<f64> {
        scaling_factor(self.policy, self.alpha, self.r)
    }
}

/// Empirical vs modeled variance for one cell.
///
/// `rel_error` compares against `closed_form_var`; `exact_var` is the full
/// expression for reference. The 95% interval on the variance estimate uses
/// the normal approximation through the fourth central moment,
/// halfwidth = 1.96 * sqrt((m4 - var^2) / n).
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub empirical_mean: f64,
    /// Unbiased sample variance (n-1 denominator).
    pub empirical_var: f64,
    pub closed_form_var: f64,
    pub exact_var: f64,
    pub rel_error: f64,
    pub ci95_halfwidth: f64,
    pub n_samples: usize,
}

impl VarianceReport {
    /// |mean| <= bound * sqrt(var / n); the zero-mean consistency check.
    pub fn mean_within_sigma(&self, bound: f64) -> bool {
        let se = (self.empirical_var / self.n_samples as f64).sqrt();
        self.empirical_mean.abs() <= bound * se
    }

    pub fn exact_rel_error(&self) -> f64 {
        relative_error(self.empirical_var, self.exact_var)
    }
}

fn relative_error(measured: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if measured == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (measured - reference).abs() / reference
    }
}

/// Running central moments up to order four.
///
/// Supports one-value pushes and pairwise merging, so chunked parallel
/// accumulation reproduces the sequential result as long as merges happen in
/// a fixed order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn new() -> Moments {
        Moments {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            m3: 0.0,
            m4: 0.0,
        }
    }

    pub fn push(&mut self, x: f64) {
        let n0 = self.count as f64;
        self.count += 1;
        let n1 = self.count as f64;
        let delta = x - self.mean;
        let delta_n = delta / n1;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n0;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n1 * n1 - 3.0 * n1 + 3.0) + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n1 - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    pub fn merge(self, other: Moments) -> Moments {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let mean = self.mean + delta * nb / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + other.m3
            + delta * d2 * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;
        Moments {
            count: self.count + other.count,
            mean,
            m2,
            m3,
            m4,
        }
    }

    /// Unbiased sample variance.
    pub fn sample_variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count as f64 - 1.0)
        }
    }

    /// Biased (population) central moments of order two and four.
    pub fn central2(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    pub fn central4(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m4 / self.count as f64
        }
    }
}

impl Default for Moments {
    fn default() -> Self {
        Moments::new()
    }
}

const MC_STREAM: u64 = 0x4d43_0001;

/// One increment sample drawn through the composed closed form.
fn sample_increment(
    rng: &mut SeededRng,
    r: usize,
    p_in: usize,
    lr: f64,
    delta: &Vector,
    scaling: f64,
) -> Result<Vector> {
    let a = gaussian_matrix_from(r, p_in, 0.0, 1.0, rng)?;
    let x_t = gaussian_vector_from(p_in, 0.0, 1.0, rng)?;
    let x_t1 = gaussian_vector_from(p_in, 0.0, 1.0, rng)?;
    two_step_increment(&a, &x_t, &x_t1, lr, delta, scaling)
}

fn chunk_sizes(total: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(total / CHUNK + 1);
    let mut left = total;
    while left > 0 {
        let take = left.min(CHUNK);
        out.push(take);
        left -= take;
    }
    out
}

/// Monte Carlo moments of w[0] over fresh (a, x_t, x_t1) draws.
pub fn monte_carlo_increment_stats(exp: &VarianceExperiment) -> Result<VarianceReport> {
    exp.validate()?;
    let scaling = exp.resolved_scaling()?;
    let delta_vec = Vector::new(vec![exp.delta; exp.p_out])?;
    let mc_seed = exp.seed.child(MC_STREAM);

    let sizes = chunk_sizes(exp.n_samples);
    let partials: Vec<Result<Moments>> = sizes
        .par_iter()
        .enumerate()
        .map(|(idx, &size)| {
            let mut rng = SeededRng::new(mc_seed.child(idx as u64));
            let mut acc = Moments::new();
            for _ in 0..size {
                let w = sample_increment(&mut rng, exp.r, exp.p_in, exp.lr, &delta_vec, scaling)?;
                acc.push(w.get(0));
            }
            Ok(acc)
        })
        .collect();

    let mut total = Moments::new();
    for p in partials {
        total = total.merge(p?);
    }

    let n = total.count as f64;
    let var = total.sample_variance();
    let closed = closed_form_variance(exp.lr, exp.delta, scaling, exp.r, exp.p_in);
    let exact = exact_increment_variance(exp.lr, exp.delta, scaling, exp.r, exp.p_in);
    let mu2 = total.central2();
    let mu4 = total.central4();
    let ci = 1.96 * ((mu4 - mu2 * mu2).max(0.0) / n).sqrt();
    Ok(VarianceReport {
        empirical_mean: total.mean,
        empirical_var: var,
        closed_form_var: closed,
        exact_var: exact,
        rel_error: relative_error(var, closed),
        ci95_halfwidth: ci,
        n_samples: exp.n_samples,
    })
}

/// Log-log fit of mean increment magnitude against rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub ranks: Vec<usize>,
    pub mean_norms: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// RMS of log-space residuals around the fitted line.
    pub residual: f64,
}

/// Least squares on (ln r, ln mean_norm).
fn fit_log_log(ranks: &[usize], means: &[f64]) -> Result<(f64, f64, f64)> {
    let xs: Vec<f64> = ranks.iter().map(|&r| (r as f64).ln()).collect();
    let mut ys = Vec::with_capacity(means.len());
    for &m in means {
        if m <= 0.0 {
            return Err(CoreError::InvalidArgument(
                "mean norm must be positive for a log-log fit".into(),
            ));
        }
        ys.push(m.ln());
    }
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    Ok((slope, intercept, (rss / n).sqrt()))
}

/// Estimate E[||w||] per rank by Monte Carlo and fit the log-log slope.
///
/// The contract this measures: with a fixed scaling the mean magnitude grows
/// linearly in rank (slope +1); the alpha/r rule cancels it to 1/r (slope
/// -1); the alpha/sqrt(r) rule flattens it (slope 0). With `p_in = 1` these
/// laws are exact (E[||w||] is proportional to scaling^2 * r), which is why
/// the shipping sweeps default to width one; larger p_in mixes in a
/// sqrt((r + p_in + 1) / r) correction that only fades for r >> p_in.
#[allow(clippy::too_many_arguments)]
pub fn rank_norm_sweep(
    policy: ScalingPolicy,
    alpha: f64,
    ranks: &[usize],
    p_in: usize,
    p_out: usize,
    lr: f64,
    delta: f64,
    n_samples: usize,
    seed: RngSeed,
) -> Result<SlopeFit> {
    if ranks.len() < 3 {
        return Err(CoreError::InvalidArgument(format!(
            "need at least 3 ranks, got {}",
            ranks.len()
        )));
    }
    if !ranks.windows(2).all(|w| w[0] < w[1]) {
        return Err(CoreError::InvalidArgument(
            "ranks must be strictly increasing".into(),
        ));
    }
    let mut means = Vec::with_capacity(ranks.len());
    for (ri, &r) in ranks.iter().enumerate() {
        let exp = VarianceExperiment {
            r,
            p_in,
            p_out,
            lr,
            delta,
            policy,
            alpha,
            n_samples,
            seed: seed.child(0x5357_0000 + ri as u64),
        };
        exp.validate()?;
        let scaling = exp.resolved_scaling()?;
        let delta_vec = Vector::new(vec![delta; p_out])?;
        let mc_seed = exp.seed.child(MC_STREAM);
        let sizes = chunk_sizes(n_samples);
        let partials: Vec<Result<(u64, f64)>> = sizes
            .par_iter()
            .enumerate()
            .map(|(idx, &size)| {
                let mut rng = SeededRng::new(mc_seed.child(idx as u64));
                let mut sum = 0.0;
                for _ in 0..size {
                    let w = sample_increment(&mut rng, r, p_in, lr, &delta_vec, scaling)?;
                    sum += l2_norm(&w);
                }
                Ok((size as u64, sum))
            })
            .collect();
        let mut count = 0u64;
        let mut sum = 0.0;
        for p in partials {
            let (c, s) = p?;
            count += c;
            sum += s;
        }
        means.push(sum / count as f64);
    }
    let (slope, intercept, residual) = fit_log_log(ranks, &means)?;
    Ok(SlopeFit {
        ranks: ranks.to_vec(),
        mean_norms: means,
        slope,
        intercept,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_exp(r: usize, p_in: usize, gamma: f64, n: usize, seed: u64) -> VarianceExperiment {
        VarianceExperiment {
            r,
            p_in,
            p_out: 1,
            lr: 0.1,
            delta: 1.0,
            policy: ScalingPolicy::Custom(gamma),
            alpha: 16.0,
            n_samples: n,
            seed: RngSeed(seed),
        }
    }

    #[test]
    fn closed_form_variance_examples() {
        assert_eq!(closed_form_variance(1.0, 1.0, 1.0, 1, 1), 1.0);
        let v = closed_form_variance(0.1, 2.0, 0.5, 4, 8);
        assert!((v - 0.32).abs() < 1e-15, "{v}");
    }

    #[test]
    fn closed_form_variance_collapses_under_sqrt_rank_scaling() {
        // square ranks make alpha/sqrt(r) exact in floating point
        let alpha = 16.0;
        let reference = closed_form_variance(0.1, 1.0, alpha, 1, 8);
        for r in [4usize, 16, 64] {
            let gamma = scaling_factor(ScalingPolicy::Rora, alpha, r).unwrap();
            let v = closed_form_variance(0.1, 1.0, gamma, r, 8);
            assert_eq!(v.to_bits(), reference.to_bits(), "r={r}");
        }
    }

    #[test]
    fn closed_form_norm_examples() {
        assert_eq!(closed_form_norm(1.0, 1.0, 1.0, 2, 9, 4), 12.0);
        // alpha/r: doubling the rank halves the value
        let alpha = 16.0;
        let at = |r: usize| {
            let g = scaling_factor(ScalingPolicy::Lora, alpha, r).unwrap();
            closed_form_norm(0.1, 1.0, g, r, 8, 4)
        };
        assert!((at(16) / at(8) - 0.5).abs() < 1e-12);
        // alpha/sqrt(r): constant across ranks
        let rora = |r: usize| {
            let g = scaling_factor(ScalingPolicy::Rora, alpha, r).unwrap();
            closed_form_norm(0.1, 1.0, g, r, 8, 4)
        };
        let base = rora(4);
        for r in [8usize, 16, 32, 64] {
            assert!((rora(r) - base).abs() <= 1e-12 * base, "r={r}");
        }
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        let mut rng = SeededRng::new(RngSeed(60));
        let data: Vec<f64> = (0..5000).map(|_| rng.normal(0.3, 2.0)).collect();
        // two-pass oracle
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let m2: f64 = data.iter().map(|x| (x - mean).powi(2)).sum();
        let m4: f64 = data.iter().map(|x| (x - mean).powi(4)).sum();

        // single accumulator
        let mut acc = Moments::new();
        for &x in &data {
            acc.push(x);
        }
        assert!((acc.mean - mean).abs() < 1e-12);
        assert!((acc.central2() - m2 / n).abs() < 1e-10 * (m2 / n));
        assert!((acc.central4() - m4 / n).abs() < 1e-9 * (m4 / n));

        // chunked + merged reproduces the same moments
        let mut merged = Moments::new();
        for chunk in data.chunks(617) {
            let mut part = Moments::new();
            for &x in chunk {
                part.push(x);
            }
            merged = merged.merge(part);
        }
        assert!((merged.mean - mean).abs() < 1e-12);
        assert!((merged.central2() - m2 / n).abs() < 1e-10 * (m2 / n));
        assert!((merged.central4() - m4 / n).abs() < 1e-9 * (m4 / n));
    }

    #[test]
    fn zero_delta_gives_exactly_zero_variance() {
        let mut exp = base_exp(2, 4, 1.0, 2000, 7);
        exp.delta = 0.0;
        let rep = monte_carlo_increment_stats(&exp).unwrap();
        assert_eq!(rep.empirical_var, 0.0);
        assert_eq!(rep.empirical_mean, 0.0);
        assert_eq!(rep.rel_error, 0.0);
    }

    #[test]
    fn same_seed_same_report() {
        let exp = base_exp(2, 4, 1.0, 20_000, 11);
        let a = monte_carlo_increment_stats(&exp).unwrap();
        let b = monte_carlo_increment_stats(&exp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_identical_for_any_worker_count() {
        let exp = base_exp(3, 8, 0.5, 30_000, 13);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(|| monte_carlo_increment_stats(&exp)).unwrap();
        let b = pool4.install(|| monte_carlo_increment_stats(&exp)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_floor_enforced() {
        let exp = base_exp(2, 4, 1.0, 999, 3);
        assert!(monte_carlo_increment_stats(&exp).is_err());
    }

    #[test]
    fn empirical_variance_matches_exact_law() {
        // the measured variance follows the full expression, including the
        // same-row terms the compact model drops
        for (r, p_in, seed) in [(2usize, 4usize, 21u64), (1, 16, 22), (8, 4, 23)] {
            let exp = base_exp(r, p_in, 1.0, 120_000, seed);
            let rep = monte_carlo_increment_stats(&exp).unwrap();
            assert!(
                rep.exact_rel_error() < 0.05,
                "r={r} p_in={p_in}: var {} vs exact {}",
                rep.empirical_var,
                rep.exact_var
            );
            assert!(rep.mean_within_sigma(4.0), "mean {} too far from 0", rep.empirical_mean);
        }
    }

    #[test]
    fn variance_scales_as_fourth_power_of_scaling() {
        // same seed, doubled scaling: identical draws, outputs scale by 4,
        // variance by 16 (exactly, up to rounding)
        let lo = monte_carlo_increment_stats(&base_exp(2, 8, 0.5, 40_000, 31)).unwrap();
        let hi = monte_carlo_increment_stats(&base_exp(2, 8, 1.0, 40_000, 31)).unwrap();
        let ratio = hi.empirical_var / lo.empirical_var;
        assert!((ratio - 16.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn variance_tracks_input_width_per_exact_law() {
        let narrow = monte_carlo_increment_stats(&base_exp(2, 4, 1.0, 150_000, 37)).unwrap();
        let wide = monte_carlo_increment_stats(&base_exp(2, 16, 1.0, 150_000, 38)).unwrap();
        let measured = wide.empirical_var / narrow.empirical_var;
        let predicted = exact_increment_variance(0.1, 1.0, 1.0, 2, 16)
            / exact_increment_variance(0.1, 1.0, 1.0, 2, 4);
        assert!(
            (measured / predicted - 1.0).abs() < 0.1,
            "measured {measured}, predicted {predicted}"
        );
    }

    #[test]
    fn norm_sweep_rejects_bad_rank_lists() {
        let r = rank_norm_sweep(
            ScalingPolicy::Unit,
            16.0,
            &[4, 8],
            1,
            1,
            0.05,
            1.0,
            2000,
            RngSeed(1),
        );
        assert!(r.is_err());
        let r = rank_norm_sweep(
            ScalingPolicy::Unit,
            16.0,
            &[4, 8, 8],
            1,
            1,
            0.05,
            1.0,
            2000,
            RngSeed(1),
        );
        assert!(r.is_err());
    }

    #[test]
    fn unit_scaling_doubles_mean_norm_with_rank() {
        let fit = rank_norm_sweep(
            ScalingPolicy::Unit,
            16.0,
            &[4, 8, 16],
            1,
            1,
            0.05,
            1.0,
            40_000,
            RngSeed(101),
        )
        .unwrap();
        let ratio = fit.mean_norms[1] / fit.mean_norms[0];
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn slope_trichotomy_quick() {
        let ranks = [4usize, 8, 16, 32, 64];
        let cases = [
            (ScalingPolicy::Unit, 1.0),
            (ScalingPolicy::Lora, -1.0),
            (ScalingPolicy::Rora, 0.0),
        ];
        for (policy, want) in cases {
            let fit = rank_norm_sweep(policy, 16.0, &ranks, 1, 1, 0.05, 1.0, 30_000, RngSeed(55))
                .unwrap();
            assert!(
                (fit.slope - want).abs() < 0.1,
                "{policy}: slope {} want {want}",
                fit.slope
            );
            assert!(fit.residual < 0.05, "{policy}: residual {}", fit.residual);
        }
    }
}
