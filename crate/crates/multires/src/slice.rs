//! Univariate slice sampler with stepping out and shrinkage (Neal 2003).
//!
//! Used for the kernel hyperparameters (on the log scale) and for the CAR
//! dependence parameter (on its bounded support).  The target is supplied as
//! a log-density kernel; evaluations returning `-inf` or NaN are treated as
//! zero density, which doubles as the rejection signal for parameter values
//! where a covariance matrix cannot be factorized.

use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct SliceConfig {
    /// Initial bracket width for stepping out.
    pub width: f64,
    /// Cap on stepping-out expansions per side.
    pub max_steps: usize,
    /// Hard support bounds; the bracket never leaves `(lower, upper)`.
    pub lower: f64,
    pub upper: f64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            width: 1.0,
            max_steps: 50,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }
}

impl SliceConfig {
    pub fn bounded(width: f64, max_steps: usize, lower: f64, upper: f64) -> Self {
        SliceConfig {
            width,
            max_steps,
            lower,
            upper,
        }
    }
}

/// Draw one sample from the log-density `log_f`, starting at `x0` (which must
/// have finite kernel value).  Returns the new point and the number of kernel
/// evaluations spent.
pub fn slice_sample<R, F>(x0: f64, log_f: F, cfg: &SliceConfig, rng: &mut R) -> (f64, usize)
where
    R: Rng + ?Sized,
    F: Fn(f64) -> f64,
{
    let f0 = log_f(x0);
    debug_assert!(
        f0.is_finite(),
        "slice sampler started at zero-density point"
    );
    let mut evals = 1;

    // Slice level: ln u + f(x0) with u ~ U(0,1).
    let level = f0 + rng.random::<f64>().ln();

    // Step out: position the initial bracket uniformly around x0, then expand
    // each side until it falls below the slice or hits a bound / step cap.
    let mut left = x0 - cfg.width * rng.random::<f64>();
    let mut right = left + cfg.width;
    left = left.max(cfg.lower);
    right = right.min(cfg.upper);

    let mut steps_left = cfg.max_steps;
    while left > cfg.lower && steps_left > 0 {
        evals += 1;
        if !(log_f(left) > level) {
            break;
        }
        left = (left - cfg.width).max(cfg.lower);
        steps_left -= 1;
    }
    let mut steps_right = cfg.max_steps;
    while right < cfg.upper && steps_right > 0 {
        evals += 1;
        if !(log_f(right) > level) {
            break;
        }
        right = (right + cfg.width).min(cfg.upper);
        steps_right -= 1;
    }

    // Shrinkage: sample within the bracket, shrinking toward x0 on rejection.
    // Terminates with probability one; the cap below guards against a broken
    // kernel returning NaN at x0 itself.
    for _ in 0..10_000 {
        let x1 = left + (right - left) * rng.random::<f64>();
        evals += 1;
        if log_f(x1) > level {
            return (x1, evals);
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
    }
    // Bracket collapsed onto x0 without acceptance; keep the current point.
    (x0, evals)
}
