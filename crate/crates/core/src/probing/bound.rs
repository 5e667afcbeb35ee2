use crate::error::{Error, Result};

/// Bits of precision credited to each probe parameter when counting the
/// hypothesis class.
pub const EFFECTIVE_BITS: f64 = 4.0;

/// Accuracy of a uniform guess over `m` classes.
pub fn dummy_accuracy(m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Domain("dummy accuracy needs at least one class".into()));
    }
    Ok(1.0 / m as f64)
}

/// ln|F| for a probe with `params` parameters at `EFFECTIVE_BITS` bits each.
pub fn log_class_size(params: usize) -> f64 {
    params as f64 * EFFECTIVE_BITS * std::f64::consts::LN_2
}

/// `ceil(l / (2 eps^2))`, treating values within rounding noise of an
/// integer as that integer.
pub fn sample_bound(l: f64, epsilon: f64) -> Result<u64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Domain(format!("complexity term must be positive, got {l}")));
    }
    let x = l / (2.0 * epsilon * epsilon);
    let nearest = x.round();
    let n = if (x - nearest).abs() <= 1e-9 * x.max(1.0) { nearest } else { x.ceil() };
    Ok(n as u64)
}

/// Samples needed so every probe in a finite class of size e^`log_class_size`
/// has empirical accuracy within `epsilon` of its true accuracy with
/// probability at least 1 - `delta`.
pub fn recommend_probe_samples(epsilon: f64, delta: f64, log_class_size: f64) -> Result<u64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(log_class_size > 0.0 && log_class_size.is_finite()) {
        return Err(Error::Domain(format!("log class size must be positive, got {log_class_size}")));
    }
    sample_bound(log_class_size + (2.0 / delta).ln(), epsilon)
}
