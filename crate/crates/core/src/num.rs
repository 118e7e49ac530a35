//! Scalar abstraction shared by the model and likelihood kernels.

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Real floating-point scalar: `f32` or `f64`.
///
/// Arithmetic and transcendental functions come from [`RealField`]; event
/// times and covariate values stay `f64` and are converted with [`cast`].
pub trait Scalar: RealField + Copy + ToPrimitive + Send + Sync + 'static {}

impl<T> Scalar for T where T: RealField + Copy + ToPrimitive + Send + Sync + 'static {}

/// Converts an `f64` literal or data value into the working scalar.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Converts a working scalar back to `f64`.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let Some(&first) = values.first() else {
        return cast(f64::NEG_INFINITY);
    };
    let mut max = first;
    for &v in &values[1..] {
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut sum = T::zero();
    for &v in values {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

/// Neumaier-compensated sum. Used for reductions over subjects.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
