//! Clamped B-spline basis over a scaled time range.
//!
//! A basis of size B uses order min(4, B) (cubic once B allows it) with
//! uniformly spaced interior knots, so B = 1 degenerates to a constant
//! function and the basis always sums to one. Evaluation outside the
//! training range clamps, giving constant extrapolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    size: usize,
    order: usize,
    /// Full clamped knot vector on [0, 1].
    knots: Vec<f64>,
    t_min: f64,
    t_max: f64,
}

impl SplineBasis {
    /// Basis of `size` functions over periods `t_min..=t_max`.
    pub fn new(size: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("basis size must be at least 1".into()));
        }
        if !(t_min.is_finite() && t_max.is_finite()) || t_min > t_max {
            return Err(Error::InvalidArgument(format!(
                "invalid basis time range [{t_min}, {t_max}]"
            )));
        }
        let order = size.min(4);
        let interior = size - order;
        let mut knots = Vec::with_capacity(size + order);
        knots.extend(std::iter::repeat(0.0).take(order));
        for i in 1..=interior {
            knots.push(i as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat(1.0).take(order));
        Ok(Self { size, order, knots, t_min, t_max })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn range(&self) -> (f64, f64) {
        (self.t_min, self.t_max)
    }

    /// Evaluate all basis functions at a calendar period.
    pub fn eval(&self, period: f64) -> Vec<f64> {
        let s = if self.t_max > self.t_min {
            ((period - self.t_min) / (self.t_max - self.t_min)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.eval_unit(s)
    }

    /// Evaluate on the unit interval via the Cox-de Boor recursion.
    fn eval_unit(&self, u: f64) -> Vec<f64> {
        let p = self.order - 1; // degree
        let nb = self.size;
        // knot span: largest i with knots[i] <= u < knots[i+1]; top clamp maps to last span
        let span = if u >= 1.0 {
            nb - 1
        } else {
            let mut lo = p;
            let mut hi = nb; // search within [p, nb]
            while lo + 1 < hi {
                let mid = (lo + hi) / 2;
                if self.knots[mid] <= u {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        let mut local = vec![0.0_f64; p + 1];
        let mut left = vec![0.0_f64; p + 1];
        let mut right = vec![0.0_f64; p + 1];
        local[0] = 1.0;
        for j in 1..=p {
            left[j] = u - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = local[r] / (right[r + 1] + left[j - r]);
                local[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            local[j] = saved;
        }
        let mut out = vec![0.0_f64; nb];
        for (r, &v) in local.iter().enumerate() {
            out[span - p + r] = v;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_unity_all_sizes() {
        for size in 1..=7 {
            let basis = SplineBasis::new(size, 0.0, 10.0).unwrap();
            for step in 0..=100 {
                let t = step as f64 / 10.0;
                let vals = basis.eval(t);
                assert_eq!(vals.len(), size);
                let sum: f64 = vals.iter().sum();
                assert!(
                    (sum - 1.0).abs() < 1e-12,
                    "size {size} t {t}: sum {sum}"
                );
                assert!(vals.iter().all(|&v| v >= -1e-12));
            }
        }
    }

    #[test]
    fn size_one_is_constant() {
        let basis = SplineBasis::new(1, 1980.0, 2015.0).unwrap();
        for t in [1970.0, 1980.0, 2000.0, 2015.0, 2030.0] {
            assert_eq!(basis.eval(t), vec![1.0]);
        }
    }

    #[test]
    fn size_two_is_linear_hats() {
        let basis = SplineBasis::new(2, 0.0, 1.0).unwrap();
        let v = basis.eval(0.25);
        assert!((v[0] - 0.75).abs() < 1e-12);
        assert!((v[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn extrapolation_is_constant() {
        let basis = SplineBasis::new(4, 0.0, 10.0).unwrap();
        assert_eq!(basis.eval(10.0), basis.eval(25.0));
        assert_eq!(basis.eval(0.0), basis.eval(-5.0));
    }

    #[test]
    fn continuity_across_interior_knots() {
        let basis = SplineBasis::new(6, 0.0, 1.0).unwrap();
        for &knot in basis.knots() {
            if knot <= 0.0 || knot >= 1.0 {
                continue;
            }
            let below = basis.eval(knot - 1e-9);
            let at = basis.eval(knot);
            for (a, b) in below.iter().zip(&at) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
