//! Exact summation and a correctly rounded mean.
//!
//! Token pooling must return the same bits for any ordering or repetition of
//! the token set. A naive running sum does not, so the pooled mean is taken as
//! the double nearest to the exact real mean.

/// Non-overlapping partial sums whose exact total equals the sum of all inputs.
#[derive(Debug, Clone, Default)]
pub(crate) struct Partials {
    parts: Vec<f64>,
}

impl Partials {
    pub(crate) fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.parts.len() {
            let mut y = self.parts[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.parts[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.parts.truncate(i);
        self.parts.push(x);
    }

    /// Correctly rounded (half-even) value of the exact sum.
    pub(crate) fn value(&self) -> f64 {
        let p = &self.parts;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

/// Rounded value of `sum - q * n`, computed without intermediate error.
fn residual(sum: &Partials, q: f64, n: f64) -> f64 {
    let p = q * n;
    let e = q.mul_add(n, -p);
    let mut r = sum.clone();
    r.add(-p);
    r.add(-e);
    r.value()
}

fn mantissa_is_even(x: f64) -> bool {
    x.to_bits() & 1 == 0
}

/// The double nearest to the exact mean of `values` (ties to even).
pub(crate) fn exact_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = Partials::default();
    let mut count = 0usize;
    for v in values {
        sum.add(v);
        count += 1;
    }
    if count == 0 {
        return f64::NAN;
    }
    let n = count as f64;
    let mut q = sum.value() / n;
    if !q.is_finite() {
        return q;
    }
    let mut r = residual(&sum, q, n);
    while r != 0.0 {
        let neighbour = if r > 0.0 { q.next_up() } else { q.next_down() };
        let rn = residual(&sum, neighbour, n);
        if rn.abs() < r.abs() || (rn.abs() == r.abs() && mantissa_is_even(neighbour)) {
            q = neighbour;
            r = rn;
        } else {
            break;
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sum_is_exact_where_naive_is_not() {
        let mut p = Partials::default();
        for v in [1e16, 1.0, -1e16, 1.0] {
            p.add(v);
        }
        assert_eq!(p.value(), 2.0);
        assert_eq!(exact_mean([0.1, 0.2, 0.3]), 0.2);
    }

    #[test]
    fn mean_of_single_value_is_identity() {
        assert_eq!(exact_mean([0.123_456_789]), 0.123_456_789);
        assert!(exact_mean(std::iter::empty()).is_nan());
    }

    proptest! {
        #[test]
        fn mean_ignores_order_and_repetition(
            v in proptest::collection::vec(-1e3f64..1e3, 1..12),
            k in 2usize..4,
        ) {
            let base = exact_mean(v.iter().copied());
            let mut rev = v.clone();
            rev.reverse();
            prop_assert_eq!(base.to_bits(), exact_mean(rev).to_bits());
            let repeated: Vec<f64> = (0..k).flat_map(|_| v.iter().copied()).collect();
            prop_assert_eq!(base.to_bits(), exact_mean(repeated).to_bits());
        }
    }
}
