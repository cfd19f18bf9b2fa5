//! Single-pass channel-wise central moments with pairwise merging.
//!
//! For partitions `A`, `B` with `n = n_A + n_B`, `δ = μ_B − μ_A` and power sums
//! `M_p = Σ (x − μ)^p`:
//!
//! ```text
//! μ   = μ_A + n_B δ / n
//! M_p = M_p^A + M_p^B
//!     + Σ_{k=1}^{p−2} C(p,k) [ (−n_B/n)^k M_{p−k}^A + (n_A/n)^k M_{p−k}^B ] δ^k
//!     + (n_A n_B δ / n)^p [ n_B^{1−p} − (−n_A)^{1−p} ]
//! ```
//!
//! Pushing a value is a merge with a one-element partition, so a stream of
//! pushes and any merge tree over the same values agree up to rounding.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    dim: usize,
    max_order: usize,
    count: u64,
    mean: Vec<f64>,
    /// `power_sums[(p − 2) · dim + c]` holds `M_p` of channel `c`, `p = 2..=max_order`.
    power_sums: Vec<f64>,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl MomentAccumulator {
    /// Tracks the mean and central moments of orders `2..=max_order`
    /// (`max_order` below 2 tracks the mean only).
    pub fn new(dim: usize, max_order: usize) -> Self {
        let orders = max_order.saturating_sub(1);
        Self {
            dim,
            max_order: max_order.max(1),
            count: 0,
            mean: vec![0.0; dim],
            power_sums: vec![0.0; orders * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Biased central moment of order `k` (`1/n` normalization); order 1 is 0.
    pub fn central(&self, k: usize) -> Vec<f64> {
        assert!(k >= 1 && k <= self.max_order, "order {k} not tracked");
        if k == 1 || self.count == 0 {
            return vec![0.0; self.dim];
        }
        let n = self.count as f64;
        self.sums(k).iter().map(|m| m / n).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.central(2)
    }

    fn sums(&self, p: usize) -> &[f64] {
        &self.power_sums[(p - 2) * self.dim..(p - 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "row width");
        let n_a = self.count as f64;
        self.count += 1;
        let n = self.count as f64;
        let d = self.dim;
        let k_max = self.max_order;
        for c in 0..d {
            let delta = row[c] - self.mean[c];
            if n_a == 0.0 {
                self.mean[c] = row[c];
                continue;
            }
            for p in (2..=k_max).rev() {
                let mut acc = self.power_sums[(p - 2) * d + c];
                let mut dk = 1.0;
                let mut r = 1.0;
                for k in 1..=p.saturating_sub(2) {
                    dk *= delta;
                    r *= -1.0 / n;
                    acc += binomial(p, k) * r * self.power_sums[(p - k - 2) * d + c] * dk;
                }
                let tail =
                    (n_a * delta / n).powi(p as i32) * (1.0 - (-1.0 / n_a).powi(p as i32 - 1));
                self.power_sums[(p - 2) * d + c] = acc + tail;
            }
            self.mean[c] += delta / n;
        }
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        assert_eq!(
            (self.dim, self.max_order),
            (other.dim, other.max_order),
            "accumulator layout"
        );
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (n_a, n_b) = (self.count as f64, other.count as f64);
        let n = n_a + n_b;
        let d = self.dim;
        let mut out = self.power_sums.clone();
        for c in 0..d {
            let delta = other.mean[c] - self.mean[c];
            for p in 2..=self.max_order {
                let idx = |q: usize| (q - 2) * d + c;
                let mut acc = self.power_sums[idx(p)] + other.power_sums[idx(p)];
                let mut dk = 1.0;
                for k in 1..=p.saturating_sub(2) {
                    dk *= delta;
                    let wa = (-n_b / n).powi(k as i32) * self.power_sums[idx(p - k)];
                    let wb = (n_a / n).powi(k as i32) * other.power_sums[idx(p - k)];
                    acc += binomial(p, k) * (wa + wb) * dk;
                }
                let e = 1 - p as i32;
                acc += (n_a * n_b * delta / n).powi(p as i32) * (n_b.powi(e) - (-n_a).powi(e));
                out[idx(p)] = acc;
            }
            self.mean[c] += n_b * delta / n;
        }
        self.power_sums = out;
        self.count += other.count;
    }
}

/// Channel-wise moment of order `k` over the selected rows of a row-major
/// `? × dim` buffer: the mean for `k = 1`, the biased central moment otherwise.
pub fn row_moment(data: &[f64], dim: usize, rows: &[usize], k: usize) -> Vec<f64> {
    let mut acc = MomentAccumulator::new(dim, k);
    for &r in rows {
        acc.push(&data[r * dim..(r + 1) * dim]);
    }
    if k == 1 {
        acc.mean().to_vec()
    } else {
        acc.central(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(xs: &[f64], k: usize) -> f64 {
        let n = xs.len() as f64;
        let mu = xs.iter().sum::<f64>() / n;
        if k == 1 {
            return mu;
        }
        xs.iter().map(|x| (x - mu).powi(k as i32)).sum::<f64>() / n
    }

    #[test]
    fn two_values_one_and_three() {
        let mut a = MomentAccumulator::new(1, 4);
        a.push(&[1.0]);
        a.push(&[3.0]);
        assert_eq!(a.mean(), &[2.0]);
        assert_eq!(a.variance(), vec![1.0]);
        assert_eq!(a.central(3), vec![0.0]);
        assert_eq!(a.central(4), vec![1.0]);
    }

    #[test]
    fn pushes_match_two_pass_for_orders_up_to_six() {
        let xs: Vec<f64> = (0..97)
            .map(|i| ((i * i) as f64 * 0.013).sin() * 3.0 + 0.5)
            .collect();
        let mut a = MomentAccumulator::new(1, 6);
        for x in &xs {
            a.push(&[*x]);
        }
        assert!((a.mean()[0] - brute(&xs, 1)).abs() < 1e-12);
        for k in 2..=6 {
            let got = a.central(k)[0];
            assert!(
                (got - brute(&xs, k)).abs() < 1e-10,
                "order {k}: {got} vs {}",
                brute(&xs, k)
            );
        }
    }

    #[test]
    fn merge_matches_single_stream() {
        let xs: Vec<f64> = (0..60)
            .map(|i| (i as f64 * 0.7).cos() * (1.0 + i as f64 / 30.0))
            .collect();
        let mut whole = MomentAccumulator::new(1, 5);
        let mut parts = vec![MomentAccumulator::new(1, 5); 3];
        for (i, x) in xs.iter().enumerate() {
            whole.push(&[*x]);
            parts[[0, 0, 1, 2, 2, 2][i % 6]].push(&[*x]);
        }
        let mut merged = parts[0].clone();
        merged.merge(&parts[1]);
        merged.merge(&parts[2]);
        assert_eq!(merged.count(), 60);
        for k in 2..=5 {
            assert!((merged.central(k)[0] - whole.central(k)[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn order_two_is_independent_of_tracked_order() {
        let xs: Vec<[f64; 2]> = (0..40)
            .map(|i| [(i as f64).sqrt(), (i as f64 * 0.3).sin()])
            .collect();
        let mut lo = MomentAccumulator::new(2, 2);
        let mut hi = MomentAccumulator::new(2, 5);
        for x in &xs {
            lo.push(x);
            hi.push(x);
        }
        assert_eq!(lo.mean(), hi.mean());
        assert_eq!(lo.variance(), hi.variance());
    }
}
