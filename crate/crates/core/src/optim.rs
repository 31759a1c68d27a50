//! Adam with bias correction.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// First and second moments for one flat parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update at (1-based) step `t`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: u64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let c1 = 1.0 - BETA1.powf(t as f64);
        let c2 = 1.0 - BETA2.powf(t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }

    /// Rebuilds the state for rows of `width` values: `Some(i)` keeps old
    /// row `i`, `None` starts a fresh row.
    pub fn remap_rows(&mut self, width: usize, rows: &[Option<usize>]) {
        let take = |src: &[f64]| -> Vec<f64> {
            rows.iter()
                .flat_map(|r| match r {
                    Some(i) => src[i * width..(i + 1) * width].to_vec(),
                    None => vec![0.0; width],
                })
                .collect()
        };
        self.m = take(&self.m);
        self.v = take(&self.v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut a = Adam::new(2);
        let mut p = [1.0, -2.0];
        a.step(&mut p, &[0.5, 0.5], 0.1, 1);
        let before = p;
        let (m, v) = (a.m.clone(), a.v.clone());
        a.step(&mut p, &[0.0, 0.0], 0.0, 2);
        assert_eq!(p, before);
        assert!(a.m.iter().zip(&m).all(|(x, y)| x.abs() < y.abs()));
        assert!(a.v.iter().zip(&v).all(|(x, y)| x < y));
    }

    #[test]
    fn constant_gradient_moves_by_rate() {
        let mut a = Adam::new(1);
        let mut p = [0.0];
        let lr = 0.01;
        for t in 1..=2000 {
            let before = p[0];
            a.step(&mut p, &[3.0], lr, t);
            if t > 1000 {
                assert!(((p[0] - before) + lr).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let center = [1.5, -0.7, 0.2];
        let mut p = [0.0; 3];
        let mut a = Adam::new(3);
        let mut converged_at = None;
        for t in 1..=5000 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * (i + 1) as f64 * (p[i] - center[i])).collect();
            a.step(&mut p, &g, 0.05, t);
            if (0..3).all(|i| (p[i] - center[i]).abs() < 1e-6) {
                converged_at.get_or_insert(t);
            }
        }
        assert!(converged_at.is_some());
        assert!((0..3).all(|i| (p[i] - center[i]).abs() < 1e-6));
    }

    #[test]
    fn remap_keeps_and_resets_rows() {
        let mut a = Adam::new(4);
        a.m = vec![1.0, 2.0, 3.0, 4.0];
        a.v = vec![5.0, 6.0, 7.0, 8.0];
        a.remap_rows(2, &[Some(1), None, Some(0)]);
        assert_eq!(a.m, vec![3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(a.v, vec![7.0, 8.0, 0.0, 0.0, 5.0, 6.0]);
    }
}
