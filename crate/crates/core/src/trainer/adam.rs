//! Adam optimizer over a named parameter set.
//!
//! Keeps one first-moment and one second-moment buffer per parameter entry,
//! applies bias correction from the step count, and exposes its state for
//! checkpointing so a resumed run continues bit-for-bit.

use crate::params::ParamSet;

/// Adam with the usual defaults. `step` counts completed updates and drives
/// bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let m = params.iter().map(|e| vec![0.0; e.values.len()]).collect();
        let v = params.iter().map(|e| vec![0.0; e.values.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    /// Apply one update from the gradients in `grads` (one slot per entry,
    /// `None` meaning zero gradient). Increments the step counter first so the
    /// first update uses `t = 1` bias correction.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient slots must match parameter entries");
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, entry) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            assert_eq!(g.len(), entry.values.len(), "gradient length for {}", entry.name);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                entry.values[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers by entry index, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restore moment buffers and step count from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        assert_eq!(m.len(), self.m.len(), "first-moment entry count");
        assert_eq!(v.len(), self.v.len(), "second-moment entry count");
        for (cur, new) in self.m.iter().zip(&m) {
            assert_eq!(cur.len(), new.len(), "first-moment length");
        }
        for (cur, new) in self.v.iter().zip(&v) {
            assert_eq!(cur.len(), new.len(), "second-moment length");
        }
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(vals: &[f64]) -> ParamSet {
        let mut set = ParamSet::new();
        set.add("w", &[vals.len()], vals.to_vec());
        set
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // g = 1: m_hat = g, v_hat = g^2, so the first update is exactly -lr
        // (up to eps) regardless of the gradient's magnitude sign-wise.
        let mut set = one_param(&[0.5]);
        let mut opt = Adam::new(0.1, &set);
        opt.update(&mut set, &[Some(vec![1.0])]);
        let expected = 0.5 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((set.entry(0).values[0] - expected).abs() < 1e-15);

        // negative gradient moves the other way with the same magnitude
        let mut set2 = one_param(&[0.5]);
        let mut opt2 = Adam::new(0.1, &set2);
        opt2.update(&mut set2, &[Some(vec![-3.0])]);
        let expected2 = 0.5 + 0.1 * 3.0 / (3.0 + 1e-8);
        assert!((set2.entry(0).values[0] - expected2).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_reference_recurrence() {
        let mut set = one_param(&[1.0]);
        let mut opt = Adam::new(0.01, &set);
        let gs = [0.3, -0.7];
        // independent scalar reference
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let t = (t + 1) as f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powf(t));
            let v_hat = v / (1.0 - 0.999f64.powf(t));
            w -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
            opt.update(&mut set, &[Some(vec![g])]);
        }
        assert!((set.entry(0).values[0] - w).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_leaves_entry_untouched() {
        let mut set = ParamSet::new();
        set.add("a", &[1], vec![2.0]);
        set.add("b", &[1], vec![3.0]);
        let mut opt = Adam::new(0.1, &set);
        opt.update(&mut set, &[Some(vec![1.0]), None]);
        assert_ne!(set.entry(0).values[0], 2.0);
        assert_eq!(set.entry(1).values[0], 3.0);
    }

    #[test]
    fn converges_on_quadratic() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut set = one_param(&[0.0; 8]);
        let mut opt = Adam::new(0.05, &set);
        for _ in 0..2000 {
            let g: Vec<f64> =
                set.entry(0).values.iter().zip(&target).map(|(w, t)| 2.0 * (w - t)).collect();
            opt.update(&mut set, &[Some(g)]);
        }
        for (w, t) in set.entry(0).values.iter().zip(&target) {
            assert!((w - t).abs() < 1e-3, "{w} vs {t}");
        }
    }

    #[test]
    fn restore_resumes_identically() {
        let mut set_a = one_param(&[1.0, -1.0]);
        let mut opt_a = Adam::new(0.02, &set_a);
        let grads = |s: &ParamSet| -> Vec<Option<Vec<f64>>> {
            vec![Some(s.entry(0).values.iter().map(|w| w.sin()).collect())]
        };
        for _ in 0..5 {
            let g = grads(&set_a);
            opt_a.update(&mut set_a, &g);
        }
        // snapshot, run 5 more on the original
        let (m, v) = opt_a.moments();
        let (snap_m, snap_v) = (m.to_vec(), v.to_vec());
        let snap_step = opt_a.step;
        let snap_params = set_a.entry(0).values.clone();
        for _ in 0..5 {
            let g = grads(&set_a);
            opt_a.update(&mut set_a, &g);
        }
        // rebuild from the snapshot and replay
        let mut set_b = one_param(&snap_params);
        let mut opt_b = Adam::new(0.02, &set_b);
        opt_b.restore(snap_step, snap_m, snap_v);
        for _ in 0..5 {
            let g = grads(&set_b);
            opt_b.update(&mut set_b, &g);
        }
        for (a, b) in set_a.entry(0).values.iter().zip(&set_b.entry(0).values) {
            assert_eq!(a.to_bits(), b.to_bits(), "resume must be bit-exact");
        }
    }
}
