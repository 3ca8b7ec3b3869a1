//! Diagonal Gaussian utilities used by the variational models: KL, negative
//! log likelihood, and reparameterized sampling, all through the tape.

use std::f64::consts::PI;

use super::{Graph, TensorError, Var};

/// Diagonal Gaussian whose mean and stddev live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian {
    pub mean: Var,
    pub stddev: Var,
}

impl DiagGaussian {
    pub fn new(mean: Var, stddev: Var) -> Self {
        Self { mean, stddev }
    }

    /// Builds the stddev as softplus(raw) + floor, so it can never collapse
    /// below the floor no matter what the net outputs.
    pub fn from_raw_std(g: &mut Graph, mean: Var, raw_std: Var, floor: f64) -> Self {
        let sp = g.softplus(raw_std);
        let stddev = g.add_const(sp, floor);
        Self { mean, stddev }
    }

    fn check_positive(&self, g: &Graph) -> Result<(), TensorError> {
        let min = g
            .value(self.stddev)
            .data
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            return Err(TensorError::NonPositiveStddev(min));
        }
        Ok(())
    }
}

/// KL(q || p) for diagonal Gaussians, summed over all elements.
pub fn gaussian_kl(g: &mut Graph, q: DiagGaussian, p: DiagGaussian) -> Result<Var, TensorError> {
    if g.shape(q.mean) != g.shape(p.mean) {
        return Err(TensorError::ShapeMismatch(format!(
            "kl shapes {:?} vs {:?}",
            g.shape(q.mean),
            g.shape(p.mean)
        )));
    }
    q.check_positive(g)?;
    p.check_positive(g)?;

    let log_p = g.ln(p.stddev);
    let log_q = g.ln(q.stddev);
    let log_ratio = g.sub(log_p, log_q);

    let var_q = g.square(q.stddev);
    let dmean = g.sub(q.mean, p.mean);
    let dmean2 = g.square(dmean);
    let num = g.add(var_q, dmean2);
    let var_p2 = g.square(p.stddev);
    let var_p2 = g.scale(var_p2, 2.0);
    let frac = g.div(num, var_p2);

    let term = g.add(log_ratio, frac);
    let term = g.add_const(term, -0.5);
    Ok(g.sum(term))
}

/// Negative log density of `x` under `q`, summed over elements.
pub fn gaussian_nll(g: &mut Graph, x: Var, q: DiagGaussian) -> Result<Var, TensorError> {
    if g.shape(x) != g.shape(q.mean) {
        return Err(TensorError::ShapeMismatch(format!(
            "nll shapes {:?} vs {:?}",
            g.shape(x),
            g.shape(q.mean)
        )));
    }
    q.check_positive(g)?;

    let n = g.value(x).len() as f64;
    let log_std = g.ln(q.stddev);
    let log_term = g.sum(log_std);

    let diff = g.sub(x, q.mean);
    let diff2 = g.square(diff);
    let var2 = g.square(q.stddev);
    let var2 = g.scale(var2, 2.0);
    let quad = g.div(diff2, var2);
    let quad = g.sum(quad);

    let total = g.add(log_term, quad);
    Ok(g.add_const(total, 0.5 * (2.0 * PI).ln() * n))
}

/// mean + stddev * noise; differentiable through mean and stddev.
pub fn reparam_sample(g: &mut Graph, q: DiagGaussian, noise: Var) -> Result<Var, TensorError> {
    if g.shape(noise) != g.shape(q.mean) {
        return Err(TensorError::ShapeMismatch(format!(
            "noise shape {:?} vs mean {:?}",
            g.shape(noise),
            g.shape(q.mean)
        )));
    }
    let scaled = g.mul(q.stddev, noise);
    Ok(g.add(q.mean, scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamSet, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_pair(
        g: &mut Graph,
        qm: &[f64],
        qs: &[f64],
        pm: &[f64],
        ps: &[f64],
    ) -> (DiagGaussian, DiagGaussian) {
        let n = qm.len();
        let q = DiagGaussian::new(
            g.input(Tensor::new(vec![n], qm.to_vec())),
            g.input(Tensor::new(vec![n], qs.to_vec())),
        );
        let p = DiagGaussian::new(
            g.input(Tensor::new(vec![n], pm.to_vec())),
            g.input(Tensor::new(vec![n], ps.to_vec())),
        );
        (q, p)
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let mut g = Graph::new();
        let (q, p) = gaussian_pair(
            &mut g,
            &[0.3, -1.2, 4.0],
            &[0.5, 1.0, 2.0],
            &[0.3, -1.2, 4.0],
            &[0.5, 1.0, 2.0],
        );
        let kl = gaussian_kl(&mut g, q, p).unwrap();
        assert!(g.scalar(kl).abs() < 1e-12);
    }

    #[test]
    fn kl_standard_shift_is_half() {
        let mut g = Graph::new();
        let (q, p) = gaussian_pair(&mut g, &[1.0], &[1.0], &[0.0], &[1.0]);
        let kl = gaussian_kl(&mut g, q, p).unwrap();
        assert!((g.scalar(kl) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let qm = [0.4, -0.9, 1.7, 0.0];
        let qs = [0.6, 1.3, 0.8, 2.0];
        let pm = [-0.2, 0.5, 1.0, -1.0];
        let ps = [1.1, 0.7, 1.5, 0.9];

        let mut g = Graph::new();
        let (q, p) = gaussian_pair(&mut g, &qm, &qs, &pm, &ps);
        let kl = gaussian_kl(&mut g, q, p).unwrap();
        let closed = g.scalar(kl);

        let log_density = |x: f64, m: f64, s: f64| {
            -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let samples = 1_000_000usize;
        let mut est = 0.0;
        for _ in 0..samples {
            for i in 0..4 {
                let z: f64 = rng.sample(StandardNormal);
                let x = qm[i] + qs[i] * z;
                est += log_density(x, qm[i], qs[i]) - log_density(x, pm[i], ps[i]);
            }
        }
        est /= samples as f64;
        assert!(
            (closed - est).abs() / closed.abs() < 0.01,
            "closed {closed} vs mc {est}"
        );
    }

    #[test]
    fn kl_rejects_bad_stddev() {
        let mut g = Graph::new();
        let (q, p) = gaussian_pair(&mut g, &[0.0], &[0.0], &[0.0], &[1.0]);
        match gaussian_kl(&mut g, q, p) {
            Err(TensorError::NonPositiveStddev(v)) => assert_eq!(v, 0.0),
            other => panic!("expected NonPositiveStddev, got {other:?}"),
        }
    }

    #[test]
    fn nll_at_mode_is_log_normalizer() {
        let mut g = Graph::new();
        let mean = g.input(Tensor::new(vec![5], vec![0.1, 0.2, 0.3, 0.4, 0.5]));
        let std = g.input(Tensor::full(vec![5], 1.0));
        let q = DiagGaussian::new(mean, std);
        let x = g.input(Tensor::new(vec![5], vec![0.1, 0.2, 0.3, 0.4, 0.5]));
        let nll = gaussian_nll(&mut g, x, q).unwrap();
        let expected = 0.5 * (2.0 * PI).ln() * 5.0;
        assert!((g.scalar(nll) - expected).abs() < 1e-12);
    }

    #[test]
    fn unit_stddev_nll_is_half_squared_distance_plus_constant() {
        let xv = [0.9, -0.4, 2.2];
        let mv = [0.1, 0.6, -1.0];
        let mut g = Graph::new();
        let mean = g.input(Tensor::new(vec![3], mv.to_vec()));
        let std = g.input(Tensor::full(vec![3], 1.0));
        let x = g.input(Tensor::new(vec![3], xv.to_vec()));
        let nll = gaussian_nll(&mut g, x, DiagGaussian::new(mean, std)).unwrap();
        let half_sq: f64 = xv
            .iter()
            .zip(&mv)
            .map(|(x, m)| 0.5 * (x - m) * (x - m))
            .sum();
        let constant = 0.5 * (2.0 * PI).ln() * 3.0;
        assert!((g.scalar(nll) - constant - half_sq).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 7;
        let xv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sv: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();

        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![n], xv.clone()));
        let mean = g.input(Tensor::new(vec![n], mv.clone()));
        let std = g.input(Tensor::new(vec![n], sv.clone()));
        let nll = gaussian_nll(&mut g, x, DiagGaussian::new(mean, std)).unwrap();

        let direct: f64 = (0..n)
            .map(|i| {
                0.5 * (2.0 * PI).ln()
                    + sv[i].ln()
                    + (xv[i] - mv[i]).powi(2) / (2.0 * sv[i] * sv[i])
            })
            .sum();
        assert!((g.scalar(nll) - direct).abs() < 1e-9);
    }

    #[test]
    fn reparam_zero_noise_returns_mean() {
        let mut g = Graph::new();
        let mean = g.input(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let std = g.input(Tensor::full(vec![3], 0.7));
        let noise = g.input(Tensor::zeros(vec![3]));
        let s = reparam_sample(&mut g, DiagGaussian::new(mean, std), noise).unwrap();
        assert_eq!(g.value(s).data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn reparam_zero_stddev_ignores_noise() {
        let mut g = Graph::new();
        let mean = g.input(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let std = g.input(Tensor::zeros(vec![3]));
        let noise = g.input(Tensor::new(vec![3], vec![5.0, -7.0, 9.0]));
        let s = reparam_sample(&mut g, DiagGaussian::new(mean, std), noise).unwrap();
        assert_eq!(g.value(s).data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn reparam_gradient_through_mean_is_one() {
        let mut ps = ParamSet::new();
        ps.insert("mean", Tensor::new(vec![4], vec![0.3, 0.1, -0.6, 0.9]));
        let mut g = Graph::new();
        let mean = g.param(&ps, "mean");
        let std = g.input(Tensor::full(vec![4], 0.4));
        let noise = g.input(Tensor::new(vec![4], vec![0.2, -1.0, 0.7, 1.5]));
        let s = reparam_sample(&mut g, DiagGaussian::new(mean, std), noise).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["mean"].data, vec![1.0; 4]);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            qm in proptest::collection::vec(-3.0f64..3.0, 1..6),
            qs_raw in proptest::collection::vec(0.05f64..3.0, 1..6),
            pm_raw in proptest::collection::vec(-3.0f64..3.0, 1..6),
            ps_raw in proptest::collection::vec(0.05f64..3.0, 1..6),
        ) {
            let n = qm.len().min(qs_raw.len()).min(pm_raw.len()).min(ps_raw.len());
            let mut g = Graph::new();
            let (q, p) = gaussian_pair(
                &mut g,
                &qm[..n],
                &qs_raw[..n],
                &pm_raw[..n],
                &ps_raw[..n],
            );
            let kl = gaussian_kl(&mut g, q, p).unwrap();
            prop_assert!(g.scalar(kl) >= -1e-12);
        }
    }
}
