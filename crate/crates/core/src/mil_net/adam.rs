use super::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Self::new(params.len())
    }

    /// One update on a flat parameter slice: decoupled decay
    /// `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = cfg.learning_rate * cfg.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            params[i] -= decay * params[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.dims() != grads.dims() || params.gated() != grads.gated() {
        return Err(Error::Shape("adam: gradient shape differs from parameters".into()));
    }
    state.step(params.as_mut_slice(), grads.as_slice(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![0.3, -1.2, 4.0];
        let orig = p.clone();
        let mut s = AdamState::new(3);
        s.step(&mut p, &[0.0; 3], &AdamConfig::default()).unwrap();
        assert_eq!(p, orig);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so Δ = lr·|g|/(|g| + eps)
        let cfg = AdamConfig { learning_rate: 1e-3, ..Default::default() };
        for g in [1e-3, -0.01, 0.5, -7.0, 123.0] {
            let mut p = vec![2.0];
            AdamState::new(1).step(&mut p, &[g], &cfg).unwrap();
            let delta = (p[0] - 2.0f64).abs();
            let closed = 1e-3 * g.abs() / (g.abs() + 1e-8);
            assert!((delta - closed).abs() < 1e-15, "g={g} delta={delta}");
            assert!((delta - 1e-3).abs() < 1e-6);
            assert_eq!((p[0] - 2.0).signum(), -g.signum());
        }
    }

    #[test]
    fn two_step_hand_trace() {
        let cfg = AdamConfig { learning_rate: 0.1, weight_decay: 0.5, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        s.step(&mut p, &[0.5], &cfg).unwrap();
        // decay: 1 - 0.1*0.5*1 = 0.95; m=0.05, v=0.00025; m̂=0.5, v̂=0.25
        let th1 = 0.95 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - th1).abs() < 1e-15);
        s.step(&mut p, &[-0.2], &cfg).unwrap();
        let decayed = th1 - 0.1 * 0.5 * th1;
        let m2: f64 = 0.9 * 0.05 + 0.1 * -0.2;
        let v2: f64 = 0.999 * 0.00025 + 0.001 * 0.04;
        let m_hat = m2 / (1.0 - 0.81);
        let v_hat = v2 / (1.0 - 0.999f64 * 0.999);
        let th2 = decayed - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - th2).abs() < 1e-14, "{} vs {th2}", p[0]);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3], &AdamConfig::default()).is_err());
    }
}
