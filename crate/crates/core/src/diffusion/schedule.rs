use crate::config::ScheduleConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear beta schedule with cumulative products. Timesteps are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 || !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::InvalidArgument(format!(
                "invalid schedule: {t_max} steps, beta {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.t_max, c.beta_start, c.beta_end)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_max() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.t_max()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `ᾱ_t`; `ᾱ_0 = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alphas_cumprod[self.check(t)?])
    }

    /// `z_t = sqrt(ᾱ_t) z_0 + sqrt(1 - ᾱ_t) ε`.
    pub fn add_noise(&self, z0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        self.check(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.zip_map(noise, |z, e| a * z + b * e)
    }

    /// `steps` timesteps from `t_max` down towards 1, evenly strided.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("sampling needs at least one step".into()));
        }
        let steps = steps.min(self.t_max());
        let t_max = self.t_max() as f64;
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| (t_max - i as f64 * t_max / steps as f64).round() as usize)
            .map(|t| t.clamp(1, self.t_max()))
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

/// Sinusoidal embedding `[sin(t f_k), cos(t f_k)]` with `f_k = 10000^(-k/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        v[k] = arg.sin();
        v[half + k] = arg.cos();
    }
    Tensor::new(vec![1, dim], v).expect("positive dim")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_alpha() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!(s.beta(0).is_err());
        assert!(s.beta(1001).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for t in 1..1000 {
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
        }
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let z0 = Tensor::from_fn(&[2, 2, 1], |i| i as f64 - 1.5);
        let zt = s.add_noise(&z0, 300, &Tensor::zeros(&[2, 2, 1])).unwrap();
        let a = s.alpha_bar(300).unwrap().sqrt();
        assert_eq!(zt, z0.scale(a));
        assert!(s.add_noise(&z0, 0, &z0).is_err());
    }

    #[test]
    fn strided_steps() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.strided_timesteps(1).unwrap(), vec![1000]);
        let ts = s.strided_timesteps(10).unwrap();
        assert_eq!(ts.len(), 10);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 100);
        assert!(s.strided_timesteps(0).is_err());
    }

    #[test]
    fn timestep_embedding_shape_and_values() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding(7, 8);
        assert!((e.data()[0] - 7f64.sin()).abs() < 1e-15);
    }
}
