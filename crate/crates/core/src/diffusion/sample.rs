use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::gaussian;
use crate::error::Result;
use crate::tensor::Tensor;

use super::model::{Conditioning, SiteMaps, ToyDenoiser};
use super::schedule::NoiseSchedule;

/// A generated grid with the attention maps of the final denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub grid: Tensor,
    pub final_maps: Vec<SiteMaps>,
}

/// Ancestral denoising from pure noise over `steps` strided timesteps.
pub fn sample(model: &ToyDenoiser, cond: &Conditioning, steps: usize, seed: u64) -> Result<Tensor> {
    Ok(sample_with_maps(model, cond, steps, seed)?.grid)
}

pub fn sample_with_maps(model: &ToyDenoiser, cond: &Conditioning, steps: usize, seed: u64) -> Result<Sample> {
    let schedule = NoiseSchedule::from_config(&model.config.schedule)?;
    let ts = schedule.strided_timesteps(steps)?;
    let (s, c) = (model.config.image_size, model.config.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian(&[s, s, c], 1.0, &mut rng);
    let mut final_maps = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let (eps, maps) = model.predict_with_maps(&x, t, cond, false)?;
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = schedule.alpha_bar(t_prev)?;
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let k = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        x = x.zip_map(&eps, |xv, ev| inv * (xv - k * ev))?;
        if t_prev > 0 {
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            let z = gaussian(&[s, s, c], 1.0, &mut rng);
            x = x.zip_map(&z, |xv, zv| xv + sigma * zv)?;
        }
        final_maps = maps;
    }
    Ok(Sample { grid: x, final_maps })
}
