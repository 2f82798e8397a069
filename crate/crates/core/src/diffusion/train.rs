use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{Config, TrainConfig};
use crate::embedding::{gaussian, select_and_order_faces, HashTextEncoder};
use crate::error::{Error, Result};
use crate::mask::pyramids_for_boxes;
use crate::tensor::Tensor;

use super::data::AnnotatedRecord;
use super::model::{Conditioning, ToyDenoiser};
use super::pose::render_pose_control;
use super::schedule::NoiseSchedule;

/// Seed mixed into the caption hash encoder.
pub const TEXT_SEED: u64 = 0x7e47;

/// One `(z_0, t, ε)` draw with its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub z0: Tensor,
    pub t: usize,
    pub noise: Tensor,
    pub cond: Conditioning,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

pub fn text_encoder(config: &Config) -> HashTextEncoder {
    HashTextEncoder::new(config.model.d_k, config.model.text_len, TEXT_SEED)
}

/// Builds the conditioning of `record` for a chosen slot order: selected
/// faces are stacked and circled in `order`, every face keeps its skeleton.
pub fn conditioning_for(config: &Config, record: &AnnotatedRecord, order: &[usize]) -> Result<Conditioning> {
    let size = config.image_size;
    let boxes: Vec<_> = order.iter().map(|&i| record.faces[i].bbox).collect();
    let keypoints: Vec<_> = record.faces.iter().map(|f| f.keypoints.clone()).collect();
    let pose = render_pose_control(&keypoints, order, size, size)?;
    Ok(Conditioning {
        text: text_encoder(config).encode(&record.caption),
        faces: order.iter().map(|&i| record.faces[i].feature.clone()).collect(),
        pyramids: pyramids_for_boxes(&boxes, config.mask_margin, size, &config.stages)?,
        control: pose.image,
    })
}

/// Random face selection and order (capped at the capacity), random `t`
/// and Gaussian `ε`.
pub fn sample_example(config: &Config, record: &AnnotatedRecord, rng: &mut impl Rng) -> Result<TrainingExample> {
    let sel = select_and_order_faces(record.faces.len(), config.capacity, rng);
    let cond = conditioning_for(config, record, &sel.order)?;
    let t = rng.random_range(1..=config.schedule.t_max);
    let noise = gaussian(record.image.shape(), 1.0, rng);
    Ok(TrainingExample {
        z0: record.image.clone(),
        t,
        noise,
        cond,
    })
}

/// Mean over the batch of `mean((ε - ε_θ(z_t, ...))^2)`, recorded on `tape`.
pub fn training_loss(
    tape: &mut Tape,
    model: &ToyDenoiser,
    vars: &[Var],
    schedule: &NoiseSchedule,
    batch: &[TrainingExample],
    ablate_mask: bool,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        let z_t = schedule.add_noise(&ex.z0, ex.t, &ex.noise)?;
        let f = model.forward(tape, vars, &z_t, ex.t, &ex.cond, ablate_mask)?;
        let target = tape.constant(ex.noise.clone())?;
        let l = tape.mse(f.eps, target)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    tape.scale(total.unwrap(), 1.0 / batch.len() as f64)
}

/// Untaped loss of a fixed batch.
pub fn evaluate_loss(model: &ToyDenoiser, batch: &[TrainingExample], ablate_mask: bool) -> Result<f64> {
    let schedule = NoiseSchedule::from_config(&model.config.schedule)?;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false)?;
    let l = training_loss(&mut tape, model, &vars, &schedule, batch, ablate_mask)?;
    Ok(tape.value(l).item())
}

/// The generator for step `step`. Depends only on `(seed, step)`, so a run
/// resumed at any step draws the same batches as an unbroken run.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

pub fn sample_batch(config: &Config, records: &[AnnotatedRecord], batch: usize, rng: &mut impl Rng) -> Result<Vec<TrainingExample>> {
    (0..batch)
        .map(|_| {
            let r = &records[rng.random_range(0..records.len())];
            sample_example(config, r, rng)
        })
        .collect()
}

/// Runs SGD from `start_step` up to `train.steps`, appending one point per
/// step to `trace` (the loss before that step's update). A non-finite loss
/// or gradient aborts with [`Error::Diverged`]; `trace` keeps the steps done.
pub fn train(
    model: &mut ToyDenoiser,
    records: &[AnnotatedRecord],
    train: &TrainConfig,
    start_step: usize,
    trace: &mut Vec<LossPoint>,
) -> Result<()> {
    if records.is_empty() && start_step < train.steps {
        return Err(Error::InvalidArgument("training needs at least one record".into()));
    }
    if train.batch == 0 || train.learning_rate.is_nan() || train.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument("batch and learning rate must be positive".into()));
    }
    let schedule = NoiseSchedule::from_config(&model.config.schedule)?;
    let config = model.config.clone();
    for step in start_step..train.steps {
        let mut rng = step_rng(train.seed, step);
        let batch = sample_batch(&config, records, train.batch, &mut rng)?;
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, true)?;
        let loss = match training_loss(&mut tape, model, &vars, &schedule, &batch, train.ablate_mask) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = match tape.backward(loss) {
            Ok(g) => g,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: value }),
            Err(e) => return Err(e),
        };
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(model.params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect();
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let scale = if train.grad_clip > 0.0 && norm > train.grad_clip {
            train.grad_clip / norm
        } else {
            1.0
        };
        let lr = train.learning_rate * scale;
        for (p, g) in model.params.tensors_mut().iter_mut().zip(&grads) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        trace.push(LossPoint { step, loss: value });
    }
    Ok(())
}
