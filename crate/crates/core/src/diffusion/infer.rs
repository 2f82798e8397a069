use crate::embedding::{FaceFeature, StackLayout};
use crate::error::{Error, Result};
use crate::mask::{pyramids_for_boxes, AttentionMask, FaceBox};
use crate::tensor::Tensor;

use super::model::{Conditioning, SiteMaps, ToyDenoiser};
use super::pose::{render_pose_control, Keypoint, PALETTE};
use super::sample::sample_with_maps;
use super::train::text_encoder;

/// A face position taken from a pose annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFace {
    pub bbox: FaceBox,
    pub keypoints: Vec<Keypoint>,
}

/// Identity `i` is placed at pose face `i`; extra pose faces only
/// contribute skeletons. Identities and poses may come from different
/// sources.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub caption: String,
    pub identities: Vec<FaceFeature>,
    pub pose_faces: Vec<PoseFace>,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub grid: Tensor,
    pub layout: StackLayout,
    /// Assembled mask per stage resolution, finest first.
    pub masks: Vec<AttentionMask>,
    pub control: Tensor,
    /// Attention maps of the last denoising step.
    pub final_maps: Vec<SiteMaps>,
}

impl InferenceRequest {
    pub fn conditioning(&self, model: &ToyDenoiser) -> Result<Conditioning> {
        let config = &model.config;
        let n = self.identities.len();
        if n > self.pose_faces.len() {
            return Err(Error::InvalidArgument(format!(
                "{n} identities but only {} pose faces",
                self.pose_faces.len()
            )));
        }
        if n > PALETTE.len() {
            return Err(Error::InvalidArgument(format!(
                "at most {} identities are supported, got {n}",
                PALETTE.len()
            )));
        }
        let size = config.image_size;
        if let Some(p) = self.pose_faces.iter().find(|p| !p.bbox.within(size, size)) {
            return Err(Error::InvalidArgument(format!("pose box {:?} outside the {size}x{size} grid", p.bbox)));
        }
        let boxes: Vec<FaceBox> = self.pose_faces[..n].iter().map(|p| p.bbox).collect();
        let keypoints: Vec<Vec<Keypoint>> = self.pose_faces.iter().map(|p| p.keypoints.clone()).collect();
        let circled: Vec<usize> = (0..n).collect();
        let pose = render_pose_control(&keypoints, &circled, size, size)?;
        Ok(Conditioning {
            text: text_encoder(config).encode(&self.caption),
            faces: self.identities.clone(),
            pyramids: pyramids_for_boxes(&boxes, config.mask_margin, size, &config.stages)?,
            control: pose.image,
        })
    }
}

/// Stack, mask and sample with a fixed model. The number of identities may
/// exceed the capacity the model was trained with.
pub fn infer(model: &ToyDenoiser, req: &InferenceRequest) -> Result<InferenceOutput> {
    let cond = req.conditioning(model)?;
    let m = &model.config.model;
    let layout = StackLayout {
        text_len: cond.text.len(),
        block_len: m.block_len(),
        n_faces: cond.faces.len(),
    };
    let masks = model.stage_masks(&cond, layout, false)?;
    let s = sample_with_maps(model, &cond, req.steps, req.seed)?;
    Ok(InferenceOutput {
        grid: s.grid,
        layout,
        masks,
        control: cond.control,
        final_maps: s.final_maps,
    })
}
