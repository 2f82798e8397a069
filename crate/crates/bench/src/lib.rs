//! Fixtures shared by the kernel benchmarks.

use multid_core::diffusion::{conditioning_for, make_synthetic_dataset, Conditioning, ToyDenoiser};
use multid_core::embedding::{project_face, stack_embeddings, HashTextEncoder};
use multid_core::mask::{assemble_with_queries, pyramids_for_boxes};
use multid_core::{AttentionMask, AttentionParams, Config, EmbeddingStack, FaceBox, FaceFeature, ProjectionParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One attention site: queries, stack, mask and weights.
pub struct AttentionFixture {
    pub x: Tensor,
    pub stack: EmbeddingStack,
    pub mask: AttentionMask,
    pub params: AttentionParams,
}

/// `n_faces` boxes in a row on a `grid x grid` query map.
pub fn attention_fixture(config: &Config, grid: usize, n_faces: usize, seed: u64) -> AttentionFixture {
    let m = &config.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = ProjectionParams::init(m.d_gf, m.d_lf, m.d_k, &mut rng);
    let text = HashTextEncoder::new(m.d_k, m.text_len, seed).encode("a photo of people");
    let blocks: Vec<_> = (0..n_faces)
        .map(|i| {
            let f = FaceFeature::new(
                multid_core::embedding::gaussian(&[1, m.d_gf], 1.0, &mut rng),
                multid_core::embedding::gaussian(&[m.local_grid * m.local_grid, m.d_lf], 1.0, &mut rng),
                format!("f{i}"),
            )
            .expect("valid feature");
            project_face(&f, &proj).expect("projection")
        })
        .collect();
    let stack = stack_embeddings(&text, &blocks).expect("stack");
    let side = (grid / n_faces.max(1)).max(1) as f64;
    let boxes: Vec<FaceBox> = (0..n_faces)
        .map(|i| FaceBox::new(i as f64 * side, 0.0, (i as f64 + 1.0) * side, side.min(grid as f64)).expect("box"))
        .collect();
    let pyramids = pyramids_for_boxes(&boxes, config.mask_margin, grid, &[grid]).expect("pyramids");
    let levels: Vec<_> = pyramids.iter().map(|p| p.level(grid).expect("level")).collect();
    let mask = assemble_with_queries(m.text_len, m.block_len(), &levels, Some(grid * grid)).expect("mask");
    let params = AttentionParams::init(m.width, m.d_k, m.heads, m.d_head, &mut rng);
    let x = multid_core::embedding::gaussian(&[grid * grid, m.width], 1.0, &mut rng);
    AttentionFixture { x, stack, mask, params }
}

/// A freshly initialized denoiser with the conditioning of one synthetic
/// record that holds at least two faces.
pub fn denoiser_fixture(config: &Config) -> (ToyDenoiser, Conditioning, Tensor) {
    let data = make_synthetic_dataset(config).expect("dataset");
    let rec = data.records.iter().find(|r| r.faces.len() >= 2).expect("multi-face record");
    let order: Vec<usize> = (0..rec.faces.len().min(config.capacity)).collect();
    let cond = conditioning_for(config, rec, &order).expect("conditioning");
    let model = ToyDenoiser::init(config, 0).expect("model");
    (model, cond, rec.image.clone())
}
