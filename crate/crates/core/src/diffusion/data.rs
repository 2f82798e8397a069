use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::embedding::{gaussian, FaceFeature};
use crate::error::{Error, Result};
use crate::mask::FaceBox;
use crate::metrics::PatternEncoder;
use crate::tensor::Tensor;

use super::pose::Keypoint;

const BACKGROUND_STD: f64 = 0.3;
const PLACEMENT_RETRIES: usize = 200;
const RECORD_RETRIES: usize = 50;
const ENCODER_SEED: u64 = 0x5eed_face;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedFace {
    pub bbox: FaceBox,
    pub keypoints: Vec<Keypoint>,
    pub feature: FaceFeature,
    pub identity: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedRecord {
    /// `H x W x C`.
    pub image: Tensor,
    pub caption: String,
    pub faces: Vec<AnnotatedFace>,
}

/// Deterministic stand-in for a face-recognition backbone: pools a face box
/// into an `L x L` grid of channel means, then applies fixed projections.
#[derive(Debug, Clone)]
pub struct ToyFaceEncoder {
    grid: usize,
    global: Tensor,
    local: Option<Tensor>,
}

impl ToyFaceEncoder {
    pub fn new(grid: usize, channels: usize, d_gf: usize, d_lf: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED);
        let flat = grid * grid * channels;
        let global = gaussian(&[flat, d_gf], (1.0 / flat as f64).sqrt(), &mut rng);
        let local = (d_lf != channels).then(|| gaussian(&[channels, d_lf], (1.0 / channels as f64).sqrt(), &mut rng));
        Self { grid, global, local }
    }

    pub fn from_config(c: &Config) -> Self {
        Self::new(c.model.local_grid, c.channels, c.model.d_gf, c.model.d_lf)
    }

    pub fn encode(&self, image: &Tensor, region: FaceBox, identity: &str) -> Result<FaceFeature> {
        let pooled = PatternEncoder::with_region(self.grid, region).pool(image)?;
        let flat = pooled.reshape(&[1, pooled.numel()])?;
        let global = flat.matmul(&self.global)?;
        let local = match &self.local {
            Some(p) => pooled.matmul(p)?,
            None => pooled,
        };
        FaceFeature::new(global, local, identity)
    }
}

/// Synthetic records plus the identity templates that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub records: Vec<AnnotatedRecord>,
    /// One `L x L x C` pattern per identity.
    pub templates: Vec<Tensor>,
}

pub fn identity_name(i: usize) -> String {
    format!("id{i}")
}

/// Center first, then the four corners.
pub fn box_keypoints(b: &FaceBox) -> Vec<Keypoint> {
    let (cx, cy) = b.center();
    vec![
        [cx, cy, 1.0],
        [b.x0, b.y0, 1.0],
        [b.x1, b.y0, 1.0],
        [b.x0, b.y1, 1.0],
        [b.x1, b.y1, 1.0],
    ]
}

/// Paints `template` (an `L x L x C` pattern) over an integer box, using the
/// same cell assignment as [`PatternEncoder`].
pub fn paint_face(image: &mut Tensor, b: &FaceBox, template: &Tensor) -> Result<()> {
    let (_, w, c) = image.dims3("paint_face")?;
    let (l, _, tc) = template.dims3("paint_face template")?;
    if tc != c {
        return Err(Error::ShapeMismatch {
            op: "paint_face",
            left: image.shape().to_vec(),
            right: template.shape().to_vec(),
        });
    }
    let (x0, y0, x1, y1) = (b.x0 as usize, b.y0 as usize, b.x1 as usize, b.y1 as usize);
    let (bw, bh) = (x1 - x0, y1 - y0);
    for y in y0..y1 {
        let cy = (y - y0) * l / bh;
        for x in x0..x1 {
            let cx = (x - x0) * l / bw;
            for ch in 0..c {
                image.data_mut()[(y * w + x) * c + ch] = template.data()[(cy * l + cx) * c + ch];
            }
        }
    }
    Ok(())
}

/// Pearson correlation of a face region with an identity template expanded
/// to that region.
pub fn template_correlation(image: &Tensor, b: &FaceBox, template: &Tensor) -> Result<f64> {
    let (h, w, c) = image.dims3("template_correlation")?;
    let mut canvas = Tensor::zeros(&[h, w, c]);
    paint_face(&mut canvas, b, template)?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for y in b.y0 as usize..b.y1 as usize {
        for x in b.x0 as usize..b.x1 as usize {
            for ch in 0..c {
                xs.push(image.data()[(y * w + x) * c + ch]);
                ys.push(canvas.data()[(y * w + x) * c + ch]);
            }
        }
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    Ok(sxy / (sxx * syy).sqrt().max(f64::MIN_POSITIVE))
}

fn place_boxes(n: usize, size: usize, min: usize, max: usize, rng: &mut impl Rng) -> Option<Vec<FaceBox>> {
    let mut boxes: Vec<FaceBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let placed = (0..PLACEMENT_RETRIES).find_map(|_| {
            let bw = rng.random_range(min..=max);
            let bh = rng.random_range(min..=max);
            let x0 = rng.random_range(0..=size - bw) as f64;
            let y0 = rng.random_range(0..=size - bh) as f64;
            let b = FaceBox {
                x0,
                y0,
                x1: x0 + bw as f64,
                y1: y0 + bh as f64,
            };
            (!boxes.iter().any(|o| o.overlaps(&b))).then_some(b)
        })?;
        boxes.push(placed);
    }
    Some(boxes)
}

/// Background texture plus non-overlapping faces painted with identity
/// patterns. Face count per record is uniform in the configured range.
pub fn make_synthetic_dataset(config: &Config) -> Result<SyntheticDataset> {
    let s = &config.synthetic;
    let (size, c, l) = (config.image_size, config.channels, config.model.local_grid);
    if s.identities < 2 {
        return Err(Error::InvalidArgument("the synthetic task needs at least two identities".into()));
    }
    if s.min_faces > s.max_faces || s.min_face_size > s.max_face_size {
        return Err(Error::InvalidArgument("synthetic ranges are inverted".into()));
    }
    if s.min_face_size < l || s.max_face_size > size {
        return Err(Error::InvalidArgument(format!(
            "face sizes {}..={} must lie within {l}..={size}",
            s.min_face_size, s.max_face_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let templates: Vec<Tensor> = (0..s.identities).map(|_| gaussian(&[l, l, c], 1.0, &mut rng)).collect();
    let encoder = ToyFaceEncoder::from_config(config);
    let mut records = Vec::with_capacity(s.records);
    for r in 0..s.records {
        let n = rng.random_range(s.min_faces..=s.max_faces);
        let boxes = (0..RECORD_RETRIES)
            .find_map(|_| place_boxes(n, size, s.min_face_size, s.max_face_size, &mut rng))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("record {r}: cannot place {n} faces without overlap"))
            })?;
        let mut ids: Vec<usize> = (0..s.identities).collect();
        ids.shuffle(&mut rng);
        let ids: Vec<usize> = (0..n)
            .map(|i| if i < ids.len() { ids[i] } else { rng.random_range(0..s.identities) })
            .collect();
        let mut image = gaussian(&[size, size, c], BACKGROUND_STD, &mut rng);
        for (b, &id) in boxes.iter().zip(&ids) {
            paint_face(&mut image, b, &templates[id])?;
        }
        let faces = boxes
            .iter()
            .zip(&ids)
            .map(|(b, &id)| {
                let identity = identity_name(id);
                Ok(AnnotatedFace {
                    bbox: *b,
                    keypoints: box_keypoints(b),
                    feature: encoder.encode(&image, *b, &identity)?,
                    identity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let caption = match n {
            1 => "a photo of one person".to_string(),
            _ => format!("a photo of {n} people"),
        };
        records.push(AnnotatedRecord { image, caption, faces });
    }
    Ok(SyntheticDataset { records, templates })
}
