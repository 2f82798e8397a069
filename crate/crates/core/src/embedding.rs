//! The multimodal embedding stack: text tokens followed by one token block
//! per identity.
//!
//! A face block has `L^2 + 1` rows. Row 0 is the projected global feature and
//! rows `1..=L^2` are the projected local grid cells. Both projections are
//! plain affine maps shared by every face and every stacking slot.

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    tokens: Tensor,
}

impl TextEmbedding {
    pub fn new(tokens: Tensor) -> Result<Self> {
        tokens.dims2("text embedding")?;
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Deterministic stand-in for a frozen text encoder: each word is hashed to a
/// seeded Gaussian token, the caption is truncated or padded to `text_len`.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    pub d_k: usize,
    pub text_len: usize,
    pub seed: u64,
}

impl HashTextEncoder {
    pub fn new(d_k: usize, text_len: usize, seed: u64) -> Self {
        Self { d_k, text_len, seed }
    }

    pub fn token(&self, word: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ self.seed);
        let scale = 1.0 / (self.d_k as f64).sqrt();
        (0..self.d_k)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect()
    }

    pub fn encode(&self, caption: &str) -> TextEmbedding {
        let words: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
        let mut data = Vec::with_capacity(self.text_len * self.d_k);
        for i in 0..self.text_len {
            let w = words.get(i).map(String::as_str).unwrap_or("<pad>");
            data.extend(self.token(w));
        }
        TextEmbedding {
            tokens: Tensor::new(vec![self.text_len, self.d_k], data).expect("positive extents"),
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// One identity's features: a `1 x d_gf` global vector and an
/// `L^2 x d_lf` local grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFeature {
    pub global: Tensor,
    pub local: Tensor,
    pub identity: String,
}

impl FaceFeature {
    pub fn new(global: Tensor, local: Tensor, identity: impl Into<String>) -> Result<Self> {
        let (gr, _) = global.dims2("global feature")?;
        if gr != 1 {
            return Err(Error::InvalidShape {
                shape: global.shape().to_vec(),
                reason: "global feature must be a single row".into(),
            });
        }
        let (lr, _) = local.dims2("local feature")?;
        let side = (lr as f64).sqrt().round() as usize;
        if side * side != lr {
            return Err(Error::InvalidShape {
                shape: local.shape().to_vec(),
                reason: "local feature row count must be a perfect square".into(),
            });
        }
        if !global.is_finite() || !local.is_finite() {
            return Err(Error::NonFinite("face feature"));
        }
        Ok(Self {
            global,
            local,
            identity: identity.into(),
        })
    }

    pub fn local_grid(&self) -> usize {
        (self.local.shape()[0] as f64).sqrt().round() as usize
    }

    pub fn d_gf(&self) -> usize {
        self.global.shape()[1]
    }

    pub fn d_lf(&self) -> usize {
        self.local.shape()[1]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            global: self.global.scale(factor),
            local: self.local.scale(factor),
            identity: self.identity.clone(),
        }
    }

    /// Text form: an `identity:` line, then `global:` and `local:` sections
    /// each holding a tensor dump.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "identity: {}", self.identity).unwrap();
        s.push_str("global:\n");
        s.push_str(&self.global.to_dump());
        s.push_str("local:\n");
        s.push_str(&self.local.to_dump());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut identity = None;
        let mut global = String::new();
        let mut local = String::new();
        let mut section: Option<&mut String> = None;
        for line in text.lines() {
            let t = line.trim();
            if let Some(id) = t.strip_prefix("identity:") {
                identity = Some(id.trim().to_string());
                section = None;
            } else if t == "global:" {
                section = Some(&mut global);
            } else if t == "local:" {
                section = Some(&mut local);
            } else if let Some(buf) = section.as_deref_mut() {
                buf.push_str(line);
                buf.push('\n');
            } else if !t.is_empty() {
                return Err(Error::Parse(format!("unexpected line outside a section: {t:?}")));
            }
        }
        let identity = identity.ok_or_else(|| Error::Parse("missing identity line".into()))?;
        Self::new(Tensor::from_dump(&global)?, Tensor::from_dump(&local)?, identity)
    }
}

/// Projected identity tokens, `(L^2 + 1) x d_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTokenBlock {
    pub tokens: Tensor,
}

/// Affine projections for global and local features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w_global: Tensor,
    pub b_global: Tensor,
    pub w_local: Tensor,
    pub b_local: Tensor,
}

impl ProjectionParams {
    pub fn init(d_gf: usize, d_lf: usize, d_k: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_global: gaussian(&[d_gf, d_k], (1.0 / d_gf as f64).sqrt(), rng),
            b_global: Tensor::zeros(&[1, d_k]),
            w_local: gaussian(&[d_lf, d_k], (1.0 / d_lf as f64).sqrt(), rng),
            b_local: Tensor::zeros(&[1, d_k]),
        }
    }

    pub fn d_k(&self) -> usize {
        self.w_global.shape()[1]
    }
}

/// i.i.d. `N(0, std^2)` entries.
pub fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * std)
}

/// Row partition shared by an [`EmbeddingStack`] and the columns of an
/// [`crate::mask::AttentionMask`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackLayout {
    pub text_len: usize,
    pub block_len: usize,
    pub n_faces: usize,
}

impl StackLayout {
    pub fn rows(&self) -> usize {
        self.text_len + self.n_faces * self.block_len
    }

    pub fn text_range(&self) -> Range<usize> {
        0..self.text_len
    }

    pub fn block_range(&self, face: usize) -> Range<usize> {
        let start = self.text_len + face * self.block_len;
        start..start + self.block_len
    }

    /// The text range followed by every block range.
    pub fn segments(&self) -> Vec<Range<usize>> {
        std::iter::once(self.text_range())
            .chain((0..self.n_faces).map(|f| self.block_range(f)))
            .collect()
    }

    /// `None` for text rows, otherwise the face whose block holds `row`.
    pub fn owner(&self, row: usize) -> Option<usize> {
        (row >= self.text_len).then(|| (row - self.text_len) / self.block_len)
    }
}

/// `K = [K_t ; K_f1 ; ... ; K_fN]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStack {
    pub tokens: Tensor,
    pub layout: StackLayout,
}

pub fn project_face(f: &FaceFeature, p: &ProjectionParams) -> Result<FaceTokenBlock> {
    let g = f.global.matmul(&p.w_global)?.add(&p.b_global)?;
    let l = f.local.matmul(&p.w_local)?.add(&p.b_local)?;
    Ok(FaceTokenBlock {
        tokens: Tensor::concat_rows(&[&g, &l])?,
    })
}

pub fn stack_embeddings(text: &TextEmbedding, blocks: &[FaceTokenBlock]) -> Result<EmbeddingStack> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("text embedding is empty".into()));
    }
    let d_k = text.width();
    let block_len = blocks.first().map(|b| b.tokens.shape()[0]).unwrap_or(1);
    for b in blocks {
        let (rows, width) = b.tokens.dims2("face block")?;
        if width != d_k || rows != block_len {
            return Err(Error::ShapeMismatch {
                op: "stack_embeddings",
                left: text.tokens.shape().to_vec(),
                right: b.tokens.shape().to_vec(),
            });
        }
    }
    let mut parts = vec![&text.tokens];
    parts.extend(blocks.iter().map(|b| &b.tokens));
    Ok(EmbeddingStack {
        tokens: Tensor::concat_rows(&parts)?,
        layout: StackLayout {
            text_len: text.len(),
            block_len,
            n_faces: blocks.len(),
        },
    })
}

/// Trainable handles of a [`ProjectionParams`] bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub w_global: Var,
    pub b_global: Var,
    pub w_local: Var,
    pub b_local: Var,
}

/// Taped counterpart of [`project_face`].
pub fn project_face_on_tape(tape: &mut Tape, p: ProjectionVars, f: &FaceFeature) -> Result<Var> {
    let g = tape.constant(f.global.clone())?;
    let l = tape.constant(f.local.clone())?;
    let g = tape.affine(g, p.w_global, p.b_global)?;
    let l = tape.affine(l, p.w_local, p.b_local)?;
    tape.concat_rows(&[g, l])
}

/// Taped counterpart of [`stack_embeddings`]; returns the stack and its layout.
pub fn stack_on_tape(
    tape: &mut Tape,
    text: &TextEmbedding,
    blocks: &[Var],
    block_len: usize,
) -> Result<(Var, StackLayout)> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("text embedding is empty".into()));
    }
    let t = tape.constant(text.tokens.clone())?;
    let mut parts = vec![t];
    parts.extend_from_slice(blocks);
    let k = tape.concat_rows(&parts)?;
    let layout = StackLayout {
        text_len: text.len(),
        block_len,
        n_faces: blocks.len(),
    };
    if tape.value(k).shape()[0] != layout.rows() {
        return Err(Error::Layout(format!(
            "stack has {} rows, layout expects {}",
            tape.value(k).shape()[0],
            layout.rows()
        )));
    }
    Ok((k, layout))
}

/// Which faces of a record get stacked, in slot order. Circles are drawn for
/// exactly the selected faces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceSelection {
    pub order: Vec<usize>,
    pub pose_only: Vec<usize>,
}

impl FaceSelection {
    pub fn circled(&self) -> &[usize] {
        &self.order
    }
}

/// Picks `min(capacity, face_count)` faces uniformly at random and returns
/// them in a uniformly random stacking order.
pub fn select_and_order_faces(face_count: usize, capacity: usize, rng: &mut impl Rng) -> FaceSelection {
    let mut idx: Vec<usize> = (0..face_count).collect();
    let k = capacity.min(face_count);
    let (chosen, _) = idx.partial_shuffle(rng, k);
    let order = chosen.to_vec();
    let mut pose_only: Vec<usize> = (0..face_count).filter(|i| !order.contains(i)).collect();
    pose_only.sort_unstable();
    FaceSelection { order, pose_only }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(d_gf: usize, d_lf: usize, l: usize, seed: u64) -> FaceFeature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FaceFeature::new(
            gaussian(&[1, d_gf], 1.0, &mut rng),
            gaussian(&[l * l, d_lf], 1.0, &mut rng),
            format!("id{seed}"),
        )
        .unwrap()
    }

    #[test]
    fn block_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ProjectionParams::init(512, 256, 768, &mut rng);
        let b = project_face(&feature(512, 256, 7, 2), &p).unwrap();
        assert_eq!(b.tokens.shape(), &[50, 768]);

        let p = ProjectionParams::init(8, 4, 16, &mut rng);
        let b = project_face(&feature(8, 4, 1, 3), &p).unwrap();
        assert_eq!(b.tokens.shape(), &[2, 16]);
    }

    #[test]
    fn zero_feature_zero_bias_gives_zero_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ProjectionParams::init(8, 4, 16, &mut rng);
        let f = FaceFeature::new(Tensor::zeros(&[1, 8]), Tensor::zeros(&[4, 4]), "z").unwrap();
        let b = project_face(&f, &p).unwrap();
        assert_eq!(b.tokens, Tensor::zeros(&[5, 16]));
    }

    #[test]
    fn projection_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ProjectionParams::init(8, 4, 16, &mut rng);
        assert!(project_face(&feature(9, 4, 2, 0), &p).is_err());
    }

    #[test]
    fn stack_row_counts() {
        let enc = HashTextEncoder::new(16, 77, 0);
        let text = enc.encode("a photo of four people");
        let block = FaceTokenBlock {
            tokens: Tensor::zeros(&[50, 16]),
        };
        let s = stack_embeddings(&text, &vec![block.clone(); 4]).unwrap();
        assert_eq!(s.tokens.shape()[0], 277);
        let s = stack_embeddings(&text, &vec![block.clone(); 7]).unwrap();
        assert_eq!(s.tokens.shape()[0], 427);
        let s = stack_embeddings(&text, &[]).unwrap();
        assert_eq!(s.tokens, *text.tokens());
        assert_eq!(s.layout.n_faces, 0);
    }

    #[test]
    fn stack_rejects_width_mismatch() {
        let text = HashTextEncoder::new(16, 4, 0).encode("x");
        let block = FaceTokenBlock {
            tokens: Tensor::zeros(&[5, 8]),
        };
        assert!(stack_embeddings(&text, &[block]).is_err());
    }

    #[test]
    fn selection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = select_and_order_faces(2, 4, &mut rng);
        let mut sorted = s.order.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1]);
        assert!(s.pose_only.is_empty());

        let s = select_and_order_faces(7, 4, &mut rng);
        assert_eq!(s.order.len(), 4);
        assert_eq!(s.pose_only.len(), 3);
        assert_eq!(s.circled(), s.order.as_slice());

        let a = select_and_order_faces(7, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = select_and_order_faces(7, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(select_and_order_faces(0, 4, &mut rng).order.is_empty());
    }

    #[test]
    fn feature_text_round_trip() {
        let f = feature(8, 4, 2, 11);
        let back = FaceFeature::from_text(&f.to_text()).unwrap();
        assert_eq!(back, f);
        assert!(FaceFeature::from_text("global:\nshape: 1 1\n0\n").is_err());
    }

    #[test]
    fn local_rows_must_be_square() {
        assert!(FaceFeature::new(Tensor::zeros(&[1, 2]), Tensor::zeros(&[3, 2]), "x").is_err());
    }

    #[test]
    fn text_encoder_is_deterministic_and_word_sensitive() {
        let enc = HashTextEncoder::new(8, 3, 1);
        assert_eq!(enc.encode("two people"), enc.encode("Two  people"));
        assert_ne!(enc.encode("two people"), enc.encode("three people"));
    }
}
