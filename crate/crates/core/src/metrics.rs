//! Identity-preservation and text-consistency metrics.
//!
//! All three scores are cosine similarities of encoder outputs:
//!
//! - `TextSim(P, A') = cos(E_text(P), E_image(A'))`
//! - `SingleSim(A, A') = cos(E_face(A), E_face(A'))`
//! - `MultiSim(A, B) = (SingleSim(A, A') + SingleSim(B, B')) / 2 + (1 - SingleSim(A', B'))`
//!
//! MultiSim rewards each generated face for matching its source and
//! penalizes the two generated faces for resembling each other, so it lies in
//! `[-1, 3]`: 2 for perfect preservation of orthogonal identities, 1 when both
//! outputs collapse onto the same face.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{fnv1a, HashTextEncoder};
use crate::error::{Error, Result};
use crate::mask::FaceBox;
use crate::numeric::mean_std;
use crate::tensor::Tensor;

/// Maps an image-like tensor to an embedding vector.
pub trait ImageEncoder {
    fn embed(&self, input: &Tensor) -> Result<Vec<f64>>;
}

pub trait TextEncoder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Passes the input through unchanged (flattened). Used wherever the inputs
/// already are embeddings.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl ImageEncoder for IdentityEncoder {
    fn embed(&self, input: &Tensor) -> Result<Vec<f64>> {
        Ok(input.data().to_vec())
    }
}

/// Average-pools a face region of an `h x w x c` grid into an `L x L` grid
/// of channel means and flattens it. Two crops of the same synthetic identity
/// pattern encode to the same vector.
#[derive(Debug, Clone, Copy)]
pub struct PatternEncoder {
    pub grid: usize,
    /// Region to pool; the whole image when `None`.
    pub region: Option<FaceBox>,
}

impl PatternEncoder {
    pub fn new(grid: usize) -> Self {
        Self { grid, region: None }
    }

    pub fn with_region(grid: usize, region: FaceBox) -> Self {
        Self {
            grid,
            region: Some(region),
        }
    }

    /// Pooled `L^2 x c` cell means.
    pub fn pool(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w, c) = image.dims3("pattern encoder")?;
        let b = self.region.unwrap_or(FaceBox {
            x0: 0.0,
            y0: 0.0,
            x1: w as f64,
            y1: h as f64,
        });
        let (x0, y0) = (b.x0.max(0.0) as usize, b.y0.max(0.0) as usize);
        let (x1, y1) = ((b.x1 as usize).min(w), (b.y1 as usize).min(h));
        let (bw, bh) = (x1.saturating_sub(x0), y1.saturating_sub(y0));
        let l = self.grid;
        if bw < l || bh < l {
            return Err(Error::InvalidArgument(format!(
                "region {bw}x{bh} is smaller than the {l}x{l} pooling grid"
            )));
        }
        let mut sums = vec![0.0; l * l * c];
        let mut counts = vec![0usize; l * l];
        for y in y0..y1 {
            let cy = (y - y0) * l / bh;
            for x in x0..x1 {
                let cx = (x - x0) * l / bw;
                let cell = cy * l + cx;
                counts[cell] += 1;
                for ch in 0..c {
                    sums[cell * c + ch] += image.data()[(y * w + x) * c + ch];
                }
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            for ch in 0..c {
                sums[cell * c + ch] /= n as f64;
            }
        }
        Tensor::new(vec![l * l, c], sums)
    }
}

impl ImageEncoder for PatternEncoder {
    fn embed(&self, input: &Tensor) -> Result<Vec<f64>> {
        Ok(self.pool(input)?.into_data())
    }
}

/// Bag-of-words text embedding built from hashed word tokens.
#[derive(Debug, Clone)]
pub struct HashBagTextEncoder {
    inner: HashTextEncoder,
}

impl HashBagTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            inner: HashTextEncoder::new(dim, 1, seed),
        }
    }
}

impl TextEncoder for HashBagTextEncoder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.inner.d_k];
        for w in text.split_whitespace() {
            for (a, v) in acc.iter_mut().zip(self.inner.token(&w.to_lowercase())) {
                *a += v;
            }
        }
        Ok(acc)
    }
}

/// Fixed seeded random projection of a flattened image.
#[derive(Debug, Clone)]
pub struct ProjectionImageEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl ImageEncoder for ProjectionImageEncoder {
    fn embed(&self, input: &Tensor) -> Result<Vec<f64>> {
        let n = input.numel();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&(n as u64).to_le_bytes()));
        let mut out = vec![0.0; self.dim];
        for &x in input.data() {
            for o in out.iter_mut() {
                *o += x * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(out)
    }
}

/// `u·v / (|u| |v|)`, clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>();
    let nv = v.iter().map(|x| x * x).sum::<f64>();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

pub fn text_sim(
    prompt: &str,
    generated: &Tensor,
    text_encoder: &dyn TextEncoder,
    image_encoder: &dyn ImageEncoder,
) -> Result<f64> {
    cosine_sim(&text_encoder.embed_text(prompt)?, &image_encoder.embed(generated)?)
}

pub fn single_sim(source: &Tensor, generated: &Tensor, encoder: &dyn ImageEncoder) -> Result<f64> {
    cosine_sim(&encoder.embed(source)?, &encoder.embed(generated)?)
}

/// Per-pair breakdown of [`multi_sim`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiSimParts {
    pub single_a: f64,
    pub single_b: f64,
    /// `SingleSim(A', B')`.
    pub cross: f64,
    pub multi: f64,
}

pub fn multi_sim_from_sims(single_a: f64, single_b: f64, cross: f64) -> f64 {
    (single_a + single_b) / 2.0 + (1.0 - cross)
}

pub fn multi_sim_parts(
    a: &Tensor,
    b: &Tensor,
    a_gen: &Tensor,
    b_gen: &Tensor,
    encoder: &dyn ImageEncoder,
) -> Result<MultiSimParts> {
    let ea = encoder.embed(a)?;
    let eb = encoder.embed(b)?;
    let ea_gen = encoder.embed(a_gen)?;
    let eb_gen = encoder.embed(b_gen)?;
    let single_a = cosine_sim(&ea, &ea_gen)?;
    let single_b = cosine_sim(&eb, &eb_gen)?;
    let cross = cosine_sim(&ea_gen, &eb_gen)?;
    Ok(MultiSimParts {
        single_a,
        single_b,
        cross,
        multi: multi_sim_from_sims(single_a, single_b, cross),
    })
}

pub fn multi_sim(a: &Tensor, b: &Tensor, a_gen: &Tensor, b_gen: &Tensor, encoder: &dyn ImageEncoder) -> Result<f64> {
    multi_sim_parts(a, b, a_gen, b_gen, encoder).map(|p| p.multi)
}

/// Extension beyond two identities: MultiSim over every unordered pair
/// `(i, j)` of sources and their generations. Reported separately from the
/// two-identity score.
pub fn multi_sim_all_pairs(
    sources: &[Tensor],
    generated: &[Tensor],
    encoder: &dyn ImageEncoder,
) -> Result<Vec<((usize, usize), f64)>> {
    if sources.len() != generated.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sources but {} generated images",
            sources.len(),
            generated.len()
        )));
    }
    let mut out = Vec::new();
    for i in 0..sources.len() {
        for j in i + 1..sources.len() {
            let v = multi_sim(&sources[i], &sources[j], &generated[i], &generated[j], encoder)?;
            out.push(((i, j), v));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub parts: MultiSimParts,
    pub text_sim: Option<f64>,
}

/// Per-row metrics and their population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Over both SingleSim values of every row.
    pub single_sim: Summary,
    pub multi_sim: Summary,
    pub text_sim: Option<Summary>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,single_sim_a,single_sim_b,cross_sim,multi_sim,text_sim\n");
        for (i, r) in self.rows.iter().enumerate() {
            let text = r.text_sim.map(|t| t.to_string()).unwrap_or_default();
            writeln!(
                s,
                "{i},{},{},{},{},{text}",
                r.parts.single_a, r.parts.single_b, r.parts.cross, r.parts.multi
            )
            .unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "SingleSim {:.3} ± {:.3}\nMultiSim {:.3} ± {:.3}\n",
            self.single_sim.mean, self.single_sim.std, self.multi_sim.mean, self.multi_sim.std
        );
        if let Some(t) = self.text_sim {
            writeln!(s, "TextSim {:.3} ± {:.3}", t.mean, t.std).unwrap();
        }
        s
    }
}

/// Inputs for one two-identity evaluation row.
#[derive(Debug, Clone)]
pub struct PairInputs<'a> {
    pub a: &'a Tensor,
    pub b: &'a Tensor,
}

#[derive(Debug, Clone)]
pub struct GeneratedPair<'a> {
    pub a: &'a Tensor,
    pub b: &'a Tensor,
}

/// Text-consistency inputs: a prompt per row plus the two encoders.
pub struct TextEval<'a> {
    pub prompts: &'a [String],
    pub text_encoder: &'a dyn TextEncoder,
    pub image_encoder: &'a dyn ImageEncoder,
}

/// Scores every row. TextSim is averaged over both generated images of a row.
pub fn evaluate_batch(
    pairs: &[PairInputs<'_>],
    generated: &[GeneratedPair<'_>],
    face_encoder: &dyn ImageEncoder,
    text: Option<TextEval<'_>>,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    if pairs.len() != generated.len() || text.as_ref().is_some_and(|t| t.prompts.len() != pairs.len()) {
        return Err(Error::InvalidArgument("pair, generation and prompt lists are misaligned".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (i, (p, g)) in pairs.iter().zip(generated).enumerate() {
        let parts = multi_sim_parts(p.a, p.b, g.a, g.b, face_encoder)?;
        let text_sim = match &text {
            Some(t) => {
                let sa = text_sim(&t.prompts[i], g.a, t.text_encoder, t.image_encoder)?;
                let sb = text_sim(&t.prompts[i], g.b, t.text_encoder, t.image_encoder)?;
                Some((sa + sb) / 2.0)
            }
            None => None,
        };
        rows.push(MetricRow { parts, text_sim });
    }
    let singles: Vec<f64> = rows
        .iter()
        .flat_map(|r| [r.parts.single_a, r.parts.single_b])
        .collect();
    let multis: Vec<f64> = rows.iter().map(|r| r.parts.multi).collect();
    let texts: Vec<f64> = rows.iter().filter_map(|r| r.text_sim).collect();
    Ok(MetricReport {
        single_sim: Summary::of(&singles),
        multi_sim: Summary::of(&multis),
        text_sim: (!texts.is_empty()).then(|| Summary::of(&texts)),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_rows(&[x]).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 1.0], &[-2.0, -2.0]).unwrap(), -1.0);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_sim(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn multi_sim_examples() {
        let id = IdentityEncoder;
        let a = v(&[1.0, 0.0]);
        let b = v(&[0.0, 1.0]);
        assert_eq!(multi_sim(&a, &b, &a, &b, &id).unwrap(), 2.0);
        assert_eq!(multi_sim(&a, &a, &a, &a, &id).unwrap(), 1.0);
        let m = multi_sim(&a, &b, &v(&[0.8, 0.6]), &v(&[0.6, 0.8]), &id).unwrap();
        assert!((m - 0.84).abs() < 1e-12);
    }

    #[test]
    fn text_sim_with_matching_toys() {
        struct Fixed(Vec<f64>);
        impl TextEncoder for Fixed {
            fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
                Ok(self.0.clone())
            }
        }
        let img = v(&[0.3, -0.4]);
        let s = text_sim("a photo", &img, &Fixed(vec![0.3, -0.4]), &IdentityEncoder).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        let s = text_sim("a photo", &img, &Fixed(vec![-0.3, 0.4]), &IdentityEncoder).unwrap();
        assert_eq!(s, -1.0);
    }

    #[test]
    fn batch_summary_and_errors() {
        let id = IdentityEncoder;
        let a = v(&[1.0, 0.0]);
        let b = v(&[0.0, 1.0]);
        let pairs = [PairInputs { a: &a, b: &b }];
        let gens = [GeneratedPair { a: &a, b: &b }];
        let r = evaluate_batch(&pairs, &gens, &id, None).unwrap();
        assert_eq!(r.multi_sim.std, 0.0);
        assert_eq!(r.multi_sim.mean, 2.0);
        assert!(r.text_sim.is_none());
        assert!(evaluate_batch(&[], &[], &id, None).is_err());
        assert!(evaluate_batch(&pairs, &[], &id, None).is_err());
        assert!(r.to_csv().lines().nth(1).unwrap().starts_with("0,1,1,0,2,"));
    }

    #[test]
    fn pattern_encoder_pools_cells() {
        // 4x4x1 grid, quadrants 1,2,3,4.
        let img = Tensor::from_fn(&[4, 4, 1], |i| {
            let (y, x) = (i / 4, i % 4);
            1.0 + (x / 2) as f64 + 2.0 * (y / 2) as f64
        });
        let e = PatternEncoder::new(2).embed(&img).unwrap();
        assert_eq!(e, vec![1.0, 2.0, 3.0, 4.0]);
        let sub = PatternEncoder::with_region(2, FaceBox::new(0.0, 0.0, 2.0, 2.0).unwrap());
        assert_eq!(sub.embed(&img).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn all_pairs_extension_counts_pairs() {
        let srcs: Vec<Tensor> = (0..4).map(|i| v(&[i as f64 + 1.0, 1.0])).collect();
        let out = multi_sim_all_pairs(&srcs, &srcs, &IdentityEncoder).unwrap();
        assert_eq!(out.len(), 6);
        assert!(multi_sim_all_pairs(&srcs, &srcs[..2], &IdentityEncoder).is_err());
    }
}
