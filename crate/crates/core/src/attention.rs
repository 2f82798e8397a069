//! Multi-head cross-attention with multiplicative logit masking.
//!
//! Per head: `softmax((M ⊙ Q Kᵀ) / sqrt(d_head)) V`. A zero mask entry sets
//! the logit to zero rather than excluding the key, so every masked-out key
//! keeps the baseline weight `e^0` relative to the row maximum. The same mask
//! is shared by every head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embedding::{gaussian, EmbeddingStack, StackLayout};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::tensor::Tensor;

/// How the mask enters the logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// `M ⊙ logits` before the softmax.
    #[default]
    Multiplicative,
    /// Comparison mode, not the default: masked keys get a logit of `-1e9`
    /// and therefore zero weight.
    Additive,
}

const ADDITIVE_EXCLUSION: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
    pub d_head: usize,
}

impl AttentionParams {
    pub fn init(d_model: usize, d_k: usize, heads: usize, d_head: usize, rng: &mut impl Rng) -> Self {
        let inner = heads * d_head;
        Self {
            w_q: gaussian(&[d_model, inner], (1.0 / d_model as f64).sqrt(), rng),
            w_k: gaussian(&[d_k, inner], (1.0 / d_k as f64).sqrt(), rng),
            w_v: gaussian(&[d_k, inner], (1.0 / d_k as f64).sqrt(), rng),
            w_o: gaussian(&[inner, d_model], (1.0 / inner as f64).sqrt(), rng),
            heads,
            d_head,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<AttentionVars> {
        Ok(AttentionVars {
            w_q: tape.param(self.w_q.clone())?,
            w_k: tape.param(self.w_k.clone())?,
            w_v: tape.param(self.w_v.clone())?,
            w_o: tape.param(self.w_o.clone())?,
            heads: self.heads,
            d_head: self.d_head,
        })
    }
}

/// [`AttentionParams`] bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
    pub d_head: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub out: Tensor,
    /// Per-head `n_q x n_k` attention weights.
    pub maps: Vec<Tensor>,
}

/// Taped result: output handle plus per-head weight handles.
#[derive(Debug, Clone)]
pub struct TapedAttention {
    pub out: Var,
    pub maps: Vec<Var>,
}

fn validate_mask(mask: &AttentionMask, n_q: usize, n_k: usize) -> Result<()> {
    if mask.n_queries() != n_q || mask.n_keys() != n_k {
        return Err(Error::ShapeMismatch {
            op: "masked_cross_attention",
            left: vec![n_q, n_k],
            right: mask.m.shape().to_vec(),
        });
    }
    if let Some(v) = mask.m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("mask value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Records masked cross-attention on `tape`. `x` is `n_q x d_model`, `keys`
/// is the `n_k x d_K` embedding stack. The mask is a constant.
pub fn masked_cross_attention_on_tape(
    tape: &mut Tape,
    x: Var,
    keys: Var,
    layout: &StackLayout,
    mask: &AttentionMask,
    p: &AttentionVars,
    mode: AttentionMode,
) -> Result<TapedAttention> {
    let n_q = tape.value(x).dims2("attention queries")?.0;
    let n_k = tape.value(keys).dims2("attention keys")?.0;
    if n_k != layout.rows() {
        return Err(Error::Layout(format!(
            "stack has {n_k} rows, layout expects {}",
            layout.rows()
        )));
    }
    mask.check_congruent(layout)?;
    validate_mask(mask, n_q, n_k)?;

    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(keys, p.w_k)?;
    let v = tape.matmul(keys, p.w_v)?;
    let inv_sqrt = 1.0 / (p.d_head as f64).sqrt();
    let mask_var = match mode {
        AttentionMode::Multiplicative => tape.constant(mask.m.clone())?,
        AttentionMode::Additive => tape.constant(mask.m.map(|m| (1.0 - m) * ADDITIVE_EXCLUSION))?,
    };

    let segments = layout.segments();
    let mut heads = Vec::with_capacity(p.heads);
    let mut maps = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let start = h * p.d_head;
        let qh = tape.slice_cols(q, start, p.d_head)?;
        let kht = {
            let kh = tape.slice_cols(k, start, p.d_head)?;
            tape.transpose(kh)?
        };
        let vh = tape.slice_cols(v, start, p.d_head)?;
        let logits = tape.matmul(qh, kht)?;
        let scaled = match mode {
            AttentionMode::Multiplicative => {
                let masked = tape.hadamard(logits, mask_var)?;
                tape.scale(masked, inv_sqrt)?
            }
            AttentionMode::Additive => {
                let s = tape.scale(logits, inv_sqrt)?;
                tape.add(s, mask_var)?
            }
        };
        let weights = tape.softmax_rows_segmented(scaled, &segments)?;
        heads.push(tape.matmul_segmented(weights, vh, &segments)?);
        maps.push(weights);
    }
    let cat = tape.concat_cols(&heads)?;
    let out = tape.matmul(cat, p.w_o)?;
    Ok(TapedAttention { out, maps })
}

/// Untaped masked cross-attention that keeps the per-head maps.
pub fn masked_cross_attention(
    x: &Tensor,
    stack: &EmbeddingStack,
    mask: &AttentionMask,
    p: &AttentionParams,
    mode: AttentionMode,
) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let kv = tape.constant(stack.tokens.clone())?;
    let vars = AttentionVars {
        w_q: tape.constant(p.w_q.clone())?,
        w_k: tape.constant(p.w_k.clone())?,
        w_v: tape.constant(p.w_v.clone())?,
        w_o: tape.constant(p.w_o.clone())?,
        heads: p.heads,
        d_head: p.d_head,
    };
    let r = masked_cross_attention_on_tape(&mut tape, xv, kv, &stack.layout, mask, &vars, mode)?;
    Ok(AttentionOutput {
        out: tape.value(r.out).clone(),
        maps: r.maps.iter().map(|&m| tape.value(m).clone()).collect(),
    })
}

/// Standard multi-head cross-attention with no mask anywhere. Key-axis sums
/// follow the stack segments, as in the masked kernel.
pub fn reference_attention(x: &Tensor, stack: &EmbeddingStack, p: &AttentionParams) -> Result<AttentionOutput> {
    let keys = &stack.tokens;
    let segments = stack.layout.segments();
    let q = x.matmul(&p.w_q)?;
    let k = keys.matmul(&p.w_k)?;
    let v = keys.matmul(&p.w_v)?;
    let inv_sqrt = 1.0 / (p.d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut maps = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let start = h * p.d_head;
        let qh = q.slice_cols(start, p.d_head)?;
        let kht = k.slice_cols(start, p.d_head)?.transpose()?;
        let vh = v.slice_cols(start, p.d_head)?;
        let w = qh.matmul(&kht)?.scale(inv_sqrt).softmax_rows_segmented(&segments)?;
        heads.push(w.matmul_segmented(&vh, &segments)?);
        maps.push(w);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let out = Tensor::concat_cols(&refs)?.matmul(&p.w_o)?;
    Ok(AttentionOutput { out, maps })
}

/// Where one face's in-mask queries send their attention, averaged over
/// heads and queries.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceConcentration {
    pub face: usize,
    /// Queries inside this face's mask and no other face's mask.
    pub in_mask_queries: usize,
    /// Mass on this face's own block.
    pub matching_mass: f64,
    /// Mass on the other face blocks, averaged per block (0 with one face).
    pub foreign_mass: f64,
    pub text_mass: f64,
}

impl FaceConcentration {
    pub fn ratio(&self) -> f64 {
        self.matching_mass / self.foreign_mass
    }
}

/// Routing statistics per face. `region` decides which queries belong to
/// which face; it need not be the mask the maps were computed with (the
/// mask-ablated control uses all ones for attention but the true regions
/// here).
pub fn attention_concentration(maps: &[Tensor], region: &AttentionMask) -> Result<Vec<FaceConcentration>> {
    let layout = region.layout;
    let (n_q, n_k) = (region.n_queries(), region.n_keys());
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no attention maps retained".into()));
    }
    for m in maps {
        if m.shape() != [n_q, n_k] {
            return Err(Error::Layout(format!(
                "map shape {:?} does not match mask {n_q}x{n_k}",
                m.shape()
            )));
        }
    }
    let inside = |q: usize, face: usize| region.m.at(q, layout.block_range(face).start) != 0.0;
    let mut stats = Vec::with_capacity(layout.n_faces);
    for face in 0..layout.n_faces {
        let queries: Vec<usize> = (0..n_q)
            .filter(|&q| inside(q, face) && (0..layout.n_faces).all(|o| o == face || !inside(q, o)))
            .collect();
        let mut matching = 0.0;
        let mut foreign = 0.0;
        let mut text = 0.0;
        for map in maps {
            for &q in &queries {
                let row = map.row(q);
                text += row[layout.text_range()].iter().sum::<f64>();
                for other in 0..layout.n_faces {
                    let mass: f64 = row[layout.block_range(other)].iter().sum();
                    if other == face {
                        matching += mass;
                    } else {
                        foreign += mass;
                    }
                }
            }
        }
        let denom = (maps.len() * queries.len()).max(1) as f64;
        let foreign_blocks = layout.n_faces.saturating_sub(1).max(1) as f64;
        stats.push(FaceConcentration {
            face,
            in_mask_queries: queries.len(),
            matching_mass: matching / denom,
            foreign_mass: foreign / denom / foreign_blocks,
            text_mass: text / denom,
        });
    }
    Ok(stats)
}
