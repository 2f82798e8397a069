//! Per-face spatial masks, the max-pooled mask pyramid, and assembly of the
//! query x key attention mask.

use std::collections::BTreeMap;

use crate::embedding::StackLayout;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned face box in pixel coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FaceBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl FaceBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        if !(x0 < x1 && y0 < y1) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("degenerate face box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width as f64 && self.y1 <= height as f64
    }

    pub fn overlaps(&self, other: &FaceBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

// Rounding slack so that e.g. 87.99999999999 floors to 88.
const SNAP: f64 = 1e-9;

fn floor_snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v.floor()
    }
}

fn ceil_snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v.ceil()
    }
}

/// Grows the box by `margin` of its width and height in total (half on each
/// side), rounds outward to whole pixels, and clamps to the image.
pub fn expand_box(b: &FaceBox, margin: f64, height: usize, width: usize) -> Result<FaceBox> {
    FaceBox::new(b.x0, b.y0, b.x1, b.y1)?;
    if margin.is_nan() || margin < 0.0 {
        return Err(Error::InvalidArgument(format!("margin must be >= 0, got {margin}")));
    }
    let dx = b.width() * margin / 2.0;
    let dy = b.height() * margin / 2.0;
    let (w, h) = (width as f64, height as f64);
    FaceBox::new(
        floor_snap(b.x0 - dx).clamp(0.0, w),
        floor_snap(b.y0 - dy).clamp(0.0, h),
        ceil_snap(b.x1 + dx).clamp(0.0, w),
        ceil_snap(b.y1 + dy).clamp(0.0, h),
    )
    .map_err(|_| Error::InvalidArgument(format!("face box {b:?} lies outside the {width}x{height} image")))
}

/// Binary `H x W` mask of one face.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMask {
    pub grid: Tensor,
    pub face: usize,
}

impl SpatialMask {
    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.grid.data().iter().all(|&v| v == 0.0)
    }

    pub fn count(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Value at flattened (row-major) cell `q`.
    pub fn at_flat(&self, q: usize) -> f64 {
        self.grid.data()[q]
    }
}

/// Sets exactly the cells whose centres fall inside the box.
pub fn rasterize_mask(b: &FaceBox, height: usize, width: usize, face: usize) -> SpatialMask {
    let grid = Tensor::from_fn(&[height, width], |i| {
        let (r, c) = (i / width, i % width);
        let (cx, cy) = (c as f64 + 0.5, r as f64 + 0.5);
        (cx >= b.x0 && cx < b.x1 && cy >= b.y0 && cy < b.y1) as u8 as f64
    });
    SpatialMask { grid, face }
}

/// Max-pools a mask down to `target x target`: a cell is set iff any source
/// cell it covers is set.
pub fn downsample_mask(m: &SpatialMask, target: usize) -> Result<SpatialMask> {
    let (h, w) = (m.height(), m.width());
    if target == 0 || h % target != 0 || w % target != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize a {h}x{w} mask to {target}x{target}"
        )));
    }
    let (fh, fw) = (h / target, w / target);
    let mut out = vec![0.0; target * target];
    for (i, &v) in m.grid.data().iter().enumerate() {
        if v != 0.0 {
            let (r, c) = (i / w, i % w);
            out[(r / fh) * target + c / fw] = 1.0;
        }
    }
    Ok(SpatialMask {
        grid: Tensor::new(vec![target, target], out)?,
        face: m.face,
    })
}

/// One mask per attention resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPyramid {
    pub face: usize,
    pub levels: BTreeMap<usize, SpatialMask>,
}

impl MaskPyramid {
    pub fn level(&self, resolution: usize) -> Result<&SpatialMask> {
        self.levels
            .get(&resolution)
            .ok_or_else(|| Error::Layout(format!("mask pyramid has no {resolution}x{resolution} level")))
    }
}

pub fn build_pyramid(m: &SpatialMask, levels: &[usize]) -> Result<MaskPyramid> {
    let levels = levels
        .iter()
        .map(|&r| Ok((r, downsample_mask(m, r)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(MaskPyramid { face: m.face, levels })
}

/// Expands, rasterizes and pyramids every box in stacking order.
pub fn pyramids_for_boxes(
    boxes: &[FaceBox],
    margin: f64,
    image_size: usize,
    levels: &[usize],
) -> Result<Vec<MaskPyramid>> {
    boxes
        .iter()
        .enumerate()
        .map(|(n, b)| {
            let e = expand_box(b, margin, image_size, image_size)?;
            build_pyramid(&rasterize_mask(&e, image_size, image_size, n), levels)
        })
        .collect()
}

/// The `n_q x n_k` mask `M = [M_t, M_f1, ..., M_fN]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub m: Tensor,
    pub layout: StackLayout,
}

impl AttentionMask {
    pub fn n_queries(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn n_keys(&self) -> usize {
        self.m.shape()[1]
    }

    /// All-ones mask: plain cross-attention.
    pub fn ones(n_queries: usize, layout: StackLayout) -> Self {
        Self {
            m: Tensor::ones(&[n_queries, layout.rows()]),
            layout,
        }
    }

    /// Rejects masks whose column partition differs from `layout`.
    pub fn check_congruent(&self, layout: &StackLayout) -> Result<()> {
        if self.layout != *layout || self.n_keys() != layout.rows() {
            return Err(Error::Layout(format!(
                "mask layout {:?} ({} columns) does not match stack layout {:?}",
                self.layout,
                self.n_keys(),
                layout
            )));
        }
        Ok(())
    }

    /// Reorders face column blocks: block `i` of the result is block
    /// `perm[i]` of `self`.
    pub fn permute_faces(&self, perm: &[usize]) -> Result<Self> {
        let l = self.layout;
        if perm.len() != l.n_faces {
            return Err(Error::Layout("permutation length differs from face count".into()));
        }
        let nk = self.n_keys();
        let mut out = self.m.clone();
        for q in 0..self.n_queries() {
            for (dst, &src) in perm.iter().enumerate() {
                for (d, s) in l.block_range(dst).zip(l.block_range(src)) {
                    out.data_mut()[q * nk + d] = self.m.data()[q * nk + s];
                }
            }
        }
        Ok(Self { m: out, layout: l })
    }
}

/// Text columns are all ones; the columns of face block `n` repeat that
/// face's mask value for each query cell.
pub fn assemble_attention_mask(
    text_len: usize,
    block_len: usize,
    masks: &[&SpatialMask],
) -> Result<AttentionMask> {
    assemble_with_queries(text_len, block_len, masks, None)
}

/// Like [`assemble_attention_mask`], with an explicit query count for the
/// case of no faces.
pub fn assemble_with_queries(
    text_len: usize,
    block_len: usize,
    masks: &[&SpatialMask],
    n_queries: Option<usize>,
) -> Result<AttentionMask> {
    if text_len == 0 || block_len == 0 {
        return Err(Error::InvalidArgument("text and block lengths must be positive".into()));
    }
    let n_q = match (masks.first(), n_queries) {
        (Some(m), nq) => {
            let q = m.grid.numel();
            if nq.is_some_and(|n| n != q) {
                return Err(Error::Layout(format!("masks have {q} cells, expected {}", nq.unwrap())));
            }
            q
        }
        (None, Some(n)) => n,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "query count is unknown without at least one face mask".into(),
            ))
        }
    };
    if masks.iter().any(|m| m.grid.shape() != masks[0].grid.shape()) {
        return Err(Error::Layout("face masks at one level must share a resolution".into()));
    }
    let layout = StackLayout {
        text_len,
        block_len,
        n_faces: masks.len(),
    };
    let n_k = layout.rows();
    let mut data = vec![1.0; n_q * n_k];
    for (n, mask) in masks.iter().enumerate() {
        for q in 0..n_q {
            let v = mask.at_flat(q);
            for k in layout.block_range(n) {
                data[q * n_k + k] = v;
            }
        }
    }
    Ok(AttentionMask {
        m: Tensor::new(vec![n_q, n_k], data)?,
        layout,
    })
}
