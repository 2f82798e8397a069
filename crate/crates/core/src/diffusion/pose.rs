use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A keypoint `[x, y, confidence]` in pixel coordinates. The first keypoint
/// of every face is its center.
pub type Keypoint = [f64; 3];

/// Circle colors indexed by stacking slot.
pub const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
];

const STROKE: f64 = 0.5;
const CIRCLE_RADIUS: f64 = 1.0;

/// The control image `c_c` with the keypoints that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseControl {
    /// `H x W x 3`.
    pub image: Tensor,
    pub keypoints: Vec<Vec<Keypoint>>,
    /// Face index per slot; slot `s` is drawn in `PALETTE[s]`.
    pub circled: Vec<usize>,
}

/// Draws every face's skeleton (strokes from its center to each other
/// keypoint) and a colored circle at the center of each circled face.
pub fn render_pose_control(
    keypoints: &[Vec<Keypoint>],
    circled: &[usize],
    height: usize,
    width: usize,
) -> Result<PoseControl> {
    if circled.len() > PALETTE.len() {
        return Err(Error::InvalidArgument(format!(
            "{} circles requested, the palette has {}",
            circled.len(),
            PALETTE.len()
        )));
    }
    for (slot, &f) in circled.iter().enumerate() {
        if f >= keypoints.len() || circled[..slot].contains(&f) {
            return Err(Error::InvalidArgument(format!("circled face {f} is not a distinct face")));
        }
    }
    if let Some(face) = keypoints.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("face {face} has no keypoints")));
    }
    let mut img = Tensor::zeros(&[height, width, 3]);
    let mut put = |x: f64, y: f64, rgb: [f64; 3]| {
        if x < 0.0 || y < 0.0 {
            return;
        }
        let (xi, yi) = (x.floor() as usize, y.floor() as usize);
        if xi < width && yi < height {
            img.data_mut()[(yi * width + xi) * 3..(yi * width + xi) * 3 + 3].copy_from_slice(&rgb);
        }
    };
    for pts in keypoints {
        let c = pts[0];
        put(c[0], c[1], [STROKE; 3]);
        for p in &pts[1..] {
            let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
            let n = (2.0 * dx.abs().max(dy.abs())).ceil().max(1.0) as usize;
            for i in 0..=n {
                let s = i as f64 / n as f64;
                put(c[0] + s * dx, c[1] + s * dy, [STROKE; 3]);
            }
        }
    }
    for (slot, &f) in circled.iter().enumerate() {
        let c = keypoints[f][0];
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if (px - c[0]).hypot(py - c[1]) <= CIRCLE_RADIUS {
                    put(px, py, PALETTE[slot]);
                }
            }
        }
    }
    Ok(PoseControl {
        image: img,
        keypoints: keypoints.to_vec(),
        circled: circled.to_vec(),
    })
}
