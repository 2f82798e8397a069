//! On-disk formats: checkpoints, dataset directories, loss traces, PGM
//! rasters and annotation files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::diffusion::{AnnotatedFace, AnnotatedRecord, Keypoint, LossPoint, ParamSet, ToyDenoiser};
use crate::embedding::FaceFeature;
use crate::error::{Error, Result};
use crate::mask::FaceBox;
use crate::tensor::{parse_shape_line, Tensor};

const CHECKPOINT_MAGIC: &str = "multid-checkpoint 1";

/// A model with the number of training steps already applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyDenoiser,
    pub step: usize,
}

/// Serializes a checkpoint: a header with the config, the step and an index
/// of `name shape` lines, followed by one `== name` section per tensor dump.
pub fn checkpoint_to_string(ckpt: &Checkpoint) -> String {
    let model = &ckpt.model;
    let mut s = String::new();
    writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(s, "config: {}", serde_json::to_string(&model.config).expect("config serializes")).unwrap();
    writeln!(s, "step: {}", ckpt.step).unwrap();
    writeln!(s, "entries: {}", model.params.len()).unwrap();
    for (name, t) in model.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(s, "{name} {}", dims.join("x")).unwrap();
    }
    for (name, t) in model.params.iter() {
        writeln!(s, "== {name}").unwrap();
        s.push_str(&t.to_dump());
    }
    s
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Parse("not a checkpoint".into()));
    }
    let config_line = lines.next().unwrap_or_default();
    let config = Config::from_json(
        config_line
            .strip_prefix("config:")
            .ok_or_else(|| Error::Parse("missing config line".into()))?,
    )?;
    let step: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("step:"))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::Parse("missing step line".into()))?;
    let entries: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("entries:"))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::Parse("missing entry count".into()))?;
    let mut index = Vec::with_capacity(entries);
    for _ in 0..entries {
        let line = lines.next().ok_or_else(|| Error::Parse("truncated index".into()))?;
        let (name, dims) = line
            .split_once(' ')
            .ok_or_else(|| Error::Parse(format!("bad index line {line:?}")))?;
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|e| Error::Parse(format!("bad extent {d:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        index.push((name.to_string(), shape));
    }
    let mut sections: Vec<(String, String)> = Vec::new();
    for line in lines {
        if let Some(name) = line.strip_prefix("== ") {
            sections.push((name.to_string(), String::new()));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push_str(line);
            body.push('\n');
        } else if !line.trim().is_empty() {
            return Err(Error::Parse(format!("data before first section: {line:?}")));
        }
    }
    if sections.len() != index.len() {
        return Err(Error::Parse(format!(
            "index lists {} tensors, found {}",
            index.len(),
            sections.len()
        )));
    }
    let expected = ToyDenoiser::init(&config, 0)?;
    let mut params = ParamSet::new();
    for ((name, shape), (sname, body)) in index.iter().zip(&sections) {
        if name != sname {
            return Err(Error::Parse(format!("section {sname} out of index order (expected {name})")));
        }
        let t = Tensor::from_dump(body)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Parse(format!("tensor {name} has shape {:?}, index says {shape:?}", t.shape())));
        }
        match expected.params.get(name) {
            Some(e) if e.shape() == t.shape() => {}
            _ => return Err(Error::Layout(format!("tensor {name} does not fit the configured model"))),
        }
        params.push(name.clone(), t)?;
    }
    if params.names() != expected.params.names() {
        return Err(Error::Layout("checkpoint parameters differ from the configured model".into()));
    }
    Ok(Checkpoint {
        model: ToyDenoiser { config, params },
        step,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    Ok(fs::write(path, checkpoint_to_string(ckpt))?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}

/// `step,loss` CSV with round-trip exact values.
pub fn loss_trace_csv(trace: &[LossPoint]) -> String {
    let mut s = String::from("step,loss\n");
    for p in trace {
        writeln!(s, "{},{:?}", p.step, p.loss).unwrap();
    }
    s
}

pub fn parse_loss_trace(text: &str) -> Result<Vec<LossPoint>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("step,loss") {
        return Err(Error::Parse("missing `step,loss` header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (step, loss) = l
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad trace line {l:?}")))?;
            Ok(LossPoint {
                step: step.trim().parse().map_err(|e| Error::Parse(format!("bad step {step:?}: {e}")))?,
                loss: loss.trim().parse().map_err(|e| Error::Parse(format!("bad loss {loss:?}: {e}")))?,
            })
        })
        .collect()
}

/// Plain PGM (P2) of an `H x W` tensor, values clamped to `[0, 1]` and scaled
/// to `0..=255`.
pub fn pgm_string(grid: &Tensor) -> Result<String> {
    let (h, w) = grid.dims2("pgm")?;
    let mut s = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = grid
            .row(y)
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn write_pgm(grid: &Tensor, path: &Path) -> Result<()> {
    Ok(fs::write(path, pgm_string(grid)?)?)
}

/// Parses a P2 raster back into `[0, 1]` values.
pub fn parse_pgm(text: &str) -> Result<Tensor> {
    let mut toks = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if toks.next() != Some("P2") {
        return Err(Error::Parse("not a plain PGM".into()));
    }
    let mut num = || -> Result<usize> {
        toks.next()
            .ok_or_else(|| Error::Parse("truncated PGM".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("bad PGM value: {e}")))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max == 0 {
        return Err(Error::Parse("PGM maxval must be positive".into()));
    }
    let data = (0..w * h).map(|_| Ok(num()? as f64 / max as f64)).collect::<Result<Vec<_>>>()?;
    Tensor::new(vec![h, w], data)
}

/// One face in an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFace {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default)]
    pub keypoints: Vec<Keypoint>,
    pub identity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Path of the image tensor dump, relative to the annotation file.
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub caption: String,
    pub faces: Vec<AnnotationFace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub records: Vec<AnnotationRecord>,
}

impl AnnotationFace {
    pub fn face_box(&self) -> Result<FaceBox> {
        FaceBox::from_array(self.bbox)
    }

    /// Keypoints as given, or the box center when none are listed.
    pub fn keypoints_or_center(&self) -> Result<Vec<Keypoint>> {
        if self.keypoints.is_empty() {
            let (cx, cy) = self.face_box()?.center();
            return Ok(vec![[cx, cy, 1.0]]);
        }
        Ok(self.keypoints.clone())
    }
}

impl AnnotationFile {
    /// Parses and checks boxes against an `image_size` square and
    /// confidences against `[0, 1]`.
    pub fn parse(text: &str, image_size: usize) -> Result<Self> {
        let f: AnnotationFile = serde_json::from_str(text)?;
        for (r, rec) in f.records.iter().enumerate() {
            for (i, face) in rec.faces.iter().enumerate() {
                let b = face.face_box()?;
                if !b.within(image_size, image_size) {
                    return Err(Error::InvalidArgument(format!(
                        "record {r} face {i}: box {:?} outside {image_size}x{image_size}",
                        face.bbox
                    )));
                }
                if let Some(k) = face.keypoints.iter().find(|k| !(0.0..=1.0).contains(&k[2])) {
                    return Err(Error::InvalidArgument(format!(
                        "record {r} face {i}: confidence {} outside [0, 1]",
                        k[2]
                    )));
                }
            }
        }
        Ok(f)
    }

    pub fn load(path: &Path, image_size: usize) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, image_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FaceEntry {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    keypoints: Vec<Keypoint>,
    identity: String,
    feature: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordManifest {
    faces: Vec<FaceEntry>,
    caption_ref: String,
    image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetIndex {
    records: Vec<String>,
}

/// Writes one directory per record (image dump, face feature files and a
/// JSON manifest) plus a top-level `index.json`.
pub fn write_dataset(dir: &Path, records: &[AnnotatedRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(records.len());
    for (r, rec) in records.iter().enumerate() {
        let name = format!("record_{r:04}");
        let rdir = dir.join(&name);
        fs::create_dir_all(&rdir)?;
        fs::write(rdir.join("image.txt"), rec.image.to_dump())?;
        let mut faces = Vec::with_capacity(rec.faces.len());
        for (i, f) in rec.faces.iter().enumerate() {
            let feature = format!("face_{i}.txt");
            fs::write(rdir.join(&feature), f.feature.to_text())?;
            faces.push(FaceEntry {
                bbox: f.bbox.to_array(),
                keypoints: f.keypoints.clone(),
                identity: f.identity.clone(),
                feature,
            });
        }
        let manifest = RecordManifest {
            faces,
            caption_ref: rec.caption.clone(),
            image: "image.txt".into(),
        };
        fs::write(rdir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        names.push(name);
    }
    let index = DatasetIndex { records: names };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<AnnotatedRecord>> {
    let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    index
        .records
        .iter()
        .map(|name| {
            let rdir = dir.join(name);
            let m: RecordManifest = serde_json::from_str(&fs::read_to_string(rdir.join("manifest.json"))?)?;
            let image = Tensor::from_dump(&fs::read_to_string(rdir.join(&m.image))?)?;
            let (h, w, _) = image.dims3("dataset image")?;
            let faces = m
                .faces
                .into_iter()
                .map(|f| {
                    let bbox = FaceBox::from_array(f.bbox)?;
                    if !bbox.within(h, w) {
                        return Err(Error::InvalidArgument(format!("{name}: box {:?} out of bounds", f.bbox)));
                    }
                    Ok(AnnotatedFace {
                        bbox,
                        keypoints: f.keypoints,
                        feature: FaceFeature::from_text(&fs::read_to_string(rdir.join(&f.feature))?)?,
                        identity: f.identity,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AnnotatedRecord {
                image,
                caption: m.caption_ref,
                faces,
            })
        })
        .collect()
}

/// Reads a bare `shape:` line followed by values from `path`.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::from_dump(&fs::read_to_string(path)?)
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    Ok(fs::write(path, t.to_dump())?)
}

/// Shape line of a dump without parsing its values.
pub fn peek_shape(text: &str) -> Result<Vec<usize>> {
    let header = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Parse("empty tensor dump".into()))?;
    parse_shape_line(header)
}
