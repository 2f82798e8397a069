use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{masked_cross_attention_on_tape, AttentionVars};
use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::embedding::{gaussian, project_face_on_tape, stack_on_tape, FaceFeature, ProjectionVars, StackLayout, TextEmbedding};
use crate::error::{Error, Result};
use crate::mask::{assemble_with_queries, AttentionMask, MaskPyramid};
use crate::tensor::{PoolMode, Tensor};

use super::schedule::timestep_embedding;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

/// Everything the denoiser is conditioned on besides `z_t` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub text: TextEmbedding,
    /// Face features in stacking order.
    pub faces: Vec<FaceFeature>,
    /// One pyramid per face, same order.
    pub pyramids: Vec<MaskPyramid>,
    /// Pose control image, `H x W x 3`.
    pub control: Tensor,
}

impl Conditioning {
    /// Reorders faces and pyramids: slot `i` of the result holds slot
    /// `perm[i]` of `self`. The control image is unchanged.
    pub fn permute_faces(&self, perm: &[usize]) -> Result<Self> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.faces.len()).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of the faces")));
        }
        Ok(Self {
            text: self.text.clone(),
            faces: perm.iter().map(|&i| self.faces[i].clone()).collect(),
            pyramids: perm.iter().map(|&i| self.pyramids[i].clone()).collect(),
            control: self.control.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Main,
    Control,
}

/// One cross-attention call recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionSite {
    pub branch: Branch,
    pub name: String,
    pub resolution: usize,
    pub mask: AttentionMask,
    pub maps: Vec<Var>,
}

/// Result of a taped forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `H x W x C` noise prediction.
    pub eps: Var,
    pub layout: StackLayout,
    pub sites: Vec<AttentionSite>,
}

/// Attention maps of one site, detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteMaps {
    pub branch: Branch,
    pub name: String,
    pub resolution: usize,
    pub mask: AttentionMask,
    pub maps: Vec<Tensor>,
}

/// Multi-resolution noise predictor with a main branch and a control branch
/// joined by zero-initialized fusion projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub config: Config,
    pub params: ParamSet,
}

struct Ctx<'a> {
    params: &'a ParamSet,
    vars: &'a [Var],
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }
}

fn block_names(prefix: &str) -> [String; 8] {
    [
        format!("{prefix}.mix.w"),
        format!("{prefix}.mix.b"),
        format!("{prefix}.time.w"),
        format!("{prefix}.time.b"),
        format!("{prefix}.attn.wq"),
        format!("{prefix}.attn.wk"),
        format!("{prefix}.attn.wv"),
        format!("{prefix}.attn.wo"),
    ]
}

impl ToyDenoiser {
    /// Fresh parameters. The control branch starts as a copy of the main
    /// encoder; every fusion projection is exactly zero.
    pub fn init(config: &Config, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.stages[0] != config.image_size {
            return Err(Error::InvalidArgument(format!(
                "the denoiser runs on the pixel grid: finest stage {} must equal image size {}",
                config.stages[0], config.image_size
            )));
        }
        let m = &config.model;
        let (w, c, inner) = (m.width, config.channels, m.heads * m.d_head);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |shape: &[usize]| gaussian(shape, (1.0 / shape[0] as f64).sqrt(), &mut rng);
        let mut p = ParamSet::new();

        p.push("proj.global.w", g(&[m.d_gf, m.d_k]))?;
        p.push("proj.global.b", Tensor::zeros(&[1, m.d_k]))?;
        p.push("proj.local.w", g(&[m.d_lf, m.d_k]))?;
        p.push("proj.local.b", Tensor::zeros(&[1, m.d_k]))?;

        p.push("main.in.w", g(&[c, w]))?;
        p.push("main.in.b", Tensor::zeros(&[1, w]))?;
        let mut encoder_blocks: Vec<String> = (0..config.stages.len() - 1).map(|i| format!("down{i}")).collect();
        encoder_blocks.push("mid".into());
        let block_shapes = [
            vec![w, w],
            vec![1, w],
            vec![m.time_dim, w],
            vec![1, w],
            vec![w, inner],
            vec![m.d_k, inner],
            vec![m.d_k, inner],
            vec![inner, w],
        ];
        let block = |p: &mut ParamSet, prefix: &str, g: &mut dyn FnMut(&[usize]) -> Tensor| -> Result<()> {
            for (name, shape) in block_names(prefix).into_iter().zip(&block_shapes) {
                let t = if shape[0] == 1 { Tensor::zeros(shape) } else { g(shape) };
                p.push(name, t)?;
            }
            Ok(())
        };
        for b in &encoder_blocks {
            block(&mut p, &format!("main.{b}"), &mut g)?;
        }
        for i in (0..config.stages.len() - 1).rev() {
            block(&mut p, &format!("main.up{i}"), &mut g)?;
        }
        p.push("main.out.w", g(&[w, c]))?;
        p.push("main.out.b", Tensor::zeros(&[1, c]))?;

        p.push("ctrl.in.w", p.get("main.in.w").unwrap().clone())?;
        p.push("ctrl.in.b", p.get("main.in.b").unwrap().clone())?;
        p.push("ctrl.hint.w", g(&[3, w]))?;
        p.push("ctrl.hint.b", Tensor::zeros(&[1, w]))?;
        for b in &encoder_blocks {
            for (src, dst) in block_names(&format!("main.{b}")).iter().zip(block_names(&format!("ctrl.{b}"))) {
                let t = p.get(src).unwrap().clone();
                p.push(dst, t)?;
            }
        }
        for b in &encoder_blocks {
            p.push(format!("ctrl.fuse.{b}.w"), Tensor::zeros(&[w, w]))?;
            p.push(format!("ctrl.fuse.{b}.b"), Tensor::zeros(&[1, w]))?;
        }
        Ok(Self {
            config: config.clone(),
            params: p,
        })
    }

    /// Names of the zero-initialized fusion parameters.
    pub fn fusion_names(&self) -> Vec<&str> {
        self.params
            .names()
            .iter()
            .map(String::as_str)
            .filter(|n| n.starts_with("ctrl.fuse."))
            .collect()
    }

    pub fn stages(&self) -> &[usize] {
        &self.config.stages
    }

    /// Masks for every stage resolution, or all-ones masks when ablated.
    pub fn stage_masks(&self, cond: &Conditioning, layout: StackLayout, ablate: bool) -> Result<Vec<AttentionMask>> {
        self.config
            .stages
            .iter()
            .map(|&r| {
                if ablate || cond.pyramids.is_empty() {
                    return Ok(AttentionMask::ones(r * r, layout));
                }
                let levels = cond
                    .pyramids
                    .iter()
                    .map(|p| p.level(r))
                    .collect::<Result<Vec<_>>>()?;
                let mask = assemble_with_queries(layout.text_len, layout.block_len, &levels, Some(r * r))?;
                mask.check_congruent(&layout)?;
                Ok(mask)
            })
            .collect()
    }

    fn check_inputs(&self, z_t: &Tensor, cond: &Conditioning) -> Result<()> {
        let (s, c) = (self.config.image_size, self.config.channels);
        if z_t.shape() != [s, s, c] {
            return Err(Error::ShapeMismatch {
                op: "predict_noise",
                left: vec![s, s, c],
                right: z_t.shape().to_vec(),
            });
        }
        if cond.control.shape() != [s, s, 3] {
            return Err(Error::ShapeMismatch {
                op: "predict_noise control",
                left: vec![s, s, 3],
                right: cond.control.shape().to_vec(),
            });
        }
        if cond.faces.len() != cond.pyramids.len() {
            return Err(Error::Layout(format!(
                "{} faces but {} mask pyramids",
                cond.faces.len(),
                cond.pyramids.len()
            )));
        }
        let m = &self.config.model;
        for f in &cond.faces {
            if f.global.shape() != [1, m.d_gf] || f.local.shape() != [m.local_grid * m.local_grid, m.d_lf] {
                return Err(Error::Layout(format!(
                    "face feature {:?}/{:?} does not match the model (global 1x{}, local {}x{})",
                    f.global.shape(),
                    f.local.shape(),
                    m.d_gf,
                    m.local_grid * m.local_grid,
                    m.d_lf
                )));
            }
        }
        if cond.text.width() != self.config.model.d_k || cond.text.is_empty() {
            return Err(Error::Layout(format!(
                "text embedding width {} does not match d_K {}",
                cond.text.width(),
                self.config.model.d_k
            )));
        }
        Ok(())
    }

    /// Records `ε_θ(z_t, t, K, M, c_c)` on `tape`. `vars` are the bound
    /// parameters in [`ParamSet`] order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z_t: &Tensor,
        t: usize,
        cond: &Conditioning,
        ablate_mask: bool,
    ) -> Result<Forward> {
        self.check_inputs(z_t, cond)?;
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bound parameters for {} tensors",
                vars.len(),
                self.params.len()
            )));
        }
        let cfg = &self.config;
        let m = &cfg.model;
        let ctx = Ctx {
            params: &self.params,
            vars,
        };
        let (size, w) = (cfg.image_size, m.width);
        let stages = &cfg.stages;
        let n_down = stages.len() - 1;

        let proj = ProjectionVars {
            w_global: ctx.var("proj.global.w")?,
            b_global: ctx.var("proj.global.b")?,
            w_local: ctx.var("proj.local.w")?,
            b_local: ctx.var("proj.local.b")?,
        };
        let blocks = cond
            .faces
            .iter()
            .map(|f| project_face_on_tape(tape, proj, f))
            .collect::<Result<Vec<_>>>()?;
        let (keys, layout) = stack_on_tape(tape, &cond.text, &blocks, m.block_len())?;
        let masks = self.stage_masks(cond, layout, ablate_mask)?;
        let temb = tape.constant(timestep_embedding(t, m.time_dim))?;
        let mut sites = Vec::new();

        let mut run_block = |tape: &mut Tape, branch: Branch, prefix: &str, h: Var, stage: usize| -> Result<Var> {
            let n = block_names(prefix);
            let mixed = tape.affine(h, ctx.var(&n[0])?, ctx.var(&n[1])?)?;
            let tp = tape.affine(temb, ctx.var(&n[2])?, ctx.var(&n[3])?)?;
            let a = tape.add(mixed, tp)?;
            let attn = AttentionVars {
                w_q: ctx.var(&n[4])?,
                w_k: ctx.var(&n[5])?,
                w_v: ctx.var(&n[6])?,
                w_o: ctx.var(&n[7])?,
                heads: m.heads,
                d_head: m.d_head,
            };
            let r = masked_cross_attention_on_tape(tape, a, keys, &layout, &masks[stage], &attn, m.attention_mode)?;
            sites.push(AttentionSite {
                branch,
                name: prefix.to_string(),
                resolution: stages[stage],
                mask: masks[stage].clone(),
                maps: r.maps,
            });
            let a = tape.add(a, r.out)?;
            let a = tape.silu(a)?;
            tape.add(h, a)
        };
        let pool = |tape: &mut Tape, h: Var, r: usize| -> Result<Var> {
            let g = tape.reshape(h, &[r, r, w])?;
            let p = tape.pool_down(g, PoolMode::Mean)?;
            tape.reshape(p, &[r * r / 4, w])
        };
        let upsample = |tape: &mut Tape, h: Var, r: usize| -> Result<Var> {
            let g = tape.reshape(h, &[r, r, w])?;
            let u = tape.upsample_nearest(g)?;
            tape.reshape(u, &[4 * r * r, w])
        };

        let x = tape.constant(z_t.reshape(&[size * size, cfg.channels])?)?;
        let hint = tape.constant(cond.control.reshape(&[size * size, 3])?)?;

        // Control branch.
        let c_in = tape.affine(x, ctx.var("ctrl.in.w")?, ctx.var("ctrl.in.b")?)?;
        let c_hint = tape.affine(hint, ctx.var("ctrl.hint.w")?, ctx.var("ctrl.hint.b")?)?;
        let mut c = tape.add(c_in, c_hint)?;
        let mut ctrl_feats = Vec::with_capacity(stages.len());
        for (i, &side) in stages.iter().enumerate().take(n_down) {
            c = run_block(tape, Branch::Control, &format!("ctrl.down{i}"), c, i)?;
            ctrl_feats.push(c);
            c = pool(tape, c, side)?;
        }
        c = run_block(tape, Branch::Control, "ctrl.mid", c, n_down)?;
        ctrl_feats.push(c);
        let mut fused = Vec::with_capacity(stages.len());
        for (i, &f) in ctrl_feats.iter().enumerate() {
            let b = if i == n_down { "mid".to_string() } else { format!("down{i}") };
            fused.push(tape.affine(f, ctx.var(&format!("ctrl.fuse.{b}.w"))?, ctx.var(&format!("ctrl.fuse.{b}.b"))?)?);
        }

        // Main branch.
        let mut h = tape.affine(x, ctx.var("main.in.w")?, ctx.var("main.in.b")?)?;
        let mut skips = Vec::with_capacity(n_down);
        for (i, &inject) in fused.iter().enumerate().take(n_down) {
            h = run_block(tape, Branch::Main, &format!("main.down{i}"), h, i)?;
            skips.push(tape.add(h, inject)?);
            h = pool(tape, h, stages[i])?;
        }
        h = run_block(tape, Branch::Main, "main.mid", h, n_down)?;
        h = tape.add(h, fused[n_down])?;
        for i in (0..n_down).rev() {
            h = upsample(tape, h, stages[i + 1])?;
            h = tape.add(h, skips[i])?;
            h = run_block(tape, Branch::Main, &format!("main.up{i}"), h, i)?;
        }
        let out = tape.affine(h, ctx.var("main.out.w")?, ctx.var("main.out.b")?)?;
        let eps = tape.reshape(out, &[size, size, cfg.channels])?;
        Ok(Forward { eps, layout, sites })
    }

    /// Untaped noise prediction.
    pub fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor> {
        Ok(self.predict_with_maps(z_t, t, cond, false)?.0)
    }

    /// Noise prediction plus the attention maps of every site.
    pub fn predict_with_maps(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Conditioning,
        ablate_mask: bool,
    ) -> Result<(Tensor, Vec<SiteMaps>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false)?;
        let f = self.forward(&mut tape, &vars, z_t, t, cond, ablate_mask)?;
        let sites = f
            .sites
            .into_iter()
            .map(|s| SiteMaps {
                branch: s.branch,
                name: s.name,
                resolution: s.resolution,
                mask: s.mask,
                maps: s.maps.iter().map(|&v| tape.value(v).clone()).collect(),
            })
            .collect();
        Ok((tape.value(f.eps).clone(), sites))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashTextEncoder;
    use crate::mask::{pyramids_for_boxes, FaceBox};
    use rand::Rng;

    fn cond(config: &Config, n: usize, rng: &mut impl Rng) -> Conditioning {
        let m = &config.model;
        let s = config.image_size;
        let faces = (0..n)
            .map(|i| {
                FaceFeature::new(
                    gaussian(&[1, m.d_gf], 1.0, rng),
                    gaussian(&[m.local_grid * m.local_grid, m.d_lf], 1.0, rng),
                    format!("f{i}"),
                )
                .unwrap()
            })
            .collect();
        let boxes: Vec<FaceBox> = (0..n)
            .map(|i| FaceBox::new((i % 2) as f64 * 4.0, (i / 2 % 2) as f64 * 4.0, (i % 2) as f64 * 4.0 + 3.0, (i / 2 % 2) as f64 * 4.0 + 3.0).unwrap())
            .collect();
        Conditioning {
            text: HashTextEncoder::new(m.d_k, m.text_len, 0).encode("two people"),
            faces,
            pyramids: pyramids_for_boxes(&boxes, config.mask_margin, s, &config.stages).unwrap(),
            control: gaussian(&[s, s, 3], 1.0, rng),
        }
    }

    #[test]
    fn output_shape_and_sites() {
        let config = Config::tiny();
        let model = ToyDenoiser::init(&config, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cond(&config, 2, &mut rng);
        let z = gaussian(&[8, 8, 2], 1.0, &mut rng);
        let (eps, sites) = model.predict_with_maps(&z, 10, &c, false).unwrap();
        assert_eq!(eps.shape(), &[8, 8, 2]);
        // Control: down0, mid. Main: down0, mid, up0.
        assert_eq!(sites.len(), 5);
        assert_eq!(sites.iter().filter(|s| s.branch == Branch::Control).count(), 2);
        let rows = 3 + 2 * 5;
        assert!(sites.iter().all(|s| s.maps[0].shape()[1] == rows));
    }

    #[test]
    fn fusion_starts_at_zero_and_control_copies_main() {
        let model = ToyDenoiser::init(&Config::tiny(), 3).unwrap();
        let fusion = model.fusion_names();
        assert_eq!(fusion.len(), 4);
        for n in fusion {
            assert!(model.params.get(n).unwrap().data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(model.params.get("main.down0.attn.wq"), model.params.get("ctrl.down0.attn.wq"));
    }

    #[test]
    fn init_is_deterministic() {
        let a = ToyDenoiser::init(&Config::tiny(), 5).unwrap();
        let b = ToyDenoiser::init(&Config::tiny(), 5).unwrap();
        let c = ToyDenoiser::init(&Config::tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn no_faces_runs() {
        let config = Config::tiny();
        let model = ToyDenoiser::init(&config, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cond(&config, 0, &mut rng);
        let z = gaussian(&[8, 8, 2], 1.0, &mut rng);
        let eps = model.predict_noise(&z, 10, &c).unwrap();
        assert!(eps.is_finite());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let config = Config::tiny();
        let model = ToyDenoiser::init(&config, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = cond(&config, 2, &mut rng);
        let z = gaussian(&[8, 8, 2], 1.0, &mut rng);
        assert!(model.predict_noise(&gaussian(&[4, 4, 2], 1.0, &mut rng), 1, &c).is_err());
        let mut bad = c.clone();
        bad.pyramids.pop();
        assert!(model.predict_noise(&z, 1, &bad).is_err());
        c.pyramids[0].levels.remove(&4);
        assert!(matches!(model.predict_noise(&z, 1, &c), Err(Error::Layout(_))));
    }

    #[test]
    fn permute_conditioning_validates() {
        let config = Config::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cond(&config, 3, &mut rng);
        assert!(c.permute_faces(&[0, 0, 1]).is_err());
        let p = c.permute_faces(&[2, 0, 1]).unwrap();
        assert_eq!(p.faces[0], c.faces[2]);
    }
}
