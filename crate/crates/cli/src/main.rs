use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use multid_core::attention::{masked_cross_attention, reference_attention, AttentionOutput};
use multid_core::diffusion::{
    infer, make_synthetic_dataset, train, InferenceRequest, LossPoint, PoseFace, ToyDenoiser,
};
use multid_core::embedding::{gaussian, project_face, stack_embeddings, HashTextEncoder};
use multid_core::io::{
    load_checkpoint, loss_trace_csv, parse_loss_trace, pgm_string, read_dataset, read_tensor, save_checkpoint,
    write_dataset, AnnotationFace, AnnotationFile, AnnotationRecord, Checkpoint,
};
use multid_core::mask::{assemble_with_queries, pyramids_for_boxes, rasterize_mask, build_pyramid, expand_box};
use multid_core::metrics::{
    evaluate_batch, GeneratedPair, HashBagTextEncoder, IdentityEncoder, ImageEncoder, PairInputs,
    PatternEncoder, ProjectionImageEncoder, TextEval,
};
use multid_core::suite::{gradient_suite, SuiteOptions, GRAD_TOLERANCE};
use multid_core::{AttentionMask, AttentionMode, AttentionParams, Config, FaceBox, FaceFeature, ProjectionParams, Tensor};

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser)]
#[command(name = "multid", version, about = "Masked multi-identity conditioning for a desk-scale denoiser")]
struct Cli {
    /// JSON configuration file; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every op, the attention kernel and the loss.
    Gradcheck(GradcheckArgs),
    /// Trains the denoiser and writes `checkpoint.txt` and `loss.csv`.
    Train(TrainArgs),
    /// Samples a grid for a set of identities placed on a pose annotation.
    Infer(InferArgs),
    /// Writes the mask pyramid of each box as PGM files.
    BuildMask(BuildMaskArgs),
    /// Runs one attention site on random inputs and dumps its maps.
    DumpAttention(DumpAttentionArgs),
    /// Scores generated pairs listed in a manifest.
    EvalMetrics(EvalMetricsArgs),
    /// Writes a synthetic multi-identity dataset.
    MakeSynthetic(MakeSyntheticArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of consecutive seeds to run.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Coordinates probed per parameter tensor of the full loss.
    #[arg(long)]
    coords: Option<usize>,
    #[arg(long, hide = true)]
    inject_faulty_adjoint: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Train on a freshly generated synthetic dataset.
    #[arg(long, conflicts_with = "data")]
    synthetic: bool,
    /// Dataset directory written by `make-synthetic`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Total number of steps, counting any resumed ones.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Replace every attention mask with all ones.
    #[arg(long)]
    ablate_mask: bool,
    /// Directory of an earlier run to continue.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Face feature files, one per identity, in slot order.
    #[arg(long = "features", num_args = 1.., required = true)]
    features: Vec<PathBuf>,
    /// Annotation file supplying face boxes and keypoints.
    #[arg(long)]
    pose: PathBuf,
    /// Record of the annotation file to take the pose from.
    #[arg(long, default_value_t = 0)]
    record: usize,
    /// Caption; defaults to the annotation record caption.
    #[arg(long)]
    caption: Option<String>,
    #[arg(long, default_value_t = 20)]
    steps: usize,
}

#[derive(Args)]
struct BuildMaskArgs {
    /// Face box `x0,y0,x1,y1`; repeat for several faces.
    #[arg(long = "box", value_parser = parse_box, required = true)]
    boxes: Vec<FaceBox>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Pyramid resolutions, comma separated.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    /// Total fractional box growth; the configured margin by default.
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Args)]
struct DumpAttentionArgs {
    /// Face box on the query grid; repeat for several faces.
    #[arg(long = "box", value_parser = parse_box)]
    boxes: Vec<FaceBox>,
    /// Side of the square query grid; the finest stage by default.
    #[arg(long)]
    grid: Option<usize>,
    /// Use an all-ones mask.
    #[arg(long, conflicts_with = "reference")]
    all_ones: bool,
    /// Use plain unmasked cross-attention.
    #[arg(long)]
    reference: bool,
    /// Mask with additive exclusion instead of multiplication.
    #[arg(long)]
    additive: bool,
}

#[derive(Args)]
struct EvalMetricsArgs {
    /// JSON manifest of pairs.
    #[arg(long)]
    pairs: PathBuf,
}

#[derive(Args)]
struct MakeSyntheticArgs {
    #[arg(long)]
    records: Option<usize>,
}

fn parse_box(s: &str) -> Result<FaceBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let a: [f64; 4] = v.try_into().map_err(|_| "a box needs four numbers x0,y0,x1,y1".to_string())?;
    FaceBox::from_array(a).map_err(|e| e.to_string())
}

/// An error that maps to an exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn classify(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<multid_core::Error>() {
        Some(multid_core::Error::Diverged { .. } | multid_core::Error::NonFinite(_)) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, message) = match e.downcast_ref::<Failure>() {
                Some(f) => (f.code, f.message.clone()),
                None => (classify(&e), format!("{e:#}")),
            };
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn load_config(cli: &Cli, fallback: Config) -> anyhow::Result<Config> {
    let config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::from_json(&text)?
        }
        None => fallback,
    };
    config.validate()?;
    Ok(config)
}

fn out_dir(cli: &Cli) -> anyhow::Result<&Path> {
    let dir = cli.out.as_deref().ok_or_else(|| anyhow!("--out is required"))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Infer(a) => cmd_infer(cli, a),
        Command::BuildMask(a) => cmd_build_mask(cli, a),
        Command::DumpAttention(a) => cmd_dump_attention(cli, a),
        Command::EvalMetrics(a) => cmd_eval_metrics(cli, a),
        Command::MakeSynthetic(a) => cmd_make_synthetic(cli, a),
    }
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> anyhow::Result<()> {
    let config = load_config(cli, Config::tiny())?;
    let first = cli.seed.unwrap_or(0);
    let mut report = String::from("seed,check,max_rel_error,coords,verdict\n");
    let mut failed = 0;
    let mut worst = 0.0f64;
    for seed in first..first + a.seeds.max(1) {
        let opts = SuiteOptions {
            seed,
            inject_faulty_adjoint: a.inject_faulty_adjoint,
            loss_coords: a.coords,
        };
        for c in gradient_suite(&config, &opts)? {
            let verdict = if c.passed() { "pass" } else { "FAIL" };
            failed += usize::from(!c.passed());
            worst = worst.max(c.report.max_rel_error);
            println!("seed {seed} {:<26} max rel err {:.3e} {verdict}", c.name, c.report.max_rel_error);
            writeln!(report, "{seed},{},{:e},{},{verdict}", c.name, c.report.max_rel_error, c.report.coords_checked)?;
        }
    }
    if let Some(p) = &cli.out {
        write(p, report)?;
    }
    println!("max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:e})");
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("{failed} gradient checks failed"),
        }
        .into());
    }
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let out = out_dir(cli)?;
    let (mut config, mut model, start, mut trace): (Config, ToyDenoiser, usize, Vec<LossPoint>) = match &a.resume {
        Some(dir) => {
            let ckpt = load_checkpoint(&dir.join("checkpoint.txt"))?;
            let trace_path = dir.join("loss.csv");
            let trace = if trace_path.exists() {
                parse_loss_trace(&fs::read_to_string(&trace_path)?)?
            } else {
                Vec::new()
            };
            if trace.len() != ckpt.step {
                bail!("loss trace has {} points, checkpoint is at step {}", trace.len(), ckpt.step);
            }
            (ckpt.model.config.clone(), ckpt.model, ckpt.step, trace)
        }
        None => {
            let mut config = load_config(cli, Config::default())?;
            if let Some(s) = cli.seed {
                config.train.seed = s;
                config.synthetic.seed = s;
            }
            let model = ToyDenoiser::init(&config, config.train.seed)?;
            (config, model, 0, Vec::new())
        }
    };
    if let Some(s) = a.steps {
        config.train.steps = s;
    }
    if let Some(b) = a.batch {
        config.train.batch = b;
    }
    if let Some(lr) = a.lr {
        config.train.learning_rate = lr;
    }
    if a.ablate_mask {
        config.train.ablate_mask = true;
    }
    let records = match (&a.data, a.synthetic) {
        (Some(dir), _) => read_dataset(dir)?,
        (None, true) => make_synthetic_dataset(&config)?.records,
        (None, false) => bail!("either --synthetic or --data is required"),
    };
    let result = train(&mut model, &records, &config.train, start, &mut trace);
    let step = trace.len();
    model.config.train = config.train.clone();
    save_checkpoint(&Checkpoint { model, step }, &out.join("checkpoint.txt"))?;
    write(&out.join("loss.csv"), loss_trace_csv(&trace))?;
    result?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("steps {} loss {:.6} -> {:.6}", trace.len(), first.loss, last.loss);
    } else {
        println!("steps 0");
    }
    Ok(())
}

fn pose_faces(faces: &[AnnotationFace]) -> anyhow::Result<Vec<PoseFace>> {
    faces
        .iter()
        .map(|f| {
            Ok(PoseFace {
                bbox: f.face_box()?,
                keypoints: f.keypoints_or_center()?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct InferSummary {
    identities: usize,
    stack_rows: usize,
    text_len: usize,
    block_len: usize,
    grid_shape: Vec<usize>,
    finite: bool,
    masks: Vec<MaskSummary>,
}

#[derive(Serialize)]
struct MaskSummary {
    resolution: usize,
    queries: usize,
    keys: usize,
    congruent: bool,
}

fn cmd_infer(cli: &Cli, a: &InferArgs) -> anyhow::Result<()> {
    let out = out_dir(cli)?;
    let model = load_checkpoint(&a.checkpoint)?.model;
    let size = model.config.image_size;
    let identities = a
        .features
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(FaceFeature::from_text(&text)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let ann = AnnotationFile::load(&a.pose, size)?;
    let record = ann
        .records
        .get(a.record)
        .ok_or_else(|| anyhow!("annotation has no record {}", a.record))?;
    let req = InferenceRequest {
        caption: a.caption.clone().unwrap_or_else(|| record.caption.clone()),
        identities,
        pose_faces: pose_faces(&record.faces)?,
        steps: a.steps,
        seed: cli.seed.unwrap_or(0),
    };
    let res = infer(&model, &req)?;
    write(&out.join("grid.txt"), res.grid.to_dump())?;
    write(&out.join("control.txt"), res.control.to_dump())?;
    let (h, w, c) = res.grid.dims3("grid")?;
    for ch in 0..c {
        let plane = Tensor::from_fn(&[h, w], |i| res.grid.data()[i * c + ch]);
        let lo = plane.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        write(&out.join(format!("grid_c{ch}.pgm")), pgm_string(&plane.map(|v| (v - lo) / span))?)?;
    }
    let mut masks = Vec::new();
    for (mask, &res_side) in res.masks.iter().zip(&model.config.stages) {
        write(&out.join(format!("mask_{res_side}.txt")), mask.m.to_dump())?;
        masks.push(MaskSummary {
            resolution: res_side,
            queries: mask.n_queries(),
            keys: mask.n_keys(),
            congruent: mask.check_congruent(&res.layout).is_ok(),
        });
    }
    let att = out.join("attention");
    fs::create_dir_all(&att)?;
    for site in &res.final_maps {
        let stem = format!("{:?}_{}", site.branch, site.name).to_lowercase().replace('.', "_");
        for (h, m) in site.maps.iter().enumerate() {
            write(&att.join(format!("{stem}_h{h}.csv")), map_csv(m))?;
        }
    }
    let summary = InferSummary {
        identities: req.identities.len(),
        stack_rows: res.layout.rows(),
        text_len: res.layout.text_len,
        block_len: res.layout.block_len,
        grid_shape: res.grid.shape().to_vec(),
        finite: res.grid.is_finite(),
        masks,
    };
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{} identities, {} stack rows, grid {:?}", summary.identities, summary.stack_rows, summary.grid_shape);
    Ok(())
}

fn cmd_build_mask(cli: &Cli, a: &BuildMaskArgs) -> anyhow::Result<()> {
    let config = load_config(cli, Config::default())?;
    let out = out_dir(cli)?;
    let size = a.image_size.unwrap_or(config.image_size);
    let levels = a.levels.clone().unwrap_or_else(|| config.stages.clone());
    let margin = a.margin.unwrap_or(config.mask_margin);
    for (n, b) in a.boxes.iter().enumerate() {
        if !b.within(size, size) {
            bail!("box {:?} outside the {size}x{size} image", b.to_array());
        }
        let e = expand_box(b, margin, size, size)?;
        let pyramid = build_pyramid(&rasterize_mask(&e, size, size, n), &levels)?;
        for &side in &levels {
            let level = pyramid.level(side)?;
            write(&out.join(format!("face{n}_{side}.pgm")), pgm_string(&level.grid)?)?;
        }
    }
    println!("{} faces x {} levels", a.boxes.len(), levels.len());
    Ok(())
}

/// One row per query cell, one column per key.
fn map_csv(m: &Tensor) -> String {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut s = String::from("query");
    for k in 0..cols {
        write!(s, ",k{k}").unwrap();
    }
    s.push('\n');
    for q in 0..rows {
        write!(s, "{q}").unwrap();
        for v in m.row(q) {
            write!(s, ",{v:?}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn cmd_dump_attention(cli: &Cli, a: &DumpAttentionArgs) -> anyhow::Result<()> {
    let config = load_config(cli, Config::default())?;
    let out = out_dir(cli)?;
    let m = &config.model;
    let grid = a.grid.unwrap_or(config.stages[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let proj = ProjectionParams::init(m.d_gf, m.d_lf, m.d_k, &mut rng);
    let params = AttentionParams::init(m.width, m.d_k, m.heads, m.d_head, &mut rng);
    let text = HashTextEncoder::new(m.d_k, m.text_len, 0).encode("a photo of people");
    let blocks = a
        .boxes
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let f = FaceFeature::new(
                gaussian(&[1, m.d_gf], 1.0, &mut rng),
                gaussian(&[m.local_grid * m.local_grid, m.d_lf], 1.0, &mut rng),
                format!("face{i}"),
            )?;
            project_face(&f, &proj)
        })
        .collect::<multid_core::Result<Vec<_>>>()?;
    let stack = stack_embeddings(&text, &blocks)?;
    let x = gaussian(&[grid * grid, m.width], 1.0, &mut rng);
    let result: AttentionOutput = if a.reference {
        reference_attention(&x, &stack, &params)?
    } else {
        let mask = if a.all_ones {
            AttentionMask::ones(grid * grid, stack.layout)
        } else {
            let pyramids = pyramids_for_boxes(&a.boxes, config.mask_margin, grid, &[grid])?;
            let levels = pyramids.iter().map(|p| p.level(grid)).collect::<multid_core::Result<Vec<_>>>()?;
            assemble_with_queries(m.text_len, m.block_len(), &levels, Some(grid * grid))?
        };
        let mode = if a.additive {
            AttentionMode::Additive
        } else {
            AttentionMode::Multiplicative
        };
        masked_cross_attention(&x, &stack, &mask, &params, mode)?
    };
    write(&out.join("output.txt"), result.out.to_dump())?;
    for (h, map) in result.maps.iter().enumerate() {
        write(&out.join(format!("head{h}.csv")), map_csv(map))?;
        let layout = stack.layout;
        let blocks = std::iter::once(("text".to_string(), layout.text_range()))
            .chain((0..layout.n_faces).map(|f| (format!("face{f}"), layout.block_range(f))));
        for (name, range) in blocks {
            let heat = Tensor::from_fn(&[grid, grid], |q| map.row(q)[range.clone()].iter().sum());
            write(&out.join(format!("head{h}_{name}.pgm")), pgm_string(&heat)?)?;
        }
    }
    println!("{} heads, {} queries x {} keys", result.maps.len(), grid * grid, stack.layout.rows());
    Ok(())
}

/// A tensor given inline as numbers or as a path to a dump file.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TensorSource {
    Inline(Vec<f64>),
    Path(String),
}

impl TensorSource {
    fn load(&self, base: &Path) -> anyhow::Result<Tensor> {
        match self {
            TensorSource::Inline(v) => Ok(Tensor::from_rows(&[v.as_slice()])?),
            TensorSource::Path(p) => {
                let path = base.join(p);
                read_tensor(&path).with_context(|| format!("reading {}", path.display()))
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum EncoderChoice {
    Identity,
    Pattern {
        grid: usize,
        #[serde(default)]
        region: Option<[f64; 4]>,
    },
    Projection {
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Deserialize)]
struct PairEntry {
    a: TensorSource,
    b: TensorSource,
    a_gen: TensorSource,
    b_gen: TensorSource,
    #[serde(default)]
    prompt: Option<String>,
}

#[derive(Debug, Deserialize)]
struct PairManifest {
    encoder: EncoderChoice,
    pairs: Vec<PairEntry>,
}

fn cmd_eval_metrics(cli: &Cli, a: &EvalMetricsArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.pairs).with_context(|| format!("reading {}", a.pairs.display()))?;
    let manifest: PairManifest = serde_json::from_str(&text).context("parsing pair manifest")?;
    let base = a.pairs.parent().unwrap_or(Path::new("."));
    let encoder: Box<dyn ImageEncoder> = match manifest.encoder {
        EncoderChoice::Identity => Box::new(IdentityEncoder),
        EncoderChoice::Pattern { grid, region: None } => Box::new(PatternEncoder::new(grid)),
        EncoderChoice::Pattern { grid, region: Some(r) } => Box::new(PatternEncoder::with_region(grid, FaceBox::from_array(r)?)),
        EncoderChoice::Projection { dim, seed } => Box::new(ProjectionImageEncoder { dim, seed }),
    };
    let tensors = manifest
        .pairs
        .iter()
        .map(|p| Ok([p.a.load(base)?, p.b.load(base)?, p.a_gen.load(base)?, p.b_gen.load(base)?]))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let pairs: Vec<PairInputs<'_>> = tensors.iter().map(|t| PairInputs { a: &t[0], b: &t[1] }).collect();
    let generated: Vec<GeneratedPair<'_>> = tensors.iter().map(|t| GeneratedPair { a: &t[2], b: &t[3] }).collect();
    let prompts: Option<Vec<String>> = manifest.pairs.iter().map(|p| p.prompt.clone()).collect();
    let text_encoder = match (&prompts, tensors.first()) {
        (Some(_), Some(t)) => Some(HashBagTextEncoder::new(encoder.embed(&t[2])?.len(), cli.seed.unwrap_or(0))),
        _ => None,
    };
    let text_eval = match (&prompts, &text_encoder) {
        (Some(p), Some(te)) => Some(TextEval {
            prompts: p,
            text_encoder: te,
            image_encoder: encoder.as_ref(),
        }),
        _ => None,
    };
    let report = evaluate_batch(&pairs, &generated, encoder.as_ref(), text_eval)?;
    match &cli.out {
        Some(p) => write(p, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    print!("{}", report.summary());
    Ok(())
}

fn cmd_make_synthetic(cli: &Cli, a: &MakeSyntheticArgs) -> anyhow::Result<()> {
    let mut config = load_config(cli, Config::default())?;
    if let Some(s) = cli.seed {
        config.synthetic.seed = s;
    }
    if let Some(n) = a.records {
        config.synthetic.records = n;
    }
    let out = out_dir(cli)?;
    let data = make_synthetic_dataset(&config)?;
    write_dataset(out, &data.records)?;
    let ann = AnnotationFile {
        records: data
            .records
            .iter()
            .enumerate()
            .map(|(r, rec)| AnnotationRecord {
                image: Some(format!("record_{r:04}/image.txt")),
                caption: rec.caption.clone(),
                faces: rec
                    .faces
                    .iter()
                    .map(|f| AnnotationFace {
                        bbox: f.bbox.to_array(),
                        keypoints: f.keypoints.clone(),
                        identity: f.identity.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    write(&out.join("annotations.json"), serde_json::to_string_pretty(&ann)?)?;
    write(&out.join("config.json"), config.to_json())?;
    println!("{} records in {}", data.records.len(), out.display());
    Ok(())
}
