//! The finite-difference suite: every taped op, the attention kernel in both
//! modes, and the full denoising loss on a small configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{masked_cross_attention_on_tape, AttentionMode, AttentionVars};
use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::diffusion::{make_synthetic_dataset, sample_batch, training_loss, NoiseSchedule, ToyDenoiser};
use crate::embedding::{gaussian, StackLayout};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, GradCheckOptions, GradCheckReport};
use crate::mask::AttentionMask;
use crate::numeric::sigmoid;
use crate::tensor::{PoolMode, Tensor};

/// Tolerance on the relative error `|a - n| / max(1, |a|, |n|)`.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Replaces the SiLU adjoint with a wrong one (negative control).
    pub inject_faulty_adjoint: bool,
    /// Coordinates sampled per parameter tensor in the full-loss check.
    pub loss_coords: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(GRAD_TOLERANCE)
    }
}

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// `sum(out ⊙ r)` with a fixed random `r`, so every output coordinate
/// carries a distinct weight.
fn weighted(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone())?;
    let p = tape.hadamard(out, rv)?;
    tape.sum(p)
}

fn op_checks(rng: &mut ChaCha8Rng, faulty: bool) -> Vec<(String, Vec<Tensor>, LossFn)> {
    let mut g = |shape: &[usize]| gaussian(shape, 1.0, rng);
    let mut checks: Vec<(String, Vec<Tensor>, LossFn)> = Vec::new();
    macro_rules! check {
        ($name:expr, $inputs:expr, $out_shape:expr, $body:expr) => {{
            let r = g(&$out_shape);
            let body = $body;
            checks.push((
                $name.to_string(),
                $inputs,
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let out = body(t, v)?;
                    weighted(t, out, &r)
                }),
            ));
        }};
    }
    check!("matmul", vec![g(&[3, 4]), g(&[4, 2])], [3, 2], |t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]));
    check!("matmul_exact", vec![g(&[3, 4]), g(&[4, 2])], [3, 2], |t: &mut Tape, v: &[Var]| t
        .matmul_exact(v[0], v[1]));
    check!("matmul_segmented", vec![g(&[3, 5]), g(&[5, 2])], [3, 2], |t: &mut Tape, v: &[Var]| t
        .matmul_segmented(v[0], v[1], &[0..2, 2..5]));
    check!("transpose", vec![g(&[3, 4])], [4, 3], |t: &mut Tape, v: &[Var]| t.transpose(v[0]));
    check!("softmax_rows", vec![g(&[3, 5])], [3, 5], |t: &mut Tape, v: &[Var]| t.softmax_rows(v[0]));
    check!("softmax_rows_segmented", vec![g(&[3, 5])], [3, 5], |t: &mut Tape, v: &[Var]| t
        .softmax_rows_segmented(v[0], &[0..1, 1..3, 3..5]));
    check!("hadamard", vec![g(&[3, 4]), g(&[3, 4])], [3, 4], |t: &mut Tape, v: &[Var]| t.hadamard(v[0], v[1]));
    check!("hadamard_row", vec![g(&[3, 4]), g(&[1, 4])], [3, 4], |t: &mut Tape, v: &[Var]| t
        .hadamard(v[0], v[1]));
    check!("hadamard_column", vec![g(&[3, 4]), g(&[3, 1])], [3, 4], |t: &mut Tape, v: &[Var]| t
        .hadamard(v[0], v[1]));
    check!("add_row", vec![g(&[3, 4]), g(&[1, 4])], [3, 4], |t: &mut Tape, v: &[Var]| t.add(v[0], v[1]));
    check!("sub_column", vec![g(&[3, 4]), g(&[3, 1])], [3, 4], |t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]));
    check!("scale", vec![g(&[2, 3])], [2, 3], |t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7));
    if faulty {
        check!("silu", vec![g(&[3, 4])], [3, 4], |t: &mut Tape, v: &[Var]| t.map(
            v[0],
            crate::numeric::silu,
            sigmoid
        ));
    } else {
        check!("silu", vec![g(&[3, 4])], [3, 4], |t: &mut Tape, v: &[Var]| t.silu(v[0]));
    }
    check!("pool_mean", vec![g(&[4, 4, 2])], [2, 2, 2], |t: &mut Tape, v: &[Var]| t
        .pool_down(v[0], PoolMode::Mean));
    check!("pool_max", vec![g(&[4, 4, 2])], [2, 2, 2], |t: &mut Tape, v: &[Var]| t
        .pool_down(v[0], PoolMode::Max));
    check!("upsample_nearest", vec![g(&[2, 2, 3])], [4, 4, 3], |t: &mut Tape, v: &[Var]| t
        .upsample_nearest(v[0]));
    check!("reshape", vec![g(&[2, 6])], [3, 4], |t: &mut Tape, v: &[Var]| t.reshape(v[0], &[3, 4]));
    check!("slice_cols", vec![g(&[3, 5])], [3, 2], |t: &mut Tape, v: &[Var]| t.slice_cols(v[0], 2, 2));
    check!("concat_rows", vec![g(&[2, 3]), g(&[1, 3])], [3, 3], |t: &mut Tape, v: &[Var]| t
        .concat_rows(&[v[0], v[1]]));
    check!("concat_cols", vec![g(&[2, 3]), g(&[2, 1])], [2, 4], |t: &mut Tape, v: &[Var]| t
        .concat_cols(&[v[0], v[1]]));
    check!("square", vec![g(&[2, 3])], [2, 3], |t: &mut Tape, v: &[Var]| t.square(v[0]));
    check!("affine", vec![g(&[3, 4]), g(&[4, 2]), g(&[1, 2])], [3, 2], |t: &mut Tape, v: &[Var]| t
        .affine(v[0], v[1], v[2]));
    checks.push((
        "sum".into(),
        vec![g(&[2, 3])],
        Box::new(|t: &mut Tape, v: &[Var]| {
            let s = t.sum(v[0])?;
            t.square(s)
        }),
    ));
    checks.push((
        "mean".into(),
        vec![g(&[2, 3])],
        Box::new(|t: &mut Tape, v: &[Var]| {
            let s = t.mean(v[0])?;
            t.square(s)
        }),
    ));
    checks.push((
        "mse".into(),
        vec![g(&[2, 3]), g(&[2, 3])],
        Box::new(|t: &mut Tape, v: &[Var]| t.mse(v[0], v[1])),
    ));
    checks
}

fn attention_check(config: &Config, mode: AttentionMode, rng: &mut ChaCha8Rng) -> (String, Vec<Tensor>, LossFn) {
    let m = &config.model;
    let layout = StackLayout {
        text_len: m.text_len,
        block_len: m.block_len(),
        n_faces: 2,
    };
    let n_q = 6;
    let inner = m.heads * m.d_head;
    let mask_data: Vec<f64> = (0..n_q * layout.rows())
        .map(|i| {
            let col = i % layout.rows();
            if col < layout.text_len { 1.0 } else { f64::from(rng.random_bool(0.5)) }
        })
        .collect();
    let mask = AttentionMask {
        m: Tensor::new(vec![n_q, layout.rows()], mask_data).expect("mask shape"),
        layout,
    };
    let inputs = vec![
        gaussian(&[n_q, m.width], 1.0, rng),
        gaussian(&[layout.rows(), m.d_k], 1.0, rng),
        gaussian(&[m.width, inner], 0.5, rng),
        gaussian(&[m.d_k, inner], 0.5, rng),
        gaussian(&[m.d_k, inner], 0.5, rng),
        gaussian(&[inner, m.width], 0.5, rng),
    ];
    let r = gaussian(&[n_q, m.width], 1.0, rng);
    let (heads, d_head) = (m.heads, m.d_head);
    let name = match mode {
        AttentionMode::Multiplicative => "attention_multiplicative",
        AttentionMode::Additive => "attention_additive",
    };
    (
        name.into(),
        inputs,
        Box::new(move |t: &mut Tape, v: &[Var]| {
            let p = AttentionVars {
                w_q: v[2],
                w_k: v[3],
                w_v: v[4],
                w_o: v[5],
                heads,
                d_head,
            };
            let out = masked_cross_attention_on_tape(t, v[0], v[1], &layout, &mask, &p, mode)?;
            weighted(t, out.out, &r)
        }),
    )
}

/// Checks the full batch loss with respect to every parameter tensor. The
/// fusion projections are set to random values first so the control branch
/// receives gradient.
fn full_loss_check(config: &Config, opts: &SuiteOptions) -> Result<CheckOutcome> {
    let mut c = config.clone();
    c.synthetic.records = 4;
    c.synthetic.max_faces = 3;
    c.synthetic.min_face_size = c.model.local_grid;
    c.synthetic.max_face_size = (c.image_size / 2).max(c.model.local_grid);
    c.synthetic.seed = opts.seed;
    let data = make_synthetic_dataset(&c)?;
    let mut model = ToyDenoiser::init(&c, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xf00d);
    let fusion: Vec<String> = model.fusion_names().iter().map(|s| s.to_string()).collect();
    for name in fusion {
        let i = model.params.position(&name).expect("fusion parameter");
        let shape = model.params.tensors()[i].shape().to_vec();
        model.params.tensors_mut()[i] = gaussian(&shape, 0.3, &mut rng);
    }
    let batch = sample_batch(&c, &data.records, 2, &mut rng)?;
    let schedule = NoiseSchedule::from_config(&c.schedule)?;
    let report = grad_check_many(
        |t, v| training_loss(t, &model, v, &schedule, &batch, false),
        model.params.tensors(),
        GradCheckOptions {
            max_coords_per_input: opts.loss_coords,
            seed: opts.seed,
            ..GradCheckOptions::default()
        },
    )?;
    Ok(CheckOutcome {
        name: "full_loss".into(),
        report,
    })
}

/// Runs every check. `config` sizes the attention and full-loss checks.
pub fn gradient_suite(config: &Config, opts: &SuiteOptions) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = op_checks(&mut rng, opts.inject_faulty_adjoint);
    checks.push(attention_check(config, AttentionMode::Multiplicative, &mut rng));
    checks.push(attention_check(config, AttentionMode::Additive, &mut rng));
    let mut out = Vec::with_capacity(checks.len() + 1);
    for (name, inputs, f) in checks {
        let report = grad_check_many(
            f,
            &inputs,
            GradCheckOptions {
                seed: opts.seed,
                ..GradCheckOptions::default()
            },
        )?;
        out.push(CheckOutcome { name, report });
    }
    out.push(full_loss_check(config, opts)?);
    Ok(out)
}
