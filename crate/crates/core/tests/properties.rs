use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use multid_core::attention::{masked_cross_attention, reference_attention};
use multid_core::diffusion::NoiseSchedule;
use multid_core::embedding::{gaussian, project_face, stack_embeddings, HashTextEncoder};
use multid_core::mask::{assemble_with_queries, downsample_mask, expand_box, pyramids_for_boxes, rasterize_mask};
use multid_core::metrics::{cosine_sim, multi_sim, IdentityEncoder};
use multid_core::numeric::exact_sum;
use multid_core::{AttentionMode, AttentionParams, Config, EmbeddingStack, FaceBox, FaceFeature, ProjectionParams, Tensor};

fn face_box(size: f64) -> impl Strategy<Value = FaceBox> {
    (0.0..size - 1.0, 0.0..size - 1.0, 0.01f64..1.0, 0.01f64..1.0).prop_map(move |(x0, y0, fw, fh)| {
        let x1 = x0 + (size - x0) * fw;
        let y1 = y0 + (size - y0) * fh;
        FaceBox::new(x0, y0, x1.max(x0 + 1e-3), y1.max(y0 + 1e-3)).unwrap()
    })
}

fn fixture(n_faces: usize, seed: u64) -> (Tensor, EmbeddingStack, AttentionParams, Vec<FaceBox>) {
    let config = Config::default();
    let m = &config.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = ProjectionParams::init(m.d_gf, m.d_lf, m.d_k, &mut rng);
    let text = HashTextEncoder::new(m.d_k, m.text_len, seed).encode("people");
    let blocks: Vec<_> = (0..n_faces)
        .map(|i| {
            let f = FaceFeature::new(
                gaussian(&[1, m.d_gf], 1.0, &mut rng),
                gaussian(&[m.local_grid * m.local_grid, m.d_lf], 1.0, &mut rng),
                format!("f{i}"),
            )
            .unwrap();
            project_face(&f, &proj).unwrap()
        })
        .collect();
    let stack = stack_embeddings(&text, &blocks).unwrap();
    let params = AttentionParams::init(m.width, m.d_k, m.heads, m.d_head, &mut rng);
    let x = gaussian(&[64, m.width], 2.0, &mut rng);
    let boxes = (0..n_faces)
        .map(|i| FaceBox::new((i % 4) as f64 * 2.0, (i / 4) as f64 * 4.0, (i % 4) as f64 * 2.0 + 2.0, (i / 4) as f64 * 4.0 + 3.0).unwrap())
        .collect();
    (x, stack, params, boxes)
}

fn mask_for(stack: &EmbeddingStack, boxes: &[FaceBox]) -> multid_core::AttentionMask {
    let pyramids = pyramids_for_boxes(boxes, 0.25, 8, &[8]).unwrap();
    let levels: Vec<_> = pyramids.iter().map(|p| p.level(8).unwrap()).collect();
    assemble_with_queries(stack.layout.text_len, stack.layout.block_len, &levels, Some(64)).unwrap()
}

/// Stack with face blocks reordered: block `i` becomes block `perm[i]` of `s`.
fn permute_stack(s: &EmbeddingStack, perm: &[usize]) -> EmbeddingStack {
    let l = s.layout;
    let mut rows: Vec<Tensor> = Vec::new();
    let width = s.tokens.shape()[1];
    let take = |r: std::ops::Range<usize>| {
        Tensor::new(vec![r.len(), width], s.tokens.data()[r.start * width..r.end * width].to_vec()).unwrap()
    };
    rows.push(take(l.text_range()));
    for &p in perm {
        rows.push(take(l.block_range(p)));
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    EmbeddingStack {
        tokens: Tensor::concat_rows(&refs).unwrap(),
        layout: l,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn downsample_is_any_overlap(b in face_box(64.0), level in prop::sample::select(vec![32usize, 16, 8, 4, 2, 1])) {
        let m = rasterize_mask(&b, 64, 64, 0);
        let d = downsample_mask(&m, level).unwrap();
        let f = 64 / level;
        for r in 0..level {
            for c in 0..level {
                let any = (r * f..(r + 1) * f).any(|y| (c * f..(c + 1) * f).any(|x| m.grid.at(y, x) == 1.0));
                prop_assert_eq!(d.grid.at(r, c), f64::from(u8::from(any)));
            }
        }
    }

    #[test]
    fn expanded_box_contains_original(b in face_box(32.0), margin in 0.0f64..1.0) {
        let e = expand_box(&b, margin, 32, 32).unwrap();
        prop_assert!(e.x0 <= b.x0 && e.y0 <= b.y0 && e.x1 >= b.x1 && e.y1 >= b.y1);
        prop_assert!(e.within(32, 32));
    }

    #[test]
    fn attention_rows_are_distributions(n in 0usize..5, seed in 0u64..1000) {
        let (x, stack, params, boxes) = fixture(n, seed);
        let mask = mask_for(&stack, &boxes);
        for mode in [AttentionMode::Multiplicative, AttentionMode::Additive] {
            let out = masked_cross_attention(&x, &stack, &mask, &params, mode).unwrap();
            for map in &out.maps {
                for q in 0..64 {
                    let row = map.row(q);
                    prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
                    prop_assert!((exact_sum(row.iter().copied()) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn all_ones_mask_is_reference(n in 0usize..5, seed in 0u64..1000) {
        let (x, stack, params, _) = fixture(n, seed);
        let ones = multid_core::AttentionMask::ones(64, stack.layout);
        let a = masked_cross_attention(&x, &stack, &ones, &params, AttentionMode::Multiplicative).unwrap();
        let b = reference_attention(&x, &stack, &params).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn block_reordering_is_invariant(seed in 0u64..1000, rot in 1usize..4) {
        let (x, stack, params, boxes) = fixture(4, seed);
        let mask = mask_for(&stack, &boxes);
        let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
        let moved_stack = permute_stack(&stack, &perm);
        let moved_mask = mask.permute_faces(&perm).unwrap();
        let a = masked_cross_attention(&x, &stack, &mask, &params, AttentionMode::Multiplicative).unwrap();
        let b = masked_cross_attention(&x, &moved_stack, &moved_mask, &params, AttentionMode::Multiplicative).unwrap();
        prop_assert_eq!(&a.out, &b.out);
        let l = stack.layout;
        for (ma, mb) in a.maps.iter().zip(&b.maps) {
            for q in 0..64 {
                for (dst, &src) in perm.iter().enumerate() {
                    prop_assert_eq!(&mb.row(q)[l.block_range(dst)], &ma.row(q)[l.block_range(src)]);
                }
            }
        }
    }

    #[test]
    fn masked_out_keys_share_one_weight(n in 1usize..5, seed in 0u64..1000) {
        let (x, stack, params, boxes) = fixture(n, seed);
        let mask = mask_for(&stack, &boxes);
        let out = masked_cross_attention(&x, &stack, &mask, &params, AttentionMode::Multiplicative).unwrap();
        for map in &out.maps {
            for q in 0..64 {
                let zeros: Vec<f64> = (0..mask.n_keys()).filter(|&k| mask.m.at(q, k) == 0.0).map(|k| map.at(q, k)).collect();
                if let Some(&w) = zeros.first() {
                    prop_assert!(zeros.iter().all(|&v| v == w));
                }
            }
        }
    }

    #[test]
    fn multi_sim_range_and_symmetry(v in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 4)) {
        prop_assume!(v.iter().all(|u| u.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let t: Vec<Tensor> = v.iter().map(|u| Tensor::from_rows(&[u.as_slice()]).unwrap()).collect();
        let enc = IdentityEncoder;
        let s = multi_sim(&t[0], &t[1], &t[2], &t[3], &enc).unwrap();
        let swapped = multi_sim(&t[1], &t[0], &t[3], &t[2], &enc).unwrap();
        prop_assert!((-1.0..=3.0).contains(&s));
        prop_assert!((s - swapped).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant(u in prop::collection::vec(-5.0f64..5.0, 4), v in prop::collection::vec(-5.0f64..5.0, 4), k in 0.01f64..100.0) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f64> = u.iter().map(|x| x * k).collect();
        let a = cosine_sim(&u, &v).unwrap();
        let b = cosine_sim(&scaled, &v).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tensor_dump_round_trips(rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = gaussian(&[rows, cols], 1e3, &mut rng);
        prop_assert_eq!(Tensor::from_dump(&t.to_dump()).unwrap(), t);
    }

    #[test]
    fn exact_sum_ignores_order(v in prop::collection::vec(-1e12f64..1e12, 1..40), seed in 0u64..100) {
        use rand::seq::SliceRandom;
        let mut w = v.clone();
        w.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(exact_sum(v.iter().copied()).to_bits(), exact_sum(w.iter().copied()).to_bits());
    }
}

#[test]
fn alpha_bar_decreases_to_near_zero() {
    let s = NoiseSchedule::from_config(&Config::default().schedule).unwrap();
    let mut prev = s.alpha_bar(0).unwrap();
    assert_eq!(prev, 1.0);
    for t in 1..=s.t_max() {
        let a = s.alpha_bar(t).unwrap();
        assert!(a < prev);
        prev = a;
    }
    assert!(prev < 1e-4);
}

#[test]
fn config_round_trips_through_json() {
    for c in [Config::default(), Config::tiny(), Config::reference_scale()] {
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
    }
}

#[test]
fn forward_process_keeps_unit_variance() {
    let s = NoiseSchedule::from_config(&Config::default().schedule).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 100_000;
    let z0 = gaussian(&[n, 1], 1.0, &mut rng);
    for t in [1usize, 250, 500, s.t_max()] {
        let eps = gaussian(&[n, 1], 1.0, &mut rng);
        let z = s.add_noise(&z0, t, &eps).unwrap();
        let mean = z.sum() / n as f64;
        let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.01, "t = {t}: variance {var}");
    }
}

#[test]
fn last_timestep_is_almost_pure_noise() {
    let s = NoiseSchedule::from_config(&Config::default().schedule).unwrap();
    let ab = s.alpha_bar(s.t_max()).unwrap();
    let expected: f64 = (1..=1000).map(|t| 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0)).product();
    assert!((ab - expected).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z0 = gaussian(&[16, 16, 4], 1.0, &mut rng);
    let eps = gaussian(&[16, 16, 4], 1.0, &mut rng);
    let z = s.add_noise(&z0, s.t_max(), &eps).unwrap();
    assert!(z.max_abs_diff(&eps) < 0.03);
}
