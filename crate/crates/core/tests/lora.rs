use std::collections::BTreeMap;

use e2gan_core::lora::{
    crucial_layers, factor_shapes, inject_lora, inject_lora_with, lora_a_name, lora_b_name, lora_param_count,
    LoraTargets, RankSpec,
};
use e2gan_core::model::{generator_layout, sample_noise, Generator, GeneratorConfig, LayerDescriptor};
use e2gan_core::tensor::Tensor;
use e2gan_core::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn micro() -> Generator<f32> {
    Generator::build(GeneratorConfig::micro(), 3).unwrap()
}

fn inputs(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let r = cfg.image_resolution;
    (
        Tensor::randn(&[2, 3, r, r], 0.6, rng),
        sample_noise(2, cfg.noise_dim, rng),
        Tensor::randn(&[2, cfg.text_embed_dim], 1.0, rng),
    )
}

fn randomize_b(adapted: &mut e2gan_core::lora::AdaptedGenerator<f32>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = adapted.trainable_names();
    for n in names {
        let t = adapted.factors_mut().get_mut(&n).unwrap();
        let fresh = Tensor::randn(t.shape(), 0.1, rng);
        *t = fresh;
    }
}

#[test]
fn injection_is_identity_before_training() {
    let gen = micro();
    let spec = RankSpec::by_depth(gen.describe_layers(), [1, 2, 4, 4], 1).unwrap();
    let adapted = inject_lora(gen.clone(), &spec, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10 {
        let (x, z, c) = inputs(gen.config(), &mut rng);
        assert_eq!(gen.forward(&x, &z, &c).unwrap(), adapted.forward(&x, &z, &c).unwrap());
    }
}

#[test]
fn missing_crucial_layer_is_named() {
    let gen = micro();
    let mut spec = RankSpec::searched(gen.describe_layers()).unwrap();
    spec.ranks.remove("up.1");
    spec.thresholds.remove("up.1");
    match inject_lora(gen, &spec, 0) {
        Err(Error::Injection { missing, extra }) => {
            assert_eq!(missing, vec!["up.1".to_string()]);
            assert!(extra.is_empty());
        }
        other => panic!("expected injection error, got {other:?}"),
    }
}

#[test]
fn resnet_layers_need_the_override() {
    let gen = micro();
    let mut spec = RankSpec::searched(gen.describe_layers()).unwrap();
    spec.ranks.insert("rb.0.conv1".into(), 1);
    spec.thresholds.insert("rb.0.conv1".into(), 1);
    assert!(matches!(inject_lora(gen.clone(), &spec, 0), Err(Error::Injection { .. })));
    let mut full = spec.clone();
    for d in gen.describe_layers().iter().filter(|d| d.layer_id.starts_with("rb.") && d.is_factorizable()) {
        full.ranks.insert(d.layer_id.clone(), 1);
        full.thresholds.insert(d.layer_id.clone(), 1);
    }
    assert!(inject_lora_with(gen, &full, 0, LoraTargets::CrucialAndRb).is_ok());
}

#[test]
fn trainables_are_exactly_the_factors() {
    let gen = micro();
    let spec = RankSpec::searched(gen.describe_layers()).unwrap();
    let adapted = inject_lora(gen.clone(), &spec, 0).unwrap();
    let names = adapted.trainable_names();
    assert_eq!(names.len(), 2 * crucial_layers(&gen).len());
    assert!(names.iter().all(|n| n.starts_with("lora.")));
    assert_eq!(adapted.trainable_param_count(), lora_param_count(&spec, gen.describe_layers()).unwrap());
}

#[test]
fn merged_model_matches_adapted_forward() {
    let gen = micro();
    let spec = RankSpec::by_depth(gen.describe_layers(), [1, 4, 8, 8], 1).unwrap();
    let mut adapted = inject_lora(gen.clone(), &spec, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    randomize_b(&mut adapted, &mut rng);
    let merged = adapted.merge().unwrap();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (x, z, c) = inputs(gen.config(), &mut rng);
        let a = adapted.forward(&x, &z, &c).unwrap();
        let m = merged.forward(&x, &z, &c).unwrap();
        worst = worst.max(a.max_abs_diff(&m));
    }
    assert!(worst <= 1e-5, "max abs diff {worst}");
}

#[test]
fn zero_b_merge_is_bit_identical() {
    let gen = micro();
    let spec = RankSpec::searched(gen.describe_layers()).unwrap();
    let merged = inject_lora(gen.clone(), &spec, 1).unwrap().merge().unwrap();
    assert_eq!(merged.params().checksum(), gen.params().checksum());
}

/// Fits factors of full rank to a random dense delta by least squares and checks the
/// composed delta reproduces it.
fn full_rank_fit(layer_id: &str) {
    let gen: Generator<f64> = micro().cast();
    let d: LayerDescriptor = gen.layer(layer_id).unwrap().clone();
    let (h, w) = (d.in_channels, d.out_channels);
    let (kh, kw) = d.kernel.unwrap_or((1, 1));
    let conv = d.kernel.is_some();
    let rows = h * kh * kw;
    let r = rows.min(w);

    let mut ranks = BTreeMap::new();
    let mut thresholds = BTreeMap::new();
    for id in crucial_layers(&gen) {
        let rr = if id == layer_id { r } else { 1 };
        ranks.insert(id.clone(), rr);
        thresholds.insert(id, rr);
    }
    let spec = RankSpec::new(ranks, thresholds).unwrap();
    let mut adapted = inject_lora(gen, &spec, 0).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // Target in "rows x w" form: rows index (a, u, v) for convs, `in` for linears.
    let target = DMatrix::<f64>::from_fn(rows, w, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
    let b = DMatrix::<f64>::from_fn(r, w, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
    // Solve A * B = target for A in the least-squares sense: B^T A^T = target^T.
    let at = b.transpose().svd(true, true).solve(&target.transpose(), 1e-14).unwrap();
    let a = at.transpose(); // rows x r

    let (sa, sb) = factor_shapes(&d, r);
    let mut ta = Tensor::<f64>::zeros(&sa);
    let mut tb = Tensor::<f64>::zeros(&sb);
    if conv {
        for ai in 0..h {
            for j in 0..r {
                for p in 0..kh * kw {
                    ta.data_mut()[(ai * r + j) * kh * kw + p] = a[(ai * kh * kw + p, j)];
                }
            }
        }
        for j in 0..r {
            for bi in 0..w {
                tb.data_mut()[j * w + bi] = b[(j, bi)];
            }
        }
    } else {
        // linear: A is [r, in], B is [out, r]; delta[out, in] = B A.
        for j in 0..r {
            for i in 0..h {
                ta.data_mut()[j * h + i] = a[(i, j)];
            }
        }
        for o in 0..w {
            for j in 0..r {
                tb.data_mut()[o * r + j] = b[(j, o)];
            }
        }
    }
    *adapted.factors_mut().get_mut(&lora_a_name(layer_id)).unwrap() = ta;
    *adapted.factors_mut().get_mut(&lora_b_name(layer_id)).unwrap() = tb;
    let delta = adapted.weight_delta(layer_id).unwrap();

    let mut worst = 0.0f64;
    for ai in 0..h {
        for bi in 0..w {
            for p in 0..kh * kw {
                let got = if !conv {
                    delta.data()[bi * h + ai]
                } else if d.kind == e2gan_core::model::LayerKind::TransposeConv {
                    delta.data()[(ai * w + bi) * kh * kw + p]
                } else {
                    delta.data()[(bi * h + ai) * kh * kw + p]
                };
                worst = worst.max((got - target[(ai * kh * kw + p, bi)]).abs());
            }
        }
    }
    assert!(worst <= 1e-6, "{layer_id}: max residual {worst}");
}

#[test]
fn full_rank_factors_reconstruct_any_conv_delta() {
    full_rank_fit("down.1");
    full_rank_fit("down.0");
}

#[test]
fn full_rank_factors_reconstruct_any_transpose_conv_delta() {
    full_rank_fit("up.1");
}

#[test]
fn full_rank_factors_reconstruct_any_linear_delta() {
    full_rank_fit("tb.0.q");
    full_rank_fit("tb.0.ff2");
}

#[test]
fn growing_ranks_keeps_the_function() {
    let gen = micro();
    let spec = RankSpec::by_depth(gen.describe_layers(), [1, 2, 2, 2], 1).unwrap();
    let mut adapted = inject_lora(gen.clone(), &spec, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    randomize_b(&mut adapted, &mut rng);
    let (x, z, c) = inputs(gen.config(), &mut rng);
    let before = adapted.forward(&x, &z, &c).unwrap();
    let old_a = adapted.factors().get("lora.down.2.a").unwrap().clone();
    let grown = RankSpec::by_depth(gen.describe_layers(), [1, 4, 4, 4], 1).unwrap();
    adapted.grow_ranks(&grown.ranks, &mut rng).unwrap();
    assert_eq!(adapted.spec().ranks["down.2"], 4);
    let new_a = adapted.factors().get("lora.down.2.a").unwrap();
    assert_eq!(new_a.shape()[1], 4);
    // Existing slices are retained.
    let kk = old_a.shape()[2] * old_a.shape()[3];
    assert_eq!(&new_a.data()[..2 * kk], &old_a.data()[..2 * kk]);
    let after = adapted.forward(&x, &z, &c).unwrap();
    assert!(before.max_abs_diff(&after) <= 1e-6);
}

#[test]
fn searched_spec_count_matches_hand_summation() {
    let layout = generator_layout(&GeneratorConfig::default());
    let spec = RankSpec::searched(&layout).unwrap();
    // down: 3*1*49+64, 64*4*9+4*128, 128*8*9+8*256, 256*8*9+8*256
    // up (deepest first): 256*8*9+8*256, 256*8*9+8*128, 128*4*9+4*64, 64*1*49+3
    // TB: q,k,v 3*(256+256), ff1 256+2048, ff2 1024+256
    let down = 211 + 2816 + 11264 + 20480;
    let up = 20480 + 19456 + 4864 + 3139;
    let tb = 1536 + 2304 + 1280;
    assert_eq!(down + up + tb, 87_830);
    assert_eq!(lora_param_count(&spec, &layout).unwrap(), 87_830);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn count_strictly_increases_in_each_rank(depth_ranks in prop::array::uniform4(1usize..6), layer in 0usize..13) {
        let layout = generator_layout(&GeneratorConfig::default());
        let ids: Vec<String> = e2gan_core::lora::crucial_layers_of(&layout);
        let mut ranks: BTreeMap<String, usize> = BTreeMap::new();
        for id in &ids {
            let r = e2gan_core::lora::sampling_depth(id).map(|d| depth_ranks[d]).unwrap_or(depth_ranks[0]);
            ranks.insert(id.clone(), r);
        }
        let thresholds: BTreeMap<String, usize> = ids.iter().map(|i| (i.clone(), 64)).collect();
        let spec = RankSpec::new(ranks.clone(), thresholds.clone()).unwrap();
        let base = lora_param_count(&spec, &layout).unwrap();
        let target = &ids[layer];
        ranks.insert(target.clone(), ranks[target] + 1);
        let bumped = RankSpec::new(ranks, thresholds).unwrap();
        prop_assert!(lora_param_count(&bumped, &layout).unwrap() > base);
    }
}
