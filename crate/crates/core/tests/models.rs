use std::collections::BTreeSet;

use downscale_core::models::{param_report, PAPER_VARIABLES};
use downscale_core::numerics::Tape;
use downscale_core::{Arch, Error, Model, ModelConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn six() -> Vec<String> {
    PAPER_VARIABLES.iter().map(|s| s.to_string()).collect()
}

fn toy(arch: Arch) -> ModelConfig {
    let mut cfg = ModelConfig::toy(arch);
    if arch != Arch::SingleVar {
        cfg.variables = six();
    }
    cfg
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// Closed-form parameter arithmetic, written independently of the builders.
fn res_block(cin: usize, cout: usize, k: usize) -> usize {
    let shortcut = if cin != cout { cin * cout + cout } else { 0 };
    2 * cin + (cin * cout * k * k + cout) + (cout * cout * k * k + cout) + shortcut
}

fn expected_count(cfg: &ModelConfig) -> usize {
    let n = cfg.variables.len();
    let k = cfg.kernel;
    if cfg.arch == Arch::Unet {
        let w = &cfg.unet_widths;
        let b = cfg.unet_blocks;
        let mut total = n * w[0] + w[0];
        let mut cin = w[0];
        for &wi in w {
            for _ in 0..b {
                total += res_block(cin, wi, k);
                cin = wi;
            }
        }
        for _ in 0..b {
            total += res_block(cin, cfg.unet_bottleneck, k);
            cin = cfg.unet_bottleneck;
        }
        for &wi in w.iter().rev() {
            let mut c = cin + b * wi;
            for _ in 0..b {
                total += res_block(c, wi, k);
                c = wi;
            }
            cin = wi;
        }
        return total + cin * n + n;
    }
    let d = cfg.embed_dim;
    let hd = cfg.head_dim.unwrap_or(d / cfg.heads) * cfg.heads;
    let m = cfg.mlp_hidden;
    let tokens = (cfg.height / cfg.patch) * (cfg.width / cfg.patch);
    let embed = cfg.patch * cfg.patch * n * d + d + tokens * d;
    let block = 4 * d + 3 * (d * hd + hd) + hd * d + d + d * m + m + m * d + d;
    let (decoders, out) = if cfg.arch == Arch::Vit1emd { (n, 1) } else { (1, n) };
    let mut decoder = 0;
    let mut cin = d;
    for &w in &cfg.decoder_widths {
        decoder += res_block(cin, w, k);
        cin = w;
    }
    decoder += cin * out + out;
    embed + cfg.depth * block + decoders * decoder
}

#[test]
fn toy_parameter_counts_match_closed_form() {
    for arch in Arch::ALL {
        let cfg = toy(arch);
        let model = Model::<f32>::build(&cfg).unwrap();
        let count = model.param_count();
        assert_eq!(count.total, expected_count(&cfg), "{arch}");
        assert_eq!(count.by_component.values().sum::<usize>(), count.total);
    }
    // Hand evaluation of the toy 1E1D formula.
    let cfg = toy(Arch::Vit1e1d);
    let embed = 384 * 64 + 64 + 64 * 64;
    let block = 256 + 3 * 4160 + 4160 + 8320 + 8256;
    let decoder = (128 + 36928 + 36928) + (128 + 18464 + 9248 + 2080) + (64 + 4624 + 2320 + 528) + 102;
    assert_eq!(expected_count(&cfg), embed + 2 * block + decoder);
}

#[test]
fn paper_scale_counts_are_near_published_and_exact() {
    for arch in Arch::ALL {
        let cfg = ModelConfig::paper(arch);
        let model = Model::<f32>::build(&cfg).unwrap();
        let count = model.param_count();
        assert_eq!(count.total, expected_count(&cfg), "{arch}");
        let ratio = count.total as f64 / 1e6 / arch.reference_params_millions();
        assert!((1.0 / 1.5..1.5).contains(&ratio), "{arch}: ratio {ratio}");
        assert!(count.by_component.len() >= 2);
    }
}

#[test]
fn vit_1emd_is_shared_encoder_plus_disjoint_decoders() {
    let model = Model::<f32>::build(&ModelConfig::paper(Arch::Vit1emd)).unwrap();
    let count = model.param_count();
    let encoder: usize = ["patch_embed", "pos_embed", "encoder"]
        .iter()
        .map(|c| count.by_component[*c])
        .sum();
    let decoders: Vec<usize> = (0..6)
        .map(|j| count.by_component[&format!("decoder.{j}")] + count.by_component[&format!("head.{j}")])
        .collect();
    assert_eq!(count.by_component.len(), 3 + 12);
    assert_eq!(count.total, encoder + decoders.iter().sum::<usize>());
    assert!(decoders.iter().all(|&d| d == decoders[0]));

    let mut owners: Vec<BTreeSet<String>> = vec![BTreeSet::new(); 6];
    for p in model.params().iter() {
        if let Some(j) = p
            .component
            .strip_prefix("decoder.")
            .or_else(|| p.component.strip_prefix("head."))
        {
            owners[j.parse::<usize>().unwrap()].insert(p.name.clone());
        }
    }
    for a in 0..6 {
        assert!(!owners[a].is_empty());
        for b in a + 1..6 {
            assert!(owners[a].is_disjoint(&owners[b]));
        }
    }
}

#[test]
fn encoders_differ_only_in_patch_embedding_width() {
    let single = Model::<f32>::build(&ModelConfig::paper(Arch::SingleVar)).unwrap();
    let e1d = Model::<f32>::build(&ModelConfig::paper(Arch::Vit1e1d)).unwrap();
    let emd = Model::<f32>::build(&ModelConfig::paper(Arch::Vit1emd)).unwrap();
    assert!(!single.encoder_layer_shapes().is_empty());
    assert_eq!(single.encoder_layer_shapes(), emd.encoder_layer_shapes());
    assert_eq!(single.encoder_layer_shapes(), e1d.encoder_layer_shapes());
    let width = |m: &Model<f32>| {
        let id = m.params().id("encoder.patch_embed.weight").unwrap();
        m.params().get(id).value.shape().to_vec()
    };
    assert_eq!(width(&single), vec![64, 256]);
    assert_eq!(width(&e1d), vec![384, 256]);
    let (cs, ce) = (single.param_count(), emd.param_count());
    assert_eq!(cs.by_component["encoder"], ce.by_component["encoder"]);
    assert_eq!(cs.by_component["pos_embed"], ce.by_component["pos_embed"]);
}

#[test]
fn paper_grid_arithmetic() {
    let cfg = ModelConfig::paper(Arch::Vit1emd);
    assert_eq!(cfg.num_patches(), 3402);
    assert_eq!(cfg.encoder_grid(), [256, 54, 63]);
    assert_eq!(cfg.upsample_stages(), 3);

    let mut small = cfg.clone();
    small.depth = 1;
    small.heads = 1;
    let model = Model::<f32>::build(&small).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[6, 432, 504]));
    let mut ctx = downscale_core::layers::Ctx::eval(model.params());
    let grid = model.encode(&mut tape, &mut ctx, x).unwrap().unwrap();
    assert_eq!(tape.shape(grid), &[256, 54, 63]);
}

#[test]
fn report_surfaces_the_published_inconsistency() {
    let configs: Vec<_> = Arch::ALL.iter().map(|&a| ModelConfig::paper(a)).collect();
    let report = param_report(&configs).unwrap();
    for arch in Arch::ALL {
        assert!(report.contains(arch.key()));
    }
    assert!(report.contains("11.63M vs 15.39M"));
    assert!(report.contains("encoder"));
}

#[test]
fn fresh_models_output_exact_zeros() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for arch in Arch::ALL {
        let cfg = toy(arch);
        let model = Model::<f32>::build(&cfg).unwrap();
        let x = random(&mut rng, &[cfg.n_vars(), 64, 64]);
        let y = model.predict(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0), "{arch}");

        let mut drng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = model.forward(&mut tape, xv, Some(&mut drng)).unwrap();
        assert!(tape.value(yv).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_rejects_mismatched_input() {
    for arch in Arch::ALL {
        let cfg = toy(arch);
        let model = Model::<f32>::build(&cfg).unwrap();
        for shape in [[cfg.n_vars(), 32, 64], [cfg.n_vars() + 1, 64, 64]] {
            let err = model.predict(&Tensor::zeros(&shape)).unwrap_err();
            assert!(matches!(err, Error::Dimension { .. }), "{arch}: {err}");
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = toy(Arch::SingleVar);
    cfg.variables = six();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    let mut cfg = toy(Arch::Vit1e1d);
    cfg.heads = 6;
    assert!(matches!(Model::<f32>::build(&cfg), Err(Error::Config(_))));
    cfg.head_dim = Some(16);
    assert!(cfg.validate().is_ok());

    let mut cfg = toy(Arch::Vit1emd);
    cfg.height = 60;
    assert!(cfg.validate().is_err());

    let mut cfg = toy(Arch::Vit1emd);
    cfg.decoder_widths = vec![64, 32];
    assert!(cfg.validate().is_err());

    let mut cfg = toy(Arch::Unet);
    cfg.width = 68;
    assert!(cfg.validate().is_err());

    let mut cfg = toy(Arch::Vit1e1d);
    cfg.variables.push("tas".into());
    assert!(cfg.validate().is_err());

    let mut cfg = toy(Arch::Vit1e1d);
    cfg.variables.clear();
    assert!(cfg.validate().is_err());
}

#[test]
fn paper_heads_need_explicit_head_width() {
    let mut cfg = ModelConfig::paper(Arch::Vit1e1d);
    assert_eq!(cfg.head_width(), 256);
    cfg.head_dim = None;
    assert!(cfg.validate().is_err());
}

#[test]
fn same_seed_gives_identical_weights() {
    for arch in Arch::ALL {
        let cfg = toy(arch);
        let a = Model::<f32>::build(&cfg).unwrap();
        let b = Model::<f32>::build(&cfg).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let mut other = cfg.clone();
        other.seed = 99;
        let c = Model::<f32>::build(&other).unwrap();
        let differs = a
            .params()
            .iter()
            .zip(c.params().iter())
            .any(|(p, q)| p.value.data() != q.value.data());
        assert!(differs);
    }
}

#[test]
fn initialization_follows_the_scheme() {
    let model = Model::<f64>::build(&toy(Arch::Vit1emd)).unwrap();
    for p in model.params().iter() {
        let d = p.value.data();
        if p.name.ends_with(".bias") || p.name.ends_with(".beta") || p.name.contains(".head.") {
            assert!(d.iter().all(|&v| v == 0.0), "{}", p.name);
        } else if p.name.ends_with(".gamma") {
            assert!(d.iter().all(|&v| v == 1.0), "{}", p.name);
        } else {
            assert!(d.iter().all(|&v| v.abs() <= 0.04), "{}", p.name);
            assert!(d.iter().any(|&v| v != 0.0), "{}", p.name);
        }
    }
}

fn perturbed(model: &Model<f32>, rng: &mut ChaCha8Rng) -> Model<f32> {
    let mut m = model.clone();
    for p in m.params_mut().iter_mut() {
        if p.name.contains(".head.") {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    m
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir = tempfile::tempdir().unwrap();
    for arch in Arch::ALL {
        let model = perturbed(&Model::<f32>::build(&toy(arch)).unwrap(), &mut rng);
        let bytes = model.to_bytes().unwrap();
        let back = Model::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for (p, q) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(p.name, q.name);
            let (a, b): (Vec<u32>, Vec<u32>) = (
                p.value.data().iter().map(|v| v.to_bits()).collect(),
                q.value.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(a, b);
        }
        let path = dir.path().join(format!("{}.ckpt", arch.key()));
        model.save(&path).unwrap();
        let loaded = Model::<f32>::load(&path).unwrap();
        let x = random(&mut rng, &[model.config().n_vars(), 64, 64]);
        assert_eq!(model.predict(&x).unwrap(), loaded.predict(&x).unwrap());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = Model::<f32>::build(&toy(Arch::Unet)).unwrap();
    let bytes = model.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"DSCK");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Model::<f32>::from_bytes(&bad).is_err());
    assert!(Model::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Model::<f64>::from_bytes(&bytes).is_err());
}

#[test]
fn one_emd_decoders_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = perturbed(&Model::<f32>::build(&toy(Arch::Vit1emd)).unwrap(), &mut rng);
    let x = random(&mut rng, &[6, 64, 64]);
    let y0 = base.predict(&x).unwrap();
    let plane = 64 * 64;
    let changed = |y: &Tensor<f32>| -> Vec<bool> {
        (0..6)
            .map(|c| y.data()[c * plane..(c + 1) * plane] != y0.data()[c * plane..(c + 1) * plane])
            .collect()
    };

    let mut dec = base.clone();
    for p in dec.params_mut().iter_mut() {
        if p.component == "decoder.2" {
            for v in p.value.data_mut() {
                *v += 0.01;
            }
        }
    }
    let flags = changed(&dec.predict(&x).unwrap());
    assert_eq!(flags, vec![false, false, true, false, false, false]);

    let mut enc = base.clone();
    for p in enc.params_mut().iter_mut() {
        if p.component == "encoder" && p.name.contains("fc2.weight") {
            for v in p.value.data_mut() {
                *v += 0.01;
            }
        }
    }
    assert!(changed(&enc.predict(&x).unwrap()).iter().all(|&c| c));
}

#[test]
fn output_depends_on_every_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for arch in [Arch::Vit1e1d, Arch::SingleVar] {
        let cfg = toy(arch);
        let model = perturbed(&Model::<f32>::build(&cfg).unwrap(), &mut rng);
        let n = cfg.n_vars();
        let x = random(&mut rng, &[n, 64, 64]);
        let y0 = model.predict(&x).unwrap();
        // A far-away output pixel responds to every patch through attention.
        let probe = |y: &Tensor<f32>| y.data()[0];
        for pr in 0..8 {
            for pc in 0..8 {
                let mut xp = x.clone();
                xp.data_mut()[(pr * 8 + 3) * 64 + pc * 8 + 4] += 0.5;
                let y = model.predict(&xp).unwrap();
                assert_ne!(probe(&y), probe(&y0), "{arch}: patch ({pr},{pc})");
            }
        }
    }
}

#[test]
fn arch_keys_round_trip() {
    for arch in Arch::ALL {
        assert_eq!(arch.key().parse::<Arch>().unwrap(), arch);
        let json = serde_json::to_string(&arch).unwrap();
        assert_eq!(json, format!("\"{}\"", arch.key()));
    }
    assert!("vit".parse::<Arch>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn shapes_hold_for_random_extents(hm in 1usize..4, wm in 1usize..4, arch in 0usize..4, seed in 0u64..100) {
        let arch = Arch::ALL[arch];
        let mut cfg = toy(arch);
        cfg.height = 8 * hm;
        cfg.width = 8 * wm;
        cfg.seed = seed;
        let model = Model::<f32>::build(&cfg).unwrap();
        prop_assert_eq!(model.param_count().total, expected_count(&cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[cfg.n_vars(), cfg.height, cfg.width]);
        let y = model.predict(&x).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }
}
