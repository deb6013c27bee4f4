use downscale_core::layers::{
    Builder, Conv, Ctx, DecoderStage, Init, PatchEmbed, PositionalEmbedding, ResBlock,
    TransformerBlock, TransformerDims, UnetDownStage, UnetUpStage,
};
use downscale_core::numerics::gradcheck::{gradcheck, GradCheckOptions};
use downscale_core::numerics::{ParamId, ParamStore, Tape, Tensor};
use downscale_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, amp: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-amp..amp);
        }
    }
}

fn zero(store: &mut ParamStore<f64>, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).value.data_mut().fill(0.0);
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn dims(d: usize, heads: usize) -> TransformerDims {
    TransformerDims {
        embed_dim: d,
        heads,
        head_dim: d / heads,
        mlp_hidden: 2 * d,
        groups: 2,
        dropout: 0.1,
    }
}

fn block(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, d: usize, heads: usize) -> TransformerBlock {
    let mut b = Builder::new(store, rng, "encoder");
    TransformerBlock::new(&mut b, "blk", dims(d, heads)).unwrap()
}

fn resblock(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> ResBlock {
    let mut b = Builder::new(store, rng, "decoder");
    ResBlock::new(&mut b, name, cin, cout, 3, 2, Init::TruncNormal(0.02)).unwrap()
}

#[test]
fn patch_embed_paper_token_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let pe = {
        let mut b = Builder::new(&mut store, &mut rng, "patch_embed");
        PatchEmbed::new(&mut b, "pe", 8, 6, 4).unwrap()
    };
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[6, 432, 504]));
    let y = pe.forward(&mut tape, &Ctx::eval(&store), x).unwrap();
    assert_eq!(tape.shape(y), &[3402, 4]);
    assert_eq!(pe.proj.weight.index(), 0);
    assert_eq!(store.get(pe.proj.weight).value.shape(), &[384, 4]);
}

#[test]
fn patch_embed_zero_image_gives_zero_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let pe = {
        let mut b = Builder::new(&mut store, &mut rng, "patch_embed");
        PatchEmbed::new(&mut b, "pe", 8, 2, 5).unwrap()
    };
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 16, 24]));
    let y = pe.forward(&mut tape, &Ctx::eval(&store), x).unwrap();
    assert_eq!(tape.shape(y), &[6, 5]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_embed_tokens_depend_only_on_their_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let pe = {
        let mut b = Builder::new(&mut store, &mut rng, "patch_embed");
        PatchEmbed::new(&mut b, "pe", 8, 2, 3).unwrap()
    };
    let image = random(&mut rng, &[2, 16, 16]);
    let run = |img: &Tensor<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let y = pe.forward(&mut tape, &Ctx::eval(&store), x).unwrap();
        tape.value(y).clone()
    };
    let base = run(&image);
    assert_eq!(base.shape(), &[4, 3]);
    // Patch (r, c) in row-major order is token 2r + c.
    for (pr, pc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let mut masked = image.clone();
        for ch in 0..2 {
            for i in 8 * pr..8 * pr + 8 {
                for j in 8 * pc..8 * pc + 8 {
                    masked.data_mut()[(ch * 16 + i) * 16 + j] = 0.0;
                }
            }
        }
        let out = run(&masked);
        let token = 2 * pr + pc;
        for t in 0..4 {
            let same = base.data()[3 * t..3 * t + 3] == out.data()[3 * t..3 * t + 3];
            assert_eq!(same, t != token, "patch {token}, token {t}");
        }
    }
}

#[test]
fn patch_embed_flattening_is_channel_then_row_then_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let pe = {
        let mut b = Builder::new(&mut store, &mut rng, "patch_embed");
        PatchEmbed::new(&mut b, "pe", 2, 2, 8).unwrap()
    };
    // Identity projection exposes the flattened patch directly.
    let w = store.get_mut(pe.proj.weight);
    w.value = Tensor::from_fn(&[8, 8], |k| if k / 8 == k % 8 { 1.0 } else { 0.0 });
    let image = Tensor::from_fn(&[2, 2, 4], |k| k as f64);
    let mut tape = Tape::new();
    let x = tape.constant(image);
    let y = pe.forward(&mut tape, &Ctx::eval(&store), x).unwrap();
    let v = tape.value(y).data();
    assert_eq!(&v[..8], &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0, 12.0, 13.0]);
    assert_eq!(&v[8..], &[2.0, 3.0, 6.0, 7.0, 10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn patch_embed_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let pe = {
        let mut b = Builder::new(&mut store, &mut rng, "patch_embed");
        PatchEmbed::new(&mut b, "pe", 8, 1, 3).unwrap()
    };
    let ctx = Ctx::eval(&store);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 12, 16]));
    assert!(matches!(pe.forward(&mut tape, &ctx, x), Err(Error::Dimension { .. })));
    let x = tape.constant(Tensor::zeros(&[2, 16, 16]));
    assert!(matches!(pe.forward(&mut tape, &ctx, x), Err(Error::Dimension { .. })));
}

#[test]
fn positional_embedding_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let pe = {
        let mut b = Builder::new(&mut store, &mut rng, "pos_embed");
        PositionalEmbedding::new(&mut b, "pos", 4, 3).unwrap()
    };
    let table = store.get(pe.table).value.clone();
    let tokens = random(&mut rng, &[4, 3]);

    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[4, 3]));
    let y = pe.forward(&mut tape, &Ctx::eval(&store), z).unwrap();
    assert_eq!(tape.value(y), &table);

    let mut zeroed = store.clone();
    zero(&mut zeroed, &[pe.table]);
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let y = pe.forward(&mut tape, &Ctx::eval(&zeroed), x).unwrap();
    assert_eq!(tape.value(y), &tokens);

    let mut tape = Tape::new();
    let x = tape.constant(tokens);
    let y = pe.forward(&mut tape, &Ctx::eval(&store), x).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss, &mut store).unwrap();
    assert!(store.get(pe.table).grad.data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[5, 3]));
    assert!(matches!(
        pe.forward(&mut tape, &Ctx::eval(&store), x),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn mhsa_single_token_is_value_then_output_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let blk = block(&mut store, &mut rng, 8, 2);
    randomize(&mut store, &mut rng, 0.5);
    let x0 = random(&mut rng, &[1, 8]);
    let mut tape = Tape::new();
    let x = tape.constant(x0);
    let mut ctx = Ctx::eval(&store);
    let y = blk.mhsa(&mut tape, &mut ctx, x).unwrap();
    let v = blk.value.forward(&mut tape, &ctx, x).unwrap();
    let o = blk.out.forward(&mut tape, &ctx, v).unwrap();
    assert_close(tape.value(y).data(), tape.value(o).data(), 1e-14);
}

#[test]
fn mhsa_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let mut store = ParamStore::<f64>::new();
        let blk = block(&mut store, &mut rng, 8, 4);
        randomize(&mut store, &mut rng, 0.5);
        let t = rng.random_range(2..9);
        let x0 = random(&mut rng, &[t, 8]);
        let mut perm: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let xp = Tensor::from_fn(&[t, 8], |k| x0.data()[perm[k / 8] * 8 + k % 8]);
        let run = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(x);
            let y = blk.mhsa(&mut tape, &mut Ctx::eval(&store), x).unwrap();
            tape.value(y).clone()
        };
        let (y, yp) = (run(x0.clone()), run(xp));
        for (i, &p) in perm.iter().enumerate() {
            assert_close(&yp.data()[i * 8..i * 8 + 8], &y.data()[p * 8..p * 8 + 8], 1e-12);
        }
    }
}

#[test]
fn mhsa_equal_tokens_give_equal_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let blk = block(&mut store, &mut rng, 8, 2);
    randomize(&mut store, &mut rng, 0.5);
    let row = random(&mut rng, &[8]);
    let x0 = Tensor::from_fn(&[5, 8], |k| row.data()[k % 8]);
    let mut tape = Tape::new();
    let x = tape.constant(x0);
    let y = blk.mhsa(&mut tape, &mut Ctx::eval(&store), x).unwrap();
    let y = tape.value(y).data();
    for t in 1..5 {
        assert_close(&y[t * 8..t * 8 + 8], &y[..8], 1e-14);
    }
}

#[test]
fn transformer_block_with_zero_sublayers_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let blk = block(&mut store, &mut rng, 8, 2);
    randomize(&mut store, &mut rng, 0.5);
    zero(
        &mut store,
        &[blk.out.weight, blk.out.bias, blk.fc2.weight, blk.fc2.bias],
    );
    for t in [1, 3, 7] {
        let x0 = random(&mut rng, &[t, 8]);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = blk.forward(&mut tape, &mut Ctx::eval(&store), x).unwrap();
        assert_eq!(tape.value(y), &x0);
    }
}

#[test]
fn transformer_block_eval_is_deterministic_and_training_uses_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let blk = block(&mut store, &mut rng, 16, 4);
    randomize(&mut store, &mut rng, 0.5);
    let x0 = random(&mut rng, &[6, 16]);
    let eval = || {
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = blk.forward(&mut tape, &mut Ctx::eval(&store), x).unwrap();
        tape.value(y).clone()
    };
    let a = eval();
    assert_eq!(a.shape(), &[6, 16]);
    assert_eq!(a.data(), eval().data());

    let train = |seed: u64| {
        let mut drng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = blk.forward(&mut tape, &mut Ctx::train(&store, &mut drng), x).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(train(1).data(), train(1).data());
    assert_ne!(train(1).data(), a.data());
}

#[test]
fn decoder_stage_with_dead_branch_is_bilinear_upsampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let rb = resblock(&mut store, &mut rng, "s", 4, 4);
    assert!(rb.shortcut.is_none());
    randomize(&mut store, &mut rng, 0.5);
    zero(&mut store, &[rb.conv2.kernel, rb.conv2.bias]);
    let stage = DecoderStage {
        upsample: true,
        block: rb,
    };
    let x0 = random(&mut rng, &[4, 5, 7]);
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let y = stage.forward(&mut tape, &Ctx::eval(&store), x).unwrap();
    assert_eq!(tape.value(y), &x0.resize_bilinear(10, 14).unwrap());

    let c = Tensor::full(&[4, 3, 3], 2.5);
    let x = tape.constant(c);
    let y = stage.forward(&mut tape, &Ctx::eval(&store), x).unwrap();
    assert_eq!(tape.shape(y), &[4, 6, 6]);
    assert!(tape.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-14));
}

#[test]
fn decoder_stages_restore_paper_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f32>::new();
    let mut stages = Vec::new();
    {
        let mut b = Builder::new(&mut store, &mut rng, "decoder");
        for (s, (cin, cout)) in [(4, 2), (2, 2), (2, 2), (2, 2)].into_iter().enumerate() {
            let block = ResBlock::new(&mut b, &format!("s{s}"), cin, cout, 3, 2, Init::TruncNormal(0.02)).unwrap();
            stages.push(DecoderStage {
                upsample: s < 3,
                block,
            });
        }
    }
    let mut tape = Tape::new();
    let mut x = tape.constant(Tensor::zeros(&[4, 54, 63]));
    let mut extents = Vec::new();
    for stage in &stages {
        x = stage.forward(&mut tape, &Ctx::eval(&store), x).unwrap();
        extents.push((tape.shape(x)[1], tape.shape(x)[2]));
    }
    assert_eq!(extents, vec![(108, 126), (216, 252), (432, 504), (432, 504)]);
}

fn down_stages(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, widths: &[usize], blocks: usize) -> Vec<UnetDownStage> {
    let mut cin = widths[0];
    widths
        .iter()
        .enumerate()
        .map(|(s, &w)| {
            let stage = UnetDownStage {
                blocks: (0..blocks)
                    .map(|i| {
                        let b = resblock(store, rng, &format!("d{s}.{i}"), cin, w);
                        cin = w;
                        b
                    })
                    .collect(),
            };
            stage
        })
        .collect()
}

#[test]
fn unet_down_stages_halve_extents() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let stages = down_stages(&mut store, &mut rng, &[2, 4, 4], 3);
    let mut tape = Tape::new();
    let mut x = tape.constant(random(&mut rng, &[2, 48, 48]));
    let mut sizes = Vec::new();
    for stage in &stages {
        let (skips, pooled) = stage.forward(&mut tape, &Ctx::eval(&store), x).unwrap();
        assert_eq!(skips.len(), 3);
        assert_eq!(tape.shape(skips[2])[1], 2 * tape.shape(pooled)[1]);
        x = pooled;
        sizes.push(tape.shape(x).to_vec());
    }
    assert_eq!(sizes, vec![vec![2, 24, 24], vec![4, 12, 12], vec![4, 6, 6]]);

    let x = tape.constant(Tensor::zeros(&[2, 6, 5]));
    assert!(matches!(
        stages[0].forward(&mut tape, &Ctx::eval(&store), x),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn unet_down_stage_identity_blocks_pass_input_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::<f64>::new();
    let stages = down_stages(&mut store, &mut rng, &[2], 3);
    randomize(&mut store, &mut rng, 0.5);
    let ids: Vec<_> = stages[0]
        .blocks
        .iter()
        .flat_map(|b| [b.conv2.kernel, b.conv2.bias])
        .collect();
    zero(&mut store, &ids);
    let x0 = random(&mut rng, &[2, 8, 6]);
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let (skips, pooled) = stages[0].forward(&mut tape, &Ctx::eval(&store), x).unwrap();
    for s in skips {
        assert_eq!(tape.value(s), &x0);
    }
    let mut t2 = Tape::new();
    let x = t2.constant(x0);
    let p = t2.avg_pool2(x).unwrap();
    assert_eq!(tape.value(pooled), t2.value(p));
}

#[test]
fn unet_up_stage_concatenates_skips() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::<f64>::new();
    // 4 upsampled channels + 3 skips of 2 channels = 10 input channels.
    let stage = UnetUpStage {
        blocks: vec![resblock(&mut store, &mut rng, "u", 10, 2)],
    };
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[4, 6, 6]));
    let skips: Vec<_> = (0..3).map(|_| tape.constant(random(&mut rng, &[2, 12, 12]))).collect();
    let y = stage.forward(&mut tape, &Ctx::eval(&store), x, &skips).unwrap();
    assert_eq!(tape.shape(y), &[2, 12, 12]);

    let short: Vec<_> = skips[..2].to_vec();
    assert!(stage.forward(&mut tape, &Ctx::eval(&store), x, &short).is_err());
    let bad = tape.constant(Tensor::zeros(&[2, 10, 12]));
    assert!(matches!(
        stage.forward(&mut tape, &Ctx::eval(&store), x, &[skips[0], skips[1], bad]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn unet_up_stage_traces_the_upsampled_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::<f64>::new();
    let rb = resblock(&mut store, &mut rng, "u", 6, 2);
    randomize(&mut store, &mut rng, 0.5);
    zero(&mut store, &[rb.conv2.kernel, rb.conv2.bias]);
    let sc = rb.shortcut.clone().unwrap();
    store.get_mut(sc.kernel).value = Tensor::from_fn(&[2, 6, 1, 1], |k| if k / 6 == k % 6 { 1.0 } else { 0.0 });
    store.get_mut(sc.bias).value.data_mut().fill(0.0);
    let stage = UnetUpStage { blocks: vec![rb] };

    let x0 = random(&mut rng, &[2, 3, 4]);
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let skips: Vec<_> = (0..2).map(|_| tape.constant(Tensor::zeros(&[2, 6, 8]))).collect();
    let y = stage.forward(&mut tape, &Ctx::eval(&store), x, &skips).unwrap();
    assert_close(tape.value(y).data(), x0.resize_bilinear(6, 8).unwrap().data(), 1e-14);
}

#[test]
fn unet_round_trip_preserves_extents() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::<f64>::new();
    let down = down_stages(&mut store, &mut rng, &[2, 4], 2);
    let up = vec![
        UnetUpStage {
            blocks: vec![resblock(&mut store, &mut rng, "u1.0", 4 + 8, 4), resblock(&mut store, &mut rng, "u1.1", 4, 4)],
        },
        UnetUpStage {
            blocks: vec![resblock(&mut store, &mut rng, "u0.0", 4 + 4, 2), resblock(&mut store, &mut rng, "u0.1", 2, 2)],
        },
    ];
    let mut tape = Tape::new();
    let ctx = Ctx::eval(&store);
    let mut x = tape.constant(random(&mut rng, &[2, 16, 24]));
    let mut all = Vec::new();
    for stage in &down {
        let (s, p) = stage.forward(&mut tape, &ctx, x).unwrap();
        all.push(s);
        x = p;
    }
    for (stage, s) in up.iter().zip(all.iter().rev()) {
        x = stage.forward(&mut tape, &ctx, x, s).unwrap();
    }
    assert_eq!(tape.shape(x), &[2, 16, 24]);
}

fn check(store: &mut ParamStore<f64>, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &mut Ctx<'_, f64>, &[downscale_core::Var]) -> downscale_core::Result<downscale_core::Var>) {
    let report = gradcheck(
        store,
        &inputs,
        |tape, store, v| f(tape, &mut Ctx::eval(store), v),
        GradCheckOptions {
            max_probes: 16,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn gradcheck_composite_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..3 {
        let c = 2 * rng.random_range(1..=2);
        let h = 4 * rng.random_range(1..=2);
        let w = 4 * rng.random_range(1..=2);

        let mut store = ParamStore::new();
        let pe = {
            let mut b = Builder::new(&mut store, &mut rng, "patch_embed");
            PatchEmbed::new(&mut b, "pe", 2, c, 3).unwrap()
        };
        let pos = {
            let mut b = Builder::new(&mut store, &mut rng, "pos_embed");
            PositionalEmbedding::new(&mut b, "pos", h * w / 4, 3).unwrap()
        };
        randomize(&mut store, &mut rng, 0.5);
        check(&mut store, vec![random(&mut rng, &[c, h, w])], |tp, ctx, v| {
            let t = pe.forward(tp, ctx, v[0])?;
            pos.forward(tp, ctx, t)
        });

        let mut store = ParamStore::new();
        let blk = block(&mut store, &mut rng, 4, 2);
        randomize(&mut store, &mut rng, 0.5);
        let t = rng.random_range(1..=4);
        check(&mut store, vec![random(&mut rng, &[t, 4])], |tp, ctx, v| blk.forward(tp, ctx, v[0]));

        let mut store = ParamStore::new();
        let stage = DecoderStage {
            upsample: true,
            block: resblock(&mut store, &mut rng, "s", c, 2),
        };
        randomize(&mut store, &mut rng, 0.5);
        check(&mut store, vec![random(&mut rng, &[c, h / 2, w / 2])], |tp, ctx, v| {
            stage.forward(tp, ctx, v[0])
        });

        let mut store = ParamStore::new();
        let down = down_stages(&mut store, &mut rng, &[2], 2);
        let up = UnetUpStage {
            blocks: vec![resblock(&mut store, &mut rng, "u", 2 + 4, 2)],
        };
        randomize(&mut store, &mut rng, 0.5);
        check(&mut store, vec![random(&mut rng, &[2, h, w])], |tp, ctx, v| {
            let (skips, pooled) = down[0].forward(tp, ctx, v[0])?;
            up.forward(tp, ctx, pooled, &skips)
        });
    }
}

#[test]
fn conv_layer_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = ParamStore::<f64>::new();
    let conv = {
        let mut b = Builder::new(&mut store, &mut rng, "head");
        Conv::new(&mut b, "head", 5, 2, 1, Init::Zeros).unwrap()
    };
    assert_eq!(store.get(conv.kernel).value.shape(), &[2, 5, 1, 1]);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[5, 3, 4]));
    let y = conv.forward(&mut tape, &Ctx::eval(&store), x).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 4]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stage_extents_follow_the_arithmetic(hm in 1usize..4, wm in 1usize..4, seed in 0u64..1000) {
        let (h, w) = (8 * hm, 8 * wm);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let dec = DecoderStage { upsample: true, block: resblock(&mut store, &mut rng, "d", 2, 2) };
        let keep = DecoderStage { upsample: false, block: resblock(&mut store, &mut rng, "k", 2, 4) };
        let down = down_stages(&mut store, &mut rng, &[2], 1);
        let up = UnetUpStage { blocks: vec![resblock(&mut store, &mut rng, "u", 4, 2)] };
        let ctx = Ctx::eval(&store);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, &[2, h, w]));
        let y = dec.forward(&mut tape, &ctx, x).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, 2 * h, 2 * w]);
        let y = keep.forward(&mut tape, &ctx, x).unwrap();
        prop_assert_eq!(tape.shape(y), &[4, h, w]);
        let (skips, pooled) = down[0].forward(&mut tape, &ctx, x).unwrap();
        prop_assert_eq!(tape.shape(pooled), &[2, h / 2, w / 2]);
        let y = up.forward(&mut tape, &ctx, pooled, &skips).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, h, w]);
    }
}
