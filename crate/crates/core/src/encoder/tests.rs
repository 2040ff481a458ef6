use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{evaluate_with_gradients, finite_difference_gradient, gradient_mismatch};

fn noise_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(size, size, (0..size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn patchify_shapes_and_contents() {
    let t = patchify(&noise_image(32, 0), 8).unwrap();
    assert_eq!(t.shape(), &[16, 64]);

    let img = noise_image(8, 1);
    let t = patchify(&img, 8).unwrap();
    assert_eq!(t.shape(), &[1, 64]);
    assert_eq!(t.data(), img.pixels());

    let t = patchify(&Image::filled(16, 16, 0.3), 8).unwrap();
    assert!(t.data().iter().all(|&v| v == 0.3));

    let err = patchify(&Image::filled(12, 16, 0.0), 8).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("12") && msg.contains('8'), "{msg}");
}

#[test]
fn patchify_orders_patches_row_major() {
    let mut img = Image::filled(4, 4, 0.0);
    img.set(2, 0, 1.0); // patch (1, 0)
    img.set(1, 3, 2.0); // patch (0, 1)
    let t = patchify(&img, 2).unwrap();
    assert_eq!(t.get(&[1, 0]).unwrap(), 1.0);
    assert_eq!(t.get(&[2, 3]).unwrap(), 2.0);
}

fn table(grid: (usize, usize), d: usize, mut f: impl FnMut(usize, usize) -> f32) -> PositionalEmbedding {
    let data = (0..grid.0 * grid.1 * d).map(|i| f(i / d, i % d)).collect();
    PositionalEmbedding::new(grid.0, grid.1, Array::new(vec![grid.0 * grid.1, d], data).unwrap()).unwrap()
}

#[test]
fn resize_to_same_grid_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pe = table((4, 3), 5, |_, _| rng.random::<f32>());
    let out = resize_positional_embeddings(&pe, (4, 3)).unwrap();
    assert_eq!(out.table.max_abs_diff(&pe.table), 0.0);
}

#[test]
fn resize_preserves_constants() {
    let pe = table((2, 3), 4, |_, c| c as f32 * 0.5 - 1.0);
    for grid in [(1, 1), (5, 5), (7, 2)] {
        let out = resize_positional_embeddings(&pe, grid).unwrap();
        for row in out.table.data().chunks(4) {
            for (c, &v) in row.iter().enumerate() {
                assert!((v - (c as f32 * 0.5 - 1.0)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn resize_two_by_two_matches_scalar_bilinear() {
    // Cells (0,0)=0, (1,0)=1, (0,1)=2, (1,1)=3.
    let pe = table((2, 2), 1, |cell, _| cell as f32);
    let out = resize_positional_embeddings(&pe, (4, 4)).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            let (u, v) = (x as f64 / 3.0, y as f64 / 3.0);
            let want = (1.0 - u) * (1.0 - v) * 0.0 + u * (1.0 - v) * 1.0 + (1.0 - u) * v * 2.0 + u * v * 3.0;
            let got = out.table.data()[y * 4 + x] as f64;
            assert!((got - want).abs() < 1e-6, "({x},{y}) {got} vs {want}");
        }
    }
}

fn encoder(config: EncoderConfig, native: usize, seed: u64) -> Encoder {
    Encoder::init(config, native, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn encode_shape_contract_across_resolutions() {
    let enc = encoder(EncoderConfig::default(), 32, 0);
    let z = enc.encode(&noise_image(32, 1)).unwrap();
    assert_eq!((z.width, z.height, z.channels), (4, 4, 32));
    let z = enc.encode(&noise_image(64, 1)).unwrap();
    assert_eq!((z.width, z.height, z.channels), (8, 8, 32));
    for &r in &enc.config.resolutions {
        let z = enc.encode(&noise_image(r, 2)).unwrap();
        assert_eq!(z.width * z.height, (r / 8) * (r / 8));
    }
}

#[test]
fn encode_is_deterministic() {
    let enc = encoder(EncoderConfig::default(), 48, 5);
    let img = noise_image(48, 9);
    let a = enc.encode(&img).unwrap();
    let b = enc.encode(&img.clone()).unwrap();
    let bits = |z: &FeatureGrid| z.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = EncoderConfig::default();
    c.heads = 5;
    assert!(c.validate().is_err());
    let mut c = EncoderConfig::default();
    c.resolutions = vec![30];
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = EncoderConfig::default();
    c.depth = 0;
    assert!(c.validate().is_err());
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        patch_size: 2,
        embed_dim: 4,
        depth: 1,
        heads: 2,
        mlp_ratio: 1.0,
        resolutions: vec![4, 6],
    }
}

#[test]
fn positional_table_receives_gradient() {
    let enc = encoder(EncoderConfig::default(), 32, 11);
    for size in [32, 48] {
        let img = noise_image(size, 4);
        let tokens = patchify(&img, 8).unwrap();
        let mut eg = enc.graph((size / 8, size / 8));
        let sq = eg.graph.mul(eg.output, eg.output);
        let w = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let n = (size / 8) * (size / 8) * 32;
            Array::new(vec![n / 32, 32], (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
        };
        let w = eg.graph.constant(w);
        let y = eg.graph.mul(sq, w);
        let loss = eg.graph.sum_all(y, 2);
        let (_, grads) = evaluate_with_gradients(&eg.graph, &enc.bindings(&tokens), loss).unwrap();
        let g = &grads[POS_EMBED];
        assert_eq!(g.shape(), enc.params[POS_EMBED].shape());
        assert!(g.data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let enc = encoder(tiny_config(), 4, 21);
    let params: BTreeMap<String, Array<f64>> =
        enc.params.iter().map(|(k, v)| (k.clone(), v.cast::<f64>().map(|x| x * 25.0))).collect();
    let img = noise_image(6, 8);
    let tokens = patchify(&img, 2).unwrap().cast::<f64>();
    // Runs on a 3x3 grid while the table lives on 2x2, so the resize is in the path.
    let mut eg = EncoderGraph::<f64>::build(&enc.config, enc.pos_grid, (3, 3));
    let sm = eg.graph.softmax(eg.output, 1);
    let w = eg.graph.constant(
        Array::from_f64(vec![9, 4], &(0..36).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4).collect::<Vec<_>>()).unwrap(),
    );
    let y = eg.graph.mul(sm, w);
    let loss = eg.graph.sum_all(y, 2);
    fn bind_with<'a>(
        params: &'a BTreeMap<String, Array<f64>>,
        tokens: &'a Array<f64>,
        over: Option<(&'a str, &'a Array<f64>)>,
    ) -> Bindings<'a, f64> {
        let mut b: Bindings<f64> = params.iter().map(|(k, v)| (k.as_str(), v)).collect();
        b.insert(TOKENS, tokens);
        if let Some((k, v)) = over {
            b.insert(k, v);
        }
        b
    }
    let (_, grads) = evaluate_with_gradients(&eg.graph, &bind_with(&params, &tokens, None), loss).unwrap();
    for name in [POS_EMBED, PATCH_EMBED_W, "blocks.0.attn.q.weight", "blocks.0.mlp.fc1.weight", "norm.gamma"] {
        let fd = finite_difference_gradient(
            |p| eg.graph.forward(&bind_with(&params, &tokens, Some((name, p))))?.value(loss).item(),
            &params[name],
            1e-4,
        )
        .unwrap();
        let worst = gradient_mismatch(&grads[name], &fd, 1e-4, 1e-6);
        assert!(worst <= 1.0, "{name}: {worst}");
    }
}

#[test]
fn attention_is_permutation_equivariant_without_positions() {
    let mut cfg = EncoderConfig::default();
    cfg.depth = 1;
    cfg.mlp_ratio = 0.0;
    let mut enc = encoder(cfg, 32, 2);
    let d = enc.config.embed_dim;
    let row: Vec<f32> = (0..d).map(|c| c as f32 * 0.01).collect();
    let constant: Vec<f32> = row.iter().cycle().take(16 * d).copied().collect();
    enc.params.insert(POS_EMBED.into(), Array::new(vec![16, d], constant).unwrap());

    let img = noise_image(32, 6);
    let mut swapped = img.clone();
    // swap patch (0,0) with patch (2,1)
    for py in 0..8 {
        for px in 0..8 {
            let a = img.get(px, py);
            let b = img.get(16 + px, 8 + py);
            swapped.set(px, py, b);
            swapped.set(16 + px, 8 + py, a);
        }
    }
    let z = enc.encode(&img).unwrap();
    let zs = enc.encode(&swapped).unwrap();
    for c in 0..d {
        assert!((z.at(0, 0, c) - zs.at(2, 1, c)).abs() < 1e-5);
        assert!((z.at(2, 1, c) - zs.at(0, 0, c)).abs() < 1e-5);
        assert!((z.at(3, 3, c) - zs.at(3, 3, c)).abs() < 1e-5);
    }
}

#[test]
fn positional_grid_move_keeps_shapes_consistent() {
    let mut enc = encoder(EncoderConfig::default(), 32, 0);
    enc.set_positional_grid((8, 8)).unwrap();
    assert_eq!(enc.params[POS_EMBED].shape(), &[64, 32]);
    let z = enc.encode(&noise_image(48, 0)).unwrap();
    assert_eq!((z.width, z.height), (6, 6));
}
