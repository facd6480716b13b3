use mtrnet::model::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv_params(cin: usize, cout: usize, norm: bool) -> usize {
    16 * cin * cout + cout + if norm { 2 * cout } else { 0 }
}

#[test]
fn generator_parameter_count_matches_closed_form() {
    let enc = [64, 128, 256, 512, 512, 512, 512];
    let mut expected = 0;
    let mut cin = 4;
    for &c in &enc {
        expected += conv_params(cin, c, true);
        cin = c;
    }
    let dec: Vec<usize> = enc.iter().rev().copied().collect();
    for (j, &c) in dec.iter().enumerate() {
        let skip = if j + 1 < enc.len() { enc[enc.len() - 2 - j] } else { 4 };
        expected += conv_params(cin, c, true) + conv_params(c + skip, c, true);
        cin = c;
    }
    expected += conv_params(cin, 3, false);
    let g = Generator::<f32>::new(GeneratorSpec::default(), 0).unwrap();
    assert_eq!(g.network().parameter_count(), expected);
}

#[test]
fn discriminator_parameter_count_matches_closed_form() {
    let enc = [64, 128, 256, 512];
    let mut expected = 0;
    let mut cin = 7;
    for &c in &enc {
        expected += conv_params(cin, c, true);
        cin = c;
    }
    for &c in enc.iter().rev() {
        expected += conv_params(cin, c, true);
        cin = c;
    }
    expected += conv_params(cin, 1, false);
    let d = Discriminator::<f32>::new(DiscriminatorSpec::default(), 0).unwrap();
    assert_eq!(d.network().parameter_count(), expected);
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = Generator::<f32>::new(GeneratorSpec::with_width(0.125), 5).unwrap();
    let b = Generator::<f32>::new(GeneratorSpec::with_width(0.125), 5).unwrap();
    assert_eq!(a, b);
    let c = Generator::<f32>::new(GeneratorSpec::with_width(0.125), 6).unwrap();
    assert_ne!(a, c);
}

fn input(spec: &GeneratorSpec, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.input_size;
    Tensor::from_vec([1, 4, s, s], (0..4 * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Training-mode forward pass rebuilt from the layers, with an optional
/// skip tensor replaced by zeros.
fn manual_forward(g: &Generator<f32>, x: &Tensor<f32>, zero_skip: Option<usize>) -> Tensor<f32> {
    let layers = g.network().layers();
    let depth = g.spec().depth();
    let mut skips = vec![x.clone()];
    let mut h = x.clone();
    for layer in &layers[..depth] {
        h = layer.forward_train(h).0;
        skips.push(h.clone());
    }
    for j in 0..depth {
        let up = layers[depth + 2 * j].forward_train(h).0;
        let level = depth - 1 - j;
        let mut skip = skips[level].clone();
        if zero_skip == Some(level) {
            skip = skip.map(|_| 0.0);
        }
        h = layers[depth + 2 * j + 1].forward_train(Tensor::concat_channels(&up, &skip)).0;
    }
    layers[3 * depth].forward_train(h).0
}

fn max_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max)
}

#[test]
fn skip_connections_are_wired_and_used() {
    let spec = GeneratorSpec::with_width(0.125);
    let g = Generator::<f32>::new(spec.clone(), 1).unwrap();
    let x = input(&spec, 2);
    let y = g.forward_train(&x).unwrap().0;
    assert_eq!(y.shape(), [1, 3, 256, 256]);
    assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(max_diff(&y, &manual_forward(&g, &x, None)) < 1e-6);

    for level in [0, 3, 6] {
        assert!(max_diff(&y, &manual_forward(&g, &x, Some(level))) > 1e-6, "skip {level} has no effect");
        // zero the fuse weights that read this skip
        let j = spec.depth() - 1 - level;
        let mut cut = g.clone();
        let fuse = &mut cut.network_mut().layers_mut()[spec.depth() + 2 * j + 1];
        let (cin, cout) = (fuse.in_channels, fuse.spec.out_channels);
        let up = spec.decoder_widths()[j];
        for tap in 0..16 {
            for c in up..cin {
                for o in 0..cout {
                    fuse.weight[(tap * cin + c) * cout + o] = 0.0;
                }
            }
        }
        let z = cut.forward_train(&x).unwrap().0;
        assert!(max_diff(&y, &z) > 1e-6, "fuse weights of skip {level} have no effect");
        assert!(max_diff(&z, &manual_forward(&cut, &x, Some(level))) < 1e-6);
    }
}

#[test]
fn discriminator_emits_per_pixel_logits() {
    let d = Discriminator::<f32>::new(DiscriminatorSpec::with_width(0.125), 3).unwrap();
    let z = Tensor::<f32>::filled([2, 7, 256, 256], 0.5);
    assert_eq!(d.forward(&z).unwrap().shape(), [2, 1, 256, 256]);
    assert!(d.forward(&Tensor::<f32>::filled([1, 6, 256, 256], 0.5)).is_err());
}
