use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specrecon::forward_model::RgbImage;
use specrecon::gradcheck::check_gradients;
use specrecon::ptnet::*;
use specrecon::tensor::{NormMode, Tape, Tensor};
use specrecon::Error;

fn tiny(bands: usize, h: usize, w: usize) -> PtnetConfig {
    PtnetConfig {
        base_channels: 4,
        ra_inner_channels: 4,
        ..PtnetConfig::new(bands, h, w)
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

#[test]
fn ra_block_shape_sweep_and_gate_range() {
    for c in [4, 8] {
        for h in [6, 10] {
            for w in [6, 10] {
                let tape = Tape::<f64>::new();
                let seed = (c * 100 + h * 10 + w) as u64;
                let x = tape.constant(random(&[2, c, h, w], seed));
                let scaled = |shape: &[usize], s: u64| random(shape, s).map(|v| v - 0.5);
                let p = RaBlockParams {
                    conv1_weight: tape.param(scaled(&[c, c, 3, 3], seed + 1)),
                    conv1_bias: tape.param(scaled(&[c], seed + 2)),
                    conv2_weight: tape.param(scaled(&[c, c, 3, 3], seed + 3)),
                    conv2_bias: tape.param(scaled(&[c], seed + 4)),
                    eca_weight: tape.param(scaled(&[1, 1, 3], seed + 5)),
                };
                let (y, gate) = ra_block(&tape, x, &p).unwrap();
                assert_eq!(tape.shape(y), vec![2, c, h, w]);
                assert_eq!(tape.shape(gate), vec![2, c, 1, 1]);
                assert!(tape.value(gate).to_vec().iter().all(|&g| g > 0.0 && g < 1.0));
            }
        }
    }
}

#[test]
fn shape_contract_over_configs() {
    for (bands, f, h, w) in [(4, 1, 6, 10), (8, 2, 16, 16), (3, 4, 8, 12), (5, 2, 10, 6)] {
        let cfg = PtnetConfig {
            downsample_factor: f,
            ..tiny(bands, h, w)
        };
        let model = PtnetModel::<f64>::new(cfg, 7).unwrap();
        let out = model.predict(&random(&[2, 3, h, w], 1)).unwrap();
        assert_eq!(out.shape(), &[2, bands, h, w]);
    }
}

#[test]
fn residual_identity_with_zero_output_block() {
    let mut model = PtnetModel::<f64>::new(tiny(6, 8, 8), 3).unwrap();
    for name in ["output.conv2.weight", "output.conv2.bias", "fuse.bn.beta"] {
        let i = model.params().position(name).unwrap();
        let shape = model.params().tensors()[i].shape().to_vec();
        model.params_mut().set(i, Tensor::zeros(&shape)).unwrap();
    }
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    let x = tape.constant(random(&[1, 3, 8, 8], 9));
    let mut stats = model.bn_stats().clone();
    let out = model
        .forward_with_stats(&tape, &p, x, NormMode::Train, &mut stats, ForwardOptions::default())
        .unwrap();
    assert!(tape.value(out.output).values_eq(&tape.value(out.stage1)));
}

#[test]
fn every_parameter_receives_gradient() {
    let mut model = PtnetModel::<f64>::new(tiny(4, 8, 8), 11).unwrap();
    let tape = Tape::new();
    let p = model.bind(&tape, true);
    let x = tape.constant(random(&[2, 3, 8, 8], 12));
    let gt = tape.constant(random(&[2, 4, 8, 8], 13));
    let y = model.forward(&tape, &p, x, NormMode::Train).unwrap();
    let d = tape.sub(y, gt).unwrap();
    let loss = tape.sum(tape.mul(d, d).unwrap());
    tape.backward(loss).unwrap();
    for (name, &v) in model.params().names().iter().zip(p.vars()) {
        let g = tape.grad(v).unwrap_or_else(|| panic!("{name}: no gradient"));
        assert!(g.to_vec().iter().any(|&x| x != 0.0), "{name}: all-zero gradient");
    }
}

#[test]
fn ablating_a_branch_only_changes_its_concat_slice() {
    let model = PtnetModel::<f64>::new(tiny(4, 8, 8), 5).unwrap();
    let run = |ablate| {
        let tape = Tape::new();
        let p = model.bind(&tape, false);
        let x = tape.constant(random(&[1, 3, 8, 8], 6));
        let mut stats = model.bn_stats().clone();
        let out = model
            .forward_with_stats(&tape, &p, x, NormMode::Eval, &mut stats, ForwardOptions { ablate })
            .unwrap();
        (tape.value(out.concat), tape.value(out.output))
    };
    let (full, full_out) = run(None);
    let (ablated, ablated_out) = run(Some(Branch::Height));
    let slice = |t: &Tensor<f64>, k: usize| t.narrow(1, 4 * k, 4).unwrap();
    assert!(slice(&full, 0).values_eq(&slice(&ablated, 0)));
    assert!(slice(&full, 2).values_eq(&slice(&ablated, 2)));
    assert!(slice(&ablated, 1).to_vec().iter().all(|&v| v == 0.0));
    assert!(slice(&full, 1).to_vec().iter().any(|&v| v != 0.0));
    assert!(!full_out.values_eq(&ablated_out));
}

#[test]
fn full_model_gradient_check() {
    let cfg = tiny(4, 8, 8);
    let model = PtnetModel::<f64>::new(cfg, 21).unwrap();
    let rgb = random(&[1, 3, 8, 8], 22);
    let direction = random(&[1, 4, 8, 8], 23).map(|v| v - 0.5);
    let mut inputs: Vec<Tensor<f64>> = model.params().tensors().to_vec();
    inputs.push(rgb);
    let report = check_gradients(&inputs, 1e-5, |tape, vars| {
        let (params, x) = vars.split_at(vars.len() - 1);
        let bound = model.bind_vars(params.to_vec());
        let mut stats = model.bn_stats().clone();
        let out = model.forward_with_stats(tape, &bound, x[0], NormMode::Train, &mut stats, ForwardOptions::default())?;
        let r = tape.constant(direction.clone());
        Ok(tape.sum(tape.mul(out.output, r)?))
    })
    .unwrap();
    assert!(
        report.max_rel_error < 1e-3,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ptn");
    let mut model = PtnetModel::<f32>::new(tiny(4, 8, 8), 31).unwrap();
    model.bn_stats_mut().mean = vec![0.25; 12];
    save_weights(&model, &path).unwrap();

    let back: PtnetModel<f32> = load_weights(&path, model.config()).unwrap();
    for ((na, a), (nb, b)) in model.params().iter().zip(back.params().iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.to_vec(), b.to_vec());
    }
    assert_eq!(back.bn_stats().mean, vec![0.25; 12]);

    let wrong = tiny(5, 8, 8);
    match load_weights::<f32>(&path, &wrong) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("bands"), "{msg}"),
        other => panic!("expected checkpoint error, got {other:?}"),
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format { .. })));
}

#[test]
fn identical_configs_have_identical_counts() {
    let a = PtnetModel::<f32>::new(PtnetConfig::full_scale(), 1).unwrap();
    let b = PtnetModel::<f32>::new(PtnetConfig::full_scale(), 2).unwrap();
    assert_eq!(a.parameter_count(), b.parameter_count());
    let brute: usize = a.shape_dump().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(a.parameter_count(), brute);
}

#[test]
fn tiled_reconstruction_matches_direct_prediction() {
    let model = PtnetModel::<f64>::new(tiny(4, 8, 8), 41).unwrap();
    let wl = vec![450.0, 500.0, 550.0, 600.0];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let img = RgbImage::new(16, 8, (0..3 * 16 * 8).map(|_| rng.random::<f32>()).collect()).unwrap();
    let cube = reconstruct_image(&model, &img, &wl).unwrap();
    assert_eq!((cube.width(), cube.height(), cube.bands()), (16, 8, 4));
    let right = img.crop(8, 0, 8, 8).unwrap();
    let direct = model.predict(&rgb_batch::<f64>(&[&right]).unwrap()).unwrap();
    for b in 0..4 {
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(cube.get(x + 8, y, b), direct.at(&[0, b, y, x]) as f32);
            }
        }
    }

    let odd = img.crop(0, 0, 13, 7).unwrap();
    let cube = reconstruct_image(&model, &odd, &wl).unwrap();
    assert_eq!((cube.width(), cube.height()), (13, 7));
}
