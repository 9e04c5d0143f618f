//! Checks against independent reference computations.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadseg::augment::{apply_policy_recorded, warp_mask, Interpolation};
use roadseg::eval::{render_matrix_image, MATRIX_CELL_PX};
use roadseg::loss::{loss_and_grad, softmax};
use roadseg::model::TrainingMeta;
use roadseg::nn::BlockKind;
use roadseg::schema::POTHOLE;
use roadseg::synth::{Feature, Surface};
use roadseg::*;

fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32, classes: u8) -> Mask {
    let data = (0..w * h).map(|_| rng.random_range(0..classes)).collect();
    Mask::from_vec(w, h, data).unwrap()
}

#[test]
fn confusion_matches_hand_count() {
    let truth = Mask::from_rows(&[[0u8, 0], [1, 1]]).unwrap();
    let pred = Mask::from_rows(&[[0u8, 1], [1, 1]]).unwrap();
    let m = accumulate_confusion(&[pred.as_slice()], &[truth.as_slice()], 2).unwrap();
    assert_eq!(m.rows(), vec![vec![1, 1], vec![0, 2]]);
}

#[test]
fn metrics_arithmetic() {
    let m = ConfusionMatrix::from_rows(&[vec![8, 2], vec![1, 9]]).unwrap();
    let r = derive_metrics(&m).unwrap();
    assert_eq!(r.per_class_accuracy, vec![Some(0.8), Some(0.9)]);
    assert_eq!(r.total_accuracy, 17.0 / 20.0);
}

#[test]
fn class_distribution_matches_pixel_loop() {
    let schema = LabelSchema::road();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let corpus: Vec<SegmentationSample> = (0..10)
        .map(|i| {
            let mask = random_mask(&mut rng, 8, 8, 12);
            SegmentationSample::new(RgbImage::new(8, 8), mask, format!("m{i}"), &schema).unwrap()
        })
        .collect();
    let mut counts = [0u64; 12];
    for s in &corpus {
        for y in 0..8 {
            for x in 0..8 {
                counts[s.mask.get(x, y) as usize] += 1;
            }
        }
    }
    let d = compute_class_distribution(&corpus, &schema).unwrap();
    assert_eq!(d.pixels, counts.to_vec());
    for (f, c) in d.fractions.iter().zip(counts) {
        assert_eq!(*f, c as f64 / 640.0);
    }
}

#[test]
fn planted_defects_are_all_reported() {
    let schema = LabelSchema::road();
    let mut corpus = Vec::new();
    let mut planted = 0;
    for i in 0..12u32 {
        let mut mask = Mask::new(6, 4, 1);
        let mut image = RgbImage::new(6, 4);
        match i % 4 {
            1 => {
                mask.set(2, 2, 40);
                planted += 1;
            }
            2 => {
                image = RgbImage::new(5, 4);
                planted += 1;
            }
            _ => {}
        }
        corpus.push(SegmentationSample {
            image,
            mask,
            source_id: format!("s{i}"),
        });
    }
    assert_eq!(validate_corpus(&corpus, &schema).len(), planted);
}

#[test]
fn split_sizes() {
    let s = split_corpus(701, 0.2, 1).unwrap();
    assert_eq!((s.validation.len(), s.train.len()), (140, 561));
    let mut all: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..701).collect::<Vec<_>>());
}

fn components(mask: &Mask, class: u8) -> usize {
    let (w, h) = mask.dimensions();
    let mut seen = vec![false; (w * h) as usize];
    let mut count = 0;
    for start in 0..(w * h) {
        if seen[start as usize] || mask.as_slice()[start as usize] != class {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start as usize] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let q = (ny as u32 * w + nx as u32) as usize;
                if !seen[q] && mask.as_slice()[q] == class {
                    seen[q] = true;
                    stack.push(q as u32);
                }
            }
        }
    }
    count
}

#[test]
fn three_potholes_three_components() {
    for seed in 0..10 {
        let recipe =
            SceneRecipe::new(96, 64, Surface::Asphalt, seed).with_features(Feature::Pothole, 3);
        let scene = generate_scene(&recipe).unwrap();
        assert_eq!(components(&scene.mask, POTHOLE), 3, "seed {seed}");
    }
}

#[test]
fn scene_generation_is_deterministic() {
    let recipe = SceneRecipe::new(64, 64, Surface::Paved, 4)
        .with_features(Feature::Marking, 2)
        .with_features(Feature::Pothole, 1);
    let a = generate_scene(&recipe).unwrap();
    let b = generate_scene(&recipe).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.image, b.image);
}

#[test]
fn flip_preserves_histogram() {
    let schema = LabelSchema::road();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mask = random_mask(&mut rng, 7, 5, 12);
        let hist = mask.histogram(12);
        let s = SegmentationSample::new(RgbImage::new(7, 5), mask, "x", &schema).unwrap();
        assert_eq!(horizontal_flip(&s).mask.histogram(12), hist);
    }
}

#[test]
fn homography_matches_inverse_mapping_oracle() {
    let grid = Mask::from_vec(4, 4, (0..16).collect()).unwrap();
    // Source quad for the output frame: a sheared, shrunk square.
    let frame = [(0.0, 0.0), (3.0, 0.0), (3.0, 3.0), (0.0, 3.0)];
    let quad = [(0.4, 0.2), (3.2, -0.3), (2.6, 2.9), (-0.2, 3.4)];
    let h = Homography::from_correspondences(frame, quad).unwrap();
    for (f, q) in frame.iter().zip(&quad) {
        let (u, v) = h.apply(f.0, f.1);
        assert!((u - q.0).abs() < 1e-9 && (v - q.1).abs() < 1e-9);
    }
    let warped = warp_mask(&grid, &h);
    // Project by hand, then nearest source index; outside the source is background.
    let m = &h.0;
    for y in 0..4u32 {
        for x in 0..4u32 {
            let (xf, yf) = (x as f64, y as f64);
            let den = m[6] * xf + m[7] * yf + m[8];
            let sx = (m[0] * xf + m[1] * yf + m[2]) / den;
            let sy = (m[3] * xf + m[4] * yf + m[5]) / den;
            let (ix, iy) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            let expected = if (0.0..4.0).contains(&ix) && (0.0..4.0).contains(&iy) {
                (iy as u8) * 4 + ix as u8
            } else {
                0
            };
            assert_eq!(warped.get(x, y), expected, "({x},{y})");
        }
    }
}

#[test]
fn homography_matches_projective_basis_construction() {
    // Textbook construction: map the unit square's corners to a quad via
    // the adjugate of the basis matrices, compared against the solver.
    fn basis(p: [(f64, f64); 4]) -> [[f64; 3]; 3] {
        let m = [
            [p[0].0, p[1].0, p[2].0],
            [p[0].1, p[1].1, p[2].1],
            [1.0, 1.0, 1.0],
        ];
        let inv = invert3(m);
        let v = [p[3].0, p[3].1, 1.0];
        let l: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| inv[i][j] * v[j]).sum())
            .collect();
        let mut out = m;
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] *= l[c];
            }
        }
        out
    }
    fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = ((j + 1) % 3, (j + 2) % 3);
                let (c, d) = ((i + 1) % 3, (i + 2) % 3);
                r[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
            }
        }
        r
    }
    let from = [(0.0, 0.0), (9.0, 0.0), (9.0, 5.0), (0.0, 5.0)];
    let to = [(1.0, -0.5), (8.0, 0.7), (10.0, 6.0), (-1.0, 4.0)];
    let a = basis(from);
    let b = basis(to);
    let ai = invert3(a);
    let solved = Homography::from_correspondences(from, to).unwrap();
    for &(x, y) in &[(2.0, 3.0), (7.5, 1.25), (4.0, 4.0)] {
        let p = [x, y, 1.0];
        let q: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| ai[i][j] * p[j]).sum())
            .collect();
        let r: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| b[i][j] * q[j]).sum())
            .collect();
        let (u, v) = solved.apply(x, y);
        assert!((u - r[0] / r[2]).abs() < 1e-9);
        assert!((v - r[1] / r[2]).abs() < 1e-9);
    }
}

#[test]
fn joint_transform_matches_id_rendering() {
    let schema = LabelSchema::road();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for draw in 0..20 {
        let mask = random_mask(&mut rng, 24, 16, 12);
        let mut image = RgbImage::new(24, 16);
        for (x, y, p) in image.enumerate_pixels_mut() {
            let v = mask.get(x, y) * 20;
            *p = Rgb([v, v, v]);
        }
        let sample = SegmentationSample::new(image.clone(), mask.clone(), "j", &schema).unwrap();
        let policy = AugmentationPolicy {
            flip_probability: 0.5,
            warp_magnitude: 0.3,
            seed: 9,
        };
        let (out, geometry) = apply_policy_recorded(&sample, &policy, draw).unwrap();
        let rendered = geometry.apply_to_image(&image, Interpolation::Nearest);
        for (x, y, p) in rendered.enumerate_pixels() {
            assert_eq!(p.0[0], out.mask.get(x, y) * 20);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = (0..2 * 5 * 3 * 4)
        .map(|_| rng.random_range(-20.0..20.0))
        .collect();
    let p = softmax(&Tensor::from_vec([2, 5, 3, 4], data).unwrap());
    for n in 0..2 {
        for i in 0..12 {
            let s: f64 = (0..5).map(|c| p.data()[n * 60 + c * 12 + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn two_pixel_loss_closed_form() {
    // Layout [N=1, C=2, H=1, W=2]: pixel 0 logits (2,0), pixel 1 logits (0,2).
    let logits = Tensor::from_vec([1, 2, 1, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
    let (loss, _) = loss_and_grad(&logits, &[0, 1], &[1.0, 3.0]).unwrap();
    let nll = (1.0 + (-2.0f64).exp()).ln();
    assert!((loss - (1.0 * nll + 3.0 * nll) / 4.0).abs() < 1e-12);
}

#[test]
fn class_weight_hand_example() {
    let d = ClassDistribution::from_fractions(vec![0.5, 0.25, 0.25]).unwrap();
    let w = compute_class_weights(&d, WeightScheme::InverseFrequency);
    for (a, b) in w.weights.iter().zip([0.6, 1.2, 1.2]) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn traverse_count(config: &ModelConfig) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k;
    let conv_bn = |i, o, k| conv(i, o, k) + 2 * o;
    let mut total = conv_bn(3, config.stem_channels, 3);
    let mut levels = vec![config.stem_channels];
    let mut c_in = config.stem_channels;
    for (&c, &n) in config.stage_channels.iter().zip(&config.blocks_per_stage) {
        for b in 0..n {
            let i = if b == 0 { c_in } else { c };
            total += match config.encoder_variant.block_kind() {
                BlockKind::Basic => conv_bn(i, c, 3) + conv_bn(c, c, 3),
                BlockKind::Bottleneck => {
                    conv_bn(i, c / 4, 1) + conv_bn(c / 4, c / 4, 3) + conv_bn(c / 4, c, 1)
                }
            };
            if b == 0 {
                total += conv_bn(i, c, 1);
            }
        }
        levels.push(c);
        c_in = c;
    }
    let mut up = c_in;
    for level in (0..config.stage_channels.len()).rev() {
        let skip = levels[level];
        total += conv_bn(up + skip, skip, 3) + conv_bn(skip, skip, 3);
        up = skip;
    }
    total + conv(config.stem_channels, config.num_classes, 1) + config.num_classes
}

#[test]
fn parameter_count_matches_traversal() {
    for config in [
        ModelConfig::tiny(12),
        ModelConfig::r34_like(12),
        ModelConfig::r50_like(12),
    ] {
        let m = Model::build(&config, 0).unwrap();
        assert_eq!(
            m.parameter_count(),
            traverse_count(&config),
            "{:?}",
            config.encoder_variant
        );
    }
    assert!(traverse_count(&ModelConfig::tiny(12)) <= 1_000_000);
}

#[test]
fn non_square_input_keeps_resolution() {
    let m = Model::build(&ModelConfig::tiny(12), 1).unwrap();
    let x = Tensor::zeros([1, 3, 64, 96]);
    assert_eq!(m.forward(&x).unwrap().shape(), [1, 12, 64, 96]);
    assert_eq!(
        m.forward_any(&Tensor::zeros([1, 3, 30, 45]))
            .unwrap()
            .shape(),
        [1, 12, 30, 45]
    );
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let mut m = Model::build(&ModelConfig::tiny(12), 1).unwrap();
    randomise_head(&mut m, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let item: Vec<f64> = (0..3 * 16 * 16)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x = Tensor::from_vec([2, 3, 16, 16], [item.clone(), item].concat()).unwrap();
    let y = m.forward(&x).unwrap();
    assert_eq!(y.item(0), y.item(1));
}

fn randomise_head(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in model.params_mut().entries_mut() {
        if e.name.starts_with("head") {
            e.value
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
}

/// Loss of a training-mode forward pass (batch statistics, no state change).
fn train_loss(model: &Model, x: &Tensor, targets: &[u8], weights: &[f64]) -> f64 {
    let (logits, _) = model.forward_train(x).unwrap();
    loss_and_grad(&logits, targets, weights).unwrap().0
}

#[test]
fn model_gradient_matches_finite_differences() {
    let mut model = Model::build(&ModelConfig::tiny(12), 21).unwrap();
    randomise_head(&mut model, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Tensor::from_vec(
        [2, 3, 16, 16],
        (0..2 * 3 * 256)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let targets: Vec<u8> = (0..2 * 256).map(|_| rng.random_range(0..12)).collect();
    let weights: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..2.0)).collect();

    let (logits, tape) = model.forward_train(&x).unwrap();
    let (_, grad) = loss_and_grad(&logits, &targets, &weights).unwrap();
    let mut trained = Model::build(&ModelConfig::tiny(12), 21).unwrap();
    // Backward also moves running statistics, so differentiate on a copy.
    for (dst, src) in trained
        .params_mut()
        .entries_mut()
        .iter_mut()
        .zip(model.params().entries())
    {
        dst.value.clone_from(&src.value);
    }
    trained.params_mut().zero_grad();
    trained.backward(tape, &grad);

    let trainable: Vec<usize> = (0..model.params().entries().len())
        .filter(|&i| model.params().entries()[i].trainable)
        .collect();
    let eps = 1e-5;
    let mut checked = 0;
    while checked < 10 {
        let e = trainable[rng.random_range(0..trainable.len())];
        let k = rng.random_range(0..model.params().entries()[e].value.len());
        let analytic = trained.params().entries()[e].grad[k];
        let original = model.params().entries()[e].value[k];
        model.params_mut().entries_mut()[e].value[k] = original + eps;
        let plus = train_loss(&model, &x, &targets, &weights);
        model.params_mut().entries_mut()[e].value[k] = original - eps;
        let minus = train_loss(&model, &x, &targets, &weights);
        model.params_mut().entries_mut()[e].value[k] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        assert!(
            rel <= 1e-3,
            "{} [{k}]: analytic {analytic} numeric {numeric}",
            model.params().entries()[e].name
        );
        checked += 1;
    }
}

fn meta() -> TrainingMeta {
    TrainingMeta {
        stage_name: "t".into(),
        epochs_completed: 1,
        final_train_loss: Some(0.5),
        final_validation_loss: None,
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = Model::build(&ModelConfig::tiny(12), 5).unwrap();
    randomise_head(&mut model, 6);
    let norm = Normalization {
        mean: [0.1, 0.2, 0.3],
        std: [0.9, 0.8, 1.0 / 3.0],
    };
    let ck = Checkpoint::capture(&model, norm, &LabelSchema::road(), meta());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let fresh = Model::build(&ModelConfig::tiny(12), 99).unwrap();
    let moved = transfer_parameters(&loaded, fresh).unwrap();
    for (a, b) in moved
        .params()
        .entries()
        .iter()
        .zip(model.params().entries())
    {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
}

#[test]
fn transfer_rejects_other_architecture() {
    let model = Model::build(&ModelConfig::tiny(12), 5).unwrap();
    let ck = Checkpoint::capture(
        &model,
        Normalization::default(),
        &LabelSchema::road(),
        meta(),
    );
    let other = Model::build(&ModelConfig::tiny(5), 5).unwrap();
    assert!(matches!(
        transfer_parameters(&ck, other),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn matrix_image_decodes_to_normalized_values() {
    let m = ConfusionMatrix::from_rows(&[vec![5, 3, 2], vec![0, 0, 0], vec![1, 1, 8]]).unwrap();
    let normalized = row_normalize(&m);
    let img = render_matrix_image(&normalized);
    assert_eq!(img.dimensions(), (3 * MATRIX_CELL_PX, 3 * MATRIX_CELL_PX));
    for (t, row) in normalized.iter().enumerate() {
        for (p, v) in row.iter().enumerate() {
            let cx = p as u32 * MATRIX_CELL_PX + MATRIX_CELL_PX / 2;
            let cy = t as u32 * MATRIX_CELL_PX + MATRIX_CELL_PX / 2;
            let decoded = img.get_pixel(cx, cy).0[0] as f64 / 255.0;
            assert!((decoded - v).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn corpus_generation_is_seed_deterministic() {
    let spec = CorpusSpec::new(6, 48, 32, &roadseg::synth::ROAD_PROFILE, 3);
    let a = generate_corpus(&spec).unwrap();
    let b = generate_corpus(&spec).unwrap();
    assert!(a
        .iter()
        .zip(&b)
        .all(|(x, y)| x.image == y.image && x.mask == y.mask));
    let other = generate_corpus(&CorpusSpec { seed: 4, ..spec }).unwrap();
    assert!(a.iter().zip(&other).any(|(x, y)| x.mask != y.mask));
}
