use avtca_core::data::{collate, generate, SyntheticSpec};
use avtca_core::{build_variant, Batch, Graph, Hyper, Mode, ModelConfig, ModelState, RngState, Tensor, VariantId};

fn fixed_batch(n_per_class: usize) -> Batch<f64> {
    let cfg = ModelConfig::tiny();
    let spec =
        SyntheticSpec { classes: cfg.classes, per_class: n_per_class, audio_len: cfg.audio_len, frames: cfg.frames, noise: 0.2, seed: 9 };
    let samples = generate::<f64>(&spec).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    collate(&refs, cfg.classes).unwrap()
}

fn rows(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let width = t.numel() / t.shape()[0];
    let data = order.iter().flat_map(|&i| t.data()[i * width..(i + 1) * width].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// Cross-entropy of `batch` with batch statistics and no dropout.
fn objective(state: &ModelState<f64>, batch: &Batch<f64>) -> f64 {
    let mut rng = RngState::new(0);
    let mut g = Graph::new(&state.store, &mut rng, Mode::Check);
    let (a, v) = (g.input(batch.audio.clone()), g.input(batch.video.clone()));
    let p = state.model.forward(&mut g, a, v).unwrap();
    let l = g.cross_entropy(p, &batch.labels).unwrap();
    g.value(l).item()
}

#[test]
fn loss_falls_every_step_on_a_fixed_batch() {
    let batch = fixed_batch(2);
    let mut state = build_variant::<f64>(VariantId::Full, ModelConfig::tiny(), 3).unwrap();
    let hyper = Hyper { lr: 1e-3, ..Hyper::default() };
    let mut losses = vec![objective(&state, &batch)];
    for _ in 0..20 {
        state.train_step(&batch, &hyper).unwrap();
        losses.push(objective(&state, &batch));
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn eval_forward_commutes_with_batch_order() {
    let batch = fixed_batch(2);
    let n = batch.labels.shape()[0];
    let order: Vec<usize> = (0..n).rev().collect();
    for id in VariantId::ALL {
        let mut state = build_variant::<f64>(id, ModelConfig::tiny(), 4).unwrap();
        // one step so running statistics are no longer at their initial values
        state.train_step(&batch, &Hyper::default()).unwrap();
        let p = state.predict(batch.audio.clone(), batch.video.clone()).unwrap();
        let q = state.predict(rows(&batch.audio, &order), rows(&batch.video, &order)).unwrap();
        assert_eq!(rows(&p, &order), q, "{}", id.as_str());
    }
}

#[test]
fn every_variant_emits_distributions() {
    let batch = fixed_batch(1);
    for id in VariantId::ALL {
        let state = build_variant::<f32>(id, ModelConfig::tiny(), 0).unwrap();
        let p = state.predict(batch.audio.cast(), batch.video.cast()).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
