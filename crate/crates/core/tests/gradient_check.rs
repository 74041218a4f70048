//! Central finite differences against the hand-written backward passes,
//! in 64-bit arithmetic on micro-configurations.

use interpol_core::nn::{ModelConfig, ModelKind, Packed, Transformer};
use interpol_core::seeded_rng;
use rand::Rng;

fn micro(kind: ModelKind, seed: u64) -> Transformer<f64> {
    let cfg = ModelConfig { layers: 1, heads: 2, width: 8, ff_width: 16, context: 16, vocab: 20 };
    let mut rng = seeded_rng(seed);
    let mut model = Transformer::<f64>::new(kind, cfg, &mut rng).unwrap();
    // wake up every parameter, including the zero-initialised head
    for p in model.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    model
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn numeric_grad(model: &Transformer<f64>, loss: impl Fn(&Transformer<f64>) -> f64) -> Vec<f64> {
    let eps = 1e-5;
    let mut probe = model.clone();
    (0..model.num_params())
        .map(|i| {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + eps;
            let up = loss(&probe);
            probe.params_mut()[i] = orig - eps;
            let down = loss(&probe);
            probe.params_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

#[test]
fn generator_gradients_match_finite_differences() {
    let model = micro(ModelKind::Generator, 1);
    let batch = Packed::new([&[1u32, 7, 3, 9, 12, 4][..], &[1, 5, 5, 3, 19, 4, 2][..]]);
    let targets: Vec<(usize, u32)> = vec![(2, 9), (3, 12), (4, 4), (9, 19), (10, 4), (11, 2)];
    let scale = 1.0 / targets.len() as f64;
    let loss = |m: &Transformer<f64>| {
        let acts = m.forward(&batch).unwrap();
        m.lm_loss(&acts, &targets, scale, None) * scale
    };
    let mut analytic = vec![0.0; model.num_params()];
    let acts = model.forward(&batch).unwrap();
    model.lm_loss(&acts, &targets, scale, Some(&mut analytic));
    let err = max_relative_error(&analytic, &numeric_grad(&model, loss));
    println!("generator max relative error {err:e}");
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn ranker_gradients_match_finite_differences() {
    let model = micro(ModelKind::Ranker, 2);
    let batch = Packed::new([&[1u32, 7, 3, 9, 2][..], &[1, 5, 3, 19, 3, 8, 2][..], &[1, 6, 2][..]]);
    let labels = [1usize, 0, 1];
    let scale = 1.0 / 3.0;
    let loss = |m: &Transformer<f64>| {
        let acts = m.forward(&batch).unwrap();
        m.classify_loss(&acts, &labels, scale, None) * scale
    };
    let mut analytic = vec![0.0; model.num_params()];
    let acts = model.forward(&batch).unwrap();
    model.classify_loss(&acts, &labels, scale, Some(&mut analytic));
    let err = max_relative_error(&analytic, &numeric_grad(&model, loss));
    println!("ranker max relative error {err:e}");
    assert!(err <= 1e-4, "max relative error {err}");
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let model = micro(ModelKind::Generator, 3);
    let seq = [1u32, 4, 8, 15, 16, 3, 2, 11];
    let acts = model.forward(&Packed::new([&seq[..]])).unwrap();
    let full = model.head_logits(&acts.hidden, &(0..seq.len()).collect::<Vec<_>>());
    let v = 20;
    let (cache, first) = model.prefill(&seq[..3]).unwrap();
    let mut caches = vec![cache.clone(), cache];
    let mut rows = vec![first];
    for &t in &seq[3..] {
        let logits = model.decode_step(&mut caches, &[t, t]).unwrap();
        assert_eq!(&logits[..v], &logits[v..]);
        rows.push(logits[..v].to_vec());
    }
    for (i, row) in rows.iter().enumerate() {
        let expect = &full[(i + 2) * v..(i + 3) * v];
        for (a, b) in row.iter().zip(expect) {
            assert!((a - b).abs() < 1e-10, "position {}: {a} vs {b}", i + 2);
        }
    }
}
