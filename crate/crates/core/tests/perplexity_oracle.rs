//! Perplexity from a naive, loop-by-loop forward pass compared with the
//! packed GEMM implementation.

use interpol_core::corpus::{generate_synthetic_corpus, DEFAULT_GRAMMAR};
use interpol_core::eval::wordpiece_perplexity;
use interpol_core::generator::build_interpolation_example;
use interpol_core::nn::{ModelConfig, ModelKind, Transformer};
use interpol_core::{seeded_rng, GenerationContext, GeneratorModel, Vocab};
use rand::Rng;

fn p<'a>(m: &'a Transformer<f64>, name: &str) -> &'a [f64] {
    m.param(name).unwrap_or_else(|| panic!("no parameter {name}"))
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) / (var + 1e-5).sqrt() * g + b).collect()
}

/// `x * w + b` with `w` stored row-major as `[x.len(), cols]`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let cols = b.len();
    (0..cols).map(|c| b[c] + x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + c]).sum::<f64>()).collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

/// Next-token log-probabilities after each prefix of `tokens`.
fn naive_log_probs(m: &Transformer<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = m.config();
    let (d, heads) = (cfg.width, cfg.heads);
    let dh = d / heads;
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let te = &p(m, "tok_emb")[tok as usize * d..][..d];
            let pe = &p(m, "pos_emb")[t * d..][..d];
            te.iter().zip(pe).map(|(a, b)| a + b).collect()
        })
        .collect();
    for l in 0..cfg.layers {
        let w = |s: &str| p(m, &format!("layers.{l}.{s}"));
        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|r| affine(&layer_norm(r, w("ln1.weight"), w("ln1.bias")), w("attn.qkv.weight"), w("attn.qkv.bias")))
            .collect();
        for i in 0..x.len() {
            let mut att = vec![0.0; d];
            for h in 0..heads {
                let q = &qkv[i][h * dh..(h + 1) * dh];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q.iter().zip(&qkv[j][d + h * dh..]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let a = (s - max).exp() / z;
                    for c in 0..dh {
                        att[h * dh + c] += a * qkv[j][2 * d + h * dh + c];
                    }
                }
            }
            let proj = affine(&att, w("attn.proj.weight"), w("attn.proj.bias"));
            x[i].iter_mut().zip(proj).for_each(|(a, b)| *a += b);
        }
        for r in x.iter_mut() {
            let h = affine(&layer_norm(r, w("ln2.weight"), w("ln2.bias")), w("mlp.fc.weight"), w("mlp.fc.bias"));
            let g: Vec<f64> = h.into_iter().map(gelu).collect();
            let out = affine(&g, w("mlp.out.weight"), w("mlp.out.bias"));
            r.iter_mut().zip(out).for_each(|(a, b)| *a += b);
        }
    }
    x.iter()
        .map(|r| {
            let logits = affine(&layer_norm(r, p(m, "ln_f.weight"), p(m, "ln_f.bias")), p(m, "head.weight"), p(m, "head.bias"));
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            logits.iter().map(|v| v - lse).collect()
        })
        .collect()
}

#[test]
fn packed_perplexity_matches_naive_forward() {
    let stories = generate_synthetic_corpus(DEFAULT_GRAMMAR, 12, 4).unwrap();
    let vocab = Vocab::train(&stories, 120).unwrap();
    let cfg = ModelConfig { layers: 2, heads: 2, width: 12, ff_width: 20, context: 128, vocab: vocab.len() };
    let mut rng = seeded_rng(9);
    let mut net = Transformer::<f64>::new(ModelKind::Generator, cfg, &mut rng).unwrap();
    for v in net.params_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    let examples: Vec<_> = stories
        .iter()
        .map(|s| {
            let x = s.sentences();
            build_interpolation_example(&GenerationContext::new(x[0].clone(), x[4].clone()), &x[2], &vocab, 128).unwrap()
        })
        .collect();

    let mut nll = 0.0;
    let mut count = 0;
    for ex in &examples {
        let lp = naive_log_probs(&net, &ex.input_ids);
        for (row, tok) in ex.targets() {
            nll -= lp[row][tok as usize];
            count += 1;
        }
    }
    let oracle = (nll / count as f64).exp();
    let model = GeneratorModel::from_transformer(net).unwrap();
    let packed = wordpiece_perplexity(&model, &examples).unwrap();
    println!("naive {oracle} packed {packed}");
    assert!(oracle > 1.5, "trivial oracle value {oracle}");
    assert!((packed - oracle).abs() / oracle <= 1e-6, "naive {oracle} vs packed {packed}");
}
