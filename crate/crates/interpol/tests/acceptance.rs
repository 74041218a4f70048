//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The model is a reduced configuration (2 layers, width 64) so that the
//! whole run fits a single laptop core.

use std::fs;
use std::path::Path;
use std::time::Instant;

use interpol::commands::{
    self, derived_seed, load_generator, load_ranker, ranker_data, Context, EvalMode, EvaluateArgs, MakeDataArgs,
    ModelType,
};
use interpol::io::checkpoint::{load_checkpoint, save_checkpoint};
use interpol::RunConfig;
use interpol_core::corpus::{segment_stories, StorySegment};
use interpol_core::eval::{
    wordpiece_perplexity, AblationReport, ProxyReport, RankerMetrics, ScheduleReport, REFERENCE_HUMAN_COHERENCE,
    REFERENCE_PERPLEXITY,
};
use interpol_core::generator::train_generator;
use interpol_core::interpolator::{bisectional_order, generate_story, generate_story_noranking, plan_bisectional};
use interpol_core::nn::{Packed, Transformer};
use interpol_core::ranker::{make_irrelevant_negative, make_out_of_order_negative, make_repetition_negative};
use interpol_core::{
    seeded_rng, GeneratorModel, InterpolationRequest, InterpolationState, ModelConfig, ModelKind, NegativeType,
    Schedule, TrainHyper, TrainingExample,
};
use serde::de::DeserializeOwned;

struct Outcome {
    failures: usize,
}

impl Outcome {
    fn report(&mut self, id: &str, pass: bool, what: &str, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} criterion {id}: {what} [{detail}]", if pass { "PASS" } else { "FAIL" });
    }
}

fn acceptance_config() -> RunConfig {
    let mut c = RunConfig::default();
    let set = |c: &mut RunConfig, k: &str, v: &str| c.set(k, v).unwrap();
    for (k, v) in [
        ("seed", "1"),
        ("corpus.size", "2000"),
        ("tokenizer.vocab_size", "512"),
        ("model.layers", "2"),
        ("model.heads", "4"),
        ("model.width", "64"),
        ("model.ff_width", "256"),
        ("model.context", "128"),
        ("generator.epochs", "2"),
        ("generator.learning_rate", "0.002"),
        ("ranker.epochs", "8"),
        ("ranker.learning_rate", "0.002"),
        ("generate.k", "5"),
        ("generate.m", "10"),
        ("eval.proxy_pairs", "40"),
    ] {
        set(&mut c, k, v);
    }
    c.validate().unwrap();
    c
}

fn read_report<T: DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn eval_args(mode: EvalMode) -> EvaluateArgs {
    EvaluateArgs {
        mode,
        generator: "generator".into(),
        l2r: "l2r".into(),
        loop_ranker: "ranker".into(),
        judge_ranker: "judge".into(),
    }
}

fn table3(ctx: &Context, out: &mut Outcome) {
    let start = Instant::now();
    commands::make_data(ctx, &MakeDataArgs { synthetic: true, ..Default::default() }).unwrap();
    commands::train(ctx, ModelType::Generator, None).unwrap();
    commands::train(ctx, ModelType::L2r, None).unwrap();
    let (_, path) = commands::evaluate(ctx, &eval_args(EvalMode::Table3)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let r: AblationReport = read_report(&path);
    let mut pass = secs < 15.0 * 60.0;
    let mut detail = Vec::new();
    for setting in ["single-sentence", "full-story"] {
        let l2r = r.perplexity("L2R", setting).unwrap();
        let nr = r.perplexity("NR", setting).unwrap();
        let gap = (l2r - nr) / l2r;
        pass &= nr < l2r && gap >= 0.05;
        detail.push(format!("{setting}: L2R {l2r:.3} NR {nr:.3} gap {:.1}%", 100.0 * gap));
    }
    detail.push(format!("{secs:.0}s"));
    out.report("1", pass, "ending-conditioned perplexity below left-only by >= 5% in both settings", detail.join("; "));
    let [a, b, c, d] = REFERENCE_PERPLEXITY;
    println!("     reference at full scale: single-sentence L2R {a} NR {b}; full-story L2R {c} NR {d}");
}

fn perplexity_closed_forms(out: &mut Outcome) {
    let mut worst: f64 = 0.0;
    for v in [20usize, 100, 512] {
        let cfg = ModelConfig { layers: 1, heads: 2, width: 8, ff_width: 16, context: 32, vocab: v };
        let model = GeneratorModel::<f64>::from_transformer(Transformer::zeros(ModelKind::Generator, cfg).unwrap()).unwrap();
        let examples: Vec<TrainingExample> = (0..8)
            .map(|i| {
                let ids: Vec<u32> = (0..20).map(|t| ((i * 31 + t * 17) % v) as u32).collect();
                let mut mask = vec![true; ids.len()];
                mask[0] = false;
                TrainingExample { input_ids: ids, target_mask: mask }
            })
            .collect();
        let ppl = wordpiece_perplexity(&model, &examples).unwrap();
        worst = worst.max((ppl - v as f64).abs());
    }
    let cfg = ModelConfig { layers: 1, heads: 2, width: 16, ff_width: 32, context: 16, vocab: 12 };
    let example = TrainingExample {
        input_ids: vec![1, 7, 3, 9, 5, 11, 6, 4],
        target_mask: vec![false, false, false, true, true, true, true, true],
    };
    let mut model = GeneratorModel::<f64>::new(cfg, 3).unwrap();
    let hyper = TrainHyper { epochs: 300, batch_size: 1, learning_rate: 1e-2, seed: 3, grad_clip: 1.0, warmup_steps: 10 };
    train_generator(&mut model, std::slice::from_ref(&example), &hyper).unwrap();
    let memo = wordpiece_perplexity(&model, std::slice::from_ref(&example)).unwrap();
    out.report(
        "2",
        worst <= 1e-6 && memo <= 1.05,
        "uniform model perplexity equals V; memorised example perplexity <= 1.05",
        format!("max |ppl - V| over V in {{20, 100, 512}} = {worst:.1e}; memorised {memo:.4}"),
    )
}

fn gradient_oracle(out: &mut Outcome) {
    let micro = |kind, seed: u64| {
        let cfg = ModelConfig { layers: 1, heads: 2, width: 8, ff_width: 16, context: 16, vocab: 20 };
        let mut m = Transformer::<f64>::new(kind, cfg, &mut seeded_rng(seed)).unwrap();
        for (i, p) in m.params_mut().iter_mut().enumerate() {
            *p += 0.3 * ((i as f64 + seed as f64) * 0.7548).sin();
        }
        m
    };
    let check = |model: &Transformer<f64>, loss: &dyn Fn(&Transformer<f64>, Option<&mut [f64]>) -> f64| {
        let mut analytic = vec![0.0; model.num_params()];
        loss(model, Some(&mut analytic));
        let mut probe = model.clone();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + eps;
            let up = loss(&probe, None);
            probe.params_mut()[i] = orig - eps;
            let down = loss(&probe, None);
            probe.params_mut()[i] = orig;
            let n = (up - down) / (2.0 * eps);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
        }
        worst
    };
    let start = Instant::now();
    let gen_batch = Packed::new([&[1u32, 7, 3, 9, 12, 4][..], &[1, 5, 5, 3, 19, 4, 2][..]]);
    let targets = [(2, 9), (3, 12), (4, 4), (9, 19), (10, 4), (11, 2)];
    let g = check(&micro(ModelKind::Generator, 1), &|m, grads| {
        let acts = m.forward(&gen_batch).unwrap();
        m.lm_loss(&acts, &targets, 1.0 / 6.0, grads) / 6.0
    });
    let rank_batch = Packed::new([&[1u32, 7, 3, 9, 2][..], &[1, 5, 3, 19, 3, 8, 2][..], &[1, 6, 2][..]]);
    let r = check(&micro(ModelKind::Ranker, 2), &|m, grads| {
        let acts = m.forward(&rank_batch).unwrap();
        m.classify_loss(&acts, &[1, 0, 1], 1.0 / 3.0, grads) / 3.0
    });
    out.report(
        "3",
        g <= 1e-4 && r <= 1e-4,
        "analytic gradients match central differences in f64",
        format!("generator {g:.1e}, ranker {r:.1e}, {:.1}s", start.elapsed().as_secs_f64()),
    );
}

fn ranker_quality(ctx: &Context, out: &mut Outcome) {
    commands::train(ctx, ModelType::Ranker, None).unwrap();
    let (_, path) = commands::evaluate(ctx, &eval_args(EvalMode::Ranker)).unwrap();
    let m: RankerMetrics = read_report(&path);
    let per: Vec<String> = m.per_type.iter().map(|t| format!("{} {:.3}", t.negative_type.name(), t.accuracy)).collect();
    let pass = m.accuracy >= 0.90 && m.per_type.len() == 3 && m.per_type.iter().all(|t| t.accuracy >= 0.80);
    out.report(
        "4",
        pass,
        "held-out ranker accuracy >= 0.90 overall and >= 0.80 per negative type",
        format!("overall {:.3} over {}; {}", m.accuracy, m.count, per.join(", ")),
    );
}

fn proxy(ctx: &Context, out: &mut Outcome) {
    commands::train(ctx, ModelType::Ranker, Some("judge")).unwrap();
    let (_, path) = commands::evaluate(ctx, &eval_args(EvalMode::Proxy)).unwrap();
    let r: ProxyReport = read_report(&path);
    let pass = r.pairs.len() >= 30 && r.mean_interpol >= r.mean_noranking && r.win_fraction >= 0.6;
    out.report(
        "5",
        pass,
        "judge-ranker coherence of full pipeline >= single candidate, win fraction >= 0.6",
        format!(
            "{} pairs; full {:.3} vs no-ranking {:.3}; win fraction {:.3}",
            r.pairs.len(),
            r.mean_interpol,
            r.mean_noranking,
            r.win_fraction
        ),
    );
    let (nr, full) = REFERENCE_HUMAN_COHERENCE;
    println!("     reference human preference for coherence: full pipeline {full}, no ranking {nr}");
}

fn schedules(ctx: &Context, out: &mut Outcome) {
    let (_, path) = commands::evaluate(ctx, &eval_args(EvalMode::Schedules)).unwrap();
    let r: ScheduleReport = read_report(&path);
    out.report(
        "6",
        r.relative_difference <= 0.15,
        "random-insertion and sequential full-story perplexities within 15%",
        format!(
            "random {:.3}, sequential {:.3}, relative {:.3}",
            r.random_perplexity, r.sequential_perplexity, r.relative_difference
        ),
    );
}

fn same_file(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

fn invariants(ctx: &Context, out: &mut Outcome) {
    let mut failed: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok && !failed.iter().any(|f| f == what) {
            failed.push(what.to_string());
        }
    };
    let data = commands::load_data(&ctx.run).unwrap();
    let vocab = &data.vocab;
    let gen = load_generator(ctx, "generator", ModelType::Generator).unwrap();
    let ranker = load_ranker(ctx, "ranker").unwrap();

    let mut stories = 0;
    for (i, s) in data.split.test.iter().take(8).enumerate() {
        for k in [2usize, 3, 5, 7] {
            for schedule in [Schedule::Bisectional, Schedule::RandomInsertion, Schedule::Sequential] {
                let mut req = InterpolationRequest::new(s.beginning(), s.ending(), k);
                req.m = 3;
                req.schedule = schedule;
                req.sampler.seed = i as u64;
                let (story, trace) = generate_story(&req, &gen, &ranker, vocab).unwrap();
                stories += 1;
                check(story.len() == k, "output length k");
                let mut state = InterpolationState::new(s.beginning(), s.ending(), k).unwrap();
                for (n, step) in trace.steps.iter().enumerate() {
                    if schedule == Schedule::Bisectional {
                        check(step.position == plan_bisectional(k)[n], "bisectional positions");
                    }
                    state.insert(step.position, step.candidates[step.chosen].clone()).unwrap();
                    let sents = state.sentences();
                    check(sents[0] == s.beginning() && sents[sents.len() - 1] == s.ending(), "endpoints at every step");
                }
                check(state.sentences() == story.sentences(), "trace replays to the story");
                if k == 2 {
                    check(story.sentences() == [s.beginning(), s.ending()], "k=2 identity");
                }
                let (again, _) = generate_story(&req, &gen, &ranker, vocab).unwrap();
                check(again == story, "generation seed determinism");
                let single = InterpolationRequest { m: 1, ..req.clone() };
                let (a, _) = generate_story(&single, &gen, &ranker, vocab).unwrap();
                let (b, _) = generate_story_noranking(&req, &gen, vocab).unwrap();
                check(a.sentences() == b.sentences(), "no-ranking equals m=1");
            }
        }
    }
    check(plan_bisectional(5) == [1, 1, 3] && bisectional_order(5) == [2, 1, 3], "k=5 bisectional plan");

    // Negative construction under 1000 trials per type.
    let segments: Vec<StorySegment> = segment_stories(&data.split.train, 3, 5).unwrap();
    let trials = 1000;
    for t in 0..trials {
        let seg = &segments[(t * 7919) % segments.len()].sentences;
        let src = &segments[(t * 7919) % segments.len()].source_id;
        let mut rng = seeded_rng(t as u64);
        let sorted = |v: &[String]| {
            let mut v = v.to_vec();
            v.sort();
            v
        };
        let rep = make_repetition_negative(seg, &mut rng).unwrap();
        check(
            rep.len() == seg.len() + 1
                && (1..rep.len()).any(|j| rep[j] == rep[j - 1] && [&rep[..j], &rep[j + 1..]].concat() == *seg),
            "repetition length/multiset/order",
        );
        let irr = make_irrelevant_negative(seg, &data.split.train, src, &mut rng).unwrap();
        let ins = (1..seg.len()).find(|&j| !seg.contains(&irr[j]));
        check(
            irr.len() == seg.len() + 1
                && ins.is_some_and(|j| [&irr[..j], &irr[j + 1..]].concat() == *seg
                    && data.split.train.iter().any(|d| d.id() != src && d.sentences().contains(&irr[j]))),
            "irrelevant length/multiset/order",
        );
        match make_out_of_order_negative(seg, &mut rng).unwrap() {
            Some(ooo) => check(ooo.len() == seg.len() && sorted(&ooo) == sorted(seg) && ooo != *seg, "out-of-order length/multiset/order"),
            None => check(seg.iter().all(|x| *x == seg[0]), "out-of-order length/multiset/order"),
        }
    }
    let labelled = ranker_data(&data.split.test, &ctx.config, derived_seed(1, "check")).unwrap();
    for kind in NegativeType::ALL {
        check(labelled.iter().any(|l| l.negative_type() == Some(kind)), "every negative type present");
    }

    // Seed determinism of every command, on a second tiny run.
    let tmp = tempfile::TempDir::new().unwrap();
    let mut tiny = RunConfig::default();
    for (k, v) in [
        ("corpus.size", "120"),
        ("tokenizer.vocab_size", "150"),
        ("model.layers", "1"),
        ("model.heads", "2"),
        ("model.width", "16"),
        ("model.ff_width", "32"),
        ("model.context", "96"),
        ("generator.epochs", "1"),
        ("ranker.epochs", "1"),
        ("generate.m", "3"),
        ("eval.proxy_pairs", "3"),
    ] {
        tiny.set(k, v).unwrap();
    }
    let mut snapshots = Vec::new();
    for round in 0..2 {
        let out_dir = tmp.path().join(format!("round{round}"));
        let c = Context::new(tiny.clone(), &out_dir, Some(5));
        commands::make_data(&c, &MakeDataArgs::default()).unwrap();
        for (kind, name) in [(ModelType::Generator, None), (ModelType::L2r, None), (ModelType::Ranker, None), (ModelType::Ranker, Some("judge"))] {
            commands::train(&c, kind, name).unwrap();
        }
        let b = data.split.test[0].beginning().to_string();
        let e = data.split.test[0].ending().to_string();
        let gen_args = commands::GenerateArgs {
            beginning: b,
            ending: e,
            k: Some(6),
            m: None,
            schedule: None,
            no_ranking: false,
            generator: "generator".into(),
            ranker: "ranker".into(),
        };
        let generated = commands::generate(&c, &gen_args);
        let mut reports = Vec::new();
        for mode in [EvalMode::Table3, EvalMode::Ranker, EvalMode::Proxy, EvalMode::Schedules] {
            reports.push(commands::evaluate(&c, &eval_args(mode)).unwrap().1);
        }
        snapshots.push((c.run.root.clone(), generated.ok(), reports));
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    for f in ["data/corpus.tsv", "data/split.json", "data/vocab.json"] {
        check(same_file(&a.0.join(f), &b.0.join(f)), "make-data determinism");
    }
    for name in ["generator", "l2r", "ranker", "judge"] {
        for f in ["params.bin", "manifest.json", "loss_trace.json"] {
            check(same_file(&a.0.join("checkpoints").join(name).join(f), &b.0.join("checkpoints").join(name).join(f)), "train determinism");
        }
    }
    match (&a.1, &b.1) {
        (Some((sa, ta)), Some((sb, tb))) => check(sa == sb && same_file(ta, tb), "generate determinism"),
        _ => check(false, "generate determinism"),
    }
    for (ra, rb) in a.2.iter().zip(&b.2) {
        check(same_file(ra, rb), "evaluate determinism");
    }

    // Checkpoint round trip.
    for name in ["generator", "ranker"] {
        let dir = ctx.run.checkpoint(name);
        let (manifest, net) = load_checkpoint(&dir).unwrap();
        let copy = tmp.path().join(format!("copy-{name}"));
        let again = save_checkpoint(&copy, &net, &manifest.objective, &manifest.vocab).unwrap();
        check(again == manifest && same_file(&dir.join("params.bin"), &copy.join("params.bin")), "checkpoint round trip");
        let (_, reloaded) = load_checkpoint(&copy).unwrap();
        check(reloaded.params() == net.params(), "checkpoint round trip");
    }

    out.report(
        "7",
        failed.is_empty(),
        "pipeline invariants, negative construction, seed determinism, checkpoint round trip",
        if failed.is_empty() {
            format!("{stories} generated stories, {trials} trials per negative type, 4 commands x 2 runs")
        } else {
            format!("violated: {}", failed.join(", "))
        },
    );
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let tmp = tempfile::TempDir::new().unwrap();
    let ctx = Context::new(acceptance_config(), tmp.path(), None);
    let mut out = Outcome { failures: 0 };
    perplexity_closed_forms(&mut out);
    gradient_oracle(&mut out);
    table3(&ctx, &mut out);
    ranker_quality(&ctx, &mut out);
    proxy(&ctx, &mut out);
    schedules(&ctx, &mut out);
    invariants(&ctx, &mut out);
    println!("acceptance: {} of 7 criteria failed", out.failures);
    if out.failures > 0 {
        std::process::exit(1);
    }
}
