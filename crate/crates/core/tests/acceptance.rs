//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use wavjepa::config::{Profile, RunConfig};
use wavjepa::eval::{extract_features, generalizability_score, generate_task, train_probe, ProbeConfig, ScoreTable, TaskKind};
use wavjepa::ingest::SoundClip;
use wavjepa::jepa::{jepa_loss, EmaSchedule, JepaModel, ModelConfig, TargetSpec, TransformerConfig};
use wavjepa::nat::{mix_scene, ImpulseResponse, SceneSpec};
use wavjepa::optim::warmup_cosine;
use wavjepa::sampler::{coverage_stats, sample_blocks, sample_blocks_shared, SamplerConfig};
use wavjepa::seed;
use wavjepa::tape::Tape;
use wavjepa::tensor::Tensor;
use wavjepa::train::{checkpoint_path, TrainData, Trainer};
use wavjepa::transformer::PosScheme;
use wavjepa::wave_encoder::ConvStackConfig;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 13] = [
        (1, "sampler statistics", c01_sampler_statistics),
        (2, "ablation coverage rows", c02_ablation_coverage),
        (3, "EMA schedule", c03_ema_schedule),
        (4, "LR schedule", c04_lr_schedule),
        (5, "gradient correctness", c05_gradient_check),
        (6, "masking no-leak", c06_no_leak),
        (7, "stop-gradient", c07_stop_gradient),
        (8, "top-K targets", c08_top_k),
        (9, "scene mixing", c09_scene_mixing),
        (10, "shared sampling", c10_shared_sampling),
        (11, "s(m) metric", c11_score),
        (12, "learning smoke test", c12_learning_smoke),
        (13, "determinism", c13_determinism),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let label = format!("{id:02} {name}");
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {label}: {} ({:.1}s)", o.detail, t0.elapsed().as_secs_f64());
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn c01_sampler_statistics() -> Outcome {
    let t0 = Instant::now();
    let cfg = SamplerConfig { p_target: 0.025, m_target: 10, m_context: 10, ..SamplerConfig::default() };
    let s = coverage_stats(&cfg, 200, 10_000, 1).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    // Every trial is rechecked for the context floor and disjointness.
    let mut min_context = f64::INFINITY;
    let mut overlaps = 0;
    for t in 0..10_000u64 {
        let b = sample_blocks(200, &cfg, seed::derive(1, &[seed::TRIAL, t])).unwrap();
        min_context = min_context.min(b.context.len() as f64 / 200.0);
        overlaps += b.targets.iter().flatten().filter(|i| b.context.binary_search(i).is_ok()).count();
    }
    let cov = s.target_percent.mean;
    let blocks = s.target_blocks.mean;
    let pass = (21.2..=24.2).contains(&cov)
        && (3.5..=5.5).contains(&blocks)
        && min_context >= 0.10
        && overlaps == 0
        && s.invariant_violations == 0
        && s.failed_trials == 0
        && elapsed < 10.0;
    outcome(
        pass,
        format!(
            "coverage {cov:.2}% [{:.1}, {:.1}] (want 21.2..24.2), blocks {blocks:.2} (want 3.5..5.5), min context {:.1}%, overlaps {overlaps}, sampling {elapsed:.2}s",
            s.target_percent.lo,
            s.target_percent.hi,
            100.0 * min_context
        ),
    )
}

fn c02_ablation_coverage() -> Outcome {
    let rows = [(0.015, 14.3), (0.020, 18.7), (0.030, 26.6)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (p, want) in rows {
        let cfg = SamplerConfig { p_target: p, ..SamplerConfig::default() };
        let got = coverage_stats(&cfg, 200, 10_000, 2).unwrap().target_percent.mean;
        pass &= (got - want).abs() <= 1.5;
        parts.push(format!("p={p}: {got:.2}% vs {want}%"));
    }
    outcome(pass, parts.join(", "))
}

fn c03_ema_schedule() -> Outcome {
    let e = RunConfig::profile(Profile::Paper).model.ema;
    let plateau = [100_000u64, 100_001, 250_000, 375_000, u64::MAX].iter().all(|&s| e.tau(s) == 0.99999);
    let pass = e.tau(0) == 0.999 && e.tau(100_000) == 0.99999 && e.tau(50_000) == 0.999495 && plateau;
    outcome(pass, format!("tau(0)={} tau(50k)={} tau(100k)={} constant after: {plateau}", e.tau(0), e.tau(50_000), e.tau(100_000)))
}

fn c04_lr_schedule() -> Outcome {
    let t = RunConfig::profile(Profile::Paper).trainer;
    let (peak, w, total) = (t.peak_lr, t.warmup_steps, t.total_steps);
    let lr = |s| warmup_cosine(s, peak, w, total);
    // Largest slope of either phase bounds the change between neighbours.
    let slope = (peak / w as f64).max(peak * std::f64::consts::PI / (2.0 * (total - w) as f64));
    let mut worst = 0.0f64;
    let mut negative = false;
    for i in 0..1000u64 {
        let s = i * total / 999;
        let (a, b) = (lr(s), lr(s + 1));
        negative |= a < 0.0 || b < 0.0;
        worst = worst.max((b - a).abs() / slope);
    }
    let pass = lr(0) == 0.0 && lr(w) == 2e-4 && lr(total) == 0.0 && peak == 2e-4 && worst <= 1.0 + 1e-9 && !negative;
    outcome(pass, format!("lr(0)={} lr({w})={} lr({total})={}, max step change {worst:.4} of the slope bound", lr(0), lr(w), lr(total)))
}

fn grad_config() -> ModelConfig {
    ModelConfig {
        encoder: ConvStackConfig::with_channels(8, 16),
        transformer: TransformerConfig {
            depth: 2,
            width: 16,
            heads: 2,
            mlp_ratio: 2.0,
            predictor_depth: 2,
            predictor_width: 8,
            predictor_heads: 2,
            positional_scheme: PosScheme::Sin1d,
        },
        target: TargetSpec { top_k: 2 },
        ema: EmaSchedule::default(),
    }
}

fn small_sampler() -> SamplerConfig {
    SamplerConfig { m_target: 3, m_context: 3, p_target: 0.1, p_context: 0.3, ..SamplerConfig::default() }
}

fn c05_gradient_check() -> Outcome {
    let t0 = Instant::now();
    let cfg = grad_config();
    let n = 20;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for s in 0..5u64 {
        let (m, st) = JepaModel::init(&cfg, s).unwrap();
        let mut rng = seed::rng(s, &[0x6C]);
        let x: Vec<f64> = (0..cfg.encoder.input_length_for(n)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sampling = sample_blocks(n, &small_sampler(), s).unwrap();
        let out = m.instance_forward(&st, &[x.clone()], &sampling, None, true).unwrap();
        let y = out.targets;
        let g = out.grads.unwrap();
        let groups = [(&st.wave[0], &g.wave[0]), (&st.context, &g.context), (&st.predictor, &g.predictor)];
        for (gi, (store, grad)) in groups.iter().enumerate() {
            for pi in 0..store.len() {
                let len = store.params()[pi].value.len();
                for _ in 0..3 {
                    let k = rng.gen_range(0..len);
                    let h = 1e-5;
                    let f = |d: f64| {
                        let mut p = st.clone();
                        let target = match gi {
                            0 => &mut p.wave[0],
                            1 => &mut p.context,
                            _ => &mut p.predictor,
                        };
                        target.params_mut()[pi].value.data_mut()[k] += d;
                        m.instance_forward(&p, &[x.clone()], &sampling, Some(&y), false).unwrap().loss
                    };
                    let numeric = (f(h) - f(-h)) / (2.0 * h);
                    let analytic = grad.params()[pi].value.data()[k];
                    let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    outcome(worst < 1e-3 && elapsed < 60.0, format!("{checked} entries over 5 seeds, max relative error {worst:.2e}, {elapsed:.1}s"))
}

fn c06_no_leak() -> Outcome {
    let cfg = grad_config();
    let (m, st) = JepaModel::init(&cfg, 3).unwrap();
    let n = 40;
    let sampling = sample_blocks(n, &small_sampler(), 11).unwrap();
    let mut rng = seed::rng(6, &[]);
    let base: Vec<f64> = (0..n * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |w: &Tensor| {
        let mut tape = Tape::new();
        let b = st.context.bind(&mut tape, false);
        let wv = tape.constant(w.clone());
        let z = m.encode_context(&mut tape, &b, wv, &sampling).unwrap();
        tape.value(z).clone()
    };
    let w0 = Tensor::from_vec(n, 16, base);
    let z0 = run(&w0);
    let hidden: Vec<usize> = (0..n).filter(|i| sampling.context.binary_search(i).is_err()).collect();
    let mut max_change = 0.0f64;
    for _ in 0..100 {
        let mut w = w0.clone();
        for &r in &hidden {
            for v in w.row_mut(r) {
                *v += 10.0 * rng.gen_range(-1.0..1.0);
            }
        }
        max_change = max_change.max(run(&w).sub(&z0).max_abs());
    }
    let context_moves = {
        let mut w = w0.clone();
        w.row_mut(sampling.context[0])[0] += 1.0;
        run(&w).sub(&z0).max_abs() > 0.0
    };
    outcome(
        max_change == 0.0 && context_moves && !hidden.is_empty(),
        format!("{} hidden rows, max output change {max_change:e} over 100 perturbations; context rows do move it: {context_moves}", hidden.len()),
    )
}

fn c07_stop_gradient() -> Outcome {
    let cfg = grad_config();
    let (m, st) = JepaModel::init(&cfg, 5).unwrap();
    let x: Vec<f64> = (0..cfg.encoder.input_length_for(30)).map(|i| (i as f64 * 0.037).sin()).collect();
    let sampling = sample_blocks(30, &small_sampler(), 2).unwrap();
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, &st, true, true);
    let w = m.embed_waves(&mut tape, &b, &[x]).unwrap();
    let w = m.add_positions(&mut tape, w).unwrap();
    let y = m.build_targets(&mut tape, &b.target, w);
    let z = m.encode_context(&mut tape, &b.context, w, &sampling).unwrap();
    let preds: Vec<_> = (0..sampling.num_targets()).map(|k| m.predict_targets(&mut tape, &b.predictor, z, &sampling, k).unwrap()).collect();
    let loss = jepa_loss(&mut tape, &preds, y, &sampling).unwrap();
    let mut g = tape.backward(loss);
    let target_grad = st.target.collect_grads(&b.target, &mut g).sq_norm();
    let context_grad = st.context.collect_grads(&b.context, &mut g).sq_norm();

    // Trainer run: after every update Δ must equal τΔ + (1 − τ)θ exactly.
    let mut rc = RunConfig::profile(Profile::Tiny);
    rc.trainer.total_steps = 100;
    rc.trainer.warmup_steps = 10;
    rc.trainer.batch_size = 2;
    rc.trainer.crop_factor = 1;
    let data = TrainData::from_clips(smoke_corpus(0), &rc).unwrap();
    let mut t = Trainer::new(rc.clone(), data).unwrap();
    let mut ema_exact = true;
    let mut moved = false;
    for _ in 0..100 {
        let before = t.state().target.clone();
        let rec = t.step().unwrap();
        let after = t.state();
        let tau = rec.tau;
        ema_exact &= tau == rc.model.ema.tau(rec.step - 1);
        for ((d0, d1), th) in before.params().iter().zip(after.target.params()).zip(after.context.params()) {
            for ((&a, &b), &c) in d0.value.data().iter().zip(d1.value.data()).zip(th.value.data()) {
                ema_exact &= b == tau * a + (1.0 - tau) * c;
            }
        }
        moved |= before != after.target;
    }
    let pass = target_grad == 0.0 && context_grad > 0.0 && ema_exact && moved;
    outcome(pass, format!("|dL/dDelta|^2 = {target_grad:e} (context {context_grad:.3e}); Delta follows EMA exactly over 100 steps: {ema_exact}"))
}

/// Independent column normalization: zero mean, unit (biased) variance.
fn oracle_norm_cols(x: &Tensor, eps: f64) -> Tensor {
    let (r, c) = x.shape();
    let mut out = x.clone();
    for j in 0..c {
        let col: Vec<f64> = (0..r).map(|i| x.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / r as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r as f64;
        for i in 0..r {
            out.set(i, j, (col[i] - mean) / (var + eps).sqrt());
        }
    }
    out
}

fn c08_top_k() -> Outcome {
    let mut cfg = grad_config();
    cfg.transformer.depth = 3;
    let x: Vec<f64> = (0..cfg.encoder.input_length_for(40)).map(|i| (i as f64 * 0.021).sin() + 0.2 * (i as f64 * 0.4).cos()).collect();
    cfg.target.top_k = 1;
    let (m1, st) = JepaModel::init(&cfg, 8).unwrap();
    let y1 = m1.targets(&st, &[x.clone()]).unwrap();
    let worst_mean = y1.mean_rows().max_abs();
    cfg.target.top_k = 3;
    let (m3, _) = JepaModel::init(&cfg, 8).unwrap();
    let y3 = m3.targets(&st, &[x.clone()]).unwrap();
    let layers = m3.target_layers(&st, &[x]).unwrap();
    let mut expect = Tensor::zeros(y3.rows(), y3.cols());
    for l in &layers {
        expect.add_assign(&oracle_norm_cols(l, 1e-5));
    }
    expect.scale_in_place(1.0 / layers.len() as f64);
    let diff = y3.sub(&expect).max_abs();
    outcome(worst_mean < 1e-5 && diff < 1e-6 && layers.len() == 3, format!("K=1 max |time mean| {worst_mean:.2e}; K=depth vs mean of normalized layers {diff:.2e}"))
}

fn direct_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len()).map(|n| h.iter().enumerate().take(n + 1).map(|(k, hk)| hk * x[n - k]).sum()).collect()
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn noise_clip(len: usize, rng: &mut impl Rng) -> SoundClip {
    let g = rng.gen_range(0.05..1.0);
    SoundClip::mono((0..len).map(|_| g * gauss(rng)).collect::<Vec<f64>>(), 16_000).unwrap()
}

fn decay_brir(rng: &mut impl Rng) -> ImpulseResponse {
    let len = rng.gen_range(50..400);
    let decay = rng.gen_range(20.0..150.0);
    let mut ch = || (0..len).map(|t| (-(t as f64) / decay).exp() * gauss(rng)).collect::<Vec<f64>>();
    let (l, r) = (ch(), ch());
    ImpulseResponse::new(l, r, 16_000, "decay").unwrap()
}

fn c09_scene_mixing() -> Outcome {
    let mut rng = seed::rng(9, &[]);
    let mut worst_snr = 0.0f64;
    let mut worst_conv = 0.0f64;
    for _ in 0..50 {
        let len = rng.gen_range(2_000..6_000);
        let source = noise_clip(len, &mut rng);
        let source_brir = decay_brir(&mut rng);
        let diffuse = rng.gen_bool(0.5);
        let count = if diffuse { rng.gen_range(3..=5) } else { 1 };
        let noises = (0..count).map(|_| noise_clip(rng.gen_range(1_000..8_000), &mut rng)).collect();
        let noise_brirs = (0..count).map(|_| decay_brir(&mut rng)).collect();
        let snr_db = rng.gen_range(5.0..40.0);
        let spec = SceneSpec { source: source.clone(), source_brir: source_brir.clone(), noises, noise_brirs, snr_db, diffuse };
        let mixed = mix_scene(&spec).unwrap();
        // The reverberant source from the direct oracle; the remainder is the
        // scaled noise field.
        let t: Vec<Vec<f64>> = (0..2).map(|c| direct_convolve(source.channel(0), source_brir.taps(c))).collect();
        let scale = t.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut sig = 0.0;
        let mut res = 0.0;
        for c in 0..2 {
            for (s, tv) in mixed.clip.channel(c).iter().zip(&t[c]) {
                sig += tv * tv;
                res += (s - tv).powi(2);
            }
            let fft = wavjepa::nat::fft_convolve(source.channel(0), source_brir.taps(c), len);
            let err = fft.iter().zip(&t[c]).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            worst_conv = worst_conv.max(err / scale);
        }
        let achieved = 10.0 * (sig / res).log10();
        worst_snr = worst_snr.max((achieved - snr_db).abs());
    }
    outcome(worst_snr < 0.01 && worst_conv < 1e-9, format!("50 scenes: max SNR error {worst_snr:.2e} dB, FFT vs direct {worst_conv:.2e} relative"))
}

fn c10_shared_sampling() -> Outcome {
    let n = 99;
    let cfg = SamplerConfig::default();
    let mut violations = 0;
    for d in 0..1000u64 {
        let s = sample_blocks_shared(n, 2, &cfg, seed::derive(10, &[d])).unwrap();
        let sets = std::iter::once(&s.context).chain(&s.targets);
        for set in sets {
            for &i in set.iter().filter(|&&i| i < n) {
                violations += usize::from(set.binary_search(&(i + n)).is_err());
            }
            violations += set.iter().filter(|&&i| i >= n && set.binary_search(&(i - n)).is_err()).count();
        }
    }
    outcome(violations == 0, format!("1000 draws over 2x{n} frames, {violations} missing mirrors"))
}

fn c11_score() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/benchmark_scores.csv");
    let table = ScoreTable::from_csv(path, "HEAR-Naive").unwrap();
    let tasks_ok = table.tasks().len() == 11 && table.models().len() == 14;
    let base = generalizability_score(&table, "HEAR-Naive").unwrap().score;
    let r = generalizability_score(&table, "HuBERT-B-AudioSet").unwrap();
    let dcase = r.tasks.iter().find(|t| t.task == "DCASE").unwrap().contribution;
    let hand = (86.2 - 7.6) / (93.9 - 7.6);
    let mut clamp_ok = true;
    for m in table.models() {
        let rep = generalizability_score(&table, m).unwrap();
        for t in rep.tasks.iter().filter(|t| ["NS", "BO", "Mri-T"].contains(&t.task.as_str())) {
            clamp_ok &= t.contribution == 0.0;
        }
    }
    let mut rows = Vec::new();
    for (t, s) in [("a", 1.0), ("b", 10.0), ("c", 3.0)] {
        rows.push(("base".to_string(), t.to_string(), s));
        rows.push(("mid".to_string(), t.to_string(), s + 1.0));
        rows.push(("top".to_string(), t.to_string(), s + 5.0));
    }
    let synthetic = ScoreTable::new(rows, "base").unwrap();
    let top = generalizability_score(&synthetic, "top").unwrap().score;
    let ours = generalizability_score(&table, "WavJEPA-B-AudioSet").unwrap().score;
    let pass = tasks_ok && base == 0.0 && top == 100.0 && (dcase - 0.9108).abs() < 1e-4 && (dcase - hand).abs() < 1e-6 && clamp_ok;
    outcome(
        pass,
        format!("baseline {base}, SOTA-everywhere {top}, DCASE HuBERT-B-AudioSet {dcase:.6} (hand {hand:.6}), NS/BO/Mri-T clamped: {clamp_ok}; table-only s(WavJEPA-B-AudioSet) {ours:.1}"),
    )
}

/// 64 synthetic clips, 16 per tone class, each tone in white noise.
fn smoke_corpus(seed: u64) -> Vec<SoundClip> {
    generate_task(TaskKind::Tone4, 16, 2.0, 16_000, 1_000 + seed).clips
}

fn c12_learning_smoke() -> Outcome {
    let mut decreased = 0;
    let mut margins = Vec::new();
    let mut parts = Vec::new();
    for s in 0..3u64 {
        let mut cfg = RunConfig::profile(Profile::Tiny);
        cfg.trainer.seed = s;
        let data = TrainData::from_clips(smoke_corpus(s), &cfg).unwrap();
        let mut t = Trainer::new(cfg.clone(), data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let t0 = Instant::now();
        let recs = t.run(dir.path()).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let loss: Vec<f64> = recs.iter().filter_map(|r| r.loss).collect();
        let first = loss[..100].iter().sum::<f64>() / 100.0;
        let last = loss[loss.len() - 100..].iter().sum::<f64>() / 100.0;
        decreased += usize::from(last < first);

        let task = generate_task(TaskKind::Tone4, cfg.eval.probe_clips_per_class, cfg.ingest.crop_seconds, 16_000, 7_000 + s);
        let pc = ProbeConfig { l2: cfg.eval.probe_l2, tol: cfg.eval.probe_tol, ..ProbeConfig::default() };
        let pre = train_probe(&task, &extract_features(t.model(), t.state(), &task.clips).unwrap(), &pc).unwrap().1;
        let (m0, s0) = JepaModel::init(&cfg.model_config(), s).unwrap();
        let init = train_probe(&task, &extract_features(&m0, &s0, &task.clips).unwrap(), &pc).unwrap().1;
        let margin = 100.0 * (pre.test_accuracy - init.test_accuracy);
        margins.push(margin);
        parts.push(format!(
            "seed {s}: loss {first:.3}->{last:.3}, probe {:.1}% vs init {:.1}% ({secs:.0}s train)",
            100.0 * pre.test_accuracy,
            100.0 * init.test_accuracy
        ));
    }
    margins.sort_by(f64::total_cmp);
    let median = margins[1];
    let pass = decreased >= 2 && median > 10.0;
    outcome(pass, format!("{}; loss decreased in {decreased}/3, median probe margin {median:+.1} points (want > 10)", parts.join("; ")))
}

fn c13_determinism() -> Outcome {
    let mut cfg = RunConfig::profile(Profile::Tiny);
    cfg.trainer.total_steps = 30;
    cfg.trainer.warmup_steps = 5;
    cfg.trainer.checkpoint_every = 10;
    cfg.trainer.seed = 13;
    let run = |dir: &std::path::Path| {
        let data = TrainData::from_clips(smoke_corpus(13), &cfg).unwrap();
        Trainer::new(cfg.clone(), data).unwrap().run(dir).unwrap();
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path());
    run(b.path());
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let metrics_same = read(a.path(), "metrics.jsonl") == read(b.path(), "metrics.jsonl");
    let ckpt_same = read(a.path(), "ckpt-30.bin") == read(b.path(), "ckpt-30.bin");

    let c = tempfile::tempdir().unwrap();
    let full = String::from_utf8(read(a.path(), "metrics.jsonl")).unwrap();
    let head: String = full.lines().take(20).map(|l| format!("{l}\n")).collect();
    std::fs::write(c.path().join("metrics.jsonl"), head).unwrap();
    let ckpt = wavjepa::checkpoint::Checkpoint::load(checkpoint_path(a.path(), 20)).unwrap();
    let data = TrainData::from_clips(smoke_corpus(13), &cfg).unwrap();
    Trainer::from_checkpoint(&ckpt, Some(&cfg), data).unwrap().run(c.path()).unwrap();
    let resume_metrics = read(c.path(), "metrics.jsonl") == full.as_bytes();
    let resume_ckpt = read(c.path(), "ckpt-30.bin") == read(a.path(), "ckpt-30.bin");
    outcome(
        metrics_same && ckpt_same && resume_metrics && resume_ckpt,
        format!("repeat run: metrics identical {metrics_same}, checkpoint identical {ckpt_same}; resume at 20 through 30: metrics {resume_metrics}, checkpoint {resume_ckpt}"),
    )
}
