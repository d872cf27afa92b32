//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any fails.
//!
//! `cargo test -p segmoe-cli --test acceptance` runs everything (the
//! training criteria take tens of minutes on one core); pass criterion
//! numbers to run a subset, e.g. `-- 1 2 11`.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segmoe_cli::ablate::{ablate, AblationReport, Variant};
use segmoe_cli::accounting::count_params;
use segmoe_cli::config::{prepare, RunConfig};
use segmoe_cli::evaluate::evaluate;
use segmoe_cli::forecast::{ModelForecaster, Persistence};
use segmoe_cli::run::train_run;
use segmoe_core::backbone::{rmsnorm, Attention, ForwardCtx, ForwardOptions, ModelConfig, SegMoeModel};
use segmoe_core::objective::{aux_balance_loss, huber, total_loss};
use segmoe_core::params::{Bound, ParamStore};
use segmoe_core::segmoe::reference::{token_moe, RefExpert};
use segmoe_core::segmoe::{route, segment_tokens, unsegment_tokens, MoeOptions, OmegaSpec, SegBatch, SegMoeLayer};
use segmoe_core::tensor::{check_gradients_with, GradCheckOptions, Graph, Tensor, Var};
use segmoe_core::trainer::{AdamW, Checkpoint, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// 1 -------------------------------------------------------------------------

fn omega_one_equivalence() -> Outcome {
    for draw in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let (d, d_ff, n) = (rng.gen_range(1..9), rng.gen_range(1..12), rng.gen_range(1..7));
        let k = rng.gen_range(1..=n);
        let (bt, m) = (rng.gen_range(1..4), rng.gen_range(1..17));
        // Odd draws keep the shared expert but pin its gate to zero; even
        // draws remove it.
        let shared = draw % 2 == 1;
        let mut store = ParamStore::new();
        let layer = SegMoeLayer::init(&mut store, "moe", d, d_ff, 1, n, k, shared, &mut rng);
        for e in &layer.experts {
            for id in [e.b1, e.b2] {
                let t = random(&mut rng, store.get(id).shape(), 0.5);
                *store.get_mut(id) = t;
            }
        }
        let x = random(&mut rng, &[bt, m, d], 2.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let opts = MoeOptions {
            shared_gate: shared.then_some(0.0),
            ..MoeOptions::default()
        };
        let (y, routing) = layer.forward(&mut g, &p, xv, &opts).map_err(|e| e.to_string())?;
        let experts: Vec<RefExpert> = layer
            .experts
            .iter()
            .map(|e| RefExpert {
                w1: store.get(e.w1).clone(),
                b1: store.get(e.b1).clone(),
                w2: store.get(e.w2).clone(),
                b2: store.get(e.b2).clone(),
            })
            .collect();
        let tokens: Vec<Vec<f64>> = x.data().chunks(d).map(<[f64]>::to_vec).collect();
        let (expected, picks) = token_moe(&tokens, store.get(layer.router), &experts, k);
        ensure(routing.decision.selected == picks, || format!("draw {draw}: routing differs"))?;
        let got = g.value(y).data();
        let want = expected.concat();
        let same = got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0));
        ensure(same && got.len() == want.len(), || {
            format!("draw {draw}: max diff {:e}", got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        })?;
    }
    Ok("100 draws bit-identical to the token-wise reference".into())
}

// 2 -------------------------------------------------------------------------

fn gate_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut segments, mut ties) = (0usize, 0usize);
    while segments < 1000 {
        let (omega, d, n) = (rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..9));
        let k = rng.gen_range(1..=n);
        let m = rng.gen_range(1..24);
        let x = random(&mut rng, &[m, d], 1.5);
        let mut router = random(&mut rng, &[omega * d, n], 1.0);
        if n > 1 && rng.gen_bool(0.3) {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let data = router.data_mut();
            for r in 0..omega * d {
                data[r * n + b] = data[r * n + a];
            }
        }
        let seg = SegBatch::from_tokens(&x, omega).map_err(|e| e.to_string())?;
        let dec = route(&seg, &router, k).map_err(|e| e.to_string())?;
        for s in 0..dec.segments() {
            let (scores, gates) = (dec.scores.row(s), dec.gates.row(s));
            let nonzero = gates.iter().filter(|&&v| v != 0.0).count();
            ensure(nonzero == k, || format!("segment {segments}: {nonzero} nonzero gates, K = {k}"))?;
            for (i, &gv) in gates.iter().enumerate() {
                ensure(gv == 0.0 || gv == scores[i], || format!("segment {segments}: gate {i} is not its score"))?;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut chosen = dec.selected[s].clone();
            chosen.sort_unstable();
            let mut want = order[..k].to_vec();
            want.sort_unstable();
            ensure(chosen == want, || format!("segment {segments}: selected {chosen:?}, expected {want:?}"))?;
            let distinct: BTreeSet<u64> = scores.iter().map(|v| v.to_bits()).collect();
            ties += usize::from(distinct.len() < n);
            segments += 1;
        }
    }
    Ok(format!("{segments} segments, {ties} with tied scores"))
}

// 3 -------------------------------------------------------------------------

fn balance_anchors() -> Outcome {
    for n in 1..=16usize {
        let u = vec![1.0 / n as f64; n];
        let uniform = aux_balance_loss(&u, &u).map_err(|e| e.to_string())?;
        ensure((uniform - 1.0).abs() <= 1e-9, || format!("N={n}: uniform gives {uniform}"))?;
        let mut c = vec![0.0; n];
        c[n / 2] = 1.0;
        let collapse = aux_balance_loss(&c, &c).map_err(|e| e.to_string())?;
        ensure((collapse - n as f64).abs() <= 1e-9, || format!("N={n}: collapse gives {collapse}"))?;
    }
    Ok("uniform = 1, collapse = N for N in 1..=16".into())
}

// 4 -------------------------------------------------------------------------

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> segmoe_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let w = g.constant(random(&mut rng, g.shape(y), 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let kv = rng.gen_range(1..3);
    let q = kv * rng.gen_range(1..3);
    let d = q * 2 * rng.gen_range(1..3);
    let n = rng.gen_range(1..4);
    let blocks = rng.gen_range(1..3);
    ModelConfig {
        blocks,
        d_model: d,
        d_ff: rng.gen_range(2..6),
        q_heads: q,
        kv_heads: kv,
        patch_len: rng.gen_range(2..5),
        lookback: rng.gen_range(4..13),
        h_out: rng.gen_range(1..4),
        experts: n,
        top_k: rng.gen_range(1..=n),
        omega: OmegaSpec::PerBlock((0..blocks).map(|_| rng.gen_range(1..4)).collect()),
        ..ModelConfig::desk()
    }
}

fn gradient_suite() -> Outcome {
    const CONFIGS: u64 = 20;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut check = |name: &str, seed: u64, f: &dyn Fn(&mut Graph, &[Var]) -> segmoe_core::Result<Var>, inputs: &[Tensor]| {
        let opts = GradCheckOptions {
            tol: 1e-4,
            max_elements: Some(8),
            seed,
            ..GradCheckOptions::default()
        };
        let r = check_gradients_with(f, inputs, &opts).map_err(|e| format!("{name} seed {seed}: {e}"))?;
        worst = worst.max(r.max_rel_error());
        checked += r.inputs.iter().map(|i| i.checked).sum::<usize>();
        ensure(r.passed(), || format!("{name} seed {seed}: max relative error {:e}", r.max_rel_error()))
    };
    for seed in 0..CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let cfg = tiny_config(&mut rng);
        let d = cfg.d_model;
        let m = rng.gen_range(1..7);

        let x = random(&mut rng, &[2, m, d], 2.0);
        let gain = random(&mut rng, &[d], 1.5);
        check(
            "rmsnorm",
            seed,
            &|g, v| {
                let y = rmsnorm(g, v[0], v[1])?;
                weighted_sum(g, y, seed)
            },
            &[x.clone(), gain],
        )?;

        let hd = cfg.head_dim();
        let xr = random(&mut rng, &[2, cfg.q_heads, m, hd], 1.0);
        let positions: Vec<f64> = (0..m).map(|p| p as f64).collect();
        check(
            "rope",
            seed,
            &|g, v| {
                let y = g.rope(v[0], &positions, 10_000.0)?;
                weighted_sum(g, y, seed)
            },
            &[xr],
        )?;

        let mut store = ParamStore::new();
        let attn = Attention::init(&mut store, "attn", d, cfg.q_heads, cfg.kv_heads, 10_000.0, &mut rng);
        let mut inputs = vec![x.clone()];
        inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
        check(
            "gqa attention",
            seed,
            &|g, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let (y, _) = attn.forward(g, &p, v[0], None, 0.0, &mut ForwardCtx::eval())?;
                weighted_sum(g, y, seed)
            },
            &inputs,
        )?;

        let omega = rng.gen_range(1..4);
        let mut store = ParamStore::new();
        let layer = SegMoeLayer::init(&mut store, "moe", d, cfg.d_ff, omega, cfg.experts, cfg.top_k, seed % 2 == 0, &mut rng);
        let frozen = {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let (_, r) = layer.forward(&mut g, &p, xv, &MoeOptions::default()).map_err(|e| e.to_string())?;
            r.decision.selected
        };
        let mut inputs = vec![x.clone()];
        inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
        check(
            "expert ffns",
            seed,
            &|g, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let o = MoeOptions {
                    frozen: Some(&frozen),
                    ..MoeOptions::default()
                };
                let (y, _) = layer.forward(g, &p, v[0], &o)?;
                weighted_sum(g, y, seed)
            },
            &inputs,
        )?;

        let delta = rng.gen_range(0.5..3.0);
        let n = rng.gen_range(1..10);
        let target = random(&mut rng, &[n], 1.0);
        let pred: Vec<f64> = target
            .data()
            .iter()
            .map(|t| loop {
                let e: f64 = rng.gen_range(-2.0 * delta..2.0 * delta);
                if (e.abs() - delta).abs() > 1e-3 {
                    break t + e;
                }
            })
            .collect();
        check("huber", seed, &|g, v| huber(g, v[0], v[1], delta), &[Tensor::vector(pred).unwrap(), target])?;

        let model = SegMoeModel::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let inputs_t = random(&mut rng, &[2, cfg.lookback], 1.0);
        let target_t = random(&mut rng, &[2, cfg.h_out], 1.0);
        let frozen: Vec<Vec<Vec<usize>>> = {
            let mut g = Graph::new();
            let p = model.store().bind(&mut g, false);
            let out = model
                .forward(&mut g, &p, &inputs_t, &mut ForwardCtx::eval(), &ForwardOptions::default())
                .map_err(|e| e.to_string())?;
            out.routing.into_iter().map(|r| r.decision.selected).collect()
        };
        let params: Vec<Tensor> = model.store().iter().map(|(_, _, t)| t.clone()).collect();
        check(
            "total loss",
            seed,
            &|g, v| {
                let p = Bound::from_vars(v.to_vec());
                let fo = ForwardOptions {
                    frozen: Some(&frozen),
                    shared_gate: None,
                };
                let out = model.forward(g, &p, &inputs_t, &mut ForwardCtx::eval(), &fo)?;
                let t = g.constant(target_t.clone());
                Ok(total_loss(g, out.pred, t, &out.routing, 0.3, 1.0)?.0)
            },
            &params,
        )?;
    }
    Ok(format!(
        "{CONFIGS} configurations x 6 components, {checked} elements, worst relative error {worst:.2e}"
    ))
}

// 5 -------------------------------------------------------------------------

fn huber_at(e: f64, delta: f64) -> (f64, f64) {
    let mut g = Graph::new();
    let p = g.param(Tensor::scalar(e));
    let t = g.constant(Tensor::scalar(0.0));
    let l = huber(&mut g, p, t, delta).unwrap();
    g.backward(l).unwrap();
    (g.value(l).data()[0], g.grad(p).unwrap()[0])
}

fn huber_anchors() -> Outcome {
    let (a, _) = huber_at(1.0, 2.0);
    ensure(a == 0.5, || format!("e=1, δ=2 gives {a}"))?;
    let (b, _) = huber_at(3.0, 2.0);
    ensure(b == 4.0, || format!("e=3, δ=2 gives {b}"))?;
    let mut gap = 0.0f64;
    for delta in [0.5, 1.0, 2.0, 5.0] {
        for sign in [1.0, -1.0] {
            let (_, below) = huber_at(sign * delta * (1.0 - 1e-10), delta);
            let (_, above) = huber_at(sign * delta * (1.0 + 1e-10), delta);
            gap = gap.max((below - above).abs());
        }
    }
    ensure(gap < 1e-6, || format!("derivative gap {gap:e} at |e| = δ"))?;
    Ok(format!("0.5 and 4 exact; derivative gap {gap:.1e}"))
}

// 6 -------------------------------------------------------------------------

fn padding_neutrality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    while cases < 300 {
        let (m, omega, d) = (rng.gen_range(1..40), rng.gen_range(2..9), rng.gen_range(1..5));
        if m % omega == 0 {
            continue;
        }
        let mut store = ParamStore::new();
        let n = rng.gen_range(1..5);
        let layer = SegMoeLayer::init(&mut store, "moe", d, 4, omega, n, rng.gen_range(1..=n), true, &mut rng);
        let bt = rng.gen_range(1..3);
        let x = random(&mut rng, &[bt, m, d], 1.0);
        let pad = m.div_ceil(omega) * omega - m;
        let fill = random(&mut rng, &[bt, pad, d], 1e3);
        let run = |fill: Option<&Tensor>| -> Result<Tensor, String> {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let f = fill.map(|t| g.constant(t.clone()));
            let o = MoeOptions {
                pad_fill: f,
                ..MoeOptions::default()
            };
            let (y, _) = layer.forward(&mut g, &p, xv, &o).map_err(|e| e.to_string())?;
            Ok(g.value(y).clone())
        };
        ensure(run(None)? == run(Some(&fill))?, || format!("M={m}, ω={omega}: output depends on padding"))?;

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (u, _) = segment_tokens(&mut g, xv, omega, None).map_err(|e| e.to_string())?;
        let back = unsegment_tokens(&mut g, u, bt, m, d).map_err(|e| e.to_string())?;
        ensure(g.value(back) == &x, || format!("M={m}, ω={omega}: un-segment∘segment is not the identity"))?;
        cases += 1;
    }
    Ok(format!("{cases} fuzzed (M, ω) pairs"))
}

// 7 -------------------------------------------------------------------------

fn rope_vec(v: &[f64], pos: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
    let y = g.rope(x, &[pos], 10_000.0).unwrap();
    g.value(y).data().to_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rope_relative() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut shift_err, mut norm_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let hd = 2 * rng.gen_range(1..33);
        let q: Vec<f64> = (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (m, n) = (f64::from(rng.gen_range(0..1024)), f64::from(rng.gen_range(0..1024)));
        let s = f64::from(rng.gen_range(1..1024));
        let a = dot(&rope_vec(&q, m), &rope_vec(&k, n));
        let b = dot(&rope_vec(&q, m + s), &rope_vec(&k, n + s));
        shift_err = shift_err.max((a - b).abs());
        let rq = rope_vec(&q, m);
        norm_err = norm_err.max((dot(&rq, &rq).sqrt() - dot(&q, &q).sqrt()).abs());
    }
    ensure(shift_err <= 1e-7, || format!("inner product changes by {shift_err:e} under a joint shift"))?;
    ensure(norm_err <= 1e-9, || format!("norm changes by {norm_err:e}"))?;
    Ok(format!("1000 draws; shift error {shift_err:.1e}, norm error {norm_err:.1e}"))
}

// 8 -------------------------------------------------------------------------

/// The desk-scale protocol shared by the learning criteria: small preset on
/// sines-3ch, 10 epochs over training windows taken every 32 steps.
fn desk_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::small();
    cfg.data.train_stride = 32;
    cfg.train = TrainConfig {
        peak_lr: 1e-3,
        min_lr: 1e-5,
        max_epochs: 10,
        min_epochs: 10,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    };
    cfg.eval.horizons = vec![96, 192, 336];
    cfg
}

fn desk_learning() -> Outcome {
    let mut cfg = desk_config(0);
    cfg.eval.horizons = vec![96];
    let prepared = prepare(&cfg.data, cfg.model.lookback + cfg.model.h_out).map_err(|e| e.to_string())?;
    let (model, outcome) = train_run(&cfg, &prepared).map_err(|e| e.to_string())?;
    let test = prepared.split.test.clone();
    let fm = ModelForecaster {
        model: &model,
        batch_size: 32,
    };
    let ours = evaluate(&fm, &prepared.data, test.clone(), &[96], cfg.eval_stride()).map_err(|e| e.to_string())?;
    let base = evaluate(&Persistence { lookback: cfg.model.lookback }, &prepared.data, test, &[96], cfg.eval_stride())
        .map_err(|e| e.to_string())?;
    let (m, p) = (ours.rows[0].mse, base.rows[0].mse);
    let gain = 1.0 - m / p;
    let detail = format!(
        "H=96 MSE {m:.4} vs persistence {p:.4} ({:.0}% better, {} windows, {} epochs)",
        100.0 * gain,
        ours.rows[0].windows,
        outcome.history.epochs.len()
    );
    ensure(gain >= 0.30, || detail.clone())?;
    Ok(detail)
}

// 9, 10 ---------------------------------------------------------------------

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn run_ablation(alpha: f64, variants: &[OmegaSpec]) -> Result<AblationReport, String> {
    let mut cfg = desk_config(0);
    cfg.train.alpha = alpha;
    let prepared = prepare(&cfg.data, cfg.model.lookback + cfg.model.h_out).map_err(|e| e.to_string())?;
    let variants: Vec<Variant> = variants.iter().cloned().map(Variant::new).collect();
    let report = ablate(&cfg, &prepared, &variants, &SEEDS).map_err(|e| e.to_string())?;
    eprint!("{}", report.to_text());
    if let Some(bad) = report.rows.iter().find(|r| r.failed()) {
        return Err(format!("variant {} failed to train", bad.variant.id));
    }
    Ok(report)
}

fn ablation_directionality(report: &AblationReport) -> Outcome {
    let mse = |row: usize| -> Vec<f64> { report.rows[row].metrics().iter().map(|m| m.avg_mse).collect() };
    let (seg, tok) = (mse(0), mse(1));
    let (ms, mt) = (median(seg.clone()), median(tok.clone()));
    let wins = seg.iter().zip(&tok).filter(|(s, t)| **s <= 1.05 * **t).count();
    let pairs: Vec<String> = seg.iter().zip(&tok).map(|(s, t)| format!("{s:.4}/{t:.4}")).collect();
    let detail = format!(
        "median avg-MSE ω=4 {ms:.4} vs ω=1 {mt:.4}; {wins}/5 seeds within 1.05x [{}]",
        pairs.join(" ")
    );
    ensure(ms <= mt && wins >= 4, || detail.clone())?;
    Ok(detail)
}

fn load_balance_effect(with_aux: &AblationReport, without: &AblationReport) -> Outcome {
    let ent = |r: &AblationReport| -> Vec<f64> { r.rows[0].metrics().iter().map(|m| m.entropy).collect() };
    let (a, b) = (ent(with_aux), ent(without));
    let (ma, mb) = (median(a.clone()), median(b.clone()));
    let detail = format!(
        "median final usage entropy α=0.02 {ma:.4} vs α=0 {mb:.4} (max ln 4 = {:.4})",
        4f64.ln()
    );
    ensure(ma > mb, || detail.clone())?;
    Ok(detail)
}

// 11 ------------------------------------------------------------------------

/// Counts from the checkpoint manifest: every `param.*` tensor, and the
/// routed experts' tensors grouped by block.
fn manifest_counts(cfg: &ModelConfig) -> Result<(usize, usize, Vec<usize>), String> {
    let model = SegMoeModel::new(cfg.clone(), 3).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::new(model.store(), &AdamW::new(model.store()), 0, 0.0, "{}".into());
    let manifest = ckpt.to_archive().manifest();
    let mut total = 0;
    let mut experts = vec![0; cfg.blocks];
    for e in manifest.iter().filter(|e| e.name.starts_with("param.")) {
        total += e.numel;
        let parts: Vec<&str> = e.name.split('.').collect();
        if parts.len() > 4 && parts[1] == "blocks" && parts[3] == "moe" && parts[4] == "experts" {
            experts[parts[2].parse::<usize>().unwrap()] += e.numel;
        }
    }
    let inactive: usize = experts.iter().map(|&x| x / cfg.experts * (cfg.experts - cfg.top_k)).sum();
    Ok((total, total - inactive, experts))
}

fn parameter_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut configs = vec![ModelConfig::desk(), ModelConfig::small(), ModelConfig::base()];
    for _ in 0..20 {
        configs.push(tiny_config(&mut rng));
    }
    for cfg in &configs {
        let c = count_params(cfg).map_err(|e| e.to_string())?;
        let (total, activated, _) = manifest_counts(cfg)?;
        ensure(c.total == total && c.activated == activated, || {
            format!("{cfg:?}: counted ({}, {}), manifest ({total}, {activated})", c.total, c.activated)
        })?;
    }
    let mut prev = 0;
    for w in 1..=8 {
        let cfg = ModelConfig {
            omega: OmegaSpec::Uniform(w),
            ..ModelConfig::small()
        };
        let t = count_params(&cfg).map_err(|e| e.to_string())?.total;
        ensure(t > prev, || format!("total does not grow from ω={} to ω={w}", w - 1))?;
        prev = t;
    }
    for n in 1..=6 {
        for k in 1..=n {
            let cfg = ModelConfig {
                experts: n,
                top_k: k,
                ..ModelConfig::small()
            };
            let c = count_params(&cfg).map_err(|e| e.to_string())?;
            ensure(c.activated <= c.total && ((c.activated == c.total) == (k == n)), || {
                format!("N={n}, K={k}: activated {} total {}", c.activated, c.total)
            })?;
        }
    }
    let two = count_params(&ModelConfig {
        omega: OmegaSpec::Uniform(2),
        ..ModelConfig::small()
    })
    .map_err(|e| e.to_string())?;
    let five = count_params(&ModelConfig {
        omega: OmegaSpec::Uniform(5),
        ..ModelConfig::small()
    })
    .map_err(|e| e.to_string())?;
    Ok(format!(
        "{} configs match the manifest; small ω=2 {:.2}M -> ω=5 {:.2}M total",
        configs.len(),
        two.total as f64 / 1e6,
        five.total as f64 / 1e6
    ))
}

// 12 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut cfg = desk_config(9);
    cfg.train.max_epochs = 1;
    cfg.train.min_epochs = 1;
    cfg.data.train_stride = 128;
    std::fs::write(d.join("short.toml"), cfg.to_toml()).map_err(|e| e.to_string())?;
    for out in ["a", "b"] {
        let o = Command::new(env!("CARGO_BIN_EXE_segmoe"))
            .args(["train", "--config", "short.toml", "--out", out])
            .current_dir(d)
            .env("SEGMOE_THREADS", "1")
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || format!("train exited with {:?}: {}", o.status, String::from_utf8_lossy(&o.stderr)))?;
    }
    let bytes = |run: &str, f: &str| std::fs::read(Path::new(d).join(run).join(f)).map_err(|e| e.to_string());
    let mut sizes = Vec::new();
    for f in ["checkpoint.bin", "history.csv"] {
        let (a, b) = (bytes("a", f)?, bytes("b", f)?);
        ensure(a == b, || format!("{f} differs between runs"))?;
        sizes.push(format!("{f} {} bytes", a.len()));
    }
    Ok(format!("identical {}", sizes.join(", ")))
}

// ---------------------------------------------------------------------------

struct Line {
    id: usize,
    name: &'static str,
    budget: Duration,
}

fn report(line: &Line, outcome: &Outcome, took: Duration) -> bool {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let over = if took > line.budget { " (over time budget)" } else { "" };
    println!("[{tag}] {:>2} {}: {detail} [{:.1}s{over}]", line.id, line.name, took.as_secs_f64());
    outcome.is_ok()
}

fn main() {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |id: usize| wanted.is_empty() || wanted.contains(&id);
    let min = |m: u64| Duration::from_secs(60 * m);
    let quick: Vec<(Line, fn() -> Outcome)> = vec![
        (Line { id: 1, name: "omega=1 equivalence", budget: min(1) }, omega_one_equivalence),
        (Line { id: 2, name: "gate contract", budget: min(1) }, gate_contract),
        (Line { id: 3, name: "balance-loss anchors", budget: min(1) }, balance_anchors),
        (Line { id: 4, name: "gradient suite", budget: min(5) }, gradient_suite),
        (Line { id: 5, name: "huber anchors", budget: min(1) }, huber_anchors),
        (Line { id: 6, name: "padding neutrality", budget: min(1) }, padding_neutrality),
        (Line { id: 7, name: "rope relative position", budget: min(1) }, rope_relative),
        (Line { id: 8, name: "desk-scale learning", budget: min(20) }, desk_learning),
        (Line { id: 11, name: "parameter accounting", budget: min(1) }, parameter_accounting),
        (Line { id: 12, name: "determinism", budget: min(5) }, determinism),
    ];
    let mut results: Vec<(usize, bool)> = Vec::new();
    for (line, f) in quick {
        if !on(line.id) {
            continue;
        }
        let t = Instant::now();
        let outcome = f();
        results.push((line.id, report(&line, &outcome, t.elapsed())));
    }

    if on(9) || on(10) {
        let l9 = Line { id: 9, name: "ablation directionality", budget: min(120) };
        let l10 = Line { id: 10, name: "load-balance effect", budget: min(120) };
        let t = Instant::now();
        let main_run = run_ablation(0.02, &[OmegaSpec::Uniform(4), OmegaSpec::Uniform(1)]);
        if on(9) {
            let outcome = main_run.as_ref().map_err(Clone::clone).and_then(ablation_directionality);
            results.push((9, report(&l9, &outcome, t.elapsed())));
        }
        if on(10) {
            let t10 = Instant::now();
            let outcome = run_ablation(0.0, &[OmegaSpec::Uniform(4)]).and_then(|no_aux| {
                let with_aux = main_run.as_ref().map_err(Clone::clone)?;
                load_balance_effect(with_aux, &no_aux)
            });
            results.push((10, report(&l10, &outcome, t10.elapsed())));
        }
    }

    results.sort_unstable();
    let failed: Vec<String> = results.iter().filter(|r| !r.1).map(|r| r.0.to_string()).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
