//! Structural properties of routing, segmentation, rotary positions, the
//! objective and the data pipeline.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segmoe_core::data::{chronological_split, make_windows, normalize_window, Dataset, SplitSizes};
use segmoe_core::objective::{aux_balance_loss, huber};
use segmoe_core::params::ParamStore;
use segmoe_core::segmoe::reference::{token_moe, RefExpert};
use segmoe_core::segmoe::{route, segment_tokens, unsegment_tokens, MoeOptions, SegBatch, SegMoeLayer};
use segmoe_core::tensor::{Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn omega_one_equals_token_wise_moe_bit_exactly() {
    for draw in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let (d, d_ff, n) = (rng.gen_range(1..7), rng.gen_range(1..9), rng.gen_range(1..6));
        let k = rng.gen_range(1..=n);
        let (bt, m) = (rng.gen_range(1..3), rng.gen_range(1..9));
        let mut store = ParamStore::new();
        let layer = SegMoeLayer::init(&mut store, "moe", d, d_ff, 1, n, k, false, &mut rng);
        // non-zero biases so their placement matters
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
        let (y, routing) = layer.forward(&mut g, &p, xv, &MoeOptions::default()).unwrap();

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
        assert_eq!(routing.decision.selected, picks, "draw {draw}");
        let flat: Vec<f64> = expected.concat();
        assert_eq!(g.value(y).data(), flat.as_slice(), "draw {draw}");
    }
}

#[test]
fn gate_contract_on_fuzzed_segments() {
    let mut segments = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    while segments < 1000 {
        let (omega, d, n) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..7));
        let k = rng.gen_range(1..=n);
        let m = rng.gen_range(1..20);
        let x = random(&mut rng, &[m, d], 1.0);
        let mut router = random(&mut rng, &[omega * d, n], 1.0);
        if rng.gen_bool(0.3) {
            // duplicate a column to force exact score ties
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let cols = n;
            let data = router.data_mut();
            for r in 0..omega * d {
                data[r * cols + b] = data[r * cols + a];
            }
        }
        let seg = SegBatch::from_tokens(&x, omega).unwrap();
        let dec = route(&seg, &router, k).unwrap();
        for s in 0..dec.segments() {
            let scores = dec.scores.row(s);
            let gates = dec.gates.row(s);
            assert_eq!(gates.iter().filter(|&&v| v != 0.0).count(), k);
            for (i, &gv) in gates.iter().enumerate() {
                if gv != 0.0 {
                    assert_eq!(gv, scores[i]);
                }
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(dec.selected[s], order[..k]);
            segments += 1;
        }
    }
}

proptest! {
    #[test]
    fn padded_slot_content_is_irrelevant(
        m in 1usize..24,
        omega in 2usize..7,
        d in 1usize..4,
        seed in 0u64..1000,
    ) {
        prop_assume!(m % omega != 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = SegMoeLayer::init(&mut store, "moe", d, 4, omega, 3, 2, true, &mut rng);
        let x = random(&mut rng, &[2, m, d], 1.0);
        let pad = m.div_ceil(omega) * omega - m;
        let fill = random(&mut rng, &[2, pad, d], 100.0);
        let run = |fill: Option<&Tensor>| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let f = fill.map(|t| g.constant(t.clone()));
            let o = MoeOptions { pad_fill: f, ..MoeOptions::default() };
            let (y, _) = layer.forward(&mut g, &p, xv, &o).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(run(None), run(Some(&fill)));
    }

    #[test]
    fn unsegment_inverts_segment(m in 1usize..40, omega in 1usize..9, d in 1usize..5) {
        let x = Tensor::new(vec![1, m, d], (0..m * d).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (u, c) = segment_tokens(&mut g, xv, omega, None).unwrap();
        prop_assert_eq!(c, m.div_ceil(omega));
        let back = unsegment_tokens(&mut g, u, 1, m, d).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }

    #[test]
    fn balance_loss_is_at_least_one_when_usage_matches_scores(
        raw in proptest::collection::vec(0.01f64..1.0, 1..10),
    ) {
        let s: f64 = raw.iter().sum();
        let f: Vec<f64> = raw.iter().map(|v| v / s).collect();
        prop_assert!(aux_balance_loss(&f, &f).unwrap() >= 1.0 - 1e-12);
    }

    #[test]
    fn instance_norm_round_trip(w in proptest::collection::vec(-50.0f64..50.0, 2..64)) {
        let (z, st) = normalize_window(&w);
        for (a, b) in w.iter().zip(&z) {
            prop_assert!((st.denormalize(*b) - a).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}

fn rope_vec(v: &[f64], pos: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
    let y = g.rope(x, &[pos], 10_000.0).unwrap();
    g.value(y).data().to_vec()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn rope_depends_on_relative_position_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let hd = 2 * rng.gen_range(1..17);
        let q: Vec<f64> = (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (m, n) = (f64::from(rng.gen_range(0..512)), f64::from(rng.gen_range(0..512)));
        let shift = f64::from(rng.gen_range(1..512));
        let a = dot(&rope_vec(&q, m), &rope_vec(&k, n));
        let b = dot(&rope_vec(&q, m + shift), &rope_vec(&k, n + shift));
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        let rq = rope_vec(&q, m);
        assert!((dot(&rq, &rq).sqrt() - dot(&q, &q).sqrt()).abs() < 1e-9);
    }
}

#[test]
fn huber_derivative_is_continuous_at_delta() {
    let slope = |e: f64, delta: f64| {
        let mut g = Graph::new();
        let p = g.param(Tensor::scalar(e));
        let t = g.constant(Tensor::scalar(0.0));
        let l = huber(&mut g, p, t, delta).unwrap();
        g.backward(l).unwrap();
        g.grad(p).unwrap()[0]
    };
    for delta in [0.5, 1.0, 2.0, 3.7] {
        for sign in [1.0, -1.0] {
            let below = slope(sign * delta * (1.0 - 1e-9), delta);
            let above = slope(sign * delta * (1.0 + 1e-9), delta);
            assert!((below - above).abs() < 1e-6, "δ={delta}: {below} vs {above}");
        }
    }
}

fn ramp(len: usize, channels: usize) -> Dataset {
    let cols: Vec<Vec<f64>> = (0..channels).map(|c| (0..len).map(|t| (t * 10 + c) as f64).collect()).collect();
    let names = (0..channels).map(|c| format!("c{c}")).collect();
    Dataset::from_columns(names, &cols).unwrap()
}

#[test]
fn window_count_matches_enumeration() {
    for t in [1usize, 7, 16, 33, 64] {
        let ds = ramp(t, 2);
        for l in 1..=16 {
            for h in 1..=16 {
                for stride in 1..=16 {
                    let stream = make_windows(&ds, 0..t, l, h, stride).unwrap();
                    let mut expected = 0;
                    for start in (0..t).step_by(stride) {
                        if start + l + h <= t {
                            expected += ds.channels();
                        }
                    }
                    assert_eq!(stream.len(), expected, "T={t} L={l} H={h} stride={stride}");
                }
            }
        }
    }
}

#[test]
fn no_window_reads_across_split_boundaries() {
    // Each value encodes its own time index, so the batches reveal exactly
    // which steps a sample touched.
    let t = 60;
    let ds = ramp(t, 2);
    let split = chronological_split(t, &SplitSizes::Explicit([30, 12, 18])).unwrap();
    for (l, h) in [(4, 2), (8, 4), (5, 7)] {
        for range in [split.train.clone(), split.val.clone(), split.test.clone()] {
            let stream = make_windows(&ds, range.clone(), l, h, 1).unwrap();
            for p in stream.positions() {
                let touched = p.start..p.start + l + h;
                assert!(touched.start >= range.start && touched.end <= range.end);
            }
            for batch in stream.batches(7, None) {
                let batch = batch.unwrap();
                for (i, st) in batch.stats.iter().enumerate() {
                    for &z in batch.targets.row(i) {
                        let time = ((st.denormalize(z) - batch.channels[i] as f64) / 10.0).round() as usize;
                        assert!(range.contains(&time), "target time {time} outside {range:?}");
                    }
                }
            }
        }
    }
    assert!(split.train.end <= split.val.start && split.val.end <= split.test.start);
}
