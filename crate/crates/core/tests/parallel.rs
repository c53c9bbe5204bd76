mod support;

use inferix_core::attention::{block_causal_mask, AttentionMask};
use inferix_core::parallel::{
    all_to_all, choose_strategy, predicted_traffic, ring_attention_pass_kv, ring_attention_pass_q, run_strategy,
    ulysses_attention, AttentionProblem, LinkCostModel, Lockstep, ParallelError, ShardAxis, ShardSpec, Strategy,
};
use inferix_core::Tensor;
use proptest::prelude::*;
use support::{max_diff, mha_oracle, rand_mask, rand_tensor, rng};

fn problem(q: &Tensor, k: &Tensor, heads: usize, world: usize) -> AttentionProblem {
    AttentionProblem {
        q_len: q.rows(),
        kv_len: k.rows(),
        heads,
        head_dim: q.cols() / heads,
        world_size: world,
    }
}

fn shards(t: &Tensor, world: usize) -> Vec<Tensor> {
    ShardSpec::even(ShardAxis::Sequence, t.rows(), world)
        .unwrap()
        .split_rows(t)
        .unwrap()
}

#[test]
fn all_to_all_examples() {
    let tag = |i: usize, j: usize| Tensor::matrix(1, 1, vec![(10 * i + j) as f32]).unwrap();
    let send1 = vec![vec![tag(0, 0)]];
    let (recv, trace) = all_to_all(&Lockstep, send1.clone()).unwrap();
    assert_eq!(recv, send1);
    assert_eq!(trace.records.len(), 1);

    let send: Vec<Vec<Tensor>> = (0..3).map(|i| (0..3).map(|j| tag(i, j)).collect()).collect();
    let (recv, trace) = all_to_all(&Lockstep, send.clone()).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(recv[j][i], send[i][j]);
        }
    }
    assert_eq!(trace.records.len(), 9);
    assert_eq!(trace.bytes_sent(), trace.bytes_received);
}

#[test]
fn ulysses_seed11() {
    let mut r = rng(11);
    let (q, k, v) = (rand_tensor(&mut r, 32, 16), rand_tensor(&mut r, 32, 16), rand_tensor(&mut r, 32, 16));
    let mask = AttentionMask::full(32, 32);
    let (out, _) = run_strategy(&Lockstep, Strategy::Ulysses, 4, &q, &k, &v, 4, &mask).unwrap();
    assert!(max_diff(&out, &mha_oracle(&q, &k, &v, 4, &mask)) <= 1e-5);
}

#[test]
fn ulysses_needs_divisible_heads() {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, 8, 6);
    let err = ulysses_attention(&Lockstep, &shards(&x, 2), &shards(&x, 2), &shards(&x, 2), 3, &AttentionMask::full(8, 8));
    assert_eq!(err.unwrap_err(), ParallelError::HeadsNotDivisible { heads: 3, world: 2 });
}

#[test]
fn world_one_is_exactly_dense() {
    let mut r = rng(2);
    let (q, k, v) = (rand_tensor(&mut r, 10, 8), rand_tensor(&mut r, 10, 8), rand_tensor(&mut r, 10, 8));
    let mask = block_causal_mask(5, 2).unwrap();
    let dense = inferix_core::attention::multi_head_attention(&q, &k, &v, 2, &mask).unwrap();
    for s in Strategy::ALL {
        let (out, trace) = run_strategy(&Lockstep, s, 1, &q, &k, &v, 2, &mask).unwrap();
        assert_eq!(out, dense, "{}", s.name());
        assert_eq!(trace.wire_messages(), 0);
    }
}

#[test]
fn ring_variants_on_24_tokens() {
    let mut r = rng(24);
    let (q, k, v) = (rand_tensor(&mut r, 24, 8), rand_tensor(&mut r, 24, 8), rand_tensor(&mut r, 24, 8));
    let mask = block_causal_mask(4, 6).unwrap();
    let oracle = mha_oracle(&q, &k, &v, 2, &mask);
    let (qs, ks, vs) = (shards(&q, 3), shards(&k, 3), shards(&v, 3));
    let (kv_out, kv_trace) = ring_attention_pass_kv(&Lockstep, &qs, &ks, &vs, 2, &mask).unwrap();
    let (q_out, q_trace) = ring_attention_pass_q(&Lockstep, &qs, &ks, &vs, 2, &mask).unwrap();
    let kv_out = Tensor::concat_rows(&kv_out.iter().collect::<Vec<_>>()).unwrap();
    let q_out = Tensor::concat_rows(&q_out.iter().collect::<Vec<_>>()).unwrap();
    assert!(max_diff(&kv_out, &oracle) <= 1e-5);
    assert!(kv_out.max_abs_diff(&q_out) <= 1e-5);

    // 2 rotations x 3 workers, each to the ring successor
    assert_eq!(kv_trace.records.len(), 6);
    for rec in &kv_trace.records {
        assert_eq!(rec.receiver, (rec.sender + 1) % 3);
    }
    // per-rotation payloads: 8-token shards, 2 heads of width 4
    let (n, h, d) = (8, 2, 4);
    let f = 4;
    for rec in kv_trace.records.iter().filter(|r| r.step == 0) {
        assert_eq!(rec.bytes, f * 2 * n * h * d);
    }
    for rec in q_trace.records.iter().filter(|r| r.step == 0) {
        assert_eq!(rec.bytes, f * (n * h * d + n * h * (d + 2)));
    }
}

#[test]
fn strategy_choice_examples() {
    let model = LinkCostModel::default();
    let p = AttentionProblem {
        q_len: 16,
        kv_len: 16,
        heads: 4,
        head_dim: 8,
        world_size: 1,
    };
    let c = choose_strategy(&p, &model);
    assert_eq!((c.strategy, c.cost), (Strategy::Ulysses, 0.0));

    let p = AttentionProblem { heads: 2, world_size: 4, ..p };
    assert_ne!(choose_strategy(&p, &model).strategy, Strategy::Ulysses);

    // short queries against a long context favour moving queries on a bandwidth-bound link
    let model = LinkCostModel {
        per_message: 0.0,
        per_byte: 1.0,
    };
    let mut r = rng(5);
    let (q, k, v) = (rand_tensor(&mut r, 4, 8), rand_tensor(&mut r, 64, 8), rand_tensor(&mut r, 64, 8));
    let mask = AttentionMask::full(4, 64);
    let p = problem(&q, &k, 2, 2);
    let winner = choose_strategy(&p, &model).strategy;
    assert_eq!(winner, Strategy::RingPassQ);
    let measured: Vec<(Strategy, usize)> = Strategy::ALL
        .iter()
        .map(|&s| (s, run_strategy(&Lockstep, s, 2, &q, &k, &v, 2, &mask).unwrap().1.wire_bytes()))
        .collect();
    let win_bytes = measured.iter().find(|m| m.0 == winner).unwrap().1;
    assert!(measured.iter().all(|m| win_bytes <= m.1), "{measured:?}");
}

#[test]
fn trace_export_lines() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, 6, 4);
    let (_, trace) = run_strategy(&Lockstep, Strategy::RingPassKv, 2, &x, &x, &x, 1, &AttentionMask::full(6, 6)).unwrap();
    let lines = trace.to_lines();
    assert_eq!(lines.lines().count(), 2);
    for l in lines.lines() {
        assert_eq!(l.split('\t').count(), 5);
    }
}

fn mask_for(kind: u8, r: &mut impl rand::Rng, n: usize, m: usize) -> AttentionMask {
    match kind {
        0 => AttentionMask::full(n, m),
        1 if n == m => {
            let bl = (1..=n).rev().find(|b| n.is_multiple_of(*b) && *b <= 8).unwrap();
            block_causal_mask(n / bl, bl).unwrap()
        }
        _ => rand_mask(r, n, m),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn strategies_match_dense(
        seed in any::<u64>(),
        n in 1usize..=64,
        m in 1usize..=64,
        same_len in any::<bool>(),
        heads in prop::sample::select(vec![1usize, 2, 4]),
        world in prop::sample::select(vec![1usize, 2, 4]),
        mask_kind in 0u8..3,
        d in 1usize..=4,
    ) {
        let m = if same_len { n } else { m };
        let mut r = rng(seed);
        let q = rand_tensor(&mut r, n, heads * d);
        let k = rand_tensor(&mut r, m, heads * d);
        let v = rand_tensor(&mut r, m, heads * d);
        let mask = mask_for(mask_kind, &mut r, n, m);
        let oracle = mha_oracle(&q, &k, &v, heads, &mask);
        let p = problem(&q, &k, heads, world);
        for s in Strategy::ALL {
            let res = run_strategy(&Lockstep, s, world, &q, &k, &v, heads, &mask);
            if s == Strategy::Ulysses && heads % world != 0 {
                let rejected = matches!(res, Err(ParallelError::HeadsNotDivisible { .. }));
                prop_assert!(rejected);
                continue;
            }
            let (out, trace) = res.unwrap();
            prop_assert!(max_diff(&out, &oracle) <= 1e-5, "{}", s.name());
            let predicted = predicted_traffic(s, &p);
            prop_assert_eq!(predicted.bytes, trace.wire_bytes(), "{}", s.name());
            prop_assert_eq!(predicted.messages, trace.wire_messages(), "{}", s.name());
            prop_assert_eq!(trace.bytes_sent(), trace.bytes_received);
        }
    }
}
