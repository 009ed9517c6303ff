use std::collections::BTreeMap;

use proptest::prelude::*;

use prefixcl::bench::{generate_stream, StreamConfig};
use prefixcl::encoder::EncoderConfig;
use prefixcl::numkit::Rng;
use prefixcl::promptpool::{init_pool, select, PoolShape};
use prefixcl::replay::fit_gaussians;
use prefixcl::voting::{cascade, PoolVote};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cascade_decision_is_a_learned_task(k in 1usize..10, m_off in 0usize..10, seed in any::<u64>()) {
        let m = 1 + m_off % k;
        let mut rng = Rng::new(seed);
        let votes: Vec<usize> = (0..=k).map(|i| i.max(1) + rng.below(k - i.max(1) + 1)).collect();
        let mut asked = Vec::new();
        let (d, trace) = cascade(k, m, |i| {
            asked.push(i);
            Ok(PoolVote { pool: i, vote: votes[i], scores: vec![] })
        }).unwrap();
        prop_assert!((1..=k).contains(&d));
        prop_assert_eq!(trace.replay_decision(), d);
        // pools are consulted in order and never past min(v0, v1, m)
        prop_assert_eq!(&asked, &(0..asked.len()).collect::<Vec<_>>());
        prop_assert!(asked.len() <= 2.max(votes[0].min(votes[1]).min(m) + 1));
        if votes[0] == votes[1] {
            prop_assert!(trace.fast_path);
            prop_assert_eq!(d, votes[0]);
        }
    }

    #[test]
    fn unanimous_votes_decide(k in 1usize..10, t_off in 0usize..10) {
        let t = 1 + t_off % k;
        let (d, _) = cascade(k, k, |i| Ok(PoolVote { pool: i, vote: t.max(i.max(1)), scores: vec![] })).unwrap();
        prop_assert_eq!(d, t);
    }

    #[test]
    fn selection_returns_sorted_distinct_entries(size in 1usize..9, k_off in 0usize..8, seed in any::<u64>()) {
        let top_k = 1 + k_off % size;
        let enc = EncoderConfig::new(8, 2, 1, 8, 16);
        let pool = init_pool(1, PoolShape { size, top_k, prompt_len: 1 }, &enc, &mut Rng::new(seed)).unwrap();
        let q = Rng::new(seed ^ 1).normal_vec(8, 1.0);
        let idx = select(&pool, &q).unwrap();
        prop_assert_eq!(idx.len(), top_k);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let s = pool.scores(&q).unwrap();
        let worst_in = idx.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
        for (j, &sj) in s.iter().enumerate() {
            if !idx.contains(&j) {
                prop_assert!(sj >= worst_in);
            }
        }
    }

    #[test]
    fn fitted_covariance_is_symmetric_psd_on_diagonal(dim in 1usize..5, sizes in prop::collection::vec(1usize..6, 1..4), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let groups: BTreeMap<usize, Vec<Vec<f64>>> = sizes
            .iter()
            .enumerate()
            .map(|(r, &n)| (r, (0..n).map(|_| rng.normal_vec(dim, 1.0)).collect()))
            .collect();
        let stat = fit_gaussians(&groups, 0, 1).unwrap();
        let c = stat.covariance();
        for a in 0..dim {
            prop_assert!(c[(a, a)] >= 0.0);
            for b in 0..dim {
                prop_assert!((c[(a, b)] - c[(b, a)]).abs() < 1e-12);
            }
        }
        // translating every point leaves the covariance unchanged
        let shift = rng.normal_vec(dim, 5.0);
        let moved: BTreeMap<usize, Vec<Vec<f64>>> = groups
            .iter()
            .map(|(r, zs)| (*r, zs.iter().map(|z| z.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect()))
            .collect();
        let c2 = fit_gaussians(&moved, 0, 1).unwrap();
        for a in 0..dim {
            for b in 0..dim {
                prop_assert!((c[(a, b)] - c2.covariance()[(a, b)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn streams_are_well_formed(tasks in 1usize..4, rel in 1usize..5, seed in any::<u64>()) {
        let cfg = StreamConfig { tasks, relations_per_task: rel, train_per_relation: 3, test_per_relation: 2, ..StreamConfig::default() };
        let s = generate_stream(&cfg, seed).unwrap();
        prop_assert_eq!(s.len(), tasks);
        for (t, data) in s.tasks.iter().enumerate() {
            prop_assert_eq!(data.task, t + 1);
            prop_assert_eq!(data.relations.clone(), (t * rel..(t + 1) * rel).collect::<Vec<_>>());
            for x in data.train.iter().chain(&data.test).chain(&data.descriptions) {
                prop_assert_eq!(x.tokens.len(), cfg.seq_len);
                prop_assert!(x.e1_pos != x.e2_pos);
                prop_assert!(x.e1_pos < cfg.seq_len && x.e2_pos < cfg.seq_len);
                prop_assert!(data.relations.contains(&x.label));
                prop_assert!(x.tokens.iter().all(|&tok| (tok as usize) < cfg.vocab));
            }
        }
    }
}
