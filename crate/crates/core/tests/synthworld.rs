use proptest::prelude::*;
use rewardbench::synthworld::*;

fn world(seed: u64) -> (Vec<TaskSpec>, ViewRenderer, WorldConfig) {
    let cfg = WorldConfig::default();
    (
        make_task_suite(seed, &cfg).unwrap(),
        ViewRenderer::new(seed, &cfg).unwrap(),
        cfg,
    )
}

#[test]
fn random_policy_rarely_finishes_two_stage_tasks() {
    let (tasks, r, cfg) = world(0);
    let task = tasks.iter().find(|t| t.stages == 2 && t.held_out).unwrap();
    let failures = (0..100)
        .filter(|&s| {
            gen_rollout(task, PolicyTag::Random, 64, s, &r, &cfg)
                .unwrap()
                .rewards[63]
                < 1.0
        })
        .count();
    assert!(failures >= 99, "{failures}");
}

#[test]
fn render_noise_matches_configured_sigma() {
    let (_, r, _) = world(3);
    let state = vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.0, 0.2];
    let clean = r.project(&state, 1).unwrap();
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for seed in 0..10_000u64 {
        let o = render_view(&r, &state, 1, seed).unwrap();
        // one coordinate per render keeps the samples independent
        let e = o.data()[(seed % 32) as usize] - clean[(seed % 32) as usize];
        sum += e;
        sq += e * e;
        n += 1.0;
    }
    let var = sq / n - (sum / n).powi(2);
    let sd = var.sqrt();
    assert!((sd - 0.05).abs() < 0.05 * 0.05, "{sd}");
}

fn state(e: [f64; 3], o: [f64; 3], grasp: f64) -> Vec<f64> {
    let mut s = e.to_vec();
    s.extend_from_slice(&o);
    s.push(grasp);
    s.push(0.0);
    s
}

#[test]
fn stage_one_midpoint_scores_a_quarter() {
    // progress runs from zero at distance `scale` to one at the success radius
    let (tasks, _, _) = world(1);
    let task = tasks.iter().find(|t| t.stages == 2).unwrap();
    let o = task.object_home;
    let far = task.shaping_scale;
    let mid = (far + task.success_radius) / 2.0;
    let mut e = o;
    e[0] -= mid;
    let r = ground_truth_reward(task, &state(e, o, 0.0)).unwrap();
    assert!((r - 0.25).abs() < 1e-12, "{r}");
    let mut e = o;
    e[0] -= far;
    assert!(ground_truth_reward(task, &state(e, o, 0.0)).unwrap().abs() < 1e-12);
}

#[test]
fn archive_generation_is_deterministic_and_separated() {
    let cfg = WorldConfig {
        expert_per_heldout_task: 3,
        suboptimal_per_heldout_task: 2,
        random_per_heldout_task: 2,
        ..Default::default()
    };
    let a = RolloutArchive::generate(11, &cfg).unwrap();
    let b = RolloutArchive::generate(11, &cfg).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.training_demos().len(), 12 * 3);

    let held: Vec<u32> = a.heldout_tasks().map(|t| t.goal_id).collect();
    assert!(a
        .training_demos()
        .iter()
        .all(|r| !held.contains(&r.goal_id)));
    for h in a.heldout_tasks() {
        for t in a.train_tasks() {
            assert_ne!(h.object_home, t.object_home);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/archive.bin");
    save_archive(&a, &path).unwrap();
    assert_eq!(load_archive(&path).unwrap(), a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rewards_bounded_for_every_policy(suite in 0u64..50, seed in any::<u64>(), ti in 0usize..15) {
        let (tasks, r, cfg) = world(suite);
        for p in [PolicyTag::Expert, PolicyTag::Suboptimal, PolicyTag::Random] {
            let ro = gen_rollout(&tasks[ti], p, 64, seed, &r, &cfg).unwrap();
            prop_assert!(ro.rewards.iter().all(|x| (0.0..=1.0).contains(x)));
            if tasks[ti].stages == 2 {
                for t in 0..64 {
                    if ro.states.row(t)[6] < 0.5 {
                        prop_assert!(ro.rewards[t] <= 0.5);
                    }
                }
            }
            if p == PolicyTag::Expert {
                prop_assert!(ro.rewards.windows(2).all(|w| w[1] >= w[0]));
                prop_assert_eq!(ro.rewards[63], 1.0);
            }
        }
    }

    #[test]
    fn reward_one_only_on_success(e in prop::array::uniform3(-1.0f64..1.0), g in 0u8..2) {
        let (tasks, _, _) = world(0);
        let task = &tasks[1];
        let s = state(e, task.object_home, f64::from(g));
        let r = ground_truth_reward(task, &s).unwrap();
        let done = if g == 1 {
            (0..3).map(|a| (task.object_home[a] - task.goal[a]).powi(2)).sum::<f64>().sqrt() <= task.success_radius
        } else {
            false
        };
        prop_assert_eq!(r == 1.0, done);
    }
}
