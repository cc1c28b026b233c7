//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::time::{Duration, Instant};

use spatial_lab::flow::{
    apply_adapter, fm_pretrain, ode_sample, sde_sample, FlowExample, LinearGaussianVelocity, PretrainConfig,
    SdeSchedule, VelocityNet,
};
use spatial_lab::forge::{build_dataset, forge_dataset, verify_pair, ForgeConfig, PreferencePair, Verdict};
use spatial_lab::grpo::{
    compute_advantages, diagnose_advantage_bias, evaluate_policy, grpo_loss, grpo_train, rollout_group, GrpoConfig,
    GrpoState, PolicyEval,
};
use spatial_lab::numerics::{mean, pop_std, Adam, MlpParams, RngStream};
use spatial_lab::reward::{bt_loss_frozen, train_reward, AccuracyReport, RewardNet, RewardTrainConfig};
use spatial_lab::scene::{oracle_score, relation_satisfied, Predicate, RelationAtom, Scene, SpatialPrompt, DEFAULT_MARGIN};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let h = 1e-5;
    let mut worst_mlp: f64 = 0.0;
    let mut worst_bt: f64 = 0.0;
    for seed in 0..20u64 {
        let mut s = RngStream::new(seed, 101);
        let net = MlpParams::random(&[5, 9, 7, 3], &mut s).unwrap();
        let x = s.gauss_draw(5);
        let up = s.gauss_draw(3);
        let f = |p: &MlpParams, x: &[f64]| -> f64 {
            p.forward(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let (grads, dx) = net.backward(&x, &up).unwrap();
        let g = grads.flat();
        let theta = net.flat();
        for i in 0..theta.len() {
            let mut p = net.clone();
            let mut t = theta.clone();
            t[i] += h;
            p.set_flat(&t).unwrap();
            let fp = f(&p, &x);
            t[i] -= 2.0 * h;
            p.set_flat(&t).unwrap();
            let fm = f(&p, &x);
            worst_mlp = worst_mlp.max(rel_err(g[i], (fp - fm) / (2.0 * h)));
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            worst_mlp = worst_mlp.max(rel_err(dx[i], (f(&net, &xp) - f(&net, &xm)) / (2.0 * h)));
        }

        let rn = RewardNet::new(4, 12, &[12, 8], &mut s).unwrap();
        let prompt = SpatialPrompt::new(
            vec![0, 3, 5, 7],
            vec![RelationAtom::new(0, Predicate::LeftOf, 1), RelationAtom::new(2, Predicate::Near, 3)],
        )
        .unwrap();
        let pos = |s: &mut RngStream| -> Vec<[f64; 2]> { (0..4).map(|_| [s.uniform(), s.uniform()]).collect() };
        let w = Scene::new(&[0, 3, 5, 7], &pos(&mut s)).unwrap();
        let l = Scene::new(&[0, 3, 5, 7], &pos(&mut s)).unwrap();
        let ew = s.gauss_draw(16);
        let el = s.gauss_draw(16);
        let base = bt_loss_frozen(&rn, &prompt, &w, &l, &ew, &el).unwrap();
        let g = base.grads.flat();
        let theta = rn.mlp.flat();
        let loss_at = |t: &[f64]| {
            let mut r = rn.clone();
            r.mlp.set_flat(t).unwrap();
            bt_loss_frozen(&r, &prompt, &w, &l, &ew, &el).unwrap().loss
        };
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += h;
            let lp = loss_at(&t);
            t[i] -= 2.0 * h;
            let lm = loss_at(&t);
            worst_bt = worst_bt.max(rel_err(g[i], (lp - lm) / (2.0 * h)));
        }
    }
    outcome(
        worst_mlp <= 1e-4 && worst_bt <= 1e-4,
        format!("max rel err mlp_backward={worst_mlp:.2e} bt_loss={worst_bt:.2e} over 20 seeds"),
    )
}

fn criterion_2() -> Outcome {
    let field = LinearGaussianVelocity { dim: 1 };
    let schedule = SdeSchedule {
        steps: 100,
        noise_level: 0.7,
        t_min: 1e-3,
    };
    let root = RngStream::new(2, 0);
    let n = 100_000;
    let samples: Vec<f64> = (0..n)
        .map(|i| sde_sample(&field, &[], &schedule, &mut root.derive(i)).unwrap().final_state()[0])
        .collect();
    let m = mean(&samples);
    let var = pop_std(&samples).powi(2);

    let quiet = SdeSchedule {
        noise_level: 0.0,
        steps: 6,
        ..schedule
    };
    let net = VelocityNet::new(4, 12, &[32, 32], &mut RngStream::new(3, 0)).unwrap();
    let prompt = SpatialPrompt::new(vec![1, 2, 3, 4], vec![RelationAtom::new(0, Predicate::Above, 2)]).unwrap();
    let cond = net.condition(&prompt);
    let mut bitwise = true;
    for i in 0..500 {
        let a = sde_sample(&field, &[], &quiet, &mut root.derive(n + i)).unwrap();
        bitwise &= ode_sample(&field, &[], &quiet, a.states[0].clone()).unwrap() == a.states;
        let b = sde_sample(&net, &cond, &quiet, &mut root.derive(2 * n + i)).unwrap();
        bitwise &= ode_sample(&net, &cond, &quiet, b.states[0].clone()).unwrap() == b.states;
    }
    outcome(
        m.abs() < 0.02 && (var - 1.0).abs() < 0.05 && bitwise,
        format!("1e5 samples mean={m:.4} var={var:.4}; sigma=0 equals ODE bitwise: {bitwise}"),
    )
}

fn criterion_3() -> Outcome {
    let cfg = ForgeConfig {
        train_n: 2000,
        eval_n: 100,
        ..ForgeConfig::default()
    };
    let (train, _, _) = forge_dataset(&cfg, 33).unwrap();
    let mut winners_ok = 0;
    let mut losers_ok = 0;
    for p in &train {
        if oracle_score(&p.winner, &p.prompt).unwrap().fraction == 1.0 && verify_pair(p) == Verdict::Accept {
            winners_ok += 1;
        }
        if p
            .perturbation
            .targets()
            .all(|a| !relation_satisfied(&p.loser, a, DEFAULT_MARGIN).unwrap())
        {
            losers_ok += 1;
        }
    }
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (fa, _) = build_dataset(&cfg, 33, dir_a.path()).unwrap();
    let (fb, _) = build_dataset(&cfg, 33, dir_b.path()).unwrap();
    let same = |a: &std::path::Path, b: &std::path::Path| std::fs::read(a).unwrap() == std::fs::read(b).unwrap();
    let identical = same(&fa.train, &fb.train) && same(&fa.eval, &fb.eval) && same(&fa.manifest, &fb.manifest);
    outcome(
        train.len() == 2000 && winners_ok == 2000 && losers_ok == 2000 && identical,
        format!(
            "{} pairs: winners perfect {winners_ok}, losers violate all targets {losers_ok}, same-seed files identical: {identical}",
            train.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Shared pipeline for criteria 4, 5, 6 and 8.

struct Pipeline {
    train: Vec<PreferencePair>,
    report: AccuracyReport,
    reward_time: Duration,
    reward: RewardNet,
    base: VelocityNet,
    base_eval: PolicyEval,
    runs: Vec<(usize, GrpoState, PolicyEval, Duration)>,
    eval_prompts: Vec<SpatialPrompt>,
}

fn grpo_config(k: usize) -> GrpoConfig {
    GrpoConfig {
        k,
        lr: 3e-3,
        ..GrpoConfig::default()
    }
}

fn pipeline() -> Pipeline {
    let start = Instant::now();
    let forge = ForgeConfig {
        train_n: 20_000,
        eval_n: 1000,
        ..ForgeConfig::default()
    };
    let (train, eval, _) = forge_dataset(&forge, 1).unwrap();
    let rn = RewardNet::new(4, 12, &[128, 128], &mut RngStream::new(2, 0)).unwrap();
    let rc = RewardTrainConfig {
        epochs: 8,
        ..RewardTrainConfig::default()
    };
    let trained = train_reward(rn, &train, &eval, &rc, &RngStream::new(3, 0), |_, _| {}).unwrap();
    let report = spatial_lab::reward::pairwise_accuracy(&trained.net, &eval).unwrap();
    let reward_time = start.elapsed();

    // Deliberately short pretraining.
    let mut base = VelocityNet::new(4, 12, &[128, 128], &mut RngStream::new(5, 0)).unwrap();
    let data: Vec<FlowExample> = train.iter().map(|p| FlowExample::new(&base, &p.prompt, &p.winner)).collect();
    let mut adam = Adam::for_mlp(&base.mlp);
    let pc = PretrainConfig {
        steps: 400,
        ..PretrainConfig::default()
    };
    fm_pretrain(&mut base, &mut adam, &data, &pc, 0, &RngStream::new(6, 0), |_, _| {}).unwrap();

    let eval_prompts: Vec<SpatialPrompt> = eval.iter().take(200).map(|p| p.prompt.clone()).collect();
    let evaluate = |n: &VelocityNet| {
        evaluate_policy(n, |p| n.condition(p), &eval_prompts, &SdeSchedule::eval(), 8, &RngStream::new(7, 0)).unwrap()
    };
    let base_eval = evaluate(&base);
    let train_prompts: Vec<SpatialPrompt> = train.iter().map(|p| p.prompt.clone()).collect();
    let runs = [6, 0]
        .into_iter()
        .map(|k| {
            let t = Instant::now();
            let cfg = grpo_config(k);
            let mut state = GrpoState::fresh(&base, &cfg, &mut RngStream::new(8, 0)).unwrap();
            let run = grpo_train(&base, &mut state, &trained.net, &train_prompts, &cfg, 300, &RngStream::new(9, 0), |_, _| {})
                .unwrap();
            assert!(run.aborted.is_none(), "GRPO aborted: {:?}", run.aborted);
            let tuned = apply_adapter(&base, &state.adapter).unwrap();
            (k, state, evaluate(&tuned), t.elapsed())
        })
        .collect();
    Pipeline {
        train,
        report,
        reward_time,
        reward: trained.net,
        base,
        base_eval,
        runs,
        eval_prompts,
    }
}

fn criterion_4(p: &Pipeline) -> Outcome {
    let r = &p.report;
    let one = r.by_pert.get("1").copied().unwrap_or(0.0);
    let many = r.by_pert.get("2_3").copied().unwrap_or(0.0);
    outcome(
        p.train.len() >= 5000
            && r.n_pairs >= 500
            && r.overall >= 0.90
            && many >= one
            && p.reward_time < Duration::from_secs(900),
        format!(
            "train {} pairs, held-out {} pairs: acc={:.3} (1 pert {:.3}, 2-3 pert {:.3}) in {:.0?}",
            p.train.len(),
            r.n_pairs,
            r.overall,
            one,
            many,
            p.reward_time
        ),
    )
}

fn criterion_5(p: &Pipeline) -> Outcome {
    let (_, _, tuned, time) = &p.runs[0];
    let gain = tuned.mean_oracle - p.base_eval.mean_oracle;
    outcome(
        gain >= 0.15,
        format!(
            "held-out oracle satisfaction base={:.3} after 300 steps={:.3} (+{:.1} pp) in {:.0?}",
            p.base_eval.mean_oracle,
            tuned.mean_oracle,
            100.0 * gain,
            time
        ),
    )
}

fn criterion_6(p: &Pipeline) -> Outcome {
    let per_prompt = |state: &GrpoState| -> Vec<Option<usize>> {
        let mut v: Vec<Option<usize>> = state.ledger.steps.iter().map(|e| e.training_per_prompt()).collect();
        v.dedup();
        v
    };
    let (_, s6, e6, _) = &p.runs[0];
    let (_, s0, e0, _) = &p.runs[1];
    let (n6, n0) = (per_prompt(s6), per_prompt(s0));
    let ratio = e6.mean_oracle / e0.mean_oracle;
    outcome(
        n6 == [Some(72)] && n0 == [Some(144)] && ratio >= 0.95,
        format!(
            "training NFE/prompt/step k=0 {:?} k=6 {:?}; final oracle k=0 {:.3} k=6 {:.3} (ratio {:.3})",
            n0, n6, e0.mean_oracle, e6.mean_oracle, ratio
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut s = RngStream::new(77, 0);
    let (mut worst_sum, mut worst_std, mut worst_affine): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut ranks_stable = true;
    for _ in 0..1000 {
        // Groups at the configured size; the +1e-8 guard shifts std(A) by
        // 1e-8/std, which stays below 1e-6 for subsets drawn this way.
        let g = GrpoConfig::default().group_size;
        let k = s.index(g / 2 + 1);
        let scale = s.uniform_in(0.1, 5.0);
        let rewards: Vec<f64> = (0..g).map(|_| scale * s.gauss()).collect();
        let a = compute_advantages(&rewards, k, 1e-8).unwrap();
        let vals: Vec<f64> = a.subset.iter().map(|&i| a.values[i].unwrap()).collect();
        worst_sum = worst_sum.max(vals.iter().sum::<f64>().abs());
        worst_std = worst_std.max((pop_std(&vals) - 1.0).abs());
        // Invariance is exact only without the guard.
        let a = compute_advantages(&rewards, k, 0.0).unwrap();
        let (mul, add) = (s.uniform_in(0.01, 100.0), s.uniform_in(-50.0, 50.0));
        let moved: Vec<f64> = rewards.iter().map(|r| mul * r + add).collect();
        let b = compute_advantages(&moved, k, 0.0).unwrap();
        ranks_stable &= a.order == b.order && a.subset == b.subset;
        for (x, y) in a.values.iter().zip(&b.values) {
            match (x, y) {
                (Some(x), Some(y)) => worst_affine = worst_affine.max((x - y).abs()),
                (None, None) => {}
                _ => ranks_stable = false,
            }
        }
    }

    let net = VelocityNet::new(4, 12, &[16, 16], &mut RngStream::new(78, 0)).unwrap();
    let reward = RewardNet::new(4, 12, &[16], &mut RngStream::new(79, 0)).unwrap();
    let mut worst_loss: f64 = 0.0;
    let mut gen = RngStream::new(80, 0);
    let grammar = spatial_lab::forge::GrammarConfig::default();
    for i in 0..1000u64 {
        let cfg = GrpoConfig {
            group_size: 2 + gen.index(11),
            kl_coef: 0.0,
            ..GrpoConfig::default()
        };
        let cfg = GrpoConfig {
            k: gen.index(cfg.group_size / 2 + 1),
            ..cfg
        };
        let mut state = GrpoState::fresh(&net, &cfg, &mut gen.derive(i)).unwrap();
        // Move B off zero so the on-policy net differs from the reference.
        let mut flat = state.adapter.flat();
        flat.iter_mut().for_each(|v| *v += 0.05 * gen.gauss());
        state.adapter.set_flat(&flat).unwrap();
        let policy = apply_adapter(&net, &state.adapter).unwrap();
        let prompt = spatial_lab::forge::generate_prompt(&mut gen, &grammar).unwrap();
        let cond = policy.condition(&prompt);
        let mut group = rollout_group(&policy, &cond, &prompt, &reward, &cfg, &gen.derive(1_000_000 + i)).unwrap();
        group.assign_advantages(cfg.k, cfg.std_guard).unwrap();
        let out = grpo_loss(&net, &state.adapter, &[group], &cfg).unwrap();
        worst_loss = worst_loss.max(out.loss.abs());
    }
    outcome(
        worst_sum <= 1e-6 && worst_std <= 1e-6 && ranks_stable && worst_affine <= 1e-6 && worst_loss <= 1e-10,
        format!(
            "1000 groups: max|sum A|={worst_sum:.1e} max|std-1|={worst_std:.1e} affine ranks/S stable: {ranks_stable} max|dA|={worst_affine:.1e}; on-policy max|loss|={worst_loss:.1e}"
        ),
    )
}

fn criterion_8(p: &Pipeline) -> Outcome {
    let (_, state, _, _) = &p.runs[0];
    let policy = apply_adapter(&p.base, &state.adapter).unwrap();
    let cfg = grpo_config(6);
    // Easy prompts: one atom each, searched until a group is mostly perfect.
    let mut candidates: Vec<SpatialPrompt> = Vec::new();
    for pr in &p.eval_prompts {
        for atom in pr.atoms() {
            candidates.push(SpatialPrompt::new(pr.class_slots().to_vec(), vec![*atom]).unwrap());
        }
    }
    for (j, prompt) in candidates.iter().enumerate() {
        let cond = policy.condition(prompt);
        let r = diagnose_advantage_bias(&policy, &cond, prompt, &p.reward, &cfg, 1.0, &RngStream::new(88, j as u64)).unwrap();
        let constant = r.rewards.iter().all(|x| *x == r.rewards[0]);
        if r.high_quality >= 20 && !constant {
            return outcome(
                !r.penalized_full.is_empty() && r.penalized_topk.len() <= r.penalized_full.len(),
                format!(
                    "easy prompt `{prompt}`: {}/24 perfect; penalized high-quality members k=0 {} k=6 {}",
                    r.high_quality,
                    r.penalized_full.len(),
                    r.penalized_topk.len()
                ),
            );
        }
    }
    outcome(false, "no candidate prompt produced a group with >= 20 perfect members")
}

fn criterion_9() -> Outcome {
    let prompt = SpatialPrompt::new(vec![0, 1, 2, 3], vec![RelationAtom::new(0, Predicate::Far, 3)]).unwrap();
    let scene_a = Scene::new(&[0, 1, 2, 3], &[[0.1, 0.1], [0.4, 0.6], [0.5, 0.2], [0.9, 0.8]]).unwrap();
    let scene_b = Scene::new(&[0, 1, 2, 3], &[[0.5, 0.5], [0.4, 0.6], [0.5, 0.2], [0.55, 0.45]]).unwrap();
    let mut s = RngStream::new(99, 0);
    let mut worst_ln2: f64 = 0.0;
    for seed in 0..20 {
        let net = RewardNet::new(4, 12, &[32, 32], &mut RngStream::new(seed, 9)).unwrap();
        let eps = s.gauss_draw(100);
        let r = bt_loss_frozen(&net, &prompt, &scene_a, &scene_a, &eps, &eps).unwrap();
        worst_ln2 = worst_ln2.max((r.loss - std::f64::consts::LN_2).abs());
    }

    // Linear head: μ = w·f with w along the feature difference, σ ≈ 1e-4.
    let probe = RewardNet::new(4, 12, &[2], &mut RngStream::new(1, 1)).unwrap();
    let fa = probe.features(&prompt, &scene_a).unwrap();
    let fb = probe.features(&prompt, &scene_b).unwrap();
    let diff: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| a - b).collect();
    let norm2: f64 = diff.iter().map(|d| d * d).sum();
    let mut mlp = MlpParams::zeros(&[fa.len(), 2]).unwrap();
    for (j, d) in diff.iter().enumerate() {
        mlp.layers_mut()[0].weight.set(0, j, 10.0 * d / norm2);
    }
    mlp.layers_mut()[0].bias = vec![0.0, -40.0];
    let net = RewardNet::from_mlp(mlp, 4, 12).unwrap();
    let ew = s.gauss_draw(100);
    let el = s.gauss_draw(100);
    let r = bt_loss_frozen(&net, &prompt, &scene_a, &scene_b, &ew, &el).unwrap();
    let margin = r.winner.mu - r.loser.mu;
    outcome(
        worst_ln2 <= 1e-12 && (margin - 10.0).abs() < 1e-9 && r.loss < 1e-4,
        format!(
            "equal pair |loss-ln2| max {worst_ln2:.1e}; margin {margin:.3} sigma {:.1e} loss {:.2e}",
            r.winner.sigma, r.loss
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; only run on a plain invocation.
    if std::env::args().skip(1).any(|a| a == "--list") {
        return;
    }
    let total = Instant::now();
    let mut failed = 0;
    // `None` marks checks read off the shared pipeline, whose time is printed once.
    let mut report = |n: usize, o: Outcome, t: Option<Instant>| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let time = t.map_or("shared pipeline".to_string(), |t| format!("{:.1?}", t.elapsed()));
        println!("criterion {n}: {tag} | {} | {time}", o.detail);
        failed += !o.pass as usize;
    };
    let t = Instant::now();
    report(1, criterion_1(), Some(t));
    let t = Instant::now();
    report(2, criterion_2(), Some(t));
    let t = Instant::now();
    report(3, criterion_3(), Some(t));
    let t = Instant::now();
    let p = pipeline();
    println!("shared pipeline (forge, reward, pretrain, two GRPO runs) built in {:.1?}", t.elapsed());
    report(4, criterion_4(&p), None);
    report(5, criterion_5(&p), None);
    report(6, criterion_6(&p), None);
    let t = Instant::now();
    report(7, criterion_7(), Some(t));
    let t = Instant::now();
    report(8, criterion_8(&p), Some(t));
    let t = Instant::now();
    report(9, criterion_9(), Some(t));
    println!("acceptance: {} of 9 criteria passed in {:.1?}", 9 - failed, total.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
