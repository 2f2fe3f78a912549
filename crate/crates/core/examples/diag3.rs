//! Overfit oracle: meta-train on the two-moons source only, short
//! truncations, boosted meta-lr, then compare fixed-condition objective and
//! probe for the initial vs trained rule on that task family.

use metaplast_core::base_model::{Activation, ArchSpec};
use metaplast_core::meta_objective::MetaObjectiveConfig;
use metaplast_core::rollout::{rollout, RolloutConfig};
use metaplast_core::tasks::{AugmentParams, TaskDistribution, TaskSource, TaskSpec};
use metaplast_core::trainer::{
    train_sequential, MetaTrainerConfig, TruncationSchedule, UnrollSchedule,
};
use metaplast_core::update_rule::{UpdateRuleConfig, UpdateRuleParams};

fn eval(label: &str, theta: &UpdateRuleParams, k: usize) {
    let arch = ArchSpec::new(vec![2, 16, 16], Activation::Relu).unwrap();
    let cfg = RolloutConfig {
        steps: k,
        eval_every: k.max(1),
        labeled_per_class: 10,
        objective: MetaObjectiveConfig::default(),
    };
    let (mut s, mut e, mut j) = (0.0, 0.0, 0.0);
    for seed in 0..10u64 {
        let task = TaskSpec {
            source: TaskSource::TwoMoons { noise_std: 0.1 },
            n_classes: 2,
            input_dim: 2,
            permutation: vec![0, 1],
            augmentation: AugmentParams::none(),
            seed: 9000 + seed,
        };
        let r = rollout(theta, &arch, &task, &cfg, seed).unwrap();
        s += r.series.rows[0].few_shot_accuracy / 10.0;
        e += r.series.rows.last().unwrap().few_shot_accuracy / 10.0;
        j += r.series.rows.last().unwrap().meta_objective / 10.0;
    }
    println!("{:>14} K={:4}  probe {:.3} -> {:.3}  J_end {:.4}", label, k, s, e, j);
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args[0].parse().unwrap();
    let scale: f64 = args[1].parse().unwrap();
    let mut cfg = MetaTrainerConfig::desk();
    cfg.tasks = TaskDistribution {
        glyph_grid: 8,
        glyph_classes: vec![4],
        include_two_moons: true,
        two_moons_noise: 0.1,
        p_augment: 0.0,
        augmentation: AugmentParams::none(),
    };
    cfg.lr.scale = scale;
    cfg.unroll = UnrollSchedule { start_lo: 2, start_hi: 4, end_lo: 2, end_hi: 4, ramp_steps: 1 };
    cfg.truncation =
        TruncationSchedule { std_start: 5.0, std_end: 5.0, ramp_start: 0, ramp_end: 1 };
    let init = UpdateRuleParams::init(&UpdateRuleConfig::desk(), 1).unwrap();
    eval("init", &init, 50);
    let out = train_sequential(&cfg, 0, steps, None).unwrap();
    let n = out.metrics.len();
    let mean = |r: std::ops::Range<usize>| {
        out.metrics[r.clone()].iter().map(|m| m.j).sum::<f64>() / r.len() as f64
    };
    println!(
        "trained {} steps lr x{}: J first50 {:.4} last50 {:.4}  skipped {}",
        n, scale, mean(0..50.min(n)), mean(n.saturating_sub(50)..n), out.skipped
    );
    eval("trained", &out.theta, 50);
    eval("trained", &out.theta, 1000);
}
