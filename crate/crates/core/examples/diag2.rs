//! Criterion-7-style probe check: held-out two-moons, arch [2,16,16],
//! 1000-step rollout, probe at step 0 vs end, averaged over 10 seeds.

use std::path::PathBuf;

use metaplast_core::base_model::{Activation, ArchSpec};
use metaplast_core::checkpoint::{load_rule_params, load_train_state};
use metaplast_core::meta_objective::MetaObjectiveConfig;
use metaplast_core::rollout::{rollout, RolloutConfig};
use metaplast_core::tasks::{AugmentParams, TaskSource, TaskSpec};
use metaplast_core::update_rule::{UpdateRuleConfig, UpdateRuleParams};

fn load_any(path: &PathBuf) -> UpdateRuleParams {
    if let Ok((_, theta)) = load_rule_params(path) {
        return theta;
    }
    load_train_state(path).expect("checkpoint").2.theta
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arch = ArchSpec::new(vec![2, 16, 16], Activation::Relu).unwrap();
    let cfg = RolloutConfig {
        steps: 1000,
        eval_every: 1000,
        labeled_per_class: 10,
        objective: MetaObjectiveConfig::default(),
    };
    let init = UpdateRuleParams::init(&UpdateRuleConfig::desk(), 1).unwrap();
    let mut thetas = vec![("init".to_string(), init)];
    for p in &args {
        let path = PathBuf::from(p);
        thetas.push((path.file_stem().unwrap().to_string_lossy().into(), load_any(&path)));
    }
    for (label, theta) in &thetas {
        let mut start = 0.0;
        let mut end = 0.0;
        let mut j_end = 0.0;
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
            start += r.series.rows[0].few_shot_accuracy / 10.0;
            end += r.series.rows.last().unwrap().few_shot_accuracy / 10.0;
            j_end += r.series.rows.last().unwrap().meta_objective / 10.0;
        }
        println!("{:>16}  probe {:.3} -> {:.3} (gain {:+.3})  J_end {:.4}", label, start, end, end - start, j_end);
    }
}
