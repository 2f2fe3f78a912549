//! Fixed-condition evaluation of rule-parameter checkpoints: for each
//! checkpoint, roll fresh models out K steps on a fixed set of tasks and
//! report the mean meta-objective and probe accuracy. Removes the trainer's
//! schedule confound so checkpoints are comparable.

use std::path::PathBuf;

use metaplast_core::base_model::{Activation, ArchSpec};
use metaplast_core::checkpoint::{load_rule_params, load_train_state};
use metaplast_core::meta_objective::MetaObjectiveConfig;
use metaplast_core::rollout::{rollout, RolloutConfig};
use metaplast_core::tasks::{AugmentParams, TaskSource, TaskSpec};
use metaplast_core::update_rule::{UpdateRuleConfig, UpdateRuleParams};

fn moons(seed: u64) -> TaskSpec {
    TaskSpec {
        source: TaskSource::TwoMoons { noise_std: 0.1 },
        n_classes: 2,
        input_dim: 2,
        permutation: vec![0, 1],
        augmentation: AugmentParams::none(),
        seed,
    }
}

fn glyphs(seed: u64) -> TaskSpec {
    TaskSpec {
        source: TaskSource::Glyphs { grid: 8 },
        n_classes: 4,
        input_dim: 64,
        permutation: (0..64).collect(),
        augmentation: AugmentParams::none(),
        seed,
    }
}

fn eval_theta(label: &str, theta: &UpdateRuleParams, k: usize) {
    let cfg = RolloutConfig {
        steps: k,
        eval_every: k.max(1),
        labeled_per_class: 10,
        objective: MetaObjectiveConfig::default(),
    };
    let mut j_sum = 0.0;
    let mut acc_start = 0.0;
    let mut acc_end = 0.0;
    let mut n = 0.0;
    for seed in 0..6u64 {
        for (task, hidden, input) in [(moons(9000 + seed), 16, 2), (glyphs(9000 + seed), 24, 64)] {
            let arch = ArchSpec::new(vec![input, hidden, 16], Activation::Relu).unwrap();
            let r = rollout(theta, &arch, &task, &cfg, seed).unwrap();
            let first = &r.series.rows[0];
            let last = r.series.rows.last().unwrap();
            j_sum += last.meta_objective;
            acc_start += first.few_shot_accuracy;
            acc_end += last.few_shot_accuracy;
            n += 1.0;
        }
    }
    println!(
        "{:>16}  K={:4}  mean J {:.4}  probe {:.3} -> {:.3}",
        label,
        k,
        j_sum / n,
        acc_start / n,
        acc_end / n
    );
}

fn load_any(path: &PathBuf) -> UpdateRuleParams {
    if let Ok((_, theta)) = load_rule_params(path) {
        return theta;
    }
    let (_, _, state) = load_train_state(path).expect("neither rule nor state checkpoint");
    state.theta
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let k: usize = args[0].parse().unwrap();
    let init = UpdateRuleParams::init(&UpdateRuleConfig::desk(), 1).unwrap();
    eval_theta("init(seed1)", &init, k);
    eval_theta("init(seed1)", &init, 0);
    for p in &args[1..] {
        let path = PathBuf::from(p);
        let theta = load_any(&path);
        let label = path.file_stem().unwrap().to_string_lossy().to_string();
        eval_theta(&label, &theta, k);
    }
}
