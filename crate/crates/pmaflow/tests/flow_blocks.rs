//! Block-refresh runs against plain flow runs.

use pmaflow::flow::run::{block_refresh_run, flow_run, FlowConfig, FlowMode};
use pmaflow::flow::schedule::StepSchedule;
use pmaflow::flow::target::{bimodal_mixture, standard_normal};

fn small(mode: FlowMode, t: usize) -> FlowConfig {
    let mut cfg = FlowConfig::new(bimodal_mixture(), standard_normal(), StepSchedule::Constant { eta: 0.2 }, t, mode);
    cfg.samples = 1000;
    cfg.learner.epochs = 30;
    cfg.distill_cfg.train.epochs = 40;
    cfg.seed = 17;
    cfg
}

#[test]
fn a_block_covering_the_run_is_a_plain_run() {
    let cfg = small(FlowMode::Logistic, 2);
    let plain = flow_run(&cfg).unwrap();
    for block in [2, 9] {
        let b = block_refresh_run(&cfg, block).unwrap();
        assert_eq!(b.trace, plain.trace, "block {block}");
    }
}

#[test]
fn short_blocks_still_run_every_step() {
    let cfg = small(FlowMode::Score, 3);
    let run = block_refresh_run(&cfg, 1).unwrap();
    assert!(run.failure.is_none(), "{:?}", run.failure);
    let rows = &run.trace.records;
    assert_eq!(rows.len(), 4);
    assert!(rows[..3].iter().all(|r| r.eta > 0.0) && rows[3].eta == 0.0);
    assert!(rows.iter().all(|r| r.min_hess > 0.0 && r.kl.is_finite()));
    // the average-iterate bound is only defined for a single block
    assert!(run.trace.average_iterate.is_none());
}

#[test]
fn oracle_runs_cannot_be_split() {
    assert!(block_refresh_run(&small(FlowMode::Oracle, 3), 1).is_err());
}
