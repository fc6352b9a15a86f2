//! Config-driven training runs and their reports.

mod config;
mod implicit;
mod report;

use std::time::Instant;

pub use config::{LrSchedule, RunConfig, DEFAULT_BATCH};
pub use implicit::{implicit_batch_divergence, implicit_batch_experiment, ImplicitBatchReport};
pub use report::{
    curve_path, emit_into, emit_report, report_dir, RunReport, ScalerEvent, Timing,
    DEFAULT_REPORT_DIR, REPORT_DIR_ENV, REPORT_SCHEMA_VERSION,
};

use crate::error::Result;
use crate::optim;
use crate::session::Session;
use crate::stabilize::ScaleChange;
use crate::zoo::build_model;

/// Train according to `config` and describe what happened. Nothing is
/// written to disk.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let model = build_model(&config.model)?.into_precision(config.precision);
    let mut session = Session::new(model, config.policy())?;
    let mut scaler = config.scaler;
    let base_lr = config.optimizer.lr();

    let mut losses = Vec::with_capacity(config.steps);
    let mut learning_rates = Vec::with_capacity(config.steps);
    let mut outcomes = Vec::with_capacity(config.steps);
    let mut scaler_events = Vec::new();
    let mut timing = Timing::default();
    let start = Instant::now();

    for step in 0..config.steps {
        let t0 = Instant::now();
        let batch = config.task.sample_batch(config.batch, step as u64)?;
        let lr = config.lr_schedule.lr_at(base_lr, step, config.steps);
        let res = optim::step(
            &mut session,
            &config.optimizer,
            &batch,
            lr,
            config.clip,
            scaler.as_mut(),
        )?;
        timing.step_wall_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        if let (Some(change), Some(s)) = (res.scale_change, &scaler) {
            if change != ScaleChange::Unchanged {
                scaler_events.push(ScalerEvent {
                    step,
                    change,
                    scale: s.scale,
                });
            }
        }
        losses.push(res.loss);
        learning_rates.push(lr);
        outcomes.push(res.outcome);
    }
    timing.total_wall_ms = start.elapsed().as_secs_f64() * 1e3;

    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: config.hash(),
        config: config.clone(),
        losses,
        learning_rates,
        outcomes,
        final_digest: session.model.digest(),
        memory: session.ledger.snapshot(),
        scaler_events,
        final_scale: scaler.map(|s| s.scale),
        passes: session.counts(),
        timing,
    })
}

/// `run`, then write the report into the resolved report directory.
pub fn train(config: &RunConfig) -> Result<(RunReport, std::path::PathBuf)> {
    let report = run(config)?;
    let path = emit_into(&report, &report_dir(config))?;
    Ok((report, path))
}
