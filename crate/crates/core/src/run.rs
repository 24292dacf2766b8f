// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end evaluation runs: sweep every method on the validation split,
//! score the winners on the test split, and collect identification and
//! ablation results into one [`EvalReport`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analysis::{ablation_ce, identification_summary, IdentificationSummary};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::experiment::{Method, MethodParams, Pipeline, SplitKind, TaskConfig};
use crate::features::IdentificationConfig;
use crate::report::EvalReport;
use crate::sweep::{run_sweep, SweepGrid, SweepResult};
use crate::world::{PlantedWorld, WorldConfig};

/// Everything a run depends on. `seed` overrides the world and
/// identification seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub world: WorldConfig,
    pub task: TaskConfig,
    pub ident: IdentificationConfig,
    pub grid: SweepGrid,
    /// Settings for single-configuration commands (steer, identify, ablate).
    pub params: MethodParams,
    pub methods: Vec<Method>,
    /// Number of specific features ablated per language.
    pub ablation_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            world: WorldConfig::default(),
            task: TaskConfig::default(),
            ident: IdentificationConfig::default(),
            grid: SweepGrid::default(),
            params: MethodParams::default(),
            methods: Method::ALL.to_vec(),
            ablation_k: 2,
        }
    }
}

impl RunConfig {
    /// The config with `seed` pushed into the world and identification.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.world.seed = c.seed;
        c.ident.seed = c.seed;
        c
    }

    pub fn pipeline(&self, exec: Execution) -> Result<Pipeline> {
        let c = self.seeded();
        let world = Arc::new(PlantedWorld::new(c.world)?);
        Pipeline::new(world, c.task, c.ident, exec)
    }

    /// A pipeline over an existing world; the config's world section is ignored.
    pub fn pipeline_on(&self, world: Arc<PlantedWorld>, exec: Execution) -> Result<Pipeline> {
        let c = self.seeded();
        Pipeline::new(world, c.task, c.ident, exec)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub sweeps: Vec<SweepResult>,
    pub identification: Option<IdentificationSummary>,
}

/// Run every configured method. Without LangFIR in `methods` there is no
/// feature set to summarise or ablate.
///
/// The no-removal ablation is scored at LangFIR's selected configuration
/// when both are present, so the two differ only in the removal step.
pub fn run_eval(cfg: &RunConfig, exec: Execution) -> Result<RunOutput> {
    run_eval_on(cfg, &cfg.pipeline(exec)?)
}

/// [`run_eval`] on a prepared pipeline. The report records the pipeline's world.
pub fn run_eval_on(cfg: &RunConfig, p: &Pipeline) -> Result<RunOutput> {
    if cfg.methods.is_empty() {
        return Err(Error::invalid("no methods configured"));
    }
    let mut seeded = cfg.seeded();
    seeded.world = p.world().config().clone();
    let config = serde_json::to_value(&seeded).map_err(|e| Error::Malformed(e.to_string()))?;
    let mut report = EvalReport::new(cfg.run_id.clone(), cfg.seed, config);
    let mut sweeps = Vec::new();
    let mut langfir_best: Option<MethodParams> = None;

    let paired = cfg.methods.contains(&Method::Langfir);
    let mut order: Vec<Method> = cfg.methods.clone();
    order.sort();
    order.dedup();
    for &m in &order {
        let best = if m == Method::LangfirNoRemoval && paired {
            langfir_best.clone().expect("langfir runs first")
        } else {
            let s = run_sweep(p, m, &cfg.grid)?;
            let best = s.best.clone();
            sweeps.push(s);
            best
        };
        if m == Method::Langfir {
            langfir_best = Some(best.clone());
        }
        let scores = p.evaluate_method(m, &best, SplitKind::Test)?;
        report.best_params.insert(m.as_str().into(), best);
        report.scores.insert(m.as_str().into(), scores);
    }
    report.scores.insert("unsteered".into(), p.evaluate_unsteered(SplitKind::Test)?);

    let mut identification = None;
    if let Some(best) = &langfir_best {
        let layer = p.layer(best.layer_percentile)?;
        let summary = identification_summary(p, layer, best.tau, best.top_k)?;
        report.recovery = summary.recovery.clone();
        report.flags.extend(summary.flags.iter().cloned());
        report.delta_ce = ablation_ce(p, &[layer], best.tau, cfg.ablation_k)?;
        identification = Some(summary);
    }
    report.validate()?;
    Ok(RunOutput {
        report,
        sweeps,
        identification,
    })
}
