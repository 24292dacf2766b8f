// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use langfir::exec::Execution;
use langfir::experiment::{Method, MethodParams, Pipeline, SplitKind, TaskConfig};
use langfir::features::IdentificationConfig;
use langfir::run::{run_eval, RunConfig};
use langfir::sweep::{run_sweep, SweepGrid};
use langfir::world::{PlantedWorld, WorldConfig};

fn pipeline(exec: Execution) -> Pipeline {
    let world = Arc::new(PlantedWorld::new(WorldConfig::default()).unwrap());
    Pipeline::new(world, TaskConfig::default(), IdentificationConfig::default(), exec).unwrap()
}

fn small_grid() -> SweepGrid {
    SweepGrid {
        layer_percentiles: vec![0.5, 0.9],
        alphas: vec![0.1, 1.0, 10.0],
        taus: vec![0.9, 1.0],
        top_ks: vec![1, 2],
        ..SweepGrid::default()
    }
}

fn small_run(seed: u64) -> RunConfig {
    RunConfig {
        run_id: format!("s{seed}"),
        seed,
        grid: small_grid(),
        methods: vec![Method::Langfir, Method::LangfirNoRemoval, Method::Diffmean],
        ..RunConfig::default()
    }
}

#[test]
fn single_point_grid_returns_that_point() {
    let p = pipeline(Execution::Parallel);
    let params = MethodParams {
        layer_percentile: 0.7,
        alpha: 2.5,
        top_k: 2,
        ..MethodParams::default()
    };
    let r = run_sweep(&p, Method::Langfir, &SweepGrid::single(&params)).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.best, params);
    let direct = p.evaluate_method(Method::Langfir, &params, SplitKind::Validation).unwrap();
    assert_eq!(r.best_row().scores, direct);
}

#[test]
fn rows_cover_the_grid_and_alpha_one_wins() {
    let p = pipeline(Execution::Parallel);
    let g = small_grid();
    let r = run_sweep(&p, Method::Langfir, &g).unwrap();
    assert_eq!(r.rows.len(), 2 * 3 * 2 * 2);
    assert_eq!(r.best.alpha, 1.0);
    assert!(r.rows.iter().all(|row| row.mean_acc_x_bleu <= r.best_score));
    let t = r.table();
    assert_eq!(t.len(), r.rows.len());
    assert_eq!(t.columns.len(), 10 + 2 * 4 + 1);
    let d = run_sweep(&p, Method::Diffmean, &g).unwrap();
    assert_eq!(d.rows.len(), 2 * 3);
    assert_eq!(d.best.alpha, 1.0);
}

#[test]
fn sweep_tables_are_reproducible_across_execution_modes() {
    let g = SweepGrid {
        layer_percentiles: vec![0.6],
        ..small_grid()
    };
    let a = run_sweep(&pipeline(Execution::Parallel), Method::Langfir, &g).unwrap();
    let b = run_sweep(&pipeline(Execution::Parallel), Method::Langfir, &g).unwrap();
    let c = run_sweep(&pipeline(Execution::Sequential), Method::Langfir, &g).unwrap();
    let csv = a.table().to_csv_string().unwrap();
    assert_eq!(csv, b.table().to_csv_string().unwrap());
    assert_eq!(csv, c.table().to_csv_string().unwrap());
}

#[test]
fn latents_and_generations_match_across_execution_modes() {
    let par = pipeline(Execution::Parallel);
    let seq = pipeline(Execution::Sequential);
    for l in [0, 3] {
        assert_eq!(*par.language_latents(l, 6).unwrap(), *seq.language_latents(l, 6).unwrap());
        assert_eq!(*par.random_latents(l, 6).unwrap(), *seq.random_latents(l, 6).unwrap());
    }
    let spec = par.build(Method::Langfir, &MethodParams::default(), "es").unwrap();
    assert_eq!(
        par.generations(&spec, SplitKind::Validation, "es").unwrap(),
        seq.generations(&spec, SplitKind::Validation, "es").unwrap()
    );
}

#[test]
fn reports_are_bit_identical_for_one_seed() {
    let a = run_eval(&small_run(3), Execution::Parallel).unwrap().report;
    let b = run_eval(&small_run(3), Execution::Sequential).unwrap().report;
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(a.scores.len(), 4);
    assert_eq!(a.best_params["langfir-no-removal"], a.best_params["langfir"]);
    assert_eq!(a.delta_ce.len(), 25);
    a.validate().unwrap();
}

#[test]
fn run_config_json_round_trip() {
    let c = small_run(9);
    let s = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
    let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "grid": {"alphas": [2.0]}}"#).unwrap();
    assert_eq!(partial.seed, 4);
    assert_eq!(partial.grid.alphas, vec![2.0]);
    assert_eq!(partial.grid.taus, SweepGrid::default().taus);
    assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 4}"#).is_err());
    assert!(serde_json::from_str::<RunConfig>(r#"{"methods": ["nope"]}"#).is_err());
}
