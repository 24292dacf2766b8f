// SPDX-License-Identifier: MIT OR Apache-2.0

//! `langfir` command-line runner.
//!
//! Every command reads an optional JSON [`RunConfig`], applies flag
//! overrides, and writes its outputs under `<out>/<run_id>/`.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 empty result.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use langfir::activations::ActivationMatrix;
use langfir::analysis::{ablation_ce, ablation_table, analysis_suite, identification_summary};
use langfir::container::{read_container, write_container, TensorContainer};
use langfir::exec::{self, Execution};
use langfir::experiment::{Method, Pipeline, SplitKind};
use langfir::features::{identify, mean_latent, select_topk, FeatureReport};
use langfir::intervention::InterventionSpec;
use langfir::report::{write_json, EvalReport, Table};
use langfir::run::{run_eval_on, RunConfig};
use langfir::sae::SaeParams;
use langfir::steering::SteeringVector;
use langfir::sweep::run_sweep;
use langfir::world::PlantedWorld;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "langfir", version, about = "Language-specific SAE feature identification and steering")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a planted world and export it with its SAE and activations.
    Synth(SynthArgs),
    /// Identify language-specific features.
    Identify(IdentifyArgs),
    /// Steer generation towards target languages and score it.
    Steer(SteerArgs),
    /// Ablate specific features and measure the change in cross-entropy.
    Ablate(AblateArgs),
    /// Grid-search method hyperparameters on the validation split.
    Sweep(SweepArgs),
    /// Validate a tensor container and print its inventory.
    Ingest(IngestArgs),
    /// Full evaluation: sweeps, test scores, identification and ablation.
    Eval(EvalArgs),
}

#[derive(Args, Default)]
struct ParamArgs {
    #[arg(long)]
    layer_percentile: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    pca_k: Option<usize>,
    #[arg(long)]
    zhong_k: Option<usize>,
    #[arg(long)]
    anchor_percentile: Option<f64>,
    #[arg(long)]
    lda_shrinkage: Option<f64>,
}

#[derive(Args)]
struct WorldArg {
    /// World file from `synth`; built from the config when absent.
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args)]
struct IdentifyArgs {
    #[command(flatten)]
    world: WorldArg,
    #[command(flatten)]
    params: ParamArgs,
    /// SAE container; with --acts and --random, identify from files.
    #[arg(long, requires_all = ["acts", "random"])]
    sae: Option<PathBuf>,
    #[arg(long, requires = "sae")]
    acts: Option<PathBuf>,
    #[arg(long, requires = "sae")]
    random: Option<PathBuf>,
    /// Also write the analysis CSVs.
    #[arg(long)]
    analysis: bool,
}

#[derive(Args)]
struct SteerArgs {
    #[command(flatten)]
    world: WorldArg,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, default_value = "langfir")]
    method: String,
    /// Target language; repeat for several. Defaults to the configured targets.
    #[arg(long)]
    target: Vec<String>,
    /// Steering vector container to use instead of building one.
    #[arg(long, conflicts_with = "method")]
    vector: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    world: WorldArg,
    #[command(flatten)]
    params: ParamArgs,
    /// Layer percentiles to ablate at; defaults to the configured one.
    #[arg(long = "at")]
    at: Vec<f64>,
    /// Features ablated per language.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    world: WorldArg,
    /// Method to sweep; repeat for several. Defaults to the configured methods.
    #[arg(long)]
    method: Vec<String>,
}

#[derive(Args)]
struct IngestArgs {
    path: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    world: WorldArg,
    #[arg(long)]
    method: Vec<String>,
}

/// Error carrying the process exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn empty_result(msg: impl Into<String>) -> anyhow::Error {
    Exit(3, msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(Exit(code, _)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        if let Some(le) = cause.downcast_ref::<langfir::Error>() {
            return match le {
                langfir::Error::NoSpecificFeatures | langfir::Error::SweepFailed => 3,
                _ => 2,
            };
        }
    }
    2
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
    exec: Execution,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(r) = &cli.run_id {
            cfg.run_id = r.clone();
        }
        if cfg.run_id.is_empty() || cfg.run_id.contains(['/', '\\']) || cfg.run_id.starts_with('.') {
            bail!("invalid run id {:?}", cfg.run_id);
        }
        let exec = if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        };
        Ok(Self {
            dir: cli.out.join(&cfg.run_id),
            cfg,
            exec,
        })
    }

    fn apply(&mut self, a: &ParamArgs) {
        let p = &mut self.cfg.params;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = a.$f { p.$f = v; })* };
        }
        set!(layer_percentile, alpha, tau, top_k, pca_k, zhong_k, anchor_percentile, lda_shrinkage);
    }

    fn pipeline(&self, world: &WorldArg) -> Result<Pipeline> {
        Ok(match &world.world {
            Some(path) => {
                let w = PlantedWorld::load(path).with_context(|| format!("loading world {}", path.display()))?;
                self.cfg.pipeline_on(Arc::new(w), self.exec)?
            }
            None => self.cfg.pipeline(self.exec)?,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.path(name);
        write_json(&p, value)?;
        Ok(p)
    }

    fn csv(&self, name: &str, t: &Table) -> Result<PathBuf> {
        let p = self.path(name);
        t.write_csv(&p)?;
        Ok(p)
    }

    fn config_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.cfg.seeded())?)
    }
}

fn methods(names: &[String], default: &[Method]) -> Result<Vec<Method>> {
    if names.is_empty() {
        return Ok(default.to_vec());
    }
    names.iter().map(|n| Ok(n.parse::<Method>()?)).collect()
}

#[derive(Serialize)]
struct WorldSummary {
    languages: Vec<String>,
    num_layers: usize,
    d_res: usize,
    vocab_size: usize,
    planted_specific: BTreeMap<String, Vec<usize>>,
    planted_agnostic: Vec<usize>,
    activation_layer: usize,
}

fn synth(ctx: &mut Ctx, a: &SynthArgs) -> Result<()> {
    ctx.apply(&a.params);
    let p = ctx.cfg.pipeline(ctx.exec)?;
    let w = p.world();
    std::fs::create_dir_all(&ctx.dir)?;
    w.save(ctx.path("world.lftc"))?;
    write_container(ctx.path("sae.lftc"), &p.sae().to_container()?)?;
    let layer = p.layer(ctx.cfg.params.layer_percentile)?;
    std::fs::create_dir_all(ctx.path("activations"))?;
    for l in 0..w.num_languages() {
        let name = w.language_name(l);
        p.language_activations(l, layer)?
            .save(ctx.path(&format!("activations/{name}.lftc")))?;
        p.random_activations(l, layer)?
            .save(ctx.path(&format!("activations/random_{name}.lftc")))?;
    }
    let summary = WorldSummary {
        languages: w.config().languages.clone(),
        num_layers: w.config().num_layers,
        d_res: w.config().d_res,
        vocab_size: w.vocab_size(),
        planted_specific: (0..w.num_languages())
            .map(|l| (w.language_name(l).to_string(), w.planted_specific(l)))
            .collect(),
        planted_agnostic: w.planted_agnostic(),
        activation_layer: layer,
    };
    ctx.json("world.json", &summary)?;
    println!(
        "world: {} languages, {} layers, d_res {}, {} specific + {} agnostic features",
        summary.languages.len(),
        summary.num_layers,
        summary.d_res,
        summary.planted_specific.values().map(Vec::len).sum::<usize>(),
        summary.planted_agnostic.len()
    );
    println!("wrote {}", ctx.dir.display());
    Ok(())
}

fn identify_files(ctx: &Ctx, sae: &Path, acts: &Path, random: &Path) -> Result<()> {
    let sae = SaeParams::from_container(&read_container(sae).with_context(|| format!("reading {}", sae.display()))?)?;
    let lang = ActivationMatrix::load(acts).with_context(|| format!("reading {}", acts.display()))?;
    let rand = ActivationMatrix::load(random).with_context(|| format!("reading {}", random.display()))?;
    let (tau, k) = (ctx.cfg.params.tau, ctx.cfg.params.top_k);
    let ll = sae.encode_rows(lang.data(), ctx.exec)?;
    let sets = identify(&ll, &sae.encode_rows(rand.data(), ctx.exec)?, tau)?;
    let sel = if sets.s_spec().is_empty() {
        None
    } else {
        Some(select_topk(&mean_latent(&ll)?, &sets, k)?)
    };
    let report = FeatureReport::new(&lang.language, lang.layer, tau, lang.n_samples(), &sets, sel.as_ref());
    let path = ctx.json("identify.json", &report)?;
    println!(
        "{}: |s_lang| {}, |s_rand| {}, |s_spec| {}, selected {:?}",
        report.language,
        report.s_lang.len(),
        report.s_rand.len(),
        report.s_spec.len(),
        report.selected
    );
    println!("wrote {}", path.display());
    if sel.is_none() {
        return Err(empty_result(format!("{}: no language-specific features found", report.language)));
    }
    Ok(())
}

fn identify_cmd(ctx: &mut Ctx, a: &IdentifyArgs) -> Result<()> {
    ctx.apply(&a.params);
    if let (Some(sae), Some(acts), Some(random)) = (&a.sae, &a.acts, &a.random) {
        return identify_files(ctx, sae, acts, random);
    }
    let p = ctx.pipeline(&a.world)?;
    let layer = p.layer(ctx.cfg.params.layer_percentile)?;
    let s = identification_summary(&p, layer, ctx.cfg.params.tau, ctx.cfg.params.top_k)?;
    let path = ctx.json("identify.json", &s)?;
    for f in &s.features {
        let r = &s.recovery[&f.language];
        println!(
            "{}: s_spec {:?}, selected {:?}, precision {:.3}, recall {:.3}",
            f.language, f.s_spec, f.selected, r.precision, r.recall
        );
    }
    for flag in &s.flags {
        log::warn!("{flag}");
    }
    if a.analysis {
        for (name, t) in analysis_suite(&p, layer)? {
            ctx.csv(&format!("analysis/{name}.csv"), &t)?;
        }
    }
    println!("wrote {}", path.display());
    let empty: Vec<&str> = s
        .features
        .iter()
        .filter(|f| f.s_spec.is_empty())
        .map(|f| f.language.as_str())
        .collect();
    if !empty.is_empty() {
        return Err(empty_result(format!("{}: no language-specific features found", empty.join(", "))));
    }
    Ok(())
}

fn steer_cmd(ctx: &mut Ctx, a: &SteerArgs) -> Result<()> {
    ctx.apply(&a.params);
    let p = ctx.pipeline(&a.world)?;
    let targets = if a.target.is_empty() { p.targets() } else { a.target.clone() };
    let params = ctx.cfg.params.clone();
    let loaded = a.vector.as_ref().map(SteeringVector::load).transpose()?;
    let label = match &loaded {
        Some(v) => v.method.clone(),
        None => a.method.parse::<Method>()?.as_str().to_string(),
    };
    let mut report = EvalReport::new(ctx.cfg.run_id.clone(), ctx.cfg.seed, ctx.config_json()?);
    let mut gens = Table::new(&["target", "index", "output", "reference"]);
    for t in &targets {
        let spec = match &loaded {
            Some(v) => InterventionSpec::steer(v.clone(), params.alpha),
            None => {
                let spec = p.build(a.method.parse()?, &params, t)?;
                if let Some(v) = &spec.vector {
                    std::fs::create_dir_all(ctx.path("vectors"))?;
                    v.save(ctx.path(&format!("vectors/{label}_{t}.lftc")))?;
                }
                spec
            }
        };
        let scores = p.evaluate(&spec, SplitKind::Test, t)?;
        let (_, refs) = p.prompts(SplitKind::Test, t)?;
        for (i, (o, r)) in p.generations(&spec, SplitKind::Test, t)?.iter().zip(&refs).enumerate() {
            gens.push(vec![t.as_str().into(), i.into(), ids(&o.ids).into(), ids(&r.ids).into()])?;
        }
        println!(
            "{t}: ACC {:.3}, BLEU {:.2}, ACC×BLEU {:.2}",
            scores.acc, scores.bleu, scores.acc_x_bleu
        );
        report.scores.entry(label.clone()).or_default().insert(t.clone(), scores);
    }
    report.best_params.insert(label, params);
    report.write(ctx.path("steer.json"))?;
    ctx.csv("generations.csv", &gens)?;
    println!("wrote {}", ctx.dir.display());
    Ok(())
}

fn ids(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn ablate_cmd(ctx: &mut Ctx, a: &AblateArgs) -> Result<()> {
    ctx.apply(&a.params);
    let p = ctx.pipeline(&a.world)?;
    let pcts = if a.at.is_empty() { vec![ctx.cfg.params.layer_percentile] } else { a.at.clone() };
    let layers = pcts.iter().map(|&x| p.layer(x)).collect::<langfir::Result<Vec<_>>>()?;
    let k = a.k.unwrap_or(ctx.cfg.ablation_k);
    let rows = ablation_ce(&p, &layers, ctx.cfg.params.tau, k)?;
    for r in rows.iter().filter(|r| r.ablated == r.evaluated) {
        println!("layer {} {}: ΔCE {:.4} nats/token", r.layer, r.ablated, r.delta);
    }
    ctx.json("ablation.json", &rows)?;
    let path = ctx.csv("ablation_ce.csv", &ablation_table(&rows))?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary {
    method: String,
    best: langfir::experiment::MethodParams,
    best_score: f64,
    points: usize,
    failed: usize,
}

fn sweep_cmd(ctx: &mut Ctx, a: &SweepArgs) -> Result<()> {
    let p = ctx.pipeline(&a.world)?;
    let mut out = Vec::new();
    for m in methods(&a.method, &ctx.cfg.methods)? {
        let r = run_sweep(&p, m, &ctx.cfg.grid)?;
        ctx.csv(&format!("sweep_{m}.csv"), &r.table())?;
        println!("{m}: best {:.2} at {:?}", r.best_score, r.best);
        out.push(SweepSummary {
            method: m.to_string(),
            best: r.best.clone(),
            best_score: r.best_score,
            points: r.rows.len(),
            failed: r.rows.iter().filter(|x| x.error.is_some()).count(),
        });
    }
    let path = ctx.json("sweep.json", &out)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Serialize)]
struct Inventory {
    kind: &'static str,
    tensors: Vec<TensorEntry>,
    metadata: BTreeMap<String, String>,
}

fn ingest_cmd(a: &IngestArgs) -> Result<()> {
    let bytes = std::fs::read(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    let c = TensorContainer::from_bytes(&bytes).with_context(|| format!("parsing {}", a.path.display()))?;
    let kind = if PlantedWorld::from_container(&c).is_ok() {
        "world"
    } else if SaeParams::from_container(&c).is_ok() {
        "sae"
    } else if ActivationMatrix::from_container(&c).is_ok() {
        "activations"
    } else if SteeringVector::from_container(&c).is_ok() {
        "vector"
    } else {
        "tensors"
    };
    let inv = Inventory {
        kind,
        tensors: c
            .tensors()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                dims: t.dims.clone(),
            })
            .collect(),
        metadata: c.metadata().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    };
    print!("{}", langfir::report::to_json_string(&inv)?);
    Ok(())
}

fn eval_cmd(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    ctx.cfg.methods = methods(&a.method, &ctx.cfg.methods)?;
    let p = ctx.pipeline(&a.world)?;
    let out = run_eval_on(&ctx.cfg, &p)?;
    for s in &out.sweeps {
        ctx.csv(&format!("sweeps/{}.csv", s.method), &s.table())?;
    }
    if let Some(id) = &out.identification {
        ctx.json("identify.json", id)?;
        ctx.csv("ablation_ce.csv", &ablation_table(&out.report.delta_ce))?;
        let layer = p.layer(out.report.best_params["langfir"].layer_percentile)?;
        // Ablation at the selected configuration is already written above.
        for (name, t) in analysis_suite(&p, layer)?.into_iter().filter(|(n, _)| *n != "ablation_ce") {
            ctx.csv(&format!("analysis/{name}.csv"), &t)?;
        }
    }
    out.report.write(ctx.path("report.json"))?;
    for (m, per) in &out.report.scores {
        let mean = langfir::experiment::mean_acc_x_bleu(per);
        println!("{m:<20} ACC×BLEU {mean:.2}");
    }
    for f in &out.report.flags {
        log::warn!("{f}");
    }
    println!("wrote {}", ctx.dir.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LANGFIR_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("LANGFIR_THREADS={v:?} is not a count"))?;
        if !exec::init_threads(n) {
            log::debug!("thread pool already configured");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    if let Cmd::Ingest(a) = &cli.cmd {
        return ingest_cmd(a);
    }
    let mut ctx = Ctx::new(&cli)?;
    match &cli.cmd {
        Cmd::Synth(a) => synth(&mut ctx, a),
        Cmd::Identify(a) => identify_cmd(&mut ctx, a),
        Cmd::Steer(a) => steer_cmd(&mut ctx, a),
        Cmd::Ablate(a) => ablate_cmd(&mut ctx, a),
        Cmd::Sweep(a) => sweep_cmd(&mut ctx, a),
        Cmd::Eval(a) => eval_cmd(&mut ctx, a),
        Cmd::Ingest(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
