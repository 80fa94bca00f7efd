use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use estsel::aggregate::{self, Dictionary, DEFAULT_SIZE_CAP};
use estsel::distkernel::{pen_delta, PenaltyQuery};
use estsel::io::{read_table, read_vector, sig12};
use estsel::linsmooth::{nadaraya_watson, select_linear, Kernel, LinearSmoother};
use estsel::modelspace::{ModelRegistry, ModelSpace, SpaceId, WeightScheme, DEFAULT_RANK_TOL};
use estsel::selector::{select, EstimatorCandidate, SelectionConfig, SelectionReport};
use estsel::simharness::{self, Campaign, Family, LassoStudy, Study, VarSelStudy};
use estsel::varselect::{
    default_exhaustive_dmax, default_path_dmax, exhaustive_supports, lars_lasso_path, lars_supports, parse_manifest,
    ridge_rank_supports, varselect, DesignMatrix, SupportCatalog, RIDGE_GRID,
};
use estsel::{Error, Result, Vector};

#[derive(Parser)]
#[command(name = "estsel", version, about = "Gaussian estimator selection with unknown variance")]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML file with default parameters; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the penalty equation for one space.
    Penalty(PenaltyArgs),
    /// Select among candidates described in a JSON problem file.
    Select(SelectArgs),
    /// Aggregate preliminary estimators.
    Aggregate(AggregateArgs),
    /// Select among linear smoothers.
    Linsmooth(LinsmoothArgs),
    /// Variable selection over candidate supports.
    Varselect(VarselectArgs),
    /// Run a simulation campaign.
    Simulate(SimulateArgs),
    /// Re-run a simulation from its summary and compare.
    Replay(ReplayArgs),
}

#[derive(Args, Default)]
struct Tuning {
    /// Penalty multiplier K (> 1).
    #[arg(long)]
    k: Option<f64>,
    /// Proximity weight alpha (> 0).
    #[arg(long)]
    alpha: Option<f64>,
    /// H4 constant kappa in (0, 1).
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Args)]
struct PenaltyArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dim: usize,
    /// Weight Delta; alternatively give a scheme.
    #[arg(long, conflicts_with = "scheme")]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeKind>,
    /// Number of dictionary elements (aggregation scheme).
    #[arg(long)]
    m_total: Option<usize>,
    /// Subset size |m| (aggregation scheme); defaults to dim.
    #[arg(long)]
    size: Option<usize>,
    /// Number of predictors (varsel scheme).
    #[arg(long)]
    p: Option<usize>,
    /// Constant a (linear scheme).
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeKind {
    Aggregation,
    Varsel,
    Linear,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum AggMode {
    Linear,
    Ms,
    Convex,
    Simultaneous,
}

#[derive(Args)]
struct AggregateArgs {
    /// n×M table whose columns are the preliminary estimators.
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long, value_enum, default_value = "simultaneous")]
    mode: AggMode,
    #[arg(long)]
    size_cap: Option<usize>,
    /// Noise level, only used for the diagnostics.
    #[arg(long)]
    sigma: Option<f64>,
    /// Proceed even if log(eM) > n/2 for the MS branch.
    #[arg(long)]
    allow_violation: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Gaussian,
    Uniform,
}

#[derive(Args)]
struct LinsmoothArgs {
    #[arg(long)]
    y: PathBuf,
    /// n×n smoother matrices, one file each.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    smoothers: Vec<PathBuf>,
    /// Design points for Nadaraya-Watson smoothers.
    #[arg(long)]
    nw_x: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    bandwidths: Vec<f64>,
    #[arg(long, value_enum, default_value = "gaussian")]
    kernel: KernelArg,
    /// Weight constant a in Delta = a (1 v dim); default (log |Lambda|) v 1.
    #[arg(long)]
    a: Option<f64>,
    /// Also offer the nested spaces S^k.
    #[arg(long)]
    nested: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args)]
struct VarselectArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    response: PathBuf,
    /// Column of the response file when it has several.
    #[arg(long)]
    response_column: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "lars,ridge,exhaustive")]
    procedures: Vec<String>,
    /// D_max for the path procedures.
    #[arg(long)]
    dmax: Option<usize>,
    #[arg(long)]
    exhaustive_dmax: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ridge_grid: Vec<f64>,
    /// JSON manifest of externally computed supports.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum StudyKind {
    Lasso,
    Varsel,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    family: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    rho: f64,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    designs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "lasso")]
    study: StudyKind,
    #[arg(long)]
    dmax: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    exhaustive_dmax: Option<usize>,
    /// Directory for rows.csv and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args)]
struct ReplayArgs {
    /// A summary.json written by `simulate`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    k: Option<f64>,
    alpha: Option<f64>,
    kappa: Option<f64>,
    a: Option<f64>,
    dmax: Option<usize>,
    exhaustive_dmax: Option<usize>,
    size_cap: Option<usize>,
    seed: Option<u64>,
    reps: Option<usize>,
    designs: Option<usize>,
    folds: Option<usize>,
    ridge_grid: Option<Vec<f64>>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
    }
}

fn selection_config(t: &Tuning, fc: &FileConfig) -> Result<SelectionConfig> {
    let d = SelectionConfig::default();
    let c = SelectionConfig {
        k: t.k.or(fc.k).unwrap_or(d.k),
        alpha: t.alpha.or(fc.alpha).unwrap_or(d.alpha),
        kappa: t.kappa.or(fc.kappa).unwrap_or(d.kappa),
        delta: d.delta,
    };
    c.validate()?;
    Ok(c)
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, serde_json::to_string_pretty(value)?)?;
    }
    Ok(())
}

fn print_report(r: &SelectionReport) {
    println!("chosen {} crit {}", r.chosen, sig12(r.chosen_crit));
    println!("{:<24} {:>20} {:>6} {:>20}", "candidate", "crit", "dim", "space");
    for c in &r.per_candidate {
        println!("{:<24} {:>20} {:>6} {:>20}", c.id, sig12(c.crit), c.dim, c.space.0);
    }
    for w in &r.warnings {
        println!("warning: {w}");
    }
}

fn cmd_penalty(a: &PenaltyArgs) -> Result<()> {
    let delta = match (a.delta, a.scheme) {
        (Some(d), _) => d,
        (None, Some(SchemeKind::Aggregation)) => {
            let m = a.m_total.ok_or_else(|| Error::Config("--m-total is required for the aggregation scheme".into()))?;
            WeightScheme::Aggregation { m_total: m }.weight(a.size.unwrap_or(a.dim))?
        }
        (None, Some(SchemeKind::Varsel)) => {
            let p = a.p.ok_or_else(|| Error::Config("--p is required for the varsel scheme".into()))?;
            WeightScheme::VarSel { p }.weight(a.dim)?
        }
        (None, Some(SchemeKind::Linear)) => {
            let c = a.a.ok_or_else(|| Error::Config("--a is required for the linear scheme".into()))?;
            WeightScheme::Linear { a: c }.weight(a.dim)?
        }
        (None, None) => return Err(Error::Config("give --delta or --scheme".into())),
    };
    let q = PenaltyQuery::new(a.n, a.dim, delta)?;
    let v = pen_delta(&q)?;
    if a.json {
        println!("{}", serde_json::json!({ "n": a.n, "dim": a.dim, "delta": delta, "pen_delta": v.pen_delta, "residual": v.residual }));
    } else {
        println!("pen_delta {}", sig12(v.pen_delta));
        println!("residual {}", sig12(v.residual));
    }
    Ok(())
}

/// `scheme` and its parameters sit at the top level, e.g. `"scheme": "var_sel", "p": 20`.
#[derive(Deserialize)]
struct Problem {
    y: Vec<f64>,
    #[serde(flatten)]
    scheme: Option<WeightScheme>,
    spaces: Vec<ProblemSpace>,
    candidates: Vec<ProblemCandidate>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemSpace {
    id: String,
    /// Spanning vectors, each of length n.
    vectors: Vec<Vec<f64>>,
    #[serde(default)]
    delta: Option<f64>,
    #[serde(default)]
    generators: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemCandidate {
    id: String,
    fitted: Vec<f64>,
    spaces: Vec<String>,
}

fn cmd_select(a: &SelectArgs, fc: &FileConfig) -> Result<()> {
    let cfg = selection_config(&a.tuning, fc)?;
    let prob: Problem = serde_json::from_str(&fs::read_to_string(&a.problem)?)?;
    let n = prob.y.len();
    let scheme = prob.scheme.unwrap_or(WeightScheme::Explicit);
    let y = Vector::from_vec(prob.y);
    let mut spaces = Vec::new();
    for s in prob.spaces {
        let vecs: Vec<Vector> = s.vectors.into_iter().map(Vector::from_vec).collect();
        let mut sp = ModelSpace::span_of(s.id.as_str(), n, &vecs, DEFAULT_RANK_TOL)?;
        if let Some(g) = s.generators {
            sp = sp.with_generators(g);
        }
        match (s.delta, scheme) {
            (Some(d), _) => sp = sp.with_delta(d),
            (None, WeightScheme::Explicit) => return Err(Error::Config(format!("space {} has no delta", s.id))),
            _ => {}
        }
        spaces.push(sp);
    }
    let cands: Vec<EstimatorCandidate<f64>> = prob
        .candidates
        .into_iter()
        .map(|c| EstimatorCandidate::new(c.id, Vector::from_vec(c.fitted), c.spaces.into_iter().map(SpaceId::from).collect()))
        .collect();
    let reg = ModelRegistry::build(n, spaces, scheme, cfg.kappa)?;
    let r = select(&cands, &y, &reg, cfg)?;
    print_report(&r);
    write_json(a.out.as_deref(), &r)
}

fn cmd_aggregate(a: &AggregateArgs, fc: &FileConfig) -> Result<()> {
    let cfg = selection_config(&a.tuning, fc)?;
    let dict = Dictionary::new(read_table(&a.dict)?.data)?;
    let y = read_vector(&a.y, None)?;
    let cap = a.size_cap.or(fc.size_cap).unwrap_or(DEFAULT_SIZE_CAP);
    match a.mode {
        AggMode::Linear => {
            let (est, space) = aggregate::linear_aggregate(&dict, &y)?;
            println!("linear aggregate: dim {}", space.dim());
            write_json(a.out.as_deref(), &serde_json::json!({ "estimate": est.as_slice() }))
        }
        AggMode::Ms => {
            let r = aggregate::ms_aggregate(&dict, &y, cfg, a.allow_violation)?;
            print_report(&r);
            write_json(a.out.as_deref(), &r)
        }
        AggMode::Convex => {
            let (est, r) = aggregate::convex_aggregate(&dict, &y, cfg, cap)?;
            println!("convex aggregate: space {} crit {}", r.chosen_space, sig12(r.crit));
            let w: Vec<String> = r.weights.iter().map(|w| sig12(*w)).collect();
            println!("weights {}", w.join(" "));
            write_json(a.out.as_deref(), &serde_json::json!({ "estimate": est.as_slice(), "report": r }))
        }
        AggMode::Simultaneous => {
            let r = aggregate::aggregate_all(&dict, &y, cfg, cap, a.sigma)?;
            print_report(&r.report);
            println!("d(n,M) {} size limit {}", sig12(r.diagnostics.d_n_m), r.size_limit);
            write_json(a.out.as_deref(), &r)
        }
    }
}

fn cmd_linsmooth(a: &LinsmoothArgs, fc: &FileConfig) -> Result<()> {
    let cfg = selection_config(&a.tuning, fc)?;
    let y = read_vector(&a.y, None)?;
    let mut smoothers = Vec::new();
    for p in &a.smoothers {
        let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
        smoothers.push(LinearSmoother::new(id, read_table(p)?.data)?);
    }
    if let Some(xp) = &a.nw_x {
        let x = read_vector(xp, None)?;
        let kernel = match a.kernel {
            KernelArg::Gaussian => Kernel::Gaussian,
            KernelArg::Uniform => Kernel::Uniform,
        };
        for &h in &a.bandwidths {
            smoothers.push(nadaraya_watson(format!("nw_h{h}"), x.as_slice(), h, kernel)?);
        }
    }
    let r = select_linear(&smoothers, &y, a.a.or(fc.a), cfg, a.nested)?;
    print_report(&r.report);
    println!("a {}", sig12(r.a));
    write_json(a.out.as_deref(), &r)
}

fn cmd_varselect(a: &VarselectArgs, fc: &FileConfig) -> Result<()> {
    let cfg = selection_config(&a.tuning, fc)?;
    let t = read_table(&a.design)?;
    let design = DesignMatrix::new(t.data, t.header)?;
    let y = read_vector(&a.response, a.response_column.as_deref())?;
    let (n, p) = (design.n(), design.p());
    let dmax = a.dmax.or(fc.dmax).unwrap_or(default_path_dmax(n, p));
    let ex_dmax = a.exhaustive_dmax.or(fc.exhaustive_dmax).unwrap_or(default_exhaustive_dmax(p));
    let grid = if a.ridge_grid.is_empty() { fc.ridge_grid.clone().unwrap_or(RIDGE_GRID.to_vec()) } else { a.ridge_grid.clone() };
    let mut catalog = SupportCatalog::new();
    for proc_ in &a.procedures {
        match proc_.as_str() {
            "lars" => catalog.extend(lars_supports(&lars_lasso_path(&design, &y, dmax)?)),
            "ridge" => catalog.extend(ridge_rank_supports(&design, &y, &grid, dmax)?),
            "exhaustive" => catalog.extend(exhaustive_supports(p, ex_dmax)?),
            "external" => {}
            other => return Err(Error::Config(format!("unknown procedure {other:?}"))),
        }
    }
    if let Some(m) = &a.manifest {
        catalog.extend(parse_manifest(&fs::read_to_string(m)?, p)?);
    }
    let r = varselect(&design, &y, &catalog, cfg)?;
    let idx: Vec<String> = r.chosen.indices.iter().map(|j| (j + 1).to_string()).collect();
    println!("chosen support {{{}}} crit {}", idx.join(","), sig12(r.report.chosen_crit));
    println!("labels {}", r.report.chosen_labels.join(" "));
    for w in &r.report.per_procedure {
        let idx: Vec<String> = w.indices.iter().map(|j| (j + 1).to_string()).collect();
        println!("best {:<12} {{{}}} crit {}", w.procedure, idx.join(","), sig12(w.crit));
    }
    println!("supports scored {}", r.report.per_support.len());
    for w in &r.report.warnings {
        println!("warning: {w}");
    }
    write_json(a.out.as_deref(), &serde_json::json!({ "report": r.report, "estimate": r.estimate.as_slice() }))
}

fn print_campaign(r: &simharness::CampaignResult) {
    for row in &r.rows {
        let risks: Vec<String> = row.risk.risks.iter().map(|x| format!("{} {}", x.name, sig12(x.mean))).collect();
        let oracle = row.risk.oracle.as_ref().map(|o| sig12(o.mean)).unwrap_or_else(|| "-".into());
        println!(
            "design {} sigma2 {} oracle {} {} kept {}",
            row.example.design_index,
            sig12(row.risk.sigma2),
            oracle,
            risks.join(" "),
            row.kept
        );
    }
    println!("{:<12} {:>6} {:>16} {:>16}  quantiles 0/50/75/95/99/100", "table", "count", "mean", "std-err");
    for t in &r.tables {
        let q: Vec<String> = t.quantiles.iter().map(|x| sig12(x.1)).collect();
        println!("{:<12} {:>6} {:>16} {:>16}  {}", t.name, t.count, sig12(t.mean), sig12(t.std_err), q.join(" "));
    }
}

fn cmd_simulate(a: &SimulateArgs, fc: &FileConfig) -> Result<()> {
    let cfg = selection_config(&a.tuning, fc)?;
    let family: Family = a.family.parse()?;
    let study = match a.study {
        StudyKind::Lasso => Study::Lasso(LassoStudy {
            d_max: a.dmax.or(fc.dmax).unwrap_or(default_path_dmax(a.n, a.p)),
            v: a.folds.or(fc.folds),
            config: cfg,
        }),
        StudyKind::Varsel => Study::VarSel(VarSelStudy {
            path_dmax: a.dmax.or(fc.dmax),
            exhaustive_dmax: a.exhaustive_dmax.or(fc.exhaustive_dmax),
            ridge_grid: fc.ridge_grid.clone().unwrap_or(RIDGE_GRID.to_vec()),
            config: cfg,
        }),
    };
    let c = Campaign {
        family,
        n: a.n,
        p: a.p,
        rho: a.rho,
        n_designs: a.designs.or(fc.designs).unwrap_or(2),
        n_sims: a.reps.or(fc.reps).unwrap_or(100),
        seed: a.seed.or(fc.seed).unwrap_or(0),
        study,
    };
    simharness::gen_example(&c.example(0))?;
    let r = simharness::run_campaign(&c)?;
    print_campaign(&r);
    if let Some(dir) = &a.out {
        simharness::write_campaign(dir, &r)?;
    }
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> Result<bool> {
    let (r, same) = simharness::replay(&fs::read_to_string(&a.report)?)?;
    print_campaign(&r);
    if let Some(dir) = &a.out {
        simharness::write_campaign(dir, &r)?;
    }
    println!("replay {}", if same { "identical" } else { "differs" });
    Ok(same)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let fc = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Penalty(a) => cmd_penalty(a)?,
        Command::Select(a) => cmd_select(a, &fc)?,
        Command::Aggregate(a) => cmd_aggregate(a, &fc)?,
        Command::Linsmooth(a) => cmd_linsmooth(a, &fc)?,
        Command::Varselect(a) => cmd_varselect(a, &fc)?,
        Command::Simulate(a) => cmd_simulate(a, &fc)?,
        Command::Replay(a) => return cmd_replay(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", serde_json::json!({ "error": "replay_mismatch", "message": "replayed report differs" }));
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

