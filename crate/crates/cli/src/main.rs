use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ivcf_cli::config::{check_policy_depth, Overrides, RunConfig};
use ivcf_cli::output::{self, emit, emit_json};
use ivcf_cli::pipeline::{
    dr_scores, fit_model, forest_effect_row, importance_rows, linear_effect_row, load_table, ForestEffectRow,
    LinearEffectRow, QuantileRow,
};
use ivcf_cli::{run_pipeline, training_frame, CliError, CliResult, TrainedOn};
use ivcf_core::aggregate::{
    gates_for, histogram_bins, ite_quantiles, profile_by_effect_sign, Estimand, SignRule, DEFAULT_QUANTILES,
    DEFAULT_TRIM,
};
use ivcf_core::inference::classify_significance;
use ivcf_core::linear::{fit_2sls, Controls};
use ivcf_core::policy::{allocate_capacity, learn_policy_tree, profile_allocation, Direction, RewardSpec};
use ivcf_core::synth::{generate, DgpSpec};
use ivcf_core::{predict_ite, Error, IvForestModel, ObservationFrame, Schema, SubgroupSpec, TreeParams};

/// Instrumental causal forests: heterogeneous effects, doubly robust
/// aggregation and policy learning.
///
/// Exit status: 0 success, 2 invalid arguments or configuration, 3 data
/// error, 4 numerical failure.
#[derive(Parser)]
#[command(name = "ivcf", version)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a CSV under a schema and report complete-case filtering.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grow an instrumental forest and save it.
    Fit(FitArgs),
    /// Per-unit effect estimates (out-of-bag on the training data).
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Doubly robust average effect next to the linear 2SLS estimate.
    Late {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Group average effects for covariate predicates such as `age>=50`.
    Gate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "subgroup", required = true)]
        subgroups: Vec<String>,
        /// Skip the complement of each subgroup.
        #[arg(long)]
        no_complements: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantiles of the estimated effects.
    Quantiles {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        probs: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Depth-weighted split-frequency importance.
    Varimp {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Covariate means of units with increased against decreased effects.
    Profile {
        #[command(flatten)]
        model: ModelArgs,
        /// Only count effects significant at this level.
        #[arg(long)]
        significant: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram spec of the estimated effects.
    Hist {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = DEFAULT_TRIM)]
        trim: f64,
        /// Level at which bars count significant effects.
        #[arg(long, default_value_t = 0.10)]
        level: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn a depth-1 or depth-2 treatment rule from doubly robust scores.
    PolicyTree {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        features: Vec<String>,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, value_enum)]
        direction: DirectionArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Treat the K units with the largest rewards.
    Allocate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum)]
        direction: DirectionArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a synthetic experiment with known effects.
    Simulate(SimulateArgs),
    /// The full pipeline from a JSON run configuration.
    Run(RunArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    /// Schema JSON mapping roles onto columns.
    #[arg(long)]
    schema: PathBuf,
    /// Analyse this column instead of the schema's outcome.
    #[arg(long)]
    outcome: Option<String>,
}

impl DataArgs {
    /// Loads the frame. A treatment column named by the schema but absent
    /// from the data is dropped, as is any treatment when `drop_treatment` is set.
    fn load(&self, drop_treatment: bool) -> CliResult<ObservationFrame> {
        let mut schema = Schema::from_json_file(&self.schema)?;
        if let Some(o) = &self.outcome {
            schema = schema.with_outcome(o);
        }
        let table = load_table(&self.input, &schema)?;
        let absent = schema.treatment.as_ref().is_some_and(|t| !table.headers().contains(t));
        if drop_treatment || absent {
            schema.treatment = None;
        }
        let (frame, report) = ObservationFrame::from_table(&table, &schema)?;
        if report.rows_dropped() > 0 {
            eprintln!("ivcf: dropped {} incomplete rows", report.rows_dropped());
        }
        Ok(frame)
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Model written by `fit`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

/// A model with the frame it was trained on.
struct Fitted {
    model: IvForestModel,
    frame: ObservationFrame,
    trained_on: TrainedOn,
}

impl ModelArgs {
    fn load_training(&self) -> CliResult<Fitted> {
        let model = IvForestModel::load(&self.model)?;
        let data = self.data.load(false)?;
        let (_, trained_on) = training_frame(&model, &data)?;
        Ok(Fitted {
            model,
            frame: data,
            trained_on,
        })
    }
}

impl Fitted {
    fn estimand(&self) -> Estimand {
        match self.trained_on {
            TrainedOn::Late => Estimand::Late,
            TrainedOn::Itt => Estimand::Itt,
        }
    }

    fn rewards(&self, direction: DirectionArg) -> CliResult<Vec<f64>> {
        let scores = dr_scores(&self.model, &self.frame, self.trained_on)?;
        let spec = RewardSpec {
            outcome: self.frame.outcome_name().to_owned(),
            direction: direction.into(),
        };
        Ok(spec.rewards(&scores.scores)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimandArg {
    Late,
    Itt,
}

impl From<EstimandArg> for Estimand {
    fn from(e: EstimandArg) -> Self {
        match e {
            EstimandArg::Late => Estimand::Late,
            EstimandArg::Itt => Estimand::Itt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Maximize,
    Minimize,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Maximize => Direction::Maximize,
            DirectionArg::Minimize => Direction::Minimize,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "late")]
    estimand: EstimandArg,
    /// Forest parameters as JSON; flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Use the large-scale tree count.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grow on raw rather than nuisance-residualised data.
    #[arg(long)]
    no_center: bool,
    /// Output path; a `.json` extension selects JSON, otherwise binary.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Generator settings as JSON; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Writes data.csv, schema.json and truth.json here.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    estimand: Option<EstimandArg>,
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?)
}

fn csv_out<T: Serialize>(out: Option<&Path>, rows: &[T]) -> CliResult<()> {
    Ok(emit(out, &output::csv_string(rows)?)?)
}

#[derive(Serialize)]
struct IngestSummary {
    n_rows: usize,
    n_clusters: usize,
    n_covariates: usize,
    has_treatment: bool,
    fingerprint: String,
}

#[derive(Serialize)]
struct EffectSummary {
    forest: ForestEffectRow,
    linear: LinearEffectRow,
}

fn fit(a: &FitArgs) -> CliResult<()> {
    let estimand: Estimand = a.estimand.into();
    let frame = a.data.load(estimand == Estimand::Itt)?;
    let mut params: TreeParams = match &a.params {
        Some(p) => read_json(p)?,
        None => TreeParams::default(),
    };
    if a.paper_scale {
        params.n_trees = TreeParams::PAPER_SCALE_TREES;
    }
    if let Some(t) = a.trees {
        params.n_trees = t;
    }
    if let Some(s) = a.seed {
        params.seed = s;
    }
    let model = fit_model(&frame, estimand, &params, !a.no_center).map_err(CliError::stage("fit"))?;
    model.save(&a.model)?;
    Ok(())
}

fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut spec: DgpSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => DgpSpec::default(),
    };
    spec.n = a.n.unwrap_or(spec.n);
    spec.p = a.p.unwrap_or(spec.p);
    spec.seed = a.seed.unwrap_or(spec.seed);
    let data = generate(&spec)?;
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| Error::InvalidData(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let schema = data.frame.write_csv(a.out_dir.join("data.csv"))?;
    output::write_json(&a.out_dir.join("schema.json"), &schema)?;
    data.truth.write_json(a.out_dir.join("truth.json"))?;
    output::write_json(&a.out_dir.join("spec.json"), &spec)?;
    Ok(())
}

fn run(a: &RunArgs) -> CliResult<()> {
    let mut config = RunConfig::from_json_file(&a.config)?;
    config.apply(&Overrides {
        input: a.input.clone(),
        output_dir: a.output_dir.clone(),
        estimand: a.estimand.map(Into::into),
        paper_scale: a.paper_scale,
        n_trees: a.trees,
        seed: a.seed,
    });
    let report = run_pipeline(&config)?;
    for r in &report.effects {
        eprintln!(
            "ivcf: {} {:?} = {:.4} (se {:.4})",
            r.outcome, r.estimand, r.estimate, r.se
        );
    }
    eprintln!(
        "ivcf: wrote {} files and {} to {}",
        report.manifest.files.len(),
        output::MANIFEST,
        report.output_dir.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ingest { data, out } => {
            let frame = data.load(false)?;
            emit_json(
                out.as_deref(),
                &IngestSummary {
                    n_rows: frame.n_rows(),
                    n_clusters: frame.n_clusters(),
                    n_covariates: frame.n_covariates(),
                    has_treatment: frame.has_treatment(),
                    fingerprint: frame.fingerprint(),
                },
            )?;
        }
        Command::Fit(a) => fit(&a)?,
        Command::Predict { model, out } => {
            let m = IvForestModel::load(&model.model)?;
            let frame = model.data.load(false)?;
            let ite = match training_frame(&m, &frame) {
                Ok(_) => m.oob.clone(),
                Err(_) => predict_ite(&m, &frame)?,
            };
            csv_out(out.as_deref(), &output::ite_rows(frame.unit_ids(), &ite))?;
        }
        Command::Late { model, out } => {
            let f = model.load_training()?;
            let scores = dr_scores(&f.model, &f.frame, f.trained_on)?;
            let linear_frame = match f.trained_on {
                TrainedOn::Late => f.frame.clone(),
                TrainedOn::Itt => f.frame.as_intent_to_treat(),
            };
            let name = f.frame.outcome_name();
            let summary = EffectSummary {
                forest: forest_effect_row(name, &f.model, &scores),
                linear: linear_effect_row(name, f.estimand(), &fit_2sls(&linear_frame, Controls::Strata)?),
            };
            emit_json(out.as_deref(), &summary)?;
        }
        Command::Gate {
            model,
            subgroups,
            no_complements,
            out,
        } => {
            let specs = subgroups
                .iter()
                .map(|s| SubgroupSpec::parse(s))
                .collect::<Result<Vec<_>, _>>()?;
            let f = model.load_training()?;
            let scores = dr_scores(&f.model, &f.frame, f.trained_on)?;
            csv_out(out.as_deref(), &gates_for(&scores, &f.frame, &specs, !no_complements)?)?;
        }
        Command::Quantiles { model, probs, out } => {
            let f = model.load_training()?;
            let tau: Vec<f64> = f.model.oob.iter().map(|e| e.tau_hat).collect();
            let probs = probs.unwrap_or_else(|| DEFAULT_QUANTILES.to_vec());
            let q = ite_quantiles(&tau, &probs)?;
            let rows: Vec<QuantileRow> = q
                .iter()
                .map(|&(prob, value)| QuantileRow {
                    outcome: f.frame.outcome_name(),
                    prob,
                    value,
                })
                .collect();
            csv_out(out.as_deref(), &rows)?;
        }
        Command::Varimp { model, depth, out } => {
            if depth == 0 {
                return Err(Error::InvalidParameter("depth must be positive".into()).into());
            }
            let m = IvForestModel::load(&model)?;
            csv_out(out.as_deref(), &importance_rows("", &m, depth))?;
        }
        Command::Profile {
            model,
            significant,
            out,
        } => {
            let rule = match significant {
                Some(level) if level > 0.0 && level < 1.0 => SignRule::Significant { level },
                Some(level) => return Err(Error::InvalidParameter(format!("level {level} not in (0, 1)")).into()),
                None => SignRule::Strict,
            };
            let f = model.load_training()?;
            let profile = profile_by_effect_sign(&f.frame, &f.model.oob, rule)?;
            if let Some(side) = &profile.empty_side {
                eprintln!("ivcf: no units on the {side} side");
            }
            csv_out(out.as_deref(), &profile.rows)?;
        }
        Command::Hist {
            model,
            trim,
            level,
            out,
        } => {
            if !(level > 0.0 && level < 1.0) {
                return Err(Error::InvalidParameter(format!("level {level} not in (0, 1)")).into());
            }
            let f = model.load_training()?;
            let tau: Vec<f64> = f.model.oob.iter().map(|e| e.tau_hat).collect();
            let pairs: Vec<(f64, f64)> = f.model.oob.iter().map(|e| (e.tau_hat, e.se)).collect();
            let sig = classify_significance(&pairs, &[level]);
            emit_json(out.as_deref(), &histogram_bins(&tau, Some(&sig.flags[0]), trim)?)?;
        }
        Command::PolicyTree {
            model,
            features,
            depth,
            direction,
            out,
        } => {
            check_policy_depth(depth)?;
            let f = model.load_training()?;
            let rewards = f.rewards(direction)?;
            let tree = learn_policy_tree(&f.frame, &rewards, &features, depth)?;
            eprint!("{}", tree.render());
            emit_json(out.as_deref(), &tree)?;
        }
        Command::Allocate {
            model,
            k,
            direction,
            out,
        } => {
            if k == 0 {
                return Err(Error::InvalidParameter("capacity K = 0 is out of range; K must be at least 1".into()).into());
            }
            let f = model.load_training()?;
            let rewards = f.rewards(direction)?;
            let alloc = allocate_capacity(&rewards, k)?;
            let all: Vec<usize> = (0..f.frame.n_rows()).collect();
            let profile = profile_allocation(&f.frame, &alloc.treated, &all)?;
            #[derive(Serialize)]
            struct Allocation<'a> {
                #[serde(flatten)]
                result: &'a ivcf_core::policy::AllocationResult,
                profile: &'a ivcf_core::policy::AllocationProfile,
            }
            emit_json(
                out.as_deref(),
                &Allocation {
                    result: &alloc,
                    profile: &profile,
                },
            )?;
        }
        Command::Simulate(a) => simulate(&a)?,
        Command::Run(a) => run(&a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("ivcf: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("ivcf: cannot set up {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ivcf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
