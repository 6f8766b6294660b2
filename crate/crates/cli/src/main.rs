use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adfa::evalem::{em_refine_with, heldout_latent_loglik, last_tag_accuracy, EmConfig};
use adfa::generate::{add_anchor_confounders, random_model, sample_dataset, ParamRanges, StructureKind};
use adfa::io::{self, AnchorSpec, Artifact};
use adfa::loadings::{loadings_table, FailureEstimator, LeakMethod};
use adfa::moments::Constraint;
use adfa::noise::{pick_third_view, singly_labeled_estimate, triplet_decompose, TripletTensor, DEFAULT_MIN_COUNT};
use adfa::pipeline::{
    loadings_stage, moments_stage, pipeline_fingerprint, resolve_anchors, run_pipeline, structure_stage,
    MomentsStage, PipelineConfig, PipelinePaths, StructureMode, StructureStage, MODEL_KIND, MOMENTS_KIND,
    STRUCTURE_KIND,
};
use adfa::structure::edge_list;
use adfa::{AdfaError, AdfaModel, BinaryDataset, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adfa", version, about = "Anchored discrete factor analysis")]
struct Cli {
    /// Worker threads for parallel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random model and sample a dataset from it.
    Generate(GenerateArgs),
    /// Recover latent moments from anchor moments.
    Moments(MomentsArgs),
    /// Learn the latent network from a moments artifact.
    Structure(StructureArgs),
    /// Learn noisy-or loadings for a learned structure.
    Loadings(LoadingsArgs),
    /// Run moments, structure and loadings in one go.
    Learn(LearnArgs),
    /// Fill in missing anchor noise rates.
    NoiseEst(NoiseArgs),
    /// Refine failures and leaks with Monte-Carlo EM.
    EmRefine(EmArgs),
    /// Last-tag prediction accuracy.
    EvalLasttag(LastTagArgs),
    /// Mean held-out log-likelihood of latent label rows.
    EvalHeldout(HeldoutArgs),
    /// Signed edge list of a structure artifact.
    ExportEdges(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    latents: usize,
    #[arg(long)]
    observed: usize,
    /// independent, tree or indegree-K
    #[arg(long, default_value = "tree")]
    structure: String,
    #[arg(long)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Give each anchor a second latent parent with this failure probability.
    #[arg(long)]
    confound: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    anchors: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, default_value_t = 2)]
    order: usize,
    /// simplex, local or marginal
    #[arg(long, default_value = "marginal")]
    constraint: String,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_loadings: f64,
    #[arg(long, default_value_t = 0.005)]
    gap_tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// independent, tree or indegree-K
    #[arg(long, default_value = "tree")]
    mode: String,
    /// auto, direct, blanket, blanket-weighted or tree
    #[arg(long, default_value = "auto")]
    estimator: String,
    /// quickscore, tree-bp, sampling or exact (default: by network shape)
    #[arg(long)]
    leak_method: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated latent names the anchor file must cover.
    #[arg(long, value_delimiter = ',')]
    latents: Option<Vec<String>>,
}

impl ConfigArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let leak_method = match &self.leak_method {
            Some(s) => Some(s.parse::<LeakMethod>()?),
            None => None,
        };
        let config = PipelineConfig {
            order: self.order,
            constraint: self.constraint.parse::<Constraint>()?,
            lambda_structure: self.lambda,
            lambda_loadings: self.lambda_loadings,
            gap_tol: self.gap_tol,
            max_iters: self.max_iters,
            structure: self.mode.parse::<StructureMode>()?,
            estimator: self.estimator.parse::<FailureEstimator>()?,
            leak_method,
            seed: self.seed,
            latents: self.latents.clone(),
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct MomentsArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StructureArgs {
    #[arg(long)]
    moments: PathBuf,
    /// independent, tree or indegree-K
    #[arg(long, default_value = "tree")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LoadingsArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    structure: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write the ranked loadings table here.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct LearnArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct NoiseArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Latent label rows for singly-labeled estimation.
    #[arg(long, conflicts_with = "second_anchor")]
    labels: Option<PathBuf>,
    /// Use only the first N label rows.
    #[arg(long)]
    labeled_rows: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    min_count: usize,
    /// `name=index` second anchor for triplet decomposition; repeatable.
    #[arg(long)]
    second_anchor: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    burn_in: usize,
    #[arg(long, default_value_t = 20)]
    sweeps: usize,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write `step loglik_before loglik_after` rows here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct LastTagArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 5000)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct HeldoutArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    structure: PathBuf,
    #[arg(long)]
    moments: PathBuf,
    /// Take latent names from this anchor file.
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_model(path: &Path) -> Result<Artifact<AdfaModel>> {
    let mut a = Artifact::<AdfaModel>::read(path, MODEL_KIND)?;
    let m = a.payload;
    a.payload = AdfaModel::from_parts_unchecked(m.space, m.latent, m.loadings, m.anchors)?;
    Ok(a)
}

fn read_inputs(input: &InputArgs, config: &PipelineConfig) -> Result<(BinaryDataset, AnchorSpec)> {
    let spec = resolve_anchors(&io::parse_anchors(&input.anchors)?, config.latents.as_deref())?;
    let data = io::parse_dataset(&input.data, None, None)?;
    spec.check_width(data.n_observed)?;
    Ok((data, spec))
}

fn print_json(value: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let kind = match a.structure.parse::<StructureMode>()? {
        StructureMode::Independent => StructureKind::Independent,
        StructureMode::Tree => StructureKind::Tree,
        StructureMode::InDegree(k) => StructureKind::InDegree(k),
    };
    let mut model = random_model(
        a.latents,
        a.observed,
        kind,
        io::stage_seed(a.seed, "model"),
        &ParamRanges::default(),
    )?;
    if let Some(f) = a.confound {
        model = add_anchor_confounders(&model, f, io::stage_seed(a.seed, "confound"))?;
    }
    let data = sample_dataset(&model, a.rows, io::stage_seed(a.seed, "sample"))?;
    let fp = io::fingerprint(&serde_json::json!({
        "latents": a.latents, "observed": a.observed, "structure": a.structure,
        "rows": a.rows, "seed": a.seed, "confound": a.confound,
    }))?;
    std::fs::create_dir_all(&a.out_dir)?;
    io::write_dataset(&data, &a.out_dir.join("data.txt"), Some(&a.out_dir.join("labels.txt")))?;
    let spec = AnchorSpec::from_map(model.space.latent_names.clone(), &model.anchors);
    std::fs::write(a.out_dir.join("anchors.txt"), io::format_anchors(&spec))?;
    Artifact::new(MODEL_KIND, fp, model).write(&a.out_dir.join("model.json"))
}

fn moments(a: &MomentsArgs) -> Result<()> {
    let config = a.config.config()?;
    let (data, spec) = read_inputs(&a.input, &config)?;
    let fp = pipeline_fingerprint(&config, &data, &spec)?;
    let stage = moments_stage(&data, &spec.to_map()?, &config)?;
    if !stage.converged {
        eprintln!("warning: moment recovery stopped at the iteration cap");
    }
    Artifact::new(MOMENTS_KIND, fp, stage).write(&a.out)
}

fn structure(a: &StructureArgs) -> Result<()> {
    let moments = Artifact::<MomentsStage>::read(&a.moments, MOMENTS_KIND)?;
    let mode = a.mode.parse::<StructureMode>()?;
    let stage = structure_stage(&moments.payload, mode)?;
    let fp = io::fingerprint(&(&moments.fingerprint, mode))?;
    Artifact::new(STRUCTURE_KIND, fp, stage).write(&a.out)
}

fn loadings(a: &LoadingsArgs) -> Result<()> {
    let config = a.config.config()?;
    let (data, spec) = read_inputs(&a.input, &config)?;
    let structure = Artifact::<StructureStage>::read(&a.structure, STRUCTURE_KIND)?;
    let model = loadings_stage(&data, &spec, &structure.payload.network, &config)?;
    let fp = io::fingerprint(&(&structure.fingerprint, pipeline_fingerprint(&config, &data, &spec)?))?;
    if let Some(t) = &a.table {
        std::fs::write(t, loadings_table(&model.loadings, &model.space))?;
    }
    Artifact::new(MODEL_KIND, fp, model).write(&a.out)
}

fn learn(a: &LearnArgs) -> Result<()> {
    let config = a.config.config()?;
    let paths = PipelinePaths {
        data: a.input.data.clone(),
        labels: a.labels.clone(),
        anchors: a.input.anchors.clone(),
        out_dir: Some(a.out_dir.clone()),
    };
    let out = run_pipeline(&config, &paths)?;
    if !out.moments.converged {
        eprintln!("warning: moment recovery stopped at the iteration cap");
    }
    println!("{}", out.fingerprint);
    Ok(())
}

fn noise_est(a: &NoiseArgs) -> Result<()> {
    let mut spec = io::parse_anchors(&a.input.anchors)?;
    let data = io::parse_dataset(&a.input.data, None, None)?;
    spec.check_width(data.n_observed)?;
    if let Some(path) = &a.labels {
        let (_, mut rows) = io::parse_sparse_rows(&std::fs::read_to_string(path)?, Some(spec.len()))?;
        if rows.len() > data.len() {
            return Err(AdfaError::InvalidArgument("more label rows than data rows".into()));
        }
        rows.truncate(a.labeled_rows.unwrap_or(rows.len()));
        for i in spec.missing_rates() {
            let mut labels: Vec<Option<bool>> = rows.iter().map(|r| Some(r[i])).collect();
            labels.resize(data.len(), None);
            let est = singly_labeled_estimate(&data, &labels, spec.anchor_of[i], a.min_count)?;
            spec.rates[i] = Some(est.rates());
        }
    } else {
        for pair in &a.second_anchor {
            let (name, idx) = pair
                .split_once('=')
                .ok_or_else(|| AdfaError::InvalidArgument(format!("`{pair}` is not name=index")))?;
            let i = spec
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| AdfaError::InvalidArgument(format!("unknown latent `{name}`")))?;
            let w2: usize = idx
                .parse()
                .map_err(|_| AdfaError::InvalidArgument(format!("`{idx}` is not an observed index")))?;
            let w1 = spec.anchor_of[i];
            let x = pick_third_view(&data, w1, w2, &spec.anchor_of)?;
            let params = triplet_decompose(&TripletTensor::empirical(&data, w1, w2, x)?)
                .map_err(|e| e.in_stage("noise"))?;
            spec.rates[i] = Some(params.w1_rates());
        }
    }
    if let Some(&i) = spec.missing_rates().first() {
        return Err(AdfaError::InvalidArgument(format!(
            "no noise estimate for latent `{}`",
            spec.names[i]
        )));
    }
    std::fs::write(&a.out, io::format_anchors(&spec))?;
    Ok(())
}

fn em_refine(a: &EmArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let data = io::parse_dataset(&a.data, Some(model.payload.n()), None)?;
    let config = EmConfig {
        outer_steps: a.steps,
        burn_in: a.burn_in,
        sweeps: a.sweeps,
        samples: a.samples,
        seed: io::stage_seed(a.seed, "em"),
        ..EmConfig::default()
    };
    let result = em_refine_with(&model.payload, &data, &config, |step, _| {
        eprintln!("em step {step} done");
        Ok(())
    })?;
    if let Some(t) = &a.trace {
        let mut s = String::from("step\tloglik_before\tloglik_after\n");
        for st in &result.trace {
            s.push_str(&format!("{}\t{:.9e}\t{:.9e}\n", st.step, st.loglik_before, st.loglik_after));
        }
        std::fs::write(t, s)?;
    }
    let fp = io::fingerprint(&(&model.fingerprint, &config, io::format_sparse_rows(&data.observed_rows)))?;
    Artifact::new(MODEL_KIND, fp, result.model).write(&a.out)
}

fn eval_lasttag(a: &LastTagArgs) -> Result<()> {
    let model = read_model(&a.model)?.payload;
    let data = io::parse_dataset(&a.data, Some(model.n()), Some((&a.labels, model.m())))?;
    let report = last_tag_accuracy(&model, &data, a.rows, io::stage_seed(a.seed, "lasttag"))?;
    print_json(serde_json::to_value(report)?)
}

fn eval_heldout(a: &HeldoutArgs) -> Result<()> {
    let model = read_model(&a.model)?.payload;
    let (_, rows) = io::parse_sparse_rows(&std::fs::read_to_string(&a.labels)?, Some(model.m()))?;
    let ll = heldout_latent_loglik(&model.latent, &rows)?;
    print_json(serde_json::json!({ "rows": rows.len(), "mean_loglik": ll }))
}

fn export_edges(a: &ExportArgs) -> Result<()> {
    let structure = Artifact::<StructureStage>::read(&a.structure, STRUCTURE_KIND)?;
    let moments = Artifact::<MomentsStage>::read(&a.moments, MOMENTS_KIND)?;
    let names = match &a.anchors {
        Some(p) => io::parse_anchors(p)?.names,
        None => Vec::new(),
    };
    let tsv = edge_list(&structure.payload.structure, &moments.payload.moments, &names)?;
    match &a.out {
        Some(p) => std::fs::write(p, tsv)?,
        None => print!("{tsv}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| AdfaError::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Moments(a) => moments(a),
        Command::Structure(a) => structure(a),
        Command::Loadings(a) => loadings(a),
        Command::Learn(a) => learn(a),
        Command::NoiseEst(a) => noise_est(a),
        Command::EmRefine(a) => em_refine(a),
        Command::EvalLasttag(a) => eval_lasttag(a),
        Command::EvalHeldout(a) => eval_heldout(a),
        Command::ExportEdges(a) => export_edges(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
