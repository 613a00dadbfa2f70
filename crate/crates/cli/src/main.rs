use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sos_core::data::{generate_synthetic_dataset, load_manifest, load_split_lazy, Split, SynthConfig};
use sos_core::eval::{
    ablate, ablation_tsv, bench_tsv, benchmark, confusion_tsv, decisions_tsv, evaluate, parse_grid, relative_size,
    report_tsv, write_text,
};
use sos_core::sos::{FusionMode, ModelConfig, SosModel, Variant};
use sos_core::train::{load_run, train_run, TrainConfig};

type BoxError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(name = "sos", version, about = "Confidence-gated multi-scale slide classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic four-class dataset.
    GenData(GenDataArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a run on the test split.
    Eval(EvalArgs),
    /// Single-thread inference timing of several runs.
    Bench(BenchArgs),
    /// Train and evaluate every cell of an ablation grid.
    Ablate(AblateArgs),
}

fn parse_counts(s: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected four comma-separated counts".to_string())
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_counts)]
    train_counts: Option<[usize; 4]>,
    #[arg(long, value_parser = parse_counts)]
    test_counts: Option<[usize; 4]>,
    #[arg(long, default_value_t = 256)]
    fullres: usize,
    #[arg(long, default_value_t = 8)]
    factor: usize,
}

#[derive(Args, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Feature width of the extractors.
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value = "gru")]
    fusion: FusionMode,
    #[arg(long)]
    no_l2: bool,
    #[arg(long)]
    no_l3: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl HyperArgs {
    fn config(&self, variant: Variant) -> TrainConfig {
        let mut c = TrainConfig {
            variant,
            epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: self.batch,
            k: self.k,
            d: self.d,
            fusion: self.fusion,
            seed: self.seed,
            ..TrainConfig::default()
        };
        c.loss.enable_l2 = !self.no_l2;
        c.loss.enable_l3 = !self.no_l3;
        c
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "sos")]
    variant: Variant,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Where to write the timing table; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

fn echo(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn gen_data(a: GenDataArgs) -> Result<(), BoxError> {
    let mut config = SynthConfig {
        full_side: a.fullres,
        factor: a.factor,
        ..SynthConfig::default()
    };
    if let Some(c) = a.train_counts {
        config.train_counts = c;
    }
    if let Some(c) = a.test_counts {
        config.test_counts = c;
    }
    let m = generate_synthetic_dataset(&config, a.seed, &a.out)?;
    println!(
        "wrote {} slides ({} train, {} test) to {}",
        m.entries.len(),
        m.split(Split::Train).count(),
        m.split(Split::Test).count(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), BoxError> {
    let config = a.hyper.config(a.variant);
    let outcome = train_run(&config, &a.data, &a.out)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {}: l_total {:.6} l_ce1 {:.6} l_ce2 {:.6}",
            last.epoch, last.loss.l_total, last.loss.l_ce1, last.loss.l_ce2
        );
    }
    println!("run written to {}", a.out.display());
    Ok(())
}

fn image_reference(model: &SosModel) -> Result<SosModel, BoxError> {
    let c = &model.config;
    let mut rc = ModelConfig::new(Variant::ImageLevel, c.classes, c.patch_count, c.k, c.fusion, c.feature_dim());
    rc.channels = c.channels.clone();
    Ok(SosModel::new(rc, 0)?)
}

fn eval(a: EvalArgs) -> Result<(), BoxError> {
    let (config, model) = load_run(&a.run)?;
    let manifest = load_manifest(&a.data)?;
    let test = load_split_lazy(&a.data, &manifest, Split::Test)?;
    let mut report = evaluate(&model, &test)?;
    report.relative_size = Some(relative_size(&model, &image_reference(&model)?)?);
    let mut pairs = config.to_pairs();
    pairs.push(("run", a.run.display().to_string()));
    pairs.push(("data", a.data.display().to_string()));
    let text = report_tsv(
        &[(config.variant.to_string(), &report)],
        &manifest.class_names,
        &echo(&pairs),
    );
    write_text(&a.report, &text)?;
    let sibling = |suffix: &str| {
        let mut p = a.report.clone().into_os_string();
        p.push(suffix);
        PathBuf::from(p)
    };
    write_text(&sibling(".confusion.tsv"), &confusion_tsv(&report, &manifest.class_names))?;
    write_text(&sibling(".decisions.tsv"), &decisions_tsv(&report))?;
    print!("{text}");
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), BoxError> {
    let manifest = load_manifest(&a.data)?;
    let test = load_split_lazy(&a.data, &manifest, Split::Test)?;
    let mut loaded = Vec::new();
    for run in &a.runs {
        let (_, model) = load_run(run)?;
        loaded.push((run.display().to_string(), model));
    }
    let baseline = loaded
        .iter()
        .position(|(_, m)| m.variant() == Variant::MultiScale)
        .ok_or("bench needs a multiscale run as the speed baseline")?;
    let models: Vec<(String, &SosModel)> = loaded.iter().map(|(n, m)| (n.clone(), m)).collect();
    let rows = benchmark(&models, &test, a.reps, baseline)?;
    let text = bench_tsv(
        &rows,
        &echo(&[
            ("data", a.data.display().to_string()),
            ("reps", a.reps.to_string()),
            ("baseline", loaded[baseline].0.clone()),
        ]),
    );
    if let Some(p) = &a.report {
        write_text(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<(), BoxError> {
    let grid_text = std::fs::read_to_string(&a.grid).map_err(|e| format!("{}: {e}", a.grid.display()))?;
    let cells = parse_grid(&grid_text)?;
    let base = a.hyper.config(Variant::Sos);
    let rows = ablate(&cells, &base, &a.data, &a.out)?;
    let mut pairs = base.to_pairs();
    pairs.push(("data", a.data.display().to_string()));
    pairs.push(("grid", a.grid.display().to_string()));
    let text = ablation_tsv(&rows, &echo(&pairs));
    write_text(&Path::new(&a.out).join("ablation.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
