use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use conan::datagen::generate;
use conan::eval::{aggregation_results, evaluate, EvalReport, Method, ReportRow, WeightDump};
use conan::io::{layered, read_dataset, write_dataset, Checkpoint, FloatWidth, RunConfig};
use conan::numerics::FdOptions;
use conan::train::{fit, gradient_check_instance, EpochRecord, FitObserver, LogObserver, TrainState};
use conan::{Dataset, Distribution, Error, Result, Split, Template};
use serde::Serialize;

use crate::{Baseline, Cli, Command, Failure, Global, SplitArg, Width};

pub const CONFIG_DIR_VAR: &str = "CONAN_CONFIG_DIR";
const DEFAULT_CONFIG_FILE: &str = "conan.toml";

pub fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    let config = effective_config(&cli.global)?;
    let echo = config.to_table()?;
    match &cli.command {
        Command::GenSynth { out, width } => gen_synth(&config, echo, out, *width)?,
        Command::Train {
            dataset,
            out_checkpoint,
            log,
            resume,
        } => train(&config, echo, dataset, out_checkpoint, log, resume.as_deref())?,
        Command::Aggregate {
            checkpoint,
            dataset,
            template_id,
            all: _,
            out,
        } => aggregate(echo, checkpoint, dataset, template_id.as_deref(), out)?,
        Command::Eval {
            checkpoint,
            dataset,
            baselines,
            split,
            report,
        } => eval(echo, checkpoint, dataset, baselines, *split, report)?,
        Command::Inspect {
            checkpoint,
            dataset,
            template_id,
        } => inspect(checkpoint, dataset, template_id)?,
        Command::Gradcheck {
            sizes,
            instances,
            max_entries,
        } => gradcheck(cli.global.seed.unwrap_or(0), sizes, *instances, *max_entries)?,
    }
    Ok(())
}

/// Built-in defaults, then the config file, then `--set`, then `--seed`.
fn effective_config(g: &Global) -> Result<RunConfig> {
    let path = match &g.config {
        Some(p) => Some(p.clone()),
        None => std::env::var_os(CONFIG_DIR_VAR)
            .map(|d| PathBuf::from(d).join(DEFAULT_CONFIG_FILE))
            .filter(|p| p.is_file()),
    };
    let text = match &path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("synth.seed={s}"));
        overrides.push(format!("train.seed={s}"));
    }
    let config: RunConfig = layered(text.as_deref(), &overrides)?;
    config.validate()?;
    Ok(config)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_toml<S: Serialize>(value: &S) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Schema(e.to_string()))
}

fn load_pair(checkpoint: &Path, dataset: &Path) -> Result<(Checkpoint, Dataset<f64>)> {
    let ck = Checkpoint::load(checkpoint)?;
    let (ds, _) = read_dataset(dataset)?;
    ck.check_compatible(ds.d, None)?;
    Ok((ck, ds))
}

fn find<'a>(ds: &'a Dataset<f64>, id: &str) -> Result<&'a Template<f64>> {
    ds.templates
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::Usage(format!("no template with id {id:?}")))
}

fn gen_synth(config: &RunConfig, echo: toml::Table, out: &Path, width: Width) -> Result<()> {
    let ds = generate(&config.synth)?;
    let width = match width {
        Width::F32 => FloatWidth::F32,
        Width::F64 => FloatWidth::F64,
    };
    write_dataset(&ds, out, width, Some(echo))?;
    println!(
        "wrote {} templates (d = {}) to {}",
        ds.templates.len(),
        ds.d,
        out.display()
    );
    Ok(())
}

/// Forwards to the log writers and refreshes the checkpoint after every
/// epoch, so an interrupted run can be resumed.
struct TrainObserver<'a> {
    log: LogObserver<BufWriter<File>, BufWriter<File>>,
    checkpoint: &'a Path,
    echo: &'a toml::Table,
}

impl TrainObserver<'_> {
    fn save(&self, state: &TrainState) -> Result<()> {
        let model = state.best.as_ref().map_or(&state.model, |b| &b.model).clone();
        Checkpoint {
            model,
            state: Some(state.clone()),
            config: Some(self.echo.clone()),
        }
        .save(self.checkpoint)
    }
}

impl FitObserver for TrainObserver<'_> {
    fn epoch(&mut self, record: &EpochRecord, state: &TrainState) -> Result<()> {
        self.log.epoch(record, state)?;
        self.save(state)
    }
}

fn train(
    config: &RunConfig,
    echo: toml::Table,
    dataset: &Path,
    out: &Path,
    log_path: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let (ds, _) = read_dataset(dataset)?;
    let state = match resume {
        Some(p) => Some(
            Checkpoint::load(p)?
                .state
                .ok_or_else(|| Error::Schema(format!("{} carries no training state", p.display())))?,
        ),
        None => None,
    };
    let mut timing_path = log_path.as_os_str().to_owned();
    timing_path.push(".timing");
    let timing_path = PathBuf::from(timing_path);
    let log = if state.is_some() {
        let open = |p: &Path| {
            OpenOptions::new()
                .append(true)
                .open(p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(p, e))
        };
        LogObserver::continuing(open(log_path)?, open(&timing_path)?)
    } else {
        let mut log = create(log_path)?;
        let io = |e| Error::io(log_path, e);
        for line in to_toml(&echo)?.lines() {
            writeln!(log, "# {line}").map_err(io)?;
        }
        LogObserver::new(log, create(&timing_path)?)
    };
    let mut observer = TrainObserver {
        log,
        checkpoint: out,
        echo: &echo,
    };
    let outcome = fit(&ds, &config.train, state, &mut observer)?;
    observer.log.log.flush().map_err(|e| Error::io(log_path, e))?;
    observer.log.timing.flush().map_err(|e| Error::io(&timing_path, e))?;
    println!(
        "best epoch {} of {}: val rank-1 {:.4}; checkpoint {}",
        outcome.best.epoch,
        outcome.state.epoch,
        outcome.best.val_rank1,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AggregateFile {
    checkpoint: String,
    config: toml::Table,
    results: Vec<AggregateRow>,
}

#[derive(Serialize)]
struct AggregateRow {
    template_id: String,
    subject_id: String,
    distribution: Distribution,
    temperature: f64,
    media_ids: Vec<String>,
    weights: Vec<f64>,
    similarities: Vec<f64>,
    context: Vec<f64>,
    pooled: Vec<f64>,
}

fn aggregate(echo: toml::Table, checkpoint: &Path, dataset: &Path, id: Option<&str>, out: &Path) -> Result<()> {
    let (ck, ds) = load_pair(checkpoint, dataset)?;
    let templates: Vec<&Template<f64>> = match id {
        Some(id) => vec![find(&ds, id)?],
        None => ds.templates.iter().collect(),
    };
    let results = aggregation_results(&ck.model, &templates)?;
    let rows = templates
        .iter()
        .zip(results)
        .map(|(t, r)| AggregateRow {
            template_id: t.id.clone(),
            subject_id: t.subject_id.clone(),
            distribution: t.distribution,
            temperature: r.temperature,
            media_ids: t.embeddings.iter().map(|e| e.media_id.clone()).collect(),
            weights: r.weights,
            similarities: r.similarities,
            context: r.context,
            pooled: r.pooled,
        })
        .collect::<Vec<_>>();
    let n = rows.len();
    let file = AggregateFile {
        checkpoint: checkpoint.display().to_string(),
        config: echo,
        results: rows,
    };
    write_text(out, &to_toml(&file)?)?;
    println!("aggregated {n} templates to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalFile {
    split: Split,
    checkpoints: Vec<String>,
    config: toml::Table,
    rows: Vec<ReportRow>,
}

fn eval(
    echo: toml::Table,
    checkpoints: &[PathBuf],
    dataset: &Path,
    baselines: &[Baseline],
    split: SplitArg,
    report: &Path,
) -> Result<()> {
    if checkpoints.is_empty() && baselines.is_empty() {
        return Err(Error::Usage(
            "nothing to evaluate: give --checkpoint and/or --baselines".into(),
        ));
    }
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let (ds, _) = read_dataset(dataset)?;
    let mut rows = Vec::new();
    if baselines.contains(&Baseline::Gap) {
        rows.push(evaluate(&ds, split, Method::Gap, "gap")?);
    }
    let mut used = Vec::new();
    for path in checkpoints {
        if !path.exists() {
            log::warn!("checkpoint {} not found; configuration skipped", path.display());
            continue;
        }
        let ck = Checkpoint::load(path)?;
        ck.check_compatible(ds.d, None)?;
        let name = path
            .file_stem()
            .map_or("conan".into(), |s| s.to_string_lossy().into_owned());
        rows.push(evaluate(&ds, split, Method::Conan(&ck.model), &name)?);
        used.push(path.display().to_string());
    }
    if rows.is_empty() {
        let missing = checkpoints.first().expect("checked above");
        return Err(Error::io(missing, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let table = EvalReport { rows: rows.clone() }.table();
    let file = EvalFile {
        split,
        checkpoints: used,
        config: echo,
        rows,
    };
    write_text(report, &to_toml(&file)?)?;
    print!("{table}");
    Ok(())
}

fn inspect(checkpoint: &Path, dataset: &Path, id: &str) -> Result<()> {
    let (ck, ds) = load_pair(checkpoint, dataset)?;
    let t = find(&ds, id)?;
    let r = aggregation_results(&ck.model, &[t])?.remove(0);
    let dump = WeightDump::new(t, &r);
    println!(
        "# template {} (subject {}, {}), temperature {}, checkpoint {}",
        dump.template_id,
        dump.subject_id,
        dump.distribution,
        dump.temperature,
        checkpoint.display()
    );
    println!("media_id\tsimilarity\tweight\tquality_hint");
    for row in dump.sorted_by_weight() {
        let q = row.quality_hint.map_or("-".to_string(), |q| q.to_string());
        println!("{}\t{:.6}\t{:.6e}\t{q}", row.media_id, row.similarity, row.weight);
    }
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("size {s:?} is not DxN"));
    let (d, n) = s.trim().split_once('x').ok_or_else(bad)?;
    let d: usize = d.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    if d < 2 || n == 0 {
        return Err(bad());
    }
    Ok((d, n))
}

fn gradcheck(seed: u64, sizes: &[String], instances: usize, max_entries: usize) -> std::result::Result<(), Failure> {
    let sizes = sizes.iter().map(|s| parse_size(s)).collect::<Result<Vec<_>>>()?;
    if sizes.is_empty() || instances == 0 {
        return Err(Error::Usage("need at least one size and one instance".into()).into());
    }
    let mut failed = 0;
    let mut opts = FdOptions {
        max_entries: (max_entries > 0).then_some(max_entries),
        ..FdOptions::default()
    };
    for i in 0..instances {
        let (d, n) = sizes[i % sizes.len()];
        let s = seed + i as u64;
        opts.sample_seed = s;
        let r = gradient_check_instance(s, d, n, opts)?;
        println!(
            "instance {i:>3}  d={d:<3} N={n:<3} seed={s:<4} entries={:<6} max_rel_err={:.3e}  {}",
            r.checked,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::CheckFailed(format!(
            "{failed} of {instances} instances exceed relative error {}",
            opts.tolerance
        )));
    }
    println!("all {instances} instances within relative error {}", opts.tolerance);
    Ok(())
}
