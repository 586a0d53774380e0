use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spreid::checkpoint::ModelCheckpoint;
use spreid::config::RunConfig;
use spreid::gradcheck::{self, Layer};
use spreid::model::{ParserModel, ReidModel};
use spreid::output::{write_atomic, Staging};
use spreid::pipeline::{self, EvalSet};
use spreid::retrieval::{self, Metric, RerankConfig};
use spreid::synth::{self, Split};
use spreid::trainer::{self, write_loss_csv};
use spreid::Error;

#[derive(Parser)]
#[command(name = "spreid", version, about = "Semantic-parsing-guided person re-identification on synthetic data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (`[section]` / `key = value`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set reid.variant=baseline`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration before running.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset into a directory.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the human parser on the training split's masks.
    TrainParser {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a re-id model (both phases, or phase 2 from a phase-1 checkpoint).
    TrainReid {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Parser checkpoint; required by the semantic variants.
        #[arg(long)]
        parser: Option<PathBuf>,
        /// Phase-1 checkpoint to continue with phase 2.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write descriptors of one split to a `.desc` file.
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        parser: Option<PathBuf>,
        #[arg(long, default_value = "query")]
        split: Split,
        /// Input height; defaults to the checkpoint's training phase.
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// mAP and CMC of query descriptors against a gallery.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        metric: Option<Metric>,
        /// Directory for `report.json` and `cmc.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluation after k-reciprocal re-ranking.
    Rerank {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer's backward pass.
    Gradcheck {
        /// Random configurations per layer.
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these layers (repeatable).
        #[arg(long)]
        layer: Vec<Layer>,
        /// Write per-configuration results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Error(Error),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Res<T = ()> = std::result::Result<T, Failure>;

fn load_config(a: &ConfigArgs) -> Res<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    c.apply_overrides(&a.set)?;
    c.validate()?;
    if a.print_config {
        print!("{}", c.echo());
    }
    Ok(c)
}

fn load_parser(path: Option<&Path>, needed: bool) -> Res<Option<ParserModel>> {
    match path {
        Some(p) if needed => Ok(Some(ModelCheckpoint::load(p)?.to_parser()?)),
        None if needed => Err(Error::Config("this variant needs --parser".into()).into()),
        _ => Ok(None),
    }
}

fn save_config(stage: &Staging, c: &RunConfig) -> Res {
    write_atomic(stage.join("config.txt"), c.echo().as_bytes())?;
    Ok(())
}

fn metric_or(m: Option<Metric>, c: &RunConfig) -> Metric {
    m.unwrap_or(c.retrieval.metric)
}

fn print_report(r: &retrieval::EvalReport) {
    println!(
        "mAP {:.4}  rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  ({} queries, {} skipped, {} gallery)",
        r.map,
        r.rank(1),
        r.rank(5),
        r.rank(10),
        r.num_queries,
        r.skipped,
        r.num_gallery
    );
}

fn write_report(out: Option<&Path>, r: &retrieval::EvalReport) -> Res {
    if let Some(dir) = out {
        let stage = Staging::new(dir)?;
        write_atomic(stage.join("report.json"), r.to_json()?.as_bytes())?;
        write_atomic(stage.join("cmc.csv"), r.cmc_csv().as_bytes())?;
        stage.commit()?;
    }
    Ok(())
}

fn run(cmd: Cmd) -> Res {
    match cmd {
        Cmd::Synth { cfg, out } => {
            let c = load_config(&cfg)?;
            let data = synth::generate(&c.synth)?;
            let stage = Staging::new(&out)?;
            let entries = data.write(stage.path())?;
            save_config(&stage, &c)?;
            stage.commit()?;
            let count = |s: Split| entries.iter().filter(|e| e.split == s).count();
            println!(
                "{} images: {} train, {} query, {} gallery",
                entries.len(),
                count(Split::Train),
                count(Split::Query),
                count(Split::Gallery)
            );
        }
        Cmd::TrainParser { cfg, data, out } => {
            let c = load_config(&cfg)?;
            let samples = synth::load_samples(&data)?;
            let train = pipeline::parse_set(samples.iter().filter(|s| s.split == Split::Train));
            let held = pipeline::parse_set(samples.iter().filter(|s| s.split != Split::Train));
            let pt = &c.parser_training;
            let model = ParserModel::new(&c.parser, c.grouping.clone(), pt.seed)?;
            let outcome = trainer::train_parser(
                model,
                &train,
                &c.parser_schedule(),
                &c.schedule.decay,
                pt.batch_size,
                &c.optimizer,
                pt.seed,
            )?;
            let metrics = pipeline::parser_metrics(&outcome.model, &held.images, &held.masks)?;
            let stage = Staging::new(&out)?;
            outcome.checkpoints.last().expect("one phase").save(stage.join("parser.ckpt"))?;
            write_loss_csv(stage.join("loss.csv"), &outcome.history)?;
            write_atomic(stage.join("parsing.json"), serde_json::to_string_pretty(&metrics).map_err(Error::from)?.as_bytes())?;
            save_config(&stage, &c)?;
            stage.commit()?;
            println!(
                "held-out pixel acc {:.4}  mean acc {:.4}  mIoU {:.4}",
                metrics.overall_acc, metrics.mean_acc, metrics.mean_iou
            );
        }
        Cmd::TrainReid {
            cfg,
            data,
            parser,
            resume,
            out,
        } => {
            let c = load_config(&cfg)?;
            let variant = c.reid.aggregation.variant;
            let parser = load_parser(parser.as_deref(), variant.uses_parsing())?;
            let samples = synth::load_samples(&data)?;
            let set = pipeline::reid_training_set(&samples, parser.as_ref())?;
            let classes = set.labels.iter().max().map_or(0, |m| m + 1);
            let seed = c.reid.seed;
            let (checkpoints, history) = match resume {
                Some(p) => {
                    let ck = ModelCheckpoint::load(&p)?;
                    if ck.provenance.phase != 1 {
                        return Err(Error::Config(format!("{} is not a phase-1 checkpoint", p.display())).into());
                    }
                    let model = ck.to_reid()?;
                    if model.variant() != variant {
                        return Err(Error::Config(format!(
                            "checkpoint holds {}, config asks for {variant}",
                            model.variant()
                        ))
                        .into());
                    }
                    let (_, ck2, h) = trainer::train_reid_phase(model, &set, 2, &c.schedule, &c.optimizer, seed)?;
                    (vec![ck2], h)
                }
                None => {
                    let model = ReidModel::new(&c.reid_config(classes), seed)?;
                    let o = trainer::train_reid(model, &set, &c.schedule, &c.optimizer, seed)?;
                    (o.checkpoints, o.history)
                }
            };
            let stage = Staging::new(&out)?;
            for ck in &checkpoints {
                ck.save(stage.join(format!("phase{}.ckpt", ck.provenance.phase)))?;
            }
            for phase in [1, 2] {
                let h: Vec<_> = history.iter().filter(|r| r.phase == phase).copied().collect();
                if !h.is_empty() {
                    write_loss_csv(stage.join(format!("loss_phase{phase}.csv")), &h)?;
                }
            }
            save_config(&stage, &c)?;
            stage.commit()?;
            if let Some(r) = history.last() {
                println!("{variant}: final loss {:.4} after phase {} iteration {}", r.loss, r.phase, r.iter);
            }
        }
        Cmd::Extract {
            cfg,
            data,
            model,
            parser,
            split,
            height,
            width,
            out,
        } => {
            let c = load_config(&cfg)?;
            let ck = ModelCheckpoint::load(&model)?;
            let reid = ck.to_reid()?;
            let parser = load_parser(parser.as_deref(), reid.variant().uses_parsing())?;
            let ps = if ck.provenance.phase == 2 { &c.schedule.phase2 } else { &c.schedule.phase1 };
            let (h, w) = (height.unwrap_or(ps.height), width.unwrap_or(ps.width));
            let samples = synth::load_samples(&data)?;
            let set = EvalSet::from_split(&samples, split, parser.as_ref())?;
            let m = pipeline::describe_set(&reid, &set, h, w)?;
            let descs = pipeline::to_descriptors(&reid, &m, &set);
            retrieval::save_descriptors(&out, &descs)?;
            println!("{} {} descriptors of dimension {} at {h}x{w}", descs.len(), split.as_str(), reid.descriptor_dim());
        }
        Cmd::Evaluate {
            cfg,
            queries,
            gallery,
            metric,
            out,
        } => {
            let c = load_config(&cfg)?;
            let metric = metric_or(metric, &c);
            let (q, qi, qc) = retrieval::stack_descriptors(&retrieval::load_descriptors(&queries)?)?;
            let (g, gi, gc) = retrieval::stack_descriptors(&retrieval::load_descriptors(&gallery)?)?;
            let d = retrieval::pairwise_distance(&q, &g, metric)?;
            let mut r = retrieval::evaluate(&d.matrix, &qi, &gi, &qc, &gc)?;
            r.settings.metric = Some(metric);
            write_report(out.as_deref(), &r)?;
            print_report(&r);
        }
        Cmd::Rerank {
            cfg,
            queries,
            gallery,
            metric,
            k1,
            k2,
            lambda,
            out,
        } => {
            let c = load_config(&cfg)?;
            let metric = metric_or(metric, &c);
            let d = c.retrieval.rerank;
            let rc = RerankConfig {
                k1: k1.unwrap_or(d.k1),
                k2: k2.unwrap_or(d.k2),
                lambda: lambda.unwrap_or(d.lambda),
            };
            rc.validate().map_err(|e| Error::Config(e.to_string()))?;
            let (q, qi, qc) = retrieval::stack_descriptors(&retrieval::load_descriptors(&queries)?)?;
            let (g, gi, gc) = retrieval::stack_descriptors(&retrieval::load_descriptors(&gallery)?)?;
            let revised = retrieval::k_reciprocal_rerank(&q, &g, metric, &rc)?;
            let mut r = retrieval::evaluate(&revised, &qi, &gi, &qc, &gc)?;
            r.settings.metric = Some(metric);
            r.settings.rerank = Some(rc);
            write_report(out.as_deref(), &r)?;
            print_report(&r);
        }
        Cmd::Gradcheck {
            configs,
            seed,
            layer,
            out,
        } => {
            let layers = if layer.is_empty() { Layer::ALL.to_vec() } else { layer };
            let report = gradcheck::run(&layers, configs, seed)?;
            print!("{}", report.table());
            println!("{:.1}s", report.elapsed.as_secs_f64());
            if let Some(p) = out {
                write_atomic(p, serde_json::to_string_pretty(&report).map_err(Error::from)?.as_bytes())?;
            }
            if !report.passed() {
                return Err(Failure::Acceptance(format!("relative error above {:e}", report.tolerance)));
            }
        }
    }
    Ok(())
}

fn set_threads() -> Res {
    let Ok(v) = std::env::var("SPREID_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SPREID_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match set_threads().and_then(|_| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Acceptance(msg)) => {
            eprintln!("spreid: check failed: {msg}");
            ExitCode::from(4)
        }
        Err(Failure::Error(e)) => {
            eprintln!("spreid: {e}");
            let code = match e {
                Error::Config(_) | Error::Parameter(_) | Error::Split(_) => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
