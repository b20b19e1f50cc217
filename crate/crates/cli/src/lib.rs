//! The `resmonet` command: argument parsing and one function per verb.

mod error;

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use resmonet_core::analyzer::{render_layers, render_table, write_csv, Convention, EfficiencyReport, Measured};
use resmonet_core::expert::{evaluate, read_responses};
use resmonet_core::graph::{assemble_resmonet, format_graph, load_weights_for, parse_graph, save_weights, ResMoNetConfig};
use resmonet_core::profiler::{profile, ProfileConfig};
use resmonet_core::synthetic::{desk_split, generate, DESK_PER_CLASS, DESK_SIDE};
use resmonet_core::trainer::{classify, evaluate as evaluate_model, train_with, Prepared, Progress, TrainConfig};
use resmonet_core::vision::{
    augment, augment_split, load_dataset, read_ppm, resize_bilinear, split_dataset, write_ppm, BoxesFile,
    FaceDetector, FullFrame, INPUT_SIDE,
};
use resmonet_core::{ModelGraph, EMOTIONS};
use resmonet_session::auth::credential_line;
use resmonet_session::{quantize_probs, EmotionFrame, ServerConfig};

pub use error::CliError;

/// File names of the twelve augmentation outputs, in generation order.
pub const AUGMENT_NAMES: [&str; 12] = [
    "00-original",
    "01-crop-top-left",
    "02-crop-top-right",
    "03-crop-bottom-left",
    "04-crop-bottom-right",
    "05-crop-center",
    "06-flip",
    "07-flip-crop-top-left",
    "08-flip-crop-top-right",
    "09-flip-crop-bottom-left",
    "10-flip-crop-bottom-right",
    "11-flip-crop-center",
];

#[derive(Debug, Parser)]
#[command(name = "resmonet", version, about = "ResMoNet facial emotion recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the efficiency table (NP, Mult-Adds) of one or more graph files.
    Analyze {
        #[arg(required = true)]
        graphs: Vec<PathBuf>,
        /// Mult-Add convention: per-weight or per-activation.
        #[arg(long, default_value = "per-weight")]
        convention: String,
        /// Also print the per-layer breakdown.
        #[arg(long)]
        layers: bool,
        /// Write the table as CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train on a class-per-directory dataset of PPM images, or on the
    /// bundled synthetic dataset at desk scale.
    Train {
        /// Dataset directory; omit with --synthetic.
        dataset: Option<PathBuf>,
        #[arg(long)]
        synthetic: bool,
        /// Originals per class for --synthetic.
        #[arg(long, default_value_t = DESK_PER_CLASS)]
        per_class: usize,
        /// Graph to train; defaults to the standard ResMoNet, or the desk
        /// profile with --synthetic.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Face boxes (`source x y w h` lines); missing entries use the full frame.
        #[arg(long)]
        boxes: Option<PathBuf>,
        /// Defaults: 150, or 50 with --synthetic.
        #[arg(long)]
        epochs: Option<usize>,
        /// Defaults: 128, or 32 with --synthetic.
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop once both train and test accuracy reach these values, e.g. `0.9,0.8`.
        #[arg(long, value_parser = parse_pair)]
        until: Option<(f64, f64)>,
        /// Output directory for model.graph, model.weights and history.csv.
        #[arg(long, default_value = "model")]
        out: PathBuf,
    },
    /// Print the seven class probabilities for one PPM image.
    Infer {
        weights: PathBuf,
        image: PathBuf,
        /// Graph file; defaults to the weights path with a `.graph` extension.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Print an EFS/1 frame line at this offset (ms) instead.
        #[arg(long)]
        frame: Option<u64>,
    },
    /// Measure runtime execution (RTE) and peak memory (MMU) of inference.
    Profile {
        weights: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Input image; defaults to a generated one.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Seconds per run.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
    },
    /// Run the session service.
    Serve {
        #[arg(long, default_value = "resmonet.conf")]
        config: PathBuf,
        /// Print a credentials line for this user, reading the secret from
        /// standard input, and exit.
        #[arg(long, value_name = "USER")]
        hash_secret: Option<String>,
    },
    /// Score expert questionnaires (SUS and utility) with experience weights.
    Score {
        responses: PathBuf,
        /// Also write the per-expert table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the twelve augmented variants of a 224x224 PPM image.
    Augment {
        image: PathBuf,
        outdir: PathBuf,
        /// Resize the input to 224x224 first instead of rejecting other sizes.
        #[arg(long)]
        resize: bool,
    },
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected TRAIN,TEST")?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 for usage errors and 2 for failures while working.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut out = io::stdout().lock();
    match execute(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {message}", e.kind());
            e.exit_code()
        }
    }
}

fn execute(command: Command, out: &mut impl Write) -> Result<(), CliError> {
    match command {
        Command::Analyze {
            graphs,
            convention,
            layers,
            csv,
        } => analyze(&graphs, &convention, layers, csv.as_deref(), out),
        Command::Train {
            dataset,
            synthetic,
            per_class,
            graph,
            boxes,
            epochs,
            batch,
            lr,
            momentum,
            seed,
            until,
            out: dir,
        } => {
            let source = match (dataset, synthetic) {
                (Some(_), true) => return Err(CliError::Usage("give a dataset or --synthetic, not both".into())),
                (None, false) => return Err(CliError::Usage("give a dataset directory or --synthetic".into())),
                (Some(d), false) => Source::Dir(d, boxes),
                (None, true) => Source::Synthetic(per_class),
            };
            let desk = matches!(source, Source::Synthetic(_));
            let cfg = TrainConfig {
                epochs: epochs.unwrap_or(if desk { 50 } else { 150 }),
                batch_size: batch.unwrap_or(if desk { 32 } else { 128 }),
                learning_rate: lr,
                momentum,
                seed,
                dropout_rate: None,
            };
            train(source, graph.as_deref(), &cfg, until, &dir, out)
        }
        Command::Infer {
            weights,
            image,
            graph,
            frame,
        } => infer(&weights, &image, graph.as_deref(), frame, out),
        Command::Profile {
            weights,
            graph,
            image,
            runs,
            duration,
        } => {
            if !(duration > 0.0 && duration.is_finite()) {
                return Err(CliError::Usage(format!("--duration must be positive, got {duration}")));
            }
            let cfg = ProfileConfig {
                runs,
                run_duration: Duration::from_secs_f64(duration),
                ..ProfileConfig::default()
            };
            profile_model(&weights, graph.as_deref(), image.as_deref(), &cfg, out)
        }
        Command::Serve { config, hash_secret } => match hash_secret {
            Some(user) => hash_secret_line(&user, out),
            None => serve(&config, out),
        },
        Command::Score { responses, csv } => score(&responses, csv.as_deref(), out),
        Command::Augment { image, outdir, resize } => augment_file(&image, &outdir, resize, out),
    }
}

fn write_out(out: &mut impl Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io("<stdout>", e))
}

pub fn read_graph(path: &Path) -> Result<ModelGraph, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_graph(&text).map_err(|source| CliError::Graph {
        path: path.to_path_buf(),
        source,
    })
}

fn analyze(
    graphs: &[PathBuf],
    convention: &str,
    layers: bool,
    csv: Option<&Path>,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let convention: Convention = convention.parse().map_err(|e: resmonet_core::analyzer::AnalyzerError| CliError::Usage(e.to_string()))?;
    let mut reports = Vec::new();
    for path in graphs {
        let graph = read_graph(path)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        reports.push(EfficiencyReport::new(name, &graph, Measured::default()));
    }
    let mut text = render_table(&reports, convention);
    if layers {
        for r in &reports {
            text.push('\n');
            text.push_str(&format!("{}\n", r.model));
            text.push_str(&render_layers(r));
        }
    }
    write_out(out, &text)?;
    if let Some(path) = csv {
        let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        write_csv(&reports, io::BufWriter::new(file))?;
    }
    Ok(())
}

enum Source {
    Dir(PathBuf, Option<PathBuf>),
    Synthetic(usize),
}

fn train(
    source: Source,
    graph_path: Option<&Path>,
    cfg: &TrainConfig,
    until: Option<(f64, f64)>,
    dir: &Path,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let (graph, classes, split) = match source {
        Source::Synthetic(per_class) => {
            let graph = match graph_path {
                Some(p) => read_graph(p)?,
                None => assemble_resmonet(&ResMoNetConfig::desk(DESK_SIDE)).map_err(|source| CliError::Graph {
                    path: PathBuf::from("<desk profile>"),
                    source,
                })?,
            };
            let classes = EMOTIONS.iter().map(|s| s.to_string()).collect::<Vec<_>>();
            (graph, classes, desk_split(per_class, cfg.seed)?)
        }
        Source::Dir(dataset, boxes) => {
            let graph = match graph_path {
                Some(p) => read_graph(p)?,
                None => assemble_resmonet(&ResMoNetConfig::default()).map_err(|source| CliError::Graph {
                    path: PathBuf::from("<default profile>"),
                    source,
                })?,
            };
            let detector: Box<dyn FaceDetector> = match boxes {
                Some(p) => Box::new(BoxesFile::load(&p)?),
                None => Box::new(FullFrame),
            };
            let (classes, examples) = load_dataset(&dataset, detector.as_ref())?;
            if classes.len() != graph.num_classes() {
                return Err(CliError::Usage(format!(
                    "dataset has {} classes but the graph outputs {}",
                    classes.len(),
                    graph.num_classes()
                )));
            }
            (graph, classes, augment_split(split_dataset(examples, cfg.seed, 0.8)?)?)
        }
    };
    let [side, _, _] = graph.input_shape();
    let train_set = Prepared::new(&split.train, side);
    let test_set = Prepared::new(&split.test, side);
    write_out(
        out,
        &format!(
            "training on {} examples, testing on {} (seed {}, {} epochs, batch {})\n",
            train_set.len(),
            test_set.len(),
            cfg.seed,
            cfg.epochs,
            cfg.batch_size
        ),
    )?;
    let mut log = Vec::new();
    let (weights, history) = train_with(&graph, &train_set, &test_set, cfg, |r| {
        log.push(format!(
            "epoch {:>3} train_loss {:.4} train_acc {:.4} test_loss {:.4} test_acc {:.4}\n",
            r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc
        ));
        let _ = out.write_all(log.last().expect("pushed").as_bytes());
        let _ = out.flush();
        match until {
            Some((a, b)) if r.train_acc >= a && r.test_acc >= b => Progress::Stop,
            _ => Progress::Continue,
        }
    })?;

    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let gpath = dir.join("model.graph");
    fs::write(&gpath, format_graph(&graph)).map_err(|e| CliError::io(&gpath, e))?;
    save_weights(&weights, &dir.join("model.weights"))?;
    history.export(&dir.join("history.csv"))?;

    let eval = evaluate_model(&graph, &weights, &test_set)?;
    let labels: Vec<&str> = classes.iter().map(String::as_str).collect();
    write_out(
        out,
        &format!(
            "test accuracy {:.4}, test loss {:.4}\n{}wrote {}\n",
            eval.accuracy,
            eval.loss,
            eval.confusion.render(&labels),
            dir.display()
        ),
    )
}

fn graph_for(weights: &Path, graph: Option<&Path>) -> Result<ModelGraph, CliError> {
    match graph {
        Some(p) => read_graph(p),
        None => read_graph(&weights.with_extension("graph")),
    }
}

fn infer(weights: &Path, image: &Path, graph: Option<&Path>, frame: Option<u64>, out: &mut impl Write) -> Result<(), CliError> {
    let graph = graph_for(weights, graph)?;
    let store = load_weights_for(weights, &graph)?;
    let img = read_ppm(image)?;
    let probs = classify(&graph, &store, &img)?;
    let p: Vec<f64> = probs.data().iter().map(|&v| v as f64).collect();
    let line = match frame {
        Some(dt) => {
            let p: [f64; 7] = p
                .as_slice()
                .try_into()
                .map_err(|_| CliError::Usage(format!("--frame needs a 7-class model, this one has {}", p.len())))?;
            let q = quantize_probs(&p).map_err(CliError::Usage)?;
            EmotionFrame { dt_ms: dt, probs: q }.to_line()
        }
        None => p
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let name = if p.len() == EMOTIONS.len() { EMOTIONS[i].to_string() } else { format!("class{i}") };
                format!("{name}={v:.9}")
            })
            .collect::<Vec<_>>()
            .join(" "),
    };
    write_out(out, &format!("{line}\n"))
}

fn profile_model(
    weights: &Path,
    graph: Option<&Path>,
    image: Option<&Path>,
    cfg: &ProfileConfig,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let graph = graph_for(weights, graph)?;
    let store = load_weights_for(weights, &graph)?;
    let img = match image {
        Some(p) => read_ppm(p)?,
        None => generate(1, 0).swap_remove(0).image,
    };
    let report = profile(cfg, || classify(&graph, &store, &img))?;
    write_out(out, &format!("{report}\n"))
}

fn hash_secret_line(user: &str, out: &mut impl Write) -> Result<(), CliError> {
    let mut secret = String::new();
    io::stdin().lock().read_line(&mut secret).map_err(|e| CliError::io("<stdin>", e))?;
    let secret = secret.trim_end_matches(['\n', '\r']);
    if secret.is_empty() {
        return Err(CliError::Usage("expected the secret on standard input".into()));
    }
    write_out(out, &format!("{}\n", credential_line(user, secret)?))
}

fn serve(config: &Path, out: &mut impl Write) -> Result<(), CliError> {
    let cfg = ServerConfig::load(config)?;
    let state = resmonet_session::server::state_from_config(&cfg)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io("<runtime>", e))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.listen)
            .await
            .map_err(|e| CliError::io(cfg.listen.to_string(), e))?;
        let addr = listener.local_addr().map_err(|e| CliError::io(cfg.listen.to_string(), e))?;
        write_out(out, &format!("listening on {addr}\n"))?;
        resmonet_session::serve_on(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

fn score(responses: &Path, csv: Option<&Path>, out: &mut impl Write) -> Result<(), CliError> {
    let report = evaluate(&read_responses(responses)?)?;
    write_out(out, &report.render())?;
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

fn augment_file(image: &Path, outdir: &Path, resize: bool, out: &mut impl Write) -> Result<(), CliError> {
    let mut img = read_ppm(image)?;
    if resize && (img.width() != INPUT_SIDE || img.height() != INPUT_SIDE) {
        img = resize_bilinear(&img, INPUT_SIDE);
    }
    let variants = augment(&img)?;
    fs::create_dir_all(outdir).map_err(|e| CliError::io(outdir, e))?;
    let mut listing = String::new();
    for (name, v) in AUGMENT_NAMES.iter().zip(&variants) {
        let path = outdir.join(format!("{name}.ppm"));
        write_ppm(v, &path)?;
        listing.push_str(&format!("{}\n", path.display()));
    }
    write_out(out, &listing)
}
