mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use facever::decision::{verify, DecisionPolicy, FusionMode};
use facever::eval::{
    partition_requiring, run_comparison, synth_generate, DatasetManifest, Method, ProtocolConfig,
    Role, RoleCounts, SynthParams,
};
use facever::imaging::{align_and_crop, RawImage};
use facever::model::{calibrate, train, ModelFile, ThresholdMode};
use facever::subspace::Components;
use facever::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

const EXIT_CODES: &str = "\
Exit codes:
  0  success / claim accepted
  1  claim rejected
  2  usage, configuration or other error
  3  unknown client
  4  unreadable image
  5  bad manifest
  6  missing protocol role
  7  degenerate client
  8  singular scatter
  9  geometry mismatch
  10 malformed model file
  11 I/O error";

#[derive(Parser)]
#[command(name = "facever", version, about = "Client-specific 2D discriminant face verification", after_help = EXIT_CODES)]
struct Cli {
    /// Seed recorded in models and used by `synth` (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML run configuration.
    #[arg(long, global = true, env = "FACEVER_CONFIG")]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PPM images and manifest.csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        clients: usize,
        #[arg(long, default_value_t = 8)]
        train: usize,
        #[arg(long, default_value_t = 4)]
        eval: usize,
        #[arg(long, default_value_t = 4)]
        test: usize,
        #[arg(long, default_value_t = 10)]
        impostors: usize,
        #[arg(long, default_value_t = 4)]
        impostor_samples: usize,
        #[arg(long)]
        grey_separation: Option<f64>,
        #[arg(long)]
        chroma_separation: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Build every client template from the client_train rows.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Column components kept by the PCA stage.
        #[arg(long)]
        g: Option<usize>,
        /// Row components kept by the PCA stage.
        #[arg(long)]
        h: Option<usize>,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        ridge: Option<f64>,
        /// Record the creation time (makes the file differ between runs).
        #[arg(long)]
        timestamp: bool,
    },
    /// Set fusion weight and thresholds from the evaluation rows.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output model (default: overwrite --model).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        threshold_mode: Option<ThresholdArg>,
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        #[arg(long)]
        weight_step: Option<f64>,
    },
    /// Verify one identity claim. Exit 0 accepts, 1 rejects.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        claim: String,
        #[arg(long)]
        image: PathBuf,
        /// Left eye x (column) in image pixels.
        #[arg(long, allow_hyphen_values = true)]
        lx: f64,
        #[arg(long, allow_hyphen_values = true)]
        ly: f64,
        #[arg(long, allow_hyphen_values = true)]
        rx: f64,
        #[arg(long, allow_hyphen_values = true)]
        ry: f64,
        /// Override the calibrated threshold (accepts `inf`).
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
    },
    /// Train, calibrate and test the selected methods; write the report CSV.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated subset of CSF, 2D2G, 2D2GC.
        #[arg(long, value_delimiter = ',', default_value = "CSF,2D2G,2D2GC")]
        methods: Vec<String>,
        /// Protocol configuration label of the manifest (I or II).
        #[arg(long, default_value = "I")]
        protocol: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the text table here (it is always printed).
        #[arg(long)]
        text: Option<PathBuf>,
        /// Skip latency and training-time measurement (byte-stable reports).
        #[arg(long)]
        no_timing: bool,
    },
    /// Show model metadata and per-client diagnostics.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        /// Only this client.
        #[arg(long)]
        client: Option<String>,
        /// Print this client's colour reference histogram as CSV.
        #[arg(long)]
        histogram: Option<String>,
        #[arg(long, value_enum, default_value = "client")]
        reference: ReferenceArg,
        /// Write a model holding only this client to --out.
        #[arg(long, requires = "out")]
        export: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdArg {
    Global,
    PerClient,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Fused,
    GreyOnly,
    ColorOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    Client,
    Impostor,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UnknownClient(_) => 3,
        Error::Image { .. } | Error::EyeOutsideImage(_) | Error::DegenerateAlignment => 4,
        Error::Manifest(_) => 5,
        Error::MissingRole { .. } => 6,
        Error::DegenerateClient(_) => 7,
        Error::SingularScatter { .. } => 8,
        Error::GeometryMismatch { .. } => 9,
        Error::ModelFormat(_) => 10,
        Error::Io { .. } => 11,
        _ => 2,
    }
}

struct Context {
    config: RunConfig,
    config_given: bool,
}

fn load_context(cli: &Cli) -> Result<Context> {
    let (mut config, source) = match &cli.config {
        Some(path) => (RunConfig::load(path)?, path.display().to_string()),
        None => (RunConfig::default(), "built-in defaults".to_string()),
    };
    log::info!("configuration from {source}");
    if let Some(seed) = cli.seed {
        log::info!("seed {seed} from --seed (config had {})", config.seed);
        config.seed = seed;
    }
    log::debug!("effective configuration:\n{}", config.to_toml());
    Ok(Context {
        config,
        config_given: cli.config.is_some(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let ctx = load_context(cli)?;
    match &cli.command {
        Command::Synth {
            out,
            clients,
            train,
            eval,
            test,
            impostors,
            impostor_samples,
            grey_separation,
            chroma_separation,
            noise,
        } => {
            let defaults = SynthParams::default();
            let params = SynthParams {
                seed: ctx.config.seed,
                n_clients: *clients,
                samples_per_client: RoleCounts {
                    train: *train,
                    eval: *eval,
                    test: *test,
                },
                n_impostors: *impostors,
                samples_per_impostor: *impostor_samples,
                geometry: ctx.config.geometry,
                grey_separation: grey_separation.unwrap_or(defaults.grey_separation),
                chroma_separation: chroma_separation.unwrap_or(defaults.chroma_separation),
                noise: noise.unwrap_or(defaults.noise),
            };
            let manifest = synth_generate(&params)?.write(out)?;
            println!(
                "wrote {} images and {}",
                manifest.records.len(),
                out.join("manifest.csv").display()
            );
            Ok(0)
        }
        Command::Train {
            manifest,
            out,
            g,
            h,
            q,
            d,
            ridge,
            timestamp,
        } => {
            let mut cfg = ctx.config;
            if let Some(g) = g {
                cfg.model.g = Components::Fixed(*g);
            }
            if let Some(h) = h {
                cfg.model.h = Components::Fixed(*h);
            }
            if let Some(q) = q {
                cfg.model.template.q = *q;
            }
            if let Some(d) = d {
                cfg.model.template.d = *d;
            }
            if let Some(r) = ridge {
                cfg.model.template.ridge = *r;
            }
            cfg.validate()?;
            cmd_train(&cfg, manifest, out, *timestamp)
        }
        Command::Calibrate {
            model,
            manifest,
            out,
            threshold_mode,
            fusion,
            weight_step,
        } => {
            let mut opts = ctx.config.calibration;
            if let Some(t) = threshold_mode {
                opts.threshold_mode = match t {
                    ThresholdArg::Global => ThresholdMode::Global,
                    ThresholdArg::PerClient => ThresholdMode::PerClient,
                };
            }
            if let Some(f) = fusion {
                opts.mode = match f {
                    FusionArg::Fused => FusionMode::Fused,
                    FusionArg::GreyOnly => FusionMode::GreyOnly,
                    FusionArg::ColorOnly => FusionMode::ColorOnly,
                };
            }
            if let Some(w) = weight_step {
                opts.weight_step = *w;
            }
            let cfg = RunConfig {
                calibration: opts,
                ..ctx.config
            };
            cfg.validate()?;
            cmd_calibrate(
                &cfg,
                ctx.config_given,
                model,
                manifest,
                out.as_deref().unwrap_or(model),
            )
        }
        Command::Verify {
            model,
            claim,
            image,
            lx,
            ly,
            rx,
            ry,
            threshold,
        } => cmd_verify(model, claim, image, ((*ly, *lx), (*ry, *rx)), *threshold),
        Command::Evaluate {
            manifest,
            methods,
            protocol,
            out,
            text,
            no_timing,
        } => {
            let methods = methods
                .iter()
                .map(|m| m.parse())
                .collect::<Result<Vec<Method>>>()?;
            let protocol: ProtocolConfig = protocol.parse()?;
            let manifest = DatasetManifest::read(manifest)?;
            let report = run_comparison(
                &manifest,
                protocol,
                &methods,
                &ctx.config.comparison(!no_timing),
            )?;
            write_file(out, &report.to_csv())?;
            let table = report.to_text();
            if let Some(t) = text {
                write_file(t, &table)?;
            }
            emit(&table);
            Ok(0)
        }
        Command::Inspect {
            model,
            client,
            histogram,
            reference,
            export,
            out,
        } => cmd_inspect(
            model,
            client.as_deref(),
            histogram.as_deref(),
            *reference,
            export.as_deref(),
            out.as_deref(),
        ),
    }
}

/// Prints to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout
        .write_all(text.as_bytes())
        .and_then(|_| stdout.flush())
    {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: writing output: {e}");
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path, timestamp: bool) -> Result<u8> {
    let manifest = DatasetManifest::read(manifest)?;
    let part = partition_requiring(&manifest, ProtocolConfig::I, &[Role::ClientTrain]).map_err(
        |e| match e {
            Error::MissingRole { context, .. } => Error::Manifest(context),
            e => e,
        },
    )?;
    let samples = manifest.load_samples(&part.rows(Role::ClientTrain), &cfg.geometry)?;
    let mut model = train(&samples, &cfg.geometry, &cfg.model, cfg.seed)?;
    if timestamp {
        model.provenance.created =
            Some(humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string());
    }
    let weak: Vec<&str> = model
        .diagnostics
        .iter()
        .filter(|(_, d)| !(d.nonsingularity.col_condition && d.nonsingularity.row_condition))
        .map(|(id, _)| id.as_str())
        .collect();
    if !weak.is_empty() {
        log::warn!(
            "{} client(s) violate the sample-count condition; their scatters rely on the ridge",
            weak.len()
        );
    }
    model.save(out)?;
    println!(
        "trained {} clients from {} images (g={}, h={}); wrote {}",
        model.client_templates.len(),
        samples.len(),
        model.record.g,
        model.record.h,
        out.display()
    );
    Ok(0)
}

fn cmd_calibrate(
    cfg: &RunConfig,
    config_given: bool,
    model_path: &Path,
    manifest: &Path,
    out: &Path,
) -> Result<u8> {
    let mut model = ModelFile::load(model_path)?;
    if config_given && cfg.geometry.shape() != model.geometry.shape() {
        return Err(Error::GeometryMismatch {
            expected: model.geometry.shape(),
            found: cfg.geometry.shape(),
        });
    }
    let manifest = DatasetManifest::read(manifest)?;
    let part = partition_requiring(
        &manifest,
        ProtocolConfig::I,
        &[Role::ClientEval, Role::ImpostorEval],
    )?;
    let genuine = manifest.load_samples(&part.rows(Role::ClientEval), &model.geometry)?;
    let impostors = manifest.load_samples(&part.rows(Role::ImpostorEval), &model.geometry)?;
    let claims: Vec<(&str, &_)> = genuine.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    let summary = calibrate(
        &mut model,
        &claims,
        &impostors.iter().collect::<Vec<_>>(),
        &cfg.calibration,
    )?;
    model.save(out)?;
    println!(
        "evaluation set: FAR {:.2}% FRR {:.2}% at T={} (grey weight {}, {} genuine / {} impostor claims); wrote {}",
        100.0 * summary.global.far,
        100.0 * summary.global.frr,
        summary.global.threshold,
        summary.fusion_weight,
        summary.genuine_trials,
        summary.impostor_trials,
        out.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct VerdictRecord<'a> {
    claim: &'a str,
    probe: &'a Path,
    grey: f64,
    color: f64,
    fused: f64,
    threshold: f64,
    verdict: &'static str,
}

fn cmd_verify(
    model_path: &Path,
    claim: &str,
    image: &Path,
    eyes: ((f64, f64), (f64, f64)),
    threshold: Option<f64>,
) -> Result<u8> {
    let model = ModelFile::load(model_path)?;
    let mut policy: DecisionPolicy = *model.policy_for(claim)?;
    if let Some(t) = threshold {
        policy.threshold = t;
    }
    let img = match RawImage::load(image) {
        Ok(img) => img,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(4);
        }
    };
    let probe = align_and_crop(&img, eyes.0, eyes.1, &model.geometry)?.sample;
    let v = verify(claim, &probe, &model, Some(&policy))?;
    let record = VerdictRecord {
        claim,
        probe: image,
        grey: v.pair.grey,
        color: v.pair.color,
        fused: v.fused,
        threshold: v.threshold,
        verdict: if v.accept { "accept" } else { "reject" },
    };
    println!(
        "{}",
        serde_json::to_string(&record).expect("record serializes")
    );
    Ok(if v.accept { 0 } else { 1 })
}

fn cmd_inspect(
    model_path: &Path,
    client: Option<&str>,
    histogram: Option<&str>,
    reference: ReferenceArg,
    export: Option<&str>,
    out: Option<&Path>,
) -> Result<u8> {
    let model = ModelFile::load(model_path)?;
    if let Some(id) = export {
        let out = out.expect("clap enforces --out with --export");
        model.single_client(id)?.save(out)?;
        println!("wrote single-client model for {id} to {}", out.display());
        return Ok(0);
    }
    if let Some(id) = histogram {
        let refs = model
            .color_references
            .get(id)
            .ok_or_else(|| Error::UnknownClient(id.to_string()))?;
        let h = match reference {
            ReferenceArg::Client => &refs.client,
            ReferenceArg::Impostor => &refs.impostor,
        };
        emit(&h.to_csv());
        return Ok(0);
    }
    if let Some(id) = client {
        if !model.client_templates.contains_key(id) {
            return Err(Error::UnknownClient(id.to_string()));
        }
    }
    let mut out = String::new();
    let r = &model.record;
    writeln!(out, "format: {} v{}", model.format, model.format_version).unwrap();
    writeln!(
        out,
        "geometry: {}x{}",
        model.geometry.rows, model.geometry.cols
    )
    .unwrap();
    writeln!(
        out,
        "parameters: g={} h={} q={} d={} ridge={} bins={} fusion_weight={}",
        r.g, r.h, r.q, r.d, r.ridge, r.bins, r.fusion_weight
    )
    .unwrap();
    writeln!(
        out,
        "provenance: training_digest={} seed={}{}",
        model.provenance.training_digest,
        model.provenance.seed,
        model
            .provenance
            .created
            .as_deref()
            .map(|c| format!(" created={c}"))
            .unwrap_or_default()
    )
    .unwrap();
    writeln!(
        out,
        "calibrated: {} (threshold mode {:?}, global threshold {}, mode {:?})",
        model.calibrated,
        model.threshold_mode,
        model.global_policy.threshold,
        model.global_policy.mode
    )
    .unwrap();
    writeln!(out, "clients: {}", model.client_templates.len()).unwrap();
    writeln!(out,).unwrap();
    writeln!(out,"client,train,n_total,classes,col_condition,row_condition,rank_sc_w,rank_sr_w,rank_bound,two_class_rank_bound,color_fallbacks,threshold").unwrap();
    for (id, d) in &model.diagnostics {
        if client.is_some_and(|c| c != id) {
            continue;
        }
        let n = &d.nonsingularity;
        writeln!(
            out,
            "{id},{},{},{},{},{},{},{},{},{},{},{}",
            d.training_samples,
            n.n_total,
            n.n_classes,
            n.col_condition,
            n.row_condition,
            n.rank_sc_w,
            n.rank_sr_w,
            n.rank_bound,
            n.two_class_rank_bound,
            d.color_fallbacks,
            model.policies[id].threshold
        )
        .unwrap();
    }
    emit(&out);
    Ok(0)
}
