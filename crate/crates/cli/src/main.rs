//! `mfwb`: batch entry points to the fusion-map engine.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfwb_core::alignment::{apply_adapter, build_triplets, rerank, train_adapter_with, verify_alignment};
use mfwb_core::axis::{axis_layout, DEFAULT_BINS};
use mfwb_core::binfmt::F32Matrix;
use mfwb_core::mfm::train_mfm;
use mfwb_core::projectors::project;
use mfwb_core::quality::{evaluate_protocol, format_table};
use mfwb_core::synth::{self, Gap3Params};
use mfwb_core::{
    build_merged_matrix, load_dataset, save_dataset, AdapterConfig, AdapterModel, AlignmentDirective, ConceptAxisSpec,
    EmbeddingDataset, MfmConfig, ProjectorKind, ProtocolOptions,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "mfwb", version, about = "Modal fusion map workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project a dataset to 2D.
    Project {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "mfm")]
        method: ProjectorKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Layout JSON destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// MFM hyperparameters as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Save the trained MFM network here.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Run the sampled trustworthiness/continuity protocol.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// One or more projectors, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "mfm,pca,mds,dcm,ndcm")]
        method: Vec<ProjectorKind>,
        #[arg(long, default_value_t = 20)]
        rounds: usize,
        #[arg(long, default_value_t = 300)]
        sample_size: usize,
        #[arg(long, default_value_t = 30)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        keep_rounds: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lay images out on concept axes.
    Axis {
        #[arg(long)]
        manifest: PathBuf,
        /// `a` for a one-end axis, `a,b` for a two-end axis; repeat for more axes.
        #[arg(long, required = true)]
        concepts: Vec<String>,
        #[arg(long, default_value_t = 100.0)]
        length: f64,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Image ids, one per line; every image when absent.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an adapter from an alignment directive and verify it.
    Align {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        directive: PathBuf,
        /// Adapter destination (header `.json` plus weights `.bin`).
        #[arg(long)]
        out: PathBuf,
        /// Adapter training options as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write the adapted dataset as a manifest.
        #[arg(long)]
        adapted_manifest: Option<PathBuf>,
        /// Report destination; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rank candidates by distance to a query, optionally through an adapter.
    Rerank {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        query: String,
        /// Candidate ids, one per line.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic fixture as a manifest.
    SynthBenchmark {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the HTTP/WebSocket service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value = ".")]
        data_dir: PathBuf,
    },
    /// Write the merged distance matrix as a binary float32 file plus a JSON header.
    ExportMatrix {
        #[arg(long)]
        manifest: PathBuf,
        /// Matrix destination; the header goes next to it with a `.json` extension.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Gap3,
    Entangle2,
    Planted,
    ZeroGap,
}

struct Failure {
    kind: String,
    message: String,
}

impl From<mfwb_core::Error> for Failure {
    fn from(e: mfwb_core::Error) -> Self {
        Failure {
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            kind: "Json".into(),
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        kind: "Io".into(),
        message: format!("{}: {e}", path.display()),
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

/// Non-empty lines that do not start with `#`.
fn read_ids(path: &Path) -> Outcome<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn emit_text(text: &str, out: Option<&Path>) -> Outcome {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| io_failure(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit(value: &Value, out: Option<&Path>) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit_text(&text, out)
}

fn mfm_config(config: Option<&Path>, epochs: Option<usize>) -> Outcome<MfmConfig> {
    let mut cfg: MfmConfig = match config {
        Some(p) => read_json(p)?,
        None => MfmConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Project {
            manifest,
            method,
            seed,
            out,
            config,
            epochs,
            model_out,
        } => {
            let ds = load_dataset(&manifest)?;
            let cfg = mfm_config(config.as_deref(), epochs)?;
            let value = if method == ProjectorKind::Mfm {
                let cfg = MfmConfig { seed, ..cfg };
                let outcome = train_mfm(&ds, &cfg)?;
                if let Some(path) = &model_out {
                    outcome.model.save(path)?;
                }
                json!({
                    "projector": method,
                    "seed": seed,
                    "config": cfg,
                    "layout": outcome.layout,
                    "finalLoss": outcome.final_parts,
                    "trace": outcome.trace,
                })
            } else {
                json!({ "projector": method, "seed": seed, "layout": project(&ds, method, &cfg, seed)? })
            };
            emit(&value, out.as_deref())
        }
        Command::Evaluate {
            manifest,
            method,
            rounds,
            sample_size,
            k,
            seed,
            format,
            keep_rounds,
            config,
            epochs,
            out,
        } => {
            let ds = load_dataset(&manifest)?;
            let opts = ProtocolOptions {
                rounds,
                sample_size,
                k,
                seed,
                keep_rounds,
                mfm: mfm_config(config.as_deref(), epochs)?,
            };
            let reports = method
                .iter()
                .map(|&m| evaluate_protocol(&ds, m, &opts))
                .collect::<mfwb_core::Result<Vec<_>>>()?;
            match format {
                Format::Json => emit(&serde_json::to_value(&reports)?, out.as_deref()),
                Format::Table => emit_text(&format_table(&reports), out.as_deref()),
            }
        }
        Command::Axis {
            manifest,
            concepts,
            length,
            bins,
            cohort,
            out,
        } => {
            let ds = load_dataset(&manifest)?;
            let specs = concepts
                .iter()
                .map(|c| {
                    let names: Vec<&str> = c.split(',').map(str::trim).collect();
                    match names.as_slice() {
                        [a] => Ok(ConceptAxisSpec::one_end(*a, length)),
                        [a, b] => Ok(ConceptAxisSpec::two_end(*a, *b, length)),
                        _ => Err(Failure {
                            kind: "InvalidArgument".into(),
                            message: format!("`{c}` must name one or two concepts"),
                        }),
                    }
                })
                .collect::<Outcome<Vec<_>>>()?;
            let cohort = cohort.as_deref().map(read_ids).transpose()?;
            let axes = axis_layout(&ds, cohort.as_deref(), &specs, bins)?;
            emit(&json!({ "axes": axes }), out.as_deref())
        }
        Command::Align {
            manifest,
            directive,
            out,
            config,
            seed,
            epochs,
            adapted_manifest,
            report,
        } => {
            let ds = load_dataset(&manifest)?;
            let directive: AlignmentDirective = read_json(&directive)?;
            let mut cfg: AdapterConfig = match &config {
                Some(p) => read_json(p)?,
                None => AdapterConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let value = align(&ds, &directive, &cfg, &out, adapted_manifest.as_deref())?;
            emit(&value, report.as_deref())
        }
        Command::Rerank {
            manifest,
            adapter,
            query,
            candidates,
            out,
        } => {
            let ds = load_dataset(&manifest)?;
            let adapter = adapter.as_deref().map(AdapterModel::load).transpose()?;
            let ids = read_ids(&candidates)?;
            let ranked = rerank(&query, &ids, &ds, adapter.as_ref())?;
            let ranked: Vec<Value> = ranked
                .iter()
                .map(|r| {
                    let label = ds.point(&r.id).ok().and_then(|p| p.label.clone());
                    json!({ "id": r.id, "distance": r.distance, "label": label })
                })
                .collect();
            emit(&json!({ "query": query, "adapted": adapter.is_some(), "ranked": ranked }), out.as_deref())
        }
        Command::SynthBenchmark { preset, seed, out } => synth_benchmark(preset, seed, &out),
        Command::Serve { port, host, data_dir } => {
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
                kind: "Io".into(),
                message: e.to_string(),
            })?;
            let config = mfwb_service::ServiceConfig { data_dir };
            runtime
                .block_on(mfwb_service::serve(SocketAddr::new(host, port), config))
                .map_err(|e| Failure {
                    kind: "Io".into(),
                    message: e.to_string(),
                })
        }
        Command::ExportMatrix { manifest, out } => export_matrix(&load_dataset(&manifest)?, &out),
    }
}

fn align(
    ds: &EmbeddingDataset,
    directive: &AlignmentDirective,
    cfg: &AdapterConfig,
    out: &Path,
    adapted_manifest: Option<&Path>,
) -> Outcome<Value> {
    let batch = build_triplets(directive, ds, cfg)?;
    let before = verify_alignment(directive, ds, None, cfg.neighborhood)?;
    let run = train_adapter_with(ds, &batch, cfg, Some(directive), |_| true)?;
    let after = verify_alignment(directive, ds, Some(&run.adapter), cfg.neighborhood)?;
    run.adapter.save(out)?;
    if let Some(path) = adapted_manifest {
        save_dataset(&apply_adapter(ds, &run.adapter)?, path)?;
    }
    tracing::info!(satisfied = after.satisfied, "alignment verified");
    Ok(json!({
        "directive": directive,
        "config": cfg,
        "triplets": batch.triplets.len(),
        "initialHinge": run.initial_hinge,
        "finalHinge": run.final_hinge,
        "before": before,
        "verification": after,
        "satisfied": after.satisfied,
        "log": run.log,
    }))
}

fn synth_benchmark(preset: Preset, seed: u64, out: &Path) -> Outcome {
    let (name, ds) = match preset {
        Preset::Gap3 => ("gap3", synth::gap3(&Gap3Params::default(), seed)),
        Preset::Entangle2 => ("entangle2", synth::entangle2(seed)),
        Preset::Planted => ("planted", synth::planted(seed)),
        Preset::ZeroGap => ("zero-gap", synth::zero_gap(&Gap3Params::default(), 5, seed)),
    };
    save_dataset(&ds, out)?;
    let mut summary = json!({ "preset": name, "seed": seed, "manifest": out, "points": ds.len() });
    if let Preset::Entangle2 = preset {
        let path = out.with_extension("candidates.txt");
        let mut text = synth::entangle2_candidates(&ds).join("\n");
        text.push('\n');
        fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
        summary["candidates"] = json!(path);
    }
    emit(&summary, None)
}

fn export_matrix(ds: &EmbeddingDataset, out: &Path) -> Outcome {
    let merged = build_merged_matrix(ds)?;
    let full = merged.full();
    let n = full.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|r| full.row(r).iter().copied().collect()).collect();
    F32Matrix::from_rows(rows.iter().map(Vec::as_slice), n).write(out)?;
    let (ni, nt) = (merged.n_image, merged.n_text);
    let block = |name: &str, r: (usize, usize), c: (usize, usize)| {
        json!({ "name": name, "rowStart": r.0, "rowEnd": r.1, "colStart": c.0, "colEnd": c.1 })
    };
    let header = json!({
        "format": "mfwb-merged-matrix",
        "file": out.file_name().and_then(|f| f.to_str()),
        "rows": n,
        "cols": n,
        "nImage": ni,
        "nText": nt,
        "order": merged.order,
        "blocks": [
            block("II", (0, ni), (0, ni)),
            block("IT", (0, ni), (ni, n)),
            block("TI", (ni, n), (0, ni)),
            block("TT", (ni, n), (ni, n)),
        ],
        "blockMeans": merged.means,
    });
    let header_path = out.with_extension("json");
    emit(&header, Some(&header_path))
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("MFWB_LOG").unwrap_or_else(|_| "warn".into());
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("Usage", e.to_string().trim_end(), 2),
    };
    init_logging();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f.kind, &f.message, 1),
    }
}
