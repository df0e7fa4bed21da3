//! `gpxva run <config.toml>`: runs one pipeline and writes CSV reports
//! plus a manifest with content hashes.
//!
//! Exit codes: 0 ok, 2 unreadable or unparsable config, 3 invalid
//! configuration, 4 numerical failure, 5 output could not be written.

mod config;
mod pipelines;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use config::Config;
use pipelines::{Ctx, Failure, Output};

#[derive(Parser)]
#[command(name = "gpxva", version, about = "GP surrogate pricing and CVA pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output.dir` (default `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; results do not depend on this.
        #[arg(long)]
        threads: Option<usize>,
        /// Also write simulated paths and exposure cubes.
        #[arg(long)]
        dump_paths: bool,
    },
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    pipeline: &'a str,
    seed: u64,
    config_sha256: String,
    outputs: BTreeMap<&'a str, String>,
}

fn sha256(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("gpxva: {msg}");
    ExitCode::from(code)
}

fn write_all(dir: &Path, out: &Output, manifest: &[u8]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in &out.files {
        std::fs::write(dir.join(name), bytes)?;
    }
    std::fs::write(dir.join("manifest.json"), manifest)
}

fn main() -> ExitCode {
    let Command::Run {
        config,
        out,
        threads,
        dump_paths,
    } = Cli::parse().command;

    let raw = match std::fs::read(&config) {
        Ok(b) => b,
        Err(e) => return fail(2, format_args!("cannot read {}: {e}", config.display())),
    };
    let text = match std::str::from_utf8(&raw) {
        Ok(t) => t,
        Err(e) => return fail(2, format_args!("{} is not UTF-8: {e}", config.display())),
    };
    let cfg: Config = match toml::from_str(text) {
        Ok(c) => c,
        Err(e) => return fail(2, format_args!("parse error in {}: {e}", config.display())),
    };
    let counts = match cfg.validate() {
        Ok(c) => c,
        Err(e) => return fail(3, format_args!("invalid config: {e}")),
    };
    if let Some(k) = threads {
        if k == 0 {
            return fail(3, "invalid config: threads: must be >= 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            return fail(4, format_args!("thread pool: {e}"));
        }
    }

    let ctx = Ctx {
        cfg: &cfg,
        counts,
        dump_paths: dump_paths || cfg.output.dump_paths,
    };
    let output = match pipelines::run(&ctx) {
        Ok(o) => o,
        Err(Failure::Invalid(e)) => return fail(3, format_args!("invalid config: {e}")),
        Err(Failure::Numeric(e)) => return fail(4, format_args!("numerical failure: {e}")),
    };

    let manifest = Manifest {
        tool: "gpxva",
        version: env!("CARGO_PKG_VERSION"),
        pipeline: cfg.pipeline.name(),
        seed: cfg.seed,
        config_sha256: sha256(&raw),
        outputs: output.files.iter().map(|(k, v)| (k.as_str(), sha256(v))).collect(),
    };
    let mut manifest = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    manifest.push(b'\n');
    let dir = out
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    if let Err(e) = write_all(&dir, &output, &manifest) {
        return fail(5, format_args!("cannot write {}: {e}", dir.display()));
    }
    println!(
        "{}: wrote {} files to {}",
        cfg.pipeline.name(),
        output.files.len() + 1,
        dir.display()
    );
    ExitCode::SUCCESS
}
