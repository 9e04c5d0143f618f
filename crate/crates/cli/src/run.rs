//! Per-invocation bookkeeping: output directory, exit codes and the run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use roadseg::Error;
use serde::Serialize;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Generation(_) | Error::Augmentation(_) => EXIT_USAGE,
            Error::Divergence { .. } => EXIT_DIVERGED,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Record of one invocation, written as `run_manifest.json` (or
/// `<name>.run.json` for single-file outputs).
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub status: String,
    pub error: Option<String>,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub struct Run {
    manifest: RunManifest,
    manifest_path: PathBuf,
}

impl Run {
    /// Starts a run writing into `out`, or a fresh `<root>/<command>-<time>` directory.
    pub fn start(command: &str, root: &Path, out: Option<PathBuf>) -> CmdResult<Run> {
        let started = now();
        let dir = out.unwrap_or_else(|| root.join(format!("{command}-{}", started as u64)));
        Run::in_dir(command, dir.clone(), dir.join("run_manifest.json"), started)
    }

    pub fn with_manifest_path(
        command: &str,
        dir: PathBuf,
        manifest_path: PathBuf,
    ) -> CmdResult<Run> {
        Run::in_dir(command, dir, manifest_path, now())
    }

    fn in_dir(command: &str, dir: PathBuf, manifest_path: PathBuf, started: f64) -> CmdResult<Run> {
        std::fs::create_dir_all(&dir).map_err(|e| {
            Failure::usage(format!(
                "cannot create output directory {}: {e}",
                dir.display()
            ))
        })?;
        let dir = std::path::absolute(&dir).unwrap_or(dir);
        Ok(Run {
            manifest: RunManifest {
                command: command.into(),
                arguments: std::env::args().skip(1).collect(),
                config_path: None,
                seed: None,
                output_dir: dir,
                started_unix: started,
                finished_unix: started,
                status: "running".into(),
                error: None,
                artifacts: Vec::new(),
            },
            manifest_path,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.manifest.output_dir
    }

    pub fn set_config(&mut self, path: Option<PathBuf>, seed: Option<u64>) {
        self.manifest.config_path = path;
        self.manifest.seed = seed;
    }

    pub fn artifact(&mut self, path: PathBuf) {
        self.manifest
            .artifacts
            .push(std::path::absolute(&path).unwrap_or(path));
    }

    /// Writes the manifest with the outcome of `result` and passes it through.
    pub fn finish(mut self, result: CmdResult) -> CmdResult {
        self.manifest.finished_unix = now();
        match &result {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(f) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(f.message.clone());
            }
        }
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        if let Err(e) = std::fs::write(&self.manifest_path, text) {
            return Err(Failure::usage(format!(
                "cannot write {}: {e}",
                self.manifest_path.display()
            )));
        }
        result
    }
}

pub fn write_text(run: &mut Run, name: &str, text: &str) -> CmdResult {
    let path = run.dir().join(name);
    std::fs::write(&path, text)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
    run.artifact(path);
    Ok(())
}
