//! Run directories (`<root>/<timestamp>-<name>/`) with hashed inputs, the
//! echoed config and a log file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Inputs hashed before the run directory exists, so a missing input fails
/// without leaving an empty run behind.
#[derive(Debug, Default)]
pub struct Inputs(BTreeMap<String, InputRecord>);

impl Inputs {
    pub fn add(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let sha256 = sha256_file(path)?;
        self.0.insert(role.to_string(), InputRecord { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    /// A checkpoint manifest and its parameter blob.
    pub fn add_checkpoint(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.add(role, path)?;
        self.add(&format!("{role}.bin"), &path.with_extension("bin"))
    }
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<root>/<UTC timestamp>-<name>`, suffixed when taken, and
    /// writes the config echo and input hashes into it.
    pub fn create(root: &Path, name: &str, cfg: &RunConfig, inputs: &Inputs) -> CliResult<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{stamp}-{name}");
        fs::create_dir_all(root).map_err(|e| CliError::Data(format!("{}: {e}", root.display())))?;
        let mut path = root.join(&base);
        let mut k = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = root.join(format!("{base}-{k}"));
                    k += 1;
                }
                Err(e) => return Err(CliError::Data(format!("{}: {e}", path.display()))),
            }
        }
        let dir = Self { path };
        dir.write_text("config.json", &cfg.to_json())?;
        dir.write_json("inputs.json", &inputs.0)?;
        attach_log(&dir.file("log.txt"));
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn subdir(&self, name: &str) -> CliResult<PathBuf> {
        let p = self.path.join(name);
        fs::create_dir_all(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        let p = self.file(name);
        fs::write(&p, text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> CliResult<()> {
        write_json(&self.file(name), value)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

// ---- logging ----

struct RunLogger {
    level: log::LevelFilter,
    file: Mutex<Option<fs::File>>,
}

static LOGGER: RunLogger = RunLogger {
    level: log::LevelFilter::Info,
    file: Mutex::new(None),
};

impl log::Log for RunLogger {
    fn enabled(&self, meta: &log::Metadata) -> bool {
        meta.level() <= self.level
    }

    fn log(&self, record: &log::Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = format!("[{}] {}: {}\n", record.level(), record.target(), record.args());
        eprint!("{line}");
        if let Some(f) = self.file.lock().unwrap_or_else(|p| p.into_inner()).as_mut() {
            let _ = f.write_all(line.as_bytes());
        }
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().unwrap_or_else(|p| p.into_inner()).as_mut() {
            let _ = f.flush();
        }
    }
}

/// Installs the process logger (stderr plus the current run's log file).
/// Later calls are no-ops.
pub fn init_logging(quiet: bool) {
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(if quiet { log::LevelFilter::Warn } else { LOGGER.level });
    }
}

fn attach_log(path: &Path) {
    let file = fs::File::create(path).ok();
    *LOGGER.file.lock().unwrap_or_else(|p| p.into_inner()) = file;
}

pub fn detach_log() {
    log::logger().flush();
    *LOGGER.file.lock().unwrap_or_else(|p| p.into_inner()) = None;
}
