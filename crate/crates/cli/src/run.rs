use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use spatial_lab::LabError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SPATIAL_LAB_OUT";
pub const RUN_CONFIG: &str = "run_config.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lab(LabError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lab(e) => match e {
                LabError::NonFinite(_) => 3,
                LabError::Io(_) | LabError::Json(_) | LabError::Format(_) => 4,
                LabError::Config(_) => 2,
                _ => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lab(e) => write!(f, "{e}"),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Lab(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lab(LabError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lab(LabError::Json(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Lab(LabError::Format(format!("csv: {e}")))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// `explicit`, else `<root>/<default>`.
pub fn resolve(explicit: &Option<PathBuf>, default: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| output_root().join(default))
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found at {}", path.display())))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunConfig<T> {
    pub command: String,
    pub version: String,
    pub args: T,
}

/// Overlays values from a config file onto parsed flags; keys present in the
/// file win. Accepts either a saved `run_config.json` or a bare object of
/// argument names.
pub fn apply_config<T: Serialize + DeserializeOwned>(args: T, path: Option<&Path>, command: &str) -> CliResult<T> {
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let file: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    let Value::Object(mut file) = file else {
        return Err(CliError::Usage("config file must hold a JSON object".into()));
    };
    if let Some(c) = file.get("command") {
        if c.as_str() != Some(command) {
            return Err(CliError::Usage(format!("config was saved for `{c}`, not `{command}`")));
        }
    }
    let overrides = match file.remove("args") {
        Some(Value::Object(a)) => a,
        Some(_) => return Err(CliError::Usage("config `args` must be an object".into())),
        None => {
            file.remove("command");
            file.remove("version");
            file
        }
    };
    let Value::Object(mut merged) = serde_json::to_value(&args)? else {
        unreachable!("argument structs serialize to objects")
    };
    for (key, value) in overrides {
        let key = key.replace('-', "_");
        if !merged.contains_key(&key) {
            return Err(CliError::Usage(format!("unknown key `{key}` in config for `{command}`")));
        }
        merged.insert(key, value);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("bad config value: {e}")))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Creates `out` and records the exact arguments that produced it.
pub fn start_run<T: Serialize>(out: &Path, command: &str, args: &T) -> CliResult<()> {
    fs::create_dir_all(out)?;
    write_json(
        &out.join(RUN_CONFIG),
        &RunConfig {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args,
        },
    )
}

/// CSV log that can resume: rows kept by `keep` are rewritten before new
/// rows are appended.
pub struct MetricsLog {
    writer: csv::Writer<fs::File>,
}

impl MetricsLog {
    pub fn create<R: Serialize + DeserializeOwned>(path: &Path, keep: Option<&dyn Fn(&R) -> bool>) -> CliResult<Self> {
        let retained: Vec<R> = match keep {
            Some(keep) if path.is_file() => {
                let mut rdr = csv::Reader::from_path(path)?;
                let rows: Vec<R> = rdr.deserialize().collect::<Result<_, _>>()?;
                rows.into_iter().filter(|r| keep(r)).collect()
            }
            _ => Vec::new(),
        };
        let mut writer = csv::Writer::from_path(path)?;
        for r in &retained {
            writer.serialize(r)?;
        }
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn push<R: Serialize>(&mut self, row: &R) -> CliResult<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
