//! Run directories: `<runs>/<timestamp>-<command>-<config hash>`, holding the
//! resolved configuration, logs, checkpoints and the final model.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tinytune::Error;

use crate::config::RunConfig;
use crate::error::{usage, CliError, CliResult};

pub const RUN_CONFIG: &str = "run_config.json";
pub const RUN_INFO: &str = "run.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunInfo {
    command: String,
    created: String,
    config_hash: String,
}

pub fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Lib(Error::Io { path: path.to_path_buf(), source })
}

pub fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    String::from_utf8(bytes)
        .map_err(|e| CliError::Format { file: path.display().to_string(), msg: format!("invalid UTF-8: {e}") })
}

/// Creates a fresh run directory, records `paths.run_dir` in `cfg` and
/// writes the resolved configuration into it.
pub fn create(cfg: &mut RunConfig, command: &str) -> CliResult<PathBuf> {
    let hash = cfg.hash();
    let dir = match &cfg.paths.run_dir {
        Some(dir) => {
            if dir.read_dir().is_ok_and(|mut d| d.next().is_some()) {
                return Err(usage(format!(
                    "run directory {} is not empty; pass --resume to continue it",
                    dir.display()
                )));
            }
            dir.clone()
        }
        None => {
            let stem = format!("{}-{command}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S"), &hash[..8]);
            let mut dir = cfg.paths.runs.join(&stem);
            let mut n = 1;
            while dir.exists() {
                n += 1;
                dir = cfg.paths.runs.join(format!("{stem}-{n}"));
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    cfg.paths.run_dir = Some(dir.clone());
    let info = RunInfo { command: command.into(), created: chrono::Local::now().to_rfc3339(), config_hash: hash };
    write(&dir.join(RUN_INFO), &serde_json::to_string_pretty(&info).expect("run info serializes"))?;
    write(&dir.join(RUN_CONFIG), &cfg.to_json())?;
    Ok(dir)
}

/// Reads back the configuration of a run started by `command`.
pub fn open(dir: &Path, command: &str) -> CliResult<RunConfig> {
    let info_path = dir.join(RUN_INFO);
    let info: RunInfo = serde_json::from_str(&read(&info_path)?)
        .map_err(|e| CliError::Format { file: info_path.display().to_string(), msg: e.to_string() })?;
    if info.command != command {
        return Err(usage(format!("{} is a `{}` run, not `{command}`", dir.display(), info.command)));
    }
    let cfg_path = dir.join(RUN_CONFIG);
    RunConfig::parse(&cfg_path.display().to_string(), &read(&cfg_path)?)
}

/// The most advanced `checkpoints/step-N` directory, if any.
pub fn latest_checkpoint(run: &Path) -> CliResult<Option<PathBuf>> {
    let dir = run.join("checkpoints");
    let Ok(entries) = fs::read_dir(&dir) else {
        return Ok(None);
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(&dir, e))?;
        let name = entry.file_name();
        let Some(step) = name.to_str().and_then(|n| n.strip_prefix("step-")).and_then(|n| n.parse::<u64>().ok()) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Drops log lines recorded after the point a run resumes from, so the log
/// reads as if the run had never been interrupted.
pub fn truncate_log(path: &Path, keep: impl Fn(&serde_json::Value) -> bool) -> CliResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = read(path)?;
    let mut out = String::new();
    for line in text.lines() {
        let complete = serde_json::from_str::<serde_json::Value>(line).ok();
        if complete.as_ref().is_some_and(&keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    write(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_are_named_by_command_and_hash() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.runs = tmp.path().to_path_buf();
        let hash = cfg.hash();
        let a = create(&mut cfg.clone(), "pretrain").unwrap();
        let b = create(&mut cfg.clone(), "pretrain").unwrap();
        assert_ne!(a, b);
        let name = a.file_name().unwrap().to_str().unwrap();
        assert!(name.contains(&format!("-pretrain-{}", &hash[..8])), "{name}");
        let back = open(&a, "pretrain").unwrap();
        assert_eq!(back.paths.run_dir.as_deref(), Some(a.as_path()));
        assert!(matches!(open(&a, "finetune"), Err(CliError::Usage(_))));
        cfg.paths.run_dir = Some(a);
        assert!(matches!(create(&mut cfg, "pretrain"), Err(CliError::Usage(_))));
    }

    #[test]
    fn latest_checkpoint_compares_steps_numerically() {
        let tmp = tempfile::tempdir().unwrap();
        assert_eq!(latest_checkpoint(tmp.path()).unwrap(), None);
        for s in ["step-000002", "step-000010", "step-000009", "notes"] {
            fs::create_dir_all(tmp.path().join("checkpoints").join(s)).unwrap();
        }
        assert_eq!(latest_checkpoint(tmp.path()).unwrap(), Some(tmp.path().join("checkpoints/step-000010")));
    }

    #[test]
    fn truncation_keeps_complete_early_lines() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("m.jsonl");
        fs::write(&p, "{\"step\":1}\n{\"step\":2}\n{\"step\":3}\n{\"st").unwrap();
        truncate_log(&p, |v| v["step"].as_u64().is_some_and(|s| s <= 2)).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "{\"step\":1}\n{\"step\":2}\n");
    }
}
