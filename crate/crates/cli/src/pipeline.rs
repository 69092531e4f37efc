//! Line-based pipeline configs.
//!
//! ```text
//! # comment
//! seed = 42
//! ingest counts=counts.tsv samples=samples.tsv
//! filter data=@ingest min-reads=800
//! clean: decontam data=@filter report=contam.csv
//! transform data=@clean method=anscombe
//! ordinate data=@clean table=@transform method=pcoa metric=bray
//! ```
//!
//! Each stage line is `[label:] subcommand key=value ... flag ...`. A stage
//! is referred to by its label, or by its subcommand when unlabeled; `@name`
//! expands to that stage's primary output. `--out` is assigned by the
//! runner (`<run-dir>/<NN>-<name>.<ext>`); other output files are placed in
//! the run directory. Relative input paths are resolved against the config
//! file's directory. `seed = N` supplies `--seed` to stages that take one.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Parser;

use crate::{execute, usage, Cli, PipelineArgs};

const INPUT_KEYS: &[&str] = &["counts", "samples", "taxonomy", "tree", "data", "table", "scenario", "fit"];
const OUTPUT_KEYS: &[&str] = &["report", "svg", "axes-out", "theta", "beta", "diagnostics"];
const SEEDED: &[&str] = &["gof", "decontam", "test", "power", "topics", "topics-ppc", "simulate"];

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub line: usize,
    pub name: String,
    pub command: String,
    pub args: Vec<(String, Option<String>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: Option<u64>,
    pub stages: Vec<Stage>,
}

fn config_error(line: usize, msg: impl std::fmt::Display) -> anyhow::Error {
    microstat::Error::Data(format!("config line {line}: {msg}")).into()
}

pub fn parse_config(text: &str) -> Result<Config> {
    let mut seed = None;
    let mut stages: Vec<Stage> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some((_, v)) = line.split_once('=').filter(|(k, _)| k.trim() == "seed") {
            let v = v.trim();
            seed = Some(v.parse().map_err(|_| config_error(line_no, format!("seed '{v}' is not an integer")))?);
            continue;
        }
        let mut words = line.split_whitespace();
        let first = words.next().unwrap_or_default();
        let (name, command) = match first.strip_suffix(':') {
            Some(label) => {
                let cmd = words.next().ok_or_else(|| config_error(line_no, "label without a subcommand"))?;
                (label.to_string(), cmd.to_string())
            }
            None => (first.to_string(), first.to_string()),
        };
        if command == "pipeline" {
            return Err(config_error(line_no, "pipelines cannot be nested"));
        }
        if stages.iter().any(|s| s.name == name) {
            return Err(config_error(line_no, format!("stage name '{name}' is used twice; add a label")));
        }
        let args = words
            .map(|w| match w.split_once('=') {
                Some((k, v)) => (k.to_string(), Some(v.to_string())),
                None => (w.to_string(), None),
            })
            .collect::<Vec<_>>();
        if args.iter().any(|(k, _)| k == "out") {
            return Err(config_error(line_no, "'out' is assigned by the runner"));
        }
        stages.push(Stage {
            line: line_no,
            name,
            command,
            args,
        });
    }
    if stages.is_empty() {
        return Err(config_error(0, "no stages"));
    }
    Ok(Config { seed, stages })
}

fn extension(command: &str) -> &'static str {
    match command {
        "ingest" | "filter" | "decontam" | "simulate" | "topics" => "json",
        _ => "csv",
    }
}

/// Command-line arguments for one stage.
fn stage_argv(stage: &Stage, index: usize, config: &Config, base: &Path, run_dir: &Path, outputs: &HashMap<String, PathBuf>) -> Result<(Vec<String>, PathBuf)> {
    let out = run_dir.join(format!("{:02}-{}.{}", index + 1, stage.name, extension(&stage.command)));
    let mut argv = vec!["microstat".to_string(), stage.command.clone()];
    for (key, value) in &stage.args {
        argv.push(format!("--{key}"));
        let Some(v) = value else { continue };
        let v = if let Some(r) = v.strip_prefix('@') {
            let p = outputs.get(r).ok_or_else(|| {
                config_error(stage.line, format!("stage '{}' references '@{r}', which is not an earlier stage", stage.name))
            })?;
            p.display().to_string()
        } else if INPUT_KEYS.contains(&key.as_str()) && Path::new(v).is_relative() {
            base.join(v).display().to_string()
        } else if OUTPUT_KEYS.contains(&key.as_str()) {
            run_dir.join(format!("{:02}-{v}", index + 1)).display().to_string()
        } else {
            v.clone()
        };
        argv.push(v);
    }
    if let Some(seed) = config.seed {
        if SEEDED.contains(&stage.command.as_str()) && !stage.args.iter().any(|(k, _)| k == "seed") {
            argv.push("--seed".into());
            argv.push(seed.to_string());
        }
    }
    argv.push("--out".into());
    argv.push(out.display().to_string());
    Ok((argv, out))
}

pub fn run_pipeline(args: &PipelineArgs, threads: Option<usize>) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("cannot read {}", args.config.display()))?;
    let config = parse_config(&text).with_context(|| format!("in {}", args.config.display()))?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let run_dir = match &args.run_dir {
        Some(d) => d.clone(),
        None => {
            let stem = args.config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            base.join(format!("{stem}.run"))
        }
    };
    fs::create_dir_all(&run_dir).with_context(|| format!("cannot create {}", run_dir.display()))?;

    let mut outputs: HashMap<String, PathBuf> = HashMap::new();
    let mut written = Vec::new();
    for (i, stage) in config.stages.iter().enumerate() {
        let (mut argv, out) = stage_argv(stage, i, &config, &base, &run_dir, &outputs)?;
        if let Some(n) = threads {
            argv.insert(1, n.to_string());
            argv.insert(1, "--threads".into());
        }
        let cli = Cli::try_parse_from(&argv)
            .map_err(|e| usage(format!("stage '{}' (line {}): {}", stage.name, stage.line, e.to_string().lines().next().unwrap_or_default())))?;
        eprintln!("[{}/{}] {}", i + 1, config.stages.len(), stage.name);
        let files = execute(cli, argv).with_context(|| format!("stage '{}' (line {}) failed", stage.name, stage.line))?;
        written.extend(files);
        outputs.insert(stage.name.clone(), out);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_labels_seed_and_flags() {
        let cfg = parse_config("# demo\nseed = 7\ningest counts=c.tsv samples=s.tsv csv\nclean: decontam data=@ingest\n").unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.stages.len(), 2);
        assert_eq!(cfg.stages[0].args[2], ("csv".to_string(), None));
        assert_eq!((cfg.stages[1].name.as_str(), cfg.stages[1].command.as_str()), ("clean", "decontam"));
    }

    #[test]
    fn rejects_duplicates_out_and_nesting() {
        assert!(parse_config("filter data=a\nfilter data=b\n").is_err());
        assert!(parse_config("filter data=a out=x.json\n").is_err());
        assert!(parse_config("pipeline config=x\n").is_err());
        assert!(parse_config("# nothing\n").is_err());
    }

    #[test]
    fn references_expand_to_earlier_outputs() {
        let cfg = parse_config("seed = 3\ningest counts=c.tsv samples=s.tsv\ngof data=@ingest\n").unwrap();
        let mut outputs = HashMap::new();
        let (_, out0) = stage_argv(&cfg.stages[0], 0, &cfg, Path::new("cfg"), Path::new("run"), &outputs).unwrap();
        assert_eq!(out0, PathBuf::from("run/01-ingest.json"));
        outputs.insert("ingest".to_string(), out0);
        let (argv, _) = stage_argv(&cfg.stages[1], 1, &cfg, Path::new("cfg"), Path::new("run"), &outputs).unwrap();
        assert_eq!(argv, ["microstat", "gof", "--data", "run/01-ingest.json", "--seed", "3", "--out", "run/02-gof.csv"]);
        let missing = stage_argv(&cfg.stages[1], 1, &cfg, Path::new("cfg"), Path::new("run"), &HashMap::new());
        assert!(missing.is_err());
    }
}
