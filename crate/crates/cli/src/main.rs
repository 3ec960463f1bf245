use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use aqgt_core::pipeline::{run, Ablation, Command, RunConfig};
use aqgt_core::Error;
use clap::{Parser, Subcommand};
use serde_json::Value;

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Co-speech gesture synthesis: corpus generation, training, synthesis and evaluation.
#[derive(Parser, Debug)]
#[command(name = "aqgt", version)]
struct Cli {
    /// JSON run configuration; unspecified fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config field, e.g. `--set train.epochs=5` (value parsed as JSON, else taken as a string).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic corpus.
    GenData,
    /// Print corpus statistics and write stats.json.
    Stats,
    /// Pretrain the gesture and audio VQ autoencoders.
    PretrainVq,
    /// Train the generator against its critic.
    Train,
    /// Generate gestures for one clip and export them.
    Synthesize {
        #[arg(long)]
        clip: Option<String>,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Compute FGD, Diversity and MAJE on the evaluation split.
    Evaluate,
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Train and evaluate with one component removed.
    Ablate {
        #[arg(long, value_parser = ["gru", "transformer", "vq_g", "aligner"])]
        drop: String,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), Failure> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Failure::Config(format!(
                "empty segment in override key `{key}`"
            )));
        }
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => {
                return Err(Failure::Config(format!(
                    "`{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

fn parse_override(raw: &str) -> Result<(String, Value), Failure> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("override `{raw}` is not of the form key=value")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Overlays `patch` onto `base`, descending into objects present in both.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut root =
        serde_json::to_value(RunConfig::default()).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Failure::Config(format!(
                "{}: expected a JSON object",
                path.display()
            )));
        }
        merge(&mut root, file);
    }
    for raw in &cli.overrides {
        let (key, value) = parse_override(raw)?;
        set_path(&mut root, &key, value)?;
    }
    if let Some(seed) = cli.seed {
        set_path(&mut root, "seed", seed.into())?;
    }
    if let Some(dir) = &cli.run_dir {
        set_path(
            &mut root,
            "run_dir",
            Value::String(dir.display().to_string()),
        )?;
    }
    if let Cmd::Synthesize { clip, duration } = &cli.command {
        if let Some(c) = clip {
            set_path(&mut root, "synthesize.clip", Value::String(c.clone()))?;
        }
        if let Some(d) = duration {
            set_path(&mut root, "synthesize.duration_s", (*d).into())?;
        }
    }
    serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        Failure::Config(format!("invalid config at `{path}`: {}", e.into_inner()))
    })
}

fn command_of(cmd: &Cmd) -> Command {
    match cmd {
        Cmd::GenData => Command::GenData,
        Cmd::Stats => Command::Stats,
        Cmd::PretrainVq => Command::PretrainVq,
        Cmd::Train => Command::Train,
        Cmd::Synthesize { .. } => Command::Synthesize,
        Cmd::Evaluate => Command::Evaluate,
        Cmd::Gradcheck => Command::Gradcheck,
        Cmd::Ablate { drop } => {
            Command::Ablate(Ablation::parse(drop).expect("clap restricts the values"))
        }
    }
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    let cfg = load_config(cli)?;
    let outcome = run(command_of(&cli.command), &cfg).map_err(|e| match e {
        Error::Config { .. } => Failure::Config(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    println!("{}", outcome.summary.trim_end());
    Ok(outcome.success)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("check failed");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Config(msg)) => {
            log::error!("{msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            log::error!("{msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_creates_nested_objects() {
        let mut v = Value::Object(Default::default());
        set_path(&mut v, "train.epochs", 3.into()).ok().unwrap();
        set_path(&mut v, "model.seq.use_gru", false.into())
            .ok()
            .unwrap();
        assert_eq!(v["train"]["epochs"], 3);
        assert_eq!(v["model"]["seq"]["use_gru"], false);
    }

    #[test]
    fn override_values_fall_back_to_strings() {
        let (k, v) = parse_override("run_dir=/tmp/x").ok().unwrap();
        assert_eq!(k, "run_dir");
        assert_eq!(v, Value::String("/tmp/x".into()));
        let (_, v) = parse_override("seed=4").ok().unwrap();
        assert_eq!(v, 4);
        assert!(parse_override("seed").is_err());
    }

    #[test]
    fn partial_overrides_keep_sibling_defaults() {
        let defaults = RunConfig::default();
        let mut v = serde_json::to_value(&defaults).unwrap();
        merge(
            &mut v,
            serde_json::json!({"model": {"vq_audio": {"hidden": 8}}}),
        );
        set_path(&mut v, "model.vq_gesture.latent_dim", 4.into())
            .ok()
            .unwrap();
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.model.vq_audio.hidden, 8);
        assert_eq!(cfg.model.vq_audio.window, defaults.model.vq_audio.window);
        assert_eq!(cfg.model.vq_gesture.latent_dim, 4);
        assert_eq!(
            cfg.model.vq_gesture.hidden,
            defaults.model.vq_gesture.hidden
        );
    }
}
