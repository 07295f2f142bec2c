//! The `cflux` command line: config loading with dotted overrides, and the
//! train / generate / eval / compare / gradcheck subcommands.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::flux::FluxConfig;
use crate::metrics::{compare, evaluate, write_comparison, write_report, EvalConfig};
use crate::model::{generate, ModelConfig};
use crate::training::{load_checkpoint, log_csv, save_checkpoint, train, TrainConfig};
use crate::verify::{run_suite, SuiteOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_METRIC: i32 = 4;

/// Model shape without the flux settings, which get their own section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub flux: FluxConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            model: ModelSection {
                vocab_size: m.vocab_size,
                d_model: m.d_model,
                n_layers: m.n_layers,
                n_heads: m.n_heads,
                context_len: m.context_len,
                seed: m.seed,
            },
            flux: m.flux,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            context_len: m.context_len,
            flux: self.flux.clone(),
            seed: m.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_config();
        model.validate()?;
        self.train.validate(&model)?;
        self.eval.validate()
    }

    /// Defaults, overlaid with the optional JSON file, then with each
    /// `dotted.key=value` override. Unknown keys anywhere are config errors.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, file, "")?;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value, prefix: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

/// `a.b.c=value`; the value is parsed as JSON when possible, otherwise taken
/// as a string.
fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    if slot.is_object() {
        return Err(Error::Config(format!("`{key}` is a section, not a value")));
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Format { .. } | Error::Json(_) => EXIT_IO,
        Error::Divergence { .. } => EXIT_VERIFY,
        _ => EXIT_METRIC,
    }
}

#[derive(Parser, Debug)]
#[command(name = "cflux", version, about = "Contextual flux byte-level transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON run config; omitted sections keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set flux.alpha=0`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// File with one prompt per nonempty line.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Prompt text; repeatable, appended after `--prompts`.
    #[arg(long)]
    prompt: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Bytes generated per trial.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Generations per prompt.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch; writes model.cflx, train_log.csv and config.json.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Sets both the init and the batch-sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample from a checkpoint; prints the bytes and writes entropies.csv.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "generate_out")]
        out: PathBuf,
    },
    /// Run the metrics battery on one checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run the metrics battery on two checkpoints side by side.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        flux: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Check every gradient rule against finite differences.
    Gradcheck {
        /// Add a deliberately wrong gradient rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Diagnostics go to stderr, results to
/// `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn std::io::Write) -> Result<i32> {
    match cmd {
        Command::Train { config, out, seed } => {
            let mut overrides = config.set.clone();
            if let Some(s) = seed {
                overrides.extend([format!("model.seed={s}"), format!("train.seed={s}")]);
            }
            let cfg = RunConfig::load(config.config.as_deref(), &overrides)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
            let run = match train(&cfg.train, &cfg.model_config()) {
                Ok(run) => run,
                Err(Error::Divergence { step, detail, last_good }) => {
                    if let Some(ckpt) = &last_good {
                        save_checkpoint(ckpt, out.join("last_good.cflx"))?;
                    }
                    return Err(Error::Divergence { step, detail, last_good });
                }
                Err(e) => return Err(e),
            };
            save_checkpoint(&run.checkpoint, out.join("model.cflx"))?;
            fs::write(out.join("train_log.csv"), log_csv(&run.log))?;
            let final_loss = run.checkpoint.loss_history.last().copied().unwrap_or(f64::NAN);
            writeln!(
                stdout,
                "trained {} steps, final loss {final_loss:.4}, checkpoint sha256 {}",
                run.checkpoint.step,
                run.checkpoint.hash()?
            )?;
            Ok(EXIT_OK)
        }
        Command::Generate { checkpoint, prompt, n, temperature, seed, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let g = generate(&ckpt.params, &ckpt.model, prompt.as_bytes(), n, temperature, seed)?;
            fs::create_dir_all(&out)?;
            let mut csv = String::from("step,entropy\n");
            for (i, h) in g.entropies.iter().enumerate() {
                writeln!(csv, "{},{h}", i + 1).unwrap();
            }
            fs::write(out.join("entropies.csv"), csv)?;
            fs::write(out.join("generated.bin"), g.generated())?;
            writeln!(stdout, "{}", String::from_utf8_lossy(g.generated()))?;
            Ok(EXIT_OK)
        }
        Command::Eval { checkpoint, eval } => {
            let (cfg, prompts) = eval_inputs(&eval)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let report = evaluate(&ckpt, &prompts, &cfg)?;
            write_report(&report, &eval.out)?;
            writeln!(
                stdout,
                "coherence {:.4}, similarity {:.4}, entropy variance {:.4}; wrote {}",
                report.coherence,
                report.response_similarity,
                report.entropy_variance,
                eval.out.display()
            )?;
            Ok(EXIT_OK)
        }
        Command::Compare { baseline, flux, eval } => {
            let (cfg, prompts) = eval_inputs(&eval)?;
            let b = load_checkpoint(&baseline)?;
            let f = load_checkpoint(&flux)?;
            let cmp = compare(&b, &f, &prompts, &cfg)?;
            write_comparison(&cmp, &eval.out)?;
            for (name, d) in &cmp.deltas {
                writeln!(stdout, "{name:<22} delta {d:+.6}")?;
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck { inject_fault } => {
            let report = run_suite(SuiteOptions { inject_fault })?;
            write!(stdout, "{}", report.render())?;
            let failures = report.failures();
            if failures.is_empty() {
                writeln!(stdout, "all {} checks passed", report.checks.len())?;
                Ok(EXIT_OK)
            } else {
                for f in failures {
                    eprintln!("gradient check failed: {}", f.name);
                }
                Ok(EXIT_VERIFY)
            }
        }
    }
}

fn eval_inputs(args: &EvalArgs) -> Result<(EvalConfig, Vec<Vec<u8>>)> {
    let mut overrides = args.config.set.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("eval.seed={s}"));
    }
    if let Some(n) = args.n {
        overrides.push(format!("eval.n_new={n}"));
    }
    if let Some(t) = args.temperature {
        overrides.push(format!("eval.temperature={t}"));
    }
    if let Some(t) = args.trials {
        overrides.push(format!("eval.trials={t}"));
    }
    let cfg = RunConfig::load(args.config.config.as_deref(), &overrides)?;

    let mut prompts = Vec::new();
    if let Some(path) = &args.prompts {
        let text = fs::read(path)?;
        prompts.extend(text.split(|&b| b == b'\n').filter(|l| !l.is_empty()).map(<[u8]>::to_vec));
    }
    prompts.extend(args.prompt.iter().map(|p| p.as_bytes().to_vec()));
    if prompts.is_empty() {
        return Err(Error::Config("no prompts given (use --prompts FILE or --prompt TEXT)".into()));
    }
    Ok((cfg.eval, prompts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_or_string() {
        let cfg = RunConfig::load(
            None,
            &[
                "flux.alpha=0".into(),
                "flux.score_scale=none".into(),
                "train.corpus_path=/tmp/x.txt".into(),
                "eval.coherence_lengths=[64]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.flux.alpha, 0.0);
        assert_eq!(cfg.flux.score_scale, crate::flux::ScoreScale::None);
        assert_eq!(cfg.train.corpus_path, PathBuf::from("/tmp/x.txt"));
        assert_eq!(cfg.eval.coherence_lengths, vec![64]);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for bad in ["flux.gamma=1", "model=3", "nope.x=1", "flux.alpha"] {
            let err = RunConfig::load(None, &[bad.to_string()]).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_CONFIG, "{bad}: {err}");
        }
        let err = RunConfig::load(None, &["flux.gamma=1".into()]).unwrap_err();
        assert!(err.to_string().contains("flux.gamma"));
    }

    #[test]
    fn file_merge_rejects_unknown_and_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"batch_size": 4}, "model": {"d_model": 32}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!((cfg.train.batch_size, cfg.model.d_model), (4, 32));
        fs::write(&p, r#"{"train": {"batchsize": 4}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(Error::Config(_))));
        fs::write(&p, r#"{"model": {"n_heads": 5}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(Error::Config(_))));
    }
}
