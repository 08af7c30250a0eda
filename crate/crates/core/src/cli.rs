//! Command-line surface. Every subcommand reads one JSON run config
//! (optionally), applies `--set path=value` overrides, writes its outputs
//! under `--out`, and leaves a `run.json` manifest beside them.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::pipeline::{self, CompleteArgs, PipelineError, RunConfig};
use crate::sampler::Task;

#[derive(Debug, Parser)]
#[command(name = "markupdm", version, about = "Graphic design completion over SVG templates with interleaved image tokens")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run config with sections datagen, quantizer, lm, sampler, eval.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Directory-valued commands require it empty.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Override a config field by dotted path, e.g. `lm.model.lr=1e-3`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Record deterministic mode in the manifest. Every stage is
    /// single-threaded and seeded, so runs are reproducible either way.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Attr,
    Text,
    Image,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Attr => Task::Attribute,
            TaskArg::Text => Task::Text,
            TaskArg::Image => Task::Image,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: OUT/templates/*.svg, OUT/assets/*.png, OUT/manifest.json.
    Datagen,
    /// Train the image quantizer on the train split; writes OUT/quantizer.safetensors.
    TrainQuantizer {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Reconstruction report on the configured split; writes OUT/recon.{json,txt}.
    EvalQuantizer {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        quantizer: PathBuf,
    },
    /// Tokenize a split into OUT/corpus.mdm.
    BuildCorpus {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        quantizer: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train the language model on a corpus; writes OUT/lm.safetensors.
    TrainLm {
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, value_name = "FILE")]
        quantizer: PathBuf,
    },
    /// Complete one span of one template; writes OUT/{input,prediction,original}.png,
    /// OUT/completed.svg and OUT/transcript.json.
    Complete {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        template: String,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// `ELEM` for text and image, `ELEM:ATTRIBUTE` for attr (element index in document order).
        #[arg(long)]
        span: String,
        #[arg(long, value_name = "FILE")]
        quantizer: PathBuf,
        #[arg(long, value_name = "FILE")]
        lm: PathBuf,
    },
    /// Score completions on the configured split; writes OUT/report.{json,txt},
    /// OUT/suffix.csv and OUT/transcript.jsonl.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_name = "FILE")]
        quantizer: PathBuf,
        #[arg(long, value_name = "FILE")]
        lm: PathBuf,
    },
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig, PipelineError> {
    let base = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut c = base.with_overrides(&g.overrides)?;
    if let Some(s) = g.seed {
        c.seed = s;
    }
    c.deterministic |= g.deterministic;
    Ok(c)
}

fn file_out(dir: &Path, name: &str) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}

pub fn execute(cli: Cli) -> Result<(), PipelineError> {
    let g = &cli.global;
    let config = resolve_config(g)?;
    let mut log = |line: &str| eprintln!("{line}");
    match cli.command {
        Command::Datagen => {
            let ds = pipeline::run_datagen(&config, &g.out, g.force)?;
            println!("{} templates, {} assets -> {}", ds.templates.len(), ds.assets.len(), g.out.display());
        }
        Command::TrainQuantizer { data } => {
            let out = file_out(&g.out, "quantizer.safetensors")?;
            let (_, sha) = pipeline::run_train_quantizer(&config, &data, &out, g.force, &mut log)?;
            println!("{} sha256:{sha}", out.display());
        }
        Command::EvalQuantizer { data, quantizer } => {
            let report = pipeline::run_eval_quantizer(&config, &data, &quantizer, &g.out, g.force)?;
            print!("{}", report.table());
        }
        Command::BuildCorpus { data, quantizer, split } => {
            let out = file_out(&g.out, "corpus.mdm")?;
            let corpus = pipeline::run_build_corpus(&config, &data, &quantizer, &split, &out, g.force)?;
            let tokens: usize = corpus.docs.iter().map(|d| d.tokens.len()).sum();
            println!("{} documents, {tokens} tokens -> {}", corpus.docs.len(), out.display());
        }
        Command::TrainLm { corpus, quantizer } => {
            let out = file_out(&g.out, "lm.safetensors")?;
            let (_, sha) = pipeline::run_train_lm(&config, &corpus, &quantizer, &out, g.force, &mut log)?;
            println!("{} sha256:{sha}", out.display());
        }
        Command::Complete { data, template, task, span, quantizer, lm } => {
            let entry = pipeline::run_complete(
                &config,
                &CompleteArgs {
                    data: &data,
                    template_id: &template,
                    task: task.into(),
                    span: &span,
                    quantizer: &quantizer,
                    lm: &lm,
                    out: &g.out,
                    force: g.force,
                },
            )?;
            println!("{} ({:?})", entry.middle, entry.stop);
        }
        Command::Evaluate { data, task, quantizer, lm } => {
            let report = pipeline::run_evaluate(&config, &data, &quantizer, &lm, task.into(), &g.out, g.force)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_surface_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["markupdm", "no-such-command"]), 1);
        assert_eq!(run(["markupdm", "datagen", "--set", "nonsense"]), 1);
        assert_eq!(run(["markupdm", "--help"]), 0);
    }

    #[test]
    fn missing_input_exits_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("q");
        let code = run([
            "markupdm".as_ref(),
            "train-quantizer".as_ref(),
            "--data".as_ref(),
            dir.path().join("absent").as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(code, 2);
    }
}
