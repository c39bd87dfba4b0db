//! Command-line driver for the draft-and-refine translation pipeline.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use draftnmt::config::{RunConfig, KEYS};
use draftnmt::corpus::{generate, Split};
use draftnmt::pipeline::{self, TrainSummary};
use draftnmt::{Error, Result};

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value configuration file; flags below override it"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .overrides_with(*key)
                .help(*help),
        )
    })
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").required(true).help(help)
}

fn cli() -> Command {
    Command::new("draftnmt")
        .about("Two-stage draft-and-refine neural machine translation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("train-stage1")
                .about("Train the single-attention model on a corpus")
                .arg(path_arg("corpus", "training corpus (source TAB target)"))
                .arg(Arg::new("dev").long("dev").value_name("PATH").help("validation corpus"))
                .arg(path_arg("out", "checkpoint directory to write")),
        ))
        .subcommand(config_args(
            Command::new("make-drafts")
                .about("Decode a corpus with a stage-one checkpoint and append drafts")
                .arg(path_arg("checkpoint", "stage-one checkpoint directory"))
                .arg(path_arg("corpus", "corpus to decode"))
                .arg(path_arg("out", "triple corpus to write"))
                .arg(
                    Arg::new("gold-draft")
                        .long("gold-draft")
                        .action(ArgAction::SetTrue)
                        .help("use each reference as its own draft"),
                ),
        ))
        .subcommand(config_args(
            Command::new("train-stage2")
                .about("Train the double-attention model from a stage-one checkpoint")
                .arg(path_arg("stage1", "stage-one checkpoint directory"))
                .arg(path_arg("corpus", "triple corpus (source TAB target TAB draft)"))
                .arg(
                    Arg::new("dev")
                        .long("dev")
                        .value_name("PATH")
                        .help("validation triple corpus"),
                )
                .arg(path_arg("out", "checkpoint directory to write")),
        ))
        .subcommand(config_args(
            Command::new("translate")
                .about("Translate one sentence per line; two checkpoints print draft TAB refined")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("DIR")
                        .required(true)
                        .action(ArgAction::Append)
                        .help("stage-one checkpoint, then optionally a stage-two checkpoint"),
                )
                .arg(path_arg("input", "sentences to translate"))
                .arg(
                    Arg::new("output")
                        .long("output")
                        .value_name("PATH")
                        .help("write here instead of stdout"),
                ),
        ))
        .subcommand(
            Command::new("evaluate")
                .about("Corpus BLEU-4 of a hypothesis file against a reference file")
                .arg(path_arg("hyp", "hypotheses, one per line"))
                .arg(path_arg("ref", "references, one per line")),
        )
        .subcommand(config_args(
            Command::new("generate")
                .about("Write a synthetic corpus split using the configured task, sizes and seed")
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["train", "dev", "test"])
                        .default_value("train")
                        .help("which split (each has its own random stream)"),
                )
                .arg(path_arg("out", "corpus file to write")),
        ))
        .subcommand(config_args(
            Command::new("pipeline").about("Run every phase for each seed and write a report"),
        ))
}

fn load_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::from_file(Path::new(path))?,
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path(m: &ArgMatches, name: &str) -> PathBuf {
    PathBuf::from(m.get_one::<String>(name).expect("required argument"))
}

fn opt_path(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<String>(name).map(PathBuf::from)
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn print_summary(s: &TrainSummary) {
    let fmt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.6}"));
    println!(
        "checkpoint={} steps={} final_loss={} best_val_loss={}",
        s.checkpoint.display(),
        s.steps,
        fmt(s.final_loss),
        fmt(s.best_val_loss)
    );
}

fn write_output(out: Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })
        }
    }
}

fn run(matches: &ArgMatches) -> Result<()> {
    match matches.subcommand() {
        Some(("train-stage1", m)) => {
            let cfg = load_config(m)?;
            let dev = opt_path(m, "dev");
            let s =
                pipeline::cmd_train_stage1(&cfg, &path(m, "corpus"), dev.as_deref(), &path(m, "out"), &mut progress)?;
            print_summary(&s);
        }
        Some(("make-drafts", m)) => {
            let mut cfg = load_config(m)?;
            cfg.gold_draft |= m.get_flag("gold-draft");
            let n = pipeline::cmd_make_drafts(&cfg, &path(m, "checkpoint"), &path(m, "corpus"), &path(m, "out"))?;
            println!("lines={n}");
        }
        Some(("train-stage2", m)) => {
            let cfg = load_config(m)?;
            let dev = opt_path(m, "dev");
            let s = pipeline::cmd_train_stage2(
                &cfg,
                &path(m, "stage1"),
                &path(m, "corpus"),
                dev.as_deref(),
                &path(m, "out"),
                &mut progress,
            )?;
            print_summary(&s);
        }
        Some(("translate", m)) => {
            let cfg = load_config(m)?;
            let ckpts: Vec<PathBuf> = m
                .get_many::<String>("checkpoint")
                .into_iter()
                .flatten()
                .map(PathBuf::from)
                .collect();
            let lines = pipeline::cmd_translate(&cfg, &ckpts, &path(m, "input"), &mut progress)?;
            let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
            write_output(opt_path(m, "output"), &text)?;
        }
        Some(("evaluate", m)) => {
            let report = pipeline::cmd_evaluate(&path(m, "hyp"), &path(m, "ref"))?;
            println!("{}", report.to_line());
        }
        Some(("generate", m)) => {
            let cfg = load_config(m)?;
            let (split, count) = match m.get_one::<String>("split").map(String::as_str) {
                Some("dev") => (Split::Dev, cfg.dev_size),
                Some("test") => (Split::Test, cfg.test_size),
                _ => (Split::Train, cfg.train_size),
            };
            let corpus = generate(&cfg.corpus_spec(count), split)?;
            corpus.write(&path(m, "out"))?;
            println!("lines={}", corpus.len());
        }
        Some(("pipeline", m)) => {
            let cfg = load_config(m)?;
            let report = pipeline::cmd_pipeline(&cfg, &mut progress)?;
            print!("{}", report.to_text());
        }
        _ => unreachable!("subcommand_required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error {}: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
