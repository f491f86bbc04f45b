use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msd::data::{parse_conll, render_conll, synth_cipher_corpora, Sentence, Split, SynthSizes};
use msd::diagnostics::export_embeddings;
use msd::evaluation::{entity_f1, read_predictions};
use msd::experiment::{
    diagnose, load_corpora, run_ablation_seed, run_language_mmd_teacher, run_student, run_teacher, sign_test_p,
    summarize, summary_table, write_corpora, RunConfig, Workspace,
};
use msd::losses::Preset;
use msd::model::checkpoint;
use msd::training::{predict_corpus, History, HistoryRecord};
use msd::util::write_atomic;
use msd::{Error, Result};

const OUTPUT_ROOT_VAR: &str = "MSD_OUTPUT_ROOT";

/// Cross-lingual NER by multi-channel distillation with MMD alignment.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration; unspecified keys take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `preset`.
    #[arg(long)]
    preset: Option<Preset>,
    /// Output directory (default: under the output root).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = OUTPUT_ROOT_VAR, default_value = "runs")]
    output_root: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target corpus pair as CoNLL files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SynthSizes::default().n_train)]
        n_train: usize,
        #[arg(long, default_value_t = SynthSizes::default().n_dev)]
        n_dev: usize,
        #[arg(long, default_value_t = SynthSizes::default().n_test)]
        n_test: usize,
    },
    /// Train a teacher on the labeled source corpus.
    TrainTeacher {
        #[command(flatten)]
        run: RunArgs,
        /// Add a source/target [CLS] MMD term with this weight to the
        /// teacher objective.
        #[arg(long)]
        language_mmd: Option<f64>,
    },
    /// Distill a student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Score a checkpoint, or a two-column prediction file, against a
    /// labeled CoNLL corpus.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Entity types of the corpus when scoring a prediction file.
        #[arg(long, value_delimiter = ',', default_value = "LOC,ORG,PER")]
        entity_types: Vec<String>,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the model's predictions here as two-column CoNLL.
        #[arg(long, requires = "checkpoint")]
        write_predictions: Option<PathBuf>,
    },
    /// Domain-discrepancy report and [CLS] embedding dump for a
    /// teacher/student pair.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Overrides `diagnostics.n_samples`.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run every ablation preset over several seeds and tabulate target F1.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Use seeds 1..=N instead of `ablation.seeds`.
        #[arg(long)]
        seeds: Option<u64>,
    },
}

fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.train.seed = seed;
    }
    if let Some(preset) = run.preset {
        cfg = cfg.with_preset(preset);
    }
    cfg.resolved()
}

fn out_dir(run: &RunArgs, command: &str, cfg: &RunConfig) -> PathBuf {
    run.out.clone().unwrap_or_else(|| {
        run.output_root
            .join(command)
            .join(format!("{}-seed{}", cfg.preset, cfg.train.seed))
    })
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn last_best_epoch(history: &History) -> Option<&HistoryRecord> {
    history
        .epochs()
        .filter(|r| matches!(r, HistoryRecord::Epoch { best_so_far: true, .. }))
        .last()
}

fn channel_table(history: &History) -> String {
    let mut out = String::from("channel  dev_f1  mixture\n");
    if let Some(HistoryRecord::Epoch { dev_f1, mixture, .. }) = last_best_epoch(history) {
        for (m, f1) in dev_f1 {
            let lambda = mixture.get(m).map_or("main".to_string(), |l| format!("{l:.4}"));
            out.push_str(&format!("{m:>7}  {f1:.4}  {lambda}\n"));
        }
    }
    out
}

fn load_checkpoint_workspace(cfg: &RunConfig, dir: &Path) -> Result<(msd::model::LayeredModel, Workspace)> {
    let (model, vocab) = checkpoint::load(dir)?;
    let (scheme, source, target) = load_corpora(cfg)?;
    if scheme != model.scheme {
        return Err(Error::Config(format!(
            "{} was trained with a different label scheme",
            dir.display()
        )));
    }
    let ws = Workspace::with_vocab(cfg, scheme, source, target, vocab)?;
    let base_frozen: Vec<_> = ws.base.params.iter().filter(|(n, _)| model.is_frozen(n)).collect();
    let model_frozen = model.frozen_params();
    if base_frozen.len() != model_frozen.len() || base_frozen.iter().any(|(n, v)| model_frozen.get(*n) != Some(v)) {
        return Err(Error::Config(format!(
            "{} was not trained from the base encoder this configuration describes",
            dir.display()
        )));
    }
    Ok((model, ws))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            n_train,
            n_dev,
            n_test,
        } => {
            let cfg = RunConfig::default();
            let sizes = SynthSizes { n_train, n_dev, n_test };
            let (src, tgt) = synth_cipher_corpora(seed, sizes, &cfg.scheme()?)?;
            for p in write_corpora(&out, &[&src, &tgt])? {
                println!("{}", p.display());
            }
        }
        Command::TrainTeacher { run, language_mmd } => {
            let cfg = resolve(&run)?;
            let dir = out_dir(&run, "teacher", &cfg);
            echo_config(&dir, &cfg)?;
            let ws = Workspace::prepare(&cfg)?;
            progress(&format!("training teacher ({}, seed {})", cfg.preset, cfg.train.seed));
            let (teacher, history) = match language_mmd {
                Some(w) => run_language_mmd_teacher(&ws, &cfg, w)?,
                None => run_teacher(&ws, &cfg)?,
            };
            checkpoint::save(&teacher, &ws.vocab, &dir.join("checkpoint"))?;
            history.write_jsonl(&dir.join("history.jsonl"))?;
            let table = channel_table(&history);
            write_atomic(&dir.join("channels.txt"), table.as_bytes())?;
            print!("{table}");
            println!("{}", dir.display());
        }
        Command::Distill { run, teacher } => {
            let cfg = resolve(&run)?;
            let dir = out_dir(&run, "student", &cfg);
            echo_config(&dir, &cfg)?;
            let (teacher, ws) = load_checkpoint_workspace(&cfg, &teacher)?;
            progress(&format!("distilling student ({}, seed {})", cfg.preset, cfg.train.seed));
            let (student, history) = run_student(&ws, &cfg, &teacher)?;
            checkpoint::save(&student, &ws.vocab, &dir.join("checkpoint"))?;
            history.write_jsonl(&dir.join("history.jsonl"))?;
            let metrics = ws.evaluate(&student, &ws.target.test, &cfg)?;
            write_atomic(
                &dir.join("target_test.json"),
                serde_json::to_string_pretty(&metrics)?.as_bytes(),
            )?;
            print!("{}", metrics.report());
            println!("{}", dir.display());
        }
        Command::Evaluate {
            corpus,
            checkpoint: ckpt,
            predictions,
            entity_types,
            out,
            write_predictions,
        } => {
            let metrics = match (ckpt, predictions) {
                (Some(dir), _) => {
                    let (model, vocab) = checkpoint::load(&dir)?;
                    let gold = parse_conll(&corpus, &model.scheme, "eval", Split::Test)?;
                    let cfg = RunConfig::default();
                    let pred = predict_corpus(&model, &vocab, &gold, cfg.train.max_len, cfg.train.eval_batch_size)?;
                    if let Some(path) = write_predictions {
                        let sentences: Vec<Sentence> = gold
                            .sentences()
                            .iter()
                            .zip(&pred)
                            .map(|(s, p)| Sentence::labeled(s.tokens.clone(), p.clone()))
                            .collect();
                        let mut buf = Vec::new();
                        render_conll(&sentences, &mut buf).map_err(|e| Error::io(&path, e))?;
                        write_atomic(&path, &buf)?;
                    }
                    let gold_tags = gold
                        .gold()
                        .ok_or_else(|| Error::Data("evaluation corpus is unlabeled".into()))?;
                    entity_f1(&pred, &gold_tags)?
                }
                (None, Some(pred_path)) => {
                    let scheme = msd::data::LabelScheme::new(entity_types)?;
                    let gold = parse_conll(&corpus, &scheme, "eval", Split::Test)?;
                    let pred = read_predictions(&pred_path, &gold, &scheme)?;
                    let gold_tags = gold
                        .gold()
                        .ok_or_else(|| Error::Data("evaluation corpus is unlabeled".into()))?;
                    entity_f1(&pred, &gold_tags)?
                }
                (None, None) => unreachable!("clap requires one of the two"),
            };
            if let Some(path) = out {
                write_atomic(&path, serde_json::to_string_pretty(&metrics)?.as_bytes())?;
            }
            print!("{}", metrics.report());
        }
        Command::Diagnose {
            run,
            teacher,
            student,
            samples,
        } => {
            let mut cfg = resolve(&run)?;
            if let Some(n) = samples {
                cfg.diagnostics.n_samples = n;
                cfg.validate()?;
            }
            let dir = out_dir(&run, "diagnose", &cfg);
            echo_config(&dir, &cfg)?;
            let (teacher, ws) = load_checkpoint_workspace(&cfg, &teacher)?;
            let (student, _) = load_checkpoint_workspace(&cfg, &student)?;
            let (report, samples) = diagnose(&ws, &cfg, &teacher, &student)?;
            write_atomic(&dir.join("report.jsonl"), report.to_jsonl()?.as_bytes())?;
            export_embeddings(&samples, &dir.join("embeddings.tsv"))?;
            print!("{}", report.table());
            println!("{}", dir.display());
        }
        Command::Ablate { run, seeds } => {
            let mut cfg = resolve(&run)?;
            if let Some(k) = seeds {
                cfg.ablation.seeds = (1..=k).collect();
                cfg.validate()?;
            }
            let dir = run.out.clone().unwrap_or_else(|| run.output_root.join("ablate"));
            echo_config(&dir, &cfg)?;
            let ws = Workspace::prepare(&cfg)?;
            let mut outcomes = Vec::new();
            let mut lines = String::new();
            for &seed in &cfg.ablation.seeds {
                for o in run_ablation_seed(&ws, &cfg, seed, &mut |m| progress(m))? {
                    lines.push_str(&serde_json::to_string(&o)?);
                    lines.push('\n');
                    outcomes.push(o);
                }
                write_atomic(&dir.join("runs.jsonl"), lines.as_bytes())?;
            }
            let rows = summarize(&outcomes);
            let mut table = summary_table(&rows);
            let diffs: Vec<f64> = cfg
                .ablation
                .seeds
                .iter()
                .filter_map(|&s| {
                    let f = |v: &str| {
                        outcomes
                            .iter()
                            .find(|o| o.seed == s && o.variant == v)
                            .map(|o| o.target_test_f1)
                    };
                    Some(f("full")? - f("baseline")?)
                })
                .collect();
            if !diffs.is_empty() {
                table.push_str(&format!("sign test full > baseline: p = {:.4}\n", sign_test_p(&diffs)));
            }
            write_atomic(
                &dir.join("summary.json"),
                serde_json::to_string_pretty(&rows)?.as_bytes(),
            )?;
            write_atomic(&dir.join("summary.txt"), table.as_bytes())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
