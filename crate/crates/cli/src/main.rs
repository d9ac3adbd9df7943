use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fairpriv_core::bias::{becpro_score, seat_suite, stereoset_score, BiasScorecard, PermutationMode};
use fairpriv_core::cda::{augment_words, OovPolicy, WordPairTable};
use fairpriv_core::corpus::{load_corpus, make_synthetic_corpus, CorpusSplit};
use fairpriv_core::data;
use fairpriv_core::experiment::{
    derive_seed, format_tables, run_arm, run_matrix_with, save_seed_artifacts, ArmLabel, ExperimentConfig,
    MatrixReport, OutputDir, RunRecord, SeedContext,
};
use fairpriv_core::mia::{AttackConfig, ReferenceCache};
use fairpriv_core::model::LmSnapshot;
use fairpriv_core::utility::perplexity;

#[derive(Parser)]
#[command(name = "fairpriv", version, about = "Bias and privacy experiments on a small language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Overfit,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    /// TOML file whose keys override the profile.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let name = match self.profile {
            Profile::Desk => "desk",
            Profile::Overfit => "overfit",
        };
        let base = ExperimentConfig::profile(name)?;
        match &self.config {
            None => Ok(base),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(ExperimentConfig::merged(&base, &text)?)
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    OneSided,
    TwoSided,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic private and public corpora.
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Swap gendered words in a sentence-per-line file.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Pair tables; the shipped tables are used when none is given.
        #[arg(long)]
        pairs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "two-sided")]
        mode: Mode,
        #[arg(long)]
        keep_case: bool,
    },
    /// Pretrain the base for a seed and fine-tune one arm, saving checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "baseline")]
        arm: ArmLabel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Membership inference of a target checkpoint against a reference.
    Attack {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// split.json written by `train`; train chunks are members, dev chunks are not.
        #[arg(long)]
        split: PathBuf,
        /// Score the target on augmented samples.
        #[arg(long)]
        cda: bool,
        #[arg(long, default_value_t = 0.10)]
        alpha: f64,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// SEAT, BEC-Pro and StereoSet scores of a checkpoint.
    EvalBias {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        permutations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dev-set perplexity of a checkpoint.
    EvalPpl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
    },
    /// Every requested arm under every seed, with comparison tables.
    RunMatrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated arm labels.
        #[arg(long, value_delimiter = ',', default_value = "baseline,cda,dropout,dp,cda+dp,dropout+dp")]
        arms: Vec<ArmLabel>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Also save per-epoch checkpoints of every arm.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Rebuild the tables from a run log.
    Report {
        #[arg(long, default_value = "runs/runs.jsonl")]
        runs: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn load_split(path: &Path) -> Result<CorpusSplit> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_outputs(out: &Path, report: &MatrixReport) -> Result<String> {
    let text = format_tables(report);
    fs::write(out.join("report.txt"), &text)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(text)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenCorpus { cfg, seed, out } => {
            let cfg = cfg.load()?;
            let c = &cfg.corpus;
            fs::create_dir_all(&out)?;
            let private = make_synthetic_corpus(derive_seed(seed, "private"), c.sentences, c.gender_skew)?;
            let public = make_synthetic_corpus(derive_seed(seed, "public"), c.public_sentences, c.gender_skew)?;
            write_lines(&out.join("corpus.txt"), &private)?;
            write_lines(&out.join("public.txt"), &public)?;
            println!("wrote {} + {} sentences to {}", private.len(), public.len(), out.display());
        }
        Command::Augment {
            input,
            output,
            pairs,
            mode,
            keep_case,
        } => {
            let lowercase = !keep_case;
            let table = if pairs.is_empty() {
                data::default_pair_table(lowercase)?
            } else {
                WordPairTable::load_pairs(&pairs, lowercase)?
            };
            let sentences = load_corpus(&input, 1)?;
            let mut lines = Vec::with_capacity(sentences.len() * 2);
            for s in &sentences {
                let swapped = augment_words(s, &table, lowercase);
                match mode {
                    Mode::OneSided => lines.push(swapped),
                    Mode::TwoSided => {
                        let original = if lowercase { s.to_lowercase() } else { s.clone() };
                        let changed = swapped != original;
                        lines.push(original);
                        if changed {
                            lines.push(swapped);
                        }
                    }
                }
            }
            write_lines(&output, &lines)?;
            println!("{} sentences in, {} out", sentences.len(), lines.len());
        }
        Command::Train { cfg, arm, seed, out } => {
            let cfg = cfg.load()?;
            let dir = OutputDir {
                root: out,
                checkpoints: true,
            };
            let ctx = SeedContext::prepare(&cfg, seed)?;
            let seed_dir = save_seed_artifacts(&ctx, &dir)?;
            let cache = ReferenceCache::new(&ctx.base, &ctx.split.train, &ctx.split.dev, "pretrained base")?;
            let record = run_arm(&ctx, &cache, &cfg, arm, Some(&dir));
            println!("{}", serde_json::to_string_pretty(&record)?);
            println!("base checkpoint and split: {}", seed_dir.display());
            if !record.is_complete() {
                bail!("run incomplete: {:?}", record.status);
            }
        }
        Command::Attack {
            target,
            reference,
            split,
            cda,
            alpha,
            trace,
        } => {
            let target = LmSnapshot::load(&target)?;
            let reference = LmSnapshot::load(&reference)?;
            let split = load_split(&split)?;
            let cfg = AttackConfig { alpha };
            let cache = ReferenceCache::new(&reference, &split.train, &split.dev, "reference checkpoint")?;
            let compiled = if cda {
                let table = data::default_pair_table(target.vocab().lowercase())?;
                Some(table.compile(target.vocab(), OovPolicy::MapToUnknown)?)
            } else {
                None
            };
            let outcome = cache.attack(&target, compiled.as_ref(), &cfg)?;
            if let Some(path) = trace {
                outcome.write_trace(BufWriter::new(fs::File::create(&path)?))?;
            }
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::EvalBias {
            checkpoint,
            permutations,
            seed,
        } => {
            let snap = LmSnapshot::load(&checkpoint)?;
            let mode = PermutationMode::Auto {
                samples: permutations,
                seed,
            };
            let seat = seat_suite(&snap, &data::seat_tests(), &data::seat_templates(), mode)?;
            let becpro = becpro_score(&snap, &data::becpro_templates())?;
            let stereo = stereoset_score(&snap, &data::stereoset_tiny())?;
            let card = BiasScorecard {
                seat,
                becpro: becpro.score,
                lms: stereo.lms,
                ss: stereo.ss,
            };
            println!("{}", serde_json::to_string_pretty(&card)?);
        }
        Command::EvalPpl { checkpoint, split } => {
            let snap = LmSnapshot::load(&checkpoint)?;
            let split = load_split(&split)?;
            println!("{}", serde_json::to_string_pretty(&perplexity(&snap, &split.dev)?)?);
        }
        Command::RunMatrix {
            cfg,
            arms,
            seeds,
            out,
            checkpoints,
        } => {
            if arms.is_empty() || seeds.is_empty() {
                bail!("need at least one arm and one seed");
            }
            let cfg = cfg.load()?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let dir = OutputDir {
                root: out.clone(),
                checkpoints,
            };
            let result = run_matrix_with(&cfg, &arms, &seeds, Some(&dir));
            fs::write(out.join("seeds.json"), serde_json::to_string_pretty(&result.seeds)?)?;
            print!("{}", write_outputs(&out, &result.report)?);
            let failed = result.records.iter().filter(|r| !r.is_complete()).count();
            if failed > 0 {
                log::warn!("{failed} run(s) incomplete");
            }
        }
        Command::Report { runs, json } => {
            let records = RunRecord::read_log(&runs)?;
            let report = MatrixReport::from_records(&records);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", format_tables(&report));
            }
        }
    }
    Ok(())
}
