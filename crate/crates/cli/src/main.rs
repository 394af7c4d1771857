//! `letter` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use letter_core::genrec::IdentifierTrie;
use letter_core::pipeline::{
    build_decoding, cf_model_from_tables, compose_config, evaluate_lists, load_data, read_recommendations,
    recommendations_csv, run_cf, run_diagnostics, run_pipeline_until, run_recommend, run_recommender,
    run_tokenizer, split_csv, tokenize, write_cf, write_data, Decoding, DiagnosticInputs, PipelineConfig, Preset,
    RunSummary, Stage,
};
use letter_core::{
    EmbeddingTable, Error, IdentifierAssignment, InteractionDataset, RecommenderModel, Result, RqTokenizer,
};
use log::info;

#[derive(Parser)]
#[command(name = "letter", version, about = "Learnable item tokenization for generative recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration and output flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply when absent.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation preset: 0-4 or semantic-only, collaborative, diversity, full, full-ranking.
    #[arg(long)]
    preset: Option<Preset>,
    /// Override one configuration key, e.g. `--set tokenizer.beta=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        compose_config(self.config.as_deref(), self.preset, &self.overrides, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog with interactions and semantic embeddings.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Filter sparse users and items and write the leave-one-out split.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        interactions: PathBuf,
    },
    /// Train BPR matrix factorization and export item embeddings.
    TrainCf {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        interactions: PathBuf,
    },
    /// Train the residual-quantized tokenizer.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        interactions: PathBuf,
        #[arg(long, value_name = "PATH")]
        semantic: PathBuf,
        /// CF item embeddings, required when alpha > 0.
        #[arg(long, value_name = "PATH")]
        cf: Option<PathBuf>,
    },
    /// Assign identifiers to every catalog item with a trained tokenizer.
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        interactions: PathBuf,
        #[arg(long, value_name = "PATH")]
        semantic: PathBuf,
        #[arg(long, value_name = "PATH")]
        tokenizer: PathBuf,
    },
    /// Train the generative recommender on identifier sequences.
    TrainRec {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        interactions: PathBuf,
        #[arg(long, value_name = "PATH")]
        identifiers: PathBuf,
    },
    /// Beam-search recommendations for every user's test history.
    Recommend {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        interactions: PathBuf,
        #[arg(long, value_name = "PATH")]
        identifiers: PathBuf,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
    },
    /// Recall and NDCG of a recommendations file against the test targets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        interactions: PathBuf,
        #[arg(long, value_name = "PATH")]
        recommendations: PathBuf,
    },
    /// Code-assignment, CF-overlap and generation-bias diagnostics.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        interactions: PathBuf,
        #[arg(long, value_name = "PATH")]
        semantic: PathBuf,
        #[arg(long, value_name = "PATH")]
        cf: PathBuf,
        #[arg(long, value_name = "PATH")]
        tokenizer: PathBuf,
        #[arg(long, value_name = "PATH")]
        identifiers: PathBuf,
        /// CF user factors, for the quantized-embedding ranking.
        #[arg(long, value_name = "PATH")]
        user_factors: Option<PathBuf>,
        /// Recommendations, for the generation-frequency table.
        #[arg(long, value_name = "PATH")]
        recommendations: Option<PathBuf>,
    },
    /// Run every stage end to end, or up to `--until`.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Last stage: data, cf, tokenizer, identifiers, recommender, evaluate or diagnostics.
        #[arg(long, value_parser = parse_stage, default_value = "diagnostics")]
        until: Stage,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    let all = [
        Stage::Data,
        Stage::Cf,
        Stage::Tokenizer,
        Stage::Identifiers,
        Stage::Recommender,
        Stage::Evaluate,
        Stage::Diagnostics,
    ];
    all.into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| format!("unknown stage `{s}`"))
}

/// Create `out` and record the resolved configuration there.
fn prepare(common: &Common) -> Result<PipelineConfig> {
    let config = common.config()?;
    fs::create_dir_all(&common.out).map_err(|e| Error::Io {
        path: common.out.clone(),
        source: e,
    })?;
    write(&common.out.join("resolved_config.toml"), &config.to_toml()?)?;
    Ok(config)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn dataset(config: &PipelineConfig, path: &Path) -> Result<InteractionDataset> {
    InteractionDataset::load(path, config.data.min_count)
}

fn print_metrics(summary: &RunSummary) {
    if let Some(m) = &summary.test {
        for &(k, r, n) in &m.at {
            println!("recall@{k}\t{r:.6}\nndcg@{k}\t{n:.6}");
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => {
            let config = prepare(&common)?;
            let data = load_data(&PipelineConfig {
                data: letter_core::pipeline::DataConfig {
                    interactions: None,
                    semantic: None,
                    ..config.data.clone()
                },
                ..config
            })?;
            write_data(&common.out, &data)?;
            println!(
                "{} items, {} users, {} interactions",
                data.dataset.catalog.len(),
                data.dataset.users.len(),
                data.dataset.num_interactions()
            );
        }
        Command::Split { common, interactions } => {
            let config = prepare(&common)?;
            let ds = dataset(&config, &interactions)?;
            write(
                &common.out.join("interactions.tsv"),
                &letter_core::data::interactions_to_text(&ds.to_interactions()),
            )?;
            write(&common.out.join("split.csv"), &split_csv(&ds)?)?;
            println!("{} items, {} users after filtering", ds.catalog.len(), ds.users.len());
        }
        Command::TrainCf { common, interactions } => {
            let mut config = prepare(&common)?;
            config.data.cf_embeddings = None;
            let ds = dataset(&config, &interactions)?;
            let stage = run_cf(&config, &ds)?;
            write_cf(&common.out, &ds, &stage)?;
            if let Some(loss) = stage.model.as_ref().and_then(|m| m.epoch_losses.last()) {
                println!("final BPR loss {loss:.6}");
            }
        }
        Command::TrainTokenizer {
            common,
            interactions,
            semantic,
            cf,
        } => {
            let config = prepare(&common)?;
            let ds = dataset(&config, &interactions)?;
            let sem = EmbeddingTable::read(&semantic)?;
            let cf_table = match cf {
                Some(p) => EmbeddingTable::read(&p)?,
                None if config.tokenizer.alpha > 0.0 => {
                    return Err(Error::Parameter("--cf is required when tokenizer.alpha > 0".into()))
                }
                None => EmbeddingTable::new(config.tokenizer.arch.latent_dim),
            };
            let (tok, log) = run_tokenizer(&config, &ds, &sem, &cf_table)?;
            tok.save(&common.out.join("tokenizer.json"))?;
            log.write_csv(&common.out.join("training_log.csv"), tok.arch.levels)?;
            if let Some(last) = log.records.last() {
                println!("final loss {:.6}, utilization {:?}", last.total, last.utilization);
            }
        }
        Command::Tokenize {
            common,
            interactions,
            semantic,
            tokenizer,
        } => {
            let config = prepare(&common)?;
            let ds = dataset(&config, &interactions)?;
            let sem = EmbeddingTable::read(&semantic)?;
            let tok = RqTokenizer::load(&tokenizer)?;
            let a = tokenize(&tok, &ds, &sem)?;
            a.write_csv(&common.out.join("identifiers.csv"), ds.catalog.names())?;
            println!("{} identifiers, collision rate {:.4}", a.identifiers.len(), a.collision_rate());
        }
        Command::TrainRec {
            common,
            interactions,
            identifiers,
        } => {
            let config = prepare(&common)?;
            let ds = dataset(&config, &interactions)?;
            let a = IdentifierAssignment::read_csv(&identifiers, &ds.catalog)?;
            let decoding = build_decoding(&a, config.tokenizer.arch.codebook_size)?;
            let (model, log) = run_recommender(&config, &ds, &a, &decoding)?;
            model.save(&common.out.join("recommender.json"))?;
            log.write_csv(&common.out.join("training_log.csv"))?;
            println!("best epoch {}", log.best_epoch);
        }
        Command::Recommend {
            common,
            interactions,
            identifiers,
            model,
        } => {
            let config = prepare(&common)?;
            let ds = dataset(&config, &interactions)?;
            let a = IdentifierAssignment::read_csv(&identifiers, &ds.catalog)?;
            let model = RecommenderModel::load(&model)?;
            let item_tokens = model.vocab.item_tokens(&a)?;
            let decoding = Decoding {
                vocab: model.vocab,
                trie: IdentifierTrie::build(&item_tokens)?,
                item_tokens,
            };
            let lists = run_recommend(&config, &model, &ds, &a, &decoding)?;
            write(&common.out.join("recommendations.csv"), &recommendations_csv(&ds, &lists)?)?;
            println!("{} recommendation lists", lists.len());
        }
        Command::Evaluate {
            common,
            interactions,
            recommendations,
        } => {
            let config = prepare(&common)?;
            let ds = dataset(&config, &interactions)?;
            let lists = read_recommendations(&recommendations, &ds)?;
            let metrics = evaluate_lists(&ds, &lists, &config.eval.ks)?;
            metrics.write_csv(&common.out.join("metrics.csv"))?;
            print_metrics(&RunSummary {
                test: Some(metrics),
                ..RunSummary::default()
            });
        }
        Command::Diagnose {
            common,
            interactions,
            semantic,
            cf,
            tokenizer,
            identifiers,
            user_factors,
            recommendations,
        } => {
            let config = prepare(&common)?;
            let ds = dataset(&config, &interactions)?;
            let sem = EmbeddingTable::read(&semantic)?;
            let cf = EmbeddingTable::read(&cf)?;
            let tok = RqTokenizer::load(&tokenizer)?;
            let a = IdentifierAssignment::read_csv(&identifiers, &ds.catalog)?;
            let cf_model = match user_factors {
                Some(p) => Some(cf_model_from_tables(&ds, &cf, &EmbeddingTable::read(&p)?)?),
                None => None,
            };
            let lists = match recommendations {
                Some(p) => Some(read_recommendations(&p, &ds)?),
                None => None,
            };
            let inputs = DiagnosticInputs {
                dataset: &ds,
                semantic: &sem,
                cf: &cf,
                cf_model: cf_model.as_ref(),
                tokenizer: &tok,
                assignment: &a,
                recommendations: lists.as_deref(),
            };
            let mut summary = RunSummary::default();
            run_diagnostics(&config, &inputs, &common.out, &mut summary)?;
            write(&common.out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
            for l in &summary.levels {
                println!("level {}: utilization {}, entropy {:.4}", l.level, l.utilization, l.entropy);
            }
            if let Some(o) = summary.cf_pair_overlap {
                println!("CF-pair code overlap {o:.4}");
            }
        }
        Command::Pipeline { common, until } => {
            let config = common.config()?;
            let summary = run_pipeline_until(&config, &common.out, until)?;
            info!("artifacts in {}", common.out.display());
            print_metrics(&summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
