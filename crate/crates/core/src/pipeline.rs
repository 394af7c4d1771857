//! End-to-end runs: configuration, presets, stage functions and artifacts.
//!
//! A run directory is self-describing. It holds the resolved configuration
//! (`resolved_config.toml`), a `manifest.json` with format versions and
//! stage seeds, and every intermediate artifact:
//!
//! ```text
//! data/interactions.tsv  data/semantic.tsv  data/split.csv  [data/topics.csv]
//! cf/cf_embeddings.tsv   cf/user_factors.tsv  cf/training_log.csv
//! tokenizer/tokenizer.json  tokenizer/training_log.csv
//! identifiers.csv
//! recommender/recommender.json  recommender/training_log.csv
//! recommendations.csv  metrics.csv
//! diagnostics/...  summary.json
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::cf::{nearest_cf_pairs, train_cf, BprMfModel, CfConfig, Similarity};
use crate::data::{interactions_to_text, CfEmbeddingTable, EmbeddingTable, InteractionDataset, SemanticEmbeddingTable};
use crate::diagnostics::{
    code_histogram, code_overlap_similarity, export_code_embedding_pca, generation_by_first_code,
    generation_frequency, substituted_ranking, write_generation_csv, OverlapMode, RankingMetrics,
};
use crate::error::{param_err, Error, Result};
use crate::genrec::{
    build_examples, eval_examples, recommend, train_recommender, EvalSplit, IdentifierTrie, RecTrainingConfig,
    RecTrainingLog, Recommendation, RecommenderModel, TokenVocabulary, MODEL_FORMAT_VERSION,
};
use crate::metrics::RankingResult;
use crate::rng::{derive_seed, SeededRng};
use crate::synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};
use crate::tensor::Tensor;
use crate::tokenizer::{assign_identifiers, IdentifierAssignment, RqTokenizer, TOKENIZER_FORMAT_VERSION};
use crate::tokenizer_training::{train_tokenizer, TokenizerTrainingConfig, TrainingLog};

pub const MANIFEST_FORMAT: &str = "letter-run";
pub const MANIFEST_VERSION: u32 = 1;
/// Version of the CSV/TSV layouts written by a run.
pub const TABLE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Interaction TSV (`user<TAB>item<TAB>timestamp`); synthetic data when absent.
    pub interactions: Option<PathBuf>,
    /// Semantic embedding table; required with `interactions`.
    pub semantic: Option<PathBuf>,
    /// Precomputed CF item embeddings; trained from the interactions when absent.
    pub cf_embeddings: Option<PathBuf>,
    pub min_count: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            interactions: None,
            semantic: None,
            cf_embeddings: None,
            min_count: 5,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Recommendations per test user counted by the generation diagnostic.
    pub generation_top: usize,
    pub overlap_mode: OverlapMode,
    /// Similarity used to find each item's CF-nearest neighbour.
    pub pair_similarity: Similarity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![5, 10, 20],
            generation_top: 10,
            overlap_mode: OverlapMode::Positionwise,
            pair_similarity: Similarity::Dot,
        }
    }
}

/// Every setting of a run. Stage seeds are derived from `seed` by
/// [`PipelineConfig::resolved`]; the per-stage `seed` fields are outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub cf: CfConfig,
    pub tokenizer: TokenizerTrainingConfig,
    pub recommender: RecTrainingConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    /// Desk-scale budgets: the tokenizer trains for 300 epochs
    /// and the recommender validates a 200-user subset every 5 epochs.
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            data: DataConfig::default(),
            cf: CfConfig::default(),
            tokenizer: TokenizerTrainingConfig {
                epochs: 300,
                batch_size: 256,
                ..Default::default()
            },
            recommender: RecTrainingConfig {
                epochs: 20,
                val_every: 5,
                val_users: 200,
                ..Default::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

/// Ablation variants: (0) semantic only, (1) +CF, (2) +diversity,
/// (3) both regularizers, (4) both plus the ranking-guided loss at τ = 0.8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    SemanticOnly,
    Collaborative,
    Diversity,
    Full,
    FullRanking,
}

pub const PRESET_ALPHA: f64 = 0.02;
pub const PRESET_BETA: f64 = 1e-4;
pub const PRESET_TAU: f64 = 0.8;

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::SemanticOnly,
        Preset::Collaborative,
        Preset::Diversity,
        Preset::Full,
        Preset::FullRanking,
    ];

    pub fn index(self) -> usize {
        Preset::ALL.iter().position(|&p| p == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::SemanticOnly => "semantic-only",
            Preset::Collaborative => "collaborative",
            Preset::Diversity => "diversity",
            Preset::Full => "full",
            Preset::FullRanking => "full-ranking",
        }
    }

    /// `(alpha, beta, tau)` of the variant.
    pub fn settings(self) -> (f64, f64, f64) {
        match self {
            Preset::SemanticOnly => (0.0, 0.0, 1.0),
            Preset::Collaborative => (PRESET_ALPHA, 0.0, 1.0),
            Preset::Diversity => (0.0, PRESET_BETA, 1.0),
            Preset::Full => (PRESET_ALPHA, PRESET_BETA, 1.0),
            Preset::FullRanking => (PRESET_ALPHA, PRESET_BETA, PRESET_TAU),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    /// Accepts the index `0`..`4` or the name.
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| s == p.name() || s == p.index().to_string())
            .ok_or_else(|| {
                param_err(format!(
                    "unknown preset `{s}`; expected 0-4 or one of {}",
                    Preset::ALL.map(|p| p.name()).join(", ")
                ))
            })
    }
}

/// Seed of one stage; kept below 2^63 so it survives TOML.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    derive_seed(master, stage) >> 1
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(param_err(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default())) {
            toml::Value::Table(t) => t,
            _ => return Err(param_err(format!("`{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| param_err(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config serialization: {e}")))
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let (alpha, beta, tau) = preset.settings();
        self.tokenizer.alpha = alpha;
        self.tokenizer.beta = beta;
        self.recommender.tau = tau;
    }

    /// Apply `section.key=value` overrides. Values are read as TOML and fall
    /// back to plain strings; unknown keys are rejected.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::Format(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| param_err(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| param_err(format!("override: {e}")))?;
        Ok(())
    }

    /// Copy with every stage seed derived from the master seed.
    pub fn resolved(&self) -> Result<Self> {
        if self.seed > i64::MAX as u64 {
            return Err(param_err(format!("seed {} exceeds 2^63 - 1", self.seed)));
        }
        let mut c = self.clone();
        c.data.synthetic.seed = stage_seed(self.seed, "data");
        c.tokenizer.seed = stage_seed(self.seed, "tokenizer");
        c.recommender.seed = stage_seed(self.seed, "recommender");
        c.validate()?;
        Ok(c)
    }

    pub fn cf_seed(&self) -> u64 {
        stage_seed(self.seed, "cf")
    }

    pub fn recommender_init_seed(&self) -> u64 {
        stage_seed(self.seed, "recommender-init")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.interactions.is_some() && self.data.semantic.is_none() {
            return Err(param_err("data.semantic is required with data.interactions"));
        }
        if self.data.interactions.is_none() {
            self.data.synthetic.validate()?;
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(param_err("eval.ks must be a nonempty list of positive cutoffs"));
        }
        if self.eval.generation_top == 0 {
            return Err(param_err("eval.generation_top must be positive"));
        }
        self.tokenizer.validate()?;
        self.recommender.validate()
    }
}

/// Build a configuration the way the CLI does: defaults or a file, then a
/// preset, then overrides, then the master seed.
pub fn compose_config(
    file: Option<&Path>,
    preset: Option<Preset>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<PipelineConfig> {
    let mut c = match file {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(p) = preset {
        c.apply_preset(p);
    }
    c.apply_overrides(overrides)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    c.resolved()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Interactions and semantic table of a run.
pub struct RunData {
    pub dataset: InteractionDataset,
    pub semantic: SemanticEmbeddingTable,
    pub synthetic: Option<SyntheticData>,
}

/// Load the configured files, or generate synthetic data.
pub fn load_data(config: &PipelineConfig) -> Result<RunData> {
    match &config.data.interactions {
        Some(path) => {
            let dataset = InteractionDataset::load(path, config.data.min_count)?;
            let sem_path = config
                .data
                .semantic
                .as_ref()
                .ok_or_else(|| param_err("data.semantic is required with data.interactions"))?;
            let semantic = EmbeddingTable::read(sem_path)?;
            Ok(RunData {
                dataset,
                semantic,
                synthetic: None,
            })
        }
        None => {
            let synthetic = generate_synthetic(&config.data.synthetic)?;
            let dataset = InteractionDataset::from_interactions(&synthetic.interactions, config.data.min_count)?;
            Ok(RunData {
                dataset,
                semantic: synthetic.semantic.clone(),
                synthetic: Some(synthetic),
            })
        }
    }
}

/// `user_id,train_items,validation_item,test_item` rows.
pub fn split_csv(dataset: &InteractionDataset) -> Result<String> {
    csv_string(
        &["user_id", "train_items", "validation_item", "test_item"],
        dataset
            .split_rows()
            .into_iter()
            .map(|(u, n, v, t)| vec![u, n.to_string(), v, t]),
    )
}

/// `item_id,topic,group` rows of generated data.
pub fn topics_csv(data: &SyntheticData) -> Result<String> {
    csv_string(
        &["item_id", "topic", "group"],
        (0..data.topics.len()).map(|i| vec![i.to_string(), data.topics[i].to_string(), data.groups[i].to_string()]),
    )
}

pub fn write_data(dir: &Path, data: &RunData) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join("interactions.tsv"), &interactions_to_text(&data.dataset.to_interactions()))?;
    data.semantic.write(&dir.join("semantic.tsv"))?;
    write_text(&dir.join("split.csv"), &split_csv(&data.dataset)?)?;
    if let Some(s) = &data.synthetic {
        write_text(&dir.join("topics.csv"), &topics_csv(s)?)?;
    }
    Ok(())
}

/// CF item embeddings, plus the trained model when they were trained here.
pub struct CfStage {
    pub embeddings: CfEmbeddingTable,
    pub model: Option<BprMfModel>,
}

pub fn run_cf(config: &PipelineConfig, dataset: &InteractionDataset) -> Result<CfStage> {
    match &config.data.cf_embeddings {
        Some(path) => Ok(CfStage {
            embeddings: EmbeddingTable::read(path)?,
            model: None,
        }),
        None => {
            let (embeddings, model) = train_cf(dataset, &config.cf, config.cf_seed())?;
            Ok(CfStage {
                embeddings,
                model: Some(model),
            })
        }
    }
}

pub fn cf_log_csv(model: &BprMfModel) -> Result<String> {
    csv_string(
        &["epoch", "loss"],
        model
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(e, l)| vec![(e + 1).to_string(), l.to_string()]),
    )
}

/// User factors keyed by user id, in dataset order.
pub fn user_factor_table(dataset: &InteractionDataset, model: &BprMfModel) -> Result<EmbeddingTable> {
    let mut t = EmbeddingTable::new(model.user_factors.cols());
    for (u, seq) in dataset.users.iter().enumerate() {
        t.insert(&seq.user, model.user_factors.row(u))?;
    }
    Ok(t)
}

/// Rebuild a CF model from saved item and user tables for `dataset`.
pub fn cf_model_from_tables(
    dataset: &InteractionDataset,
    items: &CfEmbeddingTable,
    users: &EmbeddingTable,
) -> Result<BprMfModel> {
    let item_factors = items.aligned(&dataset.catalog)?;
    let mut data = Vec::with_capacity(dataset.users.len() * users.dim());
    for seq in &dataset.users {
        let row = users
            .get(&seq.user)
            .ok_or_else(|| Error::Data(format!("user {} has no CF factors", seq.user)))?;
        data.extend_from_slice(row);
    }
    Ok(BprMfModel {
        user_factors: Tensor::matrix(dataset.users.len(), users.dim(), data)?,
        item_factors,
        epoch_losses: Vec::new(),
    })
}

pub fn write_cf(dir: &Path, dataset: &InteractionDataset, stage: &CfStage) -> Result<()> {
    create_dir(dir)?;
    stage.embeddings.write(&dir.join("cf_embeddings.tsv"))?;
    if let Some(m) = &stage.model {
        user_factor_table(dataset, m)?.write(&dir.join("user_factors.tsv"))?;
        write_text(&dir.join("training_log.csv"), &cf_log_csv(m)?)?;
    }
    Ok(())
}

pub fn run_tokenizer(
    config: &PipelineConfig,
    dataset: &InteractionDataset,
    semantic: &SemanticEmbeddingTable,
    cf: &CfEmbeddingTable,
) -> Result<(RqTokenizer, TrainingLog)> {
    let cf = (config.tokenizer.alpha > 0.0).then_some(cf);
    train_tokenizer(&dataset.catalog, semantic, cf, &config.tokenizer)
}

pub fn tokenize(
    tokenizer: &RqTokenizer,
    dataset: &InteractionDataset,
    semantic: &SemanticEmbeddingTable,
) -> Result<IdentifierAssignment> {
    let s = semantic.aligned(&dataset.catalog)?;
    Ok(assign_identifiers(&tokenizer.codes_for(&s)?))
}

/// Vocabulary, per-item token sequences and Trie of an assignment.
pub struct Decoding {
    pub vocab: TokenVocabulary,
    pub item_tokens: Vec<Vec<usize>>,
    pub trie: IdentifierTrie,
}

pub fn build_decoding(assignment: &IdentifierAssignment, codebook_size: usize) -> Result<Decoding> {
    let vocab = TokenVocabulary::for_assignment(assignment, codebook_size)?;
    let item_tokens = vocab.item_tokens(assignment)?;
    let trie = IdentifierTrie::build(&item_tokens)?;
    Ok(Decoding {
        vocab,
        item_tokens,
        trie,
    })
}

pub fn run_recommender(
    config: &PipelineConfig,
    dataset: &InteractionDataset,
    assignment: &IdentifierAssignment,
    decoding: &Decoding,
) -> Result<(RecommenderModel, RecTrainingLog)> {
    let rc = &config.recommender;
    let train = build_examples(dataset, assignment, rc.example_mode, rc.history_cap)?;
    let val = eval_examples(dataset, assignment, EvalSplit::Validation, rc.history_cap)?;
    let mut rng = SeededRng::new(config.recommender_init_seed());
    let model = RecommenderModel::new(
        rc.arch.clone(),
        decoding.vocab,
        rc.max_positions(decoding.vocab.max_item_len()),
        &mut rng,
    )?;
    train_recommender(model, &train, &val, &decoding.item_tokens, &decoding.trie, rc)
}

/// Beam-search recommendations for every user's test history.
pub fn run_recommend(
    config: &PipelineConfig,
    model: &RecommenderModel,
    dataset: &InteractionDataset,
    assignment: &IdentifierAssignment,
    decoding: &Decoding,
) -> Result<Vec<Vec<Recommendation>>> {
    let rc = &config.recommender;
    let test = eval_examples(dataset, assignment, EvalSplit::Test, rc.history_cap)?;
    recommend(model, &decoding.trie, &decoding.item_tokens, &test, rc.beam_width, rc.inference_tau)
}

/// `user_id,rank,item_id,score` rows, users in dataset order.
pub fn recommendations_csv(dataset: &InteractionDataset, lists: &[Vec<Recommendation>]) -> Result<String> {
    let mut rows = Vec::new();
    for (seq, list) in dataset.users.iter().zip(lists) {
        for (r, rec) in list.iter().enumerate() {
            rows.push(vec![
                seq.user.clone(),
                (r + 1).to_string(),
                dataset.catalog.name(rec.item).to_string(),
                rec.score.to_string(),
            ]);
        }
    }
    csv_string(&["user_id", "rank", "item_id", "score"], rows)
}

/// Read recommendation lists back, one per dataset user (empty when absent).
pub fn read_recommendations(path: &Path, dataset: &InteractionDataset) -> Result<Vec<Vec<Recommendation>>> {
    let mut r = csv::Reader::from_path(path)?;
    let slot: std::collections::HashMap<&str, usize> = dataset
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.user.as_str(), i))
        .collect();
    let mut lists: Vec<Vec<(usize, Recommendation)>> = vec![Vec::new(); dataset.users.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| Error::Parse { line: line + 2, message: m };
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", rec.len())));
        }
        let u = *slot
            .get(&rec[0])
            .ok_or_else(|| bad(format!("unknown user {}", &rec[0])))?;
        let rank: usize = rec[1].parse().map_err(|e| bad(format!("rank: {e}")))?;
        let item = dataset
            .catalog
            .index_of(&rec[2])
            .ok_or_else(|| bad(format!("unknown item {}", &rec[2])))?;
        let score: f64 = rec[3].parse().map_err(|e| bad(format!("score: {e}")))?;
        lists[u].push((rank, Recommendation { item, score }));
    }
    Ok(lists
        .into_iter()
        .map(|mut l| {
            l.sort_by_key(|&(rank, _)| rank);
            l.into_iter().map(|(_, r)| r).collect()
        })
        .collect())
}

/// Ranking metrics of recommendation lists against the test targets.
pub fn evaluate_lists(
    dataset: &InteractionDataset,
    lists: &[Vec<Recommendation>],
    ks: &[usize],
) -> Result<RankingMetrics> {
    if lists.len() != dataset.users.len() {
        return Err(Error::Data(format!(
            "{} recommendation lists for {} users",
            lists.len(),
            dataset.users.len()
        )));
    }
    let results: Vec<RankingResult> = dataset
        .users
        .iter()
        .zip(lists)
        .map(|(seq, l)| {
            let items: Vec<usize> = l.iter().map(|r| r.item).collect();
            RankingResult::from_list(&items, seq.test_target())
        })
        .collect();
    RankingMetrics::from_results(&results, ks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub utilization: usize,
    pub entropy: f64,
}

/// Headline numbers of a run, written as `summary.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub items: usize,
    pub users: usize,
    pub interactions: usize,
    pub collision_rate: f64,
    pub levels: Vec<LevelStats>,
    pub cf_pair_overlap: Option<f64>,
    pub quantized_ranking: Option<RankingMetrics>,
    pub test: Option<RankingMetrics>,
    pub best_epoch: Option<usize>,
}

impl RunSummary {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.test.as_ref().and_then(|m| m.recall(k))
    }

    pub fn level(&self, level: usize) -> Option<&LevelStats> {
        self.levels.iter().find(|l| l.level == level)
    }
}

/// Inputs of the diagnostics stage.
pub struct DiagnosticInputs<'a> {
    pub dataset: &'a InteractionDataset,
    pub semantic: &'a SemanticEmbeddingTable,
    pub cf: &'a CfEmbeddingTable,
    pub cf_model: Option<&'a BprMfModel>,
    pub tokenizer: &'a RqTokenizer,
    pub assignment: &'a IdentifierAssignment,
    pub recommendations: Option<&'a [Vec<Recommendation>]>,
}

/// Write the diagnostics files into `dir` and fill the tokenizer-side
/// fields of `summary`.
pub fn run_diagnostics(
    config: &PipelineConfig,
    inputs: &DiagnosticInputs<'_>,
    dir: &Path,
    summary: &mut RunSummary,
) -> Result<()> {
    create_dir(dir)?;
    let arch = &inputs.tokenizer.arch;
    let n = arch.codebook_size;
    let a = inputs.assignment;
    summary.items = inputs.dataset.catalog.len();
    summary.users = inputs.dataset.users.len();
    summary.interactions = inputs.dataset.num_interactions();
    summary.collision_rate = a.collision_rate();
    summary.levels.clear();
    let codebooks = inputs.tokenizer.codebook_set();
    for level in 1..=arch.levels {
        let h = code_histogram(a, n, level)?;
        h.write_counts_csv(&dir.join(format!("code_counts_l{level}.csv")))?;
        if level == 1 {
            h.write_grouped_csv(&dir.join("code_groups_l1.csv"))?;
        }
        summary.levels.push(LevelStats {
            level,
            utilization: h.utilization,
            entropy: h.entropy,
        });
        if n >= 3 {
            export_code_embedding_pca(&codebooks, a, level)?.write_csv(&dir.join(format!("code_pca_l{level}.csv")))?;
        }
    }

    let cf = inputs.cf.aligned(&inputs.dataset.catalog)?;
    if cf.rows() >= 2 {
        let pairs = nearest_cf_pairs(&cf, config.eval.pair_similarity)?;
        let overlap = code_overlap_similarity(a, &pairs, config.eval.overlap_mode)?;
        let names = inputs.dataset.catalog.names();
        write_text(
            &dir.join("cf_pairs.csv"),
            &csv_string(
                &["item_id", "neighbour_id"],
                pairs.iter().map(|&(x, y)| vec![names[x].clone(), names[y].clone()]),
            )?,
        )?;
        summary.cf_pair_overlap = Some(overlap);
    }

    match inputs.cf_model {
        Some(m) => {
            let s = inputs.semantic.aligned(&inputs.dataset.catalog)?;
            let q = inputs.tokenizer.quantized_embeddings(&s)?;
            let metrics = substituted_ranking(&q, m, inputs.dataset, &config.eval.ks)?;
            metrics.write_csv(&dir.join("quantized_ranking.csv"))?;
            let own = substituted_ranking(&m.item_factors, m, inputs.dataset, &config.eval.ks)?;
            own.write_csv(&dir.join("cf_ranking.csv"))?;
            summary.quantized_ranking = Some(metrics);
        }
        None => warn!("no CF user factors: skipping the quantized-embedding ranking"),
    }

    if let Some(lists) = inputs.recommendations {
        let top: Vec<Vec<Recommendation>> = lists
            .iter()
            .map(|l| l.iter().take(config.eval.generation_top).cloned().collect())
            .collect();
        let counts = generation_frequency(&top, inputs.dataset.catalog.len())?;
        write_generation_csv(&dir.join("generation_by_code.csv"), &generation_by_first_code(&counts, a, n)?)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub format: String,
    pub version: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub toolkit_version: String,
    pub master_seed: u64,
    /// `(stage, seed)` in run order.
    pub stage_seeds: Vec<(String, u64)>,
    pub last_stage: Stage,
    pub files: Vec<FileEntry>,
}

/// Pipeline stages in run order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    Cf,
    Tokenizer,
    Identifiers,
    Recommender,
    Evaluate,
    Diagnostics,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Cf => "cf",
            Stage::Tokenizer => "tokenizer",
            Stage::Identifiers => "identifiers",
            Stage::Recommender => "recommender",
            Stage::Evaluate => "evaluate",
            Stage::Diagnostics => "diagnostics",
        }
    }
}

fn entry(path: &str, format: &str, version: u32) -> FileEntry {
    FileEntry {
        path: path.into(),
        format: format.into(),
        version,
    }
}

/// Run every stage up to and including `last` and write the artifacts to
/// `out`. With `last` before [`Stage::Recommender`], diagnostics still run on
/// the tokenizer outputs once identifiers exist.
pub fn run_pipeline_until(config: &PipelineConfig, out: &Path, last: Stage) -> Result<RunSummary> {
    let config = config.resolved()?;
    create_dir(out)?;
    write_text(&out.join("resolved_config.toml"), &config.to_toml()?)?;
    let mut files = vec![entry("resolved_config.toml", "toml", MANIFEST_VERSION)];
    let mut summary = RunSummary::default();

    let stage = |s: Stage| move |e: Error| e.in_stage(s.name());

    info!("stage data");
    let data = load_data(&config).map_err(stage(Stage::Data))?;
    write_data(&out.join("data"), &data).map_err(stage(Stage::Data))?;
    files.push(entry("data/interactions.tsv", "interactions-tsv", TABLE_FORMAT_VERSION));
    files.push(entry("data/semantic.tsv", "embedding-table", TABLE_FORMAT_VERSION));
    files.push(entry("data/split.csv", "split-csv", TABLE_FORMAT_VERSION));
    if data.synthetic.is_some() {
        files.push(entry("data/topics.csv", "topics-csv", TABLE_FORMAT_VERSION));
    }
    let ds = &data.dataset;
    summary.items = ds.catalog.len();
    summary.users = ds.users.len();
    summary.interactions = ds.num_interactions();

    let done = |out: &Path, last_stage: Stage, files: Vec<FileEntry>, summary: &RunSummary| -> Result<()> {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            master_seed: config.seed,
            stage_seeds: vec![
                ("data".into(), config.data.synthetic.seed),
                ("cf".into(), config.cf_seed()),
                ("tokenizer".into(), config.tokenizer.seed),
                ("recommender-init".into(), config.recommender_init_seed()),
                ("recommender".into(), config.recommender.seed),
            ],
            last_stage,
            files,
        };
        write_text(&out.join("summary.json"), &serde_json::to_string_pretty(summary)?)?;
        write_text(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)
    };
    if last == Stage::Data {
        done(out, last, files, &summary)?;
        return Ok(summary);
    }

    info!("stage cf");
    let cf = run_cf(&config, ds).map_err(stage(Stage::Cf))?;
    write_cf(&out.join("cf"), ds, &cf).map_err(stage(Stage::Cf))?;
    files.push(entry("cf/cf_embeddings.tsv", "embedding-table", TABLE_FORMAT_VERSION));
    if cf.model.is_some() {
        files.push(entry("cf/user_factors.tsv", "embedding-table", TABLE_FORMAT_VERSION));
        files.push(entry("cf/training_log.csv", "cf-log-csv", TABLE_FORMAT_VERSION));
    }
    if last == Stage::Cf {
        done(out, last, files, &summary)?;
        return Ok(summary);
    }

    info!("stage tokenizer");
    let (tokenizer, tlog) = run_tokenizer(&config, ds, &data.semantic, &cf.embeddings).map_err(stage(Stage::Tokenizer))?;
    let tdir = out.join("tokenizer");
    create_dir(&tdir).map_err(stage(Stage::Tokenizer))?;
    tokenizer.save(&tdir.join("tokenizer.json")).map_err(stage(Stage::Tokenizer))?;
    tlog.write_csv(&tdir.join("training_log.csv"), tokenizer.arch.levels)
        .map_err(stage(Stage::Tokenizer))?;
    files.push(entry("tokenizer/tokenizer.json", "tokenizer-checkpoint", TOKENIZER_FORMAT_VERSION));
    files.push(entry("tokenizer/training_log.csv", "tokenizer-log-csv", TABLE_FORMAT_VERSION));
    if last == Stage::Tokenizer {
        done(out, last, files, &summary)?;
        return Ok(summary);
    }

    info!("stage identifiers");
    let assignment = tokenize(&tokenizer, ds, &data.semantic).map_err(stage(Stage::Identifiers))?;
    assignment
        .write_csv(&out.join("identifiers.csv"), ds.catalog.names())
        .map_err(stage(Stage::Identifiers))?;
    files.push(entry("identifiers.csv", "identifiers-csv", TABLE_FORMAT_VERSION));
    info!(
        "{} items, collision rate {:.4}",
        assignment.identifiers.len(),
        assignment.collision_rate()
    );

    let mut lists = None;
    if last >= Stage::Recommender {
        info!("stage recommender");
        let decoding =
            build_decoding(&assignment, tokenizer.arch.codebook_size).map_err(stage(Stage::Recommender))?;
        let (model, rlog) = run_recommender(&config, ds, &assignment, &decoding).map_err(stage(Stage::Recommender))?;
        let rdir = out.join("recommender");
        create_dir(&rdir).map_err(stage(Stage::Recommender))?;
        model.save(&rdir.join("recommender.json")).map_err(stage(Stage::Recommender))?;
        rlog.write_csv(&rdir.join("training_log.csv")).map_err(stage(Stage::Recommender))?;
        files.push(entry("recommender/recommender.json", "recommender-checkpoint", MODEL_FORMAT_VERSION));
        files.push(entry("recommender/training_log.csv", "recommender-log-csv", TABLE_FORMAT_VERSION));
        summary.best_epoch = Some(rlog.best_epoch);

        if last >= Stage::Evaluate {
            info!("stage evaluate");
            let recs = run_recommend(&config, &model, ds, &assignment, &decoding).map_err(stage(Stage::Evaluate))?;
            write_text(
                &out.join("recommendations.csv"),
                &recommendations_csv(ds, &recs).map_err(stage(Stage::Evaluate))?,
            )
            .map_err(stage(Stage::Evaluate))?;
            let metrics = evaluate_lists(ds, &recs, &config.eval.ks).map_err(stage(Stage::Evaluate))?;
            metrics.write_csv(&out.join("metrics.csv")).map_err(stage(Stage::Evaluate))?;
            files.push(entry("recommendations.csv", "recommendations-csv", TABLE_FORMAT_VERSION));
            files.push(entry("metrics.csv", "metrics-csv", TABLE_FORMAT_VERSION));
            info!("test metrics: {:?}", metrics.at);
            summary.test = Some(metrics);
            lists = Some(recs);
        }
    }

    info!("stage diagnostics");
    let inputs = DiagnosticInputs {
        dataset: ds,
        semantic: &data.semantic,
        cf: &cf.embeddings,
        cf_model: cf.model.as_ref(),
        tokenizer: &tokenizer,
        assignment: &assignment,
        recommendations: lists.as_deref(),
    };
    run_diagnostics(&config, &inputs, &out.join("diagnostics"), &mut summary).map_err(stage(Stage::Diagnostics))?;
    files.push(entry("diagnostics/", "diagnostics-csv", TABLE_FORMAT_VERSION));
    files.push(entry("summary.json", "summary-json", MANIFEST_VERSION));
    done(out, last.max(Stage::Diagnostics), files, &summary)?;
    Ok(summary)
}

/// Every stage, end to end.
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<RunSummary> {
    run_pipeline_until(config, out, Stage::Diagnostics)
}
