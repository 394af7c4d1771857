//! Minibatch training of the tokenizer on the combined objective.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::cf::Similarity;
use crate::data::{Catalog, CfEmbeddingTable, SemanticEmbeddingTable};
use crate::error::{data_err, dim_err, param_err, Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::regularizers::{
    cf_alignment_loss, constrained_kmeans, diversity_loss, total_loss, ClusterAssignment, ContrastiveMode,
};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;
use crate::tokenizer::{kmeans_init_codebooks, RqTokenizer, TokenizerArch};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiversityLevels {
    #[default]
    All,
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainingConfig {
    pub arch: TokenizerArch,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    /// Clusters per codebook for the diversity term.
    pub clusters: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub contrastive_mode: ContrastiveMode,
    pub similarity: Similarity,
    pub diversity_levels: DiversityLevels,
    /// Epochs between re-clusterings of the codebooks.
    pub recluster_every: usize,
    pub dead_code_restart: bool,
    pub kmeans_init: bool,
    pub kmeans_init_iters: usize,
}

impl Default for TokenizerTrainingConfig {
    fn default() -> Self {
        TokenizerTrainingConfig {
            arch: TokenizerArch::default(),
            alpha: 0.02,
            beta: 1e-4,
            mu: 0.25,
            clusters: 10,
            batch_size: 1024,
            epochs: 20_000,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            contrastive_mode: ContrastiveMode::Infonce,
            similarity: Similarity::Dot,
            diversity_levels: DiversityLevels::All,
            recluster_every: 100,
            dead_code_restart: true,
            kmeans_init: true,
            kmeans_init_iters: 50,
        }
    }
}

impl TokenizerTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("mu", self.mu)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(param_err(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.clusters == 0 || self.clusters > self.arch.codebook_size {
            return Err(param_err(format!(
                "cluster count {} must be in 1..={}",
                self.clusters, self.arch.codebook_size
            )));
        }
        if self.batch_size == 0 {
            return Err(param_err("batch size must be positive"));
        }
        if self.alpha > 0.0 && self.batch_size < 2 {
            return Err(param_err("CF alignment needs a batch size of at least 2"));
        }
        if self.recluster_every == 0 {
            return Err(param_err("recluster_every must be positive"));
        }
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
        .validate()
    }

    fn diversity_level_list(&self) -> Vec<usize> {
        match self.diversity_levels {
            DiversityLevels::All => (0..self.arch.levels).collect(),
            DiversityLevels::First => vec![0],
        }
    }
}

/// Per-epoch means of the loss components (item-weighted over batches).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sem: f64,
    pub cf: f64,
    pub div: f64,
    pub total: f64,
    /// Distinct codes selected during the epoch, per level.
    pub utilization: Vec<usize>,
    /// (item, level) pairs without a diversity positive.
    pub div_skipped: usize,
    /// Codes re-seeded at the end of the epoch, all levels together.
    pub restarted: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self, levels: usize) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["epoch", "L_sem", "L_cf", "L_div", "total"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=levels).map(|l| format!("util_{l}")));
        header.extend(["div_skipped".to_string(), "restarted".to_string()]);
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.sem.to_string(),
                r.cf.to_string(),
                r.div.to_string(),
                r.total.to_string(),
            ];
            row.extend(r.utilization.iter().map(|u| u.to_string()));
            row.extend([r.div_skipped.to_string(), r.restarted.to_string()]);
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path, levels: usize) -> Result<()> {
        fs::write(path, self.to_csv(levels)?).map_err(|e| Error::io(path, e))
    }
}

/// Catalog-aligned inputs for training.
pub struct TrainingInputs {
    pub semantic: Tensor,
    pub cf: Option<Tensor>,
}

/// Align both tables to `catalog`; a missing item in either is a data error
/// naming the offenders.
pub fn align_inputs(
    catalog: &Catalog,
    semantic: &SemanticEmbeddingTable,
    cf: Option<&CfEmbeddingTable>,
) -> Result<TrainingInputs> {
    let mut problems = Vec::new();
    let s = semantic.aligned(catalog).map_err(|e| {
        problems.push(format!("semantic table: {e}"));
    });
    let h = cf.map(|t| {
        t.aligned(catalog).map_err(|e| {
            problems.push(format!("CF table: {e}"));
        })
    });
    if !problems.is_empty() {
        return Err(data_err(problems.join("; ")));
    }
    Ok(TrainingInputs {
        semantic: s.expect("checked"),
        cf: h.map(|r| r.expect("checked")),
    })
}

/// Train a fresh tokenizer on the items of `catalog`. `cf` is required when
/// `alpha > 0` and ignored otherwise.
pub fn train_tokenizer(
    catalog: &Catalog,
    semantic: &SemanticEmbeddingTable,
    cf: Option<&CfEmbeddingTable>,
    config: &TokenizerTrainingConfig,
) -> Result<(RqTokenizer, TrainingLog)> {
    config.validate()?;
    if catalog.is_empty() {
        return Err(data_err("empty catalog"));
    }
    if config.alpha > 0.0 && cf.is_none() {
        return Err(param_err("alpha > 0 needs CF embeddings"));
    }
    let inputs = align_inputs(catalog, semantic, cf)?;
    train_tokenizer_aligned(&inputs, config)
}

/// [`train_tokenizer`] on catalog-aligned matrices.
pub fn train_tokenizer_aligned(
    inputs: &TrainingInputs,
    config: &TokenizerTrainingConfig,
) -> Result<(RqTokenizer, TrainingLog)> {
    config.validate()?;
    let arch = &config.arch;
    let semantic = &inputs.semantic;
    let n = semantic.rows();
    let cf = if config.alpha > 0.0 {
        let h = inputs
            .cf
            .as_ref()
            .ok_or_else(|| param_err("alpha > 0 needs CF embeddings"))?;
        if h.rows() != n {
            return Err(dim_err(format!("{} CF rows for {n} items", h.rows())));
        }
        if h.cols() != arch.latent_dim {
            return Err(dim_err(format!(
                "CF dimension {} differs from latent dimension {}",
                h.cols(),
                arch.latent_dim
            )));
        }
        Some(h)
    } else {
        None
    };

    let master = config.seed;
    let mut init_rng = SeededRng::new(derive_seed(master, "tokenizer-init"));
    let mut model = RqTokenizer::new(arch.clone(), semantic.cols(), &mut init_rng)?;
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok((model, log));
    }
    if config.kmeans_init {
        let latents = model.encode(semantic)?;
        let mut rng = SeededRng::new(derive_seed(master, "codebook-init"));
        let set = kmeans_init_codebooks(&latents, arch.levels, arch.codebook_size, config.kmeans_init_iters, &mut rng)?;
        model.set_codebooks(&set)?;
    }

    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    })?;
    let mut order_rng = SeededRng::new(derive_seed(master, "batch-order"));
    let mut div_rng = SeededRng::new(derive_seed(master, "diversity-positives"));
    let mut restart_rng = SeededRng::new(derive_seed(master, "dead-codes"));
    let div_levels = config.diversity_level_list();
    let use_div = config.beta > 0.0;
    let mut clusters: Vec<ClusterAssignment> = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        if use_div && epoch % config.recluster_every == 0 {
            clusters = recluster(&model, config, epoch)?;
        }
        order_rng.shuffle(&mut order);
        let mut used: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); arch.levels];
        let (mut sem_sum, mut cf_sum, mut div_sum, mut total_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut div_skipped = 0usize;
        let mut last_residuals: Vec<Vec<Vec<f64>>> = vec![Vec::new(); arch.levels];
        for batch in order.chunks(config.batch_size) {
            let b = batch.len() as f64;
            let mut tape = Tape::new();
            let s = tape.constant(semantic.gather_rows(batch));
            let z = model.encoder.forward(&mut tape, &model.store, s)?;
            let set = model.codebook_set();
            let mut codes = Vec::with_capacity(batch.len());
            for l in last_residuals.iter_mut() {
                l.clear();
            }
            let zv = tape.value(z);
            for r in 0..batch.len() {
                let q = set.quantize(zv.row(r))?;
                for (l, &c) in q.codes.iter().enumerate() {
                    used[l].insert(c);
                    last_residuals[l].push(q.residuals[l].clone());
                }
                codes.push(q.codes);
            }
            let sf = model.semantic_forward_latent(&mut tape, s, z, &codes, config.mu)?;
            let cf_term = match cf {
                Some(h) => {
                    // value ẑ, gradient to the codes and (straight through) the encoder
                    let frozen = tape.stop_gradient(z);
                    let shift = tape.sub(z, frozen)?;
                    let zhat = tape.add(sf.zhat, shift)?;
                    let hb = tape.constant(h.gather_rows(batch));
                    Some(cf_alignment_loss(&mut tape, zhat, hb, config.contrastive_mode, config.similarity)?)
                }
                None => None,
            };
            let div_term = if use_div {
                let cbs: Vec<_> = model.codebooks.iter().map(|&id| tape.param(&model.store, id)).collect();
                let out = diversity_loss(
                    &mut tape,
                    &cbs,
                    &codes,
                    &clusters,
                    &div_levels,
                    config.contrastive_mode,
                    config.similarity,
                    &mut div_rng,
                )?;
                div_skipped += out.skipped;
                Some(out.loss)
            } else {
                None
            };
            let total = total_loss(&mut tape, sf.loss, cf_term, div_term, config.alpha, config.beta)?;
            let total_v = tape.value(total).item();
            if !total_v.is_finite() {
                return Err(Error::Numeric(format!("tokenizer loss became {total_v} at epoch {epoch}")));
            }
            sem_sum += b * tape.value(sf.loss).item();
            cf_sum += b * cf_term.map_or(0.0, |v| tape.value(v).item());
            div_sum += b * div_term.map_or(0.0, |v| tape.value(v).item());
            total_sum += b * total_v;
            let grads = tape.backward(total)?;
            model.store.zero_grad();
            model.store.accumulate(&tape, &grads);
            opt.step(&mut model.store);
        }
        let restarted = if config.dead_code_restart {
            restart_dead_codes(&mut model, &used, &last_residuals, &mut restart_rng)
        } else {
            0
        };
        let nf = n as f64;
        let rec = EpochRecord {
            epoch,
            sem: sem_sum / nf,
            cf: cf_sum / nf,
            div: div_sum / nf,
            total: total_sum / nf,
            utilization: used.iter().map(|u| u.len()).collect(),
            div_skipped,
            restarted,
        };
        debug!(
            "tokenizer epoch {epoch}: sem {:.5} cf {:.5} div {:.5} util {:?}",
            rec.sem, rec.cf, rec.div, rec.utilization
        );
        log.records.push(rec);
    }
    if let Some(last) = log.records.last() {
        info!(
            "tokenizer trained {} epochs: final loss {:.5}, utilization {:?}",
            config.epochs, last.total, last.utilization
        );
    }
    if !model.store.all_finite() {
        return Err(Error::Numeric("tokenizer parameters are not finite".into()));
    }
    Ok((model, log))
}

fn recluster(model: &RqTokenizer, config: &TokenizerTrainingConfig, epoch: usize) -> Result<Vec<ClusterAssignment>> {
    model
        .codebook_set()
        .levels
        .iter()
        .enumerate()
        .map(|(l, cb)| {
            let seed = derive_seed(config.seed, &format!("clusters-{epoch}-{l}"));
            constrained_kmeans(cb, config.clusters, seed)
        })
        .collect()
}

/// Codes never selected during the epoch move to a random residual from
/// the epoch's last batch; their optimizer moments are cleared.
fn restart_dead_codes(
    model: &mut RqTokenizer,
    used: &[BTreeSet<usize>],
    residuals: &[Vec<Vec<f64>>],
    rng: &mut SeededRng,
) -> usize {
    let mut restarted = 0;
    for (l, &id) in model.codebooks.clone().iter().enumerate() {
        if residuals[l].is_empty() {
            continue;
        }
        let param = model.store.get_mut(id);
        for c in 0..param.value.rows() {
            if used[l].contains(&c) {
                continue;
            }
            let r = &residuals[l][rng.below(residuals[l].len())];
            param.value.row_mut(c).copy_from_slice(r);
            for m in [param.moment1.as_mut(), param.moment2.as_mut()].into_iter().flatten() {
                m.row_mut(c).iter_mut().for_each(|x| *x = 0.0);
            }
            restarted += 1;
        }
    }
    restarted
}
