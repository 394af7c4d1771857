//! Residual-quantized autoencoder over semantic item embeddings.
//!
//! An encoder maps a semantic vector `s` to a latent `z`, which is
//! quantized level by level: level `l` picks the code nearest to the
//! residual left by the previous levels and subtracts it. The chosen code
//! indices form the item's identifier, and their sum `ẑ` is decoded back
//! to the semantic space.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, ParamId, ParamStore, Tape, Var};
use crate::cluster;
use crate::error::{dim_err, param_err, Error, Result};
use crate::nn::Mlp;
use crate::rng::SeededRng;
use crate::tensor::{squared_distance, Tensor};

pub const TOKENIZER_MAGIC: &str = "LETTER-RQ-TOKENIZER";
pub const TOKENIZER_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerArch {
    /// Number of code levels `L` (identifier length).
    pub levels: usize,
    /// Codes per level `N`.
    pub codebook_size: usize,
    /// Latent/code dimension `d`.
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for TokenizerArch {
    fn default() -> Self {
        TokenizerArch {
            levels: 4,
            codebook_size: 256,
            latent_dim: 32,
            hidden: vec![128, 128],
            activation: Activation::Silu,
        }
    }
}

impl TokenizerArch {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.codebook_size == 0 || self.latent_dim == 0 {
            return Err(param_err("levels, codebook_size and latent_dim must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(param_err("hidden widths must be positive"));
        }
        Ok(())
    }
}

/// Output of residual quantization for one latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub codes: Vec<usize>,
    /// `ẑ = Σ_l e_{c_l}`.
    pub quantized: Vec<f64>,
    /// `r_0 = z, …, r_L`.
    pub residuals: Vec<Vec<f64>>,
}

/// The learnable codebooks, one `[N, d]` matrix per level.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet {
    pub levels: Vec<Tensor>,
}

impl CodebookSet {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        let first = levels.first().ok_or_else(|| Error::State("no codebook levels".into()))?;
        let (n, d) = (first.rows(), first.cols());
        for (l, cb) in levels.iter().enumerate() {
            if cb.shape() != [n, d] {
                return Err(dim_err(format!(
                    "level {l} has shape {:?}, expected [{n}, {d}]",
                    cb.shape()
                )));
            }
            if !cb.is_finite() {
                return Err(Error::Numeric(format!("level {l} holds non-finite codes")));
            }
        }
        Ok(CodebookSet { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn size(&self) -> usize {
        self.levels[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].cols()
    }

    pub fn quantize(&self, z: &[f64]) -> Result<QuantizationResult> {
        residual_quantize(z, &self.levels)
    }
}

/// Greedy residual quantization: at each level take the code with the
/// smallest squared distance to the current residual (lowest index wins a
/// tie) and subtract it.
pub fn residual_quantize(z: &[f64], levels: &[Tensor]) -> Result<QuantizationResult> {
    let mut residual = z.to_vec();
    let mut quantized = vec![0.0; z.len()];
    let mut codes = Vec::with_capacity(levels.len());
    let mut residuals = Vec::with_capacity(levels.len() + 1);
    residuals.push(residual.clone());
    for (l, cb) in levels.iter().enumerate() {
        if cb.is_empty() {
            return Err(Error::State(format!("codebook level {l} is empty")));
        }
        if cb.cols() != z.len() {
            return Err(dim_err(format!(
                "latent has {} dims, level {l} codes have {}",
                z.len(),
                cb.cols()
            )));
        }
        let (c, _) = cluster::nearest(&residual, cb);
        let e = cb.row(c);
        for ((r, q), x) in residual.iter_mut().zip(quantized.iter_mut()).zip(e) {
            *r -= x;
            *q += x;
        }
        codes.push(c);
        residuals.push(residual.clone());
    }
    Ok(QuantizationResult {
        codes,
        quantized,
        residuals,
    })
}

/// `z + sg[ẑ − z]`: forward value `ẑ`, gradient passed to `z` unchanged.
pub fn straight_through(tape: &mut Tape, z: Var, zhat: Var) -> Result<Var> {
    let diff = tape.sub(zhat, z)?;
    let frozen = tape.stop_gradient(diff);
    tape.add(z, frozen)
}

/// Value of the semantic loss for one item from its quantization result:
/// `‖s − ŝ‖² + Σ_l (‖r_{l−1} − e_{c_l}‖² + μ‖r_{l−1} − e_{c_l}‖²)`. Since
/// `r_{l−1} − e_{c_l} = r_l`, both codebook terms reduce to `‖r_l‖²`.
pub fn semantic_loss(s: &[f64], s_hat: &[f64], result: &QuantizationResult, mu: f64) -> Result<f64> {
    if mu < 0.0 {
        return Err(param_err(format!("mu must be nonnegative, got {mu}")));
    }
    if s.len() != s_hat.len() {
        return Err(dim_err(format!(
            "semantic vector has {} dims, reconstruction {}",
            s.len(),
            s_hat.len()
        )));
    }
    let recon = squared_distance(s, s_hat);
    let rq: f64 = result.residuals[1..]
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>())
        .sum();
    Ok(recon + (1.0 + mu) * rq)
}

/// Tape nodes of one batched semantic-loss evaluation.
pub struct SemanticForward {
    pub z: Var,
    /// `Σ_l e_{c_l}` with gradient reaching the code rows.
    pub zhat: Var,
    pub recon: Var,
    pub rq: Var,
    /// `(recon + rq) / B`.
    pub loss: Var,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RqTokenizer {
    pub arch: TokenizerArch,
    pub semantic_dim: usize,
    pub store: ParamStore,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebooks: Vec<ParamId>,
}

impl RqTokenizer {
    pub fn new(arch: TokenizerArch, semantic_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        if semantic_dim == 0 {
            return Err(param_err("semantic_dim must be positive"));
        }
        let mut store = ParamStore::new();
        let mut enc_dims = vec![semantic_dim];
        enc_dims.extend(&arch.hidden);
        enc_dims.push(arch.latent_dim);
        let mut dec_dims = vec![arch.latent_dim];
        dec_dims.extend(arch.hidden.iter().rev());
        dec_dims.push(semantic_dim);
        let encoder = Mlp::new(&mut store, "encoder", &enc_dims, arch.activation, rng);
        let decoder = Mlp::new(&mut store, "decoder", &dec_dims, arch.activation, rng);
        let bound = 1.0 / (arch.codebook_size as f64);
        let codebooks = (0..arch.levels)
            .map(|l| {
                store.add(
                    &format!("codebook.{l}"),
                    rng.uniform_tensor(&[arch.codebook_size, arch.latent_dim], -bound, bound),
                )
            })
            .collect();
        Ok(RqTokenizer {
            arch,
            semantic_dim,
            store,
            encoder,
            decoder,
            codebooks,
        })
    }

    pub fn codebook_set(&self) -> CodebookSet {
        CodebookSet {
            levels: self.codebooks.iter().map(|&id| self.store.value(id).clone()).collect(),
        }
    }

    pub fn set_codebooks(&mut self, set: &CodebookSet) -> Result<()> {
        if set.num_levels() != self.arch.levels
            || set.size() != self.arch.codebook_size
            || set.dim() != self.arch.latent_dim
        {
            return Err(dim_err("codebook set does not match the architecture"));
        }
        for (&id, cb) in self.codebooks.iter().zip(&set.levels) {
            *self.store.value_mut(id) = cb.clone();
        }
        Ok(())
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.decoder.params()
    }

    /// Latents for a batch of semantic vectors `[B, d_s]`.
    pub fn encode(&self, semantic: &Tensor) -> Result<Tensor> {
        self.encoder.eval(&self.store, semantic)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.decoder.eval(&self.store, latent)
    }

    /// Quantize every row of `semantic`.
    pub fn quantize_all(&self, semantic: &Tensor) -> Result<Vec<QuantizationResult>> {
        let z = self.encode(semantic)?;
        let set = self.codebook_set();
        (0..z.rows()).map(|i| set.quantize(z.row(i))).collect()
    }

    pub fn codes_for(&self, semantic: &Tensor) -> Result<Vec<Vec<usize>>> {
        Ok(self.quantize_all(semantic)?.into_iter().map(|q| q.codes).collect())
    }

    /// Quantized embeddings `ẑ` for every row, `[B, d]`.
    pub fn quantized_embeddings(&self, semantic: &Tensor) -> Result<Tensor> {
        let q = self.quantize_all(semantic)?;
        let rows: Vec<Vec<f64>> = q.into_iter().map(|r| r.quantized).collect();
        Tensor::from_rows(&rows)
    }

    /// Batched semantic loss on the tape for fixed `codes` (one code list
    /// per row of `semantic`).
    ///
    /// Residuals fed to the loss are `r_{l−1} = z − sg[Σ_{k<l} e_{c_k}]`,
    /// so code embeddings are trained only by `‖sg[r_{l−1}] − e_{c_l}‖²`
    /// and the encoder by the commitment term and the reconstruction
    /// through the straight-through estimator.
    pub fn semantic_forward(
        &self,
        tape: &mut Tape,
        semantic: Var,
        codes: &[Vec<usize>],
        mu: f64,
    ) -> Result<SemanticForward> {
        if mu < 0.0 {
            return Err(param_err(format!("mu must be nonnegative, got {mu}")));
        }
        let z = self.encoder.forward(tape, &self.store, semantic)?;
        self.semantic_forward_latent(tape, semantic, z, codes, mu)
    }

    /// [`semantic_forward`](Self::semantic_forward) with the encoder output
    /// `z` already on the tape.
    pub fn semantic_forward_latent(
        &self,
        tape: &mut Tape,
        semantic: Var,
        z: Var,
        codes: &[Vec<usize>],
        mu: f64,
    ) -> Result<SemanticForward> {
        if mu < 0.0 {
            return Err(param_err(format!("mu must be nonnegative, got {mu}")));
        }
        let b = tape.value(semantic).rows();
        if codes.len() != b || tape.value(z).rows() != b {
            return Err(dim_err(format!("{} code lists for {b} rows", codes.len())));
        }
        if codes.iter().any(|c| c.len() != self.arch.levels) {
            return Err(dim_err(format!("code lists must have {} levels", self.arch.levels)));
        }
        let mut partial: Option<Var> = None;
        let mut rq_terms = Vec::with_capacity(self.arch.levels);
        for (l, &cb_id) in self.codebooks.iter().enumerate() {
            let idx: Vec<usize> = codes.iter().map(|c| c[l]).collect();
            let cb = tape.param(&self.store, cb_id);
            let e = tape.gather_rows(cb, &idx)?;
            let r_prev = match partial {
                None => z,
                Some(p) => {
                    let frozen = tape.stop_gradient(p);
                    tape.sub(z, frozen)?
                }
            };
            let r_frozen = tape.stop_gradient(r_prev);
            let codebook_term = tape.sub(r_frozen, e)?;
            let codebook_term = tape.sum_squares(codebook_term);
            let e_frozen = tape.stop_gradient(e);
            let commit = tape.sub(r_prev, e_frozen)?;
            let commit = tape.sum_squares(commit);
            let commit = tape.scale(commit, mu);
            rq_terms.push(tape.add(codebook_term, commit)?);
            partial = Some(match partial {
                None => e,
                Some(p) => tape.add(p, e)?,
            });
        }
        let zhat = partial.expect("at least one level");
        let st = straight_through(tape, z, zhat)?;
        let s_hat = self.decoder.forward(tape, &self.store, st)?;
        let diff = tape.sub(semantic, s_hat)?;
        let recon = tape.sum_squares(diff);
        let mut rq = rq_terms[0];
        for &t in &rq_terms[1..] {
            rq = tape.add(rq, t)?;
        }
        let total = tape.add(recon, rq)?;
        let loss = tape.scale(total, 1.0 / b as f64);
        Ok(SemanticForward {
            z,
            zhat,
            recon,
            rq,
            loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = TokenizerCheckpoint {
            magic: TOKENIZER_MAGIC.to_string(),
            version: TOKENIZER_FORMAT_VERSION,
            levels: self.arch.levels,
            codebook_size: self.arch.codebook_size,
            latent_dim: self.arch.latent_dim,
            tokenizer: self.clone(),
        };
        let text = serde_json::to_string(&ckpt)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: TokenizerCheckpoint = serde_json::from_str(&text)?;
        if ckpt.magic != TOKENIZER_MAGIC {
            return Err(Error::Format(format!("not a tokenizer checkpoint: {}", ckpt.magic)));
        }
        if ckpt.version != TOKENIZER_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "tokenizer checkpoint version {} unsupported",
                ckpt.version
            )));
        }
        let t = ckpt.tokenizer;
        if t.arch.levels != ckpt.levels
            || t.arch.codebook_size != ckpt.codebook_size
            || t.arch.latent_dim != ckpt.latent_dim
        {
            return Err(Error::Format("checkpoint header disagrees with payload".into()));
        }
        CodebookSet::new(t.codebook_set().levels)?;
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerCheckpoint {
    magic: String,
    version: u32,
    levels: usize,
    codebook_size: usize,
    latent_dim: usize,
    tokenizer: RqTokenizer,
}

/// Initialize codebooks from data: level 1 codes are K-means centroids of
/// the latents, level `l` codes are centroids of the level `l−1` residuals.
/// With fewer samples than codes, falls back to seeded Gaussian codes.
pub fn kmeans_init_codebooks(
    latents: &Tensor,
    levels: usize,
    codebook_size: usize,
    max_iter: usize,
    rng: &mut SeededRng,
) -> Result<CodebookSet> {
    let (n, d) = (latents.rows(), latents.cols());
    if n < codebook_size {
        warn!(
            "{n} latent samples for {codebook_size} codes: using Gaussian codebook initialization"
        );
        let mean_sq = latents.data().iter().map(|x| x * x).sum::<f64>() / latents.len() as f64;
        let std = mean_sq.sqrt().max(1e-3);
        let cbs = (0..levels)
            .map(|l| rng.normal_tensor(&[codebook_size, d], std / (l + 1) as f64))
            .collect();
        return CodebookSet::new(cbs);
    }
    let mut residual = latents.clone();
    let mut cbs = Vec::with_capacity(levels);
    for _ in 0..levels {
        let km = cluster::kmeans(&residual, codebook_size, max_iter, rng)?;
        for i in 0..n {
            let (c, _) = cluster::nearest(residual.row(i), &km.centroids);
            let code = km.centroids.row(c).to_vec();
            for (r, e) in residual.row_mut(i).iter_mut().zip(&code) {
                *r -= e;
            }
        }
        cbs.push(km.centroids);
    }
    CodebookSet::new(cbs)
}

/// Identifier of one catalog item.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Identifier {
    pub item: usize,
    pub codes: Vec<usize>,
    pub disambiguator: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifierAssignment {
    /// Indexed by catalog item.
    pub identifiers: Vec<Identifier>,
    /// Items whose code sequence is shared with another item.
    pub collided_items: usize,
    /// Largest number of items sharing one code sequence.
    pub max_group: usize,
}

impl IdentifierAssignment {
    pub fn collision_rate(&self) -> f64 {
        if self.identifiers.is_empty() {
            0.0
        } else {
            self.collided_items as f64 / self.identifiers.len() as f64
        }
    }

    pub fn levels(&self) -> usize {
        self.identifiers.first().map_or(0, |i| i.codes.len())
    }

    /// Number of disambiguator values in use (0 without collisions).
    pub fn num_disambiguators(&self) -> usize {
        if self.collided_items == 0 {
            0
        } else {
            self.max_group
        }
    }

    /// Write `item_id,c1,...,cL,suffix` rows.
    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["item_id".to_string()];
        header.extend((1..=self.levels()).map(|l| format!("c{l}")));
        header.push("suffix".into());
        w.write_record(&header)?;
        for id in &self.identifiers {
            let mut rec = vec![names[id.item].clone()];
            rec.extend(id.codes.iter().map(|c| c.to_string()));
            rec.push(id.disambiguator.map(|d| d.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, catalog: &crate::data::Catalog) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut per_item: Vec<Option<(Vec<usize>, Option<usize>)>> = vec![None; catalog.len()];
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |m: String| Error::Parse {
                line: line + 2,
                message: m,
            };
            let item = catalog
                .index_of(&rec[0])
                .ok_or_else(|| bad(format!("unknown item {}", &rec[0])))?;
            let n = rec.len();
            let codes = (1..n - 1)
                .map(|i| rec[i].parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(e.to_string()))?;
            let suffix = if rec[n - 1].is_empty() {
                None
            } else {
                Some(rec[n - 1].parse::<usize>().map_err(|e| bad(e.to_string()))?)
            };
            per_item[item] = Some((codes, suffix));
        }
        let mut identifiers = Vec::with_capacity(catalog.len());
        for (i, e) in per_item.into_iter().enumerate() {
            let (codes, disambiguator) =
                e.ok_or_else(|| Error::Data(format!("item {} has no identifier", catalog.name(i))))?;
            identifiers.push(Identifier {
                item: i,
                codes,
                disambiguator,
            });
        }
        let mut groups: BTreeMap<&[usize], usize> = BTreeMap::new();
        for id in &identifiers {
            *groups.entry(&id.codes).or_default() += 1;
        }
        let collided_items = groups.values().filter(|&&c| c > 1).sum();
        let max_group = groups.values().copied().max().unwrap_or(0);
        Ok(IdentifierAssignment {
            identifiers,
            collided_items,
            max_group,
        })
    }
}

/// Give every item its code sequence; items sharing all codes get suffixes
/// `0, 1, 2, …` in ascending item order.
pub fn assign_identifiers(codes: &[Vec<usize>]) -> IdentifierAssignment {
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for (item, c) in codes.iter().enumerate() {
        groups.entry(c.as_slice()).or_default().push(item);
    }
    let mut identifiers: Vec<Identifier> = codes
        .iter()
        .enumerate()
        .map(|(item, c)| Identifier {
            item,
            codes: c.clone(),
            disambiguator: None,
        })
        .collect();
    let mut collided_items = 0;
    let mut max_group = 0;
    for members in groups.values() {
        max_group = max_group.max(members.len());
        if members.len() > 1 {
            collided_items += members.len();
            for (k, &item) in members.iter().enumerate() {
                identifiers[item].disambiguator = Some(k);
            }
        }
    }
    IdentifierAssignment {
        identifiers,
        collided_items,
        max_group,
    }
}
