use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::examples::TokenStream;
use super::vocab::TokenVocabulary;
use crate::autograd::{attend_one, Activation, ParamId, ParamStore, RatioMode, Segment, Tape, Var, LAYER_NORM_EPS};
use crate::error::{param_err, Error, Result};
use crate::nn::Linear;
use crate::rng::SeededRng;
use crate::tensor::{dot, Tensor};

const EMBEDDING_STD: f64 = 0.02;
const MODEL_MAGIC: &str = "letter-recommender";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Decoder-only attention network sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecommenderArch {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `width`.
    pub ffn_mult: usize,
}

impl Default for RecommenderArch {
    fn default() -> Self {
        RecommenderArch {
            layers: 2,
            width: 64,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

impl RecommenderArch {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(param_err("width, heads and ffn_mult must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(param_err(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Pre-norm causal transformer over identifier tokens with learned
/// positions and an output projection tied to the token embeddings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecommenderModel {
    pub arch: RecommenderArch,
    pub vocab: TokenVocabulary,
    pub max_positions: usize,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
}

/// Per-layer keys and values of already processed tokens.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for j in 0..x.len() {
        out[j] = gain[j] * ((x[j] - mean) * is) + bias[j];
    }
}

impl RecommenderModel {
    pub fn new(
        arch: RecommenderArch,
        vocab: TokenVocabulary,
        max_positions: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        arch.validate()?;
        if max_positions == 0 {
            return Err(param_err("max_positions must be positive"));
        }
        let d = arch.width;
        let mut store = ParamStore::new();
        let tok_emb = store.add("tok_emb", rng.normal_tensor(&[vocab.size(), d], EMBEDDING_STD));
        let pos_emb = store.add("pos_emb", rng.normal_tensor(&[max_positions, d], EMBEDDING_STD));
        let mut blocks = Vec::with_capacity(arch.layers);
        for i in 0..arch.layers {
            let p = format!("block{i}");
            blocks.push(Block {
                ln1_gain: store.add(&format!("{p}.ln1.gain"), Tensor::full(&[d], 1.0)),
                ln1_bias: store.add(&format!("{p}.ln1.bias"), Tensor::zeros(&[d])),
                query: Linear::new(&mut store, &format!("{p}.query"), d, d, rng),
                key: Linear::new(&mut store, &format!("{p}.key"), d, d, rng),
                value: Linear::new(&mut store, &format!("{p}.value"), d, d, rng),
                out: Linear::new(&mut store, &format!("{p}.out"), d, d, rng),
                ln2_gain: store.add(&format!("{p}.ln2.gain"), Tensor::full(&[d], 1.0)),
                ln2_bias: store.add(&format!("{p}.ln2.bias"), Tensor::zeros(&[d])),
                ffn_in: Linear::new(&mut store, &format!("{p}.ffn_in"), d, d * arch.ffn_mult, rng),
                ffn_out: Linear::new(&mut store, &format!("{p}.ffn_out"), d * arch.ffn_mult, d, rng),
            });
        }
        let lnf_gain = store.add("ln_final.gain", Tensor::full(&[d], 1.0));
        let lnf_bias = store.add("ln_final.bias", Tensor::zeros(&[d]));
        Ok(RecommenderModel {
            arch,
            vocab,
            max_positions,
            store,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain,
            lnf_bias,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let v = self.vocab_size();
        match tokens.iter().find(|&&t| t >= v) {
            Some(t) => Err(Error::Data(format!("token {t} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    fn check_length(&self, len: usize) -> Result<()> {
        if len > self.max_positions {
            return Err(Error::Data(format!(
                "sequence of {len} tokens exceeds the model's {} positions",
                self.max_positions
            )));
        }
        Ok(())
    }

    /// Final-norm hidden states of packed sequences; positions restart at
    /// every segment, from `offsets[i]` (or 0) for segment `i`.
    pub fn hidden(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        segments: &[Segment],
        offsets: Option<&[usize]>,
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        let mut positions = Vec::with_capacity(tokens.len());
        for (i, s) in segments.iter().enumerate() {
            let o = offsets.map_or(0, |o| o[i]);
            self.check_length(o + s.len)?;
            positions.extend(o..o + s.len);
        }
        if positions.len() != tokens.len() {
            return Err(Error::Dimension(format!(
                "segments cover {} of {} tokens",
                positions.len(),
                tokens.len()
            )));
        }
        let st = &self.store;
        let emb = tape.param(st, self.tok_emb);
        let pos = tape.param(st, self.pos_emb);
        let te = tape.gather_rows(emb, tokens)?;
        let pe = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        for b in &self.blocks {
            let g = tape.param(st, b.ln1_gain);
            let bb = tape.param(st, b.ln1_bias);
            let h = tape.layer_norm(x, g, bb)?;
            let q = b.query.forward(tape, st, h)?;
            let k = b.key.forward(tape, st, h)?;
            let v = b.value.forward(tape, st, h)?;
            let a = tape.causal_attention(q, k, v, segments, self.arch.heads)?;
            let o = b.out.forward(tape, st, a)?;
            x = tape.add(x, o)?;
            let g = tape.param(st, b.ln2_gain);
            let bb = tape.param(st, b.ln2_bias);
            let h = tape.layer_norm(x, g, bb)?;
            let f = b.ffn_in.forward(tape, st, h)?;
            let f = tape.activation(f, Activation::Silu);
            let f = b.ffn_out.forward(tape, st, f)?;
            x = tape.add(x, f)?;
        }
        let g = tape.param(st, self.lnf_gain);
        let bb = tape.param(st, self.lnf_bias);
        tape.layer_norm(x, g, bb)
    }

    /// Vocabulary logits `[rows.len(), |V|]` at the chosen hidden rows.
    pub fn logits_at(&self, tape: &mut Tape, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(hidden, rows)?;
        let emb = tape.param(&self.store, self.tok_emb);
        tape.matmul_t(h, emb)
    }

    /// Logits at every position of one sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        let mut tape = Tape::new();
        let seg = [Segment {
            start: 0,
            len: tokens.len(),
        }];
        let h = self.hidden(&mut tape, tokens, &seg, None)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let l = self.logits_at(&mut tape, h, &rows)?;
        Ok(tape.value(l).clone())
    }

    /// Summed ranking-guided generation loss of a batch of streams divided
    /// by the number of examples they hold.
    pub fn batch_loss(&self, tape: &mut Tape, streams: &[TokenStream], tau: f64) -> Result<Var> {
        self.batch_loss_at(tape, streams, None, tau)
    }

    /// [`Self::batch_loss`] with stream `i` placed at position `offsets[i]`.
    pub fn batch_loss_at(
        &self,
        tape: &mut Tape,
        streams: &[TokenStream],
        offsets: Option<&[usize]>,
        tau: f64,
    ) -> Result<Var> {
        if offsets.is_some_and(|o| o.len() != streams.len()) {
            return Err(Error::Dimension("one offset per stream expected".into()));
        }
        let mut tokens = Vec::new();
        let mut segments = Vec::with_capacity(streams.len());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut examples = 0;
        for s in streams {
            let start = tokens.len();
            segments.push(Segment {
                start,
                len: s.tokens.len(),
            });
            tokens.extend_from_slice(&s.tokens);
            rows.extend(s.predict_rows.iter().map(|r| r + start));
            targets.extend_from_slice(&s.targets);
            examples += s.examples;
        }
        if examples == 0 {
            return Err(Error::Data("batch holds no examples".into()));
        }
        let h = self.hidden(tape, &tokens, &segments, offsets)?;
        let logits = self.logits_at(tape, h, &rows)?;
        let per_token = tape.cross_entropy_rows(logits, &targets, None, tau, RatioMode::NegLog)?;
        let total = tape.sum(per_token);
        Ok(tape.scale(total, 1.0 / examples as f64))
    }

    /// Run `tokens` through the network without a tape, appending their keys
    /// and values to `cache`. Attention also covers the rows of `base`, which
    /// precede `cache` in the sequence. Returns the final-norm hidden state of
    /// the last token.
    pub fn extend_cache(&self, base: Option<&KvCache>, cache: &mut KvCache, tokens: &[usize]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let offset = base.map_or(0, |b| b.len);
        self.check_length(offset + cache.len + tokens.len())?;
        if tokens.is_empty() {
            return Err(Error::Data("no tokens to process".into()));
        }
        let d = self.arch.width;
        let st = &self.store;
        if cache.keys.len() != self.blocks.len() {
            cache.keys = vec![Vec::new(); self.blocks.len()];
            cache.values = vec![Vec::new(); self.blocks.len()];
        }
        let ffn = d * self.arch.ffn_mult;
        let (mut x, mut h, mut q, mut k, mut v, mut a, mut o) =
            (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut f = vec![0.0; ffn];
        for &tok in tokens {
            let p = offset + cache.len;
            let te = st.value(self.tok_emb).row(tok);
            let pe = st.value(self.pos_emb).row(p);
            for j in 0..d {
                x[j] = te[j] + pe[j];
            }
            for (l, b) in self.blocks.iter().enumerate() {
                layer_norm_row(&x, st.value(b.ln1_gain).data(), st.value(b.ln1_bias).data(), &mut h);
                b.query.eval_row(st, &h, &mut q);
                b.key.eval_row(st, &h, &mut k);
                b.value.eval_row(st, &h, &mut v);
                cache.keys[l].extend_from_slice(&k);
                cache.values[l].extend_from_slice(&v);
                let (kc, vc): (Vec<&[f64]>, Vec<&[f64]>) = match base {
                    Some(bc) => (
                        vec![&bc.keys[l], &cache.keys[l]],
                        vec![&bc.values[l], &cache.values[l]],
                    ),
                    None => (vec![&cache.keys[l]], vec![&cache.values[l]]),
                };
                attend_one(&q, &kc, &vc, d, self.arch.heads, &mut a);
                b.out.eval_row(st, &a, &mut o);
                for j in 0..d {
                    x[j] += o[j];
                }
                layer_norm_row(&x, st.value(b.ln2_gain).data(), st.value(b.ln2_bias).data(), &mut h);
                b.ffn_in.eval_row(st, &h, &mut f);
                for fj in f.iter_mut() {
                    *fj = Activation::Silu.apply(*fj);
                }
                b.ffn_out.eval_row(st, &f, &mut o);
                for j in 0..d {
                    x[j] += o[j];
                }
            }
            cache.len += 1;
        }
        layer_norm_row(&x, st.value(self.lnf_gain).data(), st.value(self.lnf_bias).data(), &mut h);
        Ok(h)
    }

    /// Vocabulary logits for one final-norm hidden state.
    pub fn logits_from_hidden(&self, hidden: &[f64]) -> Vec<f64> {
        let emb = self.store.value(self.tok_emb);
        (0..emb.rows()).map(|t| dot(emb.row(t), hidden)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = ModelCheckpoint {
            magic: MODEL_MAGIC.into(),
            version: MODEL_FORMAT_VERSION,
            vocab_size: self.vocab_size(),
            model: self.clone(),
        };
        fs::write(path, serde_json::to_string(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: ModelCheckpoint = serde_json::from_str(&text)?;
        if ckpt.magic != MODEL_MAGIC {
            return Err(Error::Format(format!("not a recommender checkpoint: {}", ckpt.magic)));
        }
        if ckpt.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "recommender checkpoint version {} unsupported",
                ckpt.version
            )));
        }
        let m = ckpt.model;
        m.arch.validate()?;
        let emb = m.store.value(m.tok_emb);
        if m.vocab_size() != ckpt.vocab_size || emb.rows() != ckpt.vocab_size || emb.cols() != m.arch.width {
            return Err(Error::Format("checkpoint header disagrees with payload".into()));
        }
        if !m.store.all_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite weights".into()));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    magic: String,
    version: u32,
    vocab_size: usize,
    model: RecommenderModel,
}
