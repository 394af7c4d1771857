use super::examples::{history_tokens, SequenceExample};
use super::model::RecommenderModel;
use crate::autograd::log_softmax_with_temperature;
use crate::error::{param_err, Error, Result};
use crate::tensor::Tensor;

/// `-sum_t log softmax(logits_t / tau)[targets_t]` over the rows of `logits`.
pub fn ranking_generation_loss(logits: &Tensor, targets: &[usize], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(param_err(format!("temperature must be positive, got {tau}")));
    }
    if logits.rows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let v = logits.cols();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Data(format!("target token {t} outside vocabulary of {v}")));
        }
        loss -= log_softmax_with_temperature(logits.row(r), tau)[t];
    }
    Ok(loss)
}

/// Loss of one example under `model`: teacher-forced over the target's
/// identifier tokens.
pub fn example_loss(
    model: &RecommenderModel,
    example: &SequenceExample,
    item_tokens: &[Vec<usize>],
    tau: f64,
) -> Result<f64> {
    let mut tokens = history_tokens(&example.history, item_tokens);
    let start = tokens.len() - 1;
    let y = &item_tokens[example.target];
    tokens.extend_from_slice(y);
    let logits = model.logits(&tokens[..tokens.len() - 1])?;
    let rows: Vec<usize> = (start..start + y.len()).collect();
    ranking_generation_loss(&logits.gather_rows(&rows), y, tau)
}

/// Weight each non-target token receives in the gradient of the tempered
/// loss: `exp(l_v / tau) / sum_{v' != target} exp(l_v' / tau)`.
///
/// The returned vector is indexed by token; the target entry is 0.
pub fn hard_negative_weight(logits: &[f64], target: usize, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(param_err(format!("temperature must be positive, got {tau}")));
    }
    if target >= logits.len() {
        return Err(Error::Data(format!(
            "target {target} outside {} logits",
            logits.len()
        )));
    }
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(v, _)| v != target)
        .fold(f64::NEG_INFINITY, |m, (_, &x)| m.max(x / tau));
    let mut w: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(v, &x)| if v == target { 0.0 } else { (x / tau - max).exp() })
        .collect();
    let z: f64 = w.iter().sum();
    if z > 0.0 {
        w.iter_mut().for_each(|x| *x /= z);
    }
    Ok(w)
}
