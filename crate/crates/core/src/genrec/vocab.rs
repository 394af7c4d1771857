use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::tokenizer::{Identifier, IdentifierAssignment};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const END: usize = 2;

/// Token ids for identifiers: three specials, then one token per
/// `(level, code)` pair, then the disambiguation suffixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    pub levels: usize,
    pub codebook_size: usize,
    pub disambiguators: usize,
}

impl TokenVocabulary {
    pub fn new(levels: usize, codebook_size: usize, disambiguators: usize) -> Result<Self> {
        if levels == 0 || codebook_size == 0 {
            return Err(param_err("vocabulary needs at least one level and one code"));
        }
        Ok(TokenVocabulary {
            levels,
            codebook_size,
            disambiguators,
        })
    }

    pub fn for_assignment(assignment: &IdentifierAssignment, codebook_size: usize) -> Result<Self> {
        Self::new(assignment.levels(), codebook_size, assignment.num_disambiguators())
    }

    pub fn size(&self) -> usize {
        3 + self.levels * self.codebook_size + self.disambiguators
    }

    /// Token of code `code` at zero-based `level`.
    pub fn code_token(&self, level: usize, code: usize) -> Result<usize> {
        if level >= self.levels || code >= self.codebook_size {
            return Err(Error::Data(format!(
                "code {code} at level {level} outside a {}x{} vocabulary",
                self.levels, self.codebook_size
            )));
        }
        Ok(3 + level * self.codebook_size + code)
    }

    pub fn suffix_token(&self, d: usize) -> Result<usize> {
        if d >= self.disambiguators {
            return Err(Error::Data(format!(
                "suffix {d} outside {} disambiguators",
                self.disambiguators
            )));
        }
        Ok(3 + self.levels * self.codebook_size + d)
    }

    /// Human-readable form of a token, e.g. `<c2_17>` or `<d1>`.
    pub fn describe(&self, token: usize) -> String {
        let base = 3 + self.levels * self.codebook_size;
        match token {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            END => "<end>".into(),
            t if t < base => {
                let k = t - 3;
                format!("<c{}_{}>", k / self.codebook_size + 1, k % self.codebook_size)
            }
            t if t < self.size() => format!("<d{}>", t - base),
            t => format!("<invalid {t}>"),
        }
    }

    /// Codes, optional suffix, then `END`.
    pub fn tokens(&self, id: &Identifier) -> Result<Vec<usize>> {
        if id.codes.len() != self.levels {
            return Err(Error::Data(format!(
                "item {} has {} codes, vocabulary expects {}",
                id.item,
                id.codes.len(),
                self.levels
            )));
        }
        let mut out = Vec::with_capacity(self.levels + 2);
        for (l, &c) in id.codes.iter().enumerate() {
            out.push(self.code_token(l, c)?);
        }
        if let Some(d) = id.disambiguator {
            out.push(self.suffix_token(d)?);
        }
        out.push(END);
        Ok(out)
    }

    /// Token sequences for every item of an assignment, by item index.
    pub fn item_tokens(&self, assignment: &IdentifierAssignment) -> Result<Vec<Vec<usize>>> {
        assignment.identifiers.iter().map(|id| self.tokens(id)).collect()
    }

    /// Longest identifier in tokens, `END` included.
    pub fn max_item_len(&self) -> usize {
        self.levels + usize::from(self.disambiguators > 0) + 1
    }
}
