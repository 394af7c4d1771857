//! Item catalogs, embedding tables, interaction datasets and their text
//! formats.
//!
//! Embedding files:
//!
//! ```text
//! dim=<d> count=<n>
//! <item_id>\t<v1>,<v2>,...,<vd>
//! ```
//!
//! Interaction files hold one `user_id\titem_id\ttimestamp` event per line.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{data_err, Error, Result};
use crate::tensor::Tensor;

/// Order ids numerically when both are integers, otherwise lexically
/// (integers first).
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Dense indexing of item ids in ascending natural order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = ids.into_iter().map(Into::into).collect();
        names.sort_by(|a, b| natural_cmp(a, b));
        names.dedup();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Catalog { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// Item id → dense vector. Used for semantic (`s`) and CF (`h`) embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    values: Vec<f64>,
    index: HashMap<String, usize>,
}

pub type SemanticEmbeddingTable = EmbeddingTable;
pub type CfEmbeddingTable = EmbeddingTable;

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            ids: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Table whose rows follow `catalog` order.
    pub fn from_catalog(catalog: &Catalog, rows: &Tensor) -> Result<Self> {
        if rows.rows() != catalog.len() {
            return Err(data_err(format!(
                "{} rows for {} catalog items",
                rows.rows(),
                catalog.len()
            )));
        }
        let mut t = EmbeddingTable::new(rows.cols());
        for (i, name) in catalog.names().iter().enumerate() {
            t.insert(name, rows.row(i))?;
        }
        Ok(t)
    }

    pub fn insert(&mut self, id: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Format(format!(
                "item {id}: {} values, table dimension {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(bad) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("item {id}: non-finite value {bad}")));
        }
        match self.index.get(id) {
            Some(&row) => self.values[row * self.dim..(row + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(id.to_string(), self.ids.len());
                self.ids.push(id.to_string());
                self.values.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index
            .get(id)
            .map(|&r| &self.values[r * self.dim..(r + 1) * self.dim])
    }

    /// Rows for every catalog item, in catalog order. Errors name the
    /// items the table lacks.
    pub fn aligned(&self, catalog: &Catalog) -> Result<Tensor> {
        let mut missing = Vec::new();
        let mut data = Vec::with_capacity(catalog.len() * self.dim);
        for name in catalog.names() {
            match self.get(name) {
                Some(v) => data.extend_from_slice(v),
                None => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            let shown: Vec<_> = missing.iter().take(10).cloned().collect();
            return Err(data_err(format!(
                "{} catalog items missing from embedding table: {}{}",
                missing.len(),
                shown.join(", "),
                if missing.len() > 10 { ", ..." } else { "" }
            )));
        }
        Tensor::matrix(catalog.len(), self.dim, data)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("dim={} count={}\n", self.dim, self.len());
        for (i, id) in self.ids.iter().enumerate() {
            s.push_str(id);
            s.push('\t');
            for (j, v) in self.values[i * self.dim..(i + 1) * self.dim].iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let (dim, count) = parse_header(header)?;
        let mut table = EmbeddingTable::new(dim);
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: lineno,
                message: "expected `item_id<TAB>values`".into(),
            })?;
            let values = rest
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad number: {e}"),
                })?;
            if values.len() != dim {
                return Err(Error::Format(format!(
                    "line {lineno}: {} values but header says dim={dim}",
                    values.len()
                )));
            }
            if table.get(id).is_some() {
                return Err(Error::Format(format!("line {lineno}: duplicate item {id}")));
            }
            table.insert(id, &values)?;
        }
        if table.len() != count {
            return Err(Error::Format(format!(
                "header says count={count} but {} rows follow",
                table.len()
            )));
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = |m: &str| Error::Parse {
        line: 1,
        message: format!("header `{line}`: {m}"),
    };
    let mut dim = None;
    let mut count = None;
    for field in line.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        let v: usize = v.parse().map_err(|_| bad("value is not an integer"))?;
        match k {
            "dim" => dim = Some(v),
            "count" => count = Some(v),
            _ => return Err(bad("unknown key")),
        }
    }
    match (dim, count) {
        (Some(d), Some(c)) if d > 0 => Ok((d, c)),
        _ => Err(bad("need dim>0 and count")),
    }
}

/// One raw interaction event.
#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

pub fn parse_interactions(text: &str) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(u), Some(it), Some(ts), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                line: i + 1,
                message: "expected `user_id<TAB>item_id<TAB>timestamp`".into(),
            });
        };
        let timestamp = ts.trim().parse::<i64>().map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("bad timestamp `{ts}`: {e}"),
        })?;
        out.push(Interaction {
            user: u.to_string(),
            item: it.to_string(),
            timestamp,
        });
    }
    Ok(out)
}

pub fn interactions_to_text(events: &[Interaction]) -> String {
    let mut s = String::new();
    for e in events {
        writeln!(s, "{}\t{}\t{}", e.user, e.item, e.timestamp).unwrap();
    }
    s
}

/// A user's chronological item sequence (dense catalog indices).
#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<usize>,
}

impl UserSequence {
    /// Items before the validation target.
    pub fn train(&self) -> &[usize] {
        &self.items[..self.items.len() - 2]
    }

    pub fn validation_target(&self) -> usize {
        self.items[self.items.len() - 2]
    }

    pub fn test_target(&self) -> usize {
        self.items[self.items.len() - 1]
    }

    /// History used to predict the validation target.
    pub fn validation_history(&self) -> &[usize] {
        self.train()
    }

    /// History used to predict the test target.
    pub fn test_history(&self) -> &[usize] {
        &self.items[..self.items.len() - 1]
    }
}

/// Filtered interaction data with leave-one-out splits: per user the last
/// item is the test target, the second-to-last the validation target.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub catalog: Catalog,
    pub users: Vec<UserSequence>,
}

impl InteractionDataset {
    /// Sort per user by timestamp (ties keep input order), then drop users
    /// and items with fewer than `min_count` interactions until nothing
    /// changes. `min_count` is raised to 3 so every user keeps at least one
    /// training item next to the two held-out targets.
    pub fn from_interactions(events: &[Interaction], min_count: usize) -> Result<Self> {
        let min_count = min_count.max(3);
        let mut by_user: HashMap<&str, Vec<(i64, usize, &str)>> = HashMap::new();
        for (order, e) in events.iter().enumerate() {
            by_user
                .entry(e.user.as_str())
                .or_default()
                .push((e.timestamp, order, e.item.as_str()));
        }
        let mut seqs: Vec<(&str, Vec<&str>)> = by_user
            .into_iter()
            .map(|(u, mut evs)| {
                evs.sort_by_key(|&(t, o, _)| (t, o));
                (u, evs.into_iter().map(|(_, _, it)| it).collect())
            })
            .collect();
        loop {
            let mut item_counts: HashMap<&str, usize> = HashMap::new();
            for (_, s) in &seqs {
                for it in s {
                    *item_counts.entry(it).or_default() += 1;
                }
            }
            let before: usize = seqs.iter().map(|(_, s)| s.len()).sum();
            for (_, s) in seqs.iter_mut() {
                s.retain(|it| item_counts[it] >= min_count);
            }
            seqs.retain(|(_, s)| s.len() >= min_count);
            let after: usize = seqs.iter().map(|(_, s)| s.len()).sum();
            if after == before {
                break;
            }
        }
        if seqs.is_empty() {
            return Err(data_err(format!(
                "no interactions left after filtering users/items below {min_count}"
            )));
        }
        let catalog = Catalog::new(seqs.iter().flat_map(|(_, s)| s.iter().map(|x| x.to_string())));
        seqs.sort_by(|a, b| natural_cmp(a.0, b.0));
        let users = seqs
            .into_iter()
            .map(|(u, s)| UserSequence {
                user: u.to_string(),
                items: s.iter().map(|it| catalog.index_of(it).unwrap()).collect(),
            })
            .collect();
        Ok(InteractionDataset { catalog, users })
    }

    pub fn load(path: &Path, min_count: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_interactions(&parse_interactions(&text)?, min_count)
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    /// Events back in file form, one timestamp step per position.
    pub fn to_interactions(&self) -> Vec<Interaction> {
        let mut out = Vec::with_capacity(self.num_interactions());
        for u in &self.users {
            for (t, &it) in u.items.iter().enumerate() {
                out.push(Interaction {
                    user: u.user.clone(),
                    item: self.catalog.name(it).to_string(),
                    timestamp: t as i64,
                });
            }
        }
        out
    }

    /// Split summary rows: `(user, #train, validation item, test item)`.
    pub fn split_rows(&self) -> Vec<(String, usize, String, String)> {
        self.users
            .iter()
            .map(|u| {
                (
                    u.user.clone(),
                    u.train().len(),
                    self.catalog.name(u.validation_target()).to_string(),
                    self.catalog.name(u.test_target()).to_string(),
                )
            })
            .collect()
    }
}

/// Load and split an interaction file.
pub fn load_and_split(path: &Path, min_count: usize) -> Result<InteractionDataset> {
    InteractionDataset::load(path, min_count)
}
