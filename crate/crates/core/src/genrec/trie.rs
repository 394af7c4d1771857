use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Node {
    /// Sorted by token.
    children: Vec<(usize, usize)>,
    item: Option<usize>,
    /// Smallest item id below this node, used for deterministic tie-breaks.
    min_item: usize,
}

/// Prefix tree over item token sequences.
#[derive(Clone, Debug)]
pub struct IdentifierTrie {
    nodes: Vec<Node>,
    leaves: usize,
}

pub const ROOT: usize = 0;

impl IdentifierTrie {
    /// `sequences[i]` is the token sequence of item `i`.
    pub fn build(sequences: &[Vec<usize>]) -> Result<Self> {
        let mut trie = IdentifierTrie {
            nodes: vec![Node {
                children: Vec::new(),
                item: None,
                min_item: usize::MAX,
            }],
            leaves: 0,
        };
        for (item, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Data(format!("item {item} has an empty identifier")));
            }
            let mut node = ROOT;
            for &tok in seq {
                trie.nodes[node].min_item = trie.nodes[node].min_item.min(item);
                if trie.nodes[node].item.is_some() {
                    return Err(Error::Data(format!(
                        "identifier of item {item} extends that of item {}",
                        trie.nodes[node].item.unwrap()
                    )));
                }
                node = match trie.nodes[node].children.binary_search_by_key(&tok, |c| c.0) {
                    Ok(k) => trie.nodes[node].children[k].1,
                    Err(k) => {
                        let id = trie.nodes.len();
                        trie.nodes.push(Node {
                            children: Vec::new(),
                            item: None,
                            min_item: item,
                        });
                        trie.nodes[node].children.insert(k, (tok, id));
                        id
                    }
                };
            }
            let leaf = &mut trie.nodes[node];
            if let Some(other) = leaf.item {
                return Err(Error::Data(format!("items {other} and {item} share an identifier")));
            }
            if !leaf.children.is_empty() {
                return Err(Error::Data(format!("identifier of item {item} is a prefix of another")));
            }
            leaf.item = Some(item);
            leaf.min_item = leaf.min_item.min(item);
            trie.leaves += 1;
        }
        Ok(trie)
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Node reached by `prefix`, if any identifier starts with it.
    pub fn walk(&self, prefix: &[usize]) -> Option<usize> {
        prefix.iter().try_fold(ROOT, |node, &tok| self.child(node, tok))
    }

    pub fn child(&self, node: usize, token: usize) -> Option<usize> {
        let ch = &self.nodes[node].children;
        ch.binary_search_by_key(&token, |c| c.0).ok().map(|k| ch[k].1)
    }

    /// `(token, child)` pairs in ascending token order.
    pub fn children(&self, node: usize) -> &[(usize, usize)] {
        &self.nodes[node].children
    }

    pub fn item_at(&self, node: usize) -> Option<usize> {
        self.nodes[node].item
    }

    pub fn min_item(&self, node: usize) -> usize {
        self.nodes[node].min_item
    }

    /// Tokens that extend `prefix` towards some identifier; empty when the
    /// prefix is not itself a valid partial identifier.
    pub fn valid_successors(&self, prefix: &[usize]) -> Vec<usize> {
        self.walk(prefix)
            .map(|n| self.nodes[n].children.iter().map(|c| c.0).collect())
            .unwrap_or_default()
    }

    /// Item whose full identifier is `tokens`.
    pub fn lookup(&self, tokens: &[usize]) -> Option<usize> {
        self.walk(tokens).and_then(|n| self.nodes[n].item)
    }
}
