//! Tree-adjoining grammar (TAG) machinery.
//!
//! A grammar is a set of elementary trees over a shared symbol table:
//! initial trees (α) and auxiliary trees (β). A β-tree carries exactly one
//! foot node on its frontier, labeled like its root. Two composition
//! operations build derived trees:
//!
//! * [`adjoin`] — excises the subtree at an interior node whose label
//!   matches the β root, inserts the β-tree there, and identifies the
//!   excised subtree's root with the foot node. Node counts obey
//!   `|result| = |host| + |beta| - 1`.
//! * [`substitute`] — replaces an open frontier nonterminal (a substitution
//!   slot) with an initial tree whose root carries the same label.
//!
//! A [`DerivationTree`] records which elementary trees composed where; it is
//! the genotype evolved by the search. Executing it with [`derive`] yields
//! the derived tree (the phenotype). Substituted initial trees are
//! restricted to leaves of the derivation ("in-node" substitution), so a
//! derivation node is an elementary tree id, a host address, child
//! adjunctions, and a list of lexeme bindings for its slots.

mod derivation;
mod grammar;

pub use derivation::{
    derive, fill_slots, grow_node_random, grow_random, open_addresses, open_addresses_from,
    random_derivation, DerivationNode, DerivationTree, LexemeBinding, OpenAddress,
};
pub use grammar::{Grammar, GrammarFile};

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    Terminal,
    Nonterminal,
}

/// A grammar symbol. Terminal and nonterminal name spaces are disjoint
/// within one grammar; [`Grammar::validate`] enforces it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Symbol {
    pub name: String,
    pub kind: SymbolKind,
}

impl Symbol {
    pub fn terminal(name: impl Into<String>) -> Self {
        Symbol { name: name.into(), kind: SymbolKind::Terminal }
    }

    pub fn nonterminal(name: impl Into<String>) -> Self {
        Symbol { name: name.into(), kind: SymbolKind::Nonterminal }
    }

    pub fn is_nonterminal(&self) -> bool {
        self.kind == SymbolKind::Nonterminal
    }
}

/// Gorn-style node address: the sequence of child indices from the root.
/// The empty path denotes the root.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeAddress(pub Vec<usize>);

impl NodeAddress {
    pub fn root() -> Self {
        NodeAddress(Vec::new())
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child(&self, index: usize) -> Self {
        let mut path = self.0.clone();
        path.push(index);
        NodeAddress(path)
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    /// True if `self` is a strict prefix of `other`.
    pub fn is_strict_prefix_of(&self, other: &NodeAddress) -> bool {
        self.0.len() < other.0.len() && other.0[..self.0.len()] == self.0[..]
    }

    /// Splices `middle` between this prefix and the suffix of `other`,
    /// assuming `self` is a prefix of `other`. Used to track how paths move
    /// when material is adjoined above them.
    fn splice(&self, middle: &NodeAddress, other: &NodeAddress) -> NodeAddress {
        let mut path = self.0.clone();
        path.extend_from_slice(&middle.0);
        path.extend_from_slice(&other.0[self.0.len()..]);
        NodeAddress(path)
    }
}

impl fmt::Display for NodeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "ε");
        }
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", parts.join("."))
    }
}

/// One node of an elementary or derived tree. `payload` carries the numeric
/// value of a parameterized lexeme once substituted (it is never present in
/// elementary trees as written in a grammar file).
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub symbol: Symbol,
    pub payload: Option<f64>,
    pub children: Vec<Node>,
}

impl Node {
    pub fn new(symbol: Symbol, children: Vec<Node>) -> Self {
        Node { symbol, payload: None, children }
    }

    pub fn leaf(symbol: Symbol) -> Self {
        Node::new(symbol, Vec::new())
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(Node::node_count).sum::<usize>()
    }

    pub fn is_frontier(&self) -> bool {
        self.children.is_empty()
    }

    pub fn at(&self, address: &NodeAddress) -> Option<&Node> {
        let mut node = self;
        for &i in &address.0 {
            node = node.children.get(i)?;
        }
        Some(node)
    }

    fn at_mut(&mut self, address: &NodeAddress) -> Option<&mut Node> {
        let mut node = self;
        for &i in &address.0 {
            node = node.children.get_mut(i)?;
        }
        Some(node)
    }

    /// Pre-order traversal paired with addresses.
    pub fn walk(&self) -> Vec<(NodeAddress, &Node)> {
        let mut out = Vec::new();
        fn rec<'a>(node: &'a Node, addr: NodeAddress, out: &mut Vec<(NodeAddress, &'a Node)>) {
            out.push((addr.clone(), node));
            for (i, child) in node.children.iter().enumerate() {
                rec(child, addr.child(i), out);
            }
        }
        rec(self, NodeAddress::root(), &mut out);
        out
    }

    /// Frontier nodes labeled with nonterminals (unfilled slots and feet).
    pub fn frontier_nonterminals(&self) -> Vec<(NodeAddress, &Node)> {
        self.walk()
            .into_iter()
            .filter(|(_, n)| n.is_frontier() && n.symbol.is_nonterminal())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeKind {
    Alpha,
    Beta,
}

/// Uniform prior for the value carried by a parameterized lexeme. The value
/// is drawn once when the lexeme is bound and then evolves by Gaussian
/// mutation within the same bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub min: f64,
    pub max: f64,
}

impl ParamRange {
    /// Mutation prior mean: the midpoint of the range.
    pub fn mean(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// An elementary tree of a TAG: initial (α) or auxiliary (β).
#[derive(Debug, Clone, PartialEq)]
pub struct ElementaryTree {
    pub id: String,
    pub kind: TreeKind,
    pub root: Node,
    /// Foot node address, β-trees only.
    pub foot: Option<NodeAddress>,
    /// Open substitution slots: frontier nonterminals that accept lexemes.
    pub slots: Vec<NodeAddress>,
    /// Present for parameterized lexemes; the bound value attaches to the
    /// unique terminal leaf of the tree.
    pub param: Option<ParamRange>,
}

impl ElementaryTree {
    pub fn alpha(id: impl Into<String>, root: Node, slots: Vec<NodeAddress>) -> Self {
        ElementaryTree { id: id.into(), kind: TreeKind::Alpha, root, foot: None, slots, param: None }
    }

    pub fn beta(id: impl Into<String>, root: Node, foot: NodeAddress, slots: Vec<NodeAddress>) -> Self {
        ElementaryTree {
            id: id.into(),
            kind: TreeKind::Beta,
            root,
            foot: Some(foot),
            slots,
            param: None,
        }
    }

    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    pub fn root_label(&self) -> &str {
        &self.root.symbol.name
    }

    /// Addresses of interior nodes (the root counts as interior when it has
    /// children), with their labels. These are the adjoinable positions.
    pub fn interior_addresses(&self) -> Vec<(NodeAddress, Symbol)> {
        self.root
            .walk()
            .into_iter()
            .filter(|(_, n)| !n.is_frontier())
            .map(|(a, n)| (a, n.symbol.clone()))
            .collect()
    }

    /// The terminal leaf that receives the payload of a parameterized
    /// lexeme. Validation guarantees uniqueness when `param` is set.
    pub fn payload_leaf(&self) -> Option<NodeAddress> {
        if self.param.is_none() {
            return None;
        }
        self.root
            .walk()
            .into_iter()
            .find(|(_, n)| n.is_frontier() && !n.symbol.is_nonterminal())
            .map(|(a, _)| a)
    }

    pub fn slot_label(&self, slot: &NodeAddress) -> Option<&str> {
        self.root.at(slot).map(|n| n.symbol.name.as_str())
    }

    fn validate(&self) -> Result<(), TagError> {
        for (addr, node) in self.root.walk() {
            if !node.is_frontier() && !node.symbol.is_nonterminal() {
                return Err(TagError::InvalidGrammar(format!(
                    "tree `{}`: interior node {} is labeled with terminal `{}`",
                    self.id, addr, node.symbol.name
                )));
            }
            if node.payload.is_some() {
                return Err(TagError::InvalidGrammar(format!(
                    "tree `{}`: node {} carries a payload; payloads only appear in derived trees",
                    self.id, addr
                )));
            }
        }
        match (self.kind, &self.foot) {
            (TreeKind::Alpha, Some(_)) => {
                return Err(TagError::InvalidGrammar(format!(
                    "alpha tree `{}` must not have a foot node",
                    self.id
                )));
            }
            (TreeKind::Beta, None) => {
                return Err(TagError::InvalidGrammar(format!(
                    "beta tree `{}` must have a foot node",
                    self.id
                )));
            }
            (TreeKind::Beta, Some(foot)) => {
                let node = self.root.at(foot).ok_or_else(|| {
                    TagError::InvalidGrammar(format!("tree `{}`: foot address {} invalid", self.id, foot))
                })?;
                if !node.is_frontier() {
                    return Err(TagError::InvalidGrammar(format!(
                        "tree `{}`: foot node {} is not on the frontier",
                        self.id, foot
                    )));
                }
                if node.symbol.name != self.root.symbol.name {
                    return Err(TagError::InvalidGrammar(format!(
                        "tree `{}`: foot label `{}` differs from root label `{}`",
                        self.id, node.symbol.name, self.root.symbol.name
                    )));
                }
                if self.slots.contains(foot) {
                    return Err(TagError::InvalidGrammar(format!(
                        "tree `{}`: foot node {} cannot also be a substitution slot",
                        self.id, foot
                    )));
                }
            }
            (TreeKind::Alpha, None) => {}
        }
        for slot in &self.slots {
            let node = self.root.at(slot).ok_or_else(|| {
                TagError::InvalidGrammar(format!("tree `{}`: slot address {} invalid", self.id, slot))
            })?;
            if !node.is_frontier() || !node.symbol.is_nonterminal() {
                return Err(TagError::InvalidGrammar(format!(
                    "tree `{}`: slot {} must be a frontier nonterminal",
                    self.id, slot
                )));
            }
        }
        if self.param.is_some() {
            let terminals: Vec<_> = self
                .root
                .walk()
                .into_iter()
                .filter(|(_, n)| n.is_frontier() && !n.symbol.is_nonterminal())
                .collect();
            if terminals.len() != 1 {
                return Err(TagError::InvalidGrammar(format!(
                    "parameterized lexeme `{}` must have exactly one terminal leaf",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// A derived tree: the phenotype produced by executing a derivation.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedTree {
    pub root: Node,
}

impl DerivedTree {
    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    /// A completed tree has no frontier nonterminals left.
    pub fn is_complete(&self) -> bool {
        self.root.frontier_nonterminals().is_empty()
    }
}

#[derive(Debug, Error)]
pub enum TagError {
    #[error("incompatible labels at {at}: host node is `{host}`, tree root is `{tree}`")]
    Compatibility { at: NodeAddress, host: String, tree: String },
    #[error("address {at} does not resolve to an adjoinable node")]
    Address { at: NodeAddress },
    #[error("derivation is incomplete: slot {at} of `{tree}` has no lexeme")]
    IncompleteDerivation { tree: String, at: NodeAddress },
    #[error("unknown elementary tree `{0}`")]
    UnknownTree(String),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("invalid grammar: {0}")]
    InvalidGrammar(String),
    #[error("invalid derivation: {0}")]
    InvalidDerivation(String),
    #[error("no derivation of size in [{min}, {max}] found after {retries} attempts")]
    Generation { min: usize, max: usize, retries: usize },
}

/// Adjoins `beta` into `host` at `at`.
///
/// The subtree rooted at `at` is excised, `beta` takes its place, and the
/// excised subtree is identified with the foot node (the foot node
/// disappears, replaced by the excised root), so the node count of the
/// result is `|host| + |beta| - 1`.
pub fn adjoin(host: &Node, beta: &ElementaryTree, at: &NodeAddress) -> Result<Node, TagError> {
    let foot = beta
        .foot
        .clone()
        .ok_or_else(|| TagError::InvalidGrammar(format!("`{}` is not an auxiliary tree", beta.id)))?;
    adjoin_tree(host, &beta.root, &foot, at, beta.root_label())
}

pub(crate) fn adjoin_tree(
    host: &Node,
    aux: &Node,
    foot: &NodeAddress,
    at: &NodeAddress,
    aux_label: &str,
) -> Result<Node, TagError> {
    let target = host.at(at).ok_or_else(|| TagError::Address { at: at.clone() })?;
    if target.is_frontier() && !at.is_root() {
        return Err(TagError::Address { at: at.clone() });
    }
    if target.symbol.name != aux_label {
        return Err(TagError::Compatibility {
            at: at.clone(),
            host: target.symbol.name.clone(),
            tree: aux_label.to_string(),
        });
    }
    let excised = target.clone();
    let mut replacement = aux.clone();
    let foot_node = replacement
        .at_mut(foot)
        .ok_or_else(|| TagError::Address { at: foot.clone() })?;
    *foot_node = excised;
    let mut result = host.clone();
    let slot = result.at_mut(at).ok_or_else(|| TagError::Address { at: at.clone() })?;
    *slot = replacement;
    Ok(result)
}

/// Substitutes `lexeme` (an initial tree) into the frontier slot at `at`.
/// Node count of the result is `|host| + |lexeme| - 1`.
pub fn substitute(host: &Node, lexeme: &ElementaryTree, at: &NodeAddress) -> Result<Node, TagError> {
    substitute_valued(host, lexeme, at, None)
}

/// Like [`substitute`], attaching `value` to the lexeme's payload leaf.
/// Used for parameterized lexemes whose bound value is part of the genotype.
pub(crate) fn substitute_valued(
    host: &Node,
    lexeme: &ElementaryTree,
    at: &NodeAddress,
    value: Option<f64>,
) -> Result<Node, TagError> {
    if lexeme.kind != TreeKind::Alpha {
        return Err(TagError::InvalidGrammar(format!("`{}` is not an initial tree", lexeme.id)));
    }
    let target = host.at(at).ok_or_else(|| TagError::Address { at: at.clone() })?;
    if !target.is_frontier() || !target.symbol.is_nonterminal() {
        return Err(TagError::Compatibility {
            at: at.clone(),
            host: target.symbol.name.clone(),
            tree: lexeme.root_label().to_string(),
        });
    }
    if target.symbol.name != lexeme.root_label() {
        return Err(TagError::Compatibility {
            at: at.clone(),
            host: target.symbol.name.clone(),
            tree: lexeme.root_label().to_string(),
        });
    }
    let mut replacement = lexeme.root.clone();
    if let Some(v) = value {
        let leaf = lexeme
            .payload_leaf()
            .ok_or_else(|| TagError::InvalidGrammar(format!("`{}` has no payload leaf", lexeme.id)))?;
        if let Some(node) = replacement.at_mut(&leaf) {
            node.payload = Some(v);
        }
    }
    let mut result = host.clone();
    let slot = result.at_mut(at).ok_or_else(|| TagError::Address { at: at.clone() })?;
    *slot = replacement;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The worked host tree: S(Exp(Mul(Exp(B_Phy), Exp(mu_Phy)))), 7 nodes.
    fn host_alpha() -> ElementaryTree {
        let tree = Node::new(
            Symbol::nonterminal("S"),
            vec![Node::new(
                Symbol::nonterminal("Exp"),
                vec![Node::new(
                    Symbol::nonterminal("Mul"),
                    vec![
                        Node::new(Symbol::nonterminal("Exp"), vec![Node::leaf(Symbol::terminal("B_Phy"))]),
                        Node::new(Symbol::nonterminal("Exp"), vec![Node::leaf(Symbol::terminal("mu_Phy"))]),
                    ],
                )],
            )],
        );
        ElementaryTree::alpha("alpha_host", tree, vec![])
    }

    /// β-tree Exp(Sub(Exp*, R↓)), 4 nodes, foot at 0.0 and slot at 0.1.
    fn beta_minus_r() -> ElementaryTree {
        let tree = Node::new(
            Symbol::nonterminal("Exp"),
            vec![Node::new(
                Symbol::nonterminal("Sub"),
                vec![Node::leaf(Symbol::nonterminal("Exp")), Node::leaf(Symbol::nonterminal("R"))],
            )],
        );
        ElementaryTree::beta("beta_minus_r", tree, NodeAddress(vec![0, 0]), vec![NodeAddress(vec![0, 1])])
    }

    fn lexeme_value() -> ElementaryTree {
        let tree = Node::new(Symbol::nonterminal("R"), vec![Node::leaf(Symbol::terminal("1.5"))]);
        ElementaryTree::alpha("lex_1_5", tree, vec![])
    }

    #[test]
    fn adjoin_counts_and_shape() {
        let host = host_alpha();
        let beta = beta_minus_r();
        assert_eq!(host.node_count(), 7);
        assert_eq!(beta.node_count(), 4);
        // rightmost Exp: S -> Exp -> Mul -> second child
        let at = NodeAddress(vec![0, 0, 1]);
        let result = adjoin(&host.root, &beta, &at).unwrap();
        assert_eq!(result.node_count(), 10);
        // the excised Exp(mu_Phy) now sits at the foot position
        let reattached = result.at(&NodeAddress(vec![0, 0, 1, 0, 0])).unwrap();
        assert_eq!(reattached.symbol.name, "Exp");
        assert_eq!(reattached.children[0].symbol.name, "mu_Phy");
    }

    #[test]
    fn adjoin_label_mismatch_is_compatibility_error() {
        let host = host_alpha();
        let beta = beta_minus_r();
        // Mul node: label differs from the beta root "Exp"
        let err = adjoin(&host.root, &beta, &NodeAddress(vec![0, 0])).unwrap_err();
        assert!(matches!(err, TagError::Compatibility { .. }), "{err}");
    }

    #[test]
    fn adjoin_bad_address_is_address_error() {
        let host = host_alpha();
        let beta = beta_minus_r();
        let err = adjoin(&host.root, &beta, &NodeAddress(vec![4, 4])).unwrap_err();
        assert!(matches!(err, TagError::Address { .. }), "{err}");
    }

    #[test]
    fn substitute_counts_and_payloads() {
        let host = host_alpha();
        let beta = beta_minus_r();
        let adjoined = adjoin(&host.root, &beta, &NodeAddress(vec![0, 0, 1])).unwrap();
        let lex = lexeme_value();
        let slot = NodeAddress(vec![0, 0, 1, 0, 1]);
        let done = substitute(&adjoined, &lex, &slot).unwrap();
        assert_eq!(done.node_count(), 10 + 2 - 1);
        let leaf = done.at(&NodeAddress(vec![0, 0, 1, 0, 1, 0])).unwrap();
        assert_eq!(leaf.symbol.name, "1.5");
        assert!(DerivedTree { root: done }.is_complete());
    }

    #[test]
    fn substitute_single_node_lexeme_keeps_count() {
        let host = host_alpha();
        let beta = beta_minus_r();
        let adjoined = adjoin(&host.root, &beta, &NodeAddress(vec![0, 0, 1])).unwrap();
        let single = ElementaryTree::alpha("lex_single", Node::leaf(Symbol::nonterminal("R")), vec![]);
        let before = adjoined.node_count();
        let done = substitute(&adjoined, &single, &NodeAddress(vec![0, 0, 1, 0, 1])).unwrap();
        assert_eq!(done.node_count(), before);
    }

    #[test]
    fn substitute_non_slot_is_compatibility_error() {
        let host = host_alpha();
        let lex = lexeme_value();
        // interior address
        let err = substitute(&host.root, &lex, &NodeAddress(vec![0])).unwrap_err();
        assert!(matches!(err, TagError::Compatibility { .. }), "{err}");
        // terminal leaf
        let err = substitute(&host.root, &lex, &NodeAddress(vec![0, 0, 0, 0])).unwrap_err();
        assert!(matches!(err, TagError::Compatibility { .. }), "{err}");
    }

    #[test]
    fn beta_without_foot_rejected() {
        let bad = ElementaryTree {
            id: "bad".into(),
            kind: TreeKind::Beta,
            root: Node::new(Symbol::nonterminal("Exp"), vec![Node::leaf(Symbol::terminal("x"))]),
            foot: None,
            slots: vec![],
            param: None,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn foot_label_must_match_root() {
        let bad = ElementaryTree::beta(
            "bad",
            Node::new(Symbol::nonterminal("Exp"), vec![Node::leaf(Symbol::nonterminal("R"))]),
            NodeAddress(vec![0]),
            vec![],
        );
        assert!(bad.validate().is_err());
    }
}
