//! Derivation trees and their execution.
//!
//! A derivation node names an elementary tree, the address it adjoined at
//! (within its parent's elementary tree), its own child adjunctions, and
//! the lexemes bound to its substitution slots. The root node is an α-tree
//! rooted at the start symbol; every other node is a β-tree.
//!
//! Serialized form mirrors the struct fields:
//!
//! ```json
//! {"root": {"tree": "alpha_process", "at": [],
//!           "adjunctions": [{"tree": "ext5_con_mul", "at": [2, 0], ...}],
//!           "lexemes": [{"at": [0, 1, 0], "lexeme": "ext5_lex_R", "value": 0.42}]}}
//! ```

use super::{
    adjoin_tree, substitute_valued, DerivedTree, ElementaryTree, Grammar, Node, NodeAddress, Symbol,
    TagError, TreeKind,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Binding of a lexeme (a childless α-tree in the derivation) to one of the
/// host elementary tree's substitution slots. `value` is present exactly
/// when the lexeme is parameterized; it is part of the genotype and is
/// updated by Gaussian mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexemeBinding {
    pub at: NodeAddress,
    pub lexeme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivationNode {
    pub tree: String,
    /// Host address within the parent's elementary tree; empty at the root.
    #[serde(default)]
    pub at: NodeAddress,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adjunctions: Vec<DerivationNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lexemes: Vec<LexemeBinding>,
}

impl DerivationNode {
    pub fn bare(tree: impl Into<String>) -> Self {
        DerivationNode {
            tree: tree.into(),
            at: NodeAddress::root(),
            adjunctions: Vec::new(),
            lexemes: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.adjunctions.iter().map(DerivationNode::node_count).sum::<usize>()
    }

    pub fn at_path(&self, path: &[usize]) -> Option<&DerivationNode> {
        let mut node = self;
        for &i in path {
            node = node.adjunctions.get(i)?;
        }
        Some(node)
    }

    pub fn at_path_mut(&mut self, path: &[usize]) -> Option<&mut DerivationNode> {
        let mut node = self;
        for &i in path {
            node = node.adjunctions.get_mut(i)?;
        }
        Some(node)
    }

    /// Pre-order list of (path, node) pairs.
    pub fn walk(&self) -> Vec<(Vec<usize>, &DerivationNode)> {
        let mut out = Vec::new();
        fn rec<'a>(node: &'a DerivationNode, path: Vec<usize>, out: &mut Vec<(Vec<usize>, &'a DerivationNode)>) {
            out.push((path.clone(), node));
            for (i, child) in node.adjunctions.iter().enumerate() {
                let mut p = path.clone();
                p.push(i);
                rec(child, p, out);
            }
        }
        rec(self, Vec::new(), &mut out);
        out
    }
}

/// The genotype: a record of which elementary trees composed where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivationTree {
    pub root: DerivationNode,
}

impl DerivationTree {
    pub fn bare(alpha_id: impl Into<String>) -> Self {
        DerivationTree { root: DerivationNode::bare(alpha_id) }
    }

    /// Number of derivation nodes (root plus adjunctions); the individual
    /// size measure bounded by `minsize`/`maxsize`.
    pub fn size(&self) -> usize {
        self.root.node_count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("derivation serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, TagError> {
        serde_json::from_str(text).map_err(|e| TagError::InvalidDerivation(format!("derivation JSON: {e}")))
    }

    /// Checks every structural invariant against `grammar`: the root is a
    /// start-α, every other node a β adjoined at a valid open interior
    /// address, lexeme bindings fill distinct slots with compatible lexemes,
    /// and parameterized lexemes carry values within their ranges.
    pub fn validate(&self, grammar: &Grammar) -> Result<(), TagError> {
        let root_tree = grammar.tree(&self.root.tree)?;
        if root_tree.kind != TreeKind::Alpha || root_tree.root_label() != grammar.start_symbol() {
            return Err(TagError::InvalidDerivation(format!(
                "root `{}` is not an initial tree labeled with the start symbol",
                self.root.tree
            )));
        }
        if !self.root.at.is_root() {
            return Err(TagError::InvalidDerivation("root node must have an empty address".into()));
        }
        validate_node(&self.root, grammar)
    }
}

fn validate_node(node: &DerivationNode, grammar: &Grammar) -> Result<(), TagError> {
    let elem = grammar.tree(&node.tree)?;
    let interior: Vec<(NodeAddress, Symbol)> = elem.interior_addresses();
    let mut seen = Vec::new();
    for child in &node.adjunctions {
        let child_tree = grammar.tree(&child.tree)?;
        if child_tree.kind != TreeKind::Beta {
            return Err(TagError::InvalidDerivation(format!(
                "`{}` adjoined below `{}` is not an auxiliary tree",
                child.tree, node.tree
            )));
        }
        let label = interior
            .iter()
            .find(|(a, _)| *a == child.at)
            .map(|(_, s)| s.name.clone())
            .ok_or_else(|| TagError::Address { at: child.at.clone() })?;
        if label != child_tree.root_label() {
            return Err(TagError::Compatibility {
                at: child.at.clone(),
                host: label,
                tree: child_tree.root_label().to_string(),
            });
        }
        if seen.contains(&child.at) {
            return Err(TagError::InvalidDerivation(format!(
                "two adjunctions at address {} of `{}`",
                child.at, node.tree
            )));
        }
        seen.push(child.at.clone());
        validate_node(child, grammar)?;
    }
    let mut bound = Vec::new();
    for binding in &node.lexemes {
        if !elem.slots.contains(&binding.at) {
            return Err(TagError::InvalidDerivation(format!(
                "`{}` binds a lexeme at {}, which is not a slot",
                node.tree, binding.at
            )));
        }
        if bound.contains(&binding.at) {
            return Err(TagError::InvalidDerivation(format!(
                "slot {} of `{}` bound twice",
                binding.at, node.tree
            )));
        }
        bound.push(binding.at.clone());
        let lexeme = grammar.tree(&binding.lexeme)?;
        if lexeme.kind != TreeKind::Alpha {
            return Err(TagError::InvalidDerivation(format!("lexeme `{}` is not an initial tree", binding.lexeme)));
        }
        let slot_label = elem.slot_label(&binding.at).unwrap_or_default();
        if slot_label != lexeme.root_label() {
            return Err(TagError::Compatibility {
                at: binding.at.clone(),
                host: slot_label.to_string(),
                tree: lexeme.root_label().to_string(),
            });
        }
        match (&lexeme.param, binding.value) {
            (Some(range), Some(v)) => {
                if !(range.min..=range.max).contains(&v) {
                    return Err(TagError::InvalidDerivation(format!(
                        "lexeme value {v} outside [{}, {}]",
                        range.min, range.max
                    )));
                }
            }
            (Some(_), None) => {
                return Err(TagError::InvalidDerivation(format!(
                    "parameterized lexeme `{}` bound without a value",
                    binding.lexeme
                )));
            }
            (None, Some(_)) => {
                return Err(TagError::InvalidDerivation(format!(
                    "lexeme `{}` is not parameterized but carries a value",
                    binding.lexeme
                )));
            }
            (None, None) => {}
        }
    }
    Ok(())
}

/// Executes a derivation: every node's lexemes substitute into its
/// elementary tree, child auxiliaries derive recursively and adjoin
/// deepest-address-first (so shallower host addresses stay valid), and the
/// finished tree is returned. Deterministic: the same derivation always
/// produces an identical derived tree.
///
/// An unbound slot anywhere yields [`TagError::IncompleteDerivation`];
/// callers treat that as an invalid individual rather than a fatal error.
pub fn derive(d: &DerivationTree, grammar: &Grammar) -> Result<DerivedTree, TagError> {
    d.validate(grammar)?;
    let (node, _) = derive_node(&d.root, grammar)?;
    Ok(DerivedTree { root: node })
}

/// Returns the derived tree for one derivation node and the position its
/// foot ended up at (None for α nodes).
fn derive_node(node: &DerivationNode, grammar: &Grammar) -> Result<(Node, Option<NodeAddress>), TagError> {
    let elem = grammar.tree(&node.tree)?;
    let mut tree = elem.root.clone();
    let mut foot = elem.foot.clone();

    for slot in &elem.slots {
        let binding = node.lexemes.iter().find(|b| b.at == *slot).ok_or_else(|| {
            TagError::IncompleteDerivation { tree: node.tree.clone(), at: slot.clone() }
        })?;
        let lexeme = grammar.tree(&binding.lexeme)?;
        tree = substitute_valued(&tree, lexeme, slot, binding.value)?;
    }

    // Deepest-first keeps every remaining elementary-tree address valid:
    // adjoining at an address only moves nodes strictly below it.
    let mut order: Vec<&DerivationNode> = node.adjunctions.iter().collect();
    order.sort_by(|a, b| b.at.depth().cmp(&a.at.depth()).then_with(|| b.at.cmp(&a.at)));

    for child in order {
        let child_elem = grammar.tree(&child.tree)?;
        let (aux, aux_foot) = derive_node(child, grammar)?;
        let aux_foot = aux_foot.ok_or_else(|| {
            TagError::InvalidDerivation(format!("adjoined tree `{}` lost its foot", child.tree))
        })?;
        tree = adjoin_tree(&tree, &aux, &aux_foot, &child.at, child_elem.root_label())?;
        if let Some(f) = &foot {
            if child.at.is_strict_prefix_of(f) {
                foot = Some(child.at.splice(&aux_foot, f));
            }
        }
    }
    Ok((tree, foot))
}

/// An adjoinable position: the derivation node (by path), the address in
/// its elementary tree, and the label there.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenAddress {
    pub node_path: Vec<usize>,
    pub address: NodeAddress,
    pub symbol: Symbol,
}

/// All interior addresses of each derivation node's elementary tree that no
/// child adjunction occupies yet.
pub fn open_addresses(d: &DerivationTree, grammar: &Grammar) -> Result<Vec<OpenAddress>, TagError> {
    open_addresses_from(&d.root, grammar)
}

/// Like [`open_addresses`], scoped to the subtree rooted at `node`; paths
/// are relative to it.
pub fn open_addresses_from(node: &DerivationNode, grammar: &Grammar) -> Result<Vec<OpenAddress>, TagError> {
    let mut out = Vec::new();
    for (path, node) in node.walk() {
        let elem = grammar.tree(&node.tree)?;
        for (address, symbol) in elem.interior_addresses() {
            if node.adjunctions.iter().any(|c| c.at == address) {
                continue;
            }
            out.push(OpenAddress { node_path: path.clone(), address, symbol });
        }
    }
    Ok(out)
}

/// Fills every slot of `node`'s elementary tree with a uniformly chosen
/// compatible lexeme; parameterized lexemes get a uniform draw from their
/// range.
pub fn fill_slots<R: Rng>(
    node: &mut DerivationNode,
    elem: &ElementaryTree,
    grammar: &Grammar,
    rng: &mut R,
) -> Result<(), TagError> {
    for slot in &elem.slots {
        let label = elem.slot_label(slot).unwrap_or_default();
        let candidates = grammar.lexemes_for(label);
        if candidates.is_empty() {
            return Err(TagError::InvalidGrammar(format!(
                "no lexeme for slot label `{label}` in `{}`",
                elem.id
            )));
        }
        let pick = candidates[rng.gen_range(0..candidates.len())];
        let lexeme = grammar.tree_by_index(pick);
        let value = lexeme.param.map(|range| rng.gen_range(range.min..=range.max));
        node.lexemes.push(LexemeBinding { at: slot.clone(), lexeme: lexeme.id.clone(), value });
    }
    Ok(())
}

/// Grows `d` by one randomly chosen adjunction: a uniform pick over all
/// (open address, compatible β-tree) pairs. Returns false when nothing can
/// be adjoined anywhere.
pub fn grow_random<R: Rng>(
    d: &mut DerivationTree,
    grammar: &Grammar,
    rng: &mut R,
) -> Result<bool, TagError> {
    grow_node_random(&mut d.root, grammar, rng)
}

/// Like [`grow_random`], scoped to the subtree rooted at `node`.
pub fn grow_node_random<R: Rng>(
    node: &mut DerivationNode,
    grammar: &Grammar,
    rng: &mut R,
) -> Result<bool, TagError> {
    let open = open_addresses_from(node, grammar)?;
    let mut options: Vec<(&OpenAddress, usize)> = Vec::new();
    for site in &open {
        for &beta in grammar.betas_for(&site.symbol.name) {
            options.push((site, beta));
        }
    }
    if options.is_empty() {
        return Ok(false);
    }
    let (site, beta_idx) = options[rng.gen_range(0..options.len())];
    let beta = grammar.tree_by_index(beta_idx);
    let mut child = DerivationNode::bare(&beta.id);
    child.at = site.address.clone();
    fill_slots(&mut child, beta, grammar, rng)?;
    let host = node
        .at_path_mut(&site.node_path)
        .ok_or_else(|| TagError::InvalidDerivation("stale derivation path".into()))?;
    host.adjunctions.push(child);
    Ok(true)
}

const GENERATION_RETRIES: usize = 32;

/// Draws a random derivation whose size (derivation node count) is uniform
/// in `size_range`, with every slot bound to a random compatible lexeme.
pub fn random_derivation<R: Rng>(
    grammar: &Grammar,
    size_range: (usize, usize),
    rng: &mut R,
) -> Result<DerivationTree, TagError> {
    let (min, max) = size_range;
    if min == 0 || max < min {
        return Err(TagError::Generation { min, max, retries: 0 });
    }
    let alphas: Vec<&ElementaryTree> = grammar.start_alphas().collect();
    if alphas.is_empty() {
        return Err(TagError::InvalidGrammar("grammar has no start-symbol α-tree".into()));
    }
    for _ in 0..GENERATION_RETRIES {
        let target = rng.gen_range(min..=max);
        let alpha = alphas[rng.gen_range(0..alphas.len())];
        let mut d = DerivationTree::bare(&alpha.id);
        fill_slots(&mut d.root, alpha, grammar, rng)?;
        let mut ok = true;
        while d.size() < target {
            if !grow_random(&mut d, grammar, rng)? {
                ok = false;
                break;
            }
        }
        if ok && d.size() == target {
            return Ok(d);
        }
    }
    Err(TagError::Generation { min, max, retries: GENERATION_RETRIES })
}
