//! Grammar container and its JSON file format.
//!
//! The on-disk schema is:
//!
//! ```json
//! {
//!   "symbols": [{"name": "Exp", "kind": "nonterminal"}, ...],
//!   "trees": [
//!     {
//!       "id": "beta_minus_r",
//!       "kind": "beta",
//!       "root": "Exp",
//!       "children": [{"symbol": "Sub", "children": [...]}],
//!       "foot": [0, 0],
//!       "slots": [[0, 1]],
//!       "param": {"min": 0.0, "max": 1.0}
//!     }, ...
//!   ],
//!   "start": "S"
//! }
//! ```
//!
//! `foot`, `slots`, and `param` are optional. Node labels resolve against
//! the symbol table, which is how terminals and nonterminals are told apart.

use super::{ElementaryTree, Node, NodeAddress, ParamRange, Symbol, SymbolKind, TagError, TreeKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// An immutable TAG: symbol table, elementary trees, and the start symbol.
/// Construct with [`Grammar::new`], which validates every invariant.
#[derive(Debug, Clone)]
pub struct Grammar {
    symbols: BTreeMap<String, SymbolKind>,
    trees: Vec<ElementaryTree>,
    index: BTreeMap<String, usize>,
    start: String,
    start_alphas: Vec<usize>,
    betas_by_root: BTreeMap<String, Vec<usize>>,
    lexemes_by_root: BTreeMap<String, Vec<usize>>,
}

impl Grammar {
    pub fn new(
        symbols: Vec<Symbol>,
        trees: Vec<ElementaryTree>,
        start: impl Into<String>,
    ) -> Result<Self, TagError> {
        let start = start.into();
        let mut table = BTreeMap::new();
        for sym in &symbols {
            if let Some(prev) = table.insert(sym.name.clone(), sym.kind) {
                if prev != sym.kind {
                    return Err(TagError::InvalidGrammar(format!(
                        "symbol `{}` declared both terminal and nonterminal",
                        sym.name
                    )));
                }
            }
        }
        let mut index = BTreeMap::new();
        for (i, tree) in trees.iter().enumerate() {
            if index.insert(tree.id.clone(), i).is_some() {
                return Err(TagError::InvalidGrammar(format!("duplicate tree id `{}`", tree.id)));
            }
        }
        let mut grammar = Grammar {
            symbols: table,
            trees,
            index,
            start,
            start_alphas: Vec::new(),
            betas_by_root: BTreeMap::new(),
            lexemes_by_root: BTreeMap::new(),
        };
        grammar.validate()?;
        for (i, tree) in grammar.trees.iter().enumerate() {
            match tree.kind {
                TreeKind::Alpha => {
                    if tree.root_label() == grammar.start {
                        grammar.start_alphas.push(i);
                    }
                    // Non-start alphas act as lexemes for matching slots.
                    grammar
                        .lexemes_by_root
                        .entry(tree.root_label().to_string())
                        .or_default()
                        .push(i);
                }
                TreeKind::Beta => {
                    grammar
                        .betas_by_root
                        .entry(tree.root_label().to_string())
                        .or_default()
                        .push(i);
                }
            }
        }
        Ok(grammar)
    }

    fn validate(&self) -> Result<(), TagError> {
        if self.symbols.get(&self.start) != Some(&SymbolKind::Nonterminal) {
            return Err(TagError::InvalidGrammar(format!(
                "start symbol `{}` is not a declared nonterminal",
                self.start
            )));
        }
        for tree in &self.trees {
            tree.validate()?;
            for (addr, node) in tree.root.walk() {
                match self.symbols.get(&node.symbol.name) {
                    None => return Err(TagError::UnknownSymbol(node.symbol.name.clone())),
                    Some(kind) if *kind != node.symbol.kind => {
                        return Err(TagError::InvalidGrammar(format!(
                            "tree `{}`: node {} uses `{}` with the wrong kind",
                            tree.id, addr, node.symbol.name
                        )));
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    pub fn start_symbol(&self) -> &str {
        &self.start
    }

    pub fn tree(&self, id: &str) -> Result<&ElementaryTree, TagError> {
        self.index
            .get(id)
            .map(|&i| &self.trees[i])
            .ok_or_else(|| TagError::UnknownTree(id.to_string()))
    }

    pub fn trees(&self) -> &[ElementaryTree] {
        &self.trees
    }

    pub fn symbol_kind(&self, name: &str) -> Option<SymbolKind> {
        self.symbols.get(name).copied()
    }

    /// Initial trees rooted at the start symbol; derivations begin here.
    pub fn start_alphas(&self) -> impl Iterator<Item = &ElementaryTree> {
        self.start_alphas.iter().map(move |&i| &self.trees[i])
    }

    pub fn betas_for(&self, label: &str) -> &[usize] {
        self.betas_by_root.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn lexemes_for(&self, label: &str) -> &[usize] {
        self.lexemes_by_root.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tree_by_index(&self, i: usize) -> &ElementaryTree {
        &self.trees[i]
    }

    pub fn betas(&self) -> impl Iterator<Item = &ElementaryTree> {
        self.trees.iter().filter(|t| t.kind == TreeKind::Beta)
    }

    pub fn to_file(&self) -> GrammarFile {
        GrammarFile {
            symbols: self
                .symbols
                .iter()
                .map(|(name, kind)| Symbol { name: name.clone(), kind: *kind })
                .collect(),
            trees: self.trees.iter().map(TreeSpec::from_tree).collect(),
            start: self.start.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("grammar serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, TagError> {
        let file: GrammarFile = serde_json::from_str(text)
            .map_err(|e| TagError::InvalidGrammar(format!("grammar JSON: {e}")))?;
        file.build()
    }
}

/// Serialized grammar document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrammarFile {
    pub symbols: Vec<Symbol>,
    pub trees: Vec<TreeSpec>,
    pub start: String,
}

impl GrammarFile {
    pub fn build(self) -> Result<Grammar, TagError> {
        let table: BTreeMap<String, SymbolKind> =
            self.symbols.iter().map(|s| (s.name.clone(), s.kind)).collect();
        let trees = self
            .trees
            .into_iter()
            .map(|spec| spec.into_tree(&table))
            .collect::<Result<Vec<_>, _>>()?;
        Grammar::new(self.symbols, trees, self.start)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeSpec {
    pub id: String,
    pub kind: TreeKind,
    pub root: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foot: Option<NodeAddress>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slots: Vec<NodeAddress>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<ParamRange>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSpec {
    pub symbol: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeSpec>,
}

impl NodeSpec {
    fn into_node(self, table: &BTreeMap<String, SymbolKind>) -> Result<Node, TagError> {
        let kind = *table
            .get(&self.symbol)
            .ok_or_else(|| TagError::UnknownSymbol(self.symbol.clone()))?;
        let children = self
            .children
            .into_iter()
            .map(|c| c.into_node(table))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Node::new(Symbol { name: self.symbol, kind }, children))
    }

    fn from_node(node: &Node) -> NodeSpec {
        NodeSpec {
            symbol: node.symbol.name.clone(),
            children: node.children.iter().map(NodeSpec::from_node).collect(),
        }
    }
}

impl TreeSpec {
    fn into_tree(self, table: &BTreeMap<String, SymbolKind>) -> Result<ElementaryTree, TagError> {
        let kind = *table
            .get(&self.root)
            .ok_or_else(|| TagError::UnknownSymbol(self.root.clone()))?;
        let children = self
            .children
            .into_iter()
            .map(|c| c.into_node(table))
            .collect::<Result<Vec<_>, _>>()?;
        let root = Node::new(Symbol { name: self.root, kind }, children);
        Ok(ElementaryTree {
            id: self.id,
            kind: self.kind,
            root,
            foot: self.foot,
            slots: self.slots,
            param: self.param,
        })
    }

    fn from_tree(tree: &ElementaryTree) -> TreeSpec {
        TreeSpec {
            id: tree.id.clone(),
            kind: tree.kind,
            root: tree.root.symbol.name.clone(),
            children: tree.root.children.iter().map(NodeSpec::from_node).collect(),
            foot: tree.foot.clone(),
            slots: tree.slots.clone(),
            param: tree.param,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_grammar_json() -> String {
        serde_json::json!({
            "symbols": [
                {"name": "S", "kind": "nonterminal"},
                {"name": "Exp", "kind": "nonterminal"},
                {"name": "Sub", "kind": "nonterminal"},
                {"name": "R", "kind": "nonterminal"},
                {"name": "x", "kind": "terminal"},
                {"name": "1.5", "kind": "terminal"}
            ],
            "trees": [
                {"id": "a0", "kind": "alpha", "root": "S",
                 "children": [{"symbol": "Exp", "children": [{"symbol": "x"}]}]},
                {"id": "b0", "kind": "beta", "root": "Exp",
                 "children": [{"symbol": "Sub", "children": [{"symbol": "Exp"}, {"symbol": "R"}]}],
                 "foot": [0, 0], "slots": [[0, 1]]},
                {"id": "l0", "kind": "alpha", "root": "R",
                 "children": [{"symbol": "1.5"}]}
            ],
            "start": "S"
        })
        .to_string()
    }

    #[test]
    fn grammar_roundtrip_is_stable() {
        let g = Grammar::from_json(&toy_grammar_json()).unwrap();
        let first = g.to_json();
        let second = Grammar::from_json(&first).unwrap().to_json();
        assert_eq!(first, second);
    }

    #[test]
    fn disjoint_symbol_spaces_enforced() {
        let mut json: serde_json::Value = serde_json::from_str(&toy_grammar_json()).unwrap();
        json["symbols"]
            .as_array_mut()
            .unwrap()
            .push(serde_json::json!({"name": "x", "kind": "nonterminal"}));
        let err = Grammar::from_json(&json.to_string()).unwrap_err();
        assert!(matches!(err, TagError::InvalidGrammar(_)), "{err}");
    }

    #[test]
    fn unknown_symbol_rejected() {
        let mut json: serde_json::Value = serde_json::from_str(&toy_grammar_json()).unwrap();
        json["trees"][0]["children"][0]["symbol"] = serde_json::json!("NoSuch");
        assert!(Grammar::from_json(&json.to_string()).is_err());
    }

    #[test]
    fn lookup_indexes() {
        let g = Grammar::from_json(&toy_grammar_json()).unwrap();
        assert_eq!(g.start_alphas().count(), 1);
        assert_eq!(g.betas_for("Exp").len(), 1);
        assert_eq!(g.lexemes_for("R").len(), 1);
        assert!(g.tree("nope").is_err());
    }
}
