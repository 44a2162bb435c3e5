//! Prior knowledge as a TAG grammar.
//!
//! Three kinds of knowledge drive the search. The initial process equations
//! become one α-tree; the extension table becomes connector and extender
//! β-trees plus lexemes per extension point; parameter priors drive value
//! initialization and Gaussian mutation. Connector symbols (`<ext>c`) and
//! extender symbols (`<ext>e`) are distinct nonterminals, so connector
//! β-trees can never adjoin at extender nodes and vice versa, and the
//! initial process operator structure is only reachable through declared
//! extension points.
//!
//! Symbol scheme for a point `Ext5`:
//!
//! * `Ext5c` — connector site wrapping the annotated subtree in the α-tree;
//!   the root and foot label of connector β-trees.
//! * `Ext5e` — extender site above newly added operands; root and foot of
//!   extender β-trees.
//! * `Ext5x` — lexicon slot filled by one lexeme per allowed variable, plus
//!   a parameterized `R` lexeme drawn uniformly from [0, 1].

use crate::expr::{BinaryOp, Expr, UnaryOp};
use crate::process::{ATree, ParameterPrior, ProcessSpec, VariableInfo};
use crate::tag::{
    DerivedTree, ElementaryTree, Grammar, Node, NodeAddress, ParamRange, Symbol, SymbolKind, TagError,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const RIVER_KNOWLEDGE_JSON: &str = include_str!("../assets/river_knowledge.json");

/// The bundled river water-quality process and its revision knowledge.
pub fn river_knowledge() -> KnowledgeFile {
    serde_json::from_str(RIVER_KNOWLEDGE_JSON).expect("bundled knowledge file parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSiteSpec {
    pub id: String,
    #[serde(default)]
    pub at_path: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationSpec {
    pub lhs: String,
    pub rhs_sexpr: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extensions: Vec<ExtensionSiteSpec>,
}

/// One extension point: which variables may enter, which operators attach
/// new material to the initial process (connectors), and which operators
/// may grow that material further (extenders).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionPoint {
    pub id: String,
    pub variables: Vec<String>,
    pub connectors: Vec<String>,
    pub extenders: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeFile {
    pub equations: Vec<EquationSpec>,
    pub extension_table: Vec<ExtensionPoint>,
    pub priors: Vec<ParameterPrior>,
    pub variables: Vec<VariableInfo>,
}

impl KnowledgeFile {
    pub fn from_json(text: &str) -> Result<Self, KnowledgeError> {
        serde_json::from_str(text).map_err(|e| KnowledgeError::File(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("knowledge serialization")
    }
}

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("knowledge file: {0}")]
    File(String),
    #[error("unknown operator `{0}` in extension table")]
    UnknownOperator(String),
    #[error(transparent)]
    Tag(#[from] TagError),
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("derived tree is incomplete at `{0}`")]
    Incomplete(String),
    #[error("cannot resolve leaf `{0}`")]
    Unresolved(String),
    #[error("node `{symbol}` has {got} children, expected {expected}")]
    Arity { symbol: String, expected: usize, got: usize },
    #[error("derived tree shape: {0}")]
    Shape(String),
}

const BINARY_NODE_NAMES: [(&str, BinaryOp); 7] = [
    ("Add", BinaryOp::Add),
    ("Sub", BinaryOp::Sub),
    ("Mul", BinaryOp::Mul),
    ("Div", BinaryOp::Div),
    ("Min", BinaryOp::Min),
    ("Max", BinaryOp::Max),
    ("Pow", BinaryOp::Pow),
];

const UNARY_NODE_NAMES: [(&str, UnaryOp); 3] =
    [("Log", UnaryOp::Log), ("Exp", UnaryOp::Exp), ("Neg", UnaryOp::Neg)];

fn binary_node_name(op: BinaryOp) -> &'static str {
    BINARY_NODE_NAMES.iter().find(|(_, o)| *o == op).map(|(n, _)| *n).unwrap()
}

fn unary_node_name(op: UnaryOp) -> &'static str {
    UNARY_NODE_NAMES.iter().find(|(_, o)| *o == op).map(|(n, _)| *n).unwrap()
}

fn binary_by_table_name(name: &str) -> Option<BinaryOp> {
    match name {
        "+" => Some(BinaryOp::Add),
        "-" => Some(BinaryOp::Sub),
        "*" | "×" => Some(BinaryOp::Mul),
        "/" | "÷" => Some(BinaryOp::Div),
        _ => None,
    }
}

fn op_slug(name: &str) -> Option<&'static str> {
    match name {
        "+" => Some("add"),
        "-" => Some("sub"),
        "*" | "×" => Some("mul"),
        "/" | "÷" => Some("div"),
        "log" => Some("log"),
        "exp" => Some("exp"),
        _ => None,
    }
}

#[derive(Default)]
struct SymbolSet {
    table: BTreeMap<String, SymbolKind>,
}

impl SymbolSet {
    fn add(&mut self, name: &str, kind: SymbolKind) -> Result<Symbol, KnowledgeError> {
        match self.table.insert(name.to_string(), kind) {
            Some(prev) if prev != kind => Err(KnowledgeError::File(format!(
                "symbol `{name}` would be both terminal and nonterminal; rename the variable"
            ))),
            _ => Ok(Symbol { name: name.to_string(), kind }),
        }
    }

    fn nonterminal(&mut self, name: &str) -> Result<Symbol, KnowledgeError> {
        self.add(name, SymbolKind::Nonterminal)
    }

    fn terminal(&mut self, name: &str) -> Result<Symbol, KnowledgeError> {
        self.add(name, SymbolKind::Terminal)
    }

    fn into_symbols(self) -> Vec<Symbol> {
        self.table
            .into_iter()
            .map(|(name, kind)| Symbol { name, kind })
            .collect()
    }
}

fn encode_atree(tree: &ATree, syms: &mut SymbolSet) -> Result<Node, KnowledgeError> {
    Ok(match tree {
        ATree::Lit(v) => Node::leaf(syms.terminal(&format!("{v}"))?),
        ATree::Const(id) | ATree::Var(id) => Node::leaf(syms.terminal(id)?),
        ATree::Ref(id) => {
            return Err(KnowledgeError::File(format!("unexpanded subprocess reference `{id}`")))
        }
        ATree::Un(op, a) => Node::new(
            syms.nonterminal(unary_node_name(*op))?,
            vec![encode_atree(a, syms)?],
        ),
        ATree::Bin(op, a, b) => Node::new(
            syms.nonterminal(binary_node_name(*op))?,
            vec![encode_atree(a, syms)?, encode_atree(b, syms)?],
        ),
        ATree::Ext(id, a) => Node::new(
            syms.nonterminal(&format!("{id}c"))?,
            vec![encode_atree(a, syms)?],
        ),
    })
}

fn build_alpha_node(spec: &ProcessSpec, syms: &mut SymbolSet) -> Result<Node, KnowledgeError> {
    let mut encoded = Vec::new();
    for d in &spec.derivatives {
        encoded.push(encode_atree(&d.annotated, syms)?);
    }
    if encoded.len() == 1 {
        Ok(encoded.pop().unwrap())
    } else {
        Ok(Node::new(syms.nonterminal("S")?, encoded))
    }
}

/// Encodes the initial process as a single α-tree: annotated subtrees sit
/// under connector nodes, and multiple equations combine under one common
/// root.
pub fn build_alpha(spec: &ProcessSpec) -> Result<ElementaryTree, KnowledgeError> {
    let mut syms = SymbolSet::default();
    let root = build_alpha_node(spec, &mut syms)?;
    Ok(ElementaryTree::alpha("alpha_process", root, vec![]))
}

fn connector_beta(ext: &ExtensionPoint, op_name: &str, syms: &mut SymbolSet) -> Result<ElementaryTree, KnowledgeError> {
    let op = binary_by_table_name(op_name)
        .ok_or_else(|| KnowledgeError::UnknownOperator(op_name.to_string()))?;
    let c = syms.nonterminal(&format!("{}c", ext.id))?;
    let e = syms.nonterminal(&format!("{}e", ext.id))?;
    let x = syms.nonterminal(&format!("{}x", ext.id))?;
    let op_sym = syms.nonterminal(binary_node_name(op))?;
    let root = Node::new(
        c.clone(),
        vec![Node::new(
            op_sym,
            vec![Node::leaf(c), Node::new(e, vec![Node::leaf(x)])],
        )],
    );
    Ok(ElementaryTree::beta(
        format!("{}_con_{}", ext.id.to_lowercase(), op_slug(op_name).unwrap()),
        root,
        NodeAddress(vec![0, 0]),
        vec![NodeAddress(vec![0, 1, 0])],
    ))
}

fn extender_betas(ext: &ExtensionPoint, op_name: &str, syms: &mut SymbolSet) -> Result<Vec<ElementaryTree>, KnowledgeError> {
    let e = syms.nonterminal(&format!("{}e", ext.id))?;
    let x = syms.nonterminal(&format!("{}x", ext.id))?;
    let slug = op_slug(op_name).ok_or_else(|| KnowledgeError::UnknownOperator(op_name.to_string()))?;
    let prefix = format!("{}_ext_{}", ext.id.to_lowercase(), slug);

    if matches!(op_name, "log" | "exp") {
        let op = if op_name == "log" { UnaryOp::Log } else { UnaryOp::Exp };
        let op_sym = syms.nonterminal(unary_node_name(op))?;
        let root = Node::new(e.clone(), vec![Node::new(op_sym, vec![Node::leaf(e)])]);
        return Ok(vec![ElementaryTree::beta(prefix, root, NodeAddress(vec![0, 0]), vec![])]);
    }

    let op = binary_by_table_name(op_name)
        .ok_or_else(|| KnowledgeError::UnknownOperator(op_name.to_string()))?;
    let op_sym = syms.nonterminal(binary_node_name(op))?;
    let operand = |syms: &mut SymbolSet| -> Result<Node, KnowledgeError> {
        Ok(Node::new(
            syms.nonterminal(&format!("{}e", ext.id))?,
            vec![Node::leaf(syms.nonterminal(&format!("{}x", ext.id))?)],
        ))
    };
    // foot left, new operand right
    let right = ElementaryTree::beta(
        if op.is_commutative() { prefix.clone() } else { format!("{prefix}_r") },
        Node::new(
            e.clone(),
            vec![Node::new(op_sym.clone(), vec![Node::leaf(e.clone()), operand(syms)?])],
        ),
        NodeAddress(vec![0, 0]),
        vec![NodeAddress(vec![0, 1, 0])],
    );
    if op.is_commutative() {
        return Ok(vec![right]);
    }
    // new operand left, foot right
    let left = ElementaryTree::beta(
        format!("{prefix}_l"),
        Node::new(e.clone(), vec![Node::new(op_sym, vec![operand(syms)?, Node::leaf(e)])]),
        NodeAddress(vec![0, 1]),
        vec![NodeAddress(vec![0, 0, 0])],
    );
    let _ = x;
    Ok(vec![right, left])
}

fn lexeme_trees(ext: &ExtensionPoint, syms: &mut SymbolSet) -> Result<Vec<ElementaryTree>, KnowledgeError> {
    let x = syms.nonterminal(&format!("{}x", ext.id))?;
    let mut out = Vec::new();
    for var in &ext.variables {
        if var == "R" {
            let leaf = Node::leaf(syms.terminal("R")?);
            let mut tree = ElementaryTree::alpha(
                format!("{}_lex_R", ext.id.to_lowercase()),
                Node::new(x.clone(), vec![leaf]),
                vec![],
            );
            tree.param = Some(ParamRange { min: 0.0, max: 1.0 });
            out.push(tree);
        } else {
            let leaf = Node::leaf(syms.terminal(var)?);
            out.push(ElementaryTree::alpha(
                format!("{}_lex_{}", ext.id.to_lowercase(), var),
                Node::new(x.clone(), vec![leaf]),
                vec![],
            ));
        }
    }
    Ok(out)
}

/// Generates the β-trees and lexemes for every extension point: one
/// connector β per connector operator, one extender β per commutative or
/// unary extender operator plus two per non-commutative one (new operand
/// left or right), and one lexeme per allowed variable.
pub fn build_betas(spec: &ProcessSpec) -> Result<Vec<ElementaryTree>, KnowledgeError> {
    let mut syms = SymbolSet::default();
    build_betas_with(&spec.knowledge.extension_table, &mut syms)
}

fn build_betas_with(
    table: &[ExtensionPoint],
    syms: &mut SymbolSet,
) -> Result<Vec<ElementaryTree>, KnowledgeError> {
    let mut trees = Vec::new();
    for ext in table {
        for op in &ext.connectors {
            trees.push(connector_beta(ext, op, syms)?);
        }
        for op in &ext.extenders {
            trees.extend(extender_betas(ext, op, syms)?);
        }
        trees.extend(lexeme_trees(ext, syms)?);
    }
    Ok(trees)
}

/// Builds the complete revision grammar for a process specification.
pub fn build_grammar(spec: &ProcessSpec) -> Result<Grammar, KnowledgeError> {
    let mut syms = SymbolSet::default();
    let alpha_root = build_alpha_node(spec, &mut syms)?;
    let start = alpha_root.symbol.name.clone();
    let alpha = ElementaryTree::alpha("alpha_process", alpha_root, vec![]);
    let mut trees = vec![alpha];
    trees.extend(build_betas_with(&spec.knowledge.extension_table, &mut syms)?);
    Ok(Grammar::new(syms.into_symbols(), trees, start)?)
}

/// The variable a lexeme stands for, if it is a plain variable lexeme.
pub fn lexeme_variable(grammar: &Grammar, lexeme_id: &str) -> Option<String> {
    let tree = grammar.tree(lexeme_id).ok()?;
    if tree.param.is_some() {
        return None;
    }
    tree.root
        .children
        .first()
        .filter(|n| n.is_frontier() && !n.symbol.is_nonterminal())
        .map(|n| n.symbol.name.clone())
}

/// Decodes a derived tree back into one expression per state equation.
/// Operator nodes map to expression operators; extension and slot nodes
/// pass through; terminal leaves resolve to constants, variables, or
/// literals (parameterized lexeme payloads).
pub fn decode_model(derived: &DerivedTree, spec: &ProcessSpec) -> Result<Vec<(String, Expr)>, DecodeError> {
    let states = spec.states();
    let root = &derived.root;
    if states.len() == 1 {
        return Ok(vec![(states[0].to_string(), decode_node(root, spec)?)]);
    }
    if root.children.len() != states.len() {
        return Err(DecodeError::Shape(format!(
            "root has {} children for {} state equations",
            root.children.len(),
            states.len()
        )));
    }
    states
        .iter()
        .zip(&root.children)
        .map(|(state, child)| Ok((state.to_string(), decode_node(child, spec)?)))
        .collect()
}

fn decode_node(node: &Node, spec: &ProcessSpec) -> Result<Expr, DecodeError> {
    let name = node.symbol.name.as_str();
    if node.symbol.is_nonterminal() {
        if let Some((_, op)) = BINARY_NODE_NAMES.iter().find(|(n, _)| *n == name) {
            if node.children.len() != 2 {
                return Err(DecodeError::Arity {
                    symbol: name.to_string(),
                    expected: 2,
                    got: node.children.len(),
                });
            }
            return Ok(Expr::Binary(
                *op,
                Box::new(decode_node(&node.children[0], spec)?),
                Box::new(decode_node(&node.children[1], spec)?),
            ));
        }
        if let Some((_, op)) = UNARY_NODE_NAMES.iter().find(|(n, _)| *n == name) {
            if node.children.len() != 1 {
                return Err(DecodeError::Arity {
                    symbol: name.to_string(),
                    expected: 1,
                    got: node.children.len(),
                });
            }
            return Ok(Expr::Unary(*op, Box::new(decode_node(&node.children[0], spec)?)));
        }
        // extension / slot / chain nodes pass through
        return match node.children.len() {
            1 => decode_node(&node.children[0], spec),
            0 => Err(DecodeError::Incomplete(name.to_string())),
            n => Err(DecodeError::Arity { symbol: name.to_string(), expected: 1, got: n }),
        };
    }
    if let Some(v) = node.payload {
        return Ok(Expr::Literal(v));
    }
    if let Ok(v) = name.parse::<f64>() {
        return Ok(Expr::Literal(v));
    }
    if spec.prior(name).is_some() {
        return Ok(Expr::Const(name.to_string()));
    }
    let known_var = spec.variables.iter().any(|v| v.id == name)
        || spec.derivatives.iter().any(|d| d.state == name);
    if known_var {
        return Ok(Expr::Var(name.to_string()));
    }
    Err(DecodeError::Unresolved(name.to_string()))
}

/// Constant parameter vector at the prior means.
pub fn init_parameters(priors: &[ParameterPrior]) -> BTreeMap<String, f64> {
    priors.iter().map(|p| (p.id.clone(), p.mean)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::eval_tree;
    use crate::process::ProcessSpec;
    use crate::tag::{derive, open_addresses, random_derivation, DerivationNode, DerivationTree, LexemeBinding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn river_spec() -> ProcessSpec {
        ProcessSpec::from_knowledge(&river_knowledge()).unwrap()
    }

    /// A one-equation toy file mirroring the worked example: the process
    /// `B_Phy * C_mu`, extensible by a minus connector with variable B_Zoo.
    fn toy_knowledge() -> KnowledgeFile {
        KnowledgeFile {
            equations: vec![EquationSpec {
                lhs: "d_B_Phy".into(),
                rhs_sexpr: "(* B_Phy C_mu)".into(),
                extensions: vec![ExtensionSiteSpec { id: "Ext1".into(), at_path: vec![] }],
            }],
            extension_table: vec![ExtensionPoint {
                id: "Ext1".into(),
                variables: vec!["B_Zoo".into(), "R".into()],
                connectors: vec!["-".into()],
                extenders: vec!["*".into()],
            }],
            priors: vec![ParameterPrior { id: "C_mu".into(), mean: 0.5, min: 0.0, max: 1.0, unit: String::new() }],
            variables: vec![VariableInfo { id: "B_Zoo".into(), unit: None, description: None }],
        }
    }

    #[test]
    fn bundled_knowledge_has_table_contents() {
        let kf = river_knowledge();
        assert_eq!(kf.priors.len(), 16);
        assert_eq!(kf.variables.len(), 10);
        assert_eq!(kf.extension_table.len(), 8);
        let ua = kf.priors.iter().find(|p| p.id == "C_UA").unwrap();
        assert_eq!((ua.mean, ua.min, ua.max), (1.89, 0.1, 4.0));
        let fs = kf.priors.iter().find(|p| p.id == "C_FS").unwrap();
        assert_eq!(fs.mean, 5.0);
        let ext1 = kf.extension_table.iter().find(|x| x.id == "Ext1").unwrap();
        assert_eq!(ext1.variables, vec!["V_cd", "V_ph", "V_alk", "R"]);
        assert_eq!(ext1.connectors, vec!["+"]);
        let ext2 = kf.extension_table.iter().find(|x| x.id == "Ext2").unwrap();
        assert_eq!(ext2.variables, vec!["V_sd", "R"]);
        for id in ["Ext5", "Ext6", "Ext7", "Ext8", "Ext9"] {
            let ext = kf.extension_table.iter().find(|x| x.id == id).unwrap();
            assert_eq!(ext.variables, vec!["V_tmp", "R"]);
            assert_eq!(ext.connectors, vec!["*"]);
            assert_eq!(ext.extenders.len(), 6);
        }
    }

    #[test]
    fn toy_alpha_has_connector_root() {
        let spec = ProcessSpec::from_knowledge(&toy_knowledge()).unwrap();
        let alpha = build_alpha(&spec).unwrap();
        assert_eq!(alpha.root.symbol.name, "Ext1c");
        assert_eq!(alpha.root.children[0].symbol.name, "Mul");
        assert_eq!(alpha.node_count(), 4);
    }

    #[test]
    fn river_alpha_combines_equations_under_common_root() {
        let spec = river_spec();
        let alpha = build_alpha(&spec).unwrap();
        assert_eq!(alpha.root.symbol.name, "S");
        assert_eq!(alpha.root.children.len(), 2);
        assert_eq!(alpha.root.children[0].symbol.name, "Ext1c");
        assert_eq!(alpha.root.children[1].symbol.name, "Ext2c");
    }

    #[test]
    fn no_extension_points_admits_only_identity_derivation() {
        let mut kf = toy_knowledge();
        kf.equations[0].extensions.clear();
        kf.extension_table.clear();
        let spec = ProcessSpec::from_knowledge(&kf).unwrap();
        let grammar = build_grammar(&spec).unwrap();
        assert_eq!(grammar.betas().count(), 0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let d = random_derivation(&grammar, (1, 1), &mut rng).unwrap();
        assert_eq!(d.size(), 1);
        assert!(random_derivation(&grammar, (2, 4), &mut rng).is_err());
    }

    #[test]
    fn beta_counts_match_extension_table_combinatorics() {
        let spec = river_spec();
        let grammar = build_grammar(&spec).unwrap();
        // per extension: 1 connector + (add 1, sub 2, mul 1, div 2, log 1,
        // exp 1) extenders = 9 β-trees
        assert_eq!(grammar.betas().count(), 8 * 9);
        // lexemes: 4 + 2 + 4 + 2*5
        let lexemes: usize = spec
            .knowledge
            .extension_table
            .iter()
            .map(|x| grammar.lexemes_for(&format!("{}x", x.id)).len())
            .sum();
        assert_eq!(lexemes, 20);
        assert_eq!(grammar.lexemes_for("Ext2x").len(), 2);
        let ext2_connectors = grammar
            .betas()
            .filter(|t| t.id.starts_with("ext2_con"))
            .count();
        assert_eq!(ext2_connectors, 1);
    }

    #[test]
    fn grammar_is_closed() {
        let spec = river_spec();
        let grammar = build_grammar(&spec).unwrap();
        // every β root label occurs as an interior label somewhere, and
        // every slot has at least one lexeme
        let mut interior_labels = std::collections::BTreeSet::new();
        for tree in grammar.trees() {
            for (addr, sym) in tree.interior_addresses() {
                let _ = addr;
                interior_labels.insert(sym.name);
            }
        }
        for beta in grammar.betas() {
            assert!(
                interior_labels.contains(beta.root_label()),
                "beta `{}` root `{}` has no adjoinable site",
                beta.id,
                beta.root_label()
            );
            for slot in &beta.slots {
                let label = beta.slot_label(slot).unwrap();
                assert!(!grammar.lexemes_for(label).is_empty(), "slot `{label}` has no lexeme");
            }
        }
    }

    #[test]
    fn connector_revision_produces_expected_equation() {
        let spec = ProcessSpec::from_knowledge(&toy_knowledge()).unwrap();
        let grammar = build_grammar(&spec).unwrap();
        // adjoin the minus connector at the α root, bind B_Zoo
        let mut d = DerivationTree::bare("alpha_process");
        let mut con = DerivationNode::bare("ext1_con_sub");
        con.at = NodeAddress(vec![]);
        con.lexemes.push(LexemeBinding {
            at: NodeAddress(vec![0, 1, 0]),
            lexeme: "ext1_lex_B_Zoo".into(),
            value: None,
        });
        d.root.adjunctions.push(con);
        let derived = derive(&d, &grammar).unwrap();
        let model = decode_model(&derived, &spec).unwrap();
        assert_eq!(model[0].1.to_sexpr(), "(- (* B_Phy C_mu) B_Zoo)");

        // grow further: extender × with a parameterized lexeme at 0.75
        let mut d2 = d.clone();
        let mut ext = DerivationNode::bare("ext1_ext_mul");
        ext.at = NodeAddress(vec![0, 1]);
        ext.lexemes.push(LexemeBinding {
            at: NodeAddress(vec![0, 1, 0]),
            lexeme: "ext1_lex_R".into(),
            value: Some(0.75),
        });
        d2.root.adjunctions[0].adjunctions.push(ext);
        let derived2 = derive(&d2, &grammar).unwrap();
        let model2 = decode_model(&derived2, &spec).unwrap();
        assert_eq!(model2[0].1.to_sexpr(), "(- (* B_Phy C_mu) (* B_Zoo 0.75))");
    }

    #[test]
    fn connectors_and_extenders_use_disjoint_symbols() {
        let spec = river_spec();
        let grammar = build_grammar(&spec).unwrap();
        for beta in grammar.betas() {
            let root = beta.root_label();
            assert!(root.ends_with('c') || root.ends_with('e'));
        }
        // a connector β cannot adjoin at an extender address
        let con = grammar.tree("ext5_con_mul").unwrap();
        let ext = grammar.tree("ext5_ext_add").unwrap();
        // extender site inside the connector tree: address [0,1] has label Ext5e
        let err = crate::tag::adjoin(&con.root, con, &NodeAddress(vec![0, 1])).unwrap_err();
        assert!(matches!(err, TagError::Compatibility { .. }));
        let err = crate::tag::adjoin(&ext.root, con, &NodeAddress(vec![])).unwrap_err();
        assert!(matches!(err, TagError::Compatibility { .. }));
    }

    #[test]
    fn fresh_derivation_opens_exactly_the_extension_addresses() {
        let spec = river_spec();
        let grammar = build_grammar(&spec).unwrap();
        let d = DerivationTree::bare("alpha_process");
        let open = open_addresses(&d, &grammar).unwrap();
        let adjoinable: Vec<_> = open
            .iter()
            .filter(|o| !grammar.betas_for(&o.symbol.name).is_empty())
            .collect();
        // Ext1, Ext2, Ext3, Ext5, Ext7, Ext8, Ext9 once; Ext6 (phi) twice
        // since phi is referenced from both equations
        assert_eq!(adjoinable.len(), 9);
        let ext6 = adjoinable.iter().filter(|o| o.symbol.name == "Ext6c").count();
        assert_eq!(ext6, 2);
        for o in &adjoinable {
            assert!(o.symbol.name.ends_with('c'));
        }
    }

    #[test]
    fn initial_model_decodes_and_evaluates_like_subprocess_functions() {
        let spec = river_spec();
        let grammar = build_grammar(&spec).unwrap();
        let d = DerivationTree::bare("alpha_process");
        let derived = derive(&d, &grammar).unwrap();
        let model = decode_model(&derived, &spec).unwrap();
        assert_eq!(model.len(), 2);
        assert_eq!(model[0].0, "B_Phy");

        let mut env = crate::expr::Environment::default();
        for p in &spec.priors {
            env.params.insert(p.id.clone(), p.mean);
        }
        for (id, v) in [
            ("B_Phy", 8.0),
            ("B_Zoo", 2.0),
            ("V_lgt", 20.0),
            ("V_n", 1.5),
            ("V_p", 0.08),
            ("V_si", 2.0),
            ("V_tmp", 22.0),
            ("V_do", 9.0),
            ("V_cd", 300.0),
            ("V_ph", 8.0),
            ("V_alk", 90.0),
            ("V_sd", 1.5),
        ] {
            env.vars.insert(id.to_string(), v);
        }
        let d_phy = eval_tree(&model[0].1, &env).unwrap();

        let mu = 1.89
            * crate::process::light_response(20.0, 26.78)
            * crate::process::nutrient_limitation(1.5, 0.08, 2.0, 0.0351, 0.00167, 0.00467)
            * crate::process::temperature_response(22.0, 0.005, 27.0, 5.0);
        let lambda = crate::process::food_limitation(8.0, 1.0, 5.0);
        let phi = 0.19 * lambda;
        let expected = 8.0 * (mu - 0.021) - 2.0 * phi;
        assert!((d_phy - expected).abs() < 1e-12, "{d_phy} vs {expected}");
    }

    #[test]
    fn random_revisions_decode_and_r_values_stay_in_range() {
        let spec = river_spec();
        let grammar = build_grammar(&spec).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut r_seen = 0;
        for _ in 0..500 {
            let d = random_derivation(&grammar, (2, 50), &mut rng).unwrap();
            d.validate(&grammar).unwrap();
            let derived = derive(&d, &grammar).unwrap();
            assert!(derived.is_complete());
            let model = decode_model(&derived, &spec).unwrap();
            assert_eq!(model.len(), 2);
            for (_, node) in d.root.walk() {
                for lex in &node.lexemes {
                    if let Some(v) = lex.value {
                        assert!((0.0..=1.0).contains(&v));
                        r_seen += 1;
                    }
                }
            }
        }
        assert!(r_seen > 50, "parameterized lexemes should occur; saw {r_seen}");
    }

    /// Ordered tree embedding: every node of `needle` maps into `haystack`
    /// preserving labels, left-to-right order, and ancestry. Adjunction
    /// stretches edges but never breaks this relation, so the initial
    /// process must embed into every revised derived tree.
    fn is_embedded(needle: &Node, haystack: &Node) -> bool {
        fn match_here(n: &Node, h: &Node) -> bool {
            if n.symbol != h.symbol {
                return false;
            }
            match_children(&n.children, &h.children)
        }
        fn match_children(needles: &[Node], forest: &[Node]) -> bool {
            if needles.is_empty() {
                return true;
            }
            // try to match the first needle somewhere in the forest, the
            // rest in the remaining forest to the right
            for (i, tree) in forest.iter().enumerate() {
                if match_here(&needles[0], tree) || match_children(std::slice::from_ref(&needles[0]), &tree.children)
                {
                    if match_children(&needles[1..], &forest[i + 1..]) {
                        return true;
                    }
                }
            }
            false
        }
        fn find(n: &Node, h: &Node) -> bool {
            if match_here(n, h) {
                return true;
            }
            h.children.iter().any(|c| find(n, c))
        }
        find(needle, haystack)
    }

    #[test]
    fn small_revisions_preserve_the_initial_process_structure() {
        let spec = river_spec();
        let grammar = build_grammar(&spec).unwrap();
        let initial = derive(&DerivationTree::bare("alpha_process"), &grammar).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);

        // exhaustive single adjunctions
        let bare = DerivationTree::bare("alpha_process");
        let open = open_addresses(&bare, &grammar).unwrap();
        let mut singles = Vec::new();
        for site in &open {
            for &bi in grammar.betas_for(&site.symbol.name) {
                let beta = grammar.tree_by_index(bi);
                let mut d = bare.clone();
                let mut child = DerivationNode::bare(&beta.id);
                child.at = site.address.clone();
                crate::tag::fill_slots(&mut child, beta, &grammar, &mut rng).unwrap();
                d.root.adjunctions.push(child);
                singles.push(d);
            }
        }
        assert!(!singles.is_empty());
        let mut doubles = Vec::new();
        for d in &singles {
            for _ in 0..2 {
                let mut d2 = d.clone();
                if crate::tag::grow_random(&mut d2, &grammar, &mut rng).unwrap() {
                    doubles.push(d2);
                }
            }
        }
        for d in singles.iter().chain(&doubles) {
            let derived = derive(d, &grammar).unwrap();
            assert!(
                is_embedded(&initial.root, &derived.root),
                "initial process lost in {}",
                d.to_json()
            );
        }
    }
}
