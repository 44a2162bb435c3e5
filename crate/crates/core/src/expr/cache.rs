//! Fitness cache keyed by canonical model form.
//!
//! A key is the simplified model rendered as S-expressions, the referenced
//! parameter values quantized to 12 significant digits, and the data-split
//! id. Only results that do not depend on transient evaluator state (full
//! evaluations and deterministic invalid verdicts) should be stored, so a
//! hit is always bit-identical to recomputation under the same split.

use super::{simplify, Expr};
use std::collections::BTreeSet;
use std::collections::HashMap;

/// Rounds to 12 significant digits via scientific-notation formatting;
/// stable across serialization.
pub fn quantize_sig12(v: f64) -> String {
    format!("{v:.11e}")
}

/// Builds the canonical cache key for a model (one or more equations).
/// Only parameters actually referenced by the simplified equations enter
/// the key, so mutations of unreferenced constants do not break sharing.
pub fn canonical_key(exprs: &[&Expr], params: &[(String, f64)], split_id: &str) -> String {
    let simplified: Vec<Expr> = exprs.iter().map(|e| simplify(e)).collect();
    let mut referenced = BTreeSet::new();
    for e in &simplified {
        e.const_ids(&mut referenced);
    }
    let mut key = String::new();
    for e in &simplified {
        key.push_str(&e.to_sexpr());
        key.push(';');
    }
    key.push('|');
    for (id, value) in params {
        if referenced.contains(id) {
            key.push_str(id);
            key.push('=');
            key.push_str(&quantize_sig12(*value));
            key.push(';');
        }
    }
    key.push('|');
    key.push_str(split_id);
    key
}

/// In-memory result cache with hit/miss counters.
#[derive(Debug, Clone, Default)]
pub struct EvalCache<V> {
    map: HashMap<String, V>,
    hits: u64,
    misses: u64,
}

impl<V: Clone> EvalCache<V> {
    pub fn new() -> Self {
        EvalCache { map: HashMap::new(), hits: 0, misses: 0 }
    }

    pub fn get(&mut self, key: &str) -> Option<V> {
        match self.map.get(key) {
            Some(v) => {
                self.hits += 1;
                Some(v.clone())
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    pub fn insert(&mut self, key: String, value: V) {
        self.map.insert(key, value);
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::BinaryOp;

    #[test]
    fn commuted_clones_share_a_key() {
        let a = Expr::binary(BinaryOp::Add, Expr::var("V_ph"), Expr::var("V_tmp"));
        let b = Expr::binary(BinaryOp::Add, Expr::var("V_tmp"), Expr::var("V_ph"));
        let params = vec![("C_UA".to_string(), 1.89)];
        assert_eq!(canonical_key(&[&a], &params, "s"), canonical_key(&[&b], &params, "s"));
    }

    #[test]
    fn parameter_change_changes_key_when_referenced() {
        let e = Expr::binary(BinaryOp::Mul, Expr::constant("C_UA"), Expr::var("V_tmp"));
        let p1 = vec![("C_UA".to_string(), 1.89)];
        let p2 = vec![("C_UA".to_string(), 1.890000001)];
        assert_ne!(canonical_key(&[&e], &p1, "s"), canonical_key(&[&e], &p2, "s"));
        // unreferenced parameters do not enter the key
        let q1 = vec![("C_UA".to_string(), 1.89), ("C_FS".to_string(), 5.0)];
        let q2 = vec![("C_UA".to_string(), 1.89), ("C_FS".to_string(), 4.5)];
        assert_eq!(canonical_key(&[&e], &q1, "s"), canonical_key(&[&e], &q2, "s"));
    }

    #[test]
    fn split_id_separates_entries() {
        let e = Expr::var("x");
        assert_ne!(canonical_key(&[&e], &[], "train"), canonical_key(&[&e], &[], "test"));
    }

    #[test]
    fn counters_track_hits_and_misses() {
        let mut cache: EvalCache<f64> = EvalCache::new();
        assert!(cache.get("k").is_none());
        cache.insert("k".into(), 1.0);
        assert_eq!(cache.get("k"), Some(1.0));
        assert_eq!(cache.hits(), 1);
        assert_eq!(cache.misses(), 1);
    }
}
