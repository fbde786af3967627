//! Seeded synthetic tree corpora.
//!
//! A tree is a `Module` holding statements `Stmt{k}`. Each statement has
//! three slots stored as dual nodes: `Slot{k}a` = "x", `Slot{k}b` = "v{k}",
//! `Slot{k}c` = "w{k}". Every leaf value is therefore a function of its
//! parent's type, while the leaf sequence alone reveals a statement's kind
//! only after its second leaf.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ast::{Ast, RawNode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Successor {
    /// Statement kinds drawn independently.
    Independent,
    /// Kind `k` is followed by `k + 1 mod kinds`; only the first is random.
    Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub trees: usize,
    pub kinds: usize,
    pub min_statements: usize,
    pub max_statements: usize,
    pub successor: Successor,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            trees: 100,
            kinds: 8,
            min_statements: 4,
            max_statements: 8,
            successor: Successor::Independent,
            seed: 0,
        }
    }
}

fn node(type_name: Option<String>, value: Option<String>, children: Vec<usize>) -> RawNode {
    RawNode {
        type_name,
        value,
        children,
    }
}

/// The slot values of statement kind `k`, in child order.
pub fn slot_values(k: usize) -> [String; 3] {
    ["x".to_owned(), format!("v{k}"), format!("w{k}")]
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<Ast>> {
    if cfg.kinds == 0 || cfg.min_statements == 0 || cfg.min_statements > cfg.max_statements {
        return Err(Error::invalid("synthetic grammar needs kinds > 0 and 0 < min <= max statements"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.trees)
        .map(|_| {
            let count = rng.random_range(cfg.min_statements..=cfg.max_statements);
            let mut kinds = Vec::with_capacity(count);
            let mut k = rng.random_range(0..cfg.kinds);
            for _ in 0..count {
                kinds.push(k);
                k = match cfg.successor {
                    Successor::Independent => rng.random_range(0..cfg.kinds),
                    Successor::Cycle => (k + 1) % cfg.kinds,
                };
            }
            let mut raw = vec![node(Some("Module".into()), None, (0..count).map(|s| 1 + 4 * s).collect())];
            for (s, &k) in kinds.iter().enumerate() {
                let base = 1 + 4 * s;
                raw.push(node(Some(format!("Stmt{k}")), None, vec![base + 1, base + 2, base + 3]));
                for (slot, value) in ['a', 'b', 'c'].into_iter().zip(slot_values(k)) {
                    raw.push(node(Some(format!("Slot{k}{slot}")), Some(value), Vec::new()));
                }
            }
            Ast::from_raw(raw)
        })
        .collect()
}

/// JSON-lines text, one tree per line.
pub fn to_jsonl(trees: &[Ast]) -> String {
    let mut out = String::new();
    for t in trees {
        out.push_str(&t.to_json());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{normalize_ast, parse_ast_json, validate_ast};

    #[test]
    fn trees_are_valid_after_normalization() {
        let trees = generate(&SynthConfig { trees: 5, ..SynthConfig::default() }).unwrap();
        for t in &trees {
            let n = normalize_ast(t).unwrap();
            assert!(validate_ast(&n).is_empty());
            assert_eq!(*t, parse_ast_json(&t.to_json()).unwrap());
        }
    }

    #[test]
    fn seeded_and_cyclic() {
        let cfg = SynthConfig {
            trees: 3,
            kinds: 4,
            successor: Successor::Cycle,
            seed: 11,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let t = &generate(&cfg).unwrap()[0];
        let kinds: Vec<usize> = t.node(0).children.iter().map(|&c| {
            t.node(c).type_name.as_deref().unwrap()[4..].parse().unwrap()
        }).collect();
        for w in kinds.windows(2) {
            assert_eq!(w[1], (w[0] + 1) % 4);
        }
    }
}
