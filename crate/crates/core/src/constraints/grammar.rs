//! Context-free grammars in a small BNF dialect.
//!
//! ```text
//! S -> A B
//! A -> a A | ""
//! B -> b B c | ""
//! ```
//!
//! One production per line; alternatives separated by `|`; `""` is the empty
//! string. Symbols appearing on some left-hand side are nonterminals, every
//! other symbol is a terminal. A quoted symbol such as `"|"` is always a
//! terminal. The first left-hand side is the start symbol.

use std::collections::HashMap;

use super::ConstraintError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Terminal(usize),
    Nonterminal(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub lhs: usize,
    pub rhs: Vec<Symbol>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grammar {
    nonterminals: Vec<String>,
    terminals: Vec<String>,
    rules: Vec<Rule>,
    start: usize,
}

enum RawSymbol {
    Bare(String),
    Quoted(String),
}

impl Grammar {
    pub fn parse(text: &str) -> Result<Self, ConstraintError> {
        let mut raw: Vec<(usize, String, Vec<Vec<RawSymbol>>)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (lhs, rhs) = line
                .split_once("->")
                .ok_or_else(|| ConstraintError::Grammar {
                    line: line_no,
                    message: "expected `->`".into(),
                })?;
            let lhs = lhs.trim();
            if lhs.is_empty() || lhs.contains(char::is_whitespace) || lhs.starts_with('"') {
                return Err(ConstraintError::Grammar {
                    line: line_no,
                    message: format!("invalid left-hand side `{lhs}`"),
                });
            }
            let alternatives = split_alternatives(rhs, line_no)?;
            raw.push((line_no, lhs.to_string(), alternatives));
        }
        if raw.is_empty() {
            return Err(ConstraintError::Grammar {
                line: 0,
                message: "grammar has no productions".into(),
            });
        }

        let mut nt_index: HashMap<String, usize> = HashMap::new();
        let mut nonterminals = Vec::new();
        for (_, lhs, _) in &raw {
            if !nt_index.contains_key(lhs) {
                nt_index.insert(lhs.clone(), nonterminals.len());
                nonterminals.push(lhs.clone());
            }
        }
        let mut t_index: HashMap<String, usize> = HashMap::new();
        let mut terminals = Vec::new();
        let mut rules = Vec::new();
        for (_, lhs, alternatives) in raw {
            for alt in alternatives {
                let rhs = alt
                    .into_iter()
                    .map(|sym| {
                        let (name, quoted) = match sym {
                            RawSymbol::Bare(s) => (s, false),
                            RawSymbol::Quoted(s) => (s, true),
                        };
                        match nt_index.get(&name) {
                            Some(&i) if !quoted => Symbol::Nonterminal(i),
                            _ => {
                                let next = terminals.len();
                                let i = *t_index.entry(name.clone()).or_insert(next);
                                if i == next {
                                    terminals.push(name);
                                }
                                Symbol::Terminal(i)
                            }
                        }
                    })
                    .collect();
                rules.push(Rule {
                    lhs: nt_index[&lhs],
                    rhs,
                });
            }
        }
        Ok(Self {
            nonterminals,
            terminals,
            rules,
            start: 0,
        })
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn terminal_index(&self, name: &str) -> Option<usize> {
        self.terminals.iter().position(|t| t == name)
    }

    /// Nonterminals deriving the empty string.
    pub fn nullable(&self) -> Vec<bool> {
        let mut nullable = vec![false; self.nonterminals.len()];
        let mut changed = true;
        while changed {
            changed = false;
            for rule in &self.rules {
                if !nullable[rule.lhs]
                    && rule.rhs.iter().all(|s| match s {
                        Symbol::Nonterminal(n) => nullable[*n],
                        Symbol::Terminal(_) => false,
                    })
                {
                    nullable[rule.lhs] = true;
                    changed = true;
                }
            }
        }
        nullable
    }

    /// Nonterminals deriving at least one terminal string.
    pub fn productive(&self) -> Vec<bool> {
        let mut productive = vec![false; self.nonterminals.len()];
        let mut changed = true;
        while changed {
            changed = false;
            for rule in &self.rules {
                if !productive[rule.lhs]
                    && rule.rhs.iter().all(|s| match s {
                        Symbol::Nonterminal(n) => productive[*n],
                        Symbol::Terminal(_) => true,
                    })
                {
                    productive[rule.lhs] = true;
                    changed = true;
                }
            }
        }
        productive
    }
}

fn split_alternatives(rhs: &str, line: usize) -> Result<Vec<Vec<RawSymbol>>, ConstraintError> {
    let mut alternatives = vec![Vec::new()];
    for word in rhs.split_whitespace() {
        if word == "|" {
            alternatives.push(Vec::new());
            continue;
        }
        let current = alternatives.last_mut().expect("nonempty");
        if word == "\"\"" {
            continue;
        }
        if word.len() >= 2 && word.starts_with('"') && word.ends_with('"') {
            current.push(RawSymbol::Quoted(word[1..word.len() - 1].to_string()));
        } else if word.contains('"') {
            return Err(ConstraintError::Grammar {
                line,
                message: format!("malformed quoted symbol `{word}`"),
            });
        } else {
            current.push(RawSymbol::Bare(word.to_string()));
        }
    }
    Ok(alternatives)
}
