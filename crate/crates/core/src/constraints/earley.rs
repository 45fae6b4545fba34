//! Incremental Earley recognition of grammar prefixes.
//!
//! Rules that mention an unproductive nonterminal are dropped up front, so
//! every item left in a column lies on some complete derivation. A prefix is
//! therefore viable exactly when its last column is nonempty. Nullable
//! nonterminals are skipped at prediction time (Aycock and Horspool), which
//! keeps completion correct for empty productions.

use std::collections::HashSet;
use std::sync::Arc;

use super::grammar::{Grammar, Symbol};
use super::ConstraintError;

/// Status of a terminal string with respect to a grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Viability {
    /// A member of the language (and possibly a prefix of longer members).
    Complete,
    /// Not a member, but some extension is.
    Viable,
    /// No extension is a member.
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Item {
    rule: u32,
    dot: u32,
    origin: u32,
}

#[derive(Debug, Default)]
struct Column {
    items: Vec<Item>,
    seen: HashSet<Item>,
}

impl Column {
    fn push(&mut self, item: Item) {
        if self.seen.insert(item) {
            self.items.push(item);
        }
    }
}

/// Earley columns for one prefix. Columns are shared between a chart and
/// its extensions.
#[derive(Debug, Clone)]
pub struct EarleyChart {
    columns: Vec<Arc<Column>>,
}

impl EarleyChart {
    /// Number of terminals consumed.
    pub fn len(&self) -> usize {
        self.columns.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn last(&self) -> &Column {
        self.columns.last().expect("chart has an initial column")
    }
}

#[derive(Debug, Clone)]
pub struct EarleyRecognizer {
    grammar: Grammar,
    /// Indices of productive rules, grouped by left-hand side.
    rules_by_lhs: Vec<Vec<usize>>,
    nullable: Vec<bool>,
    start_productive: bool,
}

impl EarleyRecognizer {
    pub fn new(grammar: Grammar) -> Self {
        let productive = grammar.productive();
        let nullable = grammar.nullable();
        let mut rules_by_lhs = vec![Vec::new(); grammar.nonterminals().len()];
        for (i, rule) in grammar.rules().iter().enumerate() {
            let usable = rule.rhs.iter().all(|s| match s {
                Symbol::Nonterminal(n) => productive[*n],
                Symbol::Terminal(_) => true,
            });
            if usable {
                rules_by_lhs[rule.lhs].push(i);
            }
        }
        let start_productive = productive[grammar.start()];
        Self {
            grammar,
            rules_by_lhs,
            nullable,
            start_productive,
        }
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn initial_chart(&self) -> EarleyChart {
        let mut column = Column::default();
        if self.start_productive {
            for &rule in &self.rules_by_lhs[self.grammar.start()] {
                column.push(Item {
                    rule: rule as u32,
                    dot: 0,
                    origin: 0,
                });
            }
        }
        let mut columns = Vec::new();
        self.close(&columns, &mut column);
        columns.push(Arc::new(column));
        EarleyChart { columns }
    }

    /// Chart after consuming one more terminal.
    pub fn advance(&self, chart: &EarleyChart, terminal: usize) -> EarleyChart {
        let mut column = Column::default();
        for item in &chart.last().items {
            if self.next_symbol(item) == Some(Symbol::Terminal(terminal)) {
                column.push(Item {
                    dot: item.dot + 1,
                    ..*item
                });
            }
        }
        self.close(&chart.columns, &mut column);
        let mut columns = chart.columns.clone();
        columns.push(Arc::new(column));
        EarleyChart { columns }
    }

    pub fn viability(&self, chart: &EarleyChart) -> Viability {
        let last = chart.last();
        if last.items.is_empty() {
            return Viability::Dead;
        }
        let start = self.grammar.start();
        let complete = last.items.iter().any(|item| {
            item.origin == 0
                && self.next_symbol(item).is_none()
                && self.grammar.rules()[item.rule as usize].lhs == start
        });
        if complete {
            Viability::Complete
        } else {
            Viability::Viable
        }
    }

    /// Classifies a sequence of terminal indices.
    pub fn recognize(&self, terminals: &[usize]) -> Viability {
        let mut chart = self.initial_chart();
        for &t in terminals {
            chart = self.advance(&chart, t);
            if chart.last().items.is_empty() {
                return Viability::Dead;
            }
        }
        self.viability(&chart)
    }

    fn next_symbol(&self, item: &Item) -> Option<Symbol> {
        self.grammar.rules()[item.rule as usize]
            .rhs
            .get(item.dot as usize)
            .copied()
    }

    /// Prediction and completion until `column` is closed. `earlier` holds
    /// the columns before it.
    fn close(&self, earlier: &[Arc<Column>], column: &mut Column) {
        let here = earlier.len() as u32;
        let mut i = 0;
        while i < column.items.len() {
            let item = column.items[i];
            i += 1;
            match self.next_symbol(&item) {
                Some(Symbol::Nonterminal(b)) => {
                    for &rule in &self.rules_by_lhs[b] {
                        column.push(Item {
                            rule: rule as u32,
                            dot: 0,
                            origin: here,
                        });
                    }
                    if self.nullable[b] {
                        column.push(Item {
                            dot: item.dot + 1,
                            ..item
                        });
                    }
                }
                Some(Symbol::Terminal(_)) => {}
                None => {
                    let lhs = Symbol::Nonterminal(self.grammar.rules()[item.rule as usize].lhs);
                    let waiting: Vec<Item> = if item.origin == here {
                        column.items.clone()
                    } else {
                        earlier[item.origin as usize].items.clone()
                    };
                    for parent in waiting {
                        if self.next_symbol(&parent) == Some(lhs) {
                            column.push(Item {
                                dot: parent.dot + 1,
                                ..parent
                            });
                        }
                    }
                }
            }
        }
    }
}

/// Classifies a sequence of terminal names against `grammar`.
pub fn cfg_viable_prefix(
    grammar: &Grammar,
    terminals: &[&str],
) -> Result<Viability, ConstraintError> {
    let ids = terminals
        .iter()
        .map(|t| {
            grammar
                .terminal_index(t)
                .ok_or_else(|| ConstraintError::UnknownTerminal(t.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EarleyRecognizer::new(grammar.clone()).recognize(&ids))
}
