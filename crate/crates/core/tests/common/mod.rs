#![allow(dead_code)]

use decotree::lm::{LookupLm, TokenId, Vocabulary};
use rand::Rng;

pub fn vocab(tokens: &[&str]) -> Vocabulary {
    Vocabulary::new(tokens.to_vec(), "EOS").unwrap()
}

/// {a, b, EOS}: (0.6, 0.3, 0.1) from the empty context, (0.2, 0.2, 0.6)
/// everywhere else.
pub fn lm_a() -> LookupLm {
    LookupLm::from_rows(
        vocab(&["a", "b", "EOS"]),
        [(vec![], vec![0.6, 0.3, 0.1])],
        vec![0.2, 0.2, 0.6],
    )
    .unwrap()
}

/// A lookup LM over `size` tokens (the last is EOS) with a random row for
/// every context shorter than `depth`. Some entries are zero.
pub fn random_lm<R: Rng>(rng: &mut R, size: usize, depth: usize) -> LookupLm {
    let names: Vec<String> = (0..size - 1)
        .map(|i| format!("t{i}"))
        .chain(["EOS".into()])
        .collect();
    let v = Vocabulary::new(names, "EOS").unwrap();
    let mut rows = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    for _ in 0..depth {
        let mut next = Vec::new();
        for ctx in frontier {
            rows.push((ctx.clone(), random_row(rng, size)));
            for t in 0..size - 1 {
                let mut c = ctx.clone();
                c.push(t);
                next.push(c);
            }
        }
        frontier = next;
    }
    LookupLm::from_rows(v, rows, random_row(rng, size)).unwrap()
}

pub fn random_row<R: Rng>(rng: &mut R, size: usize) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..size)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    0.0
                } else {
                    rng.gen_range(0.05..1.0)
                }
            })
            .collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            return w.iter().map(|x| x / total).collect();
        }
    }
}

pub const ARITH_GRAMMAR: &str = "E -> N | N + E\nN -> 1 | 2 | 3";

/// Bigram model over {+, 1, 2, 3, EOS} from a few sums.
pub fn arith_lm() -> decotree::lm::NgramLm {
    let corpus = [
        "1 + 2",
        "3",
        "2 + 1",
        "1 + 1 + 1",
        "2",
        "1 + 3",
        "3 + 3",
        "1",
    ];
    decotree::lm::train_ngram(&corpus, 2, 0.1).unwrap()
}

pub fn arith_task(
    public: i64,
    holdout: i64,
    holdout_len: Option<usize>,
) -> decotree::optimizer::TaskSpec {
    use decotree::constraints::ExpressionPredicate;
    decotree::optimizer::TaskSpec {
        name: None,
        prompt: String::new(),
        grammar: Some(ARITH_GRAMMAR.into()),
        public: ExpressionPredicate {
            equals: public,
            max_tokens: None,
        },
        holdout: ExpressionPredicate {
            equals: holdout,
            max_tokens: holdout_len,
        },
    }
}
