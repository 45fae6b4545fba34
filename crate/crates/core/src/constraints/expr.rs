//! Integer arithmetic over `+ - * /`, parentheses and unary minus.

/// Evaluates `text`, returning `None` on a parse error, overflow or division
/// by zero. Division truncates toward zero.
pub fn eval_expression(text: &str) -> Option<i64> {
    let tokens = lex(text)?;
    let mut parser = Parser { tokens, pos: 0 };
    let value = parser.sum()?;
    (parser.pos == parser.tokens.len()).then_some(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok {
    Num(i64),
    Op(char),
}

fn lex(text: &str) -> Option<Vec<Tok>> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if let Some(d) = c.to_digit(10) {
            let mut n = d as i64;
            chars.next();
            while let Some(d) = chars.peek().and_then(|c| c.to_digit(10)) {
                n = n.checked_mul(10)?.checked_add(d as i64)?;
                chars.next();
            }
            out.push(Tok::Num(n));
        } else if "+-*/()".contains(c) {
            out.push(Tok::Op(c));
            chars.next();
        } else {
            return None;
        }
    }
    Some(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek_op(&self) -> Option<char> {
        match self.tokens.get(self.pos) {
            Some(Tok::Op(c)) => Some(*c),
            _ => None,
        }
    }

    fn sum(&mut self) -> Option<i64> {
        let mut acc = self.product()?;
        while let Some(op @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.product()?;
            acc = if op == '+' {
                acc.checked_add(rhs)?
            } else {
                acc.checked_sub(rhs)?
            };
        }
        Some(acc)
    }

    fn product(&mut self) -> Option<i64> {
        let mut acc = self.unary()?;
        while let Some(op @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            acc = if op == '*' {
                acc.checked_mul(rhs)?
            } else {
                acc.checked_div(rhs)?
            };
        }
        Some(acc)
    }

    fn unary(&mut self) -> Option<i64> {
        if self.peek_op() == Some('-') {
            self.pos += 1;
            return self.unary()?.checked_neg();
        }
        self.atom()
    }

    fn atom(&mut self) -> Option<i64> {
        match *self.tokens.get(self.pos)? {
            Tok::Num(n) => {
                self.pos += 1;
                Some(n)
            }
            Tok::Op('(') => {
                self.pos += 1;
                let v = self.sum()?;
                if self.peek_op() != Some(')') {
                    return None;
                }
                self.pos += 1;
                Some(v)
            }
            Tok::Op(_) => None,
        }
    }
}
