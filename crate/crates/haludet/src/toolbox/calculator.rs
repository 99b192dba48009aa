//! Exact arithmetic evaluator behind the `calculator` tool.
//!
//! Expressions are evaluated over arbitrary-precision rationals so that
//! decimal inputs like `0.5` contribute exactly and verdicts about numeric
//! claims never hinge on float rounding. Only a non-integer exponent drops
//! the computation into approximate (f64) mode.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum CalcValue {
    Exact(BigRational),
    Approx(f64),
}

impl CalcValue {
    pub fn to_f64(&self) -> f64 {
        match self {
            CalcValue::Exact(r) => r.to_f64().unwrap_or(f64::NAN),
            CalcValue::Approx(f) => *f,
        }
    }

    pub fn as_exact(&self) -> Option<&BigRational> {
        match self {
            CalcValue::Exact(r) => Some(r),
            CalcValue::Approx(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CalcError {
    #[error("empty formula")]
    Empty,
    #[error("cannot parse formula at byte {position}: {detail}")]
    Parse { position: usize, detail: String },
    #[error("division by zero")]
    DivisionByZero,
    #[error("numeric overflow: {0}")]
    Overflow(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(BigRational),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    Percent,
    LParen,
    RParen,
}

fn tokenize(formula: &str) -> Result<Vec<(usize, Token)>, CalcError> {
    let mut tokens = Vec::new();
    let bytes: Vec<char> = formula.chars().collect();
    let mut i = 0usize;
    while i < bytes.len() {
        let c = bytes[i];
        let parse_err = |detail: &str| CalcError::Parse {
            position: i,
            detail: detail.to_string(),
        };
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
            }
            '+' => {
                tokens.push((i, Token::Plus));
                i += 1;
            }
            // U+2212 is the typographic minus sometimes emitted by models.
            '-' | '\u{2212}' => {
                tokens.push((i, Token::Minus));
                i += 1;
            }
            '*' | '\u{d7}' => {
                if c == '*' && bytes.get(i + 1) == Some(&'*') {
                    tokens.push((i, Token::Caret));
                    i += 2;
                } else {
                    tokens.push((i, Token::Star));
                    i += 1;
                }
            }
            '/' | '\u{f7}' => {
                tokens.push((i, Token::Slash));
                i += 1;
            }
            '^' => {
                tokens.push((i, Token::Caret));
                i += 1;
            }
            '%' => {
                tokens.push((i, Token::Percent));
                i += 1;
            }
            '(' => {
                tokens.push((i, Token::LParen));
                i += 1;
            }
            ')' => {
                tokens.push((i, Token::RParen));
                i += 1;
            }
            '=' => {
                return Err(parse_err(
                    "formula contains '='; pass a single expression and compare sides separately",
                ));
            }
            '0'..='9' | '.' => {
                let start = i;
                let mut int_digits = String::new();
                let mut frac_digits = String::new();
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    int_digits.push(bytes[i]);
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == '.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        frac_digits.push(bytes[i]);
                        i += 1;
                    }
                }
                if int_digits.is_empty() && frac_digits.is_empty() {
                    return Err(CalcError::Parse {
                        position: start,
                        detail: "expected digits around '.'".to_string(),
                    });
                }
                let mut exponent: i64 = 0;
                if i < bytes.len() && (bytes[i] == 'e' || bytes[i] == 'E') {
                    let mut j = i + 1;
                    let mut sign = 1i64;
                    if j < bytes.len() && (bytes[j] == '+' || bytes[j] == '-') {
                        if bytes[j] == '-' {
                            sign = -1;
                        }
                        j += 1;
                    }
                    let mut exp_digits = String::new();
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        exp_digits.push(bytes[j]);
                        j += 1;
                    }
                    if !exp_digits.is_empty() {
                        let magnitude: i64 = exp_digits.parse().map_err(|_| CalcError::Parse {
                            position: i,
                            detail: "exponent out of range".to_string(),
                        })?;
                        if magnitude > 4096 {
                            return Err(CalcError::Overflow("decimal exponent too large".into()));
                        }
                        exponent = sign * magnitude;
                        i = j;
                    }
                }
                let digits = format!(
                    "{}{}",
                    if int_digits.is_empty() {
                        "0"
                    } else {
                        &int_digits
                    },
                    frac_digits
                );
                let numer: BigInt = digits.parse().expect("digit string");
                let mut value = BigRational::new(numer, pow10(frac_digits.len() as i64));
                if exponent != 0 {
                    let scale = pow10(exponent.abs());
                    if exponent > 0 {
                        value *= BigRational::from_integer(scale);
                    } else {
                        value /= BigRational::from_integer(scale);
                    }
                }
                tokens.push((start, Token::Number(value)));
            }
            other => {
                return Err(parse_err(&format!("unexpected character {other:?}")));
            }
        }
    }
    Ok(tokens)
}

fn pow10(exp: i64) -> BigInt {
    let mut out = BigInt::one();
    let ten = BigInt::from(10);
    for _ in 0..exp {
        out *= &ten;
    }
    out
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    input_len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn next(&mut self) -> Option<Token> {
        let tok = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        if tok.is_some() {
            self.pos += 1;
        }
        tok
    }

    fn position(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|(p, _)| *p)
            .unwrap_or(self.input_len)
    }

    fn error(&self, detail: &str) -> CalcError {
        CalcError::Parse {
            position: self.position(),
            detail: detail.to_string(),
        }
    }

    fn expr(&mut self) -> Result<CalcValue, CalcError> {
        let mut value = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.next();
                    value = add(value, self.term()?);
                }
                Some(Token::Minus) => {
                    self.next();
                    value = sub(value, self.term()?);
                }
                _ => return Ok(value),
            }
        }
    }

    fn term(&mut self) -> Result<CalcValue, CalcError> {
        let mut value = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.next();
                    value = mul(value, self.unary()?);
                }
                Some(Token::Slash) => {
                    self.next();
                    value = div(value, self.unary()?)?;
                }
                _ => return Ok(value),
            }
        }
    }

    // Unary minus binds looser than '^' so that -3^2 reads as -(3^2).
    fn unary(&mut self) -> Result<CalcValue, CalcError> {
        if matches!(self.peek(), Some(Token::Minus)) {
            self.next();
            return Ok(neg(self.unary()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<CalcValue, CalcError> {
        let base = self.postfix()?;
        if matches!(self.peek(), Some(Token::Caret)) {
            self.next();
            let exponent = self.unary()?;
            return pow(base, exponent);
        }
        Ok(base)
    }

    fn postfix(&mut self) -> Result<CalcValue, CalcError> {
        let mut value = self.primary()?;
        if matches!(self.peek(), Some(Token::Percent)) {
            self.next();
            value = div(
                value,
                CalcValue::Exact(BigRational::from_integer(100.into())),
            )?;
        }
        Ok(value)
    }

    fn primary(&mut self) -> Result<CalcValue, CalcError> {
        match self.next() {
            Some(Token::Number(n)) => Ok(CalcValue::Exact(n)),
            Some(Token::LParen) => {
                let value = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(value),
                    _ => Err(self.error("expected ')'")),
                }
            }
            Some(other) => Err(self.error(&format!("unexpected token {other:?}"))),
            None => Err(self.error("unexpected end of formula")),
        }
    }
}

fn add(a: CalcValue, b: CalcValue) -> CalcValue {
    match (a, b) {
        (CalcValue::Exact(x), CalcValue::Exact(y)) => CalcValue::Exact(x + y),
        (x, y) => CalcValue::Approx(x.to_f64() + y.to_f64()),
    }
}

fn sub(a: CalcValue, b: CalcValue) -> CalcValue {
    match (a, b) {
        (CalcValue::Exact(x), CalcValue::Exact(y)) => CalcValue::Exact(x - y),
        (x, y) => CalcValue::Approx(x.to_f64() - y.to_f64()),
    }
}

fn mul(a: CalcValue, b: CalcValue) -> CalcValue {
    match (a, b) {
        (CalcValue::Exact(x), CalcValue::Exact(y)) => CalcValue::Exact(x * y),
        (x, y) => CalcValue::Approx(x.to_f64() * y.to_f64()),
    }
}

fn div(a: CalcValue, b: CalcValue) -> Result<CalcValue, CalcError> {
    match (a, b) {
        (CalcValue::Exact(x), CalcValue::Exact(y)) => {
            if y.is_zero() {
                Err(CalcError::DivisionByZero)
            } else {
                Ok(CalcValue::Exact(x / y))
            }
        }
        (x, y) => {
            let denom = y.to_f64();
            if denom == 0.0 {
                Err(CalcError::DivisionByZero)
            } else {
                Ok(CalcValue::Approx(x.to_f64() / denom))
            }
        }
    }
}

fn neg(a: CalcValue) -> CalcValue {
    match a {
        CalcValue::Exact(x) => CalcValue::Exact(-x),
        CalcValue::Approx(x) => CalcValue::Approx(-x),
    }
}

const MAX_EXACT_EXPONENT: i64 = 1024;

fn pow(base: CalcValue, exponent: CalcValue) -> Result<CalcValue, CalcError> {
    if let (CalcValue::Exact(b), CalcValue::Exact(e)) = (&base, &exponent) {
        if e.is_integer() {
            let exp = e
                .to_integer()
                .to_i64()
                .filter(|n| n.abs() <= MAX_EXACT_EXPONENT)
                .ok_or_else(|| CalcError::Overflow("exponent too large".to_string()))?;
            return pow_exact(b, exp);
        }
    }
    let value = base.to_f64().powf(exponent.to_f64());
    if value.is_nan() || value.is_infinite() {
        return Err(CalcError::Overflow(
            "power is not a finite number".to_string(),
        ));
    }
    Ok(CalcValue::Approx(value))
}

fn pow_exact(base: &BigRational, exp: i64) -> Result<CalcValue, CalcError> {
    if exp < 0 && base.is_zero() {
        return Err(CalcError::DivisionByZero);
    }
    let mut result = BigRational::one();
    let mut factor = base.clone();
    let mut remaining = exp.unsigned_abs();
    while remaining > 0 {
        if remaining & 1 == 1 {
            result *= &factor;
        }
        remaining >>= 1;
        if remaining > 0 {
            factor = &factor * &factor;
        }
    }
    if exp < 0 {
        result = BigRational::one() / result;
    }
    Ok(CalcValue::Exact(result))
}

/// Evaluate an arithmetic formula. Supports + - * / ^ (and the `**`
/// spelling), unary minus, parentheses, a postfix `%`, decimal literals,
/// and scientific notation.
pub fn evaluate(formula: &str) -> Result<CalcValue, CalcError> {
    let tokens = tokenize(formula)?;
    if tokens.is_empty() {
        return Err(CalcError::Empty);
    }
    let mut parser = Parser {
        tokens,
        pos: 0,
        input_len: formula.len(),
    };
    let value = parser.expr()?;
    if parser.pos != parser.tokens.len() {
        return Err(parser.error("trailing input after expression"));
    }
    Ok(value)
}

/// Collect the plain numeric literals (digits with an optional decimal
/// part) appearing in arbitrary text, as exact rationals. Tolerant of
/// surrounding words and symbols; signs are not attached.
pub fn scan_numbers(text: &str) -> Vec<BigRational> {
    let mut out = Vec::new();
    let mut current = String::new();
    for c in text.chars().chain(std::iter::once('\u{0}')) {
        if c.is_ascii_digit() || (c == '.' && !current.is_empty() && !current.contains('.')) {
            current.push(c);
            continue;
        }
        if !current.is_empty() {
            let literal = current.trim_end_matches('.');
            if !literal.is_empty() {
                if let Ok(CalcValue::Exact(r)) = evaluate(literal) {
                    out.push(r);
                }
            }
            current.clear();
        }
    }
    out
}

/// Render a value the way the tool reports it: integers plainly,
/// terminating decimals exactly, everything else as a reduced fraction.
pub fn format_value(value: &CalcValue) -> String {
    match value {
        CalcValue::Exact(r) => format_rational(r),
        CalcValue::Approx(f) => format!("{f}"),
    }
}

fn format_rational(r: &BigRational) -> String {
    if r.is_integer() {
        return r.to_integer().to_string();
    }
    if let Some((twos, fives)) = decimal_denominator(r.denom()) {
        let scale = twos.max(fives);
        let mut scaled = r.numer() * pow10(scale);
        scaled /= r.denom();
        let negative = scaled.is_negative();
        let digits = scaled.abs().to_string();
        let digits = if (digits.len() as i64) <= scale {
            format!(
                "{}{}",
                "0".repeat((scale + 1 - digits.len() as i64) as usize),
                digits
            )
        } else {
            digits
        };
        let split = digits.len() - scale as usize;
        let (int_part, frac_part) = digits.split_at(split);
        return format!("{}{int_part}.{frac_part}", if negative { "-" } else { "" });
    }
    format!("{}/{}", r.numer(), r.denom())
}

/// If `denom` is of the form 2^a * 5^b, return (a, b).
fn decimal_denominator(denom: &BigInt) -> Option<(i64, i64)> {
    let mut rest = denom.abs();
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    let mut twos = 0i64;
    let mut fives = 0i64;
    while (&rest % &two).is_zero() {
        rest /= &two;
        twos += 1;
    }
    while (&rest % &five).is_zero() {
        rest /= &five;
        fives += 1;
    }
    if rest.is_one() {
        Some((twos, fives))
    } else {
        None
    }
}
