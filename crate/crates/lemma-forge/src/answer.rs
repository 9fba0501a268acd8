//! Final-answer extraction, normalization, equivalence checking, and
//! Pass@1 / Majority@k scoring.
//!
//! Answers are compared exactly: numeric forms are reduced to rationals and
//! compared by value, everything else by canonical string. There is no
//! float tolerance and no symbolic algebra.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnswerError {
    #[error("answer is empty after stripping wrappers")]
    Normalization,
    #[error("prediction count {predictions} does not match gold count {golds}")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("item {index} has an empty sample list")]
    EmptySamples { index: usize },
    #[error("no items to score")]
    EmptyInput,
}

/// Exact fraction in lowest terms. Denominator is always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rational {
    pub numerator: i128,
    pub denominator: i128,
}

impl Rational {
    pub fn new(numerator: i128, denominator: i128) -> Option<Self> {
        if denominator == 0 {
            return None;
        }
        let sign: i128 = if (numerator < 0) != (denominator < 0) && numerator != 0 {
            -1
        } else {
            1
        };
        let num = numerator.unsigned_abs();
        let den = denominator.unsigned_abs();
        let g = gcd(num, den);
        Some(Rational {
            numerator: sign * i128::try_from(num / g).ok()?,
            denominator: i128::try_from(den / g).ok()?,
        })
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    if a == 0 {
        1
    } else {
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Rational,
    Decimal,
    Expression,
    Text,
}

/// A final answer after normalization. `canonical` carries no currency
/// symbols, thousands separators, leading '+', or surrounding latex wrappers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub kind: AnswerKind,
    pub canonical: String,
    pub rational_value: Option<Rational>,
}

const TRAILING_PUNCT: &[char] = &['.', '!', '?', ',', ';', ':'];

/// Strips terminal punctuation, but stops at an ellipsis: "0.333..." marks
/// a repeating/truncated form and must not collapse to "0.333".
fn strip_trailing_punct(s: &str) -> &str {
    let mut cur = s.trim_end();
    loop {
        if cur.ends_with("...") || cur.ends_with('…') {
            return cur;
        }
        let stripped = cur.strip_suffix(TRAILING_PUNCT).map(str::trim_end);
        match stripped {
            Some(next) => cur = next,
            None => return cur,
        }
    }
}

/// Content of the last `\boxed{...}` group, if any.
fn last_boxed_content(text: &str) -> Option<&str> {
    let marker = "\\boxed{";
    let start = text.rfind(marker)?;
    let inner = &text[start + marker.len()..];
    let mut depth = 1usize;
    for (i, c) in inner.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&inner[..i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Pulls the raw final answer out of a chain-of-thought generation.
///
/// Priority order: the tail of the last "The answer is" line (with or
/// without a colon), then the content of the last `\boxed{...}`, then none.
/// Trailing punctuation is stripped from the result.
pub fn extract_final_answer(text: &str) -> Option<String> {
    let lower = text.to_lowercase();
    let needle = "the answer is";

    let mut positions = Vec::new();
    let mut from = 0;
    while let Some(i) = lower[from..].find(needle) {
        positions.push(from + i);
        from += i + needle.len();
    }
    for &pos in positions.iter().rev() {
        let mut tail = &text[pos + needle.len()..];
        tail = tail.trim_start();
        tail = tail.strip_prefix(':').unwrap_or(tail);
        let line = tail.lines().next().unwrap_or("").trim();
        let cleaned = strip_trailing_punct(line);
        if !cleaned.is_empty() {
            return Some(cleaned.to_string());
        }
    }

    last_boxed_content(text).and_then(|c| {
        let cleaned = strip_trailing_punct(c.trim());
        if cleaned.is_empty() {
            None
        } else {
            Some(cleaned.to_string())
        }
    })
}

/// Removes `\text{...}` wrappers, keeping the inner content.
fn strip_text_wrappers(s: &str) -> String {
    let mut out = s.to_string();
    while let Some(start) = out.find("\\text{") {
        let inner_start = start + "\\text{".len();
        let mut depth = 1usize;
        let mut end = None;
        for (i, c) in out[inner_start..].char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(inner_start + i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(e) => {
                let inner = out[inner_start..e].to_string();
                out.replace_range(start..=e, &inner);
            }
            None => break,
        }
    }
    out
}

/// Unwraps a whole-string `\boxed{...}`, repeatedly.
fn unwrap_boxed(s: &str) -> String {
    let mut cur = s.trim().to_string();
    loop {
        let t = cur.trim();
        if let Some(rest) = t.strip_prefix("\\boxed{") {
            if let Some(stripped) = rest.strip_suffix('}') {
                // Only unwrap when the braces actually close at the end.
                let mut depth = 1i32;
                let mut balanced = true;
                for c in stripped.chars() {
                    match c {
                        '{' => depth += 1,
                        '}' => {
                            depth -= 1;
                            if depth == 0 {
                                balanced = false;
                                break;
                            }
                        }
                        _ => {}
                    }
                }
                if balanced {
                    cur = stripped.trim().to_string();
                    continue;
                }
            }
        }
        return cur;
    }
}

/// Drops commas that act as thousands separators (digit before, exactly
/// three digits after, not followed by a fourth digit).
fn strip_thousands_separators(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == ',' {
            let prev_digit = i > 0 && chars[i - 1].is_ascii_digit();
            let next3 = chars.get(i + 1).is_some_and(|c| c.is_ascii_digit())
                && chars.get(i + 2).is_some_and(|c| c.is_ascii_digit())
                && chars.get(i + 3).is_some_and(|c| c.is_ascii_digit());
            let no_fourth = !chars.get(i + 4).is_some_and(|c| c.is_ascii_digit());
            if prev_digit && next3 && no_fourth {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn parse_integer(s: &str) -> Option<Rational> {
    let t = s.strip_prefix('+').unwrap_or(s);
    if t.is_empty() || t == "-" {
        return None;
    }
    let (neg, digits) = match t.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, t),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let n: i128 = digits.parse().ok()?;
    Rational::new(if neg { -n } else { n }, 1)
}

fn parse_decimal(s: &str) -> Option<Rational> {
    let t = s.strip_prefix('+').unwrap_or(s);
    let (neg, body) = match t.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, t),
    };
    let dot = body.find('.')?;
    let (int_part, frac_part) = (&body[..dot], &body[dot + 1..]);
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if frac_part.len() > 30 {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let num: i128 = if digits.is_empty() { 0 } else { digits.parse().ok()? };
    let den = 10i128.checked_pow(frac_part.len() as u32)?;
    Rational::new(if neg { -num } else { num }, den)
}

fn parse_fraction(s: &str) -> Option<Rational> {
    // Plain a/b.
    if let Some(slash) = s.find('/') {
        let (a, b) = (s[..slash].trim(), s[slash + 1..].trim());
        if let (Some(num), Some(den)) = (parse_signed_int(a), parse_signed_int(b)) {
            return Rational::new(num, den);
        }
    }
    // \frac{a}{b} or \dfrac{a}{b} with integer arguments.
    for marker in ["\\frac", "\\dfrac", "\\tfrac"] {
        if let Some(rest) = s.strip_prefix(marker) {
            let rest = rest.trim_start();
            if let Some((a, rest2)) = read_brace_group(rest) {
                let rest2 = rest2.trim_start();
                if let Some((b, tail)) = read_brace_group(rest2) {
                    if tail.trim().is_empty() {
                        if let (Some(num), Some(den)) =
                            (parse_signed_int(a.trim()), parse_signed_int(b.trim()))
                        {
                            return Rational::new(num, den);
                        }
                    }
                }
            }
        }
    }
    None
}

fn parse_signed_int(s: &str) -> Option<i128> {
    let t = s.strip_prefix('+').unwrap_or(s);
    let (neg, digits) = match t.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, t),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let n: i128 = digits.parse().ok()?;
    Some(if neg { -n } else { n })
}

fn read_brace_group(s: &str) -> Option<(&str, &str)> {
    let rest = s.strip_prefix('{')?;
    let mut depth = 1usize;
    for (i, c) in rest.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((&rest[..i], &rest[i + 1..]));
                }
            }
            _ => {}
        }
    }
    None
}

/// Renders a rational whose reduced denominator divides a power of ten as a
/// minimal decimal string.
fn render_decimal(r: Rational) -> String {
    let neg = r.numerator < 0;
    let num = r.numerator.unsigned_abs();
    let den = r.denominator.unsigned_abs();
    let int_part = num / den;
    let mut rem = num % den;
    let mut frac = String::new();
    while rem != 0 && frac.len() < 64 {
        rem *= 10;
        frac.push(char::from(b'0' + (rem / den) as u8));
        rem %= den;
    }
    let sign = if neg { "-" } else { "" };
    if frac.is_empty() {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{frac}")
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn looks_mathy(s: &str) -> bool {
    s.chars().any(|c| {
        c.is_ascii_digit()
            || matches!(c, '\\' | '^' | '_' | '{' | '}' | '=' | '+' | '*' | '/' | '(' | ')' | '√' | 'π' | '%')
    })
}

/// Strips a trailing run of unit words ("dollars", "square units") when a
/// pure number remains in front of them.
fn strip_unit_words(s: &str) -> &str {
    let mut parts = s.split_whitespace();
    let first = match parts.next() {
        Some(f) => f,
        None => return s,
    };
    let rest: Vec<&str> = parts.collect();
    if rest.is_empty() {
        return s;
    }
    let numberlike = parse_integer(first).is_some()
        || parse_decimal(first).is_some()
        || parse_fraction(first).is_some();
    let all_units = rest
        .iter()
        .all(|w| w.len() >= 2 && w.chars().all(|c| c.is_alphabetic()));
    if numberlike && all_units {
        first
    } else {
        s
    }
}

/// Normalizes a raw answer string into a comparable form.
pub fn normalize_answer(raw: &str) -> Result<NormalizedAnswer, AnswerError> {
    let mut s = raw.trim().to_string();
    s = s.replace("\\$", "");
    s = s.replace('$', "");
    s = strip_text_wrappers(&s);
    s = unwrap_boxed(&s);
    s = strip_thousands_separators(&s);
    let s = strip_trailing_punct(s.trim()).to_string();
    let s = strip_unit_words(&s).to_string();
    let s = s.trim().to_string();
    if s.is_empty() {
        return Err(AnswerError::Normalization);
    }
    let s = s.strip_prefix('+').unwrap_or(&s).trim().to_string();
    if s.is_empty() {
        return Err(AnswerError::Normalization);
    }

    if let Some(r) = parse_integer(&s) {
        return Ok(NormalizedAnswer {
            kind: AnswerKind::Rational,
            canonical: render_decimal(r),
            rational_value: Some(r),
        });
    }
    if let Some(r) = parse_decimal(&s) {
        return Ok(NormalizedAnswer {
            kind: AnswerKind::Decimal,
            canonical: render_decimal(r),
            rational_value: Some(r),
        });
    }
    if let Some(r) = parse_fraction(&s) {
        let canonical = if r.denominator == 1 {
            render_decimal(r)
        } else {
            format!("{}/{}", r.numerator, r.denominator)
        };
        return Ok(NormalizedAnswer {
            kind: AnswerKind::Rational,
            canonical,
            rational_value: Some(r),
        });
    }

    let collapsed = collapse_whitespace(&s);
    if collapsed.is_empty() {
        return Err(AnswerError::Normalization);
    }
    let kind = if looks_mathy(&collapsed) {
        AnswerKind::Expression
    } else {
        AnswerKind::Text
    };
    Ok(NormalizedAnswer {
        kind,
        canonical: collapsed,
        rational_value: None,
    })
}

fn squash_for_compare(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != '{' && *c != '}')
        .collect()
}

/// Exact equivalence: equal rational values, or canonical strings equal
/// after whitespace/brace normalization. Symmetric and reflexive.
pub fn answers_equivalent(a: &NormalizedAnswer, b: &NormalizedAnswer) -> bool {
    if let (Some(x), Some(y)) = (a.rational_value, b.rational_value) {
        return x == y;
    }
    squash_for_compare(&a.canonical) == squash_for_compare(&b.canonical)
}

fn prediction_correct(prediction: &str, gold: &str) -> bool {
    let gold_norm = match normalize_answer(gold) {
        Ok(g) => g,
        Err(_) => return false,
    };
    match extract_final_answer(prediction).and_then(|raw| normalize_answer(&raw).ok()) {
        Some(pred) => answers_equivalent(&pred, &gold_norm),
        None => false,
    }
}

/// Fraction of items whose extracted final answer is equivalent to gold.
pub fn score_pass_at_1<S: AsRef<str>, G: AsRef<str>>(
    predictions: &[S],
    golds: &[G],
) -> Result<f64, AnswerError> {
    if predictions.len() != golds.len() {
        return Err(AnswerError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if predictions.is_empty() {
        return Err(AnswerError::EmptyInput);
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| prediction_correct(p.as_ref(), g.as_ref()))
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum VoteKey {
    Value(Rational),
    Canon(String),
}

fn vote_key(ans: &NormalizedAnswer) -> VoteKey {
    match ans.rational_value {
        Some(r) => VoteKey::Value(r),
        None => VoteKey::Canon(squash_for_compare(&ans.canonical)),
    }
}

/// Majority vote over each item's samples; ties break toward the earliest
/// sample. An item is correct when the winning vote is equivalent to gold.
pub fn score_majority_at_k<S: AsRef<str>, G: AsRef<str>>(
    samples_per_item: &[Vec<S>],
    golds: &[G],
) -> Result<f64, AnswerError> {
    if samples_per_item.len() != golds.len() {
        return Err(AnswerError::LengthMismatch {
            predictions: samples_per_item.len(),
            golds: golds.len(),
        });
    }
    if samples_per_item.is_empty() {
        return Err(AnswerError::EmptyInput);
    }
    for (index, samples) in samples_per_item.iter().enumerate() {
        if samples.is_empty() {
            return Err(AnswerError::EmptySamples { index });
        }
    }

    let mut correct = 0usize;
    for (samples, gold) in samples_per_item.iter().zip(golds) {
        let mut counts: HashMap<VoteKey, (usize, usize, NormalizedAnswer)> = HashMap::new();
        for (i, sample) in samples.iter().enumerate() {
            let Some(ans) =
                extract_final_answer(sample.as_ref()).and_then(|raw| normalize_answer(&raw).ok())
            else {
                continue;
            };
            let entry = counts.entry(vote_key(&ans)).or_insert((0, i, ans));
            entry.0 += 1;
        }
        let winner = counts
            .values()
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
            .map(|(_, _, ans)| ans.clone());
        if let (Some(vote), Ok(gold_norm)) = (winner, normalize_answer(gold.as_ref())) {
            if answers_equivalent(&vote, &gold_norm) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples_per_item.len() as f64)
}
