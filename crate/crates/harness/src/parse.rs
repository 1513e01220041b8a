//! Raw model text to canonical answers.

use segbench_core::model::{Answer, AnswerType, MarkerColor};

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    before: Option<char>,
    after: Option<char>,
}

fn tokens(raw: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut prev: Option<char> = None;
    let mut before = None;
    for (i, c) in raw.char_indices() {
        if c.is_ascii_alphanumeric() {
            if start.is_none() {
                start = Some(i);
                before = prev;
            }
        } else if let Some(s) = start.take() {
            out.push(Token { text: &raw[s..i], before, after: Some(c) });
        }
        prev = Some(c);
    }
    if let Some(s) = start {
        out.push(Token { text: &raw[s..], before, after: None });
    }
    out
}

/// A lowercase standalone "a" is usually the article, so it only counts as
/// an option letter when decorated like one: "(a", "a)", "a.", "a:" at the
/// end, or after "answer"/"option".
fn is_option_letter(tokens: &[Token], i: usize) -> Option<u8> {
    let t = tokens[i];
    let c = t.text.chars().next()?;
    if t.text.len() != 1 {
        return None;
    }
    let index = match c.to_ascii_uppercase() {
        'A' => 0,
        'B' => 1,
        'C' => 2,
        'D' => 3,
        _ => return None,
    };
    if c != 'a' {
        return Some(index);
    }
    let decorated = matches!(t.before, Some('(') | Some('[') | Some('*') | Some('"') | Some('\''))
        || matches!(t.after, Some(')') | Some(']') | Some(':') | Some('*') | Some('"') | Some('\''))
        || (matches!(t.after, None | Some('.')) && tokens.len() == 1)
        || (i > 0 && matches!(tokens[i - 1].text.to_ascii_lowercase().as_str(), "answer" | "option" | "choice"));
    decorated.then_some(index)
}

fn first_integer(raw: &str, tokens: &[Token]) -> Option<u64> {
    let base = raw.as_ptr() as usize;
    for t in tokens {
        if !t.text.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let start = t.text.as_ptr() as usize - base;
        let end = start + t.text.len();
        let bytes = raw.as_bytes();
        let negative = t.before == Some('-');
        let fractional_tail = t.after == Some('.') && bytes.get(end + 1).is_some_and(u8::is_ascii_digit);
        let fractional_head = t.before == Some('.') && start >= 2 && bytes[start - 2].is_ascii_digit();
        if negative || fractional_tail || fractional_head {
            continue;
        }
        if let Ok(n) = t.text.parse::<u64>() {
            return Some(n);
        }
    }
    None
}

/// Extracts the first answer candidate of the requested type; `None` when
/// the text holds no candidate.
pub fn parse_answer(raw: &str, answer_type: AnswerType) -> Option<Answer> {
    let toks = tokens(raw);
    match answer_type {
        AnswerType::Quiz4 => (0..toks.len()).find_map(|i| is_option_letter(&toks, i)).map(Answer::Choice),
        AnswerType::Binary => toks.iter().find_map(|t| match t.text.to_ascii_lowercase().as_str() {
            "yes" => Some(Answer::Yes),
            "no" => Some(Answer::No),
            _ => None,
        }),
        AnswerType::Color => toks.iter().find_map(|t| match t.text.to_ascii_lowercase().as_str() {
            "red" => Some(Answer::Color(MarkerColor::Red)),
            "green" => Some(Answer::Color(MarkerColor::Green)),
            _ => None,
        }),
        AnswerType::Count => first_integer(raw, &toks).map(Answer::Count),
    }
}
