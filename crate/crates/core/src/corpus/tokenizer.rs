//! Model-agnostic default tokenizer.
//!
//! Splits on whitespace runs and treats each ASCII punctuation character as
//! its own token, so counts are reproducible without any model vocabulary.

/// Byte spans of tokens in `text`, in order.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (pos, ch) in text.char_indices() {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if let Some(start) = word_start.take() {
                spans.push((start, pos));
            }
            if ch.is_ascii_punctuation() {
                spans.push((pos, pos + ch.len_utf8()));
            }
        } else if word_start.is_none() {
            word_start = Some(pos);
        }
    }
    if let Some(start) = word_start {
        spans.push((start, text.len()));
    }
    spans
}

/// Deterministic token count under the default tokenizer. Empty text is 0.
pub fn count_tokens(text: &str) -> usize {
    token_spans(text).len()
}

/// The shortest text prefix containing the first `n` tokens; never splits a
/// token. `n = 0` yields the empty string; `n` past the end yields all of
/// `text` up to the last token's end.
pub fn prefix_by_tokens(text: &str, n: usize) -> &str {
    if n == 0 {
        return "";
    }
    let spans = token_spans(text);
    match spans.get(n - 1).or(spans.last()) {
        Some(&(_, end)) => &text[..end],
        None => "",
    }
}
