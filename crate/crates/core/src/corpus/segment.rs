//! Deterministic sentence segmentation.
//!
//! Boundaries are placed after sentence-final punctuation (`.`, `!`, `?`)
//! followed by whitespace, and at blank-line paragraph breaks. A boundary is
//! suppressed when the candidate sits inside an inline math region (between
//! paired `$` delimiters), when a period is part of a decimal number
//! (digit-period-digit), or when a period follows a single-letter
//! abbreviation. Offsets are byte offsets into UTF-8 text; candidates are only
//! examined at character boundaries.

use super::{CorpusError, SentenceSpan};

/// Split reasoning text into ordered, non-overlapping sentence spans.
///
/// The spans cover every non-whitespace character and each span's text is a
/// literal substring of the input. Same text always yields the same spans.
pub fn segment_sentences(text: &str) -> Result<Vec<SentenceSpan>, CorpusError> {
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyTrajectory);
    }

    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let math = math_regions(&chars);

    let mut cuts: Vec<usize> = Vec::new();
    for (i, &(pos, ch)) in chars.iter().enumerate() {
        match ch {
            '.' | '!' | '?' => {
                let next = chars.get(i + 1).map(|&(_, c)| c);
                let followed_by_ws = matches!(next, Some(c) if c.is_whitespace());
                if !followed_by_ws || in_math(&math, pos) {
                    continue;
                }
                if ch == '.' {
                    let prev = i.checked_sub(1).map(|j| chars[j].1);
                    let prev_digit = matches!(prev, Some(c) if c.is_ascii_digit());
                    let next_digit = matches!(next, Some(c) if c.is_ascii_digit());
                    if prev_digit && next_digit {
                        continue; // decimal point
                    }
                    if is_single_letter_word(&chars, i) {
                        continue; // initials like "J. K. Rowling"
                    }
                }
                // Cut lands on the whitespace char right after the punctuation.
                cuts.push(pos + ch.len_utf8());
            }
            '\n' => {
                // Paragraph break: a whitespace run containing a second newline.
                if let Some(&(next_pos, _)) = chars.get(i + 1) {
                    let run = &text[next_pos..];
                    let run_ws: &str = &run[..run
                        .char_indices()
                        .find(|(_, c)| !c.is_whitespace())
                        .map(|(o, _)| o)
                        .unwrap_or(run.len())];
                    if run_ws.contains('\n') {
                        cuts.push(pos);
                    }
                }
            }
            _ => {}
        }
    }
    cuts.sort_unstable();
    cuts.dedup();

    let mut spans = Vec::new();
    let mut seg_start = 0usize;
    for cut in cuts.into_iter().chain(std::iter::once(text.len())) {
        if let Some(span) = trim_segment(text, seg_start, cut) {
            spans.push(span);
        }
        seg_start = cut;
    }
    for (k, span) in spans.iter_mut().enumerate() {
        span.index = k + 1;
    }
    debug_assert!(!spans.is_empty());
    Ok(spans)
}

/// Trim whitespace off both ends of `text[start..end]`; None if nothing left.
fn trim_segment(text: &str, start: usize, end: usize) -> Option<SentenceSpan> {
    let seg = &text[start..end];
    let lead = seg
        .char_indices()
        .find(|(_, c)| !c.is_whitespace())
        .map(|(o, _)| o)?;
    let trail = seg
        .char_indices()
        .rev()
        .find(|(_, c)| !c.is_whitespace())
        .map(|(o, c)| o + c.len_utf8())
        .unwrap();
    Some(SentenceSpan {
        start: start + lead,
        end: start + trail,
        index: 0,
    })
}

/// Byte ranges of paired `$...$` regions, delimiters included. An unpaired
/// trailing `$` opens no region.
fn math_regions(chars: &[(usize, char)]) -> Vec<(usize, usize)> {
    let dollars: Vec<usize> = chars
        .iter()
        .filter(|&&(_, c)| c == '$')
        .map(|&(p, _)| p)
        .collect();
    dollars.chunks_exact(2).map(|w| (w[0], w[1])).collect()
}

fn in_math(regions: &[(usize, usize)], pos: usize) -> bool {
    regions.iter().any(|&(a, b)| pos > a && pos < b)
}

/// True when the char right before `chars[i]` is a lone letter (word of
/// length one), so "J." is treated as an initial rather than a sentence end.
fn is_single_letter_word(chars: &[(usize, char)], i: usize) -> bool {
    if i == 0 {
        return false;
    }
    let prev = chars[i - 1].1;
    if !prev.is_alphabetic() {
        return false;
    }
    match i.checked_sub(2) {
        None => true,
        Some(j) => chars[j].1.is_whitespace(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(input: &str) -> Vec<&str> {
        segment_sentences(input)
            .unwrap()
            .into_iter()
            .map(|s| &input[s.start..s.end])
            .collect()
    }

    #[test]
    fn three_terminal_punctuations() {
        assert_eq!(
            texts("A is true. B follows! Done?"),
            vec!["A is true.", "B follows!", "Done?"]
        );
    }

    // Hand-enumerated: the only boundary candidate followed by whitespace is
    // the period after "pi"; the period in "3.14" is flanked by digits.
    #[test]
    fn decimal_point_is_not_a_boundary() {
        assert_eq!(
            texts("The value 3.14 is pi. Next step."),
            vec!["The value 3.14 is pi.", "Next step."]
        );
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(
            segment_sentences(""),
            Err(CorpusError::EmptyTrajectory)
        ));
        assert!(matches!(
            segment_sentences(" \t\n"),
            Err(CorpusError::EmptyTrajectory)
        ));
    }

    #[test]
    fn paragraph_break_without_punctuation() {
        assert_eq!(
            texts("first block\n\nsecond block"),
            vec!["first block", "second block"]
        );
    }

    #[test]
    fn inline_math_suppresses_boundaries() {
        assert_eq!(
            texts("Let $x. y$ hold. Done."),
            vec!["Let $x. y$ hold.", "Done."]
        );
    }

    #[test]
    fn single_letter_abbreviation() {
        assert_eq!(texts("J. K. Rowling wrote. Yes."), vec![
            "J. K. Rowling wrote.",
            "Yes."
        ]);
    }

    #[test]
    fn no_terminal_punctuation_is_one_sentence() {
        assert_eq!(texts("no punctuation here"), vec!["no punctuation here"]);
    }

    #[test]
    fn unpaired_dollar_does_not_eat_the_rest() {
        assert_eq!(texts("Cost is $5. Fine."), vec!["Cost is $5.", "Fine."]);
    }

    #[test]
    fn spans_cover_all_non_whitespace() {
        let input = "One. Two!\n\nThree $a. b$ four? Five 3.14 six.";
        let spans = segment_sentences(input).unwrap();
        let mut covered = vec![false; input.len()];
        for s in &spans {
            for flag in &mut covered[s.start..s.end] {
                *flag = true;
            }
        }
        for (i, ch) in input.char_indices() {
            if !ch.is_whitespace() {
                assert!(covered[i], "byte {i} ({ch:?}) not covered");
            }
        }
        // Indices are 1..m contiguous and spans are increasing.
        for (k, s) in spans.iter().enumerate() {
            assert_eq!(s.index, k + 1);
            assert!(s.start < s.end);
            if k > 0 {
                assert!(spans[k - 1].end <= s.start);
            }
        }
    }

    #[test]
    fn segmentation_is_deterministic() {
        let input = "Alpha one. Beta two! Gamma?\n\nDelta.";
        assert_eq!(segment_sentences(input).unwrap(), segment_sentences(input).unwrap());
    }
}
