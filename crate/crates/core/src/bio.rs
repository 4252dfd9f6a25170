//! BIO tag sequences and their typed-span view.

use crate::error::{Error, Result};

/// A labeled token span; `end` is inclusive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

fn split_tag(tag: &str) -> Result<Option<(char, &str)>> {
    if tag == "O" {
        return Ok(None);
    }
    match tag.split_once('-') {
        Some((p @ ("B" | "I"), label)) if !label.is_empty() => {
            Ok(Some((p.chars().next().unwrap(), label)))
        }
        _ => Err(Error::invalid(format!(
            "unknown BIO tag {tag:?}; expected \"O\", \"B-<type>\" or \"I-<type>\""
        ))),
    }
}

/// Extract maximal typed spans from a BIO sequence, sorted by start.
///
/// Follows the conlleval conventions: an `I-X` that does not continue a
/// span of type X opens a new span (repair rule), and a type switch under
/// an `I-` prefix starts a new span.
pub fn bio_decode_spans(tags: &[impl AsRef<str>]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match split_tag(tag.as_ref())? {
            None => {
                if let Some((start, label)) = open.take() {
                    spans.push(Span { start, end: i - 1, label });
                }
            }
            Some(('B', label)) => {
                if let Some((start, old)) = open.take() {
                    spans.push(Span { start, end: i - 1, label: old });
                }
                open = Some((i, label.to_string()));
            }
            Some((_, label)) => {
                match &open {
                    Some((_, old)) if old == label => {}
                    _ => {
                        if let Some((start, old)) = open.take() {
                            spans.push(Span { start, end: i - 1, label: old });
                        }
                        open = Some((i, label.to_string()));
                    }
                }
            }
        }
    }
    if let Some((start, label)) = open {
        spans.push(Span { start, end: tags.len() - 1, label });
    }
    Ok(spans)
}

/// Encode non-overlapping spans as a BIO sequence of length `n`.
pub fn spans_to_tags(spans: &[Span], n: usize) -> Result<Vec<String>> {
    let mut tags = vec!["O".to_string(); n];
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort();
    let mut prev_end: Option<usize> = None;
    for span in sorted {
        if span.start > span.end || span.end >= n {
            return Err(Error::invalid(format!(
                "span {span:?} out of bounds for length {n}"
            )));
        }
        if let Some(pe) = prev_end {
            if span.start <= pe {
                return Err(Error::invalid(format!("span {span:?} overlaps a previous span")));
            }
        }
        tags[span.start] = format!("B-{}", span.label);
        for t in tags.iter_mut().take(span.end + 1).skip(span.start + 1) {
            *t = format!("I-{}", span.label);
        }
        prev_end = Some(span.end);
    }
    Ok(tags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn span(start: usize, end: usize, label: &str) -> Span {
        Span { start, end, label: label.to_string() }
    }

    #[test]
    fn plain_span_is_extracted() {
        let spans = bio_decode_spans(&["O", "B-X", "I-X", "O"]).unwrap();
        assert_eq!(spans, vec![span(1, 2, "X")]);
    }

    #[test]
    fn dangling_i_tag_opens_a_span() {
        let spans = bio_decode_spans(&["I-X", "I-X"]).unwrap();
        assert_eq!(spans, vec![span(0, 1, "X")]);
    }

    #[test]
    fn type_switch_under_i_prefix_starts_new_span() {
        let spans = bio_decode_spans(&["B-X", "I-Y"]).unwrap();
        assert_eq!(spans, vec![span(0, 0, "X"), span(1, 1, "Y")]);
    }

    #[test]
    fn adjacent_b_tags_are_separate_spans() {
        let spans = bio_decode_spans(&["B-X", "B-X", "I-X"]).unwrap();
        assert_eq!(spans, vec![span(0, 0, "X"), span(1, 2, "X")]);
    }

    #[test]
    fn trailing_span_is_closed() {
        let spans = bio_decode_spans(&["O", "B-X", "I-X"]).unwrap();
        assert_eq!(spans, vec![span(1, 2, "X")]);
    }

    #[test]
    fn unknown_tags_are_rejected() {
        assert!(bio_decode_spans(&["B-X", "Q-X"]).is_err());
        assert!(bio_decode_spans(&["B-"]).is_err());
        assert!(bio_decode_spans(&["o"]).is_err());
        assert!(bio_decode_spans(&["BX"]).is_err());
    }

    #[test]
    fn encoding_rejects_overlap_and_out_of_bounds() {
        assert!(spans_to_tags(&[span(0, 2, "X"), span(2, 3, "Y")], 5).is_err());
        assert!(spans_to_tags(&[span(3, 5, "X")], 5).is_err());
        assert!(spans_to_tags(&[span(2, 1, "X")], 5).is_err());
    }

    #[test]
    fn empty_sequence_has_no_spans() {
        let tags: [&str; 0] = [];
        assert_eq!(bio_decode_spans(&tags).unwrap(), vec![]);
    }

    proptest! {
        // Decoding inverts encoding for any valid non-overlapping span set.
        #[test]
        fn decode_inverts_encode(raw in prop::collection::vec((0usize..12, 0usize..4, 0usize..3), 0..5)) {
            let n = 16usize;
            let labels = ["city", "poi", "title"];
            let mut spans = Vec::new();
            let mut cursor = 0usize;
            for (gap, len, label) in raw {
                let start = cursor + gap + 1;
                let end = start + len;
                if end >= n {
                    break;
                }
                spans.push(span(start, end, labels[label]));
                cursor = end;
            }
            let tags = spans_to_tags(&spans, n).unwrap();
            let decoded = bio_decode_spans(&tags).unwrap();
            prop_assert_eq!(decoded, spans);
        }
    }
}
