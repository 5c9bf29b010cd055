//! CoNLL-style corpora: reading, tag-scheme validation and conversion, and
//! entity span extraction.
//!
//! Files hold one token per line with the surface in the first column and the
//! tag in the last one; blank lines separate sentences and `-DOCSTART-` lines
//! are skipped. Both BIO and BIOES tag schemes are understood.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";
const DOCSTART: &str = "-DOCSTART-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TagScheme {
    #[default]
    Bio,
    Bioes,
}

impl TagScheme {
    fn allows(self, prefix: Prefix) -> bool {
        match self {
            TagScheme::Bio => matches!(prefix, Prefix::Begin | Prefix::Inside),
            TagScheme::Bioes => true,
        }
    }
}

impl fmt::Display for TagScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagScheme::Bio => f.write_str("BIO"),
            TagScheme::Bioes => f.write_str("BIOES"),
        }
    }
}

impl FromStr for TagScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BIO" | "IOB" | "IOB2" => Ok(TagScheme::Bio),
            "BIOES" | "IOBES" => Ok(TagScheme::Bioes),
            _ => Err(Error::Config(format!("unknown tag scheme `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Prefix {
    Begin,
    Inside,
    End,
    Single,
}

/// A tag split into its chunk role and entity type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag<'a> {
    Outside,
    Chunk(Prefix, &'a str),
}

impl<'a> Tag<'a> {
    fn parse(tag: &'a str) -> Option<Self> {
        if tag == OUTSIDE {
            return Some(Tag::Outside);
        }
        let (prefix, etype) = tag.split_once('-')?;
        if etype.is_empty() {
            return None;
        }
        let prefix = match prefix {
            "B" => Prefix::Begin,
            "I" => Prefix::Inside,
            "E" => Prefix::End,
            "S" => Prefix::Single,
            _ => return None,
        };
        Some(Tag::Chunk(prefix, etype))
    }
}

/// Entity type of a tag, `None` for `O` and unparseable tags.
pub fn entity_type(tag: &str) -> Option<&str> {
    match Tag::parse(tag)? {
        Tag::Outside => None,
        Tag::Chunk(_, etype) => Some(etype),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.surface.as_str())
    }

    pub fn tags(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.tag.as_str()).collect()
    }

    /// Builds a sentence from parallel surface/tag lists.
    pub fn from_pairs<S: AsRef<str>, T: AsRef<str>>(surfaces: &[S], tags: &[T]) -> Self {
        assert_eq!(surfaces.len(), tags.len());
        Sentence {
            tokens: surfaces
                .iter()
                .zip(tags)
                .map(|(s, t)| Token {
                    surface: s.as_ref().to_string(),
                    tag: t.as_ref().to_string(),
                })
                .collect(),
        }
    }
}

/// An immutable collection of tagged sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sentences: Vec<Sentence>,
    tag_set: Vec<String>,
    entity_types: Vec<String>,
    scheme: TagScheme,
}

impl Dataset {
    pub fn new(sentences: Vec<Sentence>, scheme: TagScheme) -> Self {
        let mut tags: BTreeSet<String> = BTreeSet::new();
        tags.insert(OUTSIDE.to_string());
        let mut types: BTreeSet<String> = BTreeSet::new();
        for token in sentences.iter().flat_map(|s| &s.tokens) {
            tags.insert(token.tag.clone());
            if let Some(t) = entity_type(&token.tag) {
                types.insert(t.to_string());
            }
        }
        Dataset {
            sentences,
            tag_set: tags.into_iter().collect(),
            entity_types: types.into_iter().collect(),
            scheme,
        }
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn tag_set(&self) -> &[String] {
        &self.tag_set
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn scheme(&self) -> TagScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// Concatenates two datasets. Both must use the same scheme.
    pub fn merge(&self, other: &Dataset) -> Result<Dataset> {
        if self.scheme != other.scheme {
            return Err(Error::Config(format!(
                "cannot merge {} data with {} data",
                self.scheme, other.scheme
            )));
        }
        let mut sentences = self.sentences.clone();
        sentences.extend(other.sentences.iter().cloned());
        Ok(Dataset::new(sentences, self.scheme))
    }

    /// Re-tags every sentence in BIO. Ill-formed sequences are repaired first.
    pub fn to_bio(&self) -> Dataset {
        let sentences = self
            .sentences
            .iter()
            .map(|s| {
                let tags = s.tags();
                let bio = match self.scheme {
                    TagScheme::Bio => repair_bio(&tags),
                    TagScheme::Bioes => spans_to_tags(&extract_spans_bioes(&tags), tags.len(), TagScheme::Bio),
                };
                let surfaces: Vec<&str> = s.surfaces().collect();
                Sentence::from_pairs(&surfaces, &bio)
            })
            .collect();
        Dataset::new(sentences, TagScheme::Bio)
    }
}

/// Reads a CoNLL file, validating every tag against `scheme`.
pub fn read_conll(path: impl AsRef<Path>, scheme: TagScheme) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_of_byte(e.as_bytes(), e.utf8_error().valid_up_to()),
        message: "file is not valid UTF-8".into(),
    })?;
    parse_conll(&text, path, scheme)
}

fn line_of_byte(bytes: &[u8], offset: usize) -> usize {
    bytes[..offset].iter().filter(|&&b| b == b'\n').count() + 1
}

/// Parses CoNLL text; `origin` is only used in error messages.
pub fn parse_conll(text: &str, origin: impl AsRef<Path>, scheme: TagScheme) -> Result<Dataset> {
    let origin = origin.as_ref();
    let mut sentences = Vec::new();
    let mut current: Vec<Token> = Vec::new();

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let mut columns = line.split([' ', '\t']).filter(|c| !c.is_empty());
        let Some(surface) = columns.next() else {
            flush(&mut current, &mut sentences);
            continue;
        };
        if surface == DOCSTART {
            flush(&mut current, &mut sentences);
            continue;
        }
        let Some(tag) = columns.next_back() else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                message: format!("expected at least 2 columns, found `{}`", line.trim()),
            });
        };
        let valid = match Tag::parse(tag) {
            Some(Tag::Outside) => true,
            Some(Tag::Chunk(prefix, _)) => scheme.allows(prefix),
            None => false,
        };
        if !valid {
            return Err(Error::InvalidTag {
                path: origin.to_path_buf(),
                line: lineno,
                tag: tag.to_string(),
                scheme: scheme.to_string(),
            });
        }
        current.push(Token {
            surface: surface.to_string(),
            tag: tag.to_string(),
        });
    }
    flush(&mut current, &mut sentences);

    if sentences.is_empty() {
        return Err(Error::Empty(format!("{} contains no sentences", origin.display())));
    }
    Ok(Dataset::new(sentences, scheme))
}

fn flush(current: &mut Vec<Token>, sentences: &mut Vec<Sentence>) {
    if !current.is_empty() {
        sentences.push(Sentence {
            tokens: std::mem::take(current),
        });
    }
}

/// Reads token surfaces only (first column); any tag column is ignored.
pub fn read_tokens(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        match line.split([' ', '\t']).find(|c| !c.is_empty()) {
            None => {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
            }
            Some(DOCSTART) => {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
            }
            Some(surface) => current.push(surface.to_string()),
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{} contains no sentences", path.display())));
    }
    Ok(out)
}

/// Checks that a tag sequence is well formed in `scheme`.
pub fn validate_sequence<S: AsRef<str>>(tags: &[S], scheme: TagScheme) -> bool {
    let mut open: Option<&str> = None;
    for tag in tags {
        let Some(tag) = Tag::parse(tag.as_ref()) else {
            return false;
        };
        match (scheme, tag) {
            (_, Tag::Outside) => {
                if scheme == TagScheme::Bioes && open.is_some() {
                    return false;
                }
                open = None;
            }
            (TagScheme::Bio, Tag::Chunk(Prefix::Begin, t)) => open = Some(t),
            (TagScheme::Bio, Tag::Chunk(Prefix::Inside, t)) => {
                if open != Some(t) {
                    return false;
                }
            }
            (TagScheme::Bio, Tag::Chunk(..)) => return false,
            (TagScheme::Bioes, Tag::Chunk(prefix, t)) => match prefix {
                Prefix::Begin | Prefix::Single if open.is_some() => return false,
                Prefix::Begin => open = Some(t),
                Prefix::Single => {}
                Prefix::Inside if open != Some(t) => return false,
                Prefix::Inside => {}
                Prefix::End if open != Some(t) => return false,
                Prefix::End => open = None,
            },
        }
    }
    scheme == TagScheme::Bio || open.is_none()
}

/// Converts a well-formed sequence between schemes without changing its spans.
pub fn convert_scheme<S: AsRef<str>>(tags: &[S], from: TagScheme, to: TagScheme) -> Result<Vec<String>> {
    if !validate_sequence(tags, from) {
        let shown: Vec<&str> = tags.iter().map(AsRef::as_ref).collect();
        return Err(Error::InvalidSequence(format!("{shown:?} is not valid {from}")));
    }
    if from == to {
        return Ok(tags.iter().map(|t| t.as_ref().to_string()).collect());
    }
    let spans = match from {
        TagScheme::Bio => extract_spans(tags),
        TagScheme::Bioes => extract_spans_bioes(tags),
    };
    Ok(spans_to_tags(&spans, tags.len(), to))
}

/// A typed entity covering tokens `start..=end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: impl Into<String>) -> Self {
        EntitySpan {
            start,
            end,
            etype: etype.into(),
        }
    }
}

/// Applies the conlleval repair: an `I-X` that does not continue an `X`
/// chunk becomes `B-X`. Unparseable tags become `O`.
pub fn repair_bio<S: AsRef<str>>(tags: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tags.len());
    let mut open: Option<String> = None;
    for tag in tags {
        match Tag::parse(tag.as_ref()) {
            Some(Tag::Chunk(Prefix::Inside, t)) if open.as_deref() == Some(t) => {
                out.push(format!("I-{t}"));
            }
            Some(Tag::Chunk(Prefix::Begin | Prefix::Inside, t)) => {
                out.push(format!("B-{t}"));
                open = Some(t.to_string());
            }
            _ => {
                out.push(OUTSIDE.to_string());
                open = None;
            }
        }
    }
    out
}

/// Extracts maximal chunks from BIO tags, repairing dangling `I-` first.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Vec<EntitySpan> {
    let repaired = repair_bio(tags);
    let mut spans: Vec<EntitySpan> = Vec::new();
    for (i, tag) in repaired.iter().enumerate() {
        match Tag::parse(tag) {
            Some(Tag::Chunk(Prefix::Begin, t)) => spans.push(EntitySpan::new(i, i, t)),
            Some(Tag::Chunk(Prefix::Inside, _)) => {
                if let Some(last) = spans.last_mut() {
                    last.end = i;
                }
            }
            _ => {}
        }
    }
    spans
}

fn extract_spans_bioes<S: AsRef<str>>(tags: &[S]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, tag) in tags.iter().enumerate() {
        match Tag::parse(tag.as_ref()) {
            Some(Tag::Chunk(Prefix::Single, t)) => {
                spans.push(EntitySpan::new(i, i, t));
                start = None;
            }
            Some(Tag::Chunk(Prefix::Begin, _)) => start = Some(i),
            Some(Tag::Chunk(Prefix::End, t)) => {
                if let Some(s) = start.take() {
                    spans.push(EntitySpan::new(s, i, t));
                }
            }
            Some(Tag::Chunk(Prefix::Inside, _)) => {}
            _ => start = None,
        }
    }
    spans
}

/// Renders non-overlapping spans back into a tag sequence of length `len`.
pub fn spans_to_tags(spans: &[EntitySpan], len: usize, scheme: TagScheme) -> Vec<String> {
    let mut tags = vec![OUTSIDE.to_string(); len];
    for span in spans {
        let t = &span.etype;
        match scheme {
            TagScheme::Bio => {
                tags[span.start] = format!("B-{t}");
                for tag in &mut tags[span.start + 1..=span.end] {
                    *tag = format!("I-{t}");
                }
            }
            TagScheme::Bioes if span.start == span.end => tags[span.start] = format!("S-{t}"),
            TagScheme::Bioes => {
                tags[span.start] = format!("B-{t}");
                for tag in &mut tags[span.start + 1..span.end] {
                    *tag = format!("I-{t}");
                }
                tags[span.end] = format!("E-{t}");
            }
        }
    }
    tags
}

impl Dataset {
    pub fn describe(&self, origin: &Path) -> String {
        format!(
            "{}: {} sentences, {} tokens, types [{}]",
            origin.display(),
            self.len(),
            self.token_count(),
            self.entity_types.join(", ")
        )
    }

    /// Two-column CoNLL text that [`parse_conll`] reads back unchanged.
    pub fn to_conll(&self) -> String {
        format_conll(self.sentences.iter().map(|s| {
            s.tokens
                .iter()
                .map(|t| (t.surface.as_str(), t.tag.as_str()))
                .collect::<Vec<_>>()
        }))
    }
}

/// `surface tag` lines, one blank line after each sentence.
pub fn format_conll<I, S, T>(sentences: I) -> String
where
    I: IntoIterator<Item = Vec<(S, T)>>,
    S: AsRef<str>,
    T: AsRef<str>,
{
    let mut out = String::new();
    for sentence in sentences {
        for (surface, tag) in sentence {
            out.push_str(surface.as_ref());
            out.push(' ');
            out.push_str(tag.as_ref());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Dataset> {
        parse_conll(text, "test.conll", TagScheme::Bio)
    }

    #[test]
    fn reads_two_sentences() {
        let data = parse("He O\nate O\n\naspirin B-Chemical\n").unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.tag_set(), ["B-Chemical", "O"]);
        assert_eq!(data.entity_types(), ["Chemical"]);
    }

    #[test]
    fn skips_docstart() {
        let data = parse("-DOCSTART- O\n\nx O\n").unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.sentences()[0].surfaces().collect::<Vec<_>>(), ["x"]);
    }

    #[test]
    fn single_column_is_a_parse_error() {
        match parse("badline\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_tag_reports_line_and_tag() {
        let err = parse("a O\nb X-D\n").unwrap_err();
        match err {
            Error::InvalidTag { line, tag, .. } => {
                assert_eq!(line, 2);
                assert_eq!(tag, "X-D");
            }
            other => panic!("{other:?}"),
        }
        // E- is not part of BIO
        assert!(matches!(parse("a E-D\n"), Err(Error::InvalidTag { .. })));
        assert!(parse_conll("a E-D\n", "t", TagScheme::Bioes).is_ok());
    }

    #[test]
    fn middle_columns_tabs_and_crlf() {
        let data = parse("EU\tNNP B-NP  B-ORG\r\nrejects VBZ B-VP O\r\n\r\n\r\n\nx O").unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.sentences()[0].tags(), ["B-ORG", "O"]);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse(""), Err(Error::Empty(_))));
        assert!(matches!(parse("\n\n-DOCSTART- O\n"), Err(Error::Empty(_))));
    }

    #[test]
    fn validate_examples() {
        assert!(validate_sequence(&["B-D", "I-D", "O"], TagScheme::Bio));
        assert!(!validate_sequence(&["I-D", "O"], TagScheme::Bio));
        assert!(!validate_sequence(&["B-C", "I-D"], TagScheme::Bio));
        assert!(validate_sequence(&["B-D", "E-D", "S-C"], TagScheme::Bioes));
        assert!(!validate_sequence(&["B-D", "I-D"], TagScheme::Bioes));
        assert!(!validate_sequence(&["B-D", "O"], TagScheme::Bioes));
        assert!(!validate_sequence(&["B-D", "S-D", "E-D"], TagScheme::Bioes));
        assert!(!validate_sequence(&["E-D"], TagScheme::Bioes));
    }

    #[test]
    fn convert_examples() {
        assert_eq!(
            convert_scheme(&["B-D", "I-D", "I-D"], TagScheme::Bio, TagScheme::Bioes).unwrap(),
            ["B-D", "I-D", "E-D"]
        );
        assert_eq!(convert_scheme(&["S-D"], TagScheme::Bioes, TagScheme::Bio).unwrap(), ["B-D"]);
        assert_eq!(
            convert_scheme(&["B-D", "B-D", "O"], TagScheme::Bio, TagScheme::Bioes).unwrap(),
            ["S-D", "S-D", "O"]
        );
        assert!(convert_scheme(&["I-D"], TagScheme::Bio, TagScheme::Bioes).is_err());
    }

    #[test]
    fn span_examples() {
        assert_eq!(
            extract_spans(&["B-D", "I-D", "O", "B-C"]),
            [EntitySpan::new(0, 1, "D"), EntitySpan::new(3, 3, "C")]
        );
        assert!(extract_spans(&["O", "O"]).is_empty());
        // dangling I opens a new chunk
        assert_eq!(
            extract_spans(&["I-D", "I-D", "B-D"]),
            [EntitySpan::new(0, 1, "D"), EntitySpan::new(2, 2, "D")]
        );
        assert_eq!(
            extract_spans(&["B-C", "I-D"]),
            [EntitySpan::new(0, 0, "C"), EntitySpan::new(1, 1, "D")]
        );
    }

    #[test]
    fn bioes_dataset_converts_to_bio() {
        let data = parse_conll("a B-D\nb E-D\nc S-C\n", "t", TagScheme::Bioes).unwrap();
        let bio = data.to_bio();
        assert_eq!(bio.scheme(), TagScheme::Bio);
        assert_eq!(bio.sentences()[0].tags(), ["B-D", "I-D", "B-C"]);
    }

    pub(crate) fn valid_bio() -> impl Strategy<Value = Vec<String>> {
        // each position: 0 => O, 1 => B, 2 => I (if possible); type from 3
        prop::collection::vec((0u8..3, 0u8..3), 1..20).prop_map(|steps| {
            let mut out: Vec<String> = Vec::new();
            let mut open: Option<u8> = None;
            for (kind, ty) in steps {
                let name = ["A", "B", "C"][ty as usize];
                match (kind, open) {
                    (2, Some(t)) => out.push(format!("I-{}", ["A", "B", "C"][t as usize])),
                    (0, _) => {
                        out.push("O".into());
                        open = None;
                    }
                    _ => {
                        out.push(format!("B-{name}"));
                        open = Some(ty);
                    }
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn bio_round_trips_through_bioes(tags in valid_bio()) {
            let bioes = convert_scheme(&tags, TagScheme::Bio, TagScheme::Bioes).unwrap();
            prop_assert!(validate_sequence(&bioes, TagScheme::Bioes));
            let back = convert_scheme(&bioes, TagScheme::Bioes, TagScheme::Bio).unwrap();
            prop_assert_eq!(back, tags);
        }

        #[test]
        fn spans_reconstruct_valid_bio(tags in valid_bio()) {
            let spans = extract_spans(&tags);
            prop_assert_eq!(spans_to_tags(&spans, tags.len(), TagScheme::Bio), tags.clone());
            let begins = tags.iter().filter(|t| t.starts_with("B-")).count();
            prop_assert_eq!(spans.len(), begins);
        }

        #[test]
        fn repair_always_yields_valid_bio(raw in prop::collection::vec(
            prop::sample::select(vec!["O", "B-A", "I-A", "B-B", "I-B"]), 1..15)) {
            let repaired = repair_bio(&raw);
            prop_assert!(validate_sequence(&repaired, TagScheme::Bio));
            let begins = repaired.iter().filter(|t| t.starts_with("B-")).count();
            prop_assert_eq!(extract_spans(&raw).len(), begins);
        }

        #[test]
        fn conll_text_round_trips(tags in valid_bio()) {
            let words: Vec<String> = (0..tags.len()).map(|i| format!("w{i}")).collect();
            let data = Dataset::new(vec![Sentence::from_pairs(&words, &tags)], TagScheme::Bio);
            let back = parse(&data.to_conll()).unwrap();
            prop_assert_eq!(back.sentences(), data.sentences());
        }

        #[test]
        fn sentence_count_matches_blocks(blocks in prop::collection::vec(1usize..5, 1..8), gaps in 1usize..3) {
            let mut text = String::new();
            for (b, n) in blocks.iter().enumerate() {
                for i in 0..*n {
                    text.push_str(&format!("w{b}_{i} O\n"));
                }
                text.push_str(&"\n".repeat(gaps));
            }
            let data = parse(&text).unwrap();
            prop_assert_eq!(data.len(), blocks.len());
        }
    }
}
