use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;

use super::ConceptError;
use crate::types::Vocabulary;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    Object,
    Relation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Span {
    pub name: String,
    pub kind: SpanKind,
    /// Byte range of the name in the rendered text.
    pub bytes: Range<usize>,
    /// Whitespace-token range covering the name.
    pub tokens: Range<usize>,
}

/// Rendered text prompt: `[CLS] n1. n2. [SEP] r1. r2. [SEP]` plus optional padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    text: String,
    spans: Vec<Span>,
    /// Token indices of the two `[SEP]` markers.
    separators: [usize; 2],
    token_count: usize,
}

/// A subset of vocabulary names to render, by index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PromptSubset {
    pub objects: Vec<usize>,
    pub relations: Vec<usize>,
}

impl PromptSubset {
    /// Uniformly samples up to `n_objects` / `n_relations` names, keeping vocabulary order.
    pub fn sample(vocab: &Vocabulary, n_objects: usize, n_relations: usize, rng: &mut impl Rng) -> Self {
        let pick = |len: usize, n: usize, rng: &mut dyn rand::RngCore| {
            let mut v = sample(rng, len, n.min(len)).into_vec();
            v.sort_unstable();
            v
        };
        Self {
            objects: pick(vocab.object_names().len(), n_objects, rng),
            relations: pick(vocab.relation_names().len(), n_relations, rng),
        }
    }
}

fn pick<'a>(names: &'a [String], idx: &[usize]) -> Result<Vec<&'a String>, ConceptError> {
    idx.iter()
        .map(|&i| names.get(i).ok_or(ConceptError::UnknownName(format!("index {i}"))))
        .collect()
}

struct Builder {
    text: String,
    tokens: usize,
}

impl Builder {
    fn word(&mut self, w: &str) -> Range<usize> {
        if !self.text.is_empty() {
            self.text.push(' ');
        }
        let start = self.text.len();
        self.text.push_str(w);
        self.tokens += w.split_whitespace().count();
        start..self.text.len()
    }
}

pub fn build_prompt(
    vocab: &Vocabulary,
    subset: Option<&PromptSubset>,
    pad_to: Option<usize>,
) -> Result<Prompt, ConceptError> {
    if vocab.object_names().is_empty() {
        return Err(ConceptError::EmptyVocabulary);
    }
    let (objects, relations): (Vec<&String>, Vec<&String>) = match subset {
        Some(s) => {
            if s.objects.is_empty() {
                return Err(ConceptError::EmptySubset);
            }
            (
                pick(vocab.object_names(), &s.objects)?,
                pick(vocab.relation_names(), &s.relations)?,
            )
        }
        None => (
            vocab.object_names().iter().collect(),
            vocab.relation_names().iter().collect(),
        ),
    };

    let mut b = Builder {
        text: String::new(),
        tokens: 0,
    };
    let mut spans = Vec::with_capacity(objects.len() + relations.len());
    b.word(CLS);
    let mut push_names = |b: &mut Builder, names: &[&String], kind| {
        for n in names {
            let first_token = b.tokens;
            let r = b.word(&format!("{n}."));
            spans.push(Span {
                name: (*n).clone(),
                kind,
                bytes: r.start..r.end - 1,
                tokens: first_token..b.tokens,
            });
        }
    };
    push_names(&mut b, &objects, SpanKind::Object);
    let sep0 = b.tokens;
    b.word(SEP);
    push_names(&mut b, &relations, SpanKind::Relation);
    let sep1 = b.tokens;
    b.word(SEP);
    if let Some(len) = pad_to {
        while b.tokens < len {
            b.word(PAD);
        }
    }
    Ok(Prompt {
        text: b.text,
        spans,
        separators: [sep0, sep1],
        token_count: b.tokens,
    })
}

impl Prompt {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn separators(&self) -> [usize; 2] {
        self.separators
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn object_names(&self) -> Vec<String> {
        self.names(SpanKind::Object)
    }

    pub fn relation_names(&self) -> Vec<String> {
        self.names(SpanKind::Relation)
    }

    fn names(&self, kind: SpanKind) -> Vec<String> {
        self.spans
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.name.clone())
            .collect()
    }
}
