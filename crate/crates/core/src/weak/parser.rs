use std::collections::{BTreeSet, HashMap, HashSet};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::WeakError;
use crate::types::Vocabulary;

const BUILTIN_RULES: &str = include_str!("../../rules/parser_rules.json");

/// Word lists driving the caption parser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParserRules {
    pub version: u32,
    pub clause_breaks: Vec<String>,
    pub determiners: BTreeSet<String>,
    pub adjectives: BTreeSet<String>,
    pub auxiliaries: BTreeSet<String>,
    pub conjunctions: BTreeSet<String>,
    pub prepositions: BTreeSet<String>,
    pub multiword_prepositions: BTreeSet<String>,
    pub verbs: BTreeSet<String>,
    pub verb_suffixes: Vec<String>,
    pub plural_suffixes: Vec<String>,
}

impl ParserRules {
    /// The rule table shipped with the crate.
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN_RULES).expect("bundled parser rules are valid")
    }

    pub fn load(path: &Path) -> Result<Self, WeakError> {
        let text = std::fs::read_to_string(path).map_err(|e| WeakError::Io(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn is_verb(&self, w: &str) -> bool {
        self.verbs.contains(w)
            || self
                .verb_suffixes
                .iter()
                .any(|s| w.len() > s.len() + 2 && w.ends_with(s.as_str()))
    }

    fn is_function(&self, w: &str) -> bool {
        self.determiners.contains(w)
            || self.auxiliaries.contains(w)
            || self.conjunctions.contains(w)
            || self.prepositions.contains(w)
            || self.is_verb(w)
    }

    fn is_preposition(&self, words: &[&str]) -> bool {
        match words {
            [] => false,
            [w] => self.prepositions.contains(*w),
            _ => self.multiword_prepositions.contains(&words.join(" ")),
        }
    }
}

/// Object and relation names the parser recognizes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    nouns: HashMap<Vec<String>, String>,
    relations: HashSet<String>,
    longest_noun: usize,
}

impl Lexicon {
    pub fn new<S: AsRef<str>>(objects: &[S], relations: &[S]) -> Self {
        let mut nouns = HashMap::new();
        let mut longest_noun = 0;
        for name in objects {
            let words: Vec<String> = name.as_ref().split_whitespace().map(str::to_lowercase).collect();
            if words.is_empty() {
                continue;
            }
            longest_noun = longest_noun.max(words.len());
            nouns.entry(words).or_insert_with(|| name.as_ref().to_string());
        }
        let relations = relations
            .iter()
            .map(|r| r.as_ref().split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
            .collect();
        Self {
            nouns,
            relations,
            longest_noun,
        }
    }

    pub fn from_vocabulary(v: &Vocabulary) -> Self {
        let mut names: Vec<&str> = v.object_names().iter().map(String::as_str).collect();
        let rels: Vec<&str> = v.relation_names().iter().map(String::as_str).collect();
        names.sort_unstable();
        Self::new(&names, &rels)
    }

    pub fn relation_names(&self) -> impl Iterator<Item = &str> {
        self.relations.iter().map(String::as_str)
    }
}

/// A `(subject, relation, object)` triplet with byte spans into the caption.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub subject_span: Range<usize>,
    pub relation_span: Range<usize>,
    pub object_span: Range<usize>,
}

#[derive(Clone, Debug)]
struct Token<'a> {
    lower: String,
    span: Range<usize>,
    _raw: &'a str,
}

#[derive(Clone, Debug)]
struct Phrase {
    name: String,
    tokens: Range<usize>,
}

/// Deterministic rule-cascade caption parser.
#[derive(Clone, Debug)]
pub struct CaptionParser {
    rules: ParserRules,
    lexicon: Lexicon,
}

impl CaptionParser {
    pub fn new(rules: ParserRules, lexicon: Lexicon) -> Self {
        Self { rules, lexicon }
    }

    pub fn rules(&self) -> &ParserRules {
        &self.rules
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn parse(&self, text: &str) -> Vec<CaptionTriplet> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for clause in self.clauses(text) {
            let nps = self.noun_phrases(&clause);
            for pair in nps.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                if let Some((relation, span)) = self.relation_between(&clause, a.tokens.end..b.tokens.start) {
                    let t = CaptionTriplet {
                        subject: a.name.clone(),
                        relation,
                        object: b.name.clone(),
                        subject_span: clause[a.tokens.start].span.start..clause[a.tokens.end - 1].span.end,
                        relation_span: span,
                        object_span: clause[b.tokens.start].span.start..clause[b.tokens.end - 1].span.end,
                    };
                    if seen.insert((t.subject.clone(), t.relation.clone(), t.object.clone())) {
                        out.push(t);
                    }
                }
            }
        }
        out
    }

    fn clauses<'a>(&self, text: &'a str) -> Vec<Vec<Token<'a>>> {
        let breaks: HashSet<char> = self.rules.clause_breaks.iter().filter_map(|s| s.chars().next()).collect();
        let mut clauses = vec![Vec::new()];
        let mut start: Option<usize> = None;
        let flush = |clauses: &mut Vec<Vec<Token<'a>>>, s: usize, e: usize| {
            let raw = &text[s..e];
            let trimmed = raw.trim_matches(|c| c == '\'' || c == '-');
            if !trimmed.is_empty() {
                let offset = raw.find(trimmed).unwrap_or(0);
                clauses.last_mut().expect("non-empty").push(Token {
                    lower: trimmed.to_lowercase(),
                    span: s + offset..s + offset + trimmed.len(),
                    _raw: trimmed,
                });
            }
        };
        for (i, c) in text.char_indices() {
            let word_char = c.is_alphanumeric() || c == '\'' || c == '-';
            if word_char {
                start.get_or_insert(i);
                continue;
            }
            if let Some(s) = start.take() {
                flush(&mut clauses, s, i);
            }
            if breaks.contains(&c) && !clauses.last().expect("non-empty").is_empty() {
                clauses.push(Vec::new());
            }
        }
        if let Some(s) = start {
            flush(&mut clauses, s, text.len());
        }
        clauses.retain(|c| !c.is_empty());
        clauses
    }

    fn singular(&self, w: &str) -> Vec<String> {
        self.rules
            .plural_suffixes
            .iter()
            .filter(|s| w.len() > s.len() + 1 && w.ends_with(s.as_str()))
            .map(|s| w[..w.len() - s.len()].to_string())
            .collect()
    }

    /// Longest lexicon noun starting at `i`, accepting a plural last word.
    fn lexicon_noun(&self, tokens: &[Token], i: usize) -> Option<(String, usize)> {
        let max = self.lexicon.longest_noun.min(tokens.len() - i);
        for len in (1..=max).rev() {
            let mut words: Vec<String> = tokens[i..i + len].iter().map(|t| t.lower.clone()).collect();
            if let Some(name) = self.lexicon.nouns.get(&words) {
                return Some((name.clone(), i + len));
            }
            let last = words.pop().expect("len ≥ 1");
            for stem in self.singular(&last) {
                words.push(stem);
                if let Some(name) = self.lexicon.nouns.get(&words) {
                    return Some((name.clone(), i + len));
                }
                words.pop();
            }
        }
        None
    }

    fn starts_multiword_preposition(&self, tokens: &[Token], i: usize) -> bool {
        (2..=4).any(|n| {
            i + n <= tokens.len() && {
                let words: Vec<&str> = tokens[i..i + n].iter().map(|t| t.lower.as_str()).collect();
                self.rules.multiword_prepositions.contains(&words.join(" "))
            }
        })
    }

    fn noun_phrases(&self, tokens: &[Token]) -> Vec<Phrase> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if let Some((name, end)) = self.lexicon_noun(tokens, i) {
                out.push(Phrase { name, tokens: i..end });
                i = end;
                continue;
            }
            // Words outside the lexicon form an open-vocabulary phrase after a determiner,
            // or bare at the start of a clause ("people standing ...").
            let determiner = self.rules.determiners.contains(&tokens[i].lower);
            let bare_start = i == 0 && !self.rules.is_function(&tokens[i].lower);
            if !determiner && !bare_start {
                i += 1;
                continue;
            }
            let mut j = if determiner { i + 1 } else { i };
            while j < tokens.len() && self.rules.adjectives.contains(&tokens[j].lower) {
                j += 1;
            }
            let run_start = j;
            while j < tokens.len()
                && !self.rules.is_function(&tokens[j].lower)
                && !self.starts_multiword_preposition(tokens, j)
                && self.lexicon_noun(tokens, j).is_none()
            {
                j += 1;
            }
            if j > run_start && (j == tokens.len() || self.lexicon_noun(tokens, j).is_none()) {
                let words: Vec<&str> = tokens[run_start..j]
                    .iter()
                    .map(|t| t.lower.as_str())
                    .filter(|w| !self.rules.adjectives.contains(*w))
                    .collect();
                if !words.is_empty() {
                    out.push(Phrase {
                        name: words.join(" "),
                        tokens: run_start..j,
                    });
                }
            }
            i = j.max(i + 1);
        }
        out
    }

    fn relation_between(&self, tokens: &[Token], gap: Range<usize>) -> Option<(String, Range<usize>)> {
        let r = &self.rules;
        if gap.is_empty() || tokens[gap.clone()].iter().any(|t| r.conjunctions.contains(&t.lower)) {
            return None;
        }
        let kept: Vec<&Token> = tokens[gap]
            .iter()
            .filter(|t| {
                !(r.determiners.contains(&t.lower) || r.adjectives.contains(&t.lower) || r.auxiliaries.contains(&t.lower))
            })
            .collect();
        let words: Vec<&str> = kept.iter().map(|t| t.lower.as_str()).collect();
        let (first, last) = (kept.first()?, kept.last()?);
        let phrase = words.join(" ");
        let accepted = self.lexicon.relations.contains(&phrase)
            || r.is_preposition(&words)
            || (r.is_verb(words[0]) && (words.len() == 1 || r.is_preposition(&words[1..])));
        accepted.then(|| (phrase, first.span.start..last.span.end))
    }
}

/// Parses with the bundled rule table.
pub fn parse_caption(text: &str, lexicon: &Lexicon) -> Vec<CaptionTriplet> {
    CaptionParser::new(ParserRules::builtin(), lexicon.clone()).parse(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> Lexicon {
        Lexicon::new(
            &["man", "skateboard", "helmet", "wheel", "horse", "fire hydrant", "table", "cup", "dog"],
            &["on", "riding", "next to", "left of"],
        )
    }

    fn triples(text: &str) -> Vec<(String, String, String)> {
        parse_caption(text, &lex())
            .into_iter()
            .map(|t| (t.subject, t.relation, t.object))
            .collect()
    }

    fn t(s: &str, r: &str, o: &str) -> (String, String, String) {
        (s.into(), r.into(), o.into())
    }

    #[test]
    fn basic_patterns() {
        assert_eq!(triples("a man riding a skateboard"), vec![t("man", "riding", "skateboard")]);
        assert_eq!(triples("man riding skateboard"), vec![t("man", "riding", "skateboard")]);
        assert!(triples("").is_empty());
        assert_eq!(
            triples("the helmet on the man and a wheel on the skateboard"),
            vec![t("helmet", "on", "man"), t("wheel", "on", "skateboard")]
        );
    }

    #[test]
    fn verbs_prepositions_and_plurals() {
        assert_eq!(triples("A man is sitting on a horse."), vec![t("man", "sitting on", "horse")]);
        assert_eq!(triples("two cups on the table"), vec![t("cup", "on", "table")]);
        assert_eq!(triples("a dog next to a fire hydrant"), vec![t("dog", "next to", "fire hydrant")]);
        assert_eq!(triples("the cup is to the left of the dog"), vec![t("cup", "to left of", "dog")]);
        assert_eq!(triples("a man with a red umbrella"), vec![t("man", "with", "umbrella")]);
    }

    #[test]
    fn clauses_and_duplicates() {
        assert_eq!(
            triples("a man riding a horse, a man riding a horse; the dog near the table"),
            vec![t("man", "riding", "horse"), t("dog", "near", "table")]
        );
        assert!(triples("a man. riding a horse").is_empty());
        assert!(triples("a man quickly eating").is_empty());
        assert_eq!(triples("people standing next to a dog"), vec![t("people", "standing next to", "dog")]);
    }

    #[test]
    fn spans_point_into_caption() {
        let text = "The helmet is on the big man";
        let ts = parse_caption(text, &lex());
        assert_eq!(ts.len(), 1);
        assert_eq!(&text[ts[0].subject_span.clone()], "helmet");
        assert_eq!(&text[ts[0].relation_span.clone()], "on");
        assert_eq!(&text[ts[0].object_span.clone()], "man");
    }

    #[test]
    fn rules_version_and_round_trip() {
        let r = ParserRules::builtin();
        assert_eq!(r.version, 1);
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<ParserRules>(&s).unwrap(), r);
    }
}
