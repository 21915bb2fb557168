//! Optional text-cleaning pipeline. Every step is off by default.

use serde::{Deserialize, Serialize};

pub const LINK_TAG: &str = "<link>";

/// Enabled steps always run in declaration order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningOptions {
    pub emoji_to_text: bool,
    pub lowercase: bool,
    pub link_to_tag: bool,
    pub strip_punctuation: bool,
    pub drop_words_with_digits: bool,
    pub drop_stopwords: bool,
    pub lemmatize: bool,
}

impl CleaningOptions {
    pub fn all() -> Self {
        CleaningOptions {
            emoji_to_text: true,
            lowercase: true,
            link_to_tag: true,
            strip_punctuation: true,
            drop_words_with_digits: true,
            drop_stopwords: true,
            lemmatize: true,
        }
    }

    pub fn any(&self) -> bool {
        *self != CleaningOptions::default()
    }
}

pub fn clean_text(text: &str, opts: &CleaningOptions) -> String {
    let mut s = text.to_string();
    if opts.emoji_to_text {
        s = emoji_to_text(&s);
    }
    if opts.lowercase {
        s = s.to_lowercase();
    }
    if opts.link_to_tag {
        s = map_words(&s, |w| {
            Some(if is_link(w) { LINK_TAG } else { w }.to_string())
        });
    }
    if opts.strip_punctuation {
        s = map_words(&s, |w| {
            if w == LINK_TAG {
                return Some(w.to_string());
            }
            let kept: String = w.chars().filter(|c| c.is_alphanumeric()).collect();
            (!kept.is_empty()).then_some(kept)
        });
    }
    if opts.drop_words_with_digits {
        s = map_words(&s, |w| {
            (!w.chars().any(|c| c.is_ascii_digit())).then(|| w.to_string())
        });
    }
    if opts.drop_stopwords {
        s = map_words(&s, |w| (!is_stopword(w)).then(|| w.to_string()));
    }
    if opts.lemmatize {
        s = map_words(&s, |w| Some(lemmatize(w)));
    }
    s
}

fn map_words(s: &str, f: impl Fn(&str) -> Option<String>) -> String {
    s.split_whitespace()
        .filter_map(f)
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_link(w: &str) -> bool {
    let lower = w.to_lowercase();
    ["http://", "https://", "www."]
        .iter()
        .any(|p| lower.starts_with(p))
}

pub fn is_stopword(w: &str) -> bool {
    let lower = w.to_lowercase();
    STOPWORDS.binary_search(&lower.as_str()).is_ok()
}

/// Rule-based suffix stripper for plural `-s/-es/-ies`, `-ing` and `-ed`,
/// applied until nothing changes. A rewrite that would land on a stopword is
/// refused so that cleaning stays idempotent.
pub fn lemmatize(word: &str) -> String {
    let mut w = word.to_string();
    while let Some(next) = lemma_step(&w) {
        if next == w || is_stopword(&next) {
            break;
        }
        w = next;
    }
    w
}

fn lemma_step(w: &str) -> Option<String> {
    if !w.chars().all(|c| c.is_alphabetic()) || w.chars().count() < 4 {
        return None;
    }
    let lower_ok = w.is_ascii();
    if !lower_ok {
        return None;
    }
    if let Some(stem) = w.strip_suffix("ies") {
        if stem.len() >= 2 {
            return Some(format!("{stem}y"));
        }
    }
    if let Some(stem) = w.strip_suffix("sses") {
        return Some(format!("{stem}ss"));
    }
    if let Some(stem) = w.strip_suffix("es") {
        if ["s", "x", "z", "ch", "sh"]
            .iter()
            .any(|e| stem.ends_with(e))
            && stem.len() >= 2
        {
            return Some(stem.to_string());
        }
    }
    if let Some(stem) = w.strip_suffix("ing") {
        if stem.len() >= 3 && has_vowel(stem) {
            return Some(undouble(stem));
        }
    }
    if let Some(stem) = w.strip_suffix("ed") {
        if stem.len() >= 3 && has_vowel(stem) {
            return Some(undouble(stem));
        }
    }
    if let Some(stem) = w.strip_suffix('s') {
        if !(stem.ends_with('s') || stem.ends_with('u') || stem.ends_with('i')) && stem.len() >= 3 {
            return Some(stem.to_string());
        }
    }
    None
}

fn has_vowel(s: &str) -> bool {
    s.chars()
        .any(|c| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y'))
}

fn undouble(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 2
        && b[n - 1] == b[n - 2]
        && !matches!(b[n - 1], b'l' | b's' | b'z')
        && !has_vowel(&stem[n - 1..])
    {
        stem[..n - 1].to_string()
    } else {
        stem.to_string()
    }
}

fn emoji_to_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pad_next = false;
    for c in s.chars() {
        if c == '\u{FE0F}' {
            continue;
        }
        if let Some(name) = emoji_name(c) {
            if out.chars().last().is_some_and(|p| !p.is_whitespace()) {
                out.push(' ');
            }
            out.push(':');
            out.push_str(name);
            out.push(':');
            pad_next = true;
            continue;
        }
        if pad_next && !c.is_whitespace() {
            out.push(' ');
        }
        pad_next = false;
        out.push(c);
    }
    out
}

fn emoji_name(c: char) -> Option<&'static str> {
    EMOJI.iter().find(|(e, _)| *e == c).map(|&(_, n)| n)
}

const EMOJI: [(char, &str); 50] = [
    ('😀', "grinning"),
    ('😁', "beaming"),
    ('😂', "joy"),
    ('🤣', "rofl"),
    ('😃', "smiley"),
    ('😄', "smile"),
    ('😅', "sweatsmile"),
    ('😆', "laughing"),
    ('😉', "wink"),
    ('😊', "blush"),
    ('😍', "hearteyes"),
    ('😘', "kiss"),
    ('😎', "sunglasses"),
    ('🙂', "slightsmile"),
    ('🤔', "thinking"),
    ('😐', "neutral"),
    ('😑', "expressionless"),
    ('🙄', "eyeroll"),
    ('😏', "smirk"),
    ('😒', "unamused"),
    ('😔', "pensive"),
    ('😢', "cry"),
    ('😭', "sob"),
    ('😡', "rage"),
    ('😠', "angry"),
    ('🤬', "cursing"),
    ('😱', "scream"),
    ('😳', "flushed"),
    ('🤮', "vomit"),
    ('🤡', "clown"),
    ('💀', "skull"),
    ('💩', "poop"),
    ('👍', "thumbsup"),
    ('👎', "thumbsdown"),
    ('👏', "clap"),
    ('🙏', "pray"),
    ('💪', "muscle"),
    ('👌', "okhand"),
    ('✌', "victory"),
    ('🖕', "middlefinger"),
    ('❤', "heart"),
    ('💔', "brokenheart"),
    ('💯', "hundred"),
    ('🔥', "fire"),
    ('✨', "sparkles"),
    ('🎉', "tada"),
    ('👀', "eyes"),
    ('🤷', "shrug"),
    ('🤦', "facepalm"),
    ('🐍', "snake"),
];

/// English stopword list (NLTK corpus), sorted for binary search.
const STOPWORDS: [&str; 179] = [
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "ain",
    "all",
    "am",
    "an",
    "and",
    "any",
    "are",
    "aren",
    "aren't",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "couldn",
    "couldn't",
    "d",
    "did",
    "didn",
    "didn't",
    "do",
    "does",
    "doesn",
    "doesn't",
    "doing",
    "don",
    "don't",
    "down",
    "during",
    "each",
    "few",
    "for",
    "from",
    "further",
    "had",
    "hadn",
    "hadn't",
    "has",
    "hasn",
    "hasn't",
    "have",
    "haven",
    "haven't",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "i",
    "if",
    "in",
    "into",
    "is",
    "isn",
    "isn't",
    "it",
    "it's",
    "its",
    "itself",
    "just",
    "ll",
    "m",
    "ma",
    "me",
    "mightn",
    "mightn't",
    "more",
    "most",
    "mustn",
    "mustn't",
    "my",
    "myself",
    "needn",
    "needn't",
    "no",
    "nor",
    "not",
    "now",
    "o",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "re",
    "s",
    "same",
    "shan",
    "shan't",
    "she",
    "she's",
    "should",
    "should've",
    "shouldn",
    "shouldn't",
    "so",
    "some",
    "such",
    "t",
    "than",
    "that",
    "that'll",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "ve",
    "very",
    "was",
    "wasn",
    "wasn't",
    "we",
    "were",
    "weren",
    "weren't",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "won",
    "won't",
    "wouldn",
    "wouldn't",
    "y",
    "you",
    "you'd",
    "you'll",
    "you're",
    "you've",
    "your",
    "yours",
    "yourself",
    "yourselves",
];
