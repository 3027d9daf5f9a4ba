//! Fixed 256-entry synthetic vocabulary and the word/ID tokenizer.
//!
//! Token ids are laid out in contiguous regions so domain and style signal
//! are measurable by construction:
//!
//! | ids       | region                         |
//! |-----------|--------------------------------|
//! | 0         | end-of-sequence                |
//! | 1         | unknown word                   |
//! | 2..=63    | shared filler words            |
//! | 64..=95   | security domain keywords       |
//! | 96..=127  | code domain keywords           |
//! | 128..=159 | data domain keywords           |
//! | 160..=191 | general domain keywords        |
//! | 192..=255 | style trait words              |
//!
//! Tokenization is case-insensitive whole-word matching over text split at
//! whitespace and punctuation; unknown words map to [`UNK`]. There is no BPE
//! and no ambiguity: `detokenize(tokenize(s))` normalizes case and spacing
//! only.

use crate::numerics::TokenId;
use std::collections::HashMap;
use std::sync::OnceLock;

pub const VOCAB_SIZE: usize = 256;
pub const EOS: TokenId = 0;
pub const UNK: TokenId = 1;
pub const FILLER_START: TokenId = 2;
pub const DOMAIN_REGION_LEN: usize = 32;
pub const STYLE_START: TokenId = 192;

pub const DOMAIN_COUNT: usize = 4;
pub const DOMAIN_NAMES: [&str; DOMAIN_COUNT] = ["security", "code", "data", "general"];

const FILLER: [&str; 62] = [
    "the", "a", "an", "of", "to", "in", "on", "for", "with", "and", "or", "but", "is", "are",
    "was", "be", "been", "it", "this", "that", "these", "those", "we", "you", "they", "he", "she",
    "i", "my", "your", "our", "their", "at", "by", "from", "as", "if", "then", "so", "not", "no",
    "yes", "all", "some", "any", "each", "more", "most", "less", "few", "now", "here", "there",
    "when", "how", "what", "which", "who", "why", "can", "may", "will",
];

const SECURITY: [&str; 32] = [
    "firewall", "exploit", "breach", "malware", "encryption", "vulnerability", "patch", "audit",
    "intrusion", "phishing", "ransomware", "authentication", "authorization", "certificate",
    "cipher", "keylogger", "botnet", "sandbox", "honeypot", "forensics", "payload", "rootkit",
    "spoofing", "trojan", "backdoor", "mitigation", "hardening", "compliance", "credential",
    "threat", "zeroday", "antivirus",
];

const CODE: [&str; 32] = [
    "function", "variable", "compiler", "debugger", "refactor", "repository", "commit", "branch",
    "merge", "loop", "array", "pointer", "recursion", "interface", "module", "runtime", "syntax",
    "algorithm", "framework", "library", "closure", "inheritance", "polymorphism", "iterator",
    "exception", "thread", "mutex", "linker", "bytecode", "namespace", "template", "operator",
];

const DATA: [&str; 32] = [
    "query", "table", "schema", "index", "database", "aggregate", "join", "partition", "column",
    "row", "transaction", "rollback", "cursor", "view", "trigger", "procedure", "warehouse",
    "pipeline", "dataset", "dashboard", "metric", "histogram", "median", "quartile", "regression",
    "correlation", "sample", "cohort", "dimension", "granularity", "normalization", "outlier",
];

const GENERAL: [&str; 32] = [
    "weather", "travel", "recipe", "garden", "music", "history", "movie", "health", "exercise",
    "holiday", "family", "hobby", "painting", "novel", "cooking", "photography", "camping",
    "museum", "festival", "language", "culture", "geography", "astronomy", "wildlife", "ocean",
    "mountain", "river", "forest", "season", "morning", "evening", "weekend",
];

const STYLE: [&str; 64] = [
    // security_expert positive / negative
    "precisely", "rigorous", "thorough", "systematic", "verified", "exact", "strict", "formal",
    "vague", "sloppy", "casual", "loose", "rough", "informal", "hasty", "careless",
    // casual_coder positive / negative
    "simply", "quick", "handy", "breezy", "playful", "snappy", "friendly", "light",
    "tedious", "verbose", "heavy", "convoluted", "dense", "pompous", "rigid", "dull",
    // data_analyst positive / negative
    "quantified", "measured", "tabulated", "statistical", "numeric", "empirical", "weighted",
    "normalized", "anecdotal", "fuzzy", "guesswork", "speculative", "unmeasured", "qualitative",
    "approximate", "noisy",
    // general_user positive / negative
    "clearly", "helpful", "gentle", "warm", "simple", "kind", "patient", "calm", "harsh", "curt",
    "cold", "abrupt", "blunt", "rude", "brash", "snide",
];

fn words() -> &'static [&'static str; VOCAB_SIZE] {
    static WORDS: OnceLock<[&'static str; VOCAB_SIZE]> = OnceLock::new();
    WORDS.get_or_init(|| {
        let mut w = ["<pad>"; VOCAB_SIZE];
        w[0] = "<eos>";
        w[1] = "<unk>";
        let mut i = FILLER_START as usize;
        for s in FILLER {
            w[i] = s;
            i += 1;
        }
        for region in [&SECURITY, &CODE, &DATA, &GENERAL] {
            for s in region.iter() {
                w[i] = s;
                i += 1;
            }
        }
        for s in STYLE {
            w[i] = s;
            i += 1;
        }
        assert_eq!(i, VOCAB_SIZE);
        w
    })
}

fn lookup() -> &'static HashMap<&'static str, TokenId> {
    static LOOKUP: OnceLock<HashMap<&'static str, TokenId>> = OnceLock::new();
    LOOKUP.get_or_init(|| {
        let mut m = HashMap::new();
        for (i, w) in words().iter().enumerate() {
            // <eos>/<unk> are display forms only; the splitter can't produce them.
            if i >= FILLER_START as usize {
                let prev = m.insert(*w, i as TokenId);
                assert!(prev.is_none(), "duplicate vocabulary word: {w}");
            }
        }
        m
    })
}

/// Inclusive token-id range of a domain's keyword region.
pub fn domain_region(domain: usize) -> std::ops::Range<TokenId> {
    assert!(domain < DOMAIN_COUNT);
    let start = FILLER_START + FILLER.len() as TokenId + (domain * DOMAIN_REGION_LEN) as TokenId;
    start..start + DOMAIN_REGION_LEN as TokenId
}

/// The keyword strings of one domain region.
pub fn domain_keywords(domain: usize) -> Vec<String> {
    domain_region(domain)
        .map(|id| word_for(id).to_string())
        .collect()
}

pub fn word_for(id: TokenId) -> &'static str {
    words()[id as usize]
}

pub fn id_for(word: &str) -> Option<TokenId> {
    lookup().get(word).copied()
}

/// Filler token ids (shared, domain-neutral words).
pub fn filler_ids() -> Vec<TokenId> {
    (FILLER_START..FILLER_START + FILLER.len() as TokenId).collect()
}

/// Lowercases, splits at whitespace/punctuation, maps each word to its id
/// (unknown words become [`UNK`]).
pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| id_for(&w.to_lowercase()).unwrap_or(UNK))
        .collect()
}

/// Space-joined word forms of a token sequence.
pub fn detokenize(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|&t| word_for(t))
        .collect::<Vec<_>>()
        .join(" ")
}
