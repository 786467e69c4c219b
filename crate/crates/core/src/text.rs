//! Tokenization and stemming shared by indexing, re-ranking stubs and metrics.

pub const TOKENIZER_VERSION: &str = "alnum-lower/1";

/// Lowercases `text` and splits it on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase().filter(|l| l.is_alphanumeric()));
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// A deterministic, idempotent token normaliser.
pub trait Stemmer: Send + Sync {
    fn name(&self) -> &'static str;
    fn stem(&self, token: &str) -> String;
}

/// Inflectional stemmer built from the plural, past-tense/gerund and
/// terminal-y steps of the Porter algorithm.
///
/// Derivational suffixes are left alone so stems stay readable words
/// ("satellites" -> "satellite"). The steps are applied until a fixpoint,
/// which makes the stemmer idempotent.
#[derive(Debug, Clone, Copy, Default)]
pub struct InflectionalStemmer;

const MAX_PASSES: usize = 8;

impl Stemmer for InflectionalStemmer {
    fn name(&self) -> &'static str {
        "porter-inflectional/1"
    }

    fn stem(&self, token: &str) -> String {
        if token.len() <= 2 || !token.bytes().all(|b| b.is_ascii_lowercase()) {
            return token.to_string();
        }
        let mut word = token.as_bytes().to_vec();
        for _ in 0..MAX_PASSES {
            let next = porter_step1(&word);
            if next == word {
                break;
            }
            word = next;
        }
        String::from_utf8(word).expect("ascii in, ascii out")
    }
}

/// Tokenize then stem.
pub fn analyze(text: &str, stemmer: &dyn Stemmer) -> Vec<String> {
    tokenize(text).iter().map(|t| stemmer.stem(t)).collect()
}

fn is_consonant(w: &[u8], i: usize) -> bool {
    match w[i] {
        b'a' | b'e' | b'i' | b'o' | b'u' => false,
        b'y' => i == 0 || !is_consonant(w, i - 1),
        _ => true,
    }
}

/// Number of VC sequences in `w`.
fn measure(w: &[u8]) -> usize {
    let mut m = 0;
    let mut i = 0;
    let n = w.len();
    while i < n && is_consonant(w, i) {
        i += 1;
    }
    loop {
        while i < n && !is_consonant(w, i) {
            i += 1;
        }
        if i >= n {
            return m;
        }
        while i < n && is_consonant(w, i) {
            i += 1;
        }
        m += 1;
    }
}

fn has_vowel(w: &[u8]) -> bool {
    (0..w.len()).any(|i| !is_consonant(w, i))
}

fn ends_double_consonant(w: &[u8]) -> bool {
    let n = w.len();
    n >= 2 && w[n - 1] == w[n - 2] && is_consonant(w, n - 1)
}

/// consonant-vowel-consonant ending where the last consonant is not w, x or y.
fn ends_cvc(w: &[u8]) -> bool {
    let n = w.len();
    n >= 3
        && is_consonant(w, n - 3)
        && !is_consonant(w, n - 2)
        && is_consonant(w, n - 1)
        && !matches!(w[n - 1], b'w' | b'x' | b'y')
}

fn porter_step1(word: &[u8]) -> Vec<u8> {
    let mut w = word.to_vec();

    // plurals
    if w.ends_with(b"sses") || w.ends_with(b"ies") {
        w.truncate(w.len() - 2);
    } else if w.ends_with(b"s") && !w.ends_with(b"ss") && w.len() > 3 {
        w.pop();
    }

    // -eed, -ed, -ing
    let mut trimmed = false;
    if w.ends_with(b"eed") {
        if measure(&w[..w.len() - 3]) > 0 {
            w.pop();
        }
    } else if w.ends_with(b"ed") && has_vowel(&w[..w.len() - 2]) {
        w.truncate(w.len() - 2);
        trimmed = true;
    } else if w.ends_with(b"ing") && has_vowel(&w[..w.len() - 3]) {
        w.truncate(w.len() - 3);
        trimmed = true;
    }
    if trimmed {
        if w.ends_with(b"at") || w.ends_with(b"bl") || w.ends_with(b"iz") {
            w.push(b'e');
        } else if ends_double_consonant(&w) && !matches!(w[w.len() - 1], b'l' | b's' | b'z') {
            w.pop();
        } else if measure(&w) == 1 && ends_cvc(&w) {
            w.push(b'e');
        }
    }

    // terminal y
    if w.len() > 2 && w.ends_with(b"y") && has_vowel(&w[..w.len() - 1]) {
        let n = w.len();
        w[n - 1] = b'i';
    }
    w
}
