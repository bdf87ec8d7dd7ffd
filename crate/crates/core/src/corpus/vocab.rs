use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SOS: &str = "[sos]";
pub const EOS: &str = "[eos]";
pub const PAD: &str = "[pad]";

/// The 42 printable output characters, in table order.
pub const OUTPUT_CHARS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789,.!?:'";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VocabMode {
    /// 42 characters, space, and the three special tokens (46).
    WithSpace,
    /// Exactly the 45 listed tokens; spaces are written as `separator`.
    Strict { separator: char },
}

/// Ordered character vocabulary with contiguous ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabListing", into = "VocabListing")]
pub struct CharVocabulary {
    tokens: Vec<String>,
    chars: HashMap<char, usize>,
    sos: usize,
    eos: usize,
    pad: usize,
    /// Character that stands in for a space in strict mode.
    space_alias: Option<char>,
}

impl CharVocabulary {
    pub fn new(mode: VocabMode) -> Self {
        let mut tokens: Vec<String> = OUTPUT_CHARS.chars().map(String::from).collect();
        let alias = match mode {
            VocabMode::WithSpace => {
                tokens.push(" ".into());
                None
            }
            VocabMode::Strict { separator } => Some(separator),
        };
        tokens.extend([SOS, EOS, PAD].map(String::from));
        let mut v = Self::from_tokens(tokens).expect("built-in vocabulary is valid");
        if let Some(sep) = alias {
            assert!(v.chars.contains_key(&sep), "separator {sep:?} is not an output character");
            v.space_alias = Some(sep);
        }
        v
    }

    /// Default 46-token vocabulary.
    pub fn standard() -> Self {
        Self::new(VocabMode::WithSpace)
    }

    pub fn strict() -> Self {
        Self::new(VocabMode::Strict { separator: '.' })
    }

    /// A small vocabulary over `chars` plus the special tokens, for tests.
    pub fn custom(chars: &str) -> Result<Self> {
        let mut tokens: Vec<String> = chars.chars().map(String::from).collect();
        tokens.extend([SOS, EOS, PAD].map(String::from));
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its serialized token listing.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut chars = HashMap::new();
        let (mut sos, mut eos, mut pad) = (None, None, None);
        for (i, t) in tokens.iter().enumerate() {
            match t.as_str() {
                SOS => sos = Some(i),
                EOS => eos = Some(i),
                PAD => pad = Some(i),
                _ => {
                    let mut it = t.chars();
                    let (Some(c), None) = (it.next(), it.next()) else {
                        return Err(Error::InvalidInput(format!("vocabulary token {t:?} is not a single character")));
                    };
                    if chars.insert(c, i).is_some() {
                        return Err(Error::InvalidInput(format!("duplicate vocabulary character {c:?}")));
                    }
                }
            }
        }
        let (Some(sos), Some(eos), Some(pad)) = (sos, eos, pad) else {
            return Err(Error::InvalidInput("vocabulary lacks [sos]/[eos]/[pad]".into()));
        };
        Ok(CharVocabulary {
            tokens,
            chars,
            sos,
            eos,
            pad,
            space_alias: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn sos(&self) -> usize {
        self.sos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// Tokens the decoder may emit: everything but `[sos]` and `[pad]`.
    pub fn is_emittable(&self, id: usize) -> bool {
        id != self.sos && id != self.pad
    }

    /// Characters of the vocabulary (special tokens excluded), in id order.
    pub fn characters(&self) -> Vec<char> {
        let mut v: Vec<(usize, char)> = self.chars.iter().map(|(&c, &i)| (i, c)).collect();
        v.sort_unstable();
        v.into_iter().map(|(_, c)| c).collect()
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        if c == ' ' {
            if let Some(alias) = self.space_alias {
                return self.chars.get(&alias).copied();
            }
        }
        self.chars.get(&c).copied()
    }

    /// Uppercases `text` the way transcripts are normalized before use.
    pub fn normalize(text: &str) -> String {
        text.to_uppercase()
    }

    /// Character ids of `text` without `[sos]`/`[eos]`.
    pub fn encode_chars(&self, text: &str) -> Result<Vec<usize>> {
        let norm = Self::normalize(text);
        let mut ids = Vec::with_capacity(norm.len());
        let mut bad = Vec::new();
        for c in norm.chars() {
            match self.id_of(c) {
                Some(id) => ids.push(id),
                None => {
                    if !bad.contains(&c) {
                        bad.push(c)
                    }
                }
            }
        }
        if bad.is_empty() {
            Ok(ids)
        } else {
            Err(Error::Vocabulary {
                text: text.to_string(),
                chars: bad,
            })
        }
    }

    /// Maps ids back to text, stopping at `[eos]` and skipping other specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos {
                break;
            }
            if id == self.sos || id == self.pad {
                continue;
            }
            let t = &self.tokens[id];
            match self.space_alias {
                Some(a) if t.chars().next() == Some(a) => out.push(' '),
                _ => out.push_str(t),
            }
        }
        out
    }
}

/// `[sos] c_1 … c_n [eos]` for a transcript.
pub fn encode_transcript(text: &str, vocab: &CharVocabulary) -> Result<Vec<usize>> {
    let mut ids = vec![vocab.sos()];
    ids.extend(vocab.encode_chars(text)?);
    ids.push(vocab.eos());
    Ok(ids)
}

/// Serialized form: the ordered token listing plus the strict-mode space alias.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabListing {
    tokens: Vec<String>,
    space_alias: Option<char>,
}

impl TryFrom<VocabListing> for CharVocabulary {
    type Error = Error;

    fn try_from(listing: VocabListing) -> Result<Self> {
        let mut v = Self::from_tokens(listing.tokens)?;
        if let Some(a) = listing.space_alias {
            if !v.chars.contains_key(&a) || v.chars.contains_key(&' ') {
                return Err(Error::InvalidInput(format!("invalid space alias {a:?}")));
            }
            v.space_alias = Some(a);
        }
        Ok(v)
    }
}

impl From<CharVocabulary> for VocabListing {
    fn from(v: CharVocabulary) -> Self {
        VocabListing {
            tokens: v.tokens,
            space_alias: v.space_alias,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(CharVocabulary::standard().len(), 46);
        assert_eq!(CharVocabulary::strict().len(), 45);
    }

    #[test]
    fn ids_are_contiguous() {
        let v = CharVocabulary::standard();
        let mut seen: Vec<usize> = v.characters().iter().map(|&c| v.id_of(c).unwrap()).collect();
        seen.extend([v.sos(), v.eos(), v.pad()]);
        seen.sort_unstable();
        assert_eq!(seen, (0..46).collect::<Vec<_>>());
    }

    #[test]
    fn encode_wraps_with_specials() {
        let v = CharVocabulary::standard();
        let ids = encode_transcript("AB", &v).unwrap();
        assert_eq!(ids, vec![v.sos(), v.id_of('A').unwrap(), v.id_of('B').unwrap(), v.eos()]);
        assert_eq!(encode_transcript("ab", &v).unwrap(), ids);
    }

    #[test]
    fn unknown_character_is_listed() {
        let v = CharVocabulary::standard();
        match encode_transcript("AΩB", &v) {
            Err(Error::Vocabulary { chars, .. }) => assert_eq!(chars, vec!['Ω']),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strict_mode_maps_space_to_separator() {
        let v = CharVocabulary::strict();
        let ids = v.encode_chars("A B").unwrap();
        assert_eq!(ids[1], v.id_of('.').unwrap());
        assert_eq!(v.decode(&ids), "A B");
    }

    #[test]
    fn serde_round_trip() {
        let v = CharVocabulary::standard();
        let json = serde_json::to_string(&v).unwrap();
        let back: CharVocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        let strict = CharVocabulary::strict();
        let back: CharVocabulary = serde_json::from_str(&serde_json::to_string(&strict).unwrap()).unwrap();
        assert_eq!(back.decode(&back.encode_chars("A B").unwrap()), "A B");
    }
}
