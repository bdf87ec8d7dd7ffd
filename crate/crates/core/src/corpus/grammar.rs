use rand::Rng;
use serde::{Deserialize, Serialize};

/// Six-slot command grammar: verb, color, preposition, letter, digit, adverb.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grammar {
    pub slots: Vec<Vec<String>>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|w| w.to_string()).collect()
}

impl Default for Grammar {
    fn default() -> Self {
        let letters: Vec<String> = ('A'..='Z').filter(|&c| c != 'W').map(String::from).collect();
        let digits: Vec<String> = ('0'..='9').map(String::from).collect();
        Grammar {
            slots: vec![
                words(&["BIN", "LAY", "PLACE", "SET"]),
                words(&["BLUE", "GREEN", "RED", "WHITE"]),
                words(&["AT", "BY", "IN", "WITH"]),
                letters,
                digits,
                words(&["AGAIN", "NOW", "PLEASE", "SOON"]),
            ],
        }
    }
}

impl Grammar {
    /// Number of distinct sentences the grammar can produce.
    pub fn sentence_count(&self) -> u64 {
        self.slots.iter().map(|s| s.len() as u64).product()
    }

    /// Draws one word per slot, in slot order, space-separated.
    pub fn generate_sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        self.slots
            .iter()
            .map(|slot| slot[rng.gen_range(0..slot.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Sentence with the given mixed-radix index in `0..sentence_count()`.
    pub fn sentence_at(&self, mut index: u64) -> String {
        let mut parts = Vec::with_capacity(self.slots.len());
        for slot in self.slots.iter().rev() {
            let n = slot.len() as u64;
            parts.push(slot[(index % n) as usize].as_str());
            index /= n;
        }
        parts.reverse();
        parts.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grammar_has_64000_sentences() {
        let g = Grammar::default();
        let sizes: Vec<usize> = g.slots.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 4, 25, 10, 4]);
        assert_eq!(g.sentence_count(), 64_000);
    }

    #[test]
    fn sentences_follow_slot_order() {
        let g = Grammar::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = g.generate_sentence(&mut rng);
            let toks: Vec<&str> = s.split(' ').collect();
            assert_eq!(toks.len(), 6);
            for (tok, slot) in toks.iter().zip(&g.slots) {
                assert!(slot.iter().any(|w| w == tok), "{tok} not in slot");
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let g = Grammar::default();
        let a = g.generate_sentence(&mut ChaCha8Rng::seed_from_u64(11));
        let b = g.generate_sentence(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn indexing_is_a_bijection_on_a_sample() {
        let g = Grammar::default();
        assert_eq!(g.sentence_at(0), "BIN BLUE AT A 0 AGAIN");
        assert_eq!(g.sentence_at(63_999), "SET WHITE WITH Z 9 SOON");
    }
}
