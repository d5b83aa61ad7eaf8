//! Persona-chat style synthetic dialogue lines.
//!
//! Each template belongs to one topic (used as a class label) and contains
//! `{slot}` placeholders filled from per-slot lists. Slots marked as entity
//! slots are recorded on the record so entity leakage can be scored.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{normalize, tokenize, Vocab};
use super::{Corpus, TextRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Template {
    pub topic: usize,
    pub pattern: String,
}

#[derive(Clone, Debug)]
pub struct Slot {
    pub name: String,
    pub fillers: Vec<String>,
    pub entity: bool,
}

#[derive(Clone, Debug)]
pub struct TemplateGrammar {
    pub topics: Vec<String>,
    pub templates: Vec<Template>,
    pub slots: Vec<Slot>,
}

fn slot(name: &str, entity: bool, fillers: &[&str]) -> Slot {
    Slot {
        name: name.to_string(),
        fillers: fillers.iter().map(|s| s.to_string()).collect(),
        entity,
    }
}

impl TemplateGrammar {
    /// Built-in grammar: 8 topics, 24 templates.
    pub fn persona() -> Self {
        let topics = [
            "hobby", "food", "travel", "work", "pets", "family", "music", "sports",
        ];
        let templates: &[(usize, &str)] = &[
            (0, "i love {hobby} on the weekends ."),
            (0, "my favorite hobby is {hobby} , what do you do for fun ?"),
            (0, "i spend most of my free time {hobby} with my {relative} ."),
            (1, "i really enjoy eating {food} , it is my favorite food ."),
            (1, "do you like {food} ? i eat it every {day} ."),
            (1, "my {relative} makes the best {food} in {city} ."),
            (2, "i live in {city} but i grew up near the {place} ."),
            (2, "have you ever been to {city} ? i went there last {season} ."),
            (2, "we are planning a trip to the {place} next {season} ."),
            (3, "i work as a {job} in {city} ."),
            (3, "my job as a {job} keeps me busy every {day} ."),
            (3, "i used to be a {job} but now i am retired ."),
            (4, "i have a {color} {pet} named {pet_name} ."),
            (4, "my {pet} {pet_name} loves to sleep on the couch ."),
            (4, "do you have any pets ? i have a {pet} at home ."),
            (5, "my {relative} {name} is visiting us this {season} ."),
            (5, "i have {number} kids and my oldest is named {name} ."),
            (5, "i am very close to my {relative} , we talk every {day} ."),
            (6, "i listen to {genre} music while i drive to work ."),
            (6, "my favorite band plays {genre} , have you heard of them ?"),
            (6, "i play the {instrument} in a small {genre} band ."),
            (7, "i watch {sport} every {day} with my {relative} ."),
            (7, "i used to play {sport} in high school ."),
            (7, "what is your favorite sport ? mine is {sport} ."),
        ];
        let slots = vec![
            slot(
                "hobby",
                false,
                &[
                    "hiking", "painting", "reading", "gardening", "fishing", "knitting",
                    "baking", "camping", "rock climbing", "photography", "dancing",
                    "building boats", "bird watching", "cooking", "surfing", "writing poems",
                ],
            ),
            slot(
                "food",
                false,
                &[
                    "pizza", "sushi", "tacos", "pasta", "steak", "ramen", "burgers",
                    "pancakes", "curry", "salad", "ice cream", "chocolate cake", "fried chicken",
                    "dumplings", "lasagna", "apple pie",
                ],
            ),
            slot(
                "city",
                true,
                &[
                    "boston", "chicago", "denver", "seattle", "austin", "miami", "portland",
                    "atlanta", "phoenix", "dallas", "toronto", "london", "paris", "berlin",
                    "tokyo", "sydney", "madrid", "dublin",
                ],
            ),
            slot(
                "place",
                true,
                &[
                    "ocean", "mountains", "lake", "desert", "forest", "river", "beach",
                    "grand canyon", "great lakes", "rocky mountains",
                ],
            ),
            slot("season", false, &["summer", "winter", "spring", "fall", "year", "month"]),
            slot(
                "day",
                false,
                &[
                    "day", "week", "monday", "tuesday", "wednesday", "thursday", "friday",
                    "saturday", "sunday", "morning", "night",
                ],
            ),
            slot(
                "job",
                false,
                &[
                    "teacher", "nurse", "doctor", "lawyer", "chef", "mechanic", "pilot",
                    "farmer", "accountant", "firefighter", "programmer", "plumber",
                    "librarian", "dentist", "truck driver", "police officer",
                ],
            ),
            slot(
                "color",
                false,
                &["black", "white", "brown", "gray", "orange", "golden", "spotted", "tiny"],
            ),
            slot(
                "pet",
                false,
                &["dog", "cat", "parrot", "rabbit", "hamster", "turtle", "lizard", "horse"],
            ),
            slot(
                "pet_name",
                true,
                &[
                    "max", "bella", "charlie", "luna", "rocky", "daisy", "buddy", "milo",
                    "coco", "oscar", "ruby", "shadow",
                ],
            ),
            slot(
                "relative",
                false,
                &[
                    "mom", "dad", "sister", "brother", "wife", "husband", "grandma",
                    "grandpa", "aunt", "uncle", "cousin", "son", "daughter", "best friend",
                ],
            ),
            slot(
                "name",
                true,
                &[
                    "sarah", "john", "emily", "michael", "jessica", "david", "anna", "james",
                    "olivia", "daniel", "sophia", "robert", "maria", "kevin", "laura", "peter",
                    "linda", "thomas",
                ],
            ),
            slot("number", false, &["two", "three", "four", "five", "six"]),
            slot(
                "genre",
                false,
                &[
                    "rock", "jazz", "country", "pop", "classical", "blues", "metal", "folk",
                    "hip hop", "reggae", "punk", "soul",
                ],
            ),
            slot(
                "instrument",
                false,
                &["guitar", "piano", "drums", "violin", "bass", "flute", "trumpet", "cello"],
            ),
            slot(
                "sport",
                false,
                &[
                    "football", "basketball", "baseball", "soccer", "tennis", "hockey", "golf",
                    "volleyball", "rugby", "boxing", "swimming", "wrestling",
                ],
            ),
        ];
        TemplateGrammar {
            topics: topics.iter().map(|s| s.to_string()).collect(),
            templates: templates
                .iter()
                .map(|&(topic, p)| Template {
                    topic,
                    pattern: p.to_string(),
                })
                .collect(),
            slots,
        }
    }

    fn slot_by_name(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.len() < 20 {
            return Err(Error::config(format!(
                "grammar needs at least 20 templates, has {}",
                self.templates.len()
            )));
        }
        for t in &self.templates {
            if t.topic >= self.topics.len() {
                return Err(Error::config(format!("template topic out of range: {}", t.pattern)));
            }
            for name in placeholders(&t.pattern) {
                match self.slot_by_name(name) {
                    Some(s) if !s.fillers.is_empty() => {}
                    _ => return Err(Error::config(format!("unknown or empty slot {{{name}}}"))),
                }
            }
        }
        Ok(())
    }

    /// Every word the grammar can emit, sorted; independent of sampling.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words = BTreeSet::new();
        for t in &self.templates {
            let literal = placeholder_free(&t.pattern);
            for w in normalize(&literal).split(' ').filter(|w| !w.is_empty()) {
                words.insert(w.to_string());
            }
        }
        for s in &self.slots {
            for f in &s.fillers {
                for w in normalize(f).split(' ') {
                    words.insert(w.to_string());
                }
            }
        }
        words.into_iter().collect()
    }

    fn realize(&self, template: &Template, rng: &mut ChaCha8Rng) -> (String, Vec<String>) {
        let mut out = String::new();
        let mut entities = Vec::new();
        let mut rest = template.pattern.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let close = rest[open..].find('}').expect("validated template") + open;
            let slot = self
                .slot_by_name(&rest[open + 1..close])
                .expect("validated template");
            let filler = slot.fillers.choose(rng).expect("non-empty fillers");
            out.push_str(filler);
            if slot.entity {
                entities.push(filler.clone());
            }
            rest = &rest[close + 1..];
        }
        out.push_str(rest);
        (out, entities)
    }
}

fn placeholders(pattern: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        out.push(&rest[open + 1..open + close]);
        rest = &rest[open + close + 1..];
    }
    out
}

fn placeholder_free(pattern: &str) -> String {
    let mut out = String::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        out.push(' ');
        let close = rest[open..].find('}').map_or(rest.len(), |c| open + c + 1);
        rest = &rest[close..];
    }
    out.push_str(rest);
    out
}

/// Per-record seed so generation is independent of iteration order.
fn record_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate `n` records. Deterministic in `seed`; the vocabulary depends
/// only on the grammar.
pub fn synth_corpus(seed: u64, n: usize, grammar: &TemplateGrammar) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::invalid("synth_corpus needs n > 0"));
    }
    grammar.validate()?;
    let vocab = Vocab::from_words(grammar.vocabulary());
    let records = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, i as u64));
            let t = &grammar.templates[rng.gen_range(0..grammar.templates.len())];
            let (raw, entities) = grammar.realize(t, &mut rng);
            let text = normalize(&raw);
            let tokens = tokenize(&text, &vocab)?;
            Ok(TextRecord {
                id: format!("r{i:06}"),
                text,
                tokens,
                label: Some(t.topic as u32),
                entities,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::new(records, vocab, grammar.topics.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_is_valid_and_large_enough() {
        let g = TemplateGrammar::persona();
        g.validate().unwrap();
        assert!(g.templates.len() >= 20);
    }

    #[test]
    fn zero_records_is_an_error() {
        assert!(synth_corpus(1, 0, &TemplateGrammar::persona()).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let g = TemplateGrammar::persona();
        let a = synth_corpus(7, 200, &g).unwrap();
        let b = synth_corpus(7, 200, &g).unwrap();
        let c = synth_corpus(8, 200, &g).unwrap();
        assert_eq!(a.records, b.records);
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn prefix_stable_when_n_grows() {
        let g = TemplateGrammar::persona();
        let a = synth_corpus(3, 50, &g).unwrap();
        let b = synth_corpus(3, 80, &g).unwrap();
        assert_eq!(a.records[..], b.records[..50]);
    }

    #[test]
    fn entities_are_recorded() {
        let g = TemplateGrammar::persona();
        let c = synth_corpus(11, 500, &g).unwrap();
        let with_entities = c.records.iter().filter(|r| !r.entities.is_empty()).count();
        assert!(with_entities > 50);
        for r in &c.records {
            for e in &r.entities {
                assert!(r.text.contains(e.as_str()));
            }
        }
    }
}
