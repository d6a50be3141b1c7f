//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stsn::data::{AnnotatedDocument, Dataset, EntityMention, RelationMention, TokenizedText, TypeSchema};

const PEOPLE: &[&[&str]] = &[
    &["Jack"],
    &["Maria", "Lopez"],
    &["Chen"],
    &["Ada", "King"],
    &["Omar"],
    &["Lena", "Berg"],
    &["Tom", "Reed"],
    &["Priya"],
];
const ORGS: &[&[&str]] = &[
    &["Harvard", "University"],
    &["Acme", "Corp"],
    &["Globex"],
    &["the", "City", "Council"],
    &["Initech"],
    &["Blue", "River", "Bank"],
];
const PLACES: &[&[&str]] = &[
    &["Boston"],
    &["New", "York"],
    &["Lyon"],
    &["Cape", "Town"],
    &["Oslo"],
    &["Kyoto"],
];

enum Slot {
    Word(&'static str),
    Per,
    Org,
    Loc,
}

/// Each template lists its slots and the relations between slot positions
/// (in order of appearance).
fn templates() -> Vec<(Vec<Slot>, Vec<(usize, usize, &'static str)>)> {
    use Slot::*;
    vec![
        (vec![Per, Word("works"), Word("for"), Org, Word(".")], vec![(0, 1, "WORK_FOR")]),
        (
            vec![Per, Word("lives"), Word("in"), Loc, Word("and"), Word("joined"), Org, Word(".")],
            vec![(0, 1, "LIVE_IN"), (0, 2, "WORK_FOR")],
        ),
        (
            vec![Word("In"), Loc, Word(","), Per, Word("met"), Word("a"), Word("friend"), Word(".")],
            vec![(1, 0, "LIVE_IN")],
        ),
        (vec![Org, Word("hired"), Per, Word("last"), Word("year"), Word(".")], vec![(1, 0, "WORK_FOR")]),
        (
            vec![Per, Word("and"), Per, Word("visited"), Loc, Word(".")],
            vec![],
        ),
        (vec![Word("The"), Word("office"), Word("of"), Org, Word("is"), Word("in"), Loc, Word(".")], vec![]),
    ]
}

pub fn schema() -> TypeSchema {
    TypeSchema::new(["LOC", "ORG", "PER"], ["LIVE_IN", "WORK_FOR"]).unwrap()
}

/// A corpus of `n` templated sentences with three entity types and two
/// relation types.
pub fn templated_corpus(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = templates();
    let mut docs = Vec::with_capacity(n);
    for _ in 0..n {
        let (slots, rels) = &templates[rng.gen_range(0..templates.len())];
        let mut tokens: Vec<String> = Vec::new();
        let mut entities = Vec::new();
        for slot in slots {
            let (words, ty) = match slot {
                Slot::Word(w) => {
                    tokens.push(w.to_string());
                    continue;
                }
                Slot::Per => (*PEOPLE.choose(&mut rng).unwrap(), "PER"),
                Slot::Org => (*ORGS.choose(&mut rng).unwrap(), "ORG"),
                Slot::Loc => (*PLACES.choose(&mut rng).unwrap(), "LOC"),
            };
            let start = tokens.len();
            tokens.extend(words.iter().map(|w| w.to_string()));
            entities.push(EntityMention::new(start, tokens.len(), ty));
        }
        let relations = rels.iter().map(|&(h, t, r)| RelationMention::new(h, t, r)).collect();
        docs.push(AnnotatedDocument {
            tokens: TokenizedText::new(tokens),
            entities,
            relations,
        });
    }
    Dataset::new(docs, schema()).unwrap()
}
