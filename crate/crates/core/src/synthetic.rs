//! Deterministic stand-in data: a pseudo-English corpus with topical word
//! distributions and number agreement, plus three toy fine-tuning tasks that
//! reuse its lexicon.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;
use crate::rng;
use crate::tasks::{ChoiceExample, ClassificationExample, SpanAnswer, SpanExample};

const LEXICON_SEED: u64 = 0x6c65_7869;
const TOPICS: usize = 16;
const TOPIC_NOUNS: usize = 120;
const TOPIC_VERBS: usize = 30;

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "pl", "gr", "sh",
    "ch", "dr", "kl", "sp",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ea"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "m", "k", "nd", "st"];
const PREPOSITIONS: &[&str] = &["in", "with", "near", "under", "behind", "beside"];
const ADVERBS: &[&str] = &["quickly", "slowly", "again", "often", "rarely", "together"];
const RESERVED: &[&str] = &[
    "the", "a", "an", "and", "of", "is", "are", "in", "with", "near", "under", "behind", "beside", "begin",
    "end", "which", "one", "was", "what", "lies", "between", "markers",
];

/// Word classes shared by the corpus and the tasks.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub nouns: Vec<String>,
    pub verbs: Vec<String>,
    pub adjectives: Vec<String>,
    pub animals: Vec<String>,
    /// Adjectives that mark class 1 in the classification task.
    pub positive: Vec<String>,
    /// Adjectives that mark class 0.
    pub negative: Vec<String>,
}

impl Lexicon {
    pub fn standard() -> Self {
        let mut rng = rng::keyed_rng(&[LEXICON_SEED]);
        let mut seen: std::collections::HashSet<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut words = |n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let syllables = rng.gen_range(1..=3);
                let mut w = String::new();
                for _ in 0..syllables {
                    w.push_str(ONSETS.choose(rng).expect("non-empty"));
                    w.push_str(VOWELS.choose(rng).expect("non-empty"));
                    w.push_str(CODAS.choose(rng).expect("non-empty"));
                }
                // Plural and third-person forms append "s"; keep bases distinct from them.
                if w.len() >= 3 && !w.ends_with('s') && seen.insert(w.clone()) {
                    out.push(w);
                }
            }
            out
        };
        let nouns = words(900, &mut rng);
        let verbs = words(220, &mut rng);
        let adjectives = words(200, &mut rng);
        let animals = words(24, &mut rng);
        let tone = words(16, &mut rng);
        Lexicon {
            nouns,
            verbs,
            adjectives,
            animals,
            positive: tone[..8].to_vec(),
            negative: tone[8..].to_vec(),
        }
    }
}

struct Topic {
    nouns: Vec<usize>,
    noun_w: WeightedIndex<f64>,
    verbs: Vec<usize>,
    verb_w: WeightedIndex<f64>,
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|r| 1.0 / (r as f64 + 1.0))).expect("positive weights")
}

/// Sentence generator over a lexicon.
pub struct Grammar {
    pub lex: Lexicon,
    topics: Vec<Topic>,
    global_noun: WeightedIndex<f64>,
    adj_w: WeightedIndex<f64>,
}

impl Grammar {
    pub fn new(lex: Lexicon) -> Self {
        let mut rng = rng::keyed_rng(&[LEXICON_SEED, 1]);
        let topics = (0..TOPICS)
            .map(|_| {
                let mut nouns: Vec<usize> = (0..lex.nouns.len()).collect();
                nouns.shuffle(&mut rng);
                nouns.truncate(TOPIC_NOUNS);
                let mut verbs: Vec<usize> = (0..lex.verbs.len()).collect();
                verbs.shuffle(&mut rng);
                verbs.truncate(TOPIC_VERBS);
                Topic { nouns, noun_w: zipf(TOPIC_NOUNS), verbs, verb_w: zipf(TOPIC_VERBS) }
            })
            .collect();
        let global_noun = zipf(lex.nouns.len());
        let adj_w = zipf(lex.adjectives.len());
        Grammar { lex, topics, global_noun, adj_w }
    }

    fn noun<R: Rng>(&self, rng: &mut R, topic: usize) -> &str {
        let t = &self.topics[topic];
        if rng.gen_bool(0.8) {
            &self.lex.nouns[t.nouns[t.noun_w.sample(rng)]]
        } else {
            &self.lex.nouns[self.global_noun.sample(rng)]
        }
    }

    fn verb<R: Rng>(&self, rng: &mut R, topic: usize) -> &str {
        let t = &self.topics[topic];
        &self.lex.verbs[t.verbs[t.verb_w.sample(rng)]]
    }

    fn adjective<R: Rng>(&self, rng: &mut R) -> &str {
        &self.lex.adjectives[self.adj_w.sample(rng)]
    }

    /// Noun phrase and whether it is plural.
    fn phrase<R: Rng>(&self, rng: &mut R, topic: usize) -> (String, bool) {
        let plural = rng.gen_bool(0.3);
        let det = if plural { "the" } else if rng.gen_bool(0.7) { "the" } else { "a" };
        let mut p = String::from(det);
        if rng.gen_bool(0.4) {
            p.push(' ');
            p.push_str(self.adjective(rng));
        }
        p.push(' ');
        p.push_str(self.noun(rng, topic));
        if plural {
            p.push('s');
        }
        (p, plural)
    }

    fn verb_agreeing<R: Rng>(&self, rng: &mut R, topic: usize, plural: bool) -> String {
        let v = self.verb(rng, topic);
        if plural { v.to_string() } else { format!("{v}s") }
    }

    /// One sentence (lower case, no final period) about `topic`.
    pub fn clause<R: Rng>(&self, rng: &mut R, topic: usize) -> String {
        self.clause_with(rng, topic, None)
    }

    /// Like `clause`, but animal mentions usually name `animal`.
    fn clause_with<R: Rng>(&self, rng: &mut R, topic: usize, animal: Option<&str>) -> String {
        let (subj, plural) = self.phrase(rng, topic);
        match rng.gen_range(0..5) {
            0 => {
                let v = self.verb_agreeing(rng, topic, plural);
                let (obj, _) = self.phrase(rng, topic);
                format!("{subj} {v} {obj}")
            }
            1 => {
                let v = self.verb_agreeing(rng, topic, plural);
                let prep = PREPOSITIONS.choose(rng).expect("non-empty");
                let (obj, _) = self.phrase(rng, topic);
                format!("{subj} {v} {prep} {obj}")
            }
            2 => {
                let (other, _) = self.phrase(rng, topic);
                let v = self.verb(rng, topic);
                let adv = ADVERBS.choose(rng).expect("non-empty");
                format!("{subj} and {other} {v} {adv}")
            }
            3 => {
                let (of, _) = self.phrase(rng, topic);
                let be = if plural { "are" } else { "is" };
                let adj = self.adjective(rng);
                format!("{subj} of {of} {be} {adj}")
            }
            _ => {
                let animal = match animal {
                    Some(a) if rng.gen_bool(0.8) => a,
                    _ => self.lex.animals.choose(rng).expect("non-empty"),
                };
                let v = self.verb_agreeing(rng, topic, false);
                let (obj, _) = self.phrase(rng, topic);
                format!("the {animal} {v} near {obj}")
            }
        }
    }

    pub fn sentence<R: Rng>(&self, rng: &mut R, topic: usize) -> String {
        finish(self.clause(rng, topic))
    }

    pub fn random_topic<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(0..self.topics.len())
    }
}

fn finish(mut s: String) -> String {
    if let Some(first) = s.get(0..1) {
        let upper = first.to_ascii_uppercase();
        s.replace_range(0..1, &upper);
    }
    s.push('.');
    s
}

/// About `target_bytes` of text in documents of 4 to 14 single-topic sentences.
/// Each document has a recurring animal, so earlier mentions predict later ones.
pub fn corpus(target_bytes: usize, seed: u64) -> Vec<Document> {
    let g = Grammar::new(Lexicon::standard());
    let mut rng = rng::keyed_rng(&[seed, 0x636f_7270]);
    let mut docs = Vec::new();
    let mut bytes = 0;
    while bytes < target_bytes {
        let topic = g.random_topic(&mut rng);
        let animal = g.lex.animals.choose(&mut rng).expect("non-empty").as_str();
        let n = rng.gen_range(4..=14);
        let sentences: Vec<Vec<u8>> =
            (0..n).map(|_| finish(g.clause_with(&mut rng, topic, Some(animal))).into_bytes()).collect();
        bytes += sentences.iter().map(|s| s.len() + 1).sum::<usize>() + 1;
        docs.push(Document { id: docs.len(), sentences });
    }
    docs
}

/// Binary task: label 1 when the sentence carries a positive marker
/// adjective, 0 when it carries a negative one. Classes alternate.
pub fn classification(n: usize, seed: u64) -> Vec<ClassificationExample> {
    let g = Grammar::new(Lexicon::standard());
    let mut rng = rng::keyed_rng(&[seed, 0x636c_7366]);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let topic = g.random_topic(&mut rng);
            let marks = if label == 1 { &g.lex.positive } else { &g.lex.negative };
            let mark = marks.choose(&mut rng).expect("non-empty");
            let (subj, plural) = g.phrase(&mut rng, topic);
            let be = if plural { "are" } else { "is" };
            let text = finish(format!("{subj} {be} {mark}"));
            let sentence_b = rng.gen_bool(0.5).then(|| g.sentence(&mut rng, topic));
            ClassificationExample { sentence_a: text, sentence_b, label }
        })
        .collect()
}

/// Extraction task: the answer is the one to three words between the
/// `begin` and `end` marker words inside the context. With `unanswerable`
/// > 0 that share of contexts carries no markers and no answer.
pub fn span(n: usize, seed: u64, unanswerable: f64) -> Vec<SpanExample> {
    let g = Grammar::new(Lexicon::standard());
    let mut rng = rng::keyed_rng(&[seed, 0x7370_616e]);
    (0..n)
        .map(|_| {
            let topic = g.random_topic(&mut rng);
            let before = rng.gen_range(0..3);
            let after = rng.gen_range(0..3);
            let mut context = String::new();
            for _ in 0..before {
                context.push_str(&g.sentence(&mut rng, topic));
                context.push(' ');
            }
            let answer = if rng.gen_bool(unanswerable) {
                context.push_str(&g.sentence(&mut rng, topic));
                None
            } else {
                let k = rng.gen_range(1..=3);
                let words: Vec<&str> = (0..k).map(|_| g.noun(&mut rng, topic)).collect();
                let text = words.join(" ");
                let clause = g.clause(&mut rng, topic);
                let (head, tail) = clause.split_once(' ').unwrap_or((&clause, ""));
                let mut s = format!("{head} begin ");
                let start = context.len() + s.len();
                s.push_str(&text);
                s.push_str(" end ");
                s.push_str(tail);
                context.push_str(&finish(s));
                Some(SpanAnswer { start, text })
            };
            for _ in 0..after {
                context.push(' ');
                context.push_str(&g.sentence(&mut rng, topic));
            }
            SpanExample { context, question: "What lies between the markers?".into(), answer }
        })
        .collect()
}

/// Four-way task: the passage mentions exactly one animal; the right choice
/// names it and the distractors are other animals.
pub fn choice(n: usize, seed: u64) -> Vec<ChoiceExample> {
    let g = Grammar::new(Lexicon::standard());
    let mut rng = rng::keyed_rng(&[seed, 0x6368_6f69]);
    (0..n)
        .map(|_| {
            let topic = g.random_topic(&mut rng);
            let picks: Vec<&String> = g.lex.animals.choose_multiple(&mut rng, 4).collect();
            let answer = picks[0].clone();
            let mut sentences = Vec::new();
            let k = rng.gen_range(2..5);
            let at = rng.gen_range(0..k);
            for j in 0..k {
                if j == at {
                    let v = g.verb(&mut rng, topic);
                    let (obj, _) = g.phrase(&mut rng, topic);
                    sentences.push(finish(format!("the {answer} {v}s near {obj}")));
                } else {
                    // Non-animal filler; clause kind 4 would mention an animal.
                    let mut s;
                    loop {
                        s = g.clause(&mut rng, topic);
                        if !g.lex.animals.iter().any(|a| s.split(' ').any(|w| w == a)) {
                            break;
                        }
                    }
                    sentences.push(finish(s));
                }
            }
            let label = rng.gen_range(0..4);
            let mut choices: Vec<String> = picks[1..].iter().map(|s| s.to_string()).collect();
            choices.insert(label, answer);
            ChoiceExample {
                passage: sentences.join(" "),
                question: "Which one was mentioned?".into(),
                choices,
                label,
            }
        })
        .collect()
}
