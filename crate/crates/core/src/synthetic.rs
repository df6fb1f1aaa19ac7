//! Two toy languages sharing one grammar and lexicon of concepts.
//!
//! Language A is written in ASCII with subject–verb–object order. Language B
//! spells every word through a letter cipher into Greek script (two bytes per
//! letter in UTF-8), uses subject–object–verb order and puts the negation
//! after the verb. Both corpora mix plain sentences with prompt-style lines
//! (`S, right? Yes, S'`) so the NLI prompt is in-distribution for the LM.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::evaluation::{render_prompt, Label, NLIExample, PromptTemplate};

const DETS: [&str; 2] = ["the", "a"];
const ADJS: [&str; 8] = ["big", "small", "red", "old", "happy", "quiet", "green", "tall"];
const SUBJECTS: [&str; 8] = ["dog", "cat", "bird", "child", "farmer", "teacher", "horse", "girl"];
const OBJECTS: [&str; 8] = ["ball", "book", "apple", "stone", "cup", "bread", "hat", "box"];
const VERBS: [&str; 8] = ["sees", "likes", "takes", "finds", "holds", "eats", "pushes", "wants"];
const FOOD: [usize; 2] = [2, 5];
const EATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sentence {
    subj_det: usize,
    subj_adj: Option<usize>,
    subj: usize,
    verb: usize,
    obj_det: usize,
    obj_adj: Option<usize>,
    obj: usize,
    negated: bool,
}

impl Sentence {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let verb = rng.random_range(0..VERBS.len());
        Self {
            subj_det: rng.random_range(0..2),
            subj_adj: rng.random_bool(0.5).then(|| rng.random_range(0..ADJS.len())),
            subj: rng.random_range(0..SUBJECTS.len()),
            verb,
            obj_det: rng.random_range(0..2),
            obj_adj: rng.random_bool(0.5).then(|| rng.random_range(0..ADJS.len())),
            obj: random_object(verb, rng),
            negated: false,
        }
    }

    fn plain(mut self) -> Self {
        self.subj_adj = None;
        self.obj_adj = None;
        self
    }

    fn negated(mut self) -> Self {
        self.negated = true;
        self
    }

    /// Same subject, different verb and object.
    fn other_predicate<R: Rng + ?Sized>(self, rng: &mut R) -> Self {
        let mut s = self.plain();
        s.verb = loop {
            let v = rng.random_range(0..VERBS.len());
            if v != self.verb {
                break v;
            }
        };
        s.obj = loop {
            let o = random_object(s.verb, rng);
            if o != self.obj {
                break o;
            }
        };
        s.obj_det = rng.random_range(0..2);
        s
    }
}

/// `eats` only takes food.
fn random_object<R: Rng + ?Sized>(verb: usize, rng: &mut R) -> usize {
    if verb == EATS {
        *FOOD.choose(rng).unwrap()
    } else {
        rng.random_range(0..OBJECTS.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Order {
    Svo,
    Sov,
}

/// A spelling and word order over the shared concept lexicon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthLanguage {
    name: &'static str,
    order: Order,
    cipher: bool,
}

const GREEK: [char; 26] = [
    'α', 'β', 'ψ', 'δ', 'ε', 'φ', 'γ', 'η', 'ι', 'ξ', 'κ', 'λ', 'μ', 'ν', 'ο', 'π', 'θ', 'ρ', 'σ', 'τ', 'υ', 'ω', 'ς', 'χ', 'ζ', 'ϑ',
];

impl SynthLanguage {
    /// ASCII, subject–verb–object.
    pub fn a() -> Self {
        Self {
            name: "A",
            order: Order::Svo,
            cipher: false,
        }
    }

    /// Greek-script cipher, subject–object–verb, post-verbal negation.
    pub fn b() -> Self {
        Self {
            name: "B",
            order: Order::Sov,
            cipher: true,
        }
    }

    pub fn name(&self) -> &str {
        self.name
    }

    fn word(&self, w: &str) -> String {
        if !self.cipher {
            return w.to_string();
        }
        w.chars()
            .map(|c| match c.to_ascii_lowercase() {
                l @ 'a'..='z' => {
                    let g = GREEK[(l as u8 - b'a') as usize];
                    if c.is_ascii_uppercase() {
                        g.to_uppercase().next().unwrap()
                    } else {
                        g
                    }
                }
                _ => c,
            })
            .collect()
    }

    fn render(&self, s: &Sentence) -> String {
        let np = |det: usize, adj: Option<usize>, noun: &str| {
            let mut parts = vec![self.word(DETS[det])];
            if let Some(a) = adj {
                parts.push(self.word(ADJS[a]));
            }
            parts.push(self.word(noun));
            parts.join(" ")
        };
        let subj = np(s.subj_det, s.subj_adj, SUBJECTS[s.subj]);
        let obj = np(s.obj_det, s.obj_adj, OBJECTS[s.obj]);
        let verb = self.word(VERBS[s.verb]);
        let not = self.word("not");
        match (self.order, s.negated) {
            (Order::Svo, false) => format!("{subj} {verb} {obj}"),
            (Order::Svo, true) => format!("{subj} {not} {verb} {obj}"),
            (Order::Sov, false) => format!("{subj} {obj} {verb}"),
            (Order::Sov, true) => format!("{subj} {obj} {verb} {not}"),
        }
    }

    /// The prompt in this language's spelling; for A it equals the built-in
    /// English template.
    pub fn template(&self) -> PromptTemplate {
        PromptTemplate::new(
            format!("[premise], {}? [MASK], [hypothesis]", self.word("right")),
            [&self.word("Yes"), &self.word("No"), &self.word("Also")],
        )
        .expect("well-formed synthetic template")
    }

    fn example<R: Rng + ?Sized>(&self, label: Label, rng: &mut R) -> NLIExample {
        let s = Sentence::random(rng);
        let h = match label {
            Label::Entailment => s.plain(),
            Label::Contradiction => s.plain().negated(),
            Label::Neutral => s.other_predicate(rng),
        };
        NLIExample::new(self.render(&s), self.render(&h), label).expect("non-empty sentences")
    }

    /// Corpus text: one line per sentence; `prompt_share` of the lines are
    /// prompt-style NLI renderings.
    pub fn corpus(&self, lines: usize, prompt_share: f64, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = self.template();
        let mut out = String::new();
        for _ in 0..lines {
            if rng.random_bool(prompt_share) {
                let label = Label::ALL[rng.random_range(0..3)];
                let ex = self.example(label, &mut rng);
                out.push_str(&render_prompt(&template, &ex, label));
            } else {
                out.push_str(&self.render(&Sentence::random(&mut rng)));
            }
            out.push('\n');
        }
        out
    }

    /// Label-balanced NLI examples in shuffled order.
    pub fn nli(&self, n: usize, seed: u64) -> Vec<NLIExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<Label> = (0..n).map(|i| Label::ALL[i % 3]).collect();
        rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
        labels.into_iter().map(|l| self.example(l, &mut rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_uses_the_english_prompt() {
        assert_eq!(SynthLanguage::a().template(), PromptTemplate::builtin("en").unwrap());
    }

    #[test]
    fn b_is_a_disjoint_script() {
        let b = SynthLanguage::b().corpus(50, 0.3, 1);
        assert!(b.chars().all(|c| !c.is_ascii_alphabetic()));
        assert!(b.lines().all(|l| !l.is_empty()));
        assert_eq!(SynthLanguage::b().word("Yes"), "Ζεσ");
    }

    #[test]
    fn word_order_and_negation() {
        let s = Sentence {
            subj_det: 0,
            subj_adj: Some(0),
            subj: 0,
            verb: 0,
            obj_det: 1,
            obj_adj: None,
            obj: 0,
            negated: true,
        };
        assert_eq!(SynthLanguage::a().render(&s), "the big dog not sees a ball");
        assert_eq!(SynthLanguage::b().render(&s), "τηε βιγ δογ α βαλλ σεεσ νοτ");
    }

    #[test]
    fn nli_is_balanced_and_deterministic() {
        let a = SynthLanguage::a().nli(30, 4);
        assert_eq!(a, SynthLanguage::a().nli(30, 4));
        for l in Label::ALL {
            assert_eq!(a.iter().filter(|e| e.label == l).count(), 10);
        }
        for e in &a {
            match e.label {
                Label::Contradiction => assert!(e.hypothesis.contains(" not ")),
                _ => assert!(!e.hypothesis.contains(" not ")),
            }
        }
    }
}
