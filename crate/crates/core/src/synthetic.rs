//! Small generated datasets for smoke runs and sanity checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::composer::WhitespaceTokenizer;
use crate::dataset::{McqaExample, DEFAULT_PLACEHOLDER};
use crate::NUM_OPTIONS;

const FILLER_WORDS: usize = 60;
const ANSWER_WORDS: usize = 40;

fn filler(rng: &mut ChaCha8Rng, len: std::ops::Range<usize>) -> Vec<String> {
    let n = rng.gen_range(len);
    (0..n).map(|_| format!("f{}", rng.gen_range(0..FILLER_WORDS))).collect()
}

fn distinct_answers(rng: &mut ChaCha8Rng) -> [String; NUM_OPTIONS] {
    let mut pool: Vec<usize> = (0..ANSWER_WORDS).collect();
    pool.shuffle(rng);
    std::array::from_fn(|i| format!("a{}", pool[i]))
}

fn question(rng: &mut ChaCha8Rng) -> String {
    let mut words = filler(rng, 3..6);
    let at = rng.gen_range(0..=words.len());
    words.insert(at, DEFAULT_PLACEHOLDER.to_string());
    words.join(" ")
}

/// Examples whose gold option is the only option word occurring in the
/// passage. Gold positions cycle through all five slots.
pub fn separable(n: usize, seed: u64) -> Vec<McqaExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let options = distinct_answers(&mut rng);
            let gold = i % NUM_OPTIONS;
            let mut passage = filler(&mut rng, 3..6);
            let at = rng.gen_range(0..=passage.len());
            passage.insert(at, options[gold].clone());
            McqaExample {
                id: format!("sep-{seed}-{i}"),
                passage: passage.join(" "),
                question: question(&mut rng),
                options,
                gold: Some(gold),
            }
        })
        .collect()
}

/// Examples with no link between content and label: passage words never
/// overlap the options and the gold index is balanced across positions.
pub fn uninformative(n: usize, seed: u64) -> Vec<McqaExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| McqaExample {
            id: format!("uni-{seed}-{i}"),
            passage: filler(&mut rng, 8..14).join(" "),
            question: question(&mut rng),
            options: distinct_answers(&mut rng),
            gold: Some(i % NUM_OPTIONS),
        })
        .collect()
}

/// Vocabulary covering every text in `examples`.
pub fn tokenizer_for(examples: &[McqaExample]) -> WhitespaceTokenizer {
    WhitespaceTokenizer::for_examples(examples)
}
