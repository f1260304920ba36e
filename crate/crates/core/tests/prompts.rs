mod common;

use std::collections::HashSet;

use common::*;
use diffid_core::prompt::{
    allocate_iir, build_prompts, caption_sequence, default_iir_candidates, default_vocabulary, CaptionerHandle,
    IirRegistry, PromptTemplate,
};
use diffid_core::sprite::SpriteWorld;
use diffid_core::Error;
use rand::seq::IndexedRandom;
use rand::Rng;

#[test]
fn allocated_tokens_are_never_in_vocabulary() {
    let candidates = default_iir_candidates();
    let base_vocab = default_vocabulary();
    let mut r = rng(42);
    for trial in 0..10_000u64 {
        // Random vocabularies that swallow part of the candidate list.
        let mut vocab = base_vocab.clone();
        let share = r.random_range(0.0..0.99);
        vocab.extend(candidates.iter().filter(|_| r.random_bool(share)).cloned());
        let pool: Vec<String> = candidates.choose_multiple(&mut r, 50).cloned().collect();
        match allocate_iir(&vocab, &pool, trial) {
            Ok(tok) => {
                assert!(!vocab.contains(&tok), "trial {trial}: `{tok}`");
                assert!(pool.contains(&tok));
            }
            Err(e) => {
                assert!(matches!(e, Error::Exhausted(_)));
                assert!(pool.iter().all(|c| vocab.contains(c)));
            }
        }
    }
}

#[test]
fn bundles_carry_the_token_exactly_once() {
    let words: Vec<String> = default_vocabulary().into_iter().collect::<Vec<_>>();
    let mut words = words;
    words.sort();
    let vocab = default_vocabulary();
    let candidates = default_iir_candidates();
    let templates = [
        PromptTemplate::default(),
        PromptTemplate::parse("{caption}; {id} walking").unwrap(),
        PromptTemplate::parse("an image of {id} {caption}").unwrap(),
    ];
    let mut r = rng(7);
    let mut built = 0;
    for seed in 0..2_000u64 {
        let tok = allocate_iir(&vocab, &candidates, seed).unwrap();
        let mut caption = random_caption(&mut r, &words);
        if seed % 50 == 0 {
            // A caption that already names the token must be refused.
            caption = format!("{caption} {tok}");
        }
        let template = &templates[seed as usize % templates.len()];
        match build_prompts(&caption, &tok, template) {
            Ok(b) => {
                b.check_invariants().unwrap();
                assert_eq!(word_count(&b.enhanced_prompt, &tok), 1);
                assert_eq!(word_count(&b.lpe_prompt, &tok), 0);
                built += 1;
            }
            Err(_) => assert!(word_count(&caption, &tok) > 0, "seed {seed}: {caption}"),
        }
    }
    assert!(built >= 1_900);
}

#[test]
fn registry_hands_out_distinct_tokens() {
    let reg = IirRegistry::new(default_vocabulary(), default_iir_candidates());
    let mut seen = HashSet::new();
    for i in 0..500 {
        let id = format!("id{i}");
        let tok = reg.allocate(&id, 0).unwrap();
        assert!(seen.insert(tok.clone()));
        assert_eq!(reg.allocate(&id, 99).unwrap(), tok);
    }
    assert!(reg.restore("other", seen.iter().next().unwrap()).is_err());
}

#[test]
fn captions_describe_the_person() {
    let world = SpriteWorld::new(4);
    let id = world.identity(0);
    let seq = world.sequence(&id, 2, 5);
    let cap = caption_sequence(&seq, &CaptionerHandle::stub()).unwrap();
    assert!(cap.starts_with("wearing "), "{cap}");
    assert!(!cap.contains(" in a "));
}
