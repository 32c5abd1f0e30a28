mod common;

use std::collections::HashSet;

use common::{bpe_encode_oracle, bpe_oracle, random_vocab, vocab};
use moscode::bpe::{encoded_length, train_bpe, MergeList};
use moscode::corpus::{Token, EOW};
use proptest::prelude::*;

fn merges_of(m: &MergeList) -> Vec<(String, String)> {
    m.rules().iter().map(|r| (r.left.clone(), r.right.clone())).collect()
}

#[test]
fn trainer_matches_brute_force_on_random_vocabularies() {
    for seed in 0..50 {
        let v = random_vocab(seed);
        let base = v
            .entries()
            .iter()
            .flat_map(|(w, _)| w.as_str().chars())
            .collect::<HashSet<_>>()
            .len()
            + 1;
        for target in [base, base + 3, base + 10, base + 200] {
            let trained = train_bpe(&v, target).unwrap();
            let oracle = bpe_oracle(&v, target, EOW);
            assert_eq!(merges_of(&trained), oracle, "seed {seed} target {target}");
            assert_eq!(trained.dictionary_size(), base + oracle.len());
            for (w, _) in v.entries() {
                let codes = trained.encode(w);
                assert_eq!(
                    codes,
                    bpe_encode_oracle(w.as_str(), &oracle, EOW),
                    "seed {seed} word {w}"
                );
                assert_eq!(trained.decode(&codes).unwrap(), vec![w.clone()]);
            }
        }
    }
}

#[test]
fn merged_codes_are_new_dictionary_entries() {
    for seed in 0..50 {
        let v = random_vocab(seed);
        let m = train_bpe(&v, 1000).unwrap();
        let mut seen: HashSet<String> = m.alphabet().iter().cloned().collect();
        seen.insert(EOW.to_owned());
        for rule in m.rules() {
            assert!(
                seen.insert(rule.merged.clone()),
                "seed {seed}: {} repeated",
                rule.merged
            );
        }
    }
}

#[test]
fn frequent_words_get_no_longer_codes() {
    // Disjoint alphabets per word, so each word's merges compete only on count.
    let v = vocab(&[("abc", 20), ("def", 10), ("ghi", 5), ("jkl", 1), ("mn", 7), ("op", 1)]);
    for target in 17..=40 {
        let m = train_bpe(&v, target).unwrap();
        for (w1, c1) in v.entries() {
            for (w2, c2) in v.entries() {
                if *c1 >= 2 && c2 < c1 && w1.as_str().len() == w2.as_str().len() {
                    assert!(
                        m.encode(w1).len() <= m.encode(w2).len(),
                        "target {target}: {w1} ({c1}) vs {w2} ({c2})"
                    );
                }
            }
        }
    }
}

#[test]
fn merge_file_round_trip_on_random_vocabularies() {
    for seed in 0..20 {
        let m = train_bpe(&random_vocab(seed), 40).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = MergeList::read(&buf[..]).unwrap();
        assert_eq!(merges_of(&back), merges_of(&m));
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(buf, again);
        for (w, _) in random_vocab(seed).entries() {
            assert_eq!(back.encode(w), m.encode(w));
        }
    }
}

#[test]
fn unseen_characters_stay_singletons() {
    let m = train_bpe(&vocab(&[("ab", 5), ("abab", 3)]), 10).unwrap();
    let w = Token::new("zabq").unwrap();
    let codes = m.encode(&w);
    assert_eq!(codes.first().map(String::as_str), Some("z"));
    assert_eq!(m.decode(&codes).unwrap(), vec![w]);
}

proptest! {
    #[test]
    fn compression_is_monotone_in_budget(seed in 0u64..10_000) {
        let v = random_vocab(seed);
        let mut last = u64::MAX;
        let alphabet = v.entries().iter().flat_map(|(w, _)| w.as_str().chars()).collect::<HashSet<_>>().len() + 1;
        for target in alphabet..alphabet + 30 {
            let m = train_bpe(&v, target).unwrap();
            prop_assert!(m.dictionary_size() <= target);
            let len = encoded_length(&v, &m);
            prop_assert!(len <= last);
            last = len;
        }
    }

    #[test]
    fn round_trip_holds_for_arbitrary_words(seed in 0u64..10_000, word in "[a-f]{1,12}") {
        let m = train_bpe(&random_vocab(seed), 30).unwrap();
        let w = Token::new(word).unwrap();
        let codes = m.encode(&w);
        prop_assert!(codes.last().unwrap().ends_with(EOW));
        prop_assert_eq!(m.decode(&codes).unwrap(), vec![w]);
    }

    #[test]
    fn each_merge_adds_one_code(seed in 0u64..10_000) {
        let v = random_vocab(seed);
        let full = train_bpe(&v, 10_000).unwrap();
        let base = full.dictionary_size() - full.rules().len();
        for k in 0..=full.rules().len() {
            let m = train_bpe(&v, base + k).unwrap();
            prop_assert_eq!(m.rules().len(), k);
            prop_assert_eq!(m.dictionary_size(), base + k);
            prop_assert_eq!(m.rules(), &full.rules()[..k]);
        }
    }
}
