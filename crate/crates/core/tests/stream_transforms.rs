use std::sync::Arc;

use neardup::corpus::{apply_kappa_stream, duplicate_sample_stream, noncanonical_flag_stream, TokenStream};
use neardup::kappa::{build_dup_for_ids, build_kappa, build_synthetic_dup};
use neardup::{Rule, RuleFlags, Vocabulary};
use proptest::prelude::*;

fn vocab(entries: &[&str]) -> Arc<Vocabulary> {
    Arc::new(Vocabulary::from_entries(entries.iter().map(|s| s.to_string()).collect(), 0).unwrap())
}

const WORDS: &[&str] = &[
    "<eos>",
    "the",
    "▁the",
    "The",
    "▁The",
    "cats",
    "cat",
    "▁Cats",
    "▁Books",
    "book",
    "gas",
    "Now",
    "now",
    "▁individuals",
    "▁individual",
    "a",
    "A",
    "▁a",
    "dogs",
    "Dog",
];

#[test]
fn books_sets_every_flag() {
    let v = vocab(&["<eos>", "▁Books", "book"]);
    let map = build_kappa(v.clone(), Rule::All);
    let s = TokenStream::from_ids(vec![1, 0], &v).unwrap();
    let flags = noncanonical_flag_stream(&s, &map).unwrap();
    let f = flags.flags()[0];
    assert!(f.contains(RuleFlags::SPACE) && f.contains(RuleFlags::LOWER) && f.contains(RuleFlags::PLURAL));
    assert!(flags.flags()[1].is_empty());
}

#[test]
fn identity_map_leaves_streams_alone() {
    let v = vocab(WORDS);
    let map = build_kappa(v.clone(), Rule::Identity);
    let ids: Vec<u32> = (0..400)
        .map(|i| if i % 9 == 8 { 0 } else { 1 + (i * 7 % 19) as u32 })
        .chain([0])
        .collect();
    let s = TokenStream::from_ids(ids, &v).unwrap();
    assert_eq!(apply_kappa_stream(&s, &map).unwrap().ids(), s.ids());
    assert!(noncanonical_flag_stream(&s, &map)
        .unwrap()
        .flags()
        .iter()
        .all(|f| f.is_empty()));
}

fn long_stream(v: &Vocabulary, n: usize) -> TokenStream {
    let ids: Vec<u32> = (0..n)
        .map(|i| {
            if i % 50 == 49 || i == n - 1 {
                0
            } else {
                1 + (i % 3) as u32
            }
        })
        .collect();
    TokenStream::from_ids(ids, v).unwrap()
}

#[test]
fn choice_probability_extremes() {
    let v = vocab(&["<eos>", "x", "y", "z"]);
    let s = long_stream(&v, 5000);
    let (never, _) = build_dup_for_ids(v.clone(), &[1, 2, 3], 0.0).unwrap();
    let d = duplicate_sample_stream(&s, &never, 9).unwrap();
    assert_eq!(d.ids(), s.ids());
    let (always, _) = build_dup_for_ids(v.clone(), &[1, 2, 3], 1.0).unwrap();
    let d = duplicate_sample_stream(&s, &always, 9).unwrap();
    for (&a, &b) in s.ids().iter().zip(d.ids()) {
        match always.prime_of(a) {
            Some(p) => assert_eq!(b, p),
            None => assert_eq!(b, a),
        }
    }
}

#[test]
fn half_choice_over_a_million_positions() {
    let v = vocab(&["<eos>", "x", "y", "z"]);
    let s = long_stream(&v, 1_020_500);
    let (scheme, _) = build_dup_for_ids(v.clone(), &[1, 2, 3], 0.5).unwrap();
    let d = duplicate_sample_stream(&s, &scheme, 2024).unwrap();
    let eligible = s.ids().iter().filter(|&&id| id != 0).count();
    assert!(eligible >= 1_000_000);
    let primed = d.ids().iter().filter(|&&id| id as usize >= v.len()).count();
    let frac = primed as f64 / eligible as f64;
    assert!((frac - 0.5).abs() <= 0.0015, "primed fraction {frac}");
}

fn arb_stream(len: usize) -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::vec(0u32..WORDS.len() as u32, 1..len).prop_map(|mut ids| {
        ids.push(0);
        ids
    })
}

fn arb_rule() -> impl Strategy<Value = Rule> {
    prop_oneof![
        Just(Rule::Identity),
        Just(Rule::Space),
        Just(Rule::Lower),
        Just(Rule::Plural),
        Just(Rule::All)
    ]
}

proptest! {
    #[test]
    fn kappa_stream_matches_lookup(ids in arb_stream(300), rule in arb_rule()) {
        let v = vocab(WORDS);
        let map = build_kappa(v.clone(), rule);
        let s = TokenStream::from_ids(ids.clone(), &v).unwrap();
        let out = apply_kappa_stream(&s, &map).unwrap();
        let keys = map.canonical_keys();
        for (&src, &dst) in ids.iter().zip(out.ids()) {
            let want = neardup::kappa::canonical_key(v.surface(src), rule);
            if src == 0 {
                prop_assert_eq!(dst, map.kappa(0));
            } else {
                prop_assert_eq!(&keys[dst as usize], &want);
            }
        }
    }

    #[test]
    fn flags_mark_exactly_noncanonical_positions(ids in arb_stream(300), rule in arb_rule()) {
        let v = vocab(WORDS);
        let map = build_kappa(v.clone(), rule);
        let s = TokenStream::from_ids(ids.clone(), &v).unwrap();
        let flags = noncanonical_flag_stream(&s, &map).unwrap();
        for (&id, f) in ids.iter().zip(flags.flags()) {
            prop_assert_eq!(f.is_empty(), map.is_canonical(id));
        }
    }

    #[test]
    fn synthetic_round_trip(ids in arb_stream(300), fraction in 0.0f64..=1.0, seed in 0u64..1000) {
        let v = vocab(WORDS);
        let (scheme, map) = build_synthetic_dup(v.clone(), fraction, 0.5, seed).unwrap();
        let s = TokenStream::from_ids(ids, &v).unwrap();
        let d = duplicate_sample_stream(&s, &scheme, seed ^ 7).unwrap();
        let back = apply_kappa_stream(&d, &map).unwrap();
        prop_assert_eq!(back.ids(), s.ids());
    }
}
