use rayon::prelude::*;

use super::{CorpusError, FlagStream, TokenStream};
use crate::kappa::{DedupMap, DupScheme, RuleFlags};
use crate::rng::{counter_uniform, streams};

/// Replaces every token by its canonical symbol. The result is governed by
/// the map's canonical vocabulary.
pub fn apply_kappa_stream(stream: &TokenStream, map: &DedupMap) -> Result<TokenStream, CorpusError> {
    stream.check_vocab(map.source_vocab())?;
    let canon = map.canonical_vocab()?;
    let table = map.kappa_table();
    let ids = stream.ids().par_iter().map(|&id| table[id as usize]).collect();
    Ok(stream.remapped(ids, &canon))
}

/// Replaces each occurrence of a duplicated symbol by its twin with the
/// scheme's choice probability. The draw at position `i` depends only on
/// `(seed, i)`, so any sharding of the work gives the same stream.
pub fn duplicate_sample_stream(
    stream: &TokenStream,
    scheme: &DupScheme,
    seed: u64,
) -> Result<TokenStream, CorpusError> {
    stream.check_vocab(scheme.base_vocab())?;
    let primes = scheme.prime_table();
    let ids = stream
        .ids()
        .par_iter()
        .enumerate()
        .map(|(pos, &id)| match primes[id as usize] {
            Some(p) if counter_uniform(seed, streams::DUPLICATE_CHOICE, pos as u64) < scheme.choice_prob(id) => p,
            _ => id,
        })
        .collect();
    Ok(stream.remapped(ids, scheme.dup_vocab()))
}

/// Provenance flags of non-canonical tokens; canonical positions are empty.
pub fn noncanonical_flag_stream(stream: &TokenStream, map: &DedupMap) -> Result<FlagStream, CorpusError> {
    stream.check_vocab(map.source_vocab())?;
    let flags = stream
        .ids()
        .par_iter()
        .map(|&id| {
            if map.is_canonical(id) {
                RuleFlags::NONE
            } else {
                map.provenance(id)
            }
        })
        .collect();
    Ok(FlagStream::new(flags, stream.vocab_hash()))
}

/// Exchanges every duplicated token with its twin, in both directions.
pub fn swap_twins(stream: &TokenStream, scheme: &DupScheme) -> Result<TokenStream, CorpusError> {
    stream.check_vocab(scheme.dup_vocab())?;
    let mut table: Vec<u32> = (0..scheme.dup_vocab().len() as u32).collect();
    for (b, p) in scheme.twin_pairs() {
        table[b as usize] = p;
        table[p as usize] = b;
    }
    let ids = stream.ids().iter().map(|&id| table[id as usize]).collect();
    Ok(stream.remapped(ids, scheme.dup_vocab()))
}
