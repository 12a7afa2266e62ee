#![allow(dead_code)]

use mode_lab::adapters::AdapterStack;
use mode_lab::backbone::{BackboneConfig, TokenSequence, VocabLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(seed: u64) -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        model_dim: 8,
        mlp_dim: 16,
        heads: 2,
        image_tokens: 6,
        text_tokens: 6,
        max_len: 12,
        seed,
    }
}

/// Random sequence starting at BOS with every later position a target.
pub fn random_sequence(rng: &mut ChaCha8Rng, vocab: &VocabLayout, len: usize) -> TokenSequence {
    let mut ids = vec![vocab.bos()];
    ids.extend((1..len).map(|_| rng.gen_range(0..vocab.size())));
    let mut mask = vec![true; len];
    mask[0] = false;
    TokenSequence::new(vocab, ids, mask).expect("valid random sequence")
}

/// Sequence made only of text tokens.
pub fn text_sequence(rng: &mut ChaCha8Rng, vocab: &VocabLayout, len: usize) -> TokenSequence {
    let mut ids = vec![vocab.bos()];
    ids.extend((1..len).map(|_| vocab.text_base() + rng.gen_range(0..vocab.text_tokens)));
    let mut mask = vec![true; len];
    mask[0] = false;
    TokenSequence::new(vocab, ids, mask).expect("valid text sequence")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Copies every tensor of `dst` from the `src` tensor whose name matches after
/// replacing `to` by `from`.
pub fn copy_renamed(src: &AdapterStack, dst: &mut AdapterStack, from: &str, to: &str) {
    for i in 0..dst.params.len() {
        let name = dst.params.name(i).replace(to, from);
        let j = src
            .params
            .index_of(&name)
            .unwrap_or_else(|| panic!("no source tensor {name}"));
        *dst.params.get_mut(i) = src.params.get(j).clone();
    }
}
