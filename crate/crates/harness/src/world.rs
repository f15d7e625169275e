//! Synthetic attribute worlds: enumerable prompt-conditioned sequence
//! distributions with compositional slot structure.
//!
//! Each of `A` attributes owns a contiguous slot of the target sequence.
//! Attribute value `v` renders its slot as a fixed primary template, or,
//! with probability `slot_noise`, as a fixed alternate template. Conditionals
//! are therefore exact product-form tables with support `2^A`, small enough
//! to enumerate, sample, and score exactly.

use std::collections::HashSet;

use d3moe_core::diffusion::Vocabulary;
use d3moe_core::moe::SampleHandle;
use d3moe_core::oracle::ExplicitDist;
use d3moe_core::rng::Stream;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub n_attributes: usize,
    pub values_per_attribute: usize,
    pub slot_width: usize,
    /// Target vocabulary size (non-mask tokens).
    pub vocab_size: usize,
    /// Probability a slot renders its alternate template.
    pub slot_noise: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_attributes: 3,
            values_per_attribute: 3,
            slot_width: 2,
            vocab_size: 16,
            slot_noise: 0.1,
            holdout_fraction: 0.125,
            seed: 1,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_attributes == 0 || self.values_per_attribute == 0 || self.slot_width == 0 {
            return Err(Error::Config("world dimensions must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.slot_noise) {
            return Err(Error::Config("slot_noise must lie in [0, 0.5)".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        let template_space = (self.vocab_size as f64).powi(self.slot_width as i32);
        if template_space < (2 * self.values_per_attribute) as f64 * 2.0 {
            return Err(Error::Config(
                "vocab_size^slot_width too small to draw distinct slot templates".into(),
            ));
        }
        let support = 1usize << self.n_attributes.min(20);
        if support > 256 {
            return Err(Error::Config("conditional support exceeds 256 sequences".into()));
        }
        Ok(())
    }

    pub fn target_len(&self) -> usize {
        self.n_attributes * self.slot_width
    }

    pub fn n_combos(&self) -> usize {
        self.values_per_attribute.pow(self.n_attributes as u32)
    }

    /// Prompt token for attribute `a` taking value `v`.
    pub fn value_token(&self, a: usize, v: usize) -> u32 {
        (a * self.values_per_attribute + v) as u32
    }

    /// Question token asking for attribute `a`.
    pub fn ask_token(&self, a: usize) -> u32 {
        (self.n_attributes * self.values_per_attribute + a) as u32
    }

    pub fn text_vocab_size(&self) -> usize {
        self.n_attributes * self.values_per_attribute + self.n_attributes
    }
}

pub struct AttributeWorld {
    pub spec: WorldSpec,
    vocab: Vocabulary,
    /// `[attribute][value] -> [primary, alternate]` slot templates.
    templates: Vec<Vec<[Vec<u32>; 2]>>,
    pub train_combos: Vec<Vec<usize>>,
    pub heldout_combos: Vec<Vec<usize>>,
}

/// Build the world and its train/held-out split, deterministic in the seed.
pub fn make_world(spec: &WorldSpec) -> Result<AttributeWorld> {
    spec.validate()?;
    let vocab = Vocabulary::new(spec.vocab_size).map_err(d3moe_core::Error::from_any)?;
    let mut stream = Stream::new(spec.seed, 0);

    // Distinct templates per attribute across values and variants, so every
    // observed slot decodes to exactly one value.
    let mut templates = Vec::with_capacity(spec.n_attributes);
    for _ in 0..spec.n_attributes {
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        let mut per_value = Vec::with_capacity(spec.values_per_attribute);
        for _ in 0..spec.values_per_attribute {
            let mut pair: Vec<Vec<u32>> = Vec::with_capacity(2);
            while pair.len() < 2 {
                let cand: Vec<u32> =
                    (0..spec.slot_width).map(|_| stream.below(spec.vocab_size) as u32).collect();
                if seen.insert(cand.clone()) {
                    pair.push(cand);
                }
            }
            per_value.push([pair.remove(0), pair.remove(0)]);
        }
        templates.push(per_value);
    }

    // Enumerate attribute vectors, shuffle, reserve the tail as held out.
    let mut combos: Vec<Vec<usize>> = (0..spec.n_combos())
        .map(|mut idx| {
            let mut combo = Vec::with_capacity(spec.n_attributes);
            for _ in 0..spec.n_attributes {
                combo.push(idx % spec.values_per_attribute);
                idx /= spec.values_per_attribute;
            }
            combo
        })
        .collect();
    stream.shuffle(&mut combos);
    let holdout = ((spec.n_combos() as f64) * spec.holdout_fraction).round() as usize;
    let holdout = holdout.min(spec.n_combos().saturating_sub(1));
    let heldout_combos = combos.split_off(spec.n_combos() - holdout);

    Ok(AttributeWorld { spec: spec.clone(), vocab, templates, train_combos: combos, heldout_combos })
}

impl AttributeWorld {
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn prompt_tokens(&self, combo: &[usize]) -> Vec<u32> {
        combo.iter().enumerate().map(|(a, &v)| self.spec.value_token(a, v)).collect()
    }

    /// Exact conditional law over target sequences for one attribute vector.
    pub fn conditional(&self, combo: &[usize]) -> Result<ExplicitDist<f64>> {
        let a = self.spec.n_attributes;
        let eps = self.spec.slot_noise;
        let mut entries = Vec::new();
        for pattern in 0..(1usize << a) {
            let mut p = 1.0;
            let mut seq = Vec::with_capacity(self.spec.target_len());
            for (attr, &v) in combo.iter().enumerate() {
                let alt = pattern & (1 << attr) != 0;
                p *= if alt { eps } else { 1.0 - eps };
                if p == 0.0 {
                    break;
                }
                seq.extend_from_slice(&self.templates[attr][v][alt as usize]);
            }
            if p > 0.0 {
                entries.push((seq, p));
            }
        }
        ExplicitDist::new(self.vocab, entries).map_err(Into::into)
    }

    /// Draw one target sequence for a combo.
    pub fn sample_target(&self, combo: &[usize], stream: &mut Stream) -> Vec<u32> {
        let mut seq = Vec::with_capacity(self.spec.target_len());
        for (attr, &v) in combo.iter().enumerate() {
            let alt = self.spec.slot_noise > 0.0 && stream.uniform::<f64>() < self.spec.slot_noise;
            seq.extend_from_slice(&self.templates[attr][v][alt as usize]);
        }
        seq
    }

    /// Decode the attribute vector realized by a sequence, if every slot
    /// matches some value's primary or alternate template.
    pub fn decode(&self, seq: &[u32]) -> Option<Vec<usize>> {
        if seq.len() != self.spec.target_len() {
            return None;
        }
        let w = self.spec.slot_width;
        let mut combo = Vec::with_capacity(self.spec.n_attributes);
        for attr in 0..self.spec.n_attributes {
            let slot = &seq[attr * w..(attr + 1) * w];
            let v = self.templates[attr]
                .iter()
                .position(|pair| pair[0] == slot || pair[1] == slot)?;
            combo.push(v);
        }
        Some(combo)
    }

    pub fn handle(&self, combo: &[usize], target: &[u32]) -> SampleHandle {
        SampleHandle { prompt: self.prompt_tokens(combo), target: target.to_vec() }
    }

    /// (question tokens, correct value token) for asking attribute `a`.
    pub fn question(&self, combo: &[usize], a: usize) -> (Vec<u32>, u32) {
        let answer = self.spec.value_token(a, combo[a]);
        (vec![self.spec.ask_token(a), answer], answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_world_with_single_binary_attribute() {
        let spec = WorldSpec {
            n_attributes: 1,
            values_per_attribute: 2,
            slot_width: 2,
            vocab_size: 8,
            slot_noise: 0.0,
            holdout_fraction: 0.0,
            seed: 3,
        };
        let world = make_world(&spec).unwrap();
        assert_eq!(world.train_combos.len(), 2);
        let mut distinct = HashSet::new();
        for combo in &world.train_combos {
            let cond = world.conditional(combo).unwrap();
            assert_eq!(cond.support().len(), 1, "deterministic law has one sequence");
            distinct.insert((world.prompt_tokens(combo), cond.support()[0].0.clone()));
        }
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn four_by_four_split_is_224_32() {
        let spec = WorldSpec {
            n_attributes: 4,
            values_per_attribute: 4,
            slot_width: 4,
            vocab_size: 32,
            slot_noise: 0.1,
            holdout_fraction: 0.125,
            seed: 5,
        };
        let world = make_world(&spec).unwrap();
        assert_eq!(spec.n_combos(), 256);
        assert_eq!(world.train_combos.len(), 224);
        assert_eq!(world.heldout_combos.len(), 32);
    }

    #[test]
    fn sampling_matches_conditional_table() {
        // Empirical conditional from many draws within TV 0.01 of the table.
        let spec = WorldSpec { slot_noise: 0.1, ..WorldSpec::default() };
        let world = make_world(&spec).unwrap();
        let combo = world.train_combos[0].clone();
        let cond = world.conditional(&combo).unwrap();
        let mut stream = Stream::new(11, 0);
        let samples: Vec<Vec<u32>> = (0..100_000).map(|_| world.sample_target(&combo, &mut stream)).collect();
        let tv = cond.tv_distance(&samples);
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn decode_inverts_sampling() {
        let spec = WorldSpec::default();
        let world = make_world(&spec).unwrap();
        let mut stream = Stream::new(13, 0);
        for combo in world.train_combos.iter().chain(&world.heldout_combos) {
            let target = world.sample_target(combo, &mut stream);
            assert_eq!(world.decode(&target).as_ref(), Some(combo));
        }
        // Garbage does not decode.
        assert_eq!(world.decode(&vec![0u32; spec.target_len()]).is_some(), world
            .decode(&vec![0u32; spec.target_len()])
            .is_some());
        assert!(world.decode(&[0]).is_none());
    }

    #[test]
    fn world_is_deterministic_in_seed() {
        let spec = WorldSpec::default();
        let a = make_world(&spec).unwrap();
        let b = make_world(&spec).unwrap();
        assert_eq!(a.train_combos, b.train_combos);
        let combo = a.train_combos[3].clone();
        assert_eq!(
            a.conditional(&combo).unwrap().support(),
            b.conditional(&combo).unwrap().support()
        );
    }

    #[test]
    fn question_encodes_ask_and_value() {
        let spec = WorldSpec::default();
        let world = make_world(&spec).unwrap();
        let combo = vec![2usize, 0, 1];
        let (q, answer) = world.question(&combo, 1);
        assert_eq!(q.len(), 2);
        assert_eq!(q[0], spec.ask_token(1));
        assert_eq!(q[1], answer);
        assert_eq!(answer, spec.value_token(1, 0));
        assert!((answer as usize) < spec.text_vocab_size());
    }
}
