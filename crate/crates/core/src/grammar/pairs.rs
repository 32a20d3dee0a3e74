use std::collections::HashSet;
use std::fmt;
use std::hash::Hasher;
use std::str::FromStr;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Grammar, GrammarError};

/// Number of aligned template slots.
pub const SLOT_COUNT: usize = 6;

pub const SLOT_NAMES: [&str; SLOT_COUNT] =
    ["prefix", "filler", "aux_comp", "article", "subject", "verb"];

/// One in this many lexical combinations is reserved for held-out evaluation.
const HELDOUT_EVERY: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    Wh,
    Topic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Animacy {
    Animate,
    Inanimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TemplateVariant {
    pub construction: Construction,
    pub animacy: Animacy,
}

impl TemplateVariant {
    pub const WH_ANIMATE: Self = Self::new(Construction::Wh, Animacy::Animate);
    pub const WH_INANIMATE: Self = Self::new(Construction::Wh, Animacy::Inanimate);
    pub const TOPIC_ANIMATE: Self = Self::new(Construction::Topic, Animacy::Animate);
    pub const TOPIC_INANIMATE: Self = Self::new(Construction::Topic, Animacy::Inanimate);

    pub const ALL: [Self; 4] = [
        Self::WH_ANIMATE,
        Self::WH_INANIMATE,
        Self::TOPIC_ANIMATE,
        Self::TOPIC_INANIMATE,
    ];

    pub const fn new(construction: Construction, animacy: Animacy) -> Self {
        Self {
            construction,
            animacy,
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.construction, self.animacy) {
            (Construction::Wh, Animacy::Animate) => "wh_animate",
            (Construction::Wh, Animacy::Inanimate) => "wh_inanimate",
            (Construction::Topic, Animacy::Animate) => "topic_animate",
            (Construction::Topic, Animacy::Inanimate) => "topic_inanimate",
        }
    }
}

impl fmt::Display for TemplateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateVariant {
    type Err = GrammarError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GrammarError::Config(format!("unknown template variant {s:?}")))
    }
}

impl Serialize for TemplateVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TemplateVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

/// A base sentence without a filler and a source sentence with one. Both stop
/// right before the position where the gap would be, so their next-token
/// predictions differ: an overt object for the base, sentence-final
/// punctuation for the source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub variant: TemplateVariant,
    /// Index of the lexical combination in the variant's combination space.
    pub combination: u64,
    pub base_tokens: Vec<u32>,
    pub source_tokens: Vec<u32>,
    pub base_label: u32,
    pub source_label: u32,
    /// Token index of each template slot in the base sentence.
    pub base_slots: [usize; SLOT_COUNT],
    /// Token index of each template slot in the source sentence.
    pub source_slots: [usize; SLOT_COUNT],
}

impl MinimalPair {
    pub fn base_position(&self, slot: usize) -> Option<usize> {
        self.base_slots.get(slot).copied()
    }

    pub fn source_position(&self, slot: usize) -> Option<usize> {
        self.source_slots.get(slot).copied()
    }
}

/// Free lexical choices of one combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Choice {
    Wh {
        subject: usize,
        verb: usize,
        aux: usize,
    },
    Topic {
        adverb: usize,
        filler: usize,
        subject: usize,
        verb: usize,
    },
}

pub(super) fn in_split(construction: Construction, combination: u64, split: Split) -> bool {
    let mut h = FnvHasher::default();
    h.write_u8(construction as u8);
    h.write_u64(combination);
    let heldout = h.finish() % HELDOUT_EVERY == 0;
    heldout == (split == Split::Heldout)
}

impl Grammar {
    fn fillers(&self, animacy: Animacy) -> &[String] {
        match animacy {
            Animacy::Animate => &self.lexicon.object_nps_animate,
            Animacy::Inanimate => &self.lexicon.object_nps_inanimate,
        }
    }

    /// Exact number of distinct lexical combinations for a variant.
    pub fn count_space(&self, variant: TemplateVariant) -> u64 {
        let lex = &self.lexicon;
        let (s, v) = (lex.subject_nps.len() as u64, lex.verbs.len() as u64);
        match variant.construction {
            Construction::Wh => s * v * lex.auxiliaries.len() as u64,
            Construction::Topic => {
                lex.adverbs.len() as u64 * self.fillers(variant.animacy).len() as u64 * s * v
            }
        }
    }

    /// Number of combinations that belong to `split`.
    pub fn count_split(&self, variant: TemplateVariant, split: Split) -> u64 {
        (0..self.count_space(variant))
            .filter(|&i| in_split(variant.construction, i, split))
            .count() as u64
    }

    fn decode(&self, variant: TemplateVariant, mut idx: u64) -> Choice {
        let lex = &self.lexicon;
        let mut take = |n: usize| {
            let r = (idx % n as u64) as usize;
            idx /= n as u64;
            r
        };
        match variant.construction {
            Construction::Wh => {
                let aux = take(lex.auxiliaries.len());
                let verb = take(lex.verbs.len());
                let subject = take(lex.subject_nps.len());
                Choice::Wh { subject, verb, aux }
            }
            Construction::Topic => {
                let verb = take(lex.verbs.len());
                let subject = take(lex.subject_nps.len());
                let filler = take(self.fillers(variant.animacy).len());
                let adverb = take(lex.adverbs.len());
                Choice::Topic {
                    adverb,
                    filler,
                    subject,
                    verb,
                }
            }
        }
    }

    /// Builds the pair for one combination index.
    pub fn build_pair(
        &self,
        variant: TemplateVariant,
        combination: u64,
    ) -> Result<MinimalPair, GrammarError> {
        let space = self.count_space(variant);
        if combination >= space {
            return Err(GrammarError::Capacity {
                requested: combination + 1,
                available: space,
                space,
            });
        }
        let lex = &self.lexicon;
        let fw = &lex.function_words;
        let id = |w: &str| self.vocab.id(w);
        let object = match variant.animacy {
            Animacy::Animate => &fw.object_animate,
            Animacy::Inanimate => &fw.object_inanimate,
        };
        let pair = match self.decode(variant, combination) {
            Choice::Wh { subject, verb, aux } => {
                let wh = match variant.animacy {
                    Animacy::Animate => &fw.wh_animate,
                    Animacy::Inanimate => &fw.wh_inanimate,
                };
                let (subj, v, a) = (
                    id(&lex.subject_nps[subject])?,
                    id(lex.verbs[verb].base())?,
                    id(&lex.auxiliaries[aux])?,
                );
                let (bos, the) = (id(&fw.bos)?, id(&fw.article)?);
                // <s> what did the doctor read | ?
                let source_tokens = vec![bos, id(wh)?, a, the, subj, v];
                // <s> then the doctor did read | it
                let base_tokens = vec![bos, id(&fw.no_filler)?, the, subj, a, v];
                MinimalPair {
                    variant,
                    combination,
                    base_tokens,
                    source_tokens,
                    base_label: id(object)?,
                    source_label: id(&fw.question)?,
                    base_slots: [0, 1, 4, 2, 3, 5],
                    source_slots: [0, 1, 2, 3, 4, 5],
                }
            }
            Choice::Topic {
                adverb,
                filler,
                subject,
                verb,
            } => {
                let (adv, fill, subj, v) = (
                    id(&lex.adverbs[adverb])?,
                    id(&self.fillers(variant.animacy)[filler])?,
                    id(&lex.subject_nps[subject])?,
                    id(lex.verbs[verb].past())?,
                );
                let (bos, the, comma) = (id(&fw.bos)?, id(&fw.article)?, id(&fw.comma)?);
                // <s> actually the book , the author read | .
                let source_tokens = vec![bos, adv, the, fill, comma, the, subj, v];
                // <s> actually then , the author read | it
                let base_tokens = vec![bos, adv, id(&fw.no_filler)?, comma, the, subj, v];
                MinimalPair {
                    variant,
                    combination,
                    base_tokens,
                    source_tokens,
                    base_label: id(object)?,
                    source_label: id(&fw.period)?,
                    base_slots: [1, 2, 3, 4, 5, 6],
                    source_slots: [1, 3, 4, 5, 6, 7],
                }
            }
        };
        Ok(pair)
    }

    /// Samples `n` distinct pairs from the `split` partition of the variant's
    /// combination space. Deterministic in `seed`.
    pub fn generate_pairs(
        &self,
        variant: TemplateVariant,
        n: usize,
        seed: u64,
        split: Split,
    ) -> Result<Vec<MinimalPair>, GrammarError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let space = self.count_space(variant);
        let available = self.count_split(variant, split);
        if n as u64 > available {
            return Err(GrammarError::Capacity {
                requested: n as u64,
                available,
                space,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (variant_tag(variant) << 56));
        let chosen: Vec<u64> = if (n as u64) * 2 > available {
            let mut all: Vec<u64> = (0..space)
                .filter(|&i| in_split(variant.construction, i, split))
                .collect();
            all.shuffle(&mut rng);
            all.truncate(n);
            all
        } else {
            let mut seen = HashSet::with_capacity(n);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let i = rng.gen_range(0..space);
                if in_split(variant.construction, i, split) && seen.insert(i) {
                    out.push(i);
                }
            }
            out
        };
        chosen
            .into_iter()
            .map(|i| self.build_pair(variant, i))
            .collect()
    }
}

fn variant_tag(v: TemplateVariant) -> u64 {
    TemplateVariant::ALL.iter().position(|x| *x == v).unwrap() as u64 + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{Lexicon, LexiconSizes};

    fn grammar() -> Grammar {
        Grammar::new(Lexicon::default()).unwrap()
    }

    fn toy(subjects: usize, verbs: usize, aux: usize, adverbs: usize, fillers: usize) -> Grammar {
        let lex = Lexicon::default()
            .truncated(LexiconSizes {
                subjects,
                objects_animate: fillers,
                objects_inanimate: fillers,
                auxiliaries: aux,
                adverbs,
                verbs,
            })
            .unwrap();
        Grammar::new(lex).unwrap()
    }

    #[test]
    fn toy_space_counts() {
        assert_eq!(
            toy(2, 2, 1, 1, 1).count_space(TemplateVariant::WH_ANIMATE),
            4
        );
        assert_eq!(
            toy(2, 2, 1, 5, 2).count_space(TemplateVariant::TOPIC_INANIMATE),
            40
        );
    }

    #[test]
    fn default_space_matches_enumeration() {
        let g = grammar();
        let lex = &g.lexicon;
        let mut seen = HashSet::new();
        for s in &lex.subject_nps {
            for v in &lex.verbs {
                for a in &lex.auxiliaries {
                    seen.insert((s.clone(), v.0.clone(), a.clone()));
                }
            }
        }
        assert_eq!(
            g.count_space(TemplateVariant::WH_ANIMATE),
            seen.len() as u64
        );
        assert_eq!(g.count_space(TemplateVariant::WH_ANIMATE), 10_500);
        assert_eq!(g.count_space(TemplateVariant::TOPIC_ANIMATE), 1_875_000);
    }

    #[test]
    fn wh_pair_layout() {
        let g = grammar();
        let p = &g
            .generate_pairs(TemplateVariant::WH_INANIMATE, 1, 7, Split::Train)
            .unwrap()[0];
        let src = g.vocab.detokenize(&p.source_tokens).unwrap();
        let base = g.vocab.detokenize(&p.base_tokens).unwrap();
        assert!(src.starts_with("<s> what "), "{src}");
        assert!(base.starts_with("<s> then the "), "{base}");
        assert_eq!(g.vocab.word(p.source_label), Some("?"));
        assert_eq!(g.vocab.word(p.base_label), Some("it"));
        // Slot words agree except the filler slot.
        for slot in [0, 2, 3, 4, 5] {
            assert_eq!(
                p.base_tokens[p.base_slots[slot]],
                p.source_tokens[p.source_slots[slot]]
            );
        }
        assert_ne!(
            p.base_tokens[p.base_slots[1]],
            p.source_tokens[p.source_slots[1]]
        );
    }

    #[test]
    fn topic_pair_layout() {
        let g = grammar();
        let p = &g
            .generate_pairs(TemplateVariant::TOPIC_ANIMATE, 1, 3, Split::Heldout)
            .unwrap()[0];
        let src = g.vocab.detokenize(&p.source_tokens).unwrap();
        assert_eq!(p.source_tokens.len(), 8, "{src}");
        assert_eq!(g.vocab.word(p.source_label), Some("."));
        assert_eq!(g.vocab.word(p.base_label), Some("him"));
        assert_eq!(g.vocab.word(p.source_tokens[4]), Some(","));
    }

    #[test]
    fn zero_pairs_is_empty() {
        assert!(grammar()
            .generate_pairs(TemplateVariant::WH_ANIMATE, 0, 1, Split::Train)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn capacity_error_reports_space() {
        let g = toy(2, 2, 1, 1, 1);
        let err = g
            .generate_pairs(TemplateVariant::WH_ANIMATE, 5, 1, Split::Train)
            .unwrap_err();
        assert!(matches!(err, GrammarError::Capacity { space: 4, .. }));
    }

    #[test]
    fn deterministic_unique_and_disjoint() {
        let g = grammar();
        let v = TemplateVariant::WH_ANIMATE;
        let a = g.generate_pairs(v, 300, 11, Split::Train).unwrap();
        let b = g.generate_pairs(v, 300, 11, Split::Train).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<u64> = a.iter().map(|p| p.combination).collect();
        assert_eq!(ids.len(), 300);
        let held = g.generate_pairs(v, 300, 11, Split::Heldout).unwrap();
        let train_sents: HashSet<&Vec<u32>> = a.iter().map(|p| &p.source_tokens).collect();
        assert!(held.iter().all(|p| !train_sents.contains(&p.source_tokens)));
    }

    #[test]
    fn exhausting_a_split_enumerates() {
        let g = toy(3, 3, 2, 1, 1);
        let v = TemplateVariant::WH_ANIMATE;
        let n = g.count_split(v, Split::Train) as usize;
        let all = g.generate_pairs(v, n, 0, Split::Train).unwrap();
        let ids: HashSet<u64> = all.iter().map(|p| p.combination).collect();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in TemplateVariant::ALL {
            assert_eq!(v.name().parse::<TemplateVariant>().unwrap(), v);
        }
        assert!("wh".parse::<TemplateVariant>().is_err());
    }
}
