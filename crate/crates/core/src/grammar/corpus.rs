use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Grammar, GrammarError};

/// Sentence-type proportions of a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstructionMix {
    pub declarative: f64,
    pub wh: f64,
    pub topic: f64,
}

impl Default for ConstructionMix {
    /// Roughly 50 wh-questions for every topicalized sentence.
    fn default() -> Self {
        Self {
            declarative: 0.8,
            wh: 0.196,
            topic: 0.004,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub total_tokens: u64,
    #[serde(default)]
    pub mix: ConstructionMix,
    pub seed: u64,
    /// Probability that a topicalized sentence opens with a discourse adverb.
    #[serde(default = "default_adverb_prob")]
    pub topic_adverb_prob: f64,
}

fn default_adverb_prob() -> f64 {
    0.5
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), GrammarError> {
        let m = self.mix;
        let parts = [m.declarative, m.wh, m.topic];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p))
            || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9
        {
            return Err(GrammarError::Config(format!(
                "construction mix must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.topic_adverb_prob) {
            return Err(GrammarError::Config(
                "topic_adverb_prob must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Sentence classes the corpus generator emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SentenceKind {
    Declarative,
    Wh,
    Topic,
}

impl Grammar {
    /// Concatenated sentences, each opening with the BOS token, until at least
    /// `spec.total_tokens` tokens have been produced.
    pub fn generate_corpus(&self, spec: &CorpusSpec) -> Result<Vec<u32>, GrammarError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let kinds = [
            SentenceKind::Declarative,
            SentenceKind::Wh,
            SentenceKind::Topic,
        ];
        let dist = WeightedIndex::new([spec.mix.declarative, spec.mix.wh, spec.mix.topic])
            .map_err(|e| GrammarError::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(spec.total_tokens as usize + 16);
        while (out.len() as u64) < spec.total_tokens {
            let kind = kinds[dist.sample(&mut rng)];
            self.sentence(kind, spec.topic_adverb_prob, &mut rng, &mut out)?;
        }
        Ok(out)
    }

    fn sentence(
        &self,
        kind: SentenceKind,
        adverb_prob: f64,
        rng: &mut ChaCha8Rng,
        out: &mut Vec<u32>,
    ) -> Result<(), GrammarError> {
        let lex = &self.lexicon;
        let fw = &lex.function_words;
        let v = &self.vocab;
        let pick = |rng: &mut ChaCha8Rng, list: &[String]| -> Result<u32, GrammarError> {
            v.id(&list[rng.gen_range(0..list.len())])
        };
        let the = v.id(&fw.article)?;
        out.push(v.id(&fw.bos)?);
        let subject = pick(rng, &lex.subject_nps)?;
        let verb = &lex.verbs[rng.gen_range(0..lex.verbs.len())];
        match kind {
            SentenceKind::Declarative => {
                let aux = pick(rng, &lex.auxiliaries)?;
                match rng.gen_range(0..4) {
                    // the S V-ed OBJ .
                    0 => out.extend([the, subject, v.id(verb.past())?]),
                    // then the S AUX V OBJ .
                    1 => out.extend([v.id(&fw.no_filler)?, the, subject, aux, v.id(verb.base())?]),
                    // (ADV) then , the S V-ed OBJ .
                    2 => {
                        if rng.gen_bool(adverb_prob) {
                            out.push(pick(rng, &lex.adverbs)?);
                        }
                        out.extend([
                            v.id(&fw.no_filler)?,
                            v.id(&fw.comma)?,
                            the,
                            subject,
                            v.id(verb.past())?,
                        ]);
                    }
                    // the S AUX V OBJ .
                    _ => out.extend([the, subject, aux, v.id(verb.base())?]),
                }
                match rng.gen_range(0..4) {
                    0 => out.push(v.id(&fw.object_animate)?),
                    1 => out.push(v.id(&fw.object_inanimate)?),
                    2 => out.extend([the, pick(rng, &lex.object_nps_animate)?]),
                    _ => out.extend([the, pick(rng, &lex.object_nps_inanimate)?]),
                }
                out.push(v.id(&fw.period)?);
            }
            SentenceKind::Wh => {
                let wh = if rng.gen_bool(0.5) {
                    &fw.wh_animate
                } else {
                    &fw.wh_inanimate
                };
                let aux = pick(rng, &lex.auxiliaries)?;
                out.extend([
                    v.id(wh)?,
                    aux,
                    the,
                    subject,
                    v.id(verb.base())?,
                    v.id(&fw.question)?,
                ]);
            }
            SentenceKind::Topic => {
                if rng.gen_bool(adverb_prob) {
                    out.push(pick(rng, &lex.adverbs)?);
                }
                let filler = if rng.gen_bool(0.5) {
                    pick(rng, &lex.object_nps_animate)?
                } else {
                    pick(rng, &lex.object_nps_inanimate)?
                };
                out.extend([
                    the,
                    filler,
                    v.id(&fw.comma)?,
                    the,
                    subject,
                    v.id(verb.past())?,
                    v.id(&fw.period)?,
                ]);
            }
        }
        Ok(())
    }

    /// Splits a token stream into sentences at BOS tokens.
    pub fn sentences<'a>(&self, stream: &'a [u32]) -> Vec<&'a [u32]> {
        let bos = self.bos();
        split_at_bos(stream, bos)
    }
}

pub fn split_at_bos(stream: &[u32], bos: u32) -> Vec<&[u32]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..stream.len() {
        if stream[i] == bos {
            out.push(&stream[start..i]);
            start = i;
        }
    }
    if start < stream.len() {
        out.push(&stream[start..]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Lexicon;

    fn spec(mix: ConstructionMix, total: u64) -> CorpusSpec {
        CorpusSpec {
            total_tokens: total,
            mix,
            seed: 5,
            topic_adverb_prob: 0.5,
        }
    }

    #[test]
    fn declarative_only_has_no_questions_or_fronting() {
        let g = Grammar::new(Lexicon::default()).unwrap();
        let mix = ConstructionMix {
            declarative: 1.0,
            wh: 0.0,
            topic: 0.0,
        };
        let stream = g.generate_corpus(&spec(mix, 20_000)).unwrap();
        assert!(stream.len() >= 20_000);
        let q = g.vocab.id("?").unwrap();
        let what = g.vocab.id("what").unwrap();
        let who = g.vocab.id("who").unwrap();
        assert!(!stream.iter().any(|t| [q, what, who].contains(t)));
        // No fronted object: a comma is always preceded by the no-filler word.
        let then = g.vocab.id("then").unwrap();
        let comma = g.vocab.id(",").unwrap();
        for w in stream.windows(2) {
            if w[1] == comma {
                assert_eq!(w[0], then);
            }
        }
    }

    #[test]
    fn deterministic() {
        let g = Grammar::new(Lexicon::default()).unwrap();
        let s = spec(ConstructionMix::default(), 5_000);
        assert_eq!(
            g.generate_corpus(&s).unwrap(),
            g.generate_corpus(&s).unwrap()
        );
    }

    #[test]
    fn rejects_bad_mix() {
        let g = Grammar::new(Lexicon::default()).unwrap();
        let mix = ConstructionMix {
            declarative: 0.5,
            wh: 0.2,
            topic: 0.2,
        };
        assert!(matches!(
            g.generate_corpus(&spec(mix, 10)),
            Err(GrammarError::Config(_))
        ));
    }

    #[test]
    fn sentences_split_on_bos() {
        assert_eq!(
            split_at_bos(&[0, 5, 6, 0, 7], 0),
            vec![&[0, 5, 6][..], &[0, 7][..]]
        );
    }
}
