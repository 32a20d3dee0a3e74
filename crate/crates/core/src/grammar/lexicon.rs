use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GrammarError;

const DEFAULT_LEXICON: &str = include_str!("../../assets/default_lexicon.toml");

/// Base form and simple past of a transitive verb.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbForms(pub String, pub String);

impl VerbForms {
    pub fn base(&self) -> &str {
        &self.0
    }

    pub fn past(&self) -> &str {
        &self.1
    }
}

/// Closed-class words the templates are built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionWords {
    pub bos: String,
    pub article: String,
    pub comma: String,
    pub period: String,
    pub question: String,
    pub wh_animate: String,
    pub wh_inanimate: String,
    /// Stands in the filler slot of sentences that have no filler.
    pub no_filler: String,
    pub object_animate: String,
    pub object_inanimate: String,
}

impl FunctionWords {
    fn all(&self) -> [&str; 10] {
        [
            &self.bos,
            &self.article,
            &self.comma,
            &self.period,
            &self.question,
            &self.wh_animate,
            &self.wh_inanimate,
            &self.no_filler,
            &self.object_animate,
            &self.object_inanimate,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub subject_nps: Vec<String>,
    pub object_nps_animate: Vec<String>,
    pub object_nps_inanimate: Vec<String>,
    pub auxiliaries: Vec<String>,
    pub adverbs: Vec<String>,
    pub verbs: Vec<VerbForms>,
    pub function_words: FunctionWords,
}

/// Number of entries to keep from each open-class list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconSizes {
    pub subjects: usize,
    pub objects_animate: usize,
    pub objects_inanimate: usize,
    pub auxiliaries: usize,
    pub adverbs: usize,
    pub verbs: usize,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

fn is_single_token(w: &str) -> bool {
    !w.is_empty() && !w.chars().any(char::is_whitespace) && w == w.to_lowercase()
}

impl Lexicon {
    pub fn from_toml_str(text: &str) -> Result<Self, GrammarError> {
        let lex: Lexicon =
            toml::from_str(text).map_err(|e| GrammarError::Lexicon(e.to_string()))?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, GrammarError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("lexicon serializes")
    }

    pub fn sizes(&self) -> LexiconSizes {
        LexiconSizes {
            subjects: self.subject_nps.len(),
            objects_animate: self.object_nps_animate.len(),
            objects_inanimate: self.object_nps_inanimate.len(),
            auxiliaries: self.auxiliaries.len(),
            adverbs: self.adverbs.len(),
            verbs: self.verbs.len(),
        }
    }

    /// Keeps the first `sizes.*` entries of each list.
    pub fn truncated(&self, sizes: LexiconSizes) -> Result<Self, GrammarError> {
        fn take<T: Clone>(name: &str, v: &[T], n: usize) -> Result<Vec<T>, GrammarError> {
            if n == 0 || n > v.len() {
                return Err(GrammarError::Lexicon(format!(
                    "{name}: requested {n} entries but the list has {}",
                    v.len()
                )));
            }
            Ok(v[..n].to_vec())
        }
        let lex = Lexicon {
            subject_nps: take("subject_nps", &self.subject_nps, sizes.subjects)?,
            object_nps_animate: take(
                "object_nps_animate",
                &self.object_nps_animate,
                sizes.objects_animate,
            )?,
            object_nps_inanimate: take(
                "object_nps_inanimate",
                &self.object_nps_inanimate,
                sizes.objects_inanimate,
            )?,
            auxiliaries: take("auxiliaries", &self.auxiliaries, sizes.auxiliaries)?,
            adverbs: take("adverbs", &self.adverbs, sizes.adverbs)?,
            verbs: take("verbs", &self.verbs, sizes.verbs)?,
            function_words: self.function_words.clone(),
        };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<(), GrammarError> {
        let lists: [(&str, Vec<&str>); 6] = [
            (
                "subject_nps",
                self.subject_nps.iter().map(String::as_str).collect(),
            ),
            (
                "object_nps_animate",
                self.object_nps_animate.iter().map(String::as_str).collect(),
            ),
            (
                "object_nps_inanimate",
                self.object_nps_inanimate
                    .iter()
                    .map(String::as_str)
                    .collect(),
            ),
            (
                "auxiliaries",
                self.auxiliaries.iter().map(String::as_str).collect(),
            ),
            ("adverbs", self.adverbs.iter().map(String::as_str).collect()),
            ("verbs", self.verbs.iter().map(|v| v.base()).collect()),
        ];
        for (name, words) in &lists {
            if words.is_empty() {
                return Err(GrammarError::Lexicon(format!("{name} is empty")));
            }
            let mut seen = HashSet::new();
            for w in words {
                if !seen.insert(*w) {
                    return Err(GrammarError::Lexicon(format!(
                        "{name}: duplicate entry {w:?}"
                    )));
                }
            }
        }
        let all = lists
            .iter()
            .flat_map(|(_, w)| w.iter().copied())
            .chain(self.verbs.iter().map(|v| v.past()))
            .chain(self.function_words.all());
        for w in all {
            if !is_single_token(w) {
                return Err(GrammarError::Lexicon(format!(
                    "{w:?} is not a single lowercase token"
                )));
            }
        }
        Ok(())
    }
}

/// Closed word-level vocabulary built from a lexicon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_lexicon(lex: &Lexicon) -> Self {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        let words = lex
            .function_words
            .all()
            .into_iter()
            .chain(lex.subject_nps.iter().map(String::as_str))
            .chain(lex.object_nps_animate.iter().map(String::as_str))
            .chain(lex.object_nps_inanimate.iter().map(String::as_str))
            .chain(lex.auxiliaries.iter().map(String::as_str))
            .chain(lex.adverbs.iter().map(String::as_str))
            .chain(lex.verbs.iter().flat_map(|v| [v.base(), v.past()]));
        for w in words {
            if !vocab.index.contains_key(w) {
                vocab.index.insert(w.to_string(), vocab.words.len() as u32);
                vocab.words.push(w.to_string());
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32, GrammarError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| GrammarError::Vocabulary(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercases, splits on whitespace and detaches `,` `.` `?` from words.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>, GrammarError> {
        let mut ids = Vec::new();
        for piece in text.split_whitespace() {
            let piece = piece.to_lowercase();
            let mut word = piece.as_str();
            let mut trailing = Vec::new();
            while word.len() > 1 && word.ends_with([',', '.', '?']) {
                trailing.push(&word[word.len() - 1..]);
                word = &word[..word.len() - 1];
            }
            ids.push(self.id(word)?);
            for p in trailing.into_iter().rev() {
                ids.push(self.id(p)?);
            }
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, GrammarError> {
        let words = ids
            .iter()
            .map(|&id| {
                self.word(id)
                    .ok_or_else(|| GrammarError::Vocabulary(format!("<id {id}>")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }
}
