use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved tokens. `Nl` is the literal line break and doubles as ordinary
/// content; the others never occur in encoded text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Special {
    Eos,
    Eop,
    Sep,
    Nl,
    Pad,
    Unk,
}

impl Special {
    pub const ALL: [Special; 6] = [
        Special::Pad,
        Special::Unk,
        Special::Eos,
        Special::Nl,
        Special::Eop,
        Special::Sep,
    ];

    /// Token string stored in the vocabulary.
    pub fn token(self) -> &'static str {
        match self {
            Special::Eos => "<|eos|>",
            Special::Eop => "<|eop|>",
            Special::Sep => "<|sep|>",
            Special::Nl => "\n",
            Special::Pad => "<|pad|>",
            Special::Unk => "<|unk|>",
        }
    }

    /// How `decode` renders the token.
    pub fn sentinel(self) -> &'static str {
        match self {
            Special::Eos => "⟨eos⟩",
            Special::Eop => "⟨eop⟩",
            Special::Sep => "⟨sep⟩",
            Special::Nl => "\n",
            Special::Pad => "⟨pad⟩",
            Special::Unk => "⟨unk⟩",
        }
    }
}

/// Token inventory. Token strings are unique; specials are addressed through
/// `special_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    specials: BTreeMap<Special, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    special_ids: BTreeMap<Special, u32>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(repr: VocabRepr) -> Result<Self> {
        Vocab::from_parts(repr.tokens, repr.special_ids)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            special_ids: v.specials,
        }
    }
}

impl Vocab {
    /// A vocabulary holding the mandatory specials (PAD, UNK, EOS, NL) plus
    /// any extra reserved ones, in [`Special::ALL`] order.
    pub fn with_specials(extra: &[Special]) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
            specials: BTreeMap::new(),
        };
        for s in Special::ALL {
            let mandatory = matches!(s, Special::Pad | Special::Unk | Special::Eos | Special::Nl);
            if mandatory || extra.contains(&s) {
                let id = v.push(s.token()).expect("fresh vocabulary");
                v.specials.insert(s, id);
            }
        }
        v
    }

    pub fn from_parts(tokens: Vec<String>, specials: BTreeMap<Special, u32>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        for s in [Special::Pad, Special::Unk, Special::Eos, Special::Nl] {
            if !specials.contains_key(&s) {
                return Err(Error::Vocab(format!("missing mandatory special {s:?}")));
            }
        }
        for (s, id) in &specials {
            match tokens.get(*id as usize) {
                Some(t) if t == s.token() => {}
                _ => {
                    return Err(Error::Vocab(format!(
                        "special {s:?} does not point at {:?}",
                        s.token()
                    )))
                }
            }
        }
        Ok(Vocab {
            tokens,
            index,
            specials,
        })
    }

    /// Appends a token, failing if its string already exists.
    pub(crate) fn push(&mut self, token: &str) -> Result<u32> {
        if self.index.contains_key(token) {
            return Err(Error::Vocab(format!("token {token:?} already present")));
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        Ok(id)
    }

    /// Adds a special that is not yet present and returns its id.
    pub fn add_special(&mut self, special: Special) -> Result<u32> {
        if let Some(id) = self.special(special) {
            return Err(Error::Vocab(format!(
                "special {special:?} already present as id {id}"
            )));
        }
        let id = self.push(special.token())?;
        self.specials.insert(special, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn special(&self, s: Special) -> Option<u32> {
        self.specials.get(&s).copied()
    }

    pub fn special_ids(&self) -> &BTreeMap<Special, u32> {
        &self.specials
    }

    pub fn eos(&self) -> u32 {
        self.specials[&Special::Eos]
    }

    pub fn nl(&self) -> u32 {
        self.specials[&Special::Nl]
    }

    pub fn unk(&self) -> u32 {
        self.specials[&Special::Unk]
    }

    /// Which special, if any, the id denotes.
    pub fn special_of(&self, id: u32) -> Option<Special> {
        self.specials
            .iter()
            .find_map(|(s, i)| (*i == id).then_some(*s))
    }

    /// EOS, EOP, SEP and PAD: tokens that never carry content.
    pub fn is_control(&self, id: u32) -> bool {
        matches!(
            self.special_of(id),
            Some(Special::Eos | Special::Eop | Special::Sep | Special::Pad)
        )
    }

    /// True for strings reserved by a special other than NL.
    pub fn is_reserved_string(token: &str) -> bool {
        Special::ALL
            .iter()
            .any(|s| *s != Special::Nl && s.token() == token)
    }
}
