//! Character and BPE codecs, and the five paragraph-marker serializations.

mod bpe;
mod vocab;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

pub use vocab::{Special, Vocab};

/// How paragraphs are joined into one token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParaType {
    /// Paragraphs concatenated with nothing in between.
    #[serde(rename = "none")]
    None,
    /// Line break between consecutive paragraphs.
    #[serde(rename = "sep-nl")]
    SepNl,
    /// Dedicated SEP token between consecutive paragraphs.
    #[serde(rename = "sep-diy")]
    SepDiy,
    /// Line break after every paragraph, including the last.
    #[serde(rename = "eop-nl")]
    EopNl,
    /// Dedicated EOP token after every paragraph, including the last.
    #[serde(rename = "eop-diy")]
    EopDiy,
}

impl ParaType {
    pub const ALL: [ParaType; 5] = [
        ParaType::None,
        ParaType::SepNl,
        ParaType::SepDiy,
        ParaType::EopNl,
        ParaType::EopDiy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParaType::None => "none",
            ParaType::SepNl => "sep-nl",
            ParaType::SepDiy => "sep-diy",
            ParaType::EopNl => "eop-nl",
            ParaType::EopDiy => "eop-diy",
        }
    }

    /// The special that marks paragraph boundaries, if any.
    pub fn marker(self) -> Option<Special> {
        match self {
            ParaType::None => None,
            ParaType::SepNl | ParaType::EopNl => Some(Special::Nl),
            ParaType::SepDiy => Some(Special::Sep),
            ParaType::EopDiy => Some(Special::Eop),
        }
    }

    /// A DIY special the vocabulary must carry for this scheme.
    pub fn required_special(self) -> Option<Special> {
        match self {
            ParaType::SepDiy => Some(Special::Sep),
            ParaType::EopDiy => Some(Special::Eop),
            _ => None,
        }
    }

    /// Whether the final paragraph is followed by a marker too.
    pub fn marks_last(self) -> bool {
        matches!(self, ParaType::EopNl | ParaType::EopDiy)
    }

    /// Number of marker tokens for a document of `n` paragraphs.
    pub fn marker_count(self, n: usize) -> usize {
        match self {
            ParaType::None => 0,
            ParaType::SepNl | ParaType::SepDiy => n.saturating_sub(1),
            ParaType::EopNl | ParaType::EopDiy => n,
        }
    }
}

impl fmt::Display for ParaType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParaType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParaType::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown paratype {s:?} (expected none|sep-nl|sep-diy|eop-nl|eop-diy)"
                ))
            })
    }
}

/// Token ids plus, for each paragraph, the index of its last emitted token.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub boundary_marks: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Recovers paragraph boundaries from a generated stream: under a marker
    /// scheme every marker closes a paragraph (line breaks cannot be told
    /// apart from content breaks, so all of them count). Text after the last
    /// marker forms a final paragraph. EOS and anything after it is dropped.
    pub fn from_generated(ids: &[u32], vocab: &Vocab, paratype: ParaType) -> TokenSeq {
        let eos = vocab.eos();
        let ids: Vec<u32> = ids.iter().copied().take_while(|&t| t != eos).collect();
        let marker = paratype.marker().and_then(|m| vocab.special(m));
        let mut marks = Vec::new();
        let mut open = false;
        for (i, &t) in ids.iter().enumerate() {
            if Some(t) == marker {
                marks.push(i);
                open = false;
            } else {
                open = true;
            }
        }
        if open {
            marks.push(ids.len() - 1);
        }
        TokenSeq {
            ids,
            boundary_marks: marks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Char,
    Bpe,
}

impl FromStr for CodecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(CodecMode::Char),
            "bpe" => Ok(CodecMode::Bpe),
            other => Err(Error::Config(format!("unknown codec mode {other:?}"))),
        }
    }
}

/// A trained tokenizer. Immutable once built; adding DIY specials produces a
/// new codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodecFile", into = "CodecFile")]
pub struct Codec {
    mode: CodecMode,
    vocab: Vocab,
    merges: Vec<(u32, u32)>,
    merge_table: bpe::MergeTable,
}

/// On-disk layout: `{mode, tokens, merges: [[left, right]], special_ids}`
/// with merges given as token strings.
#[derive(Serialize, Deserialize)]
struct CodecFile {
    mode: CodecMode,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    special_ids: BTreeMap<Special, u32>,
}

impl TryFrom<CodecFile> for Codec {
    type Error = Error;

    fn try_from(f: CodecFile) -> Result<Self> {
        let vocab = Vocab::from_parts(f.tokens, f.special_ids)?;
        let merges = f
            .merges
            .iter()
            .map(|(l, r)| match (vocab.id(l), vocab.id(r)) {
                (Some(a), Some(b)) => Ok((a, b)),
                _ => Err(Error::Vocab(format!("merge ({l:?}, {r:?}) uses unknown tokens"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Codec::assemble(f.mode, vocab, merges)
    }
}

impl From<Codec> for CodecFile {
    fn from(c: Codec) -> Self {
        let name = |id: u32| c.vocab.token(id).unwrap().to_string();
        CodecFile {
            mode: c.mode,
            merges: c.merges.iter().map(|&(a, b)| (name(a), name(b))).collect(),
            tokens: c.vocab.tokens().to_vec(),
            special_ids: c.vocab.special_ids().clone(),
        }
    }
}

impl Codec {
    /// Trains a codec. Character mode keeps every character seen; BPE mode
    /// starts from the characters and merges pairs until `vocab_size` tokens
    /// exist. EOS, NL, PAD and UNK are always reserved; `reserved` adds EOP
    /// and/or SEP up front. Line breaks are never merged.
    pub fn train(
        docs: &[Document],
        mode: CodecMode,
        vocab_size: usize,
        reserved: &[Special],
    ) -> Result<Codec> {
        if docs.is_empty() {
            return Err(Error::Invalid("cannot train a codec on an empty corpus".into()));
        }
        let mut vocab = Vocab::with_specials(reserved);
        let alphabet: BTreeSet<char> = docs
            .iter()
            .flat_map(|d| std::iter::once(&d.prompt).chain(&d.paragraphs))
            .flat_map(|s| s.chars())
            .filter(|&c| c != '\n')
            .collect();
        let needed = vocab.len() + alphabet.len();
        match mode {
            CodecMode::Char if vocab_size != 0 && vocab_size < needed => {
                return Err(Error::Vocab(format!(
                    "vocab_size {vocab_size} below the {needed} characters and specials seen"
                )))
            }
            CodecMode::Bpe if vocab_size <= needed => {
                return Err(Error::Vocab(format!(
                    "vocab_size {vocab_size} leaves no room for merges ({needed} base tokens)"
                )))
            }
            _ => {}
        }
        for c in &alphabet {
            vocab.push(c.encode_utf8(&mut [0; 4]))?;
        }

        let merges = match mode {
            CodecMode::Char => Vec::new(),
            CodecMode::Bpe => {
                let mut counts: HashMap<&str, usize> = HashMap::new();
                for d in docs {
                    for text in std::iter::once(&d.prompt).chain(&d.paragraphs) {
                        for seg in text.split('\n').filter(|s| !s.is_empty()) {
                            *counts.entry(seg).or_default() += 1;
                        }
                    }
                }
                let mut segments: Vec<(Vec<u32>, usize)> = counts
                    .into_iter()
                    .map(|(seg, n)| {
                        let ids = seg
                            .chars()
                            .map(|c| vocab.id(c.encode_utf8(&mut [0; 4])).unwrap())
                            .collect();
                        (ids, n)
                    })
                    .collect();
                // learn_merges is order independent, but keep input stable anyway
                segments.sort();
                bpe::learn_merges(&mut vocab, segments, vocab_size)
            }
        };
        Codec::assemble(mode, vocab, merges)
    }

    fn assemble(mode: CodecMode, vocab: Vocab, merges: Vec<(u32, u32)>) -> Result<Codec> {
        let mut merge_table = bpe::MergeTable::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let merged = format!("{}{}", vocab.token(a).unwrap(), vocab.token(b).unwrap());
            let id = vocab
                .id(&merged)
                .ok_or_else(|| Error::Vocab(format!("merge result {merged:?} not in vocabulary")))?;
            merge_table.entry((a, b)).or_insert((rank, id));
        }
        Ok(Codec {
            mode,
            vocab,
            merges,
            merge_table,
        })
    }

    pub fn load(path: &Path) -> Result<Codec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn mode(&self) -> CodecMode {
        self.mode
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// A copy of this codec whose vocabulary also carries the given
    /// specials; ones already present are left alone. New tokens are
    /// appended, so existing ids are stable.
    pub fn with_specials(&self, specials: &[Special]) -> Codec {
        let mut out = self.clone();
        for &s in specials {
            if out.vocab.special(s).is_none() {
                out.vocab.add_special(s).expect("absent special");
            }
        }
        out
    }

    /// Codec able to serialize under `paratype`.
    pub fn for_paratype(&self, paratype: ParaType) -> Codec {
        match paratype.required_special() {
            Some(s) => self.with_specials(&[s]),
            None => self.clone(),
        }
    }

    /// Encodes text. Line breaks become NL; characters outside the alphabet
    /// become UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let unk = self.vocab.unk();
        let nl = self.vocab.nl();
        let mut out = Vec::with_capacity(text.len());
        for (i, seg) in text.split('\n').enumerate() {
            if i > 0 {
                out.push(nl);
            }
            let base: Vec<u32> = seg
                .chars()
                .map(|c| self.vocab.id(c.encode_utf8(&mut [0; 4])).unwrap_or(unk))
                .collect();
            match self.mode {
                CodecMode::Char => out.extend(base),
                CodecMode::Bpe => out.extend(bpe::apply_merges(base, &self.merge_table)),
            }
        }
        out
    }

    /// Renders ids as text, with specials shown as sentinels.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let token = self.vocab.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.vocab.len(),
            })?;
            match self.vocab.special_of(id) {
                Some(s) => out.push_str(s.sentinel()),
                None => out.push_str(token),
            }
        }
        Ok(out)
    }

    /// Lays out a document's paragraphs under `paratype`, optionally closing
    /// with EOS.
    pub fn serialize_document(
        &self,
        doc: &Document,
        paratype: ParaType,
        append_eos: bool,
    ) -> Result<TokenSeq> {
        let marker = match paratype.marker() {
            Some(m) => Some(self.vocab.special(m).ok_or_else(|| {
                Error::Vocab(format!(
                    "paratype {paratype} needs {m:?}, which the vocabulary lacks"
                ))
            })?),
            None => None,
        };
        let n = doc.paragraphs.len();
        let mut seq = TokenSeq::default();
        for (i, p) in doc.paragraphs.iter().enumerate() {
            seq.ids.extend(self.encode(p));
            if let Some(m) = marker {
                if i + 1 < n || paratype.marks_last() {
                    seq.ids.push(m);
                }
            }
            if seq.ids.is_empty() {
                return Err(Error::Invalid(format!("document {} starts with an empty paragraph", doc.id)));
            }
            seq.boundary_marks.push(seq.ids.len() - 1);
        }
        if append_eos {
            seq.ids.push(self.vocab.eos());
        }
        Ok(seq)
    }

    /// The conditioning segment: the encoded prompt followed by NL. Always
    /// at least one token, so the first body token is always predicted.
    pub fn prompt_segment(&self, prompt: &str) -> Vec<u32> {
        let mut ids = if prompt.is_empty() {
            Vec::new()
        } else {
            self.encode(prompt)
        };
        ids.push(self.vocab.nl());
        ids
    }

    /// Prompt segment followed by the serialized body.
    pub fn model_input(
        &self,
        doc: &Document,
        paratype: ParaType,
        append_eos: bool,
    ) -> Result<ModelInput> {
        let prompt = self.prompt_segment(&doc.prompt);
        let body = self.serialize_document(doc, paratype, append_eos)?;
        Ok(ModelInput { prompt, body })
    }

    pub fn model_input_len(&self, doc: &Document, paratype: ParaType, append_eos: bool) -> Result<usize> {
        let input = self.model_input(doc, paratype, append_eos)?;
        Ok(input.len())
    }

    /// Content tokens only: see [`strip_special`].
    pub fn strip_special(&self, seq: &TokenSeq) -> TokenSeq {
        strip_special(seq, &self.vocab)
    }
}

/// A prompt segment and serialized body as fed to the language model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub prompt: Vec<u32>,
    pub body: TokenSeq,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.prompt.len() + self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenated ids.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids = self.prompt.clone();
        ids.extend(&self.body.ids);
        ids
    }

    /// Boundary marks shifted into full-sequence coordinates.
    pub fn absolute_marks(&self) -> Vec<usize> {
        self.body
            .boundary_marks
            .iter()
            .map(|m| m + self.prompt.len())
            .collect()
    }
}

/// Drops EOS, EOP, SEP and PAD everywhere, and line breaks sitting at a
/// boundary mark (the ones emitted as paragraph markers). Line breaks inside
/// paragraph text survive. Boundary marks are remapped to the last kept
/// token of each paragraph.
pub fn strip_special(seq: &TokenSeq, vocab: &Vocab) -> TokenSeq {
    let nl = vocab.nl();
    let marks: BTreeSet<usize> = seq.boundary_marks.iter().copied().collect();
    let mut ids = Vec::with_capacity(seq.ids.len());
    let mut kept_upto = Vec::with_capacity(seq.ids.len());
    for (i, &t) in seq.ids.iter().enumerate() {
        let drop = vocab.is_control(t) || (t == nl && marks.contains(&i));
        if !drop {
            ids.push(t);
        }
        kept_upto.push(ids.len());
    }
    let mut boundary_marks: Vec<usize> = seq
        .boundary_marks
        .iter()
        .filter_map(|&m| kept_upto.get(m).and_then(|&k| k.checked_sub(1)))
        .collect();
    boundary_marks.dedup();
    TokenSeq {
        ids,
        boundary_marks,
    }
}
