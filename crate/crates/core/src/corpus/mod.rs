//! Multi-paragraph prompt/continuation corpora.

mod synth;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::textcodec::{Codec, ParaType};

pub use synth::{synth_corpus, SynthConfig};

/// Line that separates stories in the two-file format.
pub const STORY_DELIMITER: &str = "<|doc|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    #[default]
    English,
    Chinese,
}

/// A prompt and the ordered paragraphs that continue it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub prompt: String,
    pub paragraphs: Vec<String>,
    #[serde(default)]
    pub lang: Lang,
}

impl Document {
    /// Number of words in the paragraphs: whitespace-separated tokens for
    /// English, non-whitespace characters for Chinese. The prompt is not
    /// counted.
    pub fn word_count(&self) -> usize {
        self.paragraphs
            .iter()
            .map(|p| count_words(p, self.lang))
            .sum()
    }

    fn validate(&self) -> Result<()> {
        if self.paragraphs.is_empty() {
            return Err(Error::EmptyDocument(self.id.clone()));
        }
        if let Some(i) = self.paragraphs.iter().position(|p| p.trim().is_empty()) {
            return Err(Error::Invalid(format!(
                "document {} has an empty paragraph at position {i}",
                self.id
            )));
        }
        Ok(())
    }
}

pub fn count_words(text: &str, lang: Lang) -> usize {
    match lang {
        Lang::English => text.split_whitespace().count(),
        Lang::Chinese => text.chars().filter(|c| !c.is_whitespace()).count(),
    }
}

/// The words [`count_words`] counts.
pub fn words(text: &str, lang: Lang) -> Vec<String> {
    match lang {
        Lang::English => text.split_whitespace().map(String::from).collect(),
        Lang::Chinese => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    Jsonl,
    PromptStoryTwofile,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "twofile" | "prompt_story_twofile" => Ok(Self::PromptStoryTwofile),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_samples: usize,
    pub avg_words_per_sample: f64,
    pub avg_paragraphs_per_sample: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.valid_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!(
                "split fractions must lie in [0, 1], got {fracs:?}"
            )));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    #[serde(default)]
    prompt: String,
    paragraphs: Option<Vec<String>>,
    #[serde(default)]
    lang: Lang,
}

/// Loads a corpus. For [`CorpusFormat::PromptStoryTwofile`], `path` is the
/// common prefix `X` of `X.prompts` and `X.stories` (either full file name is
/// also accepted).
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Document>> {
    match format {
        CorpusFormat::Jsonl => load_jsonl(path),
        CorpusFormat::PromptStoryTwofile => load_twofile(path, Lang::English),
    }
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Document>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                index,
                message: e.to_string(),
            })?;
        let paragraphs = raw.paragraphs.ok_or_else(|| Error::MalformedRecord {
            index,
            message: "missing paragraphs field".into(),
        })?;
        let id = raw.id.unwrap_or_else(|| format!("d_{index}"));
        let doc = Document {
            id,
            prompt: raw.prompt.trim_end().to_string(),
            paragraphs: paragraphs
                .iter()
                .map(|p| p.trim_end().to_string())
                .collect(),
            lang: raw.lang,
        };
        doc.validate().map_err(|e| match e {
            Error::EmptyDocument(_) => e,
            other => Error::MalformedRecord {
                index,
                message: other.to_string(),
            },
        })?;
        docs.push(doc);
    }
    check_unique(&docs)?;
    Ok(docs)
}

pub fn load_twofile(path: &Path, lang: Lang) -> Result<Vec<Document>> {
    let prefix = twofile_prefix(path);
    let prompts_path = with_suffix(&prefix, "prompts");
    let stories_path = with_suffix(&prefix, "stories");
    let prompts_text =
        fs::read_to_string(&prompts_path).map_err(|e| Error::io(&prompts_path, e))?;
    let stories_text =
        fs::read_to_string(&stories_path).map_err(|e| Error::io(&stories_path, e))?;

    let prompts: Vec<&str> = prompts_text.lines().map(str::trim_end).collect();
    let stories = split_stories(&stories_text);
    if prompts.len() != stories.len() {
        return Err(Error::Invalid(format!(
            "{} prompts but {} stories",
            prompts.len(),
            stories.len()
        )));
    }
    let stem = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "doc".into());

    let docs = prompts
        .into_iter()
        .zip(stories)
        .enumerate()
        .map(|(index, (prompt, story))| {
            let paragraphs = split_paragraphs(&story);
            if paragraphs.is_empty() {
                return Err(Error::MalformedRecord {
                    index,
                    message: format!("empty story {stem}-{index}"),
                });
            }
            Ok(Document {
                id: format!("{stem}-{index}"),
                prompt: prompt.to_string(),
                paragraphs,
                lang,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_unique(&docs)?;
    Ok(docs)
}

fn twofile_prefix(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("prompts") | Some("stories") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn split_stories(text: &str) -> Vec<String> {
    let mut stories = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line == STORY_DELIMITER {
            stories.push(std::mem::take(&mut current));
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.trim().is_empty() {
        stories.push(current);
    }
    stories
}

/// Splits on blank lines; single line breaks stay inside the paragraph.
pub fn split_paragraphs(story: &str) -> Vec<String> {
    let mut paragraphs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in story.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                paragraphs.push(current.join("\n").trim_end().to_string());
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        paragraphs.push(current.join("\n").trim_end().to_string());
    }
    paragraphs
}

fn check_unique(docs: &[Document]) -> Result<()> {
    let mut seen = HashSet::with_capacity(docs.len());
    for doc in docs {
        if !seen.insert(doc.id.as_str()) {
            return Err(Error::DuplicateId(doc.id.clone()));
        }
    }
    Ok(())
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Keeps the documents whose full model input (prompt segment, serialized
/// paragraphs and EOS) is at most `max_tokens` long.
pub fn filter_by_length(
    docs: &[Document],
    codec: &Codec,
    paratype: ParaType,
    max_tokens: usize,
) -> Result<Vec<Document>> {
    if max_tokens == 0 {
        return Err(Error::Config("max_tokens must be at least 1".into()));
    }
    let mut kept = Vec::with_capacity(docs.len());
    for doc in docs {
        if codec.model_input_len(doc, paratype, true)? <= max_tokens {
            kept.push(doc.clone());
        }
    }
    Ok(kept)
}

pub fn compute_stats(docs: &[Document]) -> Result<CorpusStats> {
    if docs.is_empty() {
        return Err(Error::Invalid("cannot summarize an empty corpus".into()));
    }
    let n = docs.len() as f64;
    let words: usize = docs.iter().map(Document::word_count).sum();
    let paragraphs: usize = docs.iter().map(|d| d.paragraphs.len()).sum();
    Ok(CorpusStats {
        num_samples: docs.len(),
        avg_words_per_sample: words as f64 / n,
        avg_paragraphs_per_sample: paragraphs as f64 / n,
    })
}

/// Seeded partition into (train, valid, test). Valid and test get
/// `floor(frac * N)` documents, train gets the rest; each part keeps the
/// input order.
pub fn split_corpus(
    docs: &[Document],
    spec: &SplitSpec,
) -> Result<(Vec<Document>, Vec<Document>, Vec<Document>)> {
    spec.validate()?;
    let n = docs.len();
    let n_valid = (spec.valid_frac * n as f64).floor() as usize;
    let n_test = (spec.test_frac * n as f64).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(spec.seed).shuffle(&mut order);
    // 0 = train, 1 = valid, 2 = test
    let mut part = vec![0u8; n];
    for &i in &order[..n_valid] {
        part[i] = 1;
    }
    for &i in &order[n_valid..n_valid + n_test] {
        part[i] = 2;
    }
    let pick = |p: u8| -> Vec<Document> {
        docs.iter()
            .zip(&part)
            .filter(|(_, q)| **q == p)
            .map(|(d, _)| d.clone())
            .collect()
    };
    Ok((pick(0), pick(1), pick(2)))
}

#[cfg(test)]
mod tests {
    use super::*;


    fn doc(id: &str, paragraphs: &[&str]) -> Document {
        Document {
            id: id.into(),
            prompt: String::new(),
            paragraphs: paragraphs.iter().map(|s| s.to_string()).collect(),
            lang: Lang::English,
        }
    }

    fn write_tmp(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn jsonl_record_maps_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(
            dir.path(),
            "c.jsonl",
            "{\"id\":\"d1\",\"prompt\":\"p\",\"paragraphs\":[\"a\",\"b\"]}\n",
        );
        let docs = load_corpus(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].id, "d1");
        assert_eq!(docs[0].prompt, "p");
        assert_eq!(docs[0].paragraphs, vec!["a", "b"]);
        assert_eq!(docs[0].lang, Lang::English);
    }

    #[test]
    fn empty_paragraph_list_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(
            dir.path(),
            "c.jsonl",
            "{\"id\":\"d_k\",\"prompt\":\"p\",\"paragraphs\":[]}\n",
        );
        let err = load_corpus(&path, CorpusFormat::Jsonl).unwrap_err();
        assert_eq!(err.to_string(), "empty document d_k");
    }

    #[test]
    fn missing_paragraphs_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(
            dir.path(),
            "c.jsonl",
            "{\"id\":\"a\",\"paragraphs\":[\"x\"]}\n{\"id\":\"b\",\"prompt\":\"p\"}\n",
        );
        let err = load_corpus(&path, CorpusFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { index: 1, .. }), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(
            dir.path(),
            "c.jsonl",
            "{\"id\":\"a\",\"paragraphs\":[\"x\"]}\n{\"id\":\"a\",\"paragraphs\":[\"y\"]}\n",
        );
        assert!(matches!(
            load_corpus(&path, CorpusFormat::Jsonl),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = load_corpus(Path::new("/nonexistent/c.jsonl"), CorpusFormat::Jsonl);
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn twofile_blank_line_split() {
        let dir = tempfile::tempdir().unwrap();
        write_tmp(dir.path(), "wp.prompts", "first prompt\nsecond prompt\n");
        write_tmp(
            dir.path(),
            "wp.stories",
            "x\n\ny\n<|doc|>\none line\nsame para  \n\n\n\nnext\n",
        );
        let docs = load_corpus(&dir.path().join("wp"), CorpusFormat::PromptStoryTwofile).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].paragraphs, vec!["x", "y"]);
        assert_eq!(docs[0].prompt, "first prompt");
        assert_eq!(docs[1].paragraphs, vec!["one line\nsame para", "next"]);
        assert_eq!(docs[1].id, "wp-1");
    }

    #[test]
    fn twofile_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_tmp(dir.path(), "wp.prompts", "a\nb\n");
        write_tmp(dir.path(), "wp.stories", "x\n");
        assert!(load_corpus(&dir.path().join("wp.stories"), CorpusFormat::PromptStoryTwofile).is_err());
    }

    #[test]
    fn stats_hand_counts() {
        let docs = vec![doc("a", &["one two"]), doc("b", &["one two", "three four"])];
        let stats = compute_stats(&docs).unwrap();
        assert_eq!(stats.num_samples, 2);
        assert_eq!(stats.avg_words_per_sample, 3.0);
        assert_eq!(stats.avg_paragraphs_per_sample, 1.5);

        let one = compute_stats(&[doc("c", &["a", "b", "c"])]).unwrap();
        assert_eq!(one.avg_paragraphs_per_sample, 3.0);
    }

    #[test]
    fn chinese_words_are_characters() {
        let mut d = doc("z", &["我 爱 你", "好"]);
        d.lang = Lang::Chinese;
        assert_eq!(d.word_count(), 4);
    }

    #[test]
    fn stats_of_nothing_is_error() {
        assert!(compute_stats(&[]).is_err());
    }

    #[test]
    fn split_sizes_and_repeatability() {
        let docs: Vec<_> = (0..10).map(|i| doc(&format!("d{i}"), &["x"])).collect();
        let spec = SplitSpec {
            train_frac: 0.8,
            valid_frac: 0.1,
            test_frac: 0.1,
            seed: 7,
        };
        let (tr, va, te) = split_corpus(&docs, &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let again = split_corpus(&docs, &spec).unwrap();
        assert_eq!((tr.clone(), va.clone(), te.clone()), again);

        let all_train = SplitSpec {
            train_frac: 1.0,
            valid_frac: 0.0,
            test_frac: 0.0,
            seed: 7,
        };
        let (tr, va, te) = split_corpus(&docs, &all_train).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (10, 0, 0));
    }

    #[test]
    fn split_seed_changes_membership() {
        let docs: Vec<_> = (0..50).map(|i| doc(&format!("d{i}"), &["x"])).collect();
        let spec = |seed| SplitSpec {
            train_frac: 0.6,
            valid_frac: 0.2,
            test_frac: 0.2,
            seed,
        };
        let (_, a, _) = split_corpus(&docs, &spec(1)).unwrap();
        let (_, b, _) = split_corpus(&docs, &spec(2)).unwrap();
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b);
    }

    #[test]
    fn invalid_split_spec() {
        let spec = SplitSpec {
            train_frac: 0.5,
            valid_frac: 0.2,
            test_frac: 0.2,
            seed: 0,
        };
        assert!(spec.validate().is_err());
        let neg = SplitSpec {
            train_frac: 1.2,
            valid_frac: -0.2,
            test_frac: 0.0,
            seed: 0,
        };
        assert!(neg.validate().is_err());
    }
}
