//! Triplets, templates and aliases across languages.
//!
//! On-disk layout (every file is JSON-lines):
//!
//! ```text
//! corpus/
//!   triplets.jsonl          {"id": "r0:s3", "subject_id": "s3", "relation_id": "r0", "object_id": "o0.2"}
//!   templates/<lang>.jsonl  {"id": "xa:r0:0", "relation_id": "r0", "pattern": "[X] lives in [Y]"}
//!   aliases/<lang>.jsonl    {"entity_id": "o0.2", "aliases": ["Paris", "City of Light"]}
//!   languages.jsonl         optional pseudo-language descriptions
//! ```
//!
//! Every language with templates needs an alias file. A triplet is available
//! in a language when both its subject and object have aliases there; the
//! first alias is the canonical surface.

mod encode;
mod fetch;
mod filter;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use encode::{answer_ids, build_vocab, encode_query, training_items, EncodedQuery};
pub use fetch::{fetch_aliases, merge_aliases, parse_entities, AliasTable, FetchOptions, FetchReport, DEFAULT_ENDPOINT};
pub use filter::{alias_in_query, filter_trivial, normalize_alias};
pub use synth::{gen_synthetic, SynthSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub subject_id: String,
    pub relation_id: String,
    pub object_id: String,
    /// Canonical subject surface per language; filled by the alias join.
    #[serde(skip)]
    pub subject: BTreeMap<String, String>,
    /// Object alias set per language, canonical first; filled by the alias join.
    #[serde(skip)]
    pub objects: BTreeMap<String, Vec<String>>,
}

impl Triplet {
    pub fn new(id: &str, subject_id: &str, relation_id: &str, object_id: &str) -> Self {
        Self {
            id: id.into(),
            subject_id: subject_id.into(),
            relation_id: relation_id.into(),
            object_id: object_id.into(),
            subject: BTreeMap::new(),
            objects: BTreeMap::new(),
        }
    }

    pub fn available_in(&self, lang: &str) -> bool {
        self.subject.contains_key(lang) && self.objects.contains_key(lang)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub relation_id: String,
    #[serde(skip)]
    pub language: String,
    pub pattern: String,
}

impl Template {
    pub fn new(id: &str, relation_id: &str, language: &str, pattern: &str) -> Result<Self> {
        let t = Self { id: id.into(), relation_id: relation_id.into(), language: language.into(), pattern: pattern.into() };
        t.check().map_err(Error::Generation)?;
        Ok(t)
    }

    fn check(&self) -> std::result::Result<(), String> {
        for ph in ["[X]", "[Y]"] {
            let n = self.pattern.matches(ph).count();
            if n != 1 {
                return Err(format!("pattern {:?} has {n} {ph} placeholders", self.pattern));
            }
        }
        Ok(())
    }

    /// True iff only whitespace or punctuation follows `[Y]`.
    pub fn object_final(&self) -> bool {
        let (_, after) = self.pattern.split_once("[Y]").expect("validated pattern");
        after.chars().all(|c| c.is_whitespace() || c.is_ascii_punctuation())
    }

    /// Text before and after the object slot with the subject filled in.
    pub fn render(&self, subject: &str) -> (String, String) {
        let filled = self.pattern.replace("[X]", subject);
        let (before, after) = filled.split_once("[Y]").expect("validated pattern");
        (before.trim().to_string(), after.trim().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum WordOrder {
    Svo,
    Sov,
    Vso,
}

/// Desk-scale stand-in for a natural language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLanguage {
    pub tag: String,
    pub word_order: WordOrder,
    /// Token prepended to every input in this language.
    pub marker: String,
    /// Word the model must emit before the object for `article_relations`.
    #[serde(default)]
    pub article: Option<String>,
    #[serde(default)]
    pub article_relations: Vec<String>,
    /// Concept to surface; a bijection.
    #[serde(default)]
    pub lexicon: BTreeMap<String, String>,
}

impl PseudoLanguage {
    pub fn new(tag: &str, word_order: WordOrder) -> Self {
        Self {
            tag: tag.into(),
            word_order,
            marker: format!("#{tag}"),
            article: None,
            article_relations: Vec::new(),
            lexicon: BTreeMap::new(),
        }
    }

    pub fn with_article(mut self, article: &str) -> Self {
        self.article = Some(article.into());
        self
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        let mut seen = BTreeSet::new();
        for (concept, surface) in &self.lexicon {
            if !seen.insert(surface) {
                return Err(format!("lexicon of {} maps {concept} to reused surface {surface:?}", self.tag));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageCounts {
    pub language: String,
    pub triplets: usize,
    pub templates: usize,
}

/// One rendered (triplet, template) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query<'a> {
    pub triplet: &'a Triplet,
    pub template: &'a Template,
    pub subject: &'a str,
    pub aliases: &'a [String],
    pub before: String,
    pub after: String,
}

impl Query<'_> {
    /// The query with the object slot left empty.
    pub fn text_without_object(&self) -> String {
        format!("{} {}", self.before, self.after).trim().to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub triplets: Vec<Triplet>,
    pub templates: Vec<Template>,
    /// language -> entity id -> aliases, canonical first.
    pub aliases: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub languages: Vec<PseudoLanguage>,
    /// (triplet id, template id) pairs removed by [`filter_trivial`].
    pub blocked: BTreeSet<(String, String)>,
}

#[derive(Deserialize)]
struct AliasRow {
    entity_id: String,
    aliases: Vec<String>,
}

#[derive(Serialize)]
struct AliasRowOut<'a> {
    entity_id: &'a str,
    aliases: &'a [String],
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::Corpus { file: path.into(), line: 0, message: e.to_string() })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::Corpus { file: path.into(), line: i + 1, message: e.to_string() })?;
        out.push(row);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, &r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn jsonl_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "jsonl") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), p.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

impl Corpus {
    /// Reads a corpus directory. An empty directory gives an empty corpus.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Corpus { file: dir.into(), line: 0, message: "not a directory".into() });
        }
        let mut c = Corpus::default();
        let lang_file = dir.join("languages.jsonl");
        if lang_file.exists() {
            c.languages = read_jsonl(&lang_file)?;
            for (i, l) in c.languages.iter().enumerate() {
                l.check().map_err(|m| Error::Corpus { file: lang_file.clone(), line: i + 1, message: m })?;
            }
        }
        for (lang, path) in jsonl_stems(&dir.join("templates"))? {
            let rows: Vec<Template> = read_jsonl(&path)?;
            for (i, mut t) in rows.into_iter().enumerate() {
                t.language = lang.clone();
                t.check().map_err(|m| Error::Corpus { file: path.clone(), line: i + 1, message: m })?;
                c.templates.push(t);
            }
        }
        for (lang, path) in jsonl_stems(&dir.join("aliases"))? {
            let rows: Vec<AliasRow> = read_jsonl(&path)?;
            let table = c.aliases.entry(lang).or_default();
            for (i, r) in rows.into_iter().enumerate() {
                if r.aliases.is_empty() || r.aliases.iter().any(|a| a.trim().is_empty()) {
                    return Err(Error::Corpus {
                        file: path.clone(),
                        line: i + 1,
                        message: format!("empty alias for {}", r.entity_id),
                    });
                }
                table.insert(r.entity_id, r.aliases);
            }
        }
        for t in &c.templates {
            if !c.aliases.contains_key(&t.language) {
                let file = dir.join("aliases").join(format!("{}.jsonl", t.language));
                return Err(Error::Corpus { file, line: 0, message: "missing alias file".into() });
            }
        }
        let trip_file = dir.join("triplets.jsonl");
        if trip_file.exists() {
            c.triplets = read_jsonl(&trip_file)?;
            let mut ids = BTreeSet::new();
            for (i, t) in c.triplets.iter().enumerate() {
                if !ids.insert(t.id.clone()) {
                    return Err(Error::Corpus {
                        file: trip_file.clone(),
                        line: i + 1,
                        message: format!("duplicate triplet id {}", t.id),
                    });
                }
            }
        }
        c.join();
        Ok(c)
    }

    /// Fills each triplet's per-language surfaces from the alias tables.
    pub fn join(&mut self) {
        for t in &mut self.triplets {
            t.subject.clear();
            t.objects.clear();
            for (lang, table) in &self.aliases {
                if let (Some(s), Some(o)) = (table.get(&t.subject_id), table.get(&t.object_id)) {
                    t.subject.insert(lang.clone(), s[0].clone());
                    t.objects.insert(lang.clone(), o.clone());
                }
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("triplets.jsonl"), &self.triplets)?;
        let mut by_lang: BTreeMap<&str, Vec<&Template>> = BTreeMap::new();
        for t in &self.templates {
            by_lang.entry(&t.language).or_default().push(t);
        }
        for (lang, ts) in by_lang {
            write_jsonl(&dir.join("templates").join(format!("{lang}.jsonl")), ts)?;
        }
        for (lang, table) in &self.aliases {
            let rows = table.iter().map(|(id, a)| AliasRowOut { entity_id: id, aliases: a });
            write_jsonl(&dir.join("aliases").join(format!("{lang}.jsonl")), rows)?;
        }
        if !self.languages.is_empty() {
            write_jsonl(&dir.join("languages.jsonl"), &self.languages)?;
        }
        Ok(())
    }

    /// Languages with templates, sorted.
    pub fn language_tags(&self) -> Vec<String> {
        self.templates.iter().map(|t| t.language.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn language(&self, tag: &str) -> Option<&PseudoLanguage> {
        self.languages.iter().find(|l| l.tag == tag)
    }

    pub fn marker(&self, tag: &str) -> Option<&str> {
        self.language(tag).map(|l| l.marker.as_str())
    }

    /// Article expected before the object for this relation, if any.
    pub fn article(&self, tag: &str, relation_id: &str) -> Option<&str> {
        let l = self.language(tag)?;
        if l.article_relations.iter().any(|r| r == relation_id) {
            l.article.as_deref()
        } else {
            None
        }
    }

    pub fn templates_for<'a>(&'a self, relation_id: &'a str, lang: &'a str) -> impl Iterator<Item = &'a Template> + 'a {
        self.templates.iter().filter(move |t| t.relation_id == relation_id && t.language == lang)
    }

    pub fn triplet(&self, id: &str) -> Option<&Triplet> {
        self.triplets.iter().find(|t| t.id == id)
    }

    /// Every unblocked (triplet, template) pair in `lang`, in file order.
    pub fn queries<'a>(&'a self, lang: &'a str) -> impl Iterator<Item = Query<'a>> + 'a {
        self.triplets.iter().filter(move |t| t.available_in(lang)).flat_map(move |t| {
            self.templates_for(&t.relation_id, lang)
                .filter(move |tpl| !self.blocked.contains(&(t.id.clone(), tpl.id.clone())))
                .map(move |tpl| {
                    let subject = t.subject[lang].as_str();
                    let (before, after) = tpl.render(subject);
                    Query { triplet: t, template: tpl, subject, aliases: &t.objects[lang], before, after }
                })
        })
    }

    pub fn counts(&self) -> Vec<LanguageCounts> {
        let mut tags: BTreeSet<String> = self.language_tags().into_iter().collect();
        tags.extend(self.aliases.keys().cloned());
        tags.into_iter()
            .map(|lang| LanguageCounts {
                triplets: self.triplets.iter().filter(|t| t.available_in(&lang)).count(),
                templates: self.templates.iter().filter(|t| t.language == lang).count(),
                language: lang,
            })
            .collect()
    }
}
