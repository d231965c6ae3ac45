use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PseudoLanguage, Template, Triplet, WordOrder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_relations: usize,
    pub n_subjects: usize,
    /// Size of each relation's object pool.
    pub objects_per_relation: usize,
    pub languages: Vec<PseudoLanguage>,
    /// Share of objects spelled identically in every language.
    pub collision_fraction: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n_relations: usize, n_subjects: usize, languages: Vec<PseudoLanguage>, collision_fraction: f64, seed: u64) -> Self {
        Self { n_relations, n_subjects, objects_per_relation: 4, languages, collision_fraction, seed }
    }
}

const INVENTORIES: [(&str, &str); 4] = [("ptkmnls", "aeiou"), ("bdgrvzh", "aeiy"), ("fkltsnw", "aou"), ("mprdgjb", "eio")];
const SHARED_INVENTORY: (&str, &str) = ("ptkbdgmnlrs", "aeiou");
const MAX_ATTEMPTS: usize = 2000;

struct WordPool {
    inventory: (Vec<char>, Vec<char>),
    words: Vec<String>,
}

impl WordPool {
    fn new(inv: (&str, &str), reserved: &[&str]) -> Self {
        Self {
            inventory: (inv.0.chars().collect(), inv.1.chars().collect()),
            words: reserved.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn fits(&self, w: &str) -> bool {
        self.words.iter().all(|x| !x.contains(w) && !w.contains(x.as_str()))
    }
}

fn draw(rng: &mut ChaCha8Rng, inv: &(Vec<char>, Vec<char>)) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(inv.0[rng.random_range(0..inv.0.len())]);
        w.push(inv.1[rng.random_range(0..inv.1.len())]);
    }
    w
}

/// A fresh word that neither contains nor is contained in any word of `pools`.
fn fresh(rng: &mut ChaCha8Rng, inv: &(Vec<char>, Vec<char>), pools: &mut [&mut WordPool], what: &str) -> Result<String> {
    for _ in 0..MAX_ATTEMPTS {
        let w = draw(rng, inv);
        if pools.iter().all(|p| p.fits(&w)) {
            for p in pools.iter_mut() {
                p.words.push(w.clone());
            }
            return Ok(w);
        }
    }
    Err(Error::Generation(format!("lexicon exhausted while drawing {what}")))
}

/// Deterministic multilingual corpus over pseudo-languages.
///
/// Every relation gets two templates per language shaped by the word order;
/// SOV and VSO languages get one template where the object is not final.
/// Each relation draws objects from its own pool; `collision_fraction` of all
/// objects share one spelling across every language.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Corpus> {
    if spec.n_relations == 0 || spec.n_subjects == 0 || spec.objects_per_relation == 0 {
        return Err(Error::Generation("relation, subject and object counts must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.collision_fraction) {
        return Err(Error::Generation(format!("collision_fraction {} outside [0, 1]", spec.collision_fraction)));
    }
    if spec.languages.is_empty() {
        return Err(Error::Generation("no languages".into()));
    }
    let tags: BTreeSet<_> = spec.languages.iter().map(|l| l.tag.as_str()).collect();
    if tags.len() != spec.languages.len() {
        return Err(Error::Generation("duplicate language tags".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut langs = spec.languages.clone();
    let mut pools: Vec<WordPool> = langs
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut reserved = vec![l.marker.as_str()];
            if let Some(a) = &l.article {
                reserved.push(a);
            }
            WordPool::new(INVENTORIES[i % INVENTORIES.len()], &reserved)
        })
        .collect();
    let shared_inv: (Vec<char>, Vec<char>) = (SHARED_INVENTORY.0.chars().collect(), SHARED_INVENTORY.1.chars().collect());

    let n_objects = spec.n_relations * spec.objects_per_relation;
    let n_shared = (spec.collision_fraction * n_objects as f64).round() as usize;
    let mut object_ids: Vec<String> = (0..spec.n_relations)
        .flat_map(|r| (0..spec.objects_per_relation).map(move |k| format!("o{r}.{k}")))
        .collect();
    object_ids.shuffle(&mut rng);
    let shared: BTreeSet<String> = object_ids[..n_shared].iter().cloned().collect();
    object_ids.sort();

    let mut corpus = Corpus::default();
    for id in shared.iter() {
        let mut all: Vec<&mut WordPool> = pools.iter_mut().collect();
        let w = fresh(&mut rng, &shared_inv, &mut all, id)?;
        for l in langs.iter_mut() {
            l.lexicon.insert(format!("object:{id}"), w.clone());
            corpus.aliases.entry(l.tag.clone()).or_default().insert(id.clone(), vec![w.clone()]);
        }
    }

    for (li, lang) in langs.iter_mut().enumerate() {
        let pool = &mut pools[li];
        let inv = pool.inventory.clone();
        let table = corpus.aliases.entry(lang.tag.clone()).or_default();
        for i in 0..spec.n_subjects {
            let id = format!("s{i}");
            let mut surface = fresh(&mut rng, &inv, &mut [&mut *pool], &id)?;
            if i % 3 == 0 {
                surface = format!("{surface} {}", fresh(&mut rng, &inv, &mut [&mut *pool], &id)?);
            }
            lang.lexicon.insert(format!("subject:{id}"), surface.clone());
            table.insert(id, vec![surface]);
        }
        for (n, id) in object_ids.iter().enumerate() {
            if shared.contains(id) {
                continue;
            }
            let canonical = fresh(&mut rng, &inv, &mut [&mut *pool], id)?;
            lang.lexicon.insert(format!("object:{id}"), canonical.clone());
            let mut aliases = vec![canonical];
            if n % 4 == 3 {
                let alt = fresh(&mut rng, &inv, &mut [&mut *pool], id)?;
                lang.lexicon.insert(format!("alias:{id}"), alt.clone());
                aliases.push(alt);
            }
            table.insert(id.clone(), aliases);
        }
        for r in 0..spec.n_relations {
            let rel = format!("r{r}");
            let mut word = |role: &str| -> Result<String> {
                let w = fresh(&mut rng, &inv, &mut [&mut *pool], &rel)?;
                lang.lexicon.insert(format!("{role}:{rel}"), w.clone());
                Ok(w)
            };
            let (v, p, q) = (word("verb")?, word("prep")?, word("particle")?);
            let patterns = match lang.word_order {
                WordOrder::Svo => [format!("[X] {v} [Y]"), format!("[X] {p} {q} [Y]")],
                WordOrder::Sov => [format!("[X] [Y] {v}"), format!("[X] {p} [Y]")],
                WordOrder::Vso => [format!("{v} [X] [Y]"), format!("{p} [X] [Y] {q}")],
            };
            for (k, pat) in patterns.iter().enumerate() {
                corpus.templates.push(Template::new(&format!("{}:{rel}:{k}", lang.tag), &rel, &lang.tag, pat)?);
            }
            if lang.article.is_some() && r % 2 == 1 {
                lang.article_relations.push(rel.clone());
            }
        }
        lang.check().map_err(Error::Generation)?;
    }

    for r in 0..spec.n_relations {
        let mut slots: Vec<usize> = (0..spec.n_subjects).map(|i| i % spec.objects_per_relation).collect();
        slots.shuffle(&mut rng);
        for (i, k) in slots.into_iter().enumerate() {
            corpus.triplets.push(Triplet::new(&format!("r{r}:s{i}"), &format!("s{i}"), &format!("r{r}"), &format!("o{r}.{k}")));
        }
    }
    corpus.languages = langs;
    corpus.join();
    Ok(corpus)
}
