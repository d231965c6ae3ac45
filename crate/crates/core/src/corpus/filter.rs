use crate::corpus::Corpus;

/// Case-fold, collapse whitespace, strip surrounding punctuation.
pub fn normalize_alias(s: &str) -> String {
    let folded = s.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// True when any alias occurs in the query as a substring, both normalized.
pub fn alias_in_query(query: &str, aliases: &[String]) -> bool {
    let q = normalize_alias(query);
    aliases.iter().map(|a| normalize_alias(a)).any(|a| !a.is_empty() && q.contains(&a))
}

/// Blocks every (triplet, template) pair whose rendered query already mentions the object.
pub fn filter_trivial(corpus: &Corpus) -> Corpus {
    let mut out = corpus.clone();
    for lang in corpus.language_tags() {
        for q in corpus.queries(&lang) {
            if alias_in_query(&q.text_without_object(), q.aliases) {
                out.blocked.insert((q.triplet.id.clone(), q.template.id.clone()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Template, Triplet};
    use proptest::prelude::*;

    fn corpus(subject: &str, object: &[&str], pattern: &str) -> Corpus {
        let mut c = Corpus::default();
        c.templates.push(Template::new("en:0", "P30", "en", pattern).unwrap());
        let table = c.aliases.entry("en".into()).or_default();
        table.insert("s".into(), vec![subject.into()]);
        table.insert("o".into(), object.iter().map(|s| s.to_string()).collect());
        c.triplets.push(Triplet::new("t", "s", "P30", "o"));
        c.join();
        c
    }

    #[test]
    fn object_in_subject_is_removed() {
        let c = filter_trivial(&corpus("South Asia", &["Asia"], "[X] belongs to the continent of [Y]"));
        assert_eq!(c.queries("en").count(), 0);
        assert_eq!(c.blocked.len(), 1);
    }

    #[test]
    fn unrelated_query_is_kept() {
        let c = filter_trivial(&corpus("Kenya", &["Africa"], "[X] belongs to the continent of [Y]"));
        assert_eq!(c.queries("en").count(), 1);
    }

    #[test]
    fn case_and_spacing_variants_are_removed() {
        for subject in ["SOUTH  ASIA", "south asia", "South\tAsia"] {
            for alias in ["asia", "ASIA", " Asia.", "\"Asia\""] {
                let c = filter_trivial(&corpus(subject, &[alias], "[X] belongs to the continent of [Y]"));
                assert_eq!(c.queries("en").count(), 0, "{subject} / {alias}");
            }
        }
    }

    #[test]
    fn any_alias_counts() {
        let c = filter_trivial(&corpus("Mumbai", &["India", "Bharat"], "[X], Bharat, is in [Y]"));
        assert_eq!(c.queries("en").count(), 0);
    }

    proptest! {
        #[test]
        fn no_false_positives(words in prop::collection::vec("[a-m]{3,6}", 1..5), alias in "[n-z]{3,6}") {
            let subject = words.join(" ");
            let c = filter_trivial(&corpus(&subject, &[&alias], "[X] is in [Y]"));
            prop_assert_eq!(c.queries("en").count(), 1);
        }

        #[test]
        fn planted_alias_is_always_found(words in prop::collection::vec("[a-z]{2,6}", 0..4), alias in "[A-Za-z]{2,6}") {
            let mut w = words.clone();
            w.push(alias.to_uppercase());
            let c = filter_trivial(&corpus(&w.join(" "), &[&alias], "[X] is in [Y]"));
            prop_assert_eq!(c.queries("en").count(), 0);
        }
    }
}
