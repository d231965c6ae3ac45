use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::Value;

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const DEFAULT_ENDPOINT: &str = "https://www.wikidata.org/w/api.php";

#[derive(Debug, Clone, PartialEq)]
pub struct FetchOptions {
    pub endpoint: String,
    pub languages: Vec<String>,
    pub timeout: Duration,
    /// Extra attempts per batch after the first failure.
    pub retries: usize,
    /// Ids per request; the API accepts at most 50.
    pub batch_size: usize,
    /// Requests in flight at once.
    pub max_concurrency: usize,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_ENDPOINT.into(),
            languages: vec!["en".into()],
            timeout: Duration::from_secs(30),
            retries: 2,
            batch_size: 50,
            max_concurrency: 4,
        }
    }
}

/// entity id -> language -> aliases (label first).
pub type AliasTable = BTreeMap<String, BTreeMap<String, Vec<String>>>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FetchReport {
    pub aliases: AliasTable,
    /// Ids that could not be resolved, with the reason.
    pub failures: Vec<(String, String)>,
}

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !s.trim().is_empty() && !v.iter().any(|x| x == s) {
        v.push(s.to_string());
    }
}

/// Reads a `wbgetentities` response body.
pub fn parse_entities(body: &Value, ids: &[String], languages: &[String]) -> FetchReport {
    let mut report = FetchReport::default();
    let entities = body.get("entities");
    for id in ids {
        let Some(e) = entities.and_then(|m| m.get(id)) else {
            report.failures.push((id.clone(), "absent from response".into()));
            continue;
        };
        if e.get("missing").is_some() {
            report.failures.push((id.clone(), "no such entity".into()));
            continue;
        }
        let mut per_lang = BTreeMap::new();
        for lang in languages {
            let mut set = Vec::new();
            if let Some(label) = e.pointer(&format!("/labels/{lang}/value")).and_then(Value::as_str) {
                push_unique(&mut set, label);
            }
            if let Some(list) = e.pointer(&format!("/aliases/{lang}")).and_then(Value::as_array) {
                for a in list {
                    if let Some(s) = a.get("value").and_then(Value::as_str) {
                        push_unique(&mut set, s);
                    }
                }
            }
            if !set.is_empty() {
                per_lang.insert(lang.clone(), set);
            }
        }
        report.aliases.insert(id.clone(), per_lang);
    }
    report
}

fn fetch_batch(agent: &ureq::Agent, opts: &FetchOptions, ids: &[String]) -> Result<Value> {
    let mut last = String::new();
    for attempt in 0..=opts.retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(200 << attempt.min(6)));
        }
        let resp = agent
            .get(&opts.endpoint)
            .query("action", "wbgetentities")
            .query("format", "json")
            .query("props", "labels|aliases")
            .query("ids", ids.join("|"))
            .query("languages", opts.languages.join("|"))
            .call();
        match resp {
            Ok(mut r) => match r.body_mut().read_json::<Value>() {
                Ok(v) => return Ok(v),
                Err(e) => last = e.to_string(),
            },
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Http(format!("{} after {} attempt(s): {last}", opts.endpoint, opts.retries + 1)))
}

/// Fetches labels and aliases for `ids`. Failed batches land in `failures`.
pub fn fetch_aliases(ids: &[String], opts: &FetchOptions) -> FetchReport {
    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(opts.timeout)).build().into();
    let batches: Vec<&[String]> = ids.chunks(opts.batch_size.clamp(1, 50)).collect();
    let mut report = FetchReport::default();
    for group in batches.chunks(opts.max_concurrency.max(1)) {
        let results: Vec<(&[String], Result<Value>)> = std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|b| {
                    let agent = &agent;
                    s.spawn(move || (*b, fetch_batch(agent, opts, b)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fetch thread panicked")).collect()
        });
        for (batch, res) in results {
            match res {
                Ok(body) => {
                    let part = parse_entities(&body, batch, &opts.languages);
                    report.aliases.extend(part.aliases);
                    report.failures.extend(part.failures);
                }
                Err(e) => report.failures.extend(batch.iter().map(|id| (id.clone(), e.to_string()))),
            }
        }
    }
    report
}

/// Puts fetched aliases first (label, then source order), keeps existing ones after. Idempotent.
pub fn merge_aliases(corpus: &mut Corpus, fetched: &AliasTable) {
    for (id, per_lang) in fetched {
        for (lang, fresh) in per_lang {
            let table = corpus.aliases.entry(lang.clone()).or_default();
            let mut merged = Vec::new();
            for a in fresh {
                push_unique(&mut merged, a);
            }
            if let Some(old) = table.get(id) {
                for a in old {
                    push_unique(&mut merged, a);
                }
            }
            table.insert(id.clone(), merged);
        }
    }
    corpus.join();
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    const FIXTURE: &str = r#"{"entities":{
      "Q90":{"type":"item","id":"Q90",
        "labels":{"en":{"language":"en","value":"Paris"},"es":{"language":"es","value":"París"}},
        "aliases":{"en":[{"language":"en","value":"City of Light"},{"language":"en","value":"Paris, France"},{"language":"en","value":"City of Light"}],
                   "es":[{"language":"es","value":"Ciudad de la Luz"}]}},
      "Q48":{"type":"item","id":"Q48",
        "labels":{"en":{"language":"en","value":"Asia"},"es":{"language":"es","value":"Asia"}},
        "aliases":{}},
      "Q0":{"id":"Q0","missing":""}
    }}"#;

    fn ids() -> Vec<String> {
        vec!["Q90".into(), "Q48".into(), "Q0".into()]
    }

    fn langs() -> Vec<String> {
        vec!["en".into(), "es".into()]
    }

    #[test]
    fn fixture_alias_sets() {
        let body: Value = serde_json::from_str(FIXTURE).unwrap();
        let r = parse_entities(&body, &ids(), &langs());
        assert_eq!(r.aliases["Q90"]["en"], ["Paris", "City of Light", "Paris, France"]);
        assert_eq!(r.aliases["Q90"]["es"], ["París", "Ciudad de la Luz"]);
        assert_eq!(r.aliases["Q48"]["en"], ["Asia"]);
        assert_eq!(r.failures, vec![("Q0".to_string(), "no such entity".to_string())]);
    }

    #[test]
    fn merge_is_idempotent_and_label_first() {
        let body: Value = serde_json::from_str(FIXTURE).unwrap();
        let r = parse_entities(&body, &ids(), &langs());
        let mut c = Corpus::default();
        c.aliases.entry("en".into()).or_default().insert("Q90".into(), vec!["Lutetia".into(), "Paris".into()]);
        merge_aliases(&mut c, &r.aliases);
        let once = c.clone();
        merge_aliases(&mut c, &r.aliases);
        assert_eq!(c, once);
        assert_eq!(c.aliases["en"]["Q90"], ["Paris", "City of Light", "Paris, France", "Lutetia"]);
    }

    fn serve_once(status: &'static str, body: &'static str, hits: usize) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for _ in 0..hits {
                let (mut s, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(s.try_clone().unwrap());
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                seen.push(line.clone());
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h == "\r\n" || h.is_empty() {
                        break;
                    }
                }
                let resp = format!(
                    "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                s.write_all(resp.as_bytes()).unwrap();
                let _ = s.read(&mut [0u8; 1]);
            }
            seen
        });
        (format!("http://{addr}/w/api.php"), h)
    }

    #[test]
    fn fetch_over_http() {
        let (endpoint, h) = serve_once("200 OK", FIXTURE, 1);
        let opts = FetchOptions { endpoint, languages: langs(), ..FetchOptions::default() };
        let r = fetch_aliases(&ids(), &opts);
        assert_eq!(r.aliases["Q48"]["es"], ["Asia"]);
        let request = &h.join().unwrap()[0];
        assert!(request.contains("action=wbgetentities") && request.contains("Q90%7CQ48%7CQ0"), "{request}");
    }

    #[test]
    fn http_errors_are_collected_per_id() {
        let (endpoint, h) = serve_once("503 Service Unavailable", "{}", 2);
        let opts = FetchOptions { endpoint, languages: langs(), retries: 1, ..FetchOptions::default() };
        let r = fetch_aliases(&ids()[..2], &opts);
        h.join().unwrap();
        assert!(r.aliases.is_empty());
        assert_eq!(r.failures.len(), 2);
        assert!(r.failures[0].1.contains("2 attempt"), "{}", r.failures[0].1);
    }
}
