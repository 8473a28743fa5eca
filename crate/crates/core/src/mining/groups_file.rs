//! Mined groups on disk: `query_id<TAB>positive_id<TAB>neg_1,neg_2,...`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::TokenizedCorpus;
use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::losses::CandidateGroup;

pub fn format_groups(groups: &[CandidateGroup]) -> String {
    let mut out = String::new();
    for g in groups {
        let negs: Vec<&str> = g.negatives.iter().map(|c| c.id.as_str()).collect();
        out.push_str(&format!("{}\t{}\t{}\n", g.query_id, g.positive.id, negs.join(",")));
    }
    out
}

pub fn write_groups(path: &Path, groups: &[CandidateGroup]) -> Result<()> {
    fs::write(path, format_groups(groups)).map_err(|e| Error::io(path, e))
}

/// Rebuilds groups from their id form; queries and passages must exist.
pub fn parse_groups(
    path: &Path,
    content: &str,
    corpus: &TokenizedCorpus,
    queries: &[(String, TokenSequence)],
) -> Result<Vec<CandidateGroup>> {
    let query_tokens: HashMap<&str, &TokenSequence> = queries.iter().map(|(id, t)| (id.as_str(), t)).collect();
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let q = query_tokens
            .get(fields[0])
            .ok_or_else(|| err(format!("unknown query {:?}", fields[0])))?;
        let positive = corpus.candidate(fields[1]).map_err(|e| err(e.to_string()))?;
        let negatives = fields[2]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|id| corpus.candidate(id))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| err(e.to_string()))?;
        let group =
            CandidateGroup::new(fields[0], (*q).clone(), positive, negatives).map_err(|e| err(e.to_string()))?;
        out.push(group);
    }
    Ok(out)
}

pub fn load_groups(
    path: &Path,
    corpus: &TokenizedCorpus,
    queries: &[(String, TokenSequence)],
) -> Result<Vec<CandidateGroup>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_groups(path, &content, corpus, queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Corpus;
    use crate::encoders::{tokenize, EncoderConfig};

    #[test]
    fn round_trip() {
        let cfg = EncoderConfig {
            vocab_size: 64,
            ..EncoderConfig::default()
        };
        let corpus = TokenizedCorpus::new(
            &Corpus::new(vec![
                ("a".into(), "x y".into()),
                ("b".into(), "y".into()),
                ("c".into(), "z".into()),
            ])
            .unwrap(),
            &cfg,
        );
        let queries = vec![("q1".to_string(), tokenize("x", 32, 64))];
        let g = CandidateGroup::new(
            "q1",
            queries[0].1.clone(),
            corpus.candidate("a").unwrap(),
            vec![corpus.candidate("c").unwrap(), corpus.candidate("b").unwrap()],
        )
        .unwrap();
        let text = format_groups(std::slice::from_ref(&g));
        assert_eq!(text, "q1\ta\tc,b\n");
        let back = parse_groups(Path::new("mem"), &text, &corpus, &queries).unwrap();
        assert_eq!(back, vec![g]);
        assert!(matches!(
            parse_groups(Path::new("mem"), "q1\tzz\tb\n", &corpus, &queries),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
