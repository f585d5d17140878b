//! Query files: one `[query]` section per question.
//!
//! ```text
//! [query]
//! text = What happens in event 0?
//! target = 3
//! tokens = 0.1,0.2,...;0.3,0.4,...
//! ```
//!
//! `tokens` holds the token embeddings, rows separated by `;`. `text` and `target`
//! are optional.

use std::fmt::Write as _;

use streamsel_core::config::parse_document;
use streamsel_core::numerics::Matrix;
use streamsel_core::pipeline::SimQuery;
use streamsel_core::retrieval::QueryEmbedding;
use streamsel_core::{Error, Result};

pub fn queries_to_text(queries: &[SimQuery]) -> String {
    let mut out = String::from("# queries\n");
    for q in queries {
        let _ = writeln!(out, "\n[query]");
        if let Some(t) = &q.query.text {
            let _ = writeln!(out, "text = {}", t.replace('\n', " "));
        }
        if let Some(t) = q.target_clip {
            let _ = writeln!(out, "target = {t}");
        }
        let rows: Vec<String> = q
            .query
            .token_embeddings()
            .row_iter()
            .map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
            .collect();
        let _ = writeln!(out, "tokens = {}", rows.join(";"));
    }
    out
}

pub fn parse_queries(text: &str) -> Result<Vec<SimQuery>> {
    let doc = parse_document(text)?;
    let mut out = Vec::new();
    for s in &doc.sections {
        let err = |line: usize, reason: String| Error::Config { line, reason };
        if s.name != "query" {
            return Err(err(s.line, format!("unknown section [{}] in query file", s.name)));
        }
        let mut text = None;
        let mut target = None;
        let mut tokens = None;
        for e in &s.entries {
            match e.key.as_str() {
                "text" => text = Some(e.value.clone()),
                "target" => {
                    target = Some(e.value.parse::<u64>().map_err(|x| err(e.line, format!("target: {x}")))?);
                }
                "tokens" => {
                    let rows = e
                        .value
                        .split(';')
                        .map(|r| {
                            r.split(',')
                                .map(|v| v.trim().parse::<f64>().map_err(|x| err(e.line, format!("tokens: `{}`: {x}", v.trim()))))
                                .collect::<Result<Vec<f64>>>()
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let m = Matrix::from_rows(&rows).map_err(|x| err(e.line, x.to_string()))?;
                    tokens = Some((m, e.line));
                }
                other => return Err(err(e.line, format!("unknown key `{other}` in [query]"))),
            }
        }
        let (m, line) = tokens.ok_or_else(|| err(s.line, "[query] requires `tokens`".into()))?;
        let query = QueryEmbedding::new(m, text).map_err(|x| err(line, x.to_string()))?;
        out.push(SimQuery { query, target_clip: target });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let q = QueryEmbedding::new(Matrix::from_rows(&[[0.1, -2.5], [3.0, 1e-9]]).unwrap(), Some("why?".into())).unwrap();
        let qs = vec![SimQuery { query: q, target_clip: Some(4) }];
        let back = parse_queries(&queries_to_text(&qs)).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].query, qs[0].query);
        assert_eq!(back[0].target_clip, Some(4));
    }

    #[test]
    fn bad_token_cites_line() {
        let err = parse_queries("[query]\ntokens = 1,x\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }));
    }
}
