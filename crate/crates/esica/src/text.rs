//! Prompt embedding providers.
//!
//! Downstream modules only ever see a single pooled vector per prompt. Two
//! providers exist: a deterministic bag-of-token-hashes embedder for
//! self-contained runs, and a loader for embedding tables precomputed
//! offline (format `ESICA-EMB v1`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where an embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Toy,
    Table,
}

/// Pooled text feature for one prompt.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub vector: Tensor,
    pub source: EmbeddingSource,
    pub prompt_text: String,
}

/// FNV-1a with a fixed seed, so embeddings are identical across runs and
/// platforms (the std hasher is randomly seeded per process).
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Deterministic toy embedder: each token hashes to one of `d_text` buckets
/// with a +/-1 sign, token contributions are summed, and the result is
/// L2-normalized. Word order does not matter.
pub fn embed_toy(prompt: &str, d_text: usize) -> Result<PromptEmbedding> {
    if d_text == 0 {
        return Err(Error::config("embed_toy: d_text must be positive"));
    }
    let tokens = tokenize(prompt);
    if tokens.is_empty() {
        return Err(Error::input(format!(
            "embed_toy: prompt {prompt:?} contains no tokens"
        )));
    }
    let mut acc = vec![0.0f64; d_text];
    for tok in &tokens {
        let h = fnv1a(tok.as_bytes());
        let bucket = (h % d_text as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        acc[bucket] += sign;
    }
    let norm: f64 = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Possible if opposite-signed tokens share a bucket; nudge by the
        // first token's hash so the invariant (unit norm) always holds.
        let h = fnv1a(tokens[0].as_bytes());
        acc[(h % d_text as u64) as usize] = 1.0;
    } else {
        for v in acc.iter_mut() {
            *v /= norm;
        }
    }
    Ok(PromptEmbedding {
        vector: Tensor::new(&[d_text], acc)?,
        source: EmbeddingSource::Toy,
        prompt_text: prompt.to_string(),
    })
}

/// Parsed `ESICA-EMB v1` table.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub d_text: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, prompt: &str) -> Result<PromptEmbedding> {
        let vec = self.entries.get(prompt).ok_or_else(|| {
            Error::input(format!("embedding table has no entry for prompt {prompt:?}"))
        })?;
        Ok(PromptEmbedding {
            vector: Tensor::new(&[self.d_text], vec.clone())?,
            source: EmbeddingSource::Table,
            prompt_text: prompt.to_string(),
        })
    }

    pub fn prompts(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }
}

/// Load an embedding table.
///
/// Line format: `ESICA-EMB v1 <d_text>` header, then one
/// `"<prompt>"<TAB><f1> <f2> ...` line per prompt. Stored float bits are
/// preserved exactly; duplicate prompts are an error.
pub fn load_table(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::parse(format!("{}:0", path.display()), e.to_string()))?;
    parse_table(&text, &path.display().to_string())
}

pub fn parse_table(text: &str, origin: &str) -> Result<EmbeddingTable> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(format!("{origin}:1"), "empty file"))?;
    let mut parts = header.split_whitespace();
    let magic = (parts.next(), parts.next());
    if magic != (Some("ESICA-EMB"), Some("v1")) {
        return Err(Error::parse(
            format!("{origin}:1"),
            format!("expected `ESICA-EMB v1 <d_text>` header, got {header:?}"),
        ));
    }
    let d_text: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .filter(|d| *d > 0)
        .ok_or_else(|| Error::parse(format!("{origin}:1"), "missing or invalid d_text"))?;

    let mut entries = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("{origin}:{lineno}");
        let rest = line
            .strip_prefix('"')
            .ok_or_else(|| Error::parse(loc(), "prompt must start with a double quote"))?;
        let close = rest
            .find('"')
            .ok_or_else(|| Error::parse(loc(), "unterminated prompt quote"))?;
        let prompt = &rest[..close];
        let tail = rest[close + 1..]
            .strip_prefix('\t')
            .ok_or_else(|| Error::parse(loc(), "expected a TAB after the quoted prompt"))?;
        let mut values = Vec::with_capacity(d_text);
        for field in tail.split_whitespace() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(loc(), format!("invalid float {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(loc(), format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
        if values.len() != d_text {
            return Err(Error::parse(
                loc(),
                format!("expected {d_text} values, got {}", values.len()),
            ));
        }
        if entries.insert(prompt.to_string(), values).is_some() {
            return Err(Error::parse(
                loc(),
                format!("duplicate prompt {prompt:?}"),
            ));
        }
    }
    Ok(EmbeddingTable { d_text, entries })
}

/// Write a table in the exact format `load_table` reads. Floats are printed
/// in shortest round-trip form, so load(save(t)) reproduces every bit.
pub fn save_table(path: &Path, d_text: usize, entries: &[(String, Vec<f64>)]) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "ESICA-EMB v1 {d_text}");
    for (prompt, values) in entries {
        if values.len() != d_text {
            return Err(Error::config(format!(
                "save_table: prompt {prompt:?} has {} values, expected {d_text}",
                values.len()
            )));
        }
        let _ = write!(out, "\"{prompt}\"\t");
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// A pluggable source of prompt embeddings with a fixed output width.
#[derive(Debug, Clone)]
pub enum TextProvider {
    Toy { d_text: usize },
    Table(EmbeddingTable),
}

impl TextProvider {
    pub fn toy(d_text: usize) -> Self {
        TextProvider::Toy { d_text }
    }

    pub fn from_table_file(path: &Path, expected_d_text: usize) -> Result<Self> {
        let table = load_table(path)?;
        if table.d_text != expected_d_text {
            return Err(Error::config(format!(
                "embedding table width {} does not match the configured d_text {}",
                table.d_text, expected_d_text
            )));
        }
        Ok(TextProvider::Table(table))
    }

    pub fn d_text(&self) -> usize {
        match self {
            TextProvider::Toy { d_text } => *d_text,
            TextProvider::Table(t) => t.d_text,
        }
    }

    pub fn embed(&self, prompt: &str) -> Result<PromptEmbedding> {
        match self {
            TextProvider::Toy { d_text } => embed_toy(prompt, *d_text),
            TextProvider::Table(t) => t.get(prompt),
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::synthetic_prompt_catalog;

    #[test]
    fn toy_embedding_is_deterministic() {
        let a = embed_toy("left kidney", 64).unwrap();
        let b = embed_toy("left kidney", 64).unwrap();
        assert_eq!(a.vector.data(), b.vector.data());
    }

    #[test]
    fn bag_semantics_ignore_word_order() {
        let a = embed_toy("left kidney", 64).unwrap();
        let b = embed_toy("kidney left", 64).unwrap();
        assert_eq!(a.vector.data(), b.vector.data());
    }

    #[test]
    fn empty_prompt_is_an_input_error() {
        assert!(matches!(embed_toy("", 64), Err(Error::Input(_))));
        assert!(matches!(embed_toy("  !!  ", 64), Err(Error::Input(_))));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        for p in ["bright sphere", "a", "x y z w", "dim oval blob"] {
            let e = embed_toy(p, 64).unwrap();
            let n: f64 = e.vector.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{p}: norm {n}");
        }
    }

    #[test]
    fn synthetic_prompts_are_separable() {
        // All pairwise cosines among the synthetic-dataset prompts stay
        // below 0.9, so classes are distinguishable by the toy embedder.
        let prompts: Vec<&str> = synthetic_prompt_catalog()
            .iter()
            .flat_map(|(_, ps)| ps.iter().copied())
            .collect();
        assert_eq!(prompts.len(), 8);
        let embs: Vec<_> = prompts
            .iter()
            .map(|p| embed_toy(p, 64).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in 0..i {
                let c = cosine(embs[i].vector.data(), embs[j].vector.data());
                assert!(
                    c < 0.9,
                    "prompts {:?} and {:?} too similar: cosine {c}",
                    prompts[i],
                    prompts[j]
                );
            }
        }
    }

    #[test]
    fn table_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let entries = vec![
            (
                "bright sphere".to_string(),
                vec![0.125, -3.5e-7, 1.0 / 3.0, f64::MIN_POSITIVE],
            ),
            ("dark cube".to_string(), vec![-1.25, 0.0, 9.87654321, 2e300]),
        ];
        save_table(&path, 4, &entries).unwrap();
        let table = load_table(&path).unwrap();
        assert_eq!(table.len(), 2);
        for (prompt, values) in &entries {
            let e = table.get(prompt).unwrap();
            assert_eq!(e.vector.data(), values.as_slice());
            assert_eq!(e.source, EmbeddingSource::Table);
        }
    }

    #[test]
    fn duplicate_prompt_names_the_duplicate() {
        let text = "ESICA-EMB v1 2\n\"a b\"\t1 2\n\"a b\"\t3 4\n";
        let err = parse_table(text, "mem").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate"), "{msg}");
        assert!(msg.contains("a b"), "{msg}");
        assert!(msg.contains("mem:3"), "{msg}");
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        for (text, line) in [
            ("ESICA-EMB v1 2\nno quote\t1 2\n", "mem:2"),
            ("ESICA-EMB v1 2\n\"p\" 1 2\n", "mem:2"),
            ("ESICA-EMB v1 2\n\"p\"\t1\n", "mem:2"),
            ("ESICA-EMB v1 2\n\"p\"\t1 nan\n", "mem:2"),
            ("BADMAGIC v1 2\n", "mem:1"),
            ("ESICA-EMB v1 0\n", "mem:1"),
        ] {
            let err = parse_table(text, "mem").unwrap_err();
            assert!(err.to_string().contains(line), "{err} missing {line}");
        }
    }

    #[test]
    fn two_entry_table_has_size_two() {
        let text = "ESICA-EMB v1 64\n\"p one\"\t".to_string()
            + &vec!["0.5"; 64].join(" ")
            + "\n\"p two\"\t"
            + &vec!["-0.5"; 64].join(" ")
            + "\n";
        let table = parse_table(&text, "mem").unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.d_text, 64);
    }

    #[test]
    fn provider_width_mismatch_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        save_table(&path, 3, &[("p".to_string(), vec![1.0, 2.0, 3.0])]).unwrap();
        assert!(matches!(
            TextProvider::from_table_file(&path, 64),
            Err(Error::Config(_))
        ));
        assert!(TextProvider::from_table_file(&path, 3).is_ok());
    }
}
