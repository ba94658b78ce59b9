//! Versioned text snapshots of [`PolicyParams`].
//!
//! ```text
//! lld-params 1
//! shape <vocab_size> <dim> <contexts> <anchors>
//! prior <seed> <correlation>
//! w <d values>                      (vocab_size lines, row order)
//! anchor <question> <d values>      (one line per anchor)
//! ctx <question> <len> <len tokens> <d values>
//! ```
//!
//! Floats are written in shortest round-trip form, so a snapshot reloads
//! bit-for-bit.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{LabError, Result};
use crate::model::{ContextKey, EmbeddingPrior, PolicyParams, QuestionId, TokenId};

pub const MAGIC: &str = "lld-params";
pub const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> LabError {
    LabError::Snapshot(e.to_string())
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

pub fn write_params<W: Write>(params: &PolicyParams, mut out: W) -> Result<()> {
    let prior = params.prior();
    writeln!(out, "{MAGIC} {VERSION}").map_err(io_err)?;
    writeln!(out, "shape {} {} {} {}", params.vocab_size(), params.dim(), params.context_count(), prior.anchors.len())
        .map_err(io_err)?;
    writeln!(out, "prior {} {:?}", prior.seed, prior.correlation).map_err(io_err)?;
    for row in params.w().chunks_exact(params.dim()) {
        writeln!(out, "w {}", join(row)).map_err(io_err)?;
    }
    for (q, anchor) in &prior.anchors {
        writeln!(out, "anchor {q} {}", join(anchor)).map_err(io_err)?;
    }
    for (key, h) in params.contexts() {
        let tokens: Vec<String> = key.prefix.iter().map(|t| t.to_string()).collect();
        let sep = if tokens.is_empty() { "" } else { " " };
        writeln!(out, "ctx {} {}{sep}{} {}", key.question, key.prefix.len(), tokens.join(" "), join(h)).map_err(io_err)?;
    }
    Ok(())
}

struct Fields<'a> {
    line: usize,
    parts: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        self.parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| LabError::Snapshot(format!("line {}: bad or missing {what}", self.line)))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.next::<f64>(what)).collect()
    }

    fn tag(&mut self, expected: &str) -> Result<()> {
        match self.parts.next() {
            Some(t) if t == expected => Ok(()),
            other => Err(LabError::Snapshot(format!("line {}: expected {expected:?}, found {other:?}", self.line))),
        }
    }

    fn finish(mut self) -> Result<()> {
        match self.parts.next() {
            None => Ok(()),
            Some(extra) => Err(LabError::Snapshot(format!("line {}: trailing field {extra:?}", self.line))),
        }
    }
}

pub fn read_params<R: BufRead>(input: R) -> Result<PolicyParams> {
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>().map_err(io_err)?;
    let mut it = lines.iter().enumerate().map(|(i, l)| Fields { line: i + 1, parts: l.split_whitespace() });
    let mut next = || it.next().ok_or_else(|| LabError::Snapshot("unexpected end of snapshot".into()));

    let mut header = next()?;
    header.tag(MAGIC)?;
    let version: u32 = header.next("version")?;
    if version != VERSION {
        return Err(LabError::Snapshot(format!("unsupported version {version}")));
    }
    header.finish()?;

    let mut shape = next()?;
    shape.tag("shape")?;
    let (v, d, n_ctx, n_anchor): (usize, usize, usize, usize) =
        (shape.next("vocab size")?, shape.next("dimension")?, shape.next("context count")?, shape.next("anchor count")?);
    shape.finish()?;

    let mut prior_line = next()?;
    prior_line.tag("prior")?;
    let seed: u64 = prior_line.next("prior seed")?;
    let correlation: f64 = prior_line.next("prior correlation")?;
    prior_line.finish()?;

    let mut w = Vec::with_capacity(v * d);
    for _ in 0..v {
        let mut row = next()?;
        row.tag("w")?;
        w.extend(row.floats(d, "unembedding entry")?);
        row.finish()?;
    }
    let mut anchors = BTreeMap::new();
    for _ in 0..n_anchor {
        let mut line = next()?;
        line.tag("anchor")?;
        let q = QuestionId(line.next("question")?);
        anchors.insert(q, line.floats(d, "anchor entry")?);
        line.finish()?;
    }
    let mut contexts = Vec::with_capacity(n_ctx);
    for _ in 0..n_ctx {
        let mut line = next()?;
        line.tag("ctx")?;
        let q = QuestionId(line.next("question")?);
        let len: usize = line.next("prefix length")?;
        let prefix: Vec<TokenId> = (0..len).map(|_| line.next("prefix token")).collect::<Result<_>>()?;
        let h = line.floats(d, "embedding entry")?;
        line.finish()?;
        contexts.push((ContextKey { question: q, prefix }, h));
    }
    if it.next().is_some() {
        return Err(LabError::Snapshot("trailing lines after the declared contexts".into()));
    }
    let mut params = PolicyParams::from_parts(v, d, w, contexts)?;
    params.set_prior(EmbeddingPrior { seed, correlation, anchors })?;
    Ok(params)
}
