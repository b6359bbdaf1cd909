//! JSON-lines datasets: one [`SyntheticExample`] per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use himap_core::task::SyntheticExample;

pub fn write_jsonl(path: &Path, examples: &[SyntheticExample]) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SyntheticExample>> {
    let f = fs::File::open(path).with_context(|| format!("cannot open dataset {}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: SyntheticExample = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed example", path.display(), k + 1))?;
        if ex.tokens.len() < 2 || ex.layout.len() + 1 != ex.tokens.len() {
            bail!(
                "{}:{}: layout covers {} tokens but the example has {} (prompt plus answer)",
                path.display(),
                k + 1,
                ex.layout.len(),
                ex.tokens.len()
            );
        }
        out.push(ex);
    }
    if out.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(out)
}
