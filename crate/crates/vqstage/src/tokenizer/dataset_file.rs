//! Token-grid dataset container.
//!
//! Text header — magic line, then `L <L> K <K> count <N>` — followed by one
//! binary record per image: L little-endian u16 token ids, then L
//! little-endian f32 quantization errors.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::TokenId;

const MAGIC: &str = "vq-tokens v1";

pub struct TokenDataset {
    pub seq_len: usize,
    pub codebook_size: usize,
    pub tokens: Vec<Vec<TokenId>>,
    pub errors: Vec<Vec<f32>>,
}

pub fn save_token_dataset(ds: &TokenDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "L {} K {} count {}", ds.seq_len, ds.codebook_size, ds.tokens.len())?;
    for (grid, errs) in ds.tokens.iter().zip(&ds.errors) {
        assert_eq!(grid.len(), ds.seq_len, "record length mismatch");
        assert_eq!(errs.len(), ds.seq_len);
        for &t in grid {
            w.write_all(&t.to_le_bytes())?;
        }
        for &e in errs {
            w.write_all(&e.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_token_dataset(path: &Path) -> Result<TokenDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Parse(format!("bad token-dataset magic {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let fields: Vec<&str> = line.trim_end().split(' ').collect();
    if fields.len() != 6 || fields[0] != "L" || fields[2] != "K" || fields[4] != "count" {
        return Err(Error::Parse(format!("bad token-dataset header {:?}", line.trim_end())));
    }
    let seq_len: usize = fields[1].parse().map_err(|_| Error::Parse("bad L".into()))?;
    let codebook_size: usize = fields[3].parse().map_err(|_| Error::Parse("bad K".into()))?;
    let count: usize = fields[5].parse().map_err(|_| Error::Parse("bad count".into()))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let rec = seq_len * 2 + seq_len * 4;
    if payload.len() != count * rec {
        return Err(Error::Parse(format!(
            "token payload is {} bytes, expected {}",
            payload.len(),
            count * rec
        )));
    }
    let mut tokens = Vec::with_capacity(count);
    let mut errors = Vec::with_capacity(count);
    for i in 0..count {
        let base = i * rec;
        let mut grid = Vec::with_capacity(seq_len);
        for j in 0..seq_len {
            let at = base + j * 2;
            grid.push(u16::from_le_bytes([payload[at], payload[at + 1]]));
        }
        let mut errs = Vec::with_capacity(seq_len);
        for j in 0..seq_len {
            let at = base + seq_len * 2 + j * 4;
            errs.push(f32::from_le_bytes([
                payload[at],
                payload[at + 1],
                payload[at + 2],
                payload[at + 3],
            ]));
        }
        for &t in &grid {
            if (t as usize) >= codebook_size {
                return Err(Error::TokenOutOfRange { token: t as u32, codebook: codebook_size });
            }
        }
        tokens.push(grid);
        errors.push(errs);
    }
    Ok(TokenDataset { seq_len, codebook_size, tokens, errors })
}
