//! Token grid files: a 20-byte header (`MOTT`, u16 version, u16 reserved,
//! u32 positions n, u32 layers, u32 codebook size K) followed by
//! `layers · n` little-endian u16 indices, layer-major.

use std::path::Path;

use motok_core::rvq::TokenGrid;

use crate::error::{MotokError, Result};

pub const MAGIC: &[u8; 4] = b"MOTT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode(grid: &TokenGrid, codebook_size: usize) -> Result<Vec<u8>> {
    if codebook_size == 0 || codebook_size > u16::MAX as usize + 1 {
        return Err(MotokError::Usage(format!("codebook size {codebook_size} not storable as u16 indices")));
    }
    if let Some(&bad) = grid.tokens.iter().flatten().find(|&&t| t >= codebook_size) {
        return Err(MotokError::Usage(format!("token {bad} outside codebook of {codebook_size}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * grid.layers() * grid.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[0; 2]);
    out.extend_from_slice(&(grid.len() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.layers() as u32).to_le_bytes());
    out.extend_from_slice(&(codebook_size as u32).to_le_bytes());
    for &t in grid.tokens.iter().flatten() {
        out.extend_from_slice(&(t as u16).to_le_bytes());
    }
    Ok(out)
}

/// Returns the grid and its codebook size.
pub fn decode(bytes: &[u8]) -> Result<(TokenGrid, usize)> {
    let bad = |why: String| MotokError::MalformedHeader(why);
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("not a token grid file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported token grid version {version}")));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (n, layers, k) = (word(8), word(12), word(16));
    if n == 0 || layers == 0 || k == 0 {
        return Err(bad(format!("empty grid {layers}x{n} or codebook {k}")));
    }
    let expected = HEADER_LEN + 2 * n * layers;
    if bytes.len() < expected {
        return Err(MotokError::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(bad(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let flat: Vec<usize> = bytes[HEADER_LEN..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    if let Some(&t) = flat.iter().find(|&&t| t >= k) {
        return Err(bad(format!("token {t} outside codebook of {k}")));
    }
    let tokens = flat.chunks(n).map(|c| c.to_vec()).collect();
    Ok((TokenGrid::new(tokens)?, k))
}

pub fn save(path: &Path, grid: &TokenGrid, codebook_size: usize) -> Result<()> {
    std::fs::write(path, encode(grid, codebook_size)?).map_err(MotokError::io(path))
}

pub fn load(path: &Path) -> Result<(TokenGrid, usize)> {
    decode(&std::fs::read(path).map_err(MotokError::io(path))?)
}
