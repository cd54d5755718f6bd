//! Artist biography embeddings: binary table format and name matching.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::TrackRecord;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BIOE";
const VERSION: u32 = 1;

/// Write named vectors in the shared keyed-table layout: magic, u32 version,
/// u32 dim, u32 count, then per row a u16-length-prefixed UTF-8 key and dim
/// float32 LE values. Biography tables use magic `BIOE`; embedding exports
/// reuse the layout with magic `EMBD`.
pub fn write_keyed_vectors(
    path: &Path,
    magic: &[u8; 4],
    dim: usize,
    rows: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(magic)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(dim as u32).to_le_bytes())?;
    f.write_all(&(rows.len() as u32).to_le_bytes())?;
    for (name, vector) in rows {
        if vector.len() != dim {
            return Err(Error::shape(
                "keyed vectors",
                format!("row {name} has {} values in a dim-{dim} table", vector.len()),
            ));
        }
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("key too long: {name}")));
        }
        f.write_all(&(bytes.len() as u16).to_le_bytes())?;
        f.write_all(bytes)?;
        for &v in vector {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Read a keyed-vector table, checking the expected magic.
pub fn read_keyed_vectors(path: &Path, magic: &[u8; 4]) -> Result<(usize, Vec<(String, Vec<f64>)>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut got = [0u8; 4];
    f.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::Format(format!("bad magic {got:?}, expected {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported table version {version}")));
    }
    f.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    f.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut rows = Vec::with_capacity(count);
    let mut b2 = [0u8; 2];
    for _ in 0..count {
        f.read_exact(&mut b2)?;
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("bad key: {e}")))?;
        let mut buf = vec![0u8; dim * 4];
        f.read_exact(&mut buf)?;
        let vector: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        rows.push((name, vector));
    }
    Ok((dim, rows))
}

/// artist_id -> embedding row, all rows the same width.
#[derive(Debug, Clone, Default)]
pub struct BioEmbeddingTable {
    pub dim: usize,
    names: Vec<String>,
    vectors: Vec<f64>, // row-major [count x dim]
}

impl BioEmbeddingTable {
    pub fn new(dim: usize) -> Self {
        BioEmbeddingTable { dim, names: Vec::new(), vectors: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn push(&mut self, artist_id: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape(
                "bio table",
                format!("vector of {} values in a dim-{} table", vector.len(), self.dim),
            ));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bio vector for {artist_id}")));
        }
        self.names.push(artist_id.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vector_by_row(&self, row: usize) -> Option<&[f64]> {
        if row >= self.names.len() {
            return None;
        }
        Some(&self.vectors[row * self.dim..(row + 1) * self.dim])
    }
}

pub fn write_bioe(path: &Path, table: &BioEmbeddingTable) -> Result<()> {
    let rows: Vec<(String, Vec<f64>)> = table
        .names
        .iter()
        .enumerate()
        .map(|(row, name)| (name.clone(), table.vector_by_row(row).expect("row in range").to_vec()))
        .collect();
    write_keyed_vectors(path, MAGIC, table.dim, &rows)
}

pub fn read_bioe(path: &Path) -> Result<BioEmbeddingTable> {
    let (dim, rows) = read_keyed_vectors(path, MAGIC)?;
    let mut table = BioEmbeddingTable::new(dim);
    for (name, vector) in rows {
        table.push(&name, &vector)?;
    }
    Ok(table)
}

/// Artist-name normalizer: lowercase, fold common Latin diacritics, replace
/// punctuation with spaces, collapse whitespace.
pub fn normalize_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for c in name.to_lowercase().chars() {
        let folded: &str = match c {
            'à' | 'á' | 'â' | 'ã' | 'ä' | 'å' | 'ā' | 'ă' => "a",
            'è' | 'é' | 'ê' | 'ë' | 'ē' | 'ė' => "e",
            'ì' | 'í' | 'î' | 'ï' | 'ī' => "i",
            'ò' | 'ó' | 'ô' | 'õ' | 'ö' | 'ø' | 'ō' => "o",
            'ù' | 'ú' | 'û' | 'ü' | 'ū' => "u",
            'ñ' | 'ń' => "n",
            'ç' | 'ć' | 'č' => "c",
            'ś' | 'š' => "s",
            'ž' | 'ź' | 'ż' => "z",
            'ý' | 'ÿ' => "y",
            'æ' => "ae",
            'œ' => "oe",
            'ß' => "ss",
            'đ' => "d",
            'ł' => "l",
            c if c.is_alphanumeric() => {
                out.push(c);
                continue;
            }
            _ => " ",
        };
        out.push_str(folded);
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Attach `bio_embedding_ref` to every track whose normalized artist name
/// appears in the table. Unmatched tracks keep a null ref (they stay usable
/// for audio-only training). Returns the number of matched tracks.
pub fn match_bios(tracks: &mut [TrackRecord], bios: &BioEmbeddingTable) -> usize {
    let mut by_name: HashMap<String, usize> = HashMap::new();
    for (row, name) in bios.names().iter().enumerate() {
        by_name.entry(normalize_name(name)).or_insert(row);
    }
    let mut matched = 0usize;
    for track in tracks.iter_mut() {
        match by_name.get(&normalize_name(&track.artist_id)) {
            Some(&row) => {
                track.bio_embedding_ref = Some(row);
                matched += 1;
            }
            None => track.bio_embedding_ref = None,
        }
    }
    if matched == 0 && !tracks.is_empty() {
        log::warn!("match_bios: 0 of {} tracks matched a biography", tracks.len());
    }
    matched
}
