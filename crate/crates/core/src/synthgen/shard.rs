//! Binary dataset shards with a plain-text manifest.
//!
//! Layout (little-endian): `"ACLP"`, u32 version, u32 clip count, then per
//! clip u32 T, H, W; T·H·W·3 RGB bytes; T·H·W sketch bytes; u32 reference
//! index; u32 caption length; caption ids as u16. The manifest has one line
//! per clip: `offset<TAB>seed<TAB>split`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataItem, Split, VideoClip};
use crate::error::{Error, Result};
use crate::fsio::{write_atomic, ByteReader};

pub const MAGIC: &[u8; 4] = b"ACLP";
pub const VERSION: u32 = 1;

/// Path of the manifest that accompanies `shard`.
pub fn manifest_path(shard: &Path) -> PathBuf {
    let mut name = shard.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest");
    shard.with_file_name(name)
}

fn encode_clip(out: &mut Vec<u8>, c: &VideoClip) {
    for v in [c.frames, c.height, c.width] {
        out.extend((v as u32).to_le_bytes());
    }
    out.extend(&c.rgb);
    out.extend(&c.sketch);
    out.extend((c.reference_index as u32).to_le_bytes());
    out.extend((c.caption.len() as u32).to_le_bytes());
    for id in &c.caption {
        out.extend(id.to_le_bytes());
    }
}

/// Encodes the shard bytes and manifest text.
pub fn encode(items: &[DataItem]) -> (Vec<u8>, String) {
    let mut bytes = Vec::new();
    bytes.extend(MAGIC);
    bytes.extend(VERSION.to_le_bytes());
    bytes.extend((items.len() as u32).to_le_bytes());
    let mut manifest = String::new();
    for it in items {
        manifest.push_str(&format!("{}\t{}\t{}\n", bytes.len(), it.seed, it.split.tag()));
        encode_clip(&mut bytes, &it.clip);
    }
    (bytes, manifest)
}

pub fn write_shard(path: &Path, items: &[DataItem]) -> Result<()> {
    let (bytes, manifest) = encode(items);
    write_atomic(path, &bytes)?;
    write_atomic(&manifest_path(path), manifest.as_bytes())
}

fn decode_clip(r: &mut ByteReader) -> Result<VideoClip> {
    let frames = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n = frames
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&v| v <= r.remaining())
        .ok_or_else(|| Error::Format(format!("clip dims {frames}x{height}x{width} exceed shard")))?;
    let rgb = r.take(n * 3)?.to_vec();
    let sketch = r.take(n)?.to_vec();
    let reference_index = r.u32()? as usize;
    if reference_index >= frames {
        return Err(Error::Format(format!(
            "reference index {reference_index} outside {frames} frames"
        )));
    }
    let len = r.u32()? as usize;
    let caption = (0..len).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
    Ok(VideoClip {
        frames,
        height,
        width,
        rgb,
        sketch,
        caption,
        reference_index,
    })
}

/// Decodes shard bytes plus manifest text, checking that they agree.
pub fn decode(bytes: &[u8], manifest: &str) -> Result<Vec<DataItem>> {
    let mut r = ByteReader::new(bytes, "dataset shard");
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported shard version {version}")));
    }
    let count = r.u32()? as usize;
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != count {
        return Err(Error::Format(format!(
            "manifest lists {} clips, shard holds {count}",
            lines.len()
        )));
    }
    let mut items = Vec::with_capacity(count);
    for (i, line) in lines.iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("manifest line {}: `{line}`", i + 1)));
        }
        let offset: usize = f[0]
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {}: bad offset", i + 1)))?;
        let seed: u64 = f[1]
            .parse()
            .map_err(|_| Error::Format(format!("manifest line {}: bad seed", i + 1)))?;
        let split = Split::parse(f[2])?;
        if offset != r.pos() {
            return Err(Error::Format(format!(
                "manifest line {} points at byte {offset}, clip starts at {}",
                i + 1,
                r.pos()
            )));
        }
        items.push(DataItem {
            seed,
            split,
            clip: decode_clip(&mut r)?,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in shard", r.remaining())));
    }
    Ok(items)
}

pub fn read_shard(path: &Path) -> Result<Vec<DataItem>> {
    let bytes = fs::read(path)?;
    let manifest = fs::read_to_string(manifest_path(path))?;
    decode(&bytes, &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_split, GenConfig};

    #[test]
    fn shard_roundtrip() {
        let items = generate_split(&GenConfig::default(), 5, Split::Test, 3).unwrap();
        let (bytes, manifest) = encode(&items);
        assert_eq!(&bytes[..4], b"ACLP");
        let back = decode(&bytes, &manifest).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in items.iter().zip(&back) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.split, b.split);
            assert_eq!(a.clip, b.clip);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("test.aclp");
        write_shard(&p, &items).unwrap();
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 2);
        assert_eq!(read_shard(&p).unwrap()[2].clip, items[2].clip);
    }

    #[test]
    fn corrupt_shards_are_rejected() {
        let items = generate_split(&GenConfig::default(), 5, Split::Train, 2).unwrap();
        let (bytes, manifest) = encode(&items);
        assert!(decode(&bytes[..bytes.len() - 1], &manifest).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, &manifest).is_err());
        let one_line: String = manifest.lines().next().unwrap().to_string();
        assert!(decode(&bytes, &one_line).is_err());
    }
}
