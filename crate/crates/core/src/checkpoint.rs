//! Little-endian named-tensor container.
//!
//! ```text
//! magic "CASTCKPT" | version u32 | count u32 |
//!   count × ( name_len u16 | name | rank u8 | rank × extent u32 | f32 data )
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{CastError, Result};

pub const MAGIC: &[u8; 8] = b"CASTCKPT";
pub const VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| CastError::InvalidArgument(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| CastError::InvalidArgument(format!("rank too large for {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e)
                .map_err(|_| CastError::InvalidArgument(format!("extent too large in {name}")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> io::Result<&'a [u8]> {
    if buf.len() < n {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated checkpoint"));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<NamedTensors> {
    let bad = |msg: String| CastError::format(origin, msg);
    let mut buf = bytes;
    let mut read = |n: usize| take(&mut buf, n).map_err(|e| bad(e.to_string()));
    if read(8)? != MAGIC {
        return Err(bad("missing CASTCKPT magic".into()));
    }
    let version = u32::from_le_bytes(read(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(read(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read(len)?.to_vec()).map_err(|_| bad("non-UTF-8 tensor name".into()))?;
        let rank = read(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = read(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    if !buf.is_empty() {
        return Err(bad(format!("{} trailing bytes", buf.len())));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    // write then rename, so a killed process never leaves a truncated file
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NamedTensors> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes, path)
}
