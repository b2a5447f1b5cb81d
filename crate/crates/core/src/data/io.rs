//! Binary PPM (P6) images, PGM (P5) masks and the dataset index file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::scene::{LabeledScene, NUM_BG_CLASSES, NUM_FG_CLASSES};
use crate::crop::SaliencyMask;
use crate::error::{CastError, Result};
use crate::image::{to_byte, Image};

pub const INDEX_FILE: &str = "index.txt";

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for y in 0..image.height {
        for x in 0..image.width {
            out.extend(image.pixel(y, x).map(to_byte));
        }
    }
    out
}

pub fn encode_pgm(mask: &SaliencyMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.bits().iter().map(|&b| b * 255));
    out
}

/// Grey PGM of arbitrary 8-bit values.
pub fn encode_gray(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// PPM of interleaved RGB bytes.
pub fn encode_rgb(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

struct Header<'a> {
    width: usize,
    height: usize,
    body: &'a [u8],
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 2], path: &Path) -> Result<Header<'a>> {
    let bad = |msg: &str| CastError::format(path, msg.to_string());
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(&format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} is not 255")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image extent"));
    }
    Ok(Header {
        width,
        height,
        body: &bytes[pos + 1..],
    })
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let h = parse_header(bytes, b"P6", path)?;
    if h.body.len() != 3 * h.width * h.height {
        return Err(CastError::format(
            path,
            format!("{} pixel bytes for a {}x{} image", h.body.len(), h.width, h.height),
        ));
    }
    let mut img = Image::filled(h.height, h.width, 0.0);
    for (i, px) in h.body.chunks_exact(3).enumerate() {
        img.set_pixel(i / h.width, i % h.width, [0, 1, 2].map(|c| px[c] as f32 / 255.0));
    }
    Ok(img)
}

pub fn decode_pgm_mask(bytes: &[u8], path: &Path) -> Result<SaliencyMask> {
    let h = parse_header(bytes, b"P5", path)?;
    if h.body.len() != h.width * h.height {
        return Err(CastError::format(
            path,
            format!("{} pixel bytes for a {}x{} mask", h.body.len(), h.width, h.height),
        ));
    }
    let bits = h
        .body
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(CastError::format(path, format!("mask value {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    SaliencyMask::new(h.height, h.width, bits)
}

pub fn save_scene(dir: &Path, name: &str, scene: &LabeledScene) -> Result<()> {
    fs::write(dir.join(format!("{name}.ppm")), encode_ppm(&scene.image))?;
    fs::write(dir.join(format!("{name}.pgm")), encode_pgm(&scene.mask))?;
    Ok(())
}

/// Reads an image/mask pair and checks that their extents agree.
pub fn load_pair(dir: &Path, name: &str) -> Result<(Image, SaliencyMask)> {
    let ppm = dir.join(format!("{name}.ppm"));
    let pgm = dir.join(format!("{name}.pgm"));
    let image = decode_ppm(&fs::read(&ppm)?, &ppm)?;
    let mask = decode_pgm_mask(&fs::read(&pgm)?, &pgm)?;
    if image.height != mask.height || image.width != mask.width {
        return Err(CastError::format(
            &pgm,
            format!(
                "mask is {}x{} but image is {}x{}",
                mask.width, mask.height, image.width, image.height
            ),
        ));
    }
    Ok((image, mask))
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:05}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub name: String,
    pub fg_class: usize,
    pub bg_class: usize,
}

/// Writes every scene plus an index file with one `name fg_class bg_class`
/// line per scene.
pub fn write_dataset(dir: &Path, scenes: &[LabeledScene]) -> Result<Vec<IndexEntry>> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let name = scene_name(i);
        save_scene(dir, &name, scene)?;
        index.push(IndexEntry {
            name,
            fg_class: scene.fg_class,
            bg_class: scene.bg_class,
        });
    }
    write_index(dir, &index)?;
    Ok(index)
}

pub fn write_index(dir: &Path, index: &[IndexEntry]) -> Result<()> {
    let mut f = fs::File::create(dir.join(INDEX_FILE))?;
    for e in index {
        writeln!(f, "{} {} {}", e.name, e.fg_class, e.bg_class)?;
    }
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path: PathBuf = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || CastError::format(&path, format!("line {}: expected `name fg_class bg_class`", n + 1));
            let [name, fg, bg] = parts.as_slice() else {
                return Err(bad());
            };
            let fg_class: usize = fg.parse().map_err(|_| bad())?;
            let bg_class: usize = bg.parse().map_err(|_| bad())?;
            if fg_class >= NUM_FG_CLASSES || bg_class >= NUM_BG_CLASSES {
                return Err(CastError::format(&path, format!("line {}: class id out of range", n + 1)));
            }
            Ok(IndexEntry {
                name: name.to_string(),
                fg_class,
                bg_class,
            })
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledScene>> {
    read_index(dir)?
        .into_iter()
        .map(|e| {
            let (image, mask) = load_pair(dir, &e.name)?;
            Ok(LabeledScene {
                image,
                mask,
                fg_class: e.fg_class,
                bg_class: e.bg_class,
            })
        })
        .collect()
}
