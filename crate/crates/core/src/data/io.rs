//! Sample files and dataset directories.
//!
//! Layout: `<root>/<modality>/<index>.pxm` plus `<root>/<modality>/manifest.txt`.
//!
//! Each sample file is a 32-byte little-endian header
//! (`magic "PXM1"`, `version`, `height`, `width`, `num_classes`, 12 reserved
//! zero bytes) followed by the image as row-major `f32` and the label map
//! as row-major `u8`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, LabelMap, LabeledSample, Modality};
use crate::error::{Error, Result};

pub const SAMPLE_EXT: &str = "pxm";
pub const MANIFEST_FILE: &str = "manifest.txt";

const MAGIC: &[u8; 4] = b"PXM1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

pub fn encode_sample(s: &LabeledSample, num_classes: usize) -> Vec<u8> {
    let (h, w) = (s.height(), s.width());
    let mut out = Vec::with_capacity(HEADER_LEN + h * w * 5);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, h as u32, w as u32, num_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.resize(HEADER_LEN, 0);
    for v in &s.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.label.data);
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes a sample file. Returns the sample and the class count recorded
/// in its header.
pub fn decode_sample(bytes: &[u8], file: &Path, modality: Modality) -> Result<(LabeledSample, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(file, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(file, "bad magic"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::format(file, format!("unsupported version {version}")));
    }
    let h = u32_at(bytes, 8) as usize;
    let w = u32_at(bytes, 12) as usize;
    let num_classes = u32_at(bytes, 16) as usize;
    if bytes[20..HEADER_LEN].iter().any(|&b| b != 0) {
        return Err(Error::format(file, "nonzero reserved header bytes"));
    }
    if h == 0 || w == 0 || num_classes < 2 {
        return Err(Error::format(file, format!("invalid header {h}x{w}, {num_classes} classes")));
    }
    let n = h * w;
    let expected = HEADER_LEN + n * 4 + n;
    if bytes.len() != expected {
        return Err(Error::format(
            file,
            format!("expected {expected} bytes for {h}x{w}, found {}", bytes.len()),
        ));
    }
    let image: Vec<f32> = bytes[HEADER_LEN..HEADER_LEN + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let label = bytes[HEADER_LEN + 4 * n..].to_vec();
    if let Some(&bad) = label.iter().find(|&&c| c as usize >= num_classes) {
        return Err(Error::format(
            file,
            format!("label value {bad} not below num_classes {num_classes}"),
        ));
    }
    let sample = LabeledSample::new(image, LabelMap::new(h, w, label), modality)
        .map_err(|e| Error::format(file, e.to_string()))?;
    Ok((sample, num_classes))
}

pub fn write_sample(path: &Path, s: &LabeledSample, num_classes: usize) -> Result<()> {
    fs::write(path, encode_sample(s, num_classes)).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path, modality: Modality) -> Result<(LabeledSample, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes, path, modality)
}

fn sample_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}.{SAMPLE_EXT}"))
}

/// Writes `d` under `<root>/<modality>/` and returns that directory.
pub fn write_dataset(d: &Dataset, root: &Path) -> Result<PathBuf> {
    let dir = root.join(d.modality().as_str());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, s) in d.samples().iter().enumerate() {
        write_sample(&sample_path(&dir, i), s, d.num_classes())?;
    }
    let image_size = d.shape().map(|(h, _)| h).unwrap_or(0);
    let manifest = format!(
        "num_classes={}\nimage_size={}\ncount={}\nmodality={}\n",
        d.num_classes(),
        image_size,
        d.len(),
        d.modality()
    );
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(dir)
}

struct Manifest {
    num_classes: usize,
    image_size: usize,
    count: usize,
    modality: Modality,
}

fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut num_classes = None;
    let mut image_size = None;
    let mut count = None;
    let mut modality = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let int = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::format(path, format!("`{key}` is not an integer: {value}")))
        };
        match key {
            "num_classes" => num_classes = Some(int()?),
            "image_size" => image_size = Some(int()?),
            "count" => count = Some(int()?),
            "modality" => {
                modality = Some(
                    Modality::parse(value)
                        .ok_or_else(|| Error::format(path, format!("unknown modality {value}")))?,
                )
            }
            other => return Err(Error::format(path, format!("unknown key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::format(path, format!("missing `{k}`"));
    Ok(Manifest {
        num_classes: num_classes.ok_or_else(|| missing("num_classes"))?,
        image_size: image_size.ok_or_else(|| missing("image_size"))?,
        count: count.ok_or_else(|| missing("count"))?,
        modality: modality.ok_or_else(|| missing("modality"))?,
    })
}

/// Reads the dataset stored under `<root>/<modality>/`.
pub fn read_dataset(root: &Path, modality: Modality) -> Result<Dataset> {
    let dir = root.join(modality.as_str());
    let mpath = dir.join(MANIFEST_FILE);
    let manifest = parse_manifest(&mpath)?;
    if manifest.modality != modality {
        return Err(Error::format(
            &mpath,
            format!("manifest says {}, directory is {modality}", manifest.modality),
        ));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let path = sample_path(&dir, i);
        if !path.is_file() {
            return Err(Error::format(&path, "missing sample file"));
        }
        let (s, classes) = read_sample(&path, modality)?;
        if classes != manifest.num_classes {
            return Err(Error::format(
                &path,
                format!(
                    "header has {classes} classes, manifest has {}",
                    manifest.num_classes
                ),
            ));
        }
        if s.height() != manifest.image_size || s.width() != manifest.image_size {
            return Err(Error::format(
                &path,
                format!(
                    "sample is {}x{}, manifest image_size is {}",
                    s.height(),
                    s.width(),
                    manifest.image_size
                ),
            ));
        }
        samples.push(s);
    }
    Dataset::new(samples, modality, manifest.num_classes).map_err(|e| Error::format(&dir, e.to_string()))
}
