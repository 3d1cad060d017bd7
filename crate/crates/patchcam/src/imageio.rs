//! Netpbm grayscale/color IO and the dataset directory convention
//! `root/<class>/<name>.pgm` with optional `<name>.mask.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use patchcam_core::{Dataset, Sample, Tensor};

use crate::error::{Error, Result};

const MASK_SUFFIX: &str = ".mask.pgm";

/// Maps a value in [0, 1] to a byte with round-half-up.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor() as u8
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if self.pos >= self.bytes.len() {
                format!("truncated file while reading {what}")
            } else {
                format!("malformed {what}")
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("{what} out of range"))
    }
}

/// Decodes a P2 or P5 graymap into a `1 x h x w` tensor scaled by `v / maxval`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err("not a PGM file (expected P2 or P5 magic)".into()),
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (only 1..=255)"));
    }
    let n = width * height;
    let raw: Vec<usize> = if binary {
        match bytes.get(hdr.pos) {
            Some(b) if b.is_ascii_whitespace() => {}
            _ => return Err("missing whitespace after maxval".into()),
        }
        let data = &bytes[hdr.pos + 1..];
        if data.len() < n {
            return Err(format!("truncated raster: expected {n} bytes, found {}", data.len()));
        }
        data[..n].iter().map(|&b| b as usize).collect()
    } else {
        (0..n)
            .map(|_| hdr.number("pixel"))
            .collect::<std::result::Result<_, _>>()?
    };
    if let Some(v) = raw.iter().find(|&&v| v > maxval) {
        return Err(format!("pixel value {v} exceeds maxval {maxval}"));
    }
    let m = maxval as f64;
    Tensor::new(vec![1, height, width], raw.iter().map(|&v| v as f64 / m).collect()).map_err(|e| e.to_string())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|m| Error::format(path, m))
}

fn gray_dims(image: &Tensor) -> std::result::Result<(usize, usize), String> {
    match *image.shape() {
        [1, h, w] => Ok((h, w)),
        ref s => Err(format!("expected a 1 x h x w image, got shape {s:?}")),
    }
}

fn unit_range(image: &Tensor, what: &str) -> std::result::Result<(), String> {
    match image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(format!("{what} value {v} outside [0, 1]")),
        None => Ok(()),
    }
}

/// Binary P5 bytes: header `P5\n<w> <h>\n255\n` followed by the raster.
pub fn encode_pgm(image: &Tensor) -> std::result::Result<Vec<u8>, String> {
    let (h, w) = gray_dims(image)?;
    unit_range(image, "pixel")?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write_pgm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(image).map_err(|m| Error::format(path, m))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// P6 overlay: red carries the heatmap, all channels carry the dimmed base.
pub fn encode_overlay_ppm(base: &Tensor, heat: &Tensor, alpha: f64) -> std::result::Result<Vec<u8>, String> {
    let (h, w) = gray_dims(base)?;
    if gray_dims(heat)? != (h, w) {
        return Err(format!("heatmap is {:?} but image is {:?}", heat.shape(), base.shape()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(format!("alpha {alpha} outside [0, 1]"));
    }
    unit_range(base, "pixel")?;
    unit_range(heat, "heatmap")?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (&b, &m) in base.data().iter().zip(heat.data()) {
        let dim = (1.0 - alpha) * b;
        let g = quantize(dim);
        out.extend([quantize(dim + alpha * m), g, g]);
    }
    Ok(out)
}

pub fn write_overlay_ppm(base: &Tensor, heat: &Tensor, path: impl AsRef<Path>, alpha: f64) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_overlay_ppm(base, heat, alpha).map_err(|m| Error::format(path, m))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(path: &Path) -> &str {
    path.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

/// Loads `root/<class>/*.pgm` with classes and files in sorted order.
/// `<stem>.mask.pgm` files become masks of the matching image, binarized
/// at 0.5.
pub fn load_dataset_dir(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{}: no class subdirectories", root.display())));
    }
    let class_names: Vec<String> = class_dirs.iter().map(|p| file_name(p).to_string()).collect();
    let mut data = Dataset::new(class_names);
    for (label, dir) in class_dirs.iter().enumerate() {
        let images: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| {
                let name = file_name(p);
                p.is_file() && name.ends_with(".pgm") && !name.ends_with(MASK_SUFFIX)
            })
            .collect();
        if images.is_empty() {
            return Err(Error::Data(format!("{}: no .pgm images", dir.display())));
        }
        for path in images {
            let image = read_pgm(&path)?;
            let name = file_name(&path);
            let mask_path = dir.join(format!("{}{MASK_SUFFIX}", &name[..name.len() - 4]));
            let mask = if mask_path.is_file() {
                let m = read_pgm(&mask_path)?;
                if m.shape() != image.shape() {
                    return Err(Error::Data(format!(
                        "mask {} is {:?} but image {} is {:?}",
                        mask_path.display(),
                        m.shape(),
                        path.display(),
                        image.shape()
                    )));
                }
                Some(m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
            } else {
                None
            };
            data.samples.push(Sample { image, label, mask });
        }
    }
    Ok(data)
}

/// Writes `root/<class>/<class>_<nnnnn>.pgm`, plus `.mask.pgm` for masked
/// samples. Numbering counts within each class.
pub fn write_dataset_dir(data: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let mut counters = vec![0usize; data.class_names.len()];
    for name in &data.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in &data.samples {
        let class = data
            .class_names
            .get(s.label)
            .ok_or_else(|| Error::Data(format!("label {} has no class name", s.label)))?;
        let stem = format!("{class}_{:05}", counters[s.label]);
        counters[s.label] += 1;
        let dir = root.join(class);
        write_pgm(&s.image, dir.join(format!("{stem}.pgm")))?;
        if let Some(mask) = &s.mask {
            write_pgm(mask, dir.join(format!("{stem}{MASK_SUFFIX}")))?;
        }
    }
    Ok(())
}
