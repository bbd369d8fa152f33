use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Scalar, Tensor};

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

impl<T: Scalar> Dataset<T> {
    /// Writes `<stem>.eqt` and, when labelled, `<stem>.labels`
    /// (`classes=K` followed by one label per line).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(with_ext(stem, ".eqt"))?);
        write_tensor(&mut out, &self.images)?;
        out.flush()?;
        if let Some(labels) = &self.labels {
            let mut out = BufWriter::new(File::create(with_ext(stem, ".labels"))?);
            writeln!(out, "classes={}", self.classes)?;
            for y in labels {
                writeln!(out, "{y}")?;
            }
            out.flush()?;
        }
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let images = read_tensor(&mut BufReader::new(File::open(with_ext(stem, ".eqt"))?))?;
        let label_path = with_ext(stem, ".labels");
        if !label_path.exists() {
            return Self::new(images, None, 0);
        }
        let text = fs::read_to_string(&label_path)?;
        let mut lines = text.lines();
        let classes = lines
            .next()
            .and_then(|l| l.strip_prefix("classes="))
            .and_then(|k| k.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("{} lacks a classes= header", label_path.display())))?;
        let labels = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad label {l:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        Self::new(images, Some(labels), classes)
    }
}

fn ppm_token<R: Read>(bytes: &mut std::iter::Peekable<std::io::Bytes<R>>) -> Result<usize> {
    let mut tok = String::new();
    while let Some(b) = bytes.next() {
        let b = b?;
        if b == b'#' {
            for c in bytes.by_ref() {
                if c? == b'\n' {
                    break;
                }
            }
        } else if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                break;
            }
        } else {
            tok.push(b as char);
        }
    }
    tok.parse()
        .map_err(|_| Error::Format(format!("bad PPM header field {tok:?}")))
}

/// Decodes a binary (`P6`, maxval 255) PPM into `[3, h, w]` with values
/// `byte / 255`.
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 2];
    reader.read_exact(&mut magic)?;
    if &magic != b"P6" {
        return Err(Error::Format(format!("{} is not a P6 PPM", path.display())));
    }
    let mut bytes = reader.bytes().peekable();
    let w = ppm_token(&mut bytes)?;
    let h = ppm_token(&mut bytes)?;
    let maxval = ppm_token(&mut bytes)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    let raw = bytes.take(w * h * 3).collect::<std::io::Result<Vec<u8>>>()?;
    if raw.len() != w * h * 3 {
        return Err(Error::Format(format!("truncated PPM {}", path.display())));
    }
    let plane = w * h;
    let data = (0..3 * plane)
        .map(|i| T::of(raw[(i % plane) * 3 + i / plane] as f64 / 255.0))
        .collect();
    Tensor::new(vec![3, h, w], data)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

fn is_ppm(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Imports square PPM images. Subdirectories of `dir` become classes in
/// name order; with no subdirectories the `.ppm` files form an unlabelled set.
pub fn import_ppm_dir<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let entries = sorted_entries(dir)?;
    let class_dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut files = Vec::new();
    let mut labels = Vec::new();
    if class_dirs.is_empty() {
        files.extend(entries.iter().filter(|p| is_ppm(p)).cloned());
    } else {
        for (k, d) in class_dirs.iter().enumerate() {
            for f in sorted_entries(d)?.into_iter().filter(|p| is_ppm(p)) {
                files.push(f);
                labels.push(k);
            }
        }
    }
    if files.is_empty() {
        return Err(Error::Format(format!("no PPM images under {}", dir.display())));
    }
    let images = files
        .iter()
        .map(|f| read_ppm::<T>(f))
        .collect::<Result<Vec<_>>>()?;
    let first = images[0].shape().to_vec();
    if let Some((f, t)) = files.iter().zip(&images).find(|(_, t)| t.shape() != first.as_slice()) {
        return Err(Error::Extent(format!(
            "{} is {:?}, expected {first:?}",
            f.display(),
            t.shape()
        )));
    }
    let stacked = Tensor::stack(&images)?;
    if class_dirs.is_empty() {
        Dataset::new(stacked, None, 0)
    } else {
        Dataset::new(stacked, Some(labels), class_dirs.len())
    }
}
