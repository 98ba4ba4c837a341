//! SEGV1 binary sample/volume files and the plain-text manifest.
//!
//! SEGV1 layout, little-endian throughout:
//!
//! ```text
//! magic   4 bytes          "SEGV"
//! version u8               0x01
//! roles   u8               number of role blocks (>= 1)
//! image   block            dtype 1 (f32)
//! role*   u8 name len, name bytes (UTF-8), block, sorted by name
//!
//! block := dtype u8 (0 = u8 mask, 1 = f32 image)
//!          ndim  u8 (2 for samples, 3 for volumes)
//!          dims  ndim x u32
//!          payload, row-major
//! ```
//!
//! The case id is the file stem; it is not stored in the payload.
//!
//! Manifest grammar (UTF-8, LF): `#` comment lines anywhere; `key = value`
//! header lines (`dataset`, `seed`, and `param.*` echoes); a `[cases]`
//! marker; then one `<case_id> <split>` row per case, whitespace-separated.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{DatasetManifest, Sample, Split, Volume3D};
use crate::error::{Error, Result};
use crate::geometry::Mask2D;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SEGV";
const VERSION: u8 = 0x01;
const DTYPE_MASK: u8 = 0;
const DTYPE_IMAGE: u8 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                field,
                format!(
                    "file truncated: needed {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn write_block_header(out: &mut Vec<u8>, dtype: u8, dims: &[usize]) {
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn read_block_header(r: &mut Reader, what: &str, want_ndim: u8) -> Result<(u8, Vec<usize>)> {
    let dtype = r.u8(&format!("{what}.dtype"))?;
    if dtype != DTYPE_MASK && dtype != DTYPE_IMAGE {
        return Err(Error::parse(
            format!("{what}.dtype"),
            format!("unknown dtype code {dtype}"),
        ));
    }
    let ndim = r.u8(&format!("{what}.ndim"))?;
    if ndim != want_ndim {
        return Err(Error::parse(
            format!("{what}.ndim"),
            format!("expected {want_ndim}, got {ndim}"),
        ));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 0..ndim {
        let d = r.u32(&format!("{what}.dims[{i}]"))? as usize;
        if d == 0 {
            return Err(Error::parse(
                format!("{what}.dims[{i}]"),
                "zero dimension".to_string(),
            ));
        }
        dims.push(d);
    }
    Ok((dtype, dims))
}

fn read_f32_payload(r: &mut Reader, what: &str, n: usize) -> Result<Vec<f32>> {
    let bytes = r.take(4 * n, &format!("{what}.payload"))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn role_name(r: &mut Reader, idx: u8) -> Result<String> {
    let len = r.u8(&format!("role[{idx}].name_len"))? as usize;
    if len == 0 {
        return Err(Error::parse(
            format!("role[{idx}].name_len"),
            "empty role name".to_string(),
        ));
    }
    let bytes = r.take(len, &format!("role[{idx}].name"))?;
    String::from_utf8(bytes.to_vec())
        .map_err(|e| Error::parse(format!("role[{idx}].name"), format!("invalid UTF-8: {e}")))
}

fn encode_sample(sample: &Sample) -> Result<Vec<u8>> {
    sample.validate()?;
    if sample.masks.len() > u8::MAX as usize {
        return Err(Error::Validation("more than 255 roles".into()));
    }
    let (h, w) = (sample.height(), sample.width());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(sample.masks.len() as u8);
    write_block_header(&mut out, DTYPE_IMAGE, &[h, w]);
    for &v in sample.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (role, mask) in &sample.masks {
        if role.len() > u8::MAX as usize {
            return Err(Error::Validation(format!("role name too long: {role}")));
        }
        out.push(role.len() as u8);
        out.extend_from_slice(role.as_bytes());
        write_block_header(&mut out, DTYPE_MASK, &[h, w]);
        out.extend_from_slice(mask.values());
    }
    Ok(out)
}

/// Write a sample as a SEGV1 file. The case id becomes the file stem.
pub fn write_sample(sample: &Sample, path: &Path) -> Result<()> {
    let bytes = encode_sample(sample)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn decode_sample(bytes: &[u8], case_id: &str) -> Result<Sample> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::parse("magic", format!("expected SEGV, got {magic:?}")));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::parse("version", format!("unsupported version {version}")));
    }
    let roles = r.u8("role_count")?;
    if roles == 0 {
        return Err(Error::parse("role_count", "must be >= 1".to_string()));
    }
    let (dtype, dims) = read_block_header(&mut r, "image", 2)?;
    if dtype != DTYPE_IMAGE {
        return Err(Error::parse("image.dtype", format!("expected f32 (1), got {dtype}")));
    }
    let (h, w) = (dims[0], dims[1]);
    let image = read_f32_payload(&mut r, "image", h * w)?;
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse("image.payload", "non-finite value".to_string()));
    }

    let mut masks = BTreeMap::new();
    for i in 0..roles {
        let name = role_name(&mut r, i)?;
        let (dtype, mdims) = read_block_header(&mut r, &format!("role[{i}].block"), 2)?;
        if dtype != DTYPE_MASK {
            return Err(Error::parse(
                format!("role[{i}].block.dtype"),
                format!("expected mask (0), got {dtype}"),
            ));
        }
        if mdims != dims {
            return Err(Error::parse(
                format!("role[{i}].block.dims"),
                format!("mask dims {mdims:?} differ from image dims {dims:?}"),
            ));
        }
        let payload = r.take(h * w, &format!("role[{i}].block.payload"))?;
        let mask = Mask2D::new(h, w, payload.to_vec()).map_err(|e| match e {
            Error::Validation(msg) => Error::parse(format!("role[{i}].block.payload"), msg),
            other => other,
        })?;
        if masks.insert(name.clone(), mask).is_some() {
            return Err(Error::parse(
                format!("role[{i}].name"),
                format!("duplicate role '{name}'"),
            ));
        }
    }
    if !r.done() {
        return Err(Error::parse(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        ));
    }
    let sample = Sample {
        case_id: case_id.to_string(),
        image: Tensor::new(vec![h, w], image)?,
        masks,
    };
    sample.validate().map_err(|e| match e {
        Error::Validation(msg) => Error::parse("sample", msg),
        other => other,
    })?;
    Ok(sample)
}

/// Read a SEGV1 sample; the case id is taken from the file stem.
pub fn read_sample(path: &Path) -> Result<Sample> {
    let case_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::parse("path", format!("no file stem in {}", path.display())))?
        .to_string();
    let bytes = std::fs::read(path)?;
    decode_sample(&bytes, &case_id)
}

/// Write a labeled volume in the SEGV1 container with 3-D blocks.
pub fn write_volume(volume: &Volume3D, path: &Path) -> Result<()> {
    volume.validate()?;
    if volume.masks.len() > u8::MAX as usize {
        return Err(Error::Validation("more than 255 roles".into()));
    }
    let dims = [volume.depth, volume.height, volume.width];
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(volume.masks.len() as u8);
    write_block_header(&mut out, DTYPE_IMAGE, &dims);
    for &v in &volume.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (role, m) in &volume.masks {
        out.push(role.len() as u8);
        out.extend_from_slice(role.as_bytes());
        write_block_header(&mut out, DTYPE_MASK, &dims);
        out.extend_from_slice(m);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read a SEGV1 volume (3-D blocks); the case id is the file stem.
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let case_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::parse("path", format!("no file stem in {}", path.display())))?
        .to_string();
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::parse("magic", format!("expected SEGV, got {magic:?}")));
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::parse("version", format!("unsupported version {version}")));
    }
    let roles = r.u8("role_count")?;
    if roles == 0 {
        return Err(Error::parse("role_count", "must be >= 1".to_string()));
    }
    let (dtype, dims) = read_block_header(&mut r, "image", 3)?;
    if dtype != DTYPE_IMAGE {
        return Err(Error::parse("image.dtype", format!("expected f32 (1), got {dtype}")));
    }
    let n = dims[0] * dims[1] * dims[2];
    let image = read_f32_payload(&mut r, "image", n)?;
    let mut masks = BTreeMap::new();
    for i in 0..roles {
        let name = role_name(&mut r, i)?;
        let (dtype, mdims) = read_block_header(&mut r, &format!("role[{i}].block"), 3)?;
        if dtype != DTYPE_MASK {
            return Err(Error::parse(
                format!("role[{i}].block.dtype"),
                format!("expected mask (0), got {dtype}"),
            ));
        }
        if mdims != dims {
            return Err(Error::parse(
                format!("role[{i}].block.dims"),
                format!("mask dims {mdims:?} differ from image dims {dims:?}"),
            ));
        }
        let payload = r.take(n, &format!("role[{i}].block.payload"))?.to_vec();
        if let Some(v) = payload.iter().find(|&&v| v > 1) {
            return Err(Error::parse(
                format!("role[{i}].block.payload"),
                format!("mask not binary: value {v}"),
            ));
        }
        masks.insert(name, payload);
    }
    if !r.done() {
        return Err(Error::parse(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        ));
    }
    let volume = Volume3D {
        case_id,
        depth: dims[0],
        height: dims[1],
        width: dims[2],
        image,
        masks,
    };
    volume.validate()?;
    Ok(volume)
}

/// Render a manifest in the documented text grammar.
pub fn manifest_to_text(manifest: &DatasetManifest) -> String {
    let mut out = String::from("# promptseg manifest v1\n");
    out.push_str(&format!("dataset = {}\n", manifest.dataset));
    out.push_str(&format!("seed = {}\n", manifest.seed));
    for (k, v) in &manifest.params {
        out.push_str(&format!("param.{k} = {v}\n"));
    }
    out.push_str("[cases]\n");
    for (id, split) in &manifest.entries {
        out.push_str(&format!("{id} {}\n", split.as_str()));
    }
    out
}

/// Parse the manifest text grammar.
pub fn manifest_from_text(text: &str) -> Result<DatasetManifest> {
    let mut dataset = None;
    let mut seed = None;
    let mut params = BTreeMap::new();
    let mut entries = Vec::new();
    let mut in_cases = false;

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "[cases]" {
            in_cases = true;
            continue;
        }
        if !in_cases {
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    format!("manifest line {}", ln + 1),
                    format!("expected 'key = value', got '{line}'"),
                )
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "dataset" => dataset = Some(value.to_string()),
                "seed" => {
                    seed = Some(value.parse().map_err(|e| {
                        Error::parse(format!("manifest line {} (seed)", ln + 1), format!("{e}"))
                    })?)
                }
                k if k.starts_with("param.") => {
                    params.insert(k["param.".len()..].to_string(), value.to_string());
                }
                other => {
                    return Err(Error::parse(
                        format!("manifest line {}", ln + 1),
                        format!("unknown key '{other}'"),
                    ))
                }
            }
        } else {
            let mut it = line.split_whitespace();
            let id = it.next().ok_or_else(|| {
                Error::parse(format!("manifest line {}", ln + 1), "missing case_id".to_string())
            })?;
            let split = it.next().ok_or_else(|| {
                Error::parse(format!("manifest line {}", ln + 1), "missing split".to_string())
            })?;
            if it.next().is_some() {
                return Err(Error::parse(
                    format!("manifest line {}", ln + 1),
                    "trailing fields after split".to_string(),
                ));
            }
            entries.push((id.to_string(), Split::parse(split)?));
        }
    }

    let manifest = DatasetManifest {
        dataset: dataset
            .ok_or_else(|| Error::parse("manifest", "missing 'dataset' key".to_string()))?,
        seed: seed.ok_or_else(|| Error::parse("manifest", "missing 'seed' key".to_string()))?,
        entries,
        params,
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    std::fs::write(path, manifest_to_text(manifest))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    manifest_from_text(&text)
}
