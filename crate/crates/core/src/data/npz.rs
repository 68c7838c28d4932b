//! NPY v1.0 arrays of `uint8` inside ZIP (`.npz`) archives.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use super::DataError;

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

/// A C-order `uint8` array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "npy shape/data length");
        NpyArray { shape, data }
    }
}

fn bad(member: &str, reason: impl Into<String>) -> DataError {
    DataError::BadNpy { member: member.to_string(), reason: reason.into() }
}

/// Value text following `'key':` in an NPY header dict.
fn header_value<'h>(header: &'h str, key: &str, member: &str) -> Result<&'h str, DataError> {
    let pattern = format!("'{key}'");
    let start = header.find(&pattern).ok_or_else(|| bad(member, format!("header lacks {pattern}")))?;
    let rest = header[start + pattern.len()..].trim_start();
    let rest = rest.strip_prefix(':').ok_or_else(|| bad(member, format!("malformed {pattern} entry")))?;
    Ok(rest.trim_start())
}

/// Parse an NPY v1.0 byte image holding a `uint8` array.
pub fn parse_npy(bytes: &[u8], member: &str) -> Result<NpyArray, DataError> {
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(bad(member, "missing \\x93NUMPY magic"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(DataError::UnsupportedVersion { member: member.to_string(), major, minor });
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header_end = 10 + header_len;
    if bytes.len() < header_end {
        return Err(bad(member, "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..header_end]).map_err(|_| bad(member, "header is not ASCII"))?;

    let descr = header_value(header, "descr", member)?;
    let quote = descr.chars().next().filter(|c| *c == '\'' || *c == '"').ok_or_else(|| bad(member, "descr"))?;
    let descr = descr[1..].split(quote).next().unwrap_or_default();
    if !matches!(descr, "|u1" | "<u1" | ">u1" | "u1") {
        return Err(DataError::UnsupportedDtype { member: member.to_string(), descr: descr.to_string() });
    }

    let fortran = header_value(header, "fortran_order", member)?;
    if fortran.starts_with("True") {
        return Err(DataError::FortranOrder { member: member.to_string() });
    }
    if !fortran.starts_with("False") {
        return Err(bad(member, "malformed fortran_order"));
    }

    let shape_text = header_value(header, "shape", member)?;
    let inner = shape_text
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad(member, "malformed shape"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse::<usize>().map_err(|_| bad(member, format!("bad dimension `{s}`"))))
        .collect::<Result<Vec<_>, _>>()?;

    let expected: usize = shape.iter().product();
    let payload = &bytes[header_end..];
    if payload.len() != expected {
        return Err(DataError::ShapeMismatch {
            member: member.to_string(),
            reason: format!("shape {shape:?} needs {expected} bytes, payload has {}", payload.len()),
        });
    }
    Ok(NpyArray { shape, data: payload.to_vec() })
}

/// Serialize a `uint8` array as NPY v1.0 (header padded to 64 bytes).
pub fn encode_npy(array: &NpyArray) -> Vec<u8> {
    let dims: Vec<String> = array.shape.iter().map(|d| d.to_string()).collect();
    let shape = match dims.len() {
        1 => format!("({},)", dims[0]),
        _ => format!("({})", dims.join(", ")),
    };
    let mut header = format!("{{'descr': '|u1', 'fortran_order': False, 'shape': {shape}, }}");
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + array.data.len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&array.data);
    out
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Open archive handle that reads named `.npy` members.
pub struct NpzReader {
    archive: ZipArchive<File>,
    path: String,
}

impl NpzReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(io_err(path))?;
        let archive = ZipArchive::new(file)
            .map_err(|e| DataError::Archive { path: path.display().to_string(), reason: e.to_string() })?;
        Ok(NpzReader { archive, path: path.display().to_string() })
    }

    pub fn names(&self) -> Vec<String> {
        self.archive.file_names().map(str::to_string).collect()
    }

    pub fn contains(&self, member: &str) -> bool {
        self.archive.index_for_name(member).is_some()
    }

    pub fn read(&mut self, member: &str) -> Result<NpyArray, DataError> {
        let mut entry = match self.archive.by_name(member) {
            Ok(entry) => entry,
            Err(zip::result::ZipError::FileNotFound) => {
                return Err(DataError::MissingMember { member: member.to_string() })
            }
            Err(e) => return Err(DataError::Archive { path: self.path.clone(), reason: e.to_string() }),
        };
        if !matches!(entry.compression(), CompressionMethod::Stored | CompressionMethod::Deflated) {
            return Err(DataError::Archive {
                path: self.path.clone(),
                reason: format!("{member}: unsupported compression {:?}", entry.compression()),
            });
        }
        let mut bytes = Vec::with_capacity(entry.size() as usize);
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| DataError::Archive { path: self.path.clone(), reason: format!("{member}: {e}") })?;
        parse_npy(&bytes, member)
    }
}

/// Write `uint8` arrays into a `.npz` archive, deflated or stored.
pub fn write_npz(path: impl AsRef<Path>, members: &[(&str, &NpyArray)], compress: bool) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut zip = ZipWriter::new(file);
    let method = if compress { CompressionMethod::Deflated } else { CompressionMethod::Stored };
    let options = SimpleFileOptions::default().compression_method(method).large_file(false);
    let archive_err = |e: zip::result::ZipError| DataError::Archive { path: path.display().to_string(), reason: e.to_string() };
    for (name, array) in members {
        zip.start_file(*name, options).map_err(archive_err)?;
        zip.write_all(&encode_npy(array)).map_err(io_err(path))?;
    }
    zip.finish().map_err(archive_err)?;
    Ok(())
}
