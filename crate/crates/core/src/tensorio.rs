//! Binary tensor files and the dataset manifest.
//!
//! Every array is stored as
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CUET"
//! 4       4     version, u32 LE (= 1)
//! 8       4     rows, u32 LE
//! 12      4     dims, u32 LE
//! 16      4*rows*dims  payload, row-major little-endian
//! ```
//!
//! Float matrices carry `f32` payloads. Label files use the same header with
//! `dims = 1` and a `u32` payload.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledEmbeddings;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: [u8; 4] = *b"CUET";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"CUET\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}, expected {VERSION}")]
    VersionMismatch(u32),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("shape {rows}x{dims} does not fit the format")]
    TooLarge { rows: usize, dims: usize },
    #[error("label file must have dims=1, found {0}")]
    NotALabelFile(u32),
}

impl FormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::BadMagic(_) => "bad_magic",
            FormatError::VersionMismatch(_) => "version_mismatch",
            FormatError::Truncated { .. } => "truncated",
            FormatError::TooLarge { .. } => "too_large",
            FormatError::NotALabelFile(_) => "not_a_label_file",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub rows: u32,
    pub dims: u32,
}

impl Header {
    fn new(rows: usize, dims: usize) -> std::result::Result<Self, FormatError> {
        match (u32::try_from(rows), u32::try_from(dims)) {
            (Ok(r), Ok(d)) if (r as u64) * (d as u64) * 4 <= u64::MAX / 2 => Ok(Self { rows: r, dims: d }),
            _ => Err(FormatError::TooLarge { rows, dims }),
        }
    }

    fn payload_len(&self) -> u64 {
        self.rows as u64 * self.dims as u64 * 4
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&VERSION.to_le_bytes());
        out[8..12].copy_from_slice(&self.rows.to_le_bytes());
        out[12..16].copy_from_slice(&self.dims.to_le_bytes());
        out
    }
}

fn read_header<R: Read>(reader: &mut R) -> Result<Header> {
    let mut buf = [0u8; HEADER_LEN];
    let found = read_fully(reader, &mut buf)?;
    if found < 4 {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            found: found as u64,
        }
        .into());
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    if found < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            found: found as u64,
        }
        .into());
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::VersionMismatch(version).into());
    }
    Ok(Header {
        rows: u32::from_le_bytes(buf[8..12].try_into().unwrap()),
        dims: u32::from_le_bytes(buf[12..16].try_into().unwrap()),
    })
}

/// Like `read_exact`, but reports how many bytes were available.
fn read_fully<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<stream>", e)),
        }
    }
    Ok(filled)
}

fn read_payload<R: Read>(reader: &mut R, header: Header) -> Result<Vec<[u8; 4]>> {
    let expected = header.payload_len();
    let mut bytes = Vec::new();
    // `take` bounds the read to the declared payload
    reader
        .take(expected)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<stream>", e))?;
    if (bytes.len() as u64) < expected {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64 + expected,
            found: HEADER_LEN as u64 + bytes.len() as u64,
        }
        .into());
    }
    Ok(bytes.chunks_exact(4).map(|c| c.try_into().unwrap()).collect())
}

pub fn encode_tensor<W: Write>(writer: &mut W, matrix: &Matrix) -> Result<()> {
    let header = Header::new(matrix.rows(), matrix.cols())?;
    let io = |e| Error::io("<stream>", e);
    writer.write_all(&header.encode()).map_err(io)?;
    for v in matrix.as_slice() {
        writer.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn decode_tensor<R: Read>(reader: &mut R) -> Result<Matrix> {
    let header = read_header(reader)?;
    let data = read_payload(reader, header)?
        .into_iter()
        .map(f32::from_le_bytes)
        .collect();
    Matrix::new(header.rows as usize, header.dims as usize, data)
}

pub fn write_tensor(path: &Path, matrix: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + matrix.as_slice().len() * 4);
    encode_tensor(&mut bytes, matrix)?;
    crate::io::write_bytes(path, &bytes)
}

pub fn read_tensor(path: &Path) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&mut BufReader::new(file)).map_err(|e| with_path(e, path))
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let header = Header::new(labels.len(), 1)?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + labels.len() * 4);
    bytes.extend_from_slice(&header.encode());
    for &l in labels {
        let l = u32::try_from(l).map_err(|_| Error::Validation(format!("label {l} does not fit in u32")))?;
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    crate::io::write_bytes(path, &bytes)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header(&mut reader).map_err(|e| with_path(e, path))?;
    if header.dims != 1 {
        return Err(FormatError::NotALabelFile(header.dims).into());
    }
    Ok(read_payload(&mut reader, header)
        .map_err(|e| with_path(e, path))?
        .into_iter()
        .map(|b| u32::from_le_bytes(b) as usize)
        .collect())
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

/// JSON document tying the arrays of one dataset split together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub features_path: PathBuf,
    pub prototypes_path: PathBuf,
    pub labels_path: PathBuf,
    pub d: usize,
    pub n: usize,
    #[serde(default)]
    pub source: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

/// A manifest's contents, validated and in memory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub embeddings: LabeledEmbeddings,
    pub prototypes: Matrix,
}

/// Reads a manifest and its arrays. Relative paths resolve against the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    load_manifest(&manifest, base)
}

pub fn load_manifest(manifest: &Manifest, base: &Path) -> Result<LoadedDataset> {
    let classes = manifest.classes.len();
    let features = read_tensor(&base.join(&manifest.features_path))?;
    let prototypes = read_tensor(&base.join(&manifest.prototypes_path))?;
    let labels = read_labels(&base.join(&manifest.labels_path))?;

    if prototypes.rows() != classes {
        return Err(Error::DimensionMismatch(format!(
            "prototypes have {} rows but the manifest lists {classes} classes",
            prototypes.rows()
        )));
    }
    if prototypes.cols() != manifest.d {
        return Err(Error::DimensionMismatch(format!(
            "prototypes have {} dims, manifest says d={}",
            prototypes.cols(),
            manifest.d
        )));
    }
    if features.cols() != manifest.d {
        return Err(Error::DimensionMismatch(format!(
            "features have {} dims, manifest says d={}",
            features.cols(),
            manifest.d
        )));
    }
    if features.rows() != manifest.n || labels.len() != manifest.n {
        return Err(Error::DimensionMismatch(format!(
            "manifest says n={} but features have {} rows and labels {} entries",
            manifest.n,
            features.rows(),
            labels.len()
        )));
    }
    let embeddings = LabeledEmbeddings::new(features, labels, manifest.classes.clone())?;
    Ok(LoadedDataset {
        embeddings,
        prototypes,
    })
}

/// Writes arrays plus a manifest next to each other in `dir`.
pub fn save_dataset(
    dir: &Path,
    name: &str,
    embeddings: &LabeledEmbeddings,
    prototypes: &Matrix,
    source: &str,
) -> Result<PathBuf> {
    let manifest = Manifest {
        classes: embeddings.class_names().to_vec(),
        features_path: format!("{name}.features.bin").into(),
        prototypes_path: format!("{name}.prototypes.bin").into(),
        labels_path: format!("{name}.labels.bin").into(),
        d: embeddings.dim(),
        n: embeddings.len(),
        source: source.to_string(),
    };
    write_tensor(&dir.join(&manifest.features_path), embeddings.features())?;
    write_tensor(&dir.join(&manifest.prototypes_path), prototypes)?;
    write_labels(&dir.join(&manifest.labels_path), embeddings.labels())?;
    let path = dir.join(format!("{name}.manifest.json"));
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(m: &Matrix) -> Vec<u8> {
        let mut out = Vec::new();
        encode_tensor(&mut out, m).unwrap();
        out
    }

    #[test]
    fn smallest_tensor_is_twenty_bytes() {
        let m = Matrix::new(1, 1, vec![0.5]).unwrap();
        let bytes = encode(&m);
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"CUET");
        assert_eq!(&bytes[16..], &0.5f32.to_le_bytes());
        assert!(decode_tensor(&mut bytes.as_slice()).unwrap().bit_eq(&m));
    }

    #[test]
    fn zero_matrix_payload() {
        let bytes = encode(&Matrix::zeros(2, 3));
        assert_eq!(bytes.len(), 16 + 24);
        assert!(bytes[16..].iter().all(|&b| b == 0));
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
    }

    #[test]
    fn distinct_error_kinds() {
        let good = encode(&Matrix::zeros(2, 2));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_tensor(&mut bad_magic.as_slice()),
            Err(Error::Format(FormatError::BadMagic(_)))
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_tensor(&mut bad_version.as_slice()),
            Err(Error::Format(FormatError::VersionMismatch(2)))
        ));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(
            decode_tensor(&mut &truncated[..]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        assert!(matches!(
            decode_tensor(&mut &good[..10]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn reader_stops_at_declared_payload() {
        let mut bytes = encode(&Matrix::new(1, 2, vec![1.0, 2.0]).unwrap());
        bytes.extend_from_slice(&[0xAB; 8]);
        let mut cursor = std::io::Cursor::new(bytes);
        let m = decode_tensor(&mut cursor).unwrap();
        assert_eq!(m.as_slice(), &[1.0, 2.0]);
        assert_eq!(cursor.position(), 24);
    }

    fn write_fixture(dir: &Path, classes: usize, proto_rows: usize, labels: &[usize]) -> PathBuf {
        let n = labels.len();
        let names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
        write_tensor(&dir.join("f.bin"), &Matrix::zeros(n, 3)).unwrap();
        write_tensor(&dir.join("p.bin"), &Matrix::zeros(proto_rows, 3)).unwrap();
        write_labels(&dir.join("l.bin"), labels).unwrap();
        let m = Manifest {
            classes: names,
            features_path: "f.bin".into(),
            prototypes_path: "p.bin".into(),
            labels_path: "l.bin".into(),
            d: 3,
            n,
            source: "test".into(),
        };
        let path = dir.join("m.json");
        m.save(&path).unwrap();
        path
    }

    #[test]
    fn load_consistent_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), 2, 2, &[0, 1, 1, 0]);
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.embeddings.len(), 4);
        assert_eq!(ds.embeddings.num_classes(), 2);
        assert_eq!(ds.embeddings.dim(), 3);
        assert_eq!(ds.prototypes.rows(), 2);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), 2, 2, &[0, 2, 1, 0]);
        assert!(matches!(load_dataset(&path), Err(Error::LabelOutOfRange { label: 2, .. })));
    }

    #[test]
    fn prototype_row_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), 2, 3, &[0, 1, 1, 0]);
        assert!(matches!(load_dataset(&path), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn missing_file_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), 2, 2, &[0, 1]);
        std::fs::remove_file(dir.path().join("p.bin")).unwrap();
        match load_dataset(&path) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("p.bin")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.bin");
        write_labels(&p, &[3, 0, 7]).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![3, 0, 7]);
        write_tensor(&p, &Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Format(FormatError::NotALabelFile(2)))));
    }

    proptest! {
        #[test]
        fn round_trip_random_bits(rows in 0usize..8, cols in 0usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| loop {
                    let v = f32::from_bits(rng.gen());
                    if v.is_finite() { break v; }
                })
                .collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            let back = decode_tensor(&mut encode(&m).as_slice()).unwrap();
            prop_assert!(back.bit_eq(&m));
        }
    }
}
