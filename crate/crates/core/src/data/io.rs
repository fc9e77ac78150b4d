//! Little-endian binary containers.
//!
//! Layout: magic `[u8; 4]`, `u32` version (1), `u32` dims\[3\], `f32`
//! spacing\[3\], `u32` dtype (0 = f32 scalar, 1 = f32 xyz vector,
//! 2 = u16 label), then the raw voxels in x-fastest order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{FormatError, OfgError, Result};
use crate::volume::{DisplacementField, Grid, ImagePair, LabelVolume, ScalarVolume};

pub const MAGIC_VOLUME: [u8; 4] = *b"OFGV";
pub const MAGIC_FIELD: [u8; 4] = *b"OFGD";
pub const MAGIC_LABELS: [u8; 4] = *b"OFGL";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 36;

const DTYPE_SCALAR: u32 = 0;
const DTYPE_VECTOR: u32 = 1;
const DTYPE_LABEL: u32 = 2;

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| OfgError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| OfgError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Cursor over a byte buffer that reports truncation with offsets.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        if self.bytes.len() < 4 {
            return Err(FormatError::Truncated {
                expected: 4,
                actual: self.bytes.len(),
            });
        }
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Requires exactly `n` bytes to remain.
    pub fn expect_remaining(&self, n: usize) -> Result<(), FormatError> {
        let expected = self.pos + n;
        match expected.cmp(&self.bytes.len()) {
            std::cmp::Ordering::Greater => Err(FormatError::Truncated {
                expected,
                actual: self.bytes.len(),
            }),
            std::cmp::Ordering::Less => Err(FormatError::TrailingData {
                expected,
                actual: self.bytes.len(),
            }),
            std::cmp::Ordering::Equal => Ok(()),
        }
    }
}

fn encode_header(magic: [u8; 4], grid: &Grid, dtype: u32, payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in grid.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in grid.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&dtype.to_le_bytes());
    out
}

/// Parses the header and checks the payload length; returns the grid and a
/// reader positioned at the first voxel.
fn decode_header<'a>(
    bytes: &'a [u8],
    magic: [u8; 4],
    dtype: u32,
    elem: usize,
) -> Result<(Grid, ByteReader<'a>), FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(magic)?;
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::BadVersion {
            expected: VERSION,
            found: version,
        });
    }
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let found = r.u32()?;
    if found != dtype {
        return Err(FormatError::BadDtype {
            offset: 32,
            expected: dtype,
            found,
        });
    }
    let grid = Grid::with_spacing(dims, spacing).map_err(|e| FormatError::BadHeader {
        offset: 8,
        reason: e.to_string(),
    })?;
    r.expect_remaining(grid.len() * elem)?;
    Ok((grid, r))
}

fn format_err(path: &Path) -> impl FnOnce(FormatError) -> OfgError + '_ {
    move |kind| OfgError::Format {
        path: path.to_path_buf(),
        kind,
    }
}

pub fn write_volume(path: &Path, v: &ScalarVolume) -> Result<()> {
    let mut out = encode_header(MAGIC_VOLUME, v.grid(), DTYPE_SCALAR, v.data().len() * 4);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_volume(path: &Path) -> Result<ScalarVolume> {
    let bytes = read_bytes(path)?;
    let (grid, mut r) =
        decode_header(&bytes, MAGIC_VOLUME, DTYPE_SCALAR, 4).map_err(format_err(path))?;
    let data = (0..grid.len())
        .map(|_| r.f32())
        .collect::<Result<Vec<_>, _>>()
        .map_err(format_err(path))?;
    ScalarVolume::new(grid, data).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_field(path: &Path, f: &DisplacementField) -> Result<()> {
    let mut out = encode_header(MAGIC_FIELD, f.grid(), DTYPE_VECTOR, f.num_components() * 4);
    for x in f.components() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let bytes = read_bytes(path)?;
    let (grid, mut r) =
        decode_header(&bytes, MAGIC_FIELD, DTYPE_VECTOR, 12).map_err(format_err(path))?;
    let flat = (0..grid.len() * 3)
        .map(|_| r.f32())
        .collect::<Result<Vec<_>, _>>()
        .map_err(format_err(path))?;
    DisplacementField::from_interleaved(grid, &flat)
        .map_err(|e| e.context(path.display().to_string()))
}

pub fn write_labels(path: &Path, l: &LabelVolume) -> Result<()> {
    let mut out = encode_header(MAGIC_LABELS, l.grid(), DTYPE_LABEL, l.data().len() * 2);
    for x in l.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let bytes = read_bytes(path)?;
    let (grid, mut r) =
        decode_header(&bytes, MAGIC_LABELS, DTYPE_LABEL, 2).map_err(format_err(path))?;
    let data = (0..grid.len())
        .map(|_| r.take(2).map(|b| u16::from_le_bytes([b[0], b[1]])))
        .collect::<Result<Vec<_>, _>>()
        .map_err(format_err(path))?;
    LabelVolume::new(grid, data)
}

/// Index of a dataset directory: free-form `key = value` settings plus an
/// ordered list of pair directories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub settings: Vec<(String, String)>,
    pub members: Vec<String>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.txt";

    pub fn get(&self, key: &str) -> Option<&str> {
        self.settings
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn render(&self) -> String {
        let mut s = String::from("# ofg dataset manifest\n");
        for (k, v) in &self.settings {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for m in &self.members {
            s.push_str(&format!("member = {m}\n"));
        }
        s
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut out = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| OfgError::Format {
                path: path.to_path_buf(),
                kind: FormatError::BadHeader {
                    offset: n + 1,
                    reason: format!("expected 'key = value', got '{line}'"),
                },
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k == "member" {
                out.members.push(v);
            } else {
                out.settings.push((k, v));
            }
        }
        Ok(out)
    }
}

fn pair_paths(dir: &Path) -> [PathBuf; 5] {
    [
        dir.join("fixed.ofgv"),
        dir.join("moving.ofgv"),
        dir.join("fixed_labels.ofgl"),
        dir.join("moving_labels.ofgl"),
        dir.join("truth.ofgd"),
    ]
}

/// Writes every pair to `root/pair_NNN/` and the manifest to `root/manifest.txt`.
pub fn save_pairs(
    root: &Path,
    pairs: &[ImagePair],
    settings: Vec<(String, String)>,
) -> Result<DatasetManifest> {
    let io = |source| OfgError::Io {
        path: root.to_path_buf(),
        source,
    };
    fs::create_dir_all(root).map_err(io)?;
    let mut manifest = DatasetManifest {
        settings,
        members: Vec::new(),
    };
    for (i, pair) in pairs.iter().enumerate() {
        let name = format!("pair_{i:03}");
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|source| OfgError::Io {
            path: dir.clone(),
            source,
        })?;
        let [f, m, fl, ml, t] = pair_paths(&dir);
        write_volume(&f, &pair.fixed)?;
        write_volume(&m, &pair.moving)?;
        if let (Some(a), Some(b)) = (&pair.fixed_labels, &pair.moving_labels) {
            write_labels(&fl, a)?;
            write_labels(&ml, b)?;
        }
        if let Some(truth) = &pair.truth_field {
            write_field(&t, truth)?;
        }
        manifest.members.push(name);
    }
    write_bytes(
        &root.join(DatasetManifest::FILE),
        manifest.render().as_bytes(),
    )?;
    Ok(manifest)
}

/// Loads the pairs listed in `root/manifest.txt`, in manifest order.
pub fn load_pairs(root: &Path) -> Result<(DatasetManifest, Vec<ImagePair>)> {
    let path = root.join(DatasetManifest::FILE);
    let text = String::from_utf8_lossy(&read_bytes(&path)?).into_owned();
    let manifest = DatasetManifest::parse(&text, &path)?;
    let pairs = manifest
        .members
        .iter()
        .map(|name| {
            let [f, m, fl, ml, t] = pair_paths(&root.join(name));
            let mut pair = ImagePair::new(read_volume(&f)?, read_volume(&m)?)?;
            if fl.exists() && ml.exists() {
                pair = pair.with_labels(read_labels(&fl)?, read_labels(&ml)?)?;
            }
            if t.exists() {
                pair = pair.with_truth(read_field(&t)?)?;
            }
            Ok(pair)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn volume_round_trip_and_errors() {
        let dir = tmp();
        let path = dir.path().join("v.ofgv");
        let g = Grid::with_spacing([4, 5, 6], [1.0, 1.5, 2.0]).unwrap();
        let v = ScalarVolume::from_fn(g, |[i, j, k]| (i * 31 + j * 7 + k) as f32 * 0.1).unwrap();
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.grid().spacing(), [1.0, 1.5, 2.0]);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_volume(&path).unwrap_err();
        match err {
            OfgError::Format {
                kind: FormatError::Truncated { expected, actual },
                ..
            } => assert_eq!((expected, actual), (36 + 120 * 4, 36 + 120 * 4 - 3)),
            other => panic!("{other}"),
        }

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XYZW");
        fs::write(&path, &bad).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(err.to_string().contains("[88, 89, 90, 87]"), "{err}");

        // A field file is not a volume.
        let fpath = dir.path().join("f.ofgd");
        write_field(&fpath, &DisplacementField::zeros(g)).unwrap();
        assert!(matches!(
            read_volume(&fpath),
            Err(OfgError::Format {
                kind: FormatError::BadMagic { .. },
                ..
            })
        ));

        let mut v2 = bytes;
        v2[4] = 9;
        fs::write(&path, &v2).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(OfgError::Format {
                kind: FormatError::BadVersion { found: 9, .. },
                ..
            })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tmp();
        let path = dir.path().join("l.ofgl");
        let g = Grid::cube(4).unwrap();
        write_labels(&path, &LabelVolume::zeros(g)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_labels(&path),
            Err(OfgError::Format {
                kind: FormatError::TrailingData { .. },
                ..
            })
        ));
    }

    #[test]
    fn short_file_reports_truncation() {
        let dir = tmp();
        let path = dir.path().join("s.ofgv");
        fs::write(&path, b"OF").unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(OfgError::Format {
                kind: FormatError::Truncated {
                    expected: 4,
                    actual: 2
                },
                ..
            })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn field_and_label_round_trip(
            comps in prop::collection::vec(-1e6f32..1e6, 64 * 3),
            labels in prop::collection::vec(any::<u16>(), 64),
        ) {
            let dir = tmp();
            let g = Grid::cube(4).unwrap();
            let f = DisplacementField::from_interleaved(g, &comps).unwrap();
            let l = LabelVolume::new(g, labels).unwrap();
            write_field(&dir.path().join("f"), &f).unwrap();
            write_labels(&dir.path().join("l"), &l).unwrap();
            prop_assert_eq!(read_field(&dir.path().join("f")).unwrap(), f);
            prop_assert_eq!(read_labels(&dir.path().join("l")).unwrap(), l);
        }
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tmp();
        let spec = crate::data::PhantomSpec {
            dims: [16; 3],
            ..Default::default()
        };
        let pairs = vec![
            crate::data::make_pair(&spec, &Default::default(), 1).unwrap(),
            crate::data::make_pair(&spec, &Default::default(), 2).unwrap(),
        ];
        save_pairs(dir.path(), &pairs, vec![("seed".into(), "1".into())]).unwrap();
        let (manifest, back) = load_pairs(dir.path()).unwrap();
        assert_eq!(back, pairs);
        assert_eq!(manifest.get("seed"), Some("1"));
        assert_eq!(manifest.members, vec!["pair_000", "pair_001"]);
    }
}
