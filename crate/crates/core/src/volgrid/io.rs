//! Uncompressed MetaImage (.mha) reader/writer with a local binary payload.
//!
//! Header: text `key = value` lines in a fixed order, then raw little-endian
//! values x-fastest immediately after `ElementDataFile = LOCAL`. Scalar
//! volumes are MET_FLOAT, label volumes MET_UCHAR or MET_USHORT, displacement
//! fields MET_FLOAT with `ElementNumberOfChannels = 3` and interleaved
//! (ux, uy, uz) vectors. Label volumes carry a `label_id,name` CSV sidecar
//! next to the volume (`<stem>.labels.csv`).
//!
//! Writing is byte-reproducible: the same volume always produces identical
//! file bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{DisplacementField, GridMeta, LabelVolume, LabelWidth, ScalarVolume};
use crate::{Error, Result};

/// A volume read from disk; the element type selects the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
}

impl Volume {
    pub fn meta(&self) -> &GridMeta {
        match self {
            Volume::Scalar(v) => &v.meta,
            Volume::Label(v) => &v.meta,
        }
    }
}

impl From<ScalarVolume> for Volume {
    fn from(v: ScalarVolume) -> Self {
        Volume::Scalar(v)
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Label(v)
    }
}

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    element_type: String,
    channels: usize,
    payload_offset: usize,
}

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn parse_triple<T: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(malformed(path, format!("{key} needs 3 entries, got `{value}`")));
    }
    let mut out: Vec<T> = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse()
                .map_err(|_| malformed(path, format!("bad {key} entry `{p}`")))?,
        );
    }
    Ok(out.try_into().map_err(|_| ()).unwrap())
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut origin = [0.0; 3];
    let mut element_type = None;
    let mut channels = 1usize;
    let mut pos = 0usize;

    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed(path, "header not terminated by ElementDataFile"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| malformed(path, "non-UTF8 header line"))?;
        pos += nl + 1;

        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(path, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(malformed(path, format!("ObjectType `{value}` != Image")));
                }
            }
            "NDims" => {
                if value != "3" {
                    return Err(malformed(path, format!("NDims `{value}` != 3")));
                }
            }
            "DimSize" => {
                let d: [usize; 3] = parse_triple(path, "DimSize", value)?;
                dims = Some(d);
            }
            "ElementSpacing" => spacing = parse_triple(path, "ElementSpacing", value)?,
            "Offset" => origin = parse_triple(path, "Offset", value)?,
            "ElementType" => element_type = Some(value.to_string()),
            "ElementNumberOfChannels" => {
                channels = value
                    .parse()
                    .map_err(|_| malformed(path, format!("bad channel count `{value}`")))?;
            }
            "ElementByteOrderMSB" => {
                if value != "False" {
                    return Err(malformed(path, "big-endian payloads are not supported"));
                }
            }
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(malformed(path, "only ElementDataFile = LOCAL is supported"));
                }
                break;
            }
            other => return Err(malformed(path, format!("unknown header key `{other}`"))),
        }
    }

    let dims = dims.ok_or_else(|| malformed(path, "missing DimSize"))?;
    let element_type = element_type.ok_or_else(|| malformed(path, "missing ElementType"))?;
    Ok(Header {
        dims,
        spacing,
        origin,
        element_type,
        channels,
        payload_offset: pos,
    })
}

fn element_size(path: &Path, element_type: &str) -> Result<usize> {
    match element_type {
        "MET_FLOAT" => Ok(4),
        "MET_UCHAR" => Ok(1),
        "MET_USHORT" => Ok(2),
        other => Err(Error::UnsupportedElementType {
            path: path.to_path_buf(),
            found: other.to_string(),
        }),
    }
}

fn check_payload(path: &Path, header: &Header, total: usize, elem: usize) -> Result<usize> {
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let expected = n * elem * header.channels;
    let actual = total - header.payload_offset;
    if actual != expected {
        return Err(Error::PayloadSize {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(n)
}

fn format_f64_triple(v: [f64; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn header_string(meta: &GridMeta, element_type: &str, channels: Option<usize>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ObjectType = Image");
    let _ = writeln!(s, "NDims = 3");
    let _ = writeln!(
        s,
        "DimSize = {} {} {}",
        meta.dims[0], meta.dims[1], meta.dims[2]
    );
    if let Some(c) = channels {
        let _ = writeln!(s, "ElementNumberOfChannels = {c}");
    }
    let _ = writeln!(s, "ElementType = {element_type}");
    let _ = writeln!(s, "ElementSpacing = {}", format_f64_triple(meta.spacing));
    let _ = writeln!(s, "Offset = {}", format_f64_triple(meta.origin));
    let _ = writeln!(s, "ElementByteOrderMSB = False");
    let _ = writeln!(s, "ElementDataFile = LOCAL");
    s
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("labels.csv")
}

/// Read a MetaImage volume; MET_FLOAT yields a scalar volume, MET_UCHAR and
/// MET_USHORT a label volume (with its name sidecar, when present).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let elem = element_size(path, &header.element_type)?;
    if header.channels != 1 {
        return Err(malformed(
            path,
            format!(
                "ElementNumberOfChannels = {} (a displacement field? use read_field)",
                header.channels
            ),
        ));
    }
    let n = check_payload(path, &header, bytes.len(), elem)?;
    let meta = GridMeta::new(header.dims, header.spacing, header.origin)?;
    let payload = &bytes[header.payload_offset..];

    match header.element_type.as_str() {
        "MET_FLOAT" => {
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Volume::Scalar(ScalarVolume::with_nan(meta, values)?))
        }
        "MET_UCHAR" => {
            let labels: Vec<u16> = payload.iter().map(|&b| b as u16).collect();
            let names = read_sidecar(path)?;
            Ok(Volume::Label(LabelVolume::new(
                meta,
                labels,
                LabelWidth::U8,
                names,
            )?))
        }
        "MET_USHORT" => {
            let labels: Vec<u16> = payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            let names = read_sidecar(path)?;
            Ok(Volume::Label(LabelVolume::new(
                meta,
                labels,
                LabelWidth::U16,
                names,
            )?))
        }
        _ => unreachable!("element_size already filtered: {n}"),
    }
}

/// Read a volume and require it to be scalar.
pub fn read_scalar_volume(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    match read_volume(&path)? {
        Volume::Scalar(v) => Ok(v),
        Volume::Label(_) => Err(Error::InvalidInput(format!(
            "{}: expected a scalar (MET_FLOAT) volume, found labels",
            path.as_ref().display()
        ))),
    }
}

/// Read a volume and require it to be labels.
pub fn read_label_volume(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_volume(&path)? {
        Volume::Label(v) => Ok(v),
        Volume::Scalar(_) => Err(Error::InvalidInput(format!(
            "{}: expected a label (MET_UCHAR/MET_USHORT) volume, found scalars",
            path.as_ref().display()
        ))),
    }
}

fn read_sidecar(path: &Path) -> Result<BTreeMap<u16, String>> {
    let sidecar = sidecar_path(path);
    let mut names = BTreeMap::new();
    if !sidecar.exists() {
        return Ok(names);
    }
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (id, name) = line.split_once(',').ok_or_else(|| {
            Error::InvalidInput(format!("{}: expected `label_id,name`", sidecar.display()))
        })?;
        let id: u16 = id.parse().map_err(|_| {
            Error::InvalidInput(format!("{}: bad label id `{id}`", sidecar.display()))
        })?;
        names.insert(id, name.to_string());
    }
    Ok(names)
}

/// Write a volume as an uncompressed MetaImage file. Label volumes also write
/// their `label_id,name` sidecar.
pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match vol {
        Volume::Scalar(v) => {
            let mut out = header_string(&v.meta, "MET_FLOAT", None).into_bytes();
            out.reserve(v.values().len() * 4);
            for &x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
        }
        Volume::Label(v) => {
            let element_type = match v.width {
                LabelWidth::U8 => "MET_UCHAR",
                LabelWidth::U16 => "MET_USHORT",
            };
            let mut out = header_string(&v.meta, element_type, None).into_bytes();
            match v.width {
                LabelWidth::U8 => out.extend(v.labels().iter().map(|&l| l as u8)),
                LabelWidth::U16 => {
                    for &l in v.labels() {
                        out.extend_from_slice(&l.to_le_bytes());
                    }
                }
            }
            std::fs::write(path, out).map_err(|e| Error::io(path, e))?;

            let mut csv = String::new();
            for (id, name) in v.names() {
                let _ = writeln!(csv, "{id},{name}");
            }
            let sidecar = sidecar_path(path);
            std::fs::write(&sidecar, csv).map_err(|e| Error::io(&sidecar, e))?;
        }
    }
    Ok(())
}

/// Read a displacement field (MET_FLOAT, `ElementNumberOfChannels = 3`).
pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let elem = element_size(path, &header.element_type)?;
    if header.element_type != "MET_FLOAT" {
        return Err(Error::UnsupportedElementType {
            path: path.to_path_buf(),
            found: format!("{} (fields are MET_FLOAT)", header.element_type),
        });
    }
    if header.channels != 3 {
        return Err(malformed(
            path,
            format!("field needs ElementNumberOfChannels = 3, got {}", header.channels),
        ));
    }
    check_payload(path, &header, bytes.len(), elem)?;
    let meta = GridMeta::new(header.dims, header.spacing, header.origin)?;
    let vectors: Vec<[f32; 3]> = bytes[header.payload_offset..]
        .chunks_exact(12)
        .map(|c| {
            [
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                f32::from_le_bytes([c[8], c[9], c[10], c[11]]),
            ]
        })
        .collect();
    DisplacementField::new(meta, vectors)
}

/// Write a displacement field with interleaved (ux, uy, uz) payload.
pub fn write_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = header_string(&field.meta, "MET_FLOAT", Some(3)).into_bytes();
    out.reserve(field.vectors().len() * 12);
    for v in field.vectors() {
        for c in v {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::LabelWidth;

    #[test]
    fn reads_hand_written_float_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mha");
        // Built byte-by-byte from the format definition.
        let mut bytes = b"ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\n\
ElementType = MET_FLOAT\nElementSpacing = 1 1 1\nOffset = 0 0 0\n\
ElementByteOrderMSB = False\nElementDataFile = LOCAL\n"
            .to_vec();
        for i in 0..8 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();

        let vol = match read_volume(&path).unwrap() {
            Volume::Scalar(v) => v,
            _ => panic!("expected scalar"),
        };
        assert_eq!(vol.meta.dims, [2, 2, 2]);
        let expect: Vec<f32> = (0..8).map(|i| i as f32).collect();
        assert_eq!(vol.values(), expect.as_slice());
        // x-fastest order
        assert_eq!(vol.at(1, 0, 0), 1.0);
        assert_eq!(vol.at(0, 1, 0), 2.0);
        assert_eq!(vol.at(0, 0, 1), 4.0);
    }

    #[test]
    fn writes_expected_bytes_for_unit_volume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.mha");
        let vol = ScalarVolume::constant(GridMeta::isotropic([1, 1, 1]), 0.0);
        write_volume(&vol.into(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let expected_header = b"ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\n\
ElementType = MET_FLOAT\nElementSpacing = 1 1 1\nOffset = 0 0 0\n\
ElementByteOrderMSB = False\nElementDataFile = LOCAL\n";
        assert_eq!(&bytes[..expected_header.len()], expected_header.as_slice());
        assert_eq!(&bytes[expected_header.len()..], &[0u8; 4]);
    }

    #[test]
    fn rejects_unsupported_element_type() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mha");
        let mut bytes = b"ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\n\
ElementType = MET_DOUBLE\nElementSpacing = 1 1 1\nOffset = 0 0 0\n\
ElementByteOrderMSB = False\nElementDataFile = LOCAL\n"
            .to_vec();
        bytes.extend_from_slice(&1f64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        match read_volume(&path) {
            Err(Error::UnsupportedElementType { found, .. }) => assert_eq!(found, "MET_DOUBLE"),
            other => panic!("expected UnsupportedElementType, got {other:?}"),
        }
    }

    #[test]
    fn payload_length_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.mha");
        let mut bytes = b"ObjectType = Image\nNDims = 3\nDimSize = 2 1 1\n\
ElementType = MET_FLOAT\nElementSpacing = 1 1 1\nOffset = 0 0 0\n\
ElementByteOrderMSB = False\nElementDataFile = LOCAL\n"
            .to_vec();
        bytes.extend_from_slice(&1f32.to_le_bytes()); // one value, two declared
        std::fs::write(&path, bytes).unwrap();
        match read_volume(&path) {
            Err(Error::PayloadSize {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 8);
                assert_eq!(actual, 4);
            }
            other => panic!("expected PayloadSize, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_distinct() {
        match read_volume("/nonexistent/v.mha") {
            Err(Error::Io { .. }) => {}
            other => panic!("expected Io error, got {other:?}"),
        }
    }

    #[test]
    fn label_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.mha");
        let meta = GridMeta::new([2, 1, 1], [1.5, 2.0, 3.0], [-1.0, 0.5, 2.0]).unwrap();
        let mut names = BTreeMap::new();
        names.insert(3u16, "muscle".to_string());
        let vol = LabelVolume::new(meta, vec![0, 3], LabelWidth::U8, names).unwrap();
        write_volume(&vol.clone().into(), &path).unwrap();
        assert!(sidecar_path(&path).exists());
        match read_volume(&path).unwrap() {
            Volume::Label(back) => {
                assert_eq!(back, vol);
                assert_eq!(back.name_of(3), "muscle");
            }
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mha");
        let meta = GridMeta::isotropic([2, 2, 1]);
        let vectors = vec![[0.5, -1.0, 2.0], [0.0, 0.0, 0.0], [1.5, 2.5, -3.5], [9.0, 8.0, 7.0]];
        let field = DisplacementField::new(meta, vectors).unwrap();
        write_field(&field, &path).unwrap();
        let back = read_field(&path).unwrap();
        assert_eq!(back, field);
        // volumes reject field files
        assert!(read_volume(&path).is_err());
    }

    #[test]
    fn write_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.mha");
        let b = dir.path().join("b.mha");
        let meta = GridMeta::new([3, 2, 1], [0.25, 1.0, 4.0], [0.0, -2.5, 0.125]).unwrap();
        let vol: Volume = ScalarVolume::new(meta, vec![1.0, 2.5, -3.0, 0.0, 5.5, 1e-8])
            .unwrap()
            .into();
        write_volume(&vol, &a).unwrap();
        write_volume(&vol, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
