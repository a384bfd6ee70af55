//! Reader and writer for the 3DGS PLY layout.
//!
//! The writer always emits the canonical property order
//! `x y z f_dc_0..2 f_rest_0..44 opacity scale_0..2 rot_0..3`, followed by
//! any passthrough properties, with 32-bit floats for all splat properties.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::splat::{ExtraProperty, GaussianCloud, GaussianSplat, ATTRIBUTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    BinaryLittleEndian,
    Ascii,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => f64::from(b[0] as i8),
            Self::U8 => f64::from(b[0]),
            Self::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Self::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Self::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Self::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Self::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode_le(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::I8 => out.push(v as i8 as u8),
            Self::U8 => out.push(v as u8),
            Self::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Self::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            Self::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            Self::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            Self::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    fn parse_ascii(self, tok: &str) -> Option<f64> {
        match self {
            Self::F32 => tok.parse::<f32>().ok().map(f64::from),
            Self::F64 => tok.parse::<f64>().ok(),
            _ => tok.parse::<i64>().ok().map(|v| v as f64),
        }
    }

    fn format_ascii(self, v: f64) -> String {
        match self {
            Self::F32 => format!("{}", v as f32),
            Self::F64 => format!("{v}"),
            _ => format!("{}", v as i64),
        }
    }
}

/// Splat property names in canonical file order.
pub fn canonical_property_names() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..45).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Slot of a splat property inside the `[C, O, S, R, SH]` attribute vector.
pub fn attribute_slot(name: &str) -> Option<usize> {
    let idx = |prefix: &str, n: usize| -> Option<usize> {
        name.strip_prefix(prefix)?
            .parse::<usize>()
            .ok()
            .filter(|&i| i < n && name.len() == prefix.len() + i.to_string().len())
    };
    match name {
        "x" => Some(0),
        "y" => Some(1),
        "z" => Some(2),
        "opacity" => Some(3),
        _ => idx("scale_", 3)
            .map(|i| 4 + i)
            .or_else(|| idx("rot_", 4).map(|i| 7 + i))
            .or_else(|| idx("f_dc_", 3).map(|i| 11 + i))
            .or_else(|| idx("f_rest_", 45).map(|i| 14 + i)),
    }
}

#[derive(Debug)]
struct Property {
    name: String,
    kind: ScalarKind,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    encoding: Encoding,
    elements: Vec<Element>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<(Header, u64)> {
    let mut consumed = 0u64;
    let mut lineno = 0usize;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = r
            .read_until(b'\n', &mut buf)
            .map_err(|e| parse_err(lineno + 1, e.to_string()))?;
        if n == 0 {
            return Err(parse_err(lineno + 1, "unexpected end of file inside header"));
        }
        consumed += n as u64;
        lineno += 1;
        let line = std::str::from_utf8(&buf)
            .map_err(|_| parse_err(lineno, "header is not valid UTF-8"))?
            .trim_end_matches(['\n', '\r']);
        let mut toks = line.split_whitespace();
        let Some(keyword) = toks.next() else {
            continue;
        };
        if lineno == 1 {
            if keyword != "ply" {
                return Err(parse_err(1, format!("expected magic `ply`, found `{line}`")));
            }
            continue;
        }
        match keyword {
            "format" => {
                let fmt = toks.next().unwrap_or_default();
                encoding = Some(match fmt {
                    "binary_little_endian" => Encoding::BinaryLittleEndian,
                    "ascii" => Encoding::Ascii,
                    other => {
                        return Err(parse_err(lineno, format!("unsupported format `{other}`")))
                    }
                });
            }
            "comment" | "obj_info" => {}
            "element" => {
                let name = toks
                    .next()
                    .ok_or_else(|| parse_err(lineno, "element without name"))?;
                let count = toks
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(lineno, format!("bad element count in `{line}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(lineno, "property before any element"))?;
                let ty = toks.next().unwrap_or_default();
                if ty == "list" {
                    return Err(parse_err(lineno, "list properties are not supported"));
                }
                let kind = ScalarKind::parse(ty)
                    .ok_or_else(|| parse_err(lineno, format!("unknown property type `{ty}`")))?;
                let name = toks
                    .next()
                    .ok_or_else(|| parse_err(lineno, "property without name"))?;
                if el.properties.iter().any(|p| p.name == name) {
                    return Err(parse_err(lineno, format!("duplicate property `{name}`")));
                }
                el.properties.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            "end_header" => break,
            other => return Err(parse_err(lineno, format!("unknown keyword `{other}`"))),
        }
    }
    let encoding = encoding.ok_or_else(|| parse_err(lineno, "header has no format line"))?;
    Ok((Header { encoding, elements }, consumed))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let label = path.display().to_string();
    read_ply_from(BufReader::new(file), label)
}

pub fn read_ply_from<R: BufRead>(mut r: R, source_label: String) -> Result<GaussianCloud> {
    let (header, header_len) = read_header(&mut r)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Schema {
            missing: vec!["element vertex".into()],
        })?;
    let vertex = &header.elements[vi];

    let slots: Vec<Option<usize>> = vertex
        .properties
        .iter()
        .map(|p| attribute_slot(&p.name))
        .collect();
    let missing: Vec<String> = canonical_property_names()
        .into_iter()
        .filter(|n| !vertex.properties.iter().any(|p| &p.name == n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema { missing });
    }

    let mut extras: Vec<ExtraProperty> = vertex
        .properties
        .iter()
        .zip(&slots)
        .filter(|(_, s)| s.is_none())
        .map(|(p, _)| ExtraProperty {
            name: p.name.clone(),
            kind: p.kind,
            values: Vec::with_capacity(vertex.count),
        })
        .collect();

    let mut splats = Vec::with_capacity(vertex.count);
    let mut attrs = [0f32; ATTRIBUTES];
    let mut store = |values: &mut dyn Iterator<Item = f64>, attrs: &mut [f32; ATTRIBUTES]| {
        let mut extra = 0;
        for (v, slot) in values.zip(&slots) {
            match slot {
                Some(s) => attrs[*s] = v as f32,
                None => {
                    extras[extra].values.push(v);
                    extra += 1;
                }
            }
        }
        GaussianSplat::from_attributes(attrs)
    };

    match header.encoding {
        Encoding::BinaryLittleEndian => {
            let mut offset = header_len;
            // elements preceding the vertex block are skipped
            for el in &header.elements[..vi] {
                let stride: usize = el.properties.iter().map(|p| p.kind.size()).sum();
                let skip = (stride * el.count) as u64;
                let got = std::io::copy(&mut (&mut r).take(skip), &mut std::io::sink())
                    .map_err(|_| Error::Truncated { offset })?;
                if got < skip {
                    return Err(Error::Truncated {
                        offset: offset + got,
                    });
                }
                offset += skip;
            }
            let stride: usize = vertex.properties.iter().map(|p| p.kind.size()).sum();
            let mut row = vec![0u8; stride];
            for _ in 0..vertex.count {
                read_exact_at(&mut r, &mut row, offset)?;
                let mut pos = 0;
                let mut values = vertex.properties.iter().map(|p| {
                    let v = p.kind.decode_le(&row[pos..pos + p.kind.size()]);
                    pos += p.kind.size();
                    v
                });
                splats.push(store(&mut values, &mut attrs));
                offset += stride as u64;
            }
        }
        Encoding::Ascii => {
            let mut rest = String::new();
            r.read_to_string(&mut rest)
                .map_err(|e| parse_err(0, format!("ASCII body: {e}")))?;
            let mut lines = rest.lines().filter(|l| !l.trim().is_empty());
            let mut offset = header_len;
            let body_line0 = 0usize;
            for el in &header.elements[..vi] {
                for _ in 0..el.count {
                    let l = lines.next().ok_or(Error::Truncated { offset })?;
                    offset += l.len() as u64 + 1;
                }
            }
            for row in 0..vertex.count {
                let l = lines.next().ok_or(Error::Truncated { offset })?;
                let toks: Vec<&str> = l.split_whitespace().collect();
                if toks.len() < vertex.properties.len() {
                    return Err(Error::Truncated {
                        offset: offset + l.len() as u64,
                    });
                }
                let mut parsed = Vec::with_capacity(toks.len());
                for (tok, p) in toks.iter().zip(&vertex.properties) {
                    parsed.push(p.kind.parse_ascii(tok).ok_or_else(|| {
                        Error::Data(format!(
                            "vertex {}: cannot parse `{tok}` as {}",
                            body_line0 + row,
                            p.kind.name()
                        ))
                    })?);
                }
                splats.push(store(&mut parsed.into_iter(), &mut attrs));
                offset += l.len() as u64 + 1;
            }
        }
    }

    for (i, s) in splats.iter().enumerate() {
        if !s.rotation_is_normalizable() {
            return Err(Error::Data(format!("splat {i} has a zero-norm rotation")));
        }
    }

    Ok(GaussianCloud {
        splats,
        source_label,
        extras,
    })
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    offset: offset + filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(_) => {
                return Err(Error::Truncated {
                    offset: offset + filled as u64,
                })
            }
        }
    }
    Ok(())
}

pub fn write_ply(cloud: &GaussianCloud, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply_to(cloud, &mut w, encoding).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// File-order permutation: `ORDER[j]` is the attribute slot written j-th.
fn canonical_slots() -> Vec<usize> {
    canonical_property_names()
        .iter()
        .map(|n| attribute_slot(n).expect("canonical names map to slots"))
        .collect()
}

pub fn write_ply_to<W: Write>(cloud: &GaussianCloud, w: &mut W, encoding: Encoding) -> std::io::Result<()> {
    let n = cloud.len();
    for e in &cloud.extras {
        if e.values.len() != n {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("passthrough column `{}` has {} values for {n} splats", e.name, e.values.len()),
            ));
        }
    }
    let fmt = match encoding {
        Encoding::BinaryLittleEndian => "binary_little_endian",
        Encoding::Ascii => "ascii",
    };
    let mut header = format!("ply\nformat {fmt} 1.0\nelement vertex {n}\n");
    for name in canonical_property_names() {
        header.push_str(&format!("property float {name}\n"));
    }
    for e in &cloud.extras {
        header.push_str(&format!("property {} {}\n", e.kind.name(), e.name));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;

    let slots = canonical_slots();
    let mut row: Vec<u8> = Vec::new();
    for (i, s) in cloud.splats.iter().enumerate() {
        let attrs = s.attributes();
        row.clear();
        match encoding {
            Encoding::BinaryLittleEndian => {
                for &slot in &slots {
                    row.extend_from_slice(&attrs[slot].to_le_bytes());
                }
                for e in &cloud.extras {
                    e.kind.encode_le(e.values[i], &mut row);
                }
            }
            Encoding::Ascii => {
                let mut toks: Vec<String> = slots.iter().map(|&slot| format!("{}", attrs[slot])).collect();
                toks.extend(cloud.extras.iter().map(|e| e.kind.format_ascii(e.values[i])));
                row.extend_from_slice(toks.join(" ").as_bytes());
                row.push(b'\n');
            }
        }
        w.write_all(&row)?;
    }
    Ok(())
}
