//! PLY reader/writer for colored, optionally annotated, point clouds.
//!
//! Supported: `ascii 1.0` and `binary_little_endian 1.0`. The vertex element
//! must carry `x,y,z` and `red,green,blue`; `instance_id` (int, -1 for
//! background) and `semantic` (uchar) are optional. Other elements and
//! unknown properties are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ColoredCloud, SceneAnnotation, Semantic};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    /// Line number of `end_header`, for error messages in ASCII bodies.
    lines: usize,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut lineno = 0usize;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = r
            .read_line(&mut buf)
            .map_err(|e| parse_err(lineno + 1, format!("unreadable header: {e}")))?;
        lineno += 1;
        if n == 0 {
            return Err(parse_err(lineno, "unexpected end of file before end_header"));
        }
        let line = buf.trim_end_matches(['\n', '\r']);
        let toks: Vec<&str> = line.split_whitespace().collect();
        if lineno == 1 {
            if line.trim() != "ply" {
                return Err(parse_err(1, format!("expected magic 'ply', found '{line}'")));
            }
            continue;
        }
        match toks.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", fmt, "1.0"] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    other => return Err(parse_err(lineno, format!("unsupported format '{other}'"))),
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", cnt, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(lineno, "property before any element"))?;
                let count = Scalar::parse(cnt)
                    .ok_or_else(|| parse_err(lineno, format!("unknown type '{cnt}'")))?;
                let item = Scalar::parse(item)
                    .ok_or_else(|| parse_err(lineno, format!("unknown type '{item}'")))?;
                if !count.is_integer() {
                    return Err(parse_err(lineno, "list count type must be integral"));
                }
                el.props.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(lineno, "property before any element"))?;
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| parse_err(lineno, format!("unknown type '{ty}'")))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            ["end_header"] => break,
            _ => return Err(parse_err(lineno, format!("unrecognized header line '{line}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| parse_err(lineno, "missing format line"))?;
    Ok(Header {
        encoding,
        elements,
        lines: lineno,
    })
}

/// Column positions of the vertex properties we understand.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: [usize; 3],
    rgb_ty: Scalar,
    instance: Option<usize>,
    semantic: Option<usize>,
}

fn vertex_layout(el: &Element, header_lines: usize) -> Result<VertexLayout> {
    let find = |want: &str| -> Option<(usize, Scalar)> {
        el.props.iter().enumerate().find_map(|(k, p)| match p {
            Property::Scalar { name, ty } if name == want => Some((k, *ty)),
            _ => None,
        })
    };
    let need = |want: &str| {
        find(want).ok_or_else(|| parse_err(header_lines, format!("vertex element lacks property '{want}'")))
    };
    let (x, _) = need("x")?;
    let (y, _) = need("y")?;
    let (z, _) = need("z")?;
    let (r, rty) = need("red")?;
    let (g, _) = need("green")?;
    let (b, _) = need("blue")?;
    Ok(VertexLayout {
        xyz: [x, y, z],
        rgb: [r, g, b],
        rgb_ty: rty,
        instance: find("instance_id").map(|(k, _)| k),
        semantic: find("semantic").map(|(k, _)| k),
    })
}

/// Reads one element's rows into per-row scalar values. List properties are
/// consumed and dropped (their slot holds NaN).
fn read_rows<R: BufRead>(
    r: &mut R,
    el: &Element,
    enc: PlyEncoding,
    lineno: &mut usize,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(el.count);
    let mut line = String::new();
    for _ in 0..el.count {
        let mut vals = Vec::with_capacity(el.props.len());
        match enc {
            PlyEncoding::Ascii => {
                line.clear();
                let n = r
                    .read_line(&mut line)
                    .map_err(|e| parse_err(*lineno + 1, e.to_string()))?;
                *lineno += 1;
                if n == 0 {
                    return Err(parse_err(*lineno, format!("truncated '{}' element", el.name)));
                }
                let mut toks = line.split_whitespace();
                let mut next = |what: &str| -> Result<f64> {
                    let t = toks
                        .next()
                        .ok_or_else(|| parse_err(*lineno, format!("missing value for {what}")))?;
                    t.parse::<f64>()
                        .map_err(|_| parse_err(*lineno, format!("bad number '{t}'")))
                };
                for p in &el.props {
                    match p {
                        Property::Scalar { name, .. } => vals.push(next(name)?),
                        Property::List { .. } => {
                            let n = next("list count")? as usize;
                            for _ in 0..n {
                                next("list item")?;
                            }
                            vals.push(f64::NAN);
                        }
                    }
                }
            }
            PlyEncoding::BinaryLittleEndian => {
                let mut b = [0u8; 8];
                let mut read = |ty: Scalar| -> Result<f64> {
                    r.read_exact(&mut b[..ty.size()])
                        .map_err(|_| parse_err(*lineno, format!("truncated binary '{}' element", el.name)))?;
                    Ok(ty.read_le(&b))
                };
                for p in &el.props {
                    match p {
                        Property::Scalar { ty, .. } => vals.push(read(*ty)?),
                        Property::List { count, item } => {
                            let n = read(*count)? as usize;
                            for _ in 0..n {
                                read(*item)?;
                            }
                            vals.push(f64::NAN);
                        }
                    }
                }
            }
        }
        rows.push(vals);
    }
    Ok(rows)
}

/// Loads a cloud and, when the file has an `instance_id` column, its
/// annotation (centers and radii recomputed from the points).
pub fn load_ply(path: impl AsRef<Path>) -> Result<(ColoredCloud, Option<SceneAnnotation>)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let header = read_header(&mut r)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(header.lines, "no vertex element"))?;
    let layout = vertex_layout(&header.elements[vi], header.lines)?;
    let mut lineno = header.lines;
    let mut vertex_rows = None;
    for (k, el) in header.elements.iter().enumerate() {
        let rows = read_rows(&mut r, el, header.encoding, &mut lineno)?;
        if k == vi {
            vertex_rows = Some(rows);
            break;
        }
    }
    let rows = vertex_rows.unwrap_or_default();
    let color_scale = if layout.rgb_ty.is_integer() { 1.0 / 255.0 } else { 1.0 };
    let mut points = Vec::with_capacity(rows.len());
    let mut colors = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let p = [row[layout.xyz[0]], row[layout.xyz[1]], row[layout.xyz[2]]];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite coordinate at vertex {i}")));
        }
        let c = layout.rgb.map(|k| row[k] * color_scale);
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!("color out of range at vertex {i}")));
        }
        points.push(p);
        colors.push(c);
        if let Some(k) = layout.instance {
            let id = row[k];
            let label = if id < 0.0 { None } else { Some(id as usize) };
            if let Some(s) = layout.semantic {
                let fruit = row[s] as u8 == Semantic::Fruit as u8;
                if fruit != label.is_some() {
                    return Err(Error::Validation(format!(
                        "semantic label disagrees with instance_id at vertex {i}"
                    )));
                }
            }
            labels.push(label);
        }
    }
    let cloud = ColoredCloud { points, colors };
    let ann = match layout.instance {
        Some(_) => Some(SceneAnnotation::from_labels(&cloud, &labels)?),
        None => None,
    };
    Ok((cloud, ann))
}

/// Deterministic, well-spread display color per instance index.
fn display_color(k: usize) -> [u8; 3] {
    let h = (k as f64 * 0.618_033_988_749_895).fract();
    let hsv = |n: f64| -> u8 {
        let kk = (n + h * 6.0) % 6.0;
        let v = 1.0 - (kk.min(4.0 - kk).clamp(0.0, 1.0)) * 0.8;
        (v * 255.0).round() as u8
    };
    [hsv(5.0), hsv(3.0), hsv(1.0)]
}

fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary little-endian PLY.
pub fn save_ply(
    cloud: &ColoredCloud,
    annotation: Option<&SceneAnnotation>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_ply(cloud, annotation, path.as_ref(), PlyEncoding::BinaryLittleEndian)
}

pub fn save_ply_ascii(
    cloud: &ColoredCloud,
    annotation: Option<&SceneAnnotation>,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_ply(cloud, annotation, path.as_ref(), PlyEncoding::Ascii)
}

fn write_ply(
    cloud: &ColoredCloud,
    annotation: Option<&SceneAnnotation>,
    path: &Path,
    enc: PlyEncoding,
) -> Result<()> {
    cloud.validate()?;
    if let Some(a) = annotation {
        a.validate(cloud.len())?;
    }
    let labels = annotation.map(|a| a.point_labels());
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    let mut header = String::from("ply\n");
    header.push_str(match enc {
        PlyEncoding::Ascii => "format ascii 1.0\n",
        PlyEncoding::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    if labels.is_some() {
        header.push_str("property int instance_id\nproperty uchar semantic\n");
        header.push_str("property uchar label_red\nproperty uchar label_green\nproperty uchar label_blue\n");
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;
    for i in 0..cloud.len() {
        let p = cloud.points[i].map(|v| v as f32);
        let c = cloud.colors[i].map(quantize);
        let label = labels.as_ref().map(|l| l[i]);
        let extra = label.map(|l| {
            let id = l.map(|k| k as i32).unwrap_or(-1);
            let sem = if l.is_some() { Semantic::Fruit } else { Semantic::Background } as u8;
            let dc = l.map(display_color).unwrap_or([128, 128, 128]);
            (id, sem, dc)
        });
        match enc {
            PlyEncoding::Ascii => {
                let mut line = format!("{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
                if let Some((id, sem, dc)) = extra {
                    line.push_str(&format!(" {id} {sem} {} {} {}", dc[0], dc[1], dc[2]));
                }
                line.push('\n');
                w.write_all(line.as_bytes()).map_err(io)?;
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in p {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
                w.write_all(&c).map_err(io)?;
                if let Some((id, sem, dc)) = extra {
                    w.write_all(&id.to_le_bytes()).map_err(io)?;
                    w.write_all(&[sem]).map_err(io)?;
                    w.write_all(&dc).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}
