//! Point, label and file helpers shared by the CLI.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

fn is_skippable(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

fn parse_floats(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(lineno, format!("not a number: {tok:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::parse(lineno, format!("non-finite value {tok:?}")))
            }
        })
        .collect()
}

/// Parses `x y z` or `x y z nx ny nz` rows. Every row must have the same width.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        if is_skippable(line) {
            continue;
        }
        let lineno = i + 1;
        let vals = parse_floats(line, lineno)?;
        if vals.len() != 3 && vals.len() != 6 {
            return Err(Error::parse(lineno, format!("expected 3 or 6 values, found {}", vals.len())));
        }
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(Error::parse(lineno, format!("expected {w} values like the first row, found {}", vals.len())));
            }
            _ => {}
        }
        positions.push(Vec3::new(vals[0], vals[1], vals[2]));
        if vals.len() == 6 {
            normals.push(Vec3::new(vals[3], vals[4], vals[5]));
        }
    }
    if positions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let normals = (width == Some(6)).then_some(normals);
    PointCloud::new(positions, normals)
}

pub fn write_xyz<W: Write>(cloud: &PointCloud, mut w: W) -> std::io::Result<()> {
    for i in 0..cloud.len() {
        let p = cloud.position(i);
        match cloud.normal(i) {
            Some(n) => writeln!(w, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z)?,
            None => writeln!(w, "{} {} {}", p.x, p.y, p.z)?,
        }
    }
    Ok(())
}

/// ASCII PLY with `x y z [nx ny nz]` vertex properties; other vertex
/// properties are ignored, as are elements after the vertices.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(1, "missing 'ply' magic")),
    }
    let mut n_vertices: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;
    let mut elements_seen = 0usize;
    for (i, line) in lines.by_ref() {
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _] => {
                if *fmt != "ascii" {
                    return Err(Error::parse(lineno, format!("unsupported PLY format {fmt:?}; only ascii is read")));
                }
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::parse(lineno, "bad element count"))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    if elements_seen > 0 {
                        return Err(Error::parse(lineno, "vertex element must come first"));
                    }
                    n_vertices = Some(count);
                }
                elements_seen += 1;
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(Error::parse(lineno, "list properties on vertices are not supported"));
                }
            }
            ["property", _ty, name] => {
                if in_vertex {
                    props.push((*name).to_string());
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(Error::parse(lineno, format!("unrecognized header line {line:?}"))),
        }
    }
    if !header_done {
        return Err(Error::parse(text.lines().count().max(1), "missing end_header"));
    }
    let n = n_vertices.ok_or_else(|| Error::parse(1, "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::parse(1, "vertex element lacks x, y, z")),
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut positions = Vec::with_capacity(n.min(1 << 20));
    let mut normals = Vec::new();
    for (i, line) in lines {
        if positions.len() == n {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let vals = parse_floats(line, i + 1)?;
        if vals.len() != props.len() {
            return Err(Error::parse(i + 1, format!("expected {} values, found {}", props.len(), vals.len())));
        }
        positions.push(Vec3::new(vals[xi], vals[yi], vals[zi]));
        if let Some((a, b, c)) = normal_cols {
            normals.push(Vec3::new(vals[a], vals[b], vals[c]));
        }
    }
    if positions.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: positions.len(),
        });
    }
    if positions.is_empty() {
        return Err(Error::EmptyInput);
    }
    PointCloud::new(positions, normal_cols.map(|_| normals))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads `.ply` files as PLY and anything else as XYZ.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = read_text(path)?;
    let is_ply = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    let parsed = if is_ply { parse_ply(&text) } else { parse_xyz(&text) };
    parsed.map_err(|e| e.with_path(path))
}

/// One non-negative integer per line.
pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if is_skippable(line) {
            continue;
        }
        let v = line
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::parse(i + 1, format!("not a label: {:?}", line.trim())))?;
        out.push(v);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    parse_labels(&read_text(path)?).map_err(|e| e.with_path(path))
}

pub fn format_labels(labels: &[usize]) -> String {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    s
}

/// Writes through a sibling temporary file and renames it into place, so a
/// failed run never leaves a partial output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable value");
    v.push(b'\n');
    v
}
