//! Cloud and mesh file I/O: XYZ and ASCII PLY clouds, OFF meshes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::cloud::{Point3, PointCloud, TriMesh};
use crate::error::{Error, Result};

/// Supported point cloud file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    /// Detects the format from a file extension, defaulting to XYZ.
    pub fn from_path(path: &Path) -> CloudFormat {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("ply") => CloudFormat::Ply,
            _ => CloudFormat::Xyz,
        }
    }
}

/// Formats a coordinate like C's `%.9g`: 9 significant digits, trailing
/// zeros trimmed, scientific notation outside [1e-4, 1e9).
pub fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    const P: i32 = 9;
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mant, exp) = sci.split_once('e').expect("exponential format");
    let e10: i32 = exp.parse().expect("exponent");
    if (-4..P).contains(&e10) {
        let decimals = (P - 1 - e10).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{:+03}", trim_zeros(mant), e10)
    }
}

fn trim_zeros(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    let t = s.trim_end_matches('0');
    t.trim_end_matches('.').to_string()
}

fn parse_coord(tok: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("`{tok}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("non-finite coordinate `{tok}`"),
        });
    }
    Ok(v)
}

/// Reads a point cloud. Point order follows the file.
pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::IoRead {
        path: path.to_path_buf(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    match format {
        CloudFormat::Xyz => read_xyz(reader, path),
        CloudFormat::Ply => read_ply(reader, path),
    }
}

fn read_xyz(reader: impl BufRead, path: &Path) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::IoRead {
            path: path.to_path_buf(),
            source: e,
        })?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let mut it = t.split_whitespace();
        let mut coord = [0.0f64; 3];
        for c in &mut coord {
            let tok = it.next().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: "fewer than 3 coordinates".into(),
            })?;
            *c = parse_coord(tok, path, lineno)?;
        }
        // extra columns (normals, colors) are ignored
        pts.push(Point3::new(coord[0], coord[1], coord[2]));
    }
    if pts.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no points", path.display())));
    }
    PointCloud::new(pts)
}

fn read_ply(reader: impl BufRead, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let next_content = |lines: &mut std::iter::Enumerate<std::io::Lines<_>>| -> Result<Option<(usize, String)>> {
        for (i, l) in lines.by_ref() {
            let l: String = l.map_err(|e| Error::IoRead {
                path: path.to_path_buf(),
                source: e,
            })?;
            let t = l.trim().to_string();
            if !t.is_empty() {
                return Ok(Some((i + 1, t)));
            }
        }
        Ok(None)
    };

    match next_content(&mut lines)? {
        Some((_, l)) if l == "ply" => {}
        Some((n, l)) => return Err(err(n, format!("expected `ply` magic, found `{l}`"))),
        None => return Err(Error::EmptyInput(format!("{} is empty", path.display()))),
    }

    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut saw_format = false;
    let mut header_end = 0usize;
    while let Some((n, l)) = next_content(&mut lines)? {
        let mut it = l.split_whitespace();
        match it.next() {
            Some("format") => {
                let rest: Vec<&str> = it.collect();
                if rest.first() != Some(&"ascii") {
                    return Err(err(n, "only ascii PLY is supported".into()));
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let kind = it.next().unwrap_or("");
                if kind == "vertex" {
                    if vertex_count.is_some() {
                        return Err(err(n, "duplicate vertex element".into()));
                    }
                    let c: usize = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(n, "bad vertex count".into()))?;
                    vertex_count = Some(c);
                    in_vertex_element = true;
                } else {
                    if vertex_count.is_none() {
                        return Err(err(n, format!("element `{kind}` precedes vertex element")));
                    }
                    in_vertex_element = false;
                }
            }
            Some("property") => {
                if in_vertex_element {
                    let name = l.split_whitespace().last().unwrap_or("").to_string();
                    props.push(name);
                }
            }
            Some("end_header") => {
                header_end = n;
                break;
            }
            Some(other) => return Err(err(n, format!("unexpected header keyword `{other}`"))),
            None => {}
        }
    }
    if !saw_format {
        return Err(err(header_end, "missing `format` line".into()));
    }
    let count = vertex_count.ok_or_else(|| err(header_end, "missing vertex element".into()))?;
    let ix = props.iter().position(|p| p == "x");
    let iy = props.iter().position(|p| p == "y");
    let iz = props.iter().position(|p| p == "z");
    let (ix, iy, iz) = match (ix, iy, iz) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(err(header_end, "vertex element lacks x/y/z properties".into())),
    };

    let mut pts = Vec::with_capacity(count);
    while pts.len() < count {
        let (n, l) = next_content(&mut lines)?.ok_or_else(|| {
            err(
                header_end,
                format!("expected {count} vertex lines, found {}", pts.len()),
            )
        })?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < props.len() {
            return Err(err(n, format!("expected {} values", props.len())));
        }
        pts.push(Point3::new(
            parse_coord(toks[ix], path, n)?,
            parse_coord(toks[iy], path, n)?,
            parse_coord(toks[iz], path, n)?,
        ));
    }
    if pts.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no vertices", path.display())));
    }
    PointCloud::new(pts)
}

/// Writes a point cloud at 9 significant digits.
pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    write_cloud_with_comment(cloud, path, format, None)
}

/// Same as [`write_cloud`] but embeds a comment line (XYZ `#` line or PLY
/// `comment`), used by the CLI to stamp outputs with a config hash.
pub fn write_cloud_with_comment(
    cloud: &PointCloud,
    path: &Path,
    format: CloudFormat,
    comment: Option<&str>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::IoWrite {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::IoWrite {
        path: path.to_path_buf(),
        source: e,
    };
    match format {
        CloudFormat::Xyz => {
            if let Some(c) = comment {
                writeln!(w, "# {c}").map_err(io_err)?;
            }
            for p in cloud.iter() {
                writeln!(w, "{} {} {}", fmt_g(p.x), fmt_g(p.y), fmt_g(p.z)).map_err(io_err)?;
            }
        }
        CloudFormat::Ply => {
            writeln!(w, "ply").map_err(io_err)?;
            writeln!(w, "format ascii 1.0").map_err(io_err)?;
            if let Some(c) = comment {
                writeln!(w, "comment {c}").map_err(io_err)?;
            }
            writeln!(w, "element vertex {}", cloud.len()).map_err(io_err)?;
            writeln!(w, "property float x").map_err(io_err)?;
            writeln!(w, "property float y").map_err(io_err)?;
            writeln!(w, "property float z").map_err(io_err)?;
            writeln!(w, "end_header").map_err(io_err)?;
            for p in cloud.iter() {
                writeln!(w, "{} {} {}", fmt_g(p.x), fmt_g(p.y), fmt_g(p.z)).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Reads an OFF mesh, fan-triangulating polygons with more than 3 vertices.
pub fn read_mesh(path: &Path) -> Result<TriMesh> {
    let file = File::open(path).map_err(|e| Error::IoRead {
        path: path.to_path_buf(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut content: Vec<(usize, String)> = Vec::new();
    for (i, l) in reader.lines().enumerate() {
        let l = l.map_err(|e| Error::IoRead {
            path: path.to_path_buf(),
            source: e,
        })?;
        let t = l.trim().to_string();
        if !t.is_empty() && !t.starts_with('#') {
            content.push((i + 1, t));
        }
    }
    if content.is_empty() {
        return Err(Error::EmptyInput(format!("{} is empty", path.display())));
    }

    let (hline, header) = content[0].clone();
    let mut counts_line_idx = 1;
    let counts_str: String;
    if header == "OFF" {
        if content.len() < 2 {
            return Err(err(hline, "missing counts line".into()));
        }
        counts_str = content[1].1.clone();
        counts_line_idx = 2;
    } else if let Some(rest) = header.strip_prefix("OFF") {
        // counts on the same line as the header
        counts_str = rest.trim().to_string();
    } else {
        return Err(err(hline, format!("expected OFF header, found `{header}`")));
    }
    let counts: Vec<usize> = counts_str
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err(hline, format!("bad counts line `{counts_str}`")))?;
    if counts.len() < 2 {
        return Err(err(hline, "counts line needs vertex and face counts".into()));
    }
    let (nv, nf) = (counts[0], counts[1]);

    if content.len() < counts_line_idx + nv + nf {
        return Err(err(
            hline,
            format!(
                "expected {} vertex + {} face lines, found {}",
                nv,
                nf,
                content.len() - counts_line_idx
            ),
        ));
    }

    let mut verts = Vec::with_capacity(nv);
    for (n, l) in &content[counts_line_idx..counts_line_idx + nv] {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(err(*n, "vertex line needs 3 coordinates".into()));
        }
        verts.push(Point3::new(
            parse_coord(toks[0], path, *n)?,
            parse_coord(toks[1], path, *n)?,
            parse_coord(toks[2], path, *n)?,
        ));
    }

    let mut faces = Vec::with_capacity(nf);
    for (n, l) in &content[counts_line_idx + nv..counts_line_idx + nv + nf] {
        let toks: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(*n, format!("bad face line `{l}`")))?;
        if toks.is_empty() || toks.len() != toks[0] + 1 {
            return Err(err(*n, "face line count mismatch".into()));
        }
        let m = toks[0];
        if m < 3 {
            return Err(err(*n, format!("face with {m} vertices")));
        }
        for j in 1..m - 1 {
            faces.push([toks[1], toks[1 + j], toks[2 + j]]);
        }
    }
    TriMesh::new(verts, faces)
}

/// Writes an OFF mesh.
pub fn write_mesh(mesh: &TriMesh, path: &Path, comment: Option<&str>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::IoWrite {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::IoWrite {
        path: path.to_path_buf(),
        source: e,
    };
    writeln!(w, "OFF").map_err(io_err)?;
    if let Some(c) = comment {
        writeln!(w, "# {c}").map_err(io_err)?;
    }
    writeln!(w, "{} {} 0", mesh.vertices().len(), mesh.faces().len()).map_err(io_err)?;
    for v in mesh.vertices() {
        writeln!(w, "{} {} {}", fmt_g(v.x), fmt_g(v.y), fmt_g(v.z)).map_err(io_err)?;
    }
    for f in mesh.faces() {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2]).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
