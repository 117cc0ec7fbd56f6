//! ASCII PLY reader/writer for coloured point clouds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::{PointCloud, Rgb};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn to_ply_string<T: Real>(cloud: &PointCloud<T>) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "comment frame {}", cloud.frame_tag());
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.colors().is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x.as_f64(), p.y.as_f64(), p.z.as_f64());
        if let Some(c) = cloud.colors() {
            let _ = write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        s.push('\n');
    }
    s
}

pub fn save_ply<T: Real>(cloud: &PointCloud<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_ply_string(cloud)).map_err(|e| Error::io(path, e))
}

pub fn load_ply<T: Real>(path: impl AsRef<Path>) -> Result<PointCloud<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses the vertex element of an ASCII PLY document. Unknown vertex
/// properties are skipped; elements after `vertex` are ignored.
pub fn parse_ply<T: Real>(text: &str) -> Result<PointCloud<T>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, other)) => return Err(parse_err(n, format!("expected 'ply', found '{other}'"))),
        None => return Err(parse_err(1, "empty file")),
    }

    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut frame_tag = String::from("unknown");
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(parse_err(n, "only ascii PLY is supported"));
                }
            }
            Some("comment") => {
                if tok.next() == Some("frame") {
                    frame_tag = tok.collect::<Vec<_>>().join(" ");
                }
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| parse_err(n, "element without name"))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(n, "element count is not an integer"))?;
                in_vertex = name == "vertex";
                if in_vertex {
                    vertex_count = Some(count);
                }
            }
            Some("property") => {
                if in_vertex {
                    let parts: Vec<&str> = tok.collect();
                    if parts.first() == Some(&"list") || parts.len() != 2 {
                        return Err(parse_err(n, "unsupported vertex property"));
                    }
                    props.push(parts[1].to_string());
                }
            }
            Some("end_header") => {
                header_end = Some(n);
                break;
            }
            Some("obj_info") | None => {}
            Some(other) => return Err(parse_err(n, format!("unknown header keyword '{other}'"))),
        }
    }
    let header_end = header_end.ok_or_else(|| parse_err(text.lines().count(), "missing end_header"))?;
    let count = vertex_count.ok_or_else(|| parse_err(header_end, "no vertex element"))?;

    let find = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(header_end, "vertex element lacks x/y/z")),
    };
    let color_idx = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };

    let mut points = Vec::with_capacity(count);
    let mut colors: Vec<Rgb> = Vec::with_capacity(if color_idx.is_some() { count } else { 0 });
    let mut last_line = header_end;
    for (n, line) in lines {
        if points.len() == count {
            break;
        }
        last_line = n;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < props.len() {
            return Err(parse_err(
                n,
                format!("expected {} values, found {}", props.len(), fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| parse_err(n, format!("invalid number '{}'", fields[i])))
        };
        points.push(Vector3::new(T::lit(num(xi)?), T::lit(num(yi)?), T::lit(num(zi)?)));
        if let Some(ci) = color_idx {
            let mut rgb = [0u8; 3];
            for (ch, &idx) in ci.iter().enumerate() {
                rgb[ch] = fields[idx]
                    .parse::<u8>()
                    .map_err(|_| parse_err(n, format!("invalid color '{}'", fields[idx])))?;
            }
            colors.push(rgb);
        }
    }
    if points.len() != count {
        return Err(parse_err(
            last_line,
            format!("expected {count} vertices, found {}", points.len()),
        ));
    }
    PointCloud::with_colors(points, color_idx.map(|_| colors), frame_tag).map_err(|e| match e {
        Error::InvalidInput(m) => parse_err(header_end, m),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn three_point_round_trip() {
        let c = PointCloud::with_colors(
            vec![
                Vector3::new(0.1, 0.2, 0.3),
                Vector3::new(-1.0e-7, 123.456789012345, 1e12),
                Vector3::new(7.0, 8.0, 9.0),
            ],
            Some(vec![[1, 2, 3], [4, 5, 6], [255, 0, 128]]),
            "base",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        save_ply(&c, &p).unwrap();
        let back: PointCloud<f64> = load_ply(&p).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn zero_vertex_file() {
        let text = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        let c: PointCloud<f64> = parse_ply(text).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn truncated_file_names_counts() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n4 5 6\n";
        let err = parse_ply::<f64>(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 3 vertices, found 2"), "{msg}");
        assert!(matches!(err, Error::Parse { line: 9, .. }), "{err:?}");
    }

    #[test]
    fn malformed_header_reports_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex x\n";
        assert!(matches!(parse_ply::<f64>(text), Err(Error::Parse { line: 3, .. })));
        let text = "pl\n";
        assert!(matches!(parse_ply::<f64>(text), Err(Error::Parse { line: 1, .. })));
        let text = "ply\nformat binary_little_endian 1.0\n";
        assert!(matches!(parse_ply::<f64>(text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn bad_number_reports_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 two 3\n";
        assert!(matches!(parse_ply::<f64>(text), Err(Error::Parse { line: 8, .. })));
    }

    proptest! {
        #[test]
        fn save_load_identity(pts in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6, -1e6f64..1e6), 0..40)) {
            let c = PointCloud::new(pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect(), "base").unwrap();
            let back: PointCloud<f64> = parse_ply(&to_ply_string(&c)).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
