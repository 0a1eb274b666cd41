//! `.xyz` point files: one point per line, three space-separated decimal
//! coordinates, `#` comment lines ignored.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use super::{GeometryError, PointCloud, Result};

pub fn parse_xyz(text: &str, source: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| GeometryError::Parse {
            path: source.to_string(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(err(format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut xyz = [0.0; 3];
        for (slot, field) in xyz.iter_mut().zip(&fields[..3]) {
            *slot = field
                .parse::<f64>()
                .map_err(|_| err(format!("malformed number {field:?}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite coordinate {field:?}")));
            }
        }
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }
    PointCloud::new(points)
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_xyz(&text, &path.display().to_string())
}

/// Writes coordinates with round-trip precision.
pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 60);
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    atomic_write(path, out.as_bytes())
}

/// Six-column variant: coordinates followed by an 8-bit RGB triple.
pub fn write_xyz_rgb(path: &Path, cloud: &PointCloud, colors: &[[u8; 3]]) -> Result<()> {
    assert_eq!(cloud.len(), colors.len(), "one color per point");
    let mut out = String::with_capacity(cloud.len() * 72);
    for (p, c) in cloud.points().iter().zip(colors) {
        let _ = writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2]);
    }
    atomic_write(path, out.as_bytes())
}

/// Writes to a sibling temporary file, then renames it into place.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let c = parse_xyz("# header\n0 0 0\n\n1.5 -2 3e-1\n", "mem").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points()[1], Point3::new(1.5, -2.0, 0.3));
    }

    #[test]
    fn malformed_number_names_the_line() {
        let err = parse_xyz("0 0 0\n1 abc 2\n", "f.xyz").unwrap_err();
        match err {
            GeometryError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_xyz("1 2\n", "f.xyz").is_err());
    }

    #[test]
    fn write_then_read_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        let c = PointCloud::from_rows(&[[0.1, -1.0 / 3.0, 2.0e-7], [1.0, 2.0, 3.0]]).unwrap();
        write_xyz(&path, &c).unwrap();
        assert_eq!(read_xyz(&path).unwrap(), c);
        let rgb = dir.path().join("c_rgb.xyz");
        write_xyz_rgb(&rgb, &c, &[[255, 0, 0], [0, 0, 255]]).unwrap();
        let text = std::fs::read_to_string(&rgb).unwrap();
        assert!(text.lines().all(|l| l.split(' ').count() == 6));
        // extra columns are ignored on read
        assert_eq!(read_xyz(&rgb).unwrap(), c);
    }
}
