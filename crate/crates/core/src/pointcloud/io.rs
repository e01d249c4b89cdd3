//! `PCSP1` point-cloud files.
//!
//! Text: a header line `PCSP1 <N> <has_labels:0|1>` followed by `N` lines
//! `x y z [label]`. Binary: the same header line followed by `N` records of
//! little-endian `f32 x, f32 y, f32 z` and, when labelled, a `u32` label.

use std::fs;
use std::path::Path;

use super::{PointCloud, PointCloudError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Binary,
}

fn header(pc: &PointCloud) -> String {
    format!("PCSP1 {} {}\n", pc.len(), u8::from(pc.labels.is_some()))
}

pub fn to_text(pc: &PointCloud) -> String {
    let mut s = header(pc);
    for (i, p) in pc.coords.iter().enumerate() {
        match &pc.labels {
            Some(l) => s.push_str(&format!("{} {} {} {}\n", p[0], p[1], p[2], l[i])),
            None => s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2])),
        }
    }
    s
}

pub fn to_binary(pc: &PointCloud) -> Vec<u8> {
    let mut out = header(pc).into_bytes();
    for (i, p) in pc.coords.iter().enumerate() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(l) = &pc.labels {
            out.extend_from_slice(&l[i].to_le_bytes());
        }
    }
    out
}

fn parse_header(bytes: &[u8]) -> Result<(usize, bool, usize), PointCloudError> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| PointCloudError::Parse {
            line: 1,
            msg: "missing header line".into(),
        })?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| PointCloudError::Parse {
        line: 1,
        msg: "header is not UTF-8".into(),
    })?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    let bad = |msg: &str| PointCloudError::Parse {
        line: 1,
        msg: msg.to_string(),
    };
    if parts.len() != 3 || parts[0] != "PCSP1" {
        return Err(bad("expected `PCSP1 <N> <has_labels>`"));
    }
    let n: usize = parts[1].parse().map_err(|_| bad("bad point count"))?;
    let labeled = match parts[2] {
        "0" => false,
        "1" => true,
        _ => return Err(bad("has_labels must be 0 or 1")),
    };
    Ok((n, labeled, end + 1))
}

/// Parses either variant. The binary variant is recognised by an exact
/// payload size match together with at least one byte that cannot occur in
/// the text variant.
pub fn parse(bytes: &[u8], scene_id: &str) -> Result<PointCloud, PointCloudError> {
    let (n, labeled, offset) = parse_header(bytes)?;
    let payload = &bytes[offset..];
    let record = if labeled { 16 } else { 12 };
    let textual = |b: &u8| b.is_ascii_digit() || b" \t\r\n.-+eEinfINFaA".contains(b);
    if payload.len() == n * record && !payload.iter().all(textual) {
        return parse_binary(payload, n, labeled, scene_id);
    }
    parse_text(payload, n, labeled, scene_id)
}

fn parse_binary(
    payload: &[u8],
    n: usize,
    labeled: bool,
    scene_id: &str,
) -> Result<PointCloud, PointCloudError> {
    let record = if labeled { 16 } else { 12 };
    let mut coords = Vec::with_capacity(n);
    let mut labels = labeled.then(|| Vec::with_capacity(n));
    for rec in payload.chunks_exact(record) {
        let f = |k: usize| {
            f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64
        };
        coords.push([f(0), f(1), f(2)]);
        if let Some(l) = &mut labels {
            l.push(u32::from_le_bytes(rec[12..16].try_into().expect("4 bytes")));
        }
    }
    PointCloud::new(coords, labels, scene_id)
}

fn parse_text(
    payload: &[u8],
    n: usize,
    labeled: bool,
    scene_id: &str,
) -> Result<PointCloud, PointCloudError> {
    let text = std::str::from_utf8(payload).map_err(|_| PointCloudError::Parse {
        line: 2,
        msg: "body is neither text nor a binary payload of the declared size".into(),
    })?;
    let mut coords = Vec::with_capacity(n);
    let mut labels = labeled.then(|| Vec::with_capacity(n));
    let expected = if labeled { 4 } else { 3 };
    for (k, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let lineno = k + 2;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != expected {
            return Err(PointCloudError::Parse {
                line: lineno,
                msg: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64, PointCloudError> {
            s.parse().map_err(|_| PointCloudError::Parse {
                line: lineno,
                msg: format!("bad number `{s}`"),
            })
        };
        coords.push([num(fields[0])?, num(fields[1])?, num(fields[2])?]);
        if let Some(l) = &mut labels {
            l.push(fields[3].parse().map_err(|_| PointCloudError::Parse {
                line: lineno,
                msg: format!("bad label `{}`", fields[3]),
            })?);
        }
    }
    if coords.len() != n {
        return Err(PointCloudError::Parse {
            line: coords.len() + 2,
            msg: format!("header declares {n} points, found {}", coords.len()),
        });
    }
    PointCloud::new(coords, labels, scene_id)
}

pub fn write(path: &Path, pc: &PointCloud, format: Format) -> Result<(), PointCloudError> {
    match format {
        Format::Text => fs::write(path, to_text(pc))?,
        Format::Binary => fs::write(path, to_binary(pc))?,
    }
    Ok(())
}

/// Reads a cloud; the scene id is the file stem.
pub fn read(path: &Path) -> Result<PointCloud, PointCloudError> {
    let bytes = fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse(&bytes, &id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloud {
        PointCloud::new(
            vec![[0.1, -2.5, 3.0], [1e-3, 0.0, -0.75]],
            Some(vec![3, 0]),
            "s",
        )
        .unwrap()
    }

    #[test]
    fn text_round_trip_is_exact() {
        let pc = sample();
        let text = to_text(&pc);
        assert!(text.starts_with("PCSP1 2 1\n"));
        assert_eq!(parse(text.as_bytes(), "s").unwrap(), pc);
    }

    #[test]
    fn binary_round_trip_at_f32_precision() {
        let pc = sample();
        let back = parse(&to_binary(&pc), "s").unwrap();
        assert_eq!(back.labels, pc.labels);
        for (a, b) in back.coords.iter().zip(&pc.coords) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
    }

    #[test]
    fn unlabeled_text() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]], None, "u").unwrap();
        assert_eq!(parse(to_text(&pc).as_bytes(), "u").unwrap(), pc);
    }

    #[test]
    fn malformed_input_reports_line() {
        let err = parse(b"PCSP1 2 0\n1 2 3\n1 2\n", "x").unwrap_err();
        assert!(
            matches!(err, PointCloudError::Parse { line: 3, .. }),
            "{err}"
        );
        assert!(parse(b"PCSP2 1 0\n1 2 3\n", "x").is_err());
        assert!(parse(b"PCSP1 2 0\n1 2 3\n", "x").is_err());
    }
}
