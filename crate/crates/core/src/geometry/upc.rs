//! UPC v1: `UPC 1 <N> <flags>` followed by `N` whitespace-separated rows.
//!
//! `flags` is one of `xyzrgb`, `xyzrgb+sem`, `xyzrgb+sem+inst`. Floats are
//! written with 17 significant digits so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

pub fn write_upc(pc: &PointCloud) -> String {
    let flags = match (&pc.semantic, &pc.instance) {
        (Some(_), Some(_)) => "xyzrgb+sem+inst",
        (Some(_), None) => "xyzrgb+sem",
        _ => "xyzrgb",
    };
    let mut out = format!("UPC 1 {} {}\n", pc.len(), flags);
    for i in 0..pc.len() {
        let p = pc.positions[i];
        let c = pc.colors[i];
        let _ = write!(
            out,
            "{:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            p[0], p[1], p[2], c[0], c[1], c[2]
        );
        if let Some(sem) = &pc.semantic {
            let _ = write!(out, " {}", sem[i]);
            if let Some(inst) = &pc.instance {
                let _ = write!(out, " {}", inst[i]);
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_upc(text: &str, origin: &str) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 4 || head[0] != "UPC" || head[1] != "1" {
        return Err(err(1, format!("bad header {header:?}")));
    }
    let n: usize = head[2]
        .parse()
        .map_err(|_| err(1, format!("bad point count {:?}", head[2])))?;
    let (has_sem, has_inst) = match head[3] {
        "xyzrgb" => (false, false),
        "xyzrgb+sem" => (true, false),
        "xyzrgb+sem+inst" => (true, true),
        other => return Err(err(1, format!("unknown flags {other:?}"))),
    };
    let width = 6 + usize::from(has_sem) + usize::from(has_inst);

    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut sem = Vec::new();
    let mut inst = Vec::new();
    let mut last_line = 1;
    for (line_no, line) in lines {
        last_line = line_no;
        if line.trim().is_empty() {
            continue;
        }
        if positions.len() == n {
            return Err(err(line_no, format!("more than the declared {n} rows")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != width {
            return Err(err(line_no, format!("expected {width} fields, found {}", fields.len())));
        }
        let mut vals = [0.0; 6];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = fields[k]
                .parse()
                .map_err(|_| err(line_no, format!("bad number {:?}", fields[k])))?;
        }
        positions.push([vals[0], vals[1], vals[2]]);
        colors.push([vals[3], vals[4], vals[5]]);
        if has_sem {
            sem.push(fields[6].parse().map_err(|_| err(line_no, format!("bad label {:?}", fields[6])))?);
        }
        if has_inst {
            inst.push(fields[7].parse().map_err(|_| err(line_no, format!("bad label {:?}", fields[7])))?);
        }
    }
    if positions.len() != n {
        return Err(err(last_line, format!("declared {n} rows but found {}", positions.len())));
    }
    let pc = PointCloud::new(positions, colors).map_err(|e| err(1, e.to_string()))?;
    if has_sem {
        pc.with_labels(sem, has_inst.then_some(inst))
    } else {
        Ok(pc)
    }
}

pub fn load_pointcloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_upc(&text, &path.display().to_string())
}

pub fn save_pointcloud(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_upc(pc)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_file() {
        let pc = parse_upc("UPC 1 1 xyzrgb\n0.5 1 2 0 0.25 1\n", "mem").unwrap();
        assert_eq!(pc.len(), 1);
        assert_eq!(pc.positions[0], [0.5, 1.0, 2.0]);
    }

    #[test]
    fn short_file_reports_line() {
        let text = "UPC 1 5 xyzrgb\n".to_string() + &"0 0 0 0 0 0\n".repeat(4);
        match parse_upc(&text, "mem") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("declared 5"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_and_rows() {
        assert!(parse_upc("PLY 1 1 xyzrgb\n0 0 0 0 0 0\n", "m").is_err());
        assert!(parse_upc("UPC 1 1 xyz\n0 0 0\n", "m").is_err());
        let e = parse_upc("UPC 1 2 xyzrgb+sem\n0 0 0 0 0 0 1\n0 0 0 0 0 0\n", "m").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn random_cloud_roundtrips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(256);
        let n = 256;
        let pos = (0..n).map(|_| [rng.gen_range(-10.0..10.0), rng.gen::<f64>() * 1e-7, rng.gen_range(-1e6..1e6)]).collect();
        let col = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let sem = (0..n).map(|_| rng.gen_range(0..20)).collect();
        let inst = (0..n).map(|_| rng.gen_range(0..100)).collect();
        let pc = PointCloud::new(pos, col).unwrap().with_labels(sem, Some(inst)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.upc");
        save_pointcloud(&pc, &path).unwrap();
        let back = load_pointcloud(&path).unwrap();
        for (a, b) in pc.positions.iter().flatten().zip(back.positions.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in pc.colors.iter().flatten().zip(back.colors.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(pc, back);
    }
}
