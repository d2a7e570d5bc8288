//! Prediction dump: a line-oriented text format shared by predictions and
//! ground truth.
//!
//! ```text
//! voxlang-dump 1
//! scene <name> <voxels>
//! semantic <class>x<run> <class>x<run> ...
//! instance <class> <score> <mask-rle>
//! referral <sentence-index> <mask-rle>
//! shape <name>
//! class <id>
//! caption <words ...>
//! similarity <v> <v> ...
//! ```
//!
//! A mask RLE lists alternating run lengths starting with a run of unset
//! voxels, e.g. `3,2,1` is `000110`. `similarity` lines form one retrieval
//! matrix in row order.

use std::fmt::Write as _;
use std::path::Path;

use super::infer::InstancePrediction;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneRecord {
    pub name: String,
    pub voxels: usize,
    pub semantic: Option<Vec<usize>>,
    pub instances: Vec<InstancePrediction>,
    /// `(sentence index, mask)`
    pub referrals: Vec<(usize, Vec<bool>)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeRecord {
    pub name: String,
    pub class: Option<usize>,
    pub caption: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionDump {
    pub scenes: Vec<SceneRecord>,
    pub shapes: Vec<ShapeRecord>,
    pub similarity: Vec<Vec<f64>>,
}

pub fn encode_mask(mask: &[bool]) -> String {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn decode_mask(rle: &str, voxels: usize) -> std::result::Result<Vec<bool>, String> {
    let mut out = Vec::with_capacity(voxels);
    let mut value = false;
    for run in rle.split(',') {
        let n: usize = run.parse().map_err(|_| format!("bad run {run:?}"))?;
        out.extend(std::iter::repeat_n(value, n));
        value = !value;
    }
    if out.len() != voxels {
        return Err(format!("mask covers {} voxels, expected {voxels}", out.len()));
    }
    Ok(out)
}

fn encode_classes(classes: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < classes.len() {
        let mut j = i;
        while j < classes.len() && classes[j] == classes[i] {
            j += 1;
        }
        parts.push(format!("{}x{}", classes[i], j - i));
        i = j;
    }
    parts.join(" ")
}

impl PredictionDump {
    pub fn to_text(&self) -> String {
        let mut s = String::from("voxlang-dump 1\n");
        for sc in &self.scenes {
            let _ = writeln!(s, "scene {} {}", sc.name, sc.voxels);
            if let Some(sem) = &sc.semantic {
                let _ = writeln!(s, "semantic {}", encode_classes(sem));
            }
            for inst in &sc.instances {
                let _ = writeln!(s, "instance {} {:e} {}", inst.class, inst.score, encode_mask(&inst.mask));
            }
            for (r, m) in &sc.referrals {
                let _ = writeln!(s, "referral {} {}", r, encode_mask(m));
            }
        }
        for sh in &self.shapes {
            let _ = writeln!(s, "shape {}", sh.name);
            if let Some(c) = sh.class {
                let _ = writeln!(s, "class {c}");
            }
            if let Some(c) = &sh.caption {
                let _ = writeln!(s, "caption {c}");
            }
        }
        for row in &self.similarity {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "similarity {}", vals.join(" "));
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h.trim() == "voxlang-dump 1" => {}
            _ => return Err(err(1, "missing `voxlang-dump 1` header".into())),
        }
        let mut dump = PredictionDump::default();
        for (no, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            let f: Vec<&str> = rest.split_whitespace().collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(no, format!("bad integer {s:?}")));
            fn scene(d: &mut PredictionDump) -> Option<&mut SceneRecord> {
                d.scenes.last_mut()
            }
            let orphan = || err(no, format!("`{kind}` before any `scene`"));
            match kind {
                "scene" if f.len() == 2 => dump.scenes.push(SceneRecord {
                    name: f[0].to_string(),
                    voxels: num(f[1])?,
                    ..Default::default()
                }),
                "semantic" => {
                    let sc = scene(&mut dump).ok_or_else(orphan)?;
                    let mut classes = Vec::with_capacity(sc.voxels);
                    for part in &f {
                        let (c, n) = part.split_once('x').ok_or_else(|| err(no, format!("bad run {part:?}")))?;
                        classes.extend(std::iter::repeat_n(num(c)?, num(n)?));
                    }
                    if classes.len() != sc.voxels {
                        return Err(err(no, format!("semantic map covers {} of {} voxels", classes.len(), sc.voxels)));
                    }
                    sc.semantic = Some(classes);
                }
                "instance" if f.len() == 3 => {
                    let class = num(f[0])?;
                    let score: f64 = f[1].parse().map_err(|_| err(no, format!("bad score {:?}", f[1])))?;
                    let sc = scene(&mut dump).ok_or_else(orphan)?;
                    let mask = decode_mask(f[2], sc.voxels).map_err(|m| err(no, m))?;
                    sc.instances.push(InstancePrediction { class, score, mask });
                }
                "referral" if f.len() == 2 => {
                    let idx = num(f[0])?;
                    let sc = scene(&mut dump).ok_or_else(orphan)?;
                    let mask = decode_mask(f[1], sc.voxels).map_err(|m| err(no, m))?;
                    sc.referrals.push((idx, mask));
                }
                "shape" if f.len() == 1 => dump.shapes.push(ShapeRecord {
                    name: f[0].to_string(),
                    ..Default::default()
                }),
                "class" | "caption" => {
                    let sh = dump
                        .shapes
                        .last_mut()
                        .ok_or_else(|| err(no, format!("`{kind}` before any `shape`")))?;
                    if kind == "class" && f.len() == 1 {
                        sh.class = Some(num(f[0])?);
                    } else if kind == "caption" {
                        sh.caption = Some(f.join(" "));
                    } else {
                        return Err(err(no, format!("malformed `{kind}` record")));
                    }
                }
                "similarity" => {
                    let row = f
                        .iter()
                        .map(|v| v.parse::<f64>().map_err(|_| err(no, format!("bad value {v:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    dump.similarity.push(row);
                }
                _ => return Err(err(no, format!("unrecognized record {line:?}"))),
            }
        }
        Ok(dump)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PredictionDump::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rle() {
        let m = [false, false, false, true, true, false];
        assert_eq!(encode_mask(&m), "3,2,1");
        assert_eq!(decode_mask("3,2,1", 6).unwrap(), m);
        assert_eq!(encode_mask(&[true]), "0,1");
        assert_eq!(encode_mask(&[]), "0");
        assert!(decode_mask("3,2", 6).is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let dump = PredictionDump {
            scenes: vec![SceneRecord {
                name: "s0".into(),
                voxels: 4,
                semantic: Some(vec![1, 1, 0, 2]),
                instances: vec![InstancePrediction {
                    class: 1,
                    score: 0.8125,
                    mask: vec![true, true, false, false],
                }],
                referrals: vec![(0, vec![false, false, true, false])],
            }],
            shapes: vec![ShapeRecord {
                name: "a".into(),
                class: Some(3),
                caption: Some("a red chair".into()),
            }],
            similarity: vec![vec![1.0, 0.25], vec![-0.5, 2.0]],
        };
        assert_eq!(PredictionDump::parse(&dump.to_text(), "m").unwrap(), dump);
        assert!(PredictionDump::parse("voxlang-dump 1\ninstance 0 1 1\n", "m").is_err());
    }
}
