//! Synthetic scenes and shapes built from parametric primitives, the manifest
//! that lists them, and conversion into training samples.
//!
//! ```text
//! voxlang-manifest 1
//! classes box ball panel pillar
//! scene <name> <upc path>
//! refer <scene name> <instance label> <class,class,...> <sentence ...>
//! shape <name> <upc path> <class> <caption ...>
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{load_pointcloud, save_pointcloud, voxelize, PointCloud, VoxelGrid};
use crate::model::{Referral, SceneSample, ShapeSample};
use crate::router::dump::{PredictionDump, SceneRecord, ShapeRecord};
use crate::router::InstancePrediction;

pub const CLASSES: [&str; 4] = ["box", "ball", "panel", "pillar"];

/// Two named colors per class; a color word identifies its class.
pub const PALETTE: [[(&str, [f64; 3]); 2]; 4] = [
    [("red", [0.85, 0.12, 0.10]), ("orange", [0.95, 0.55, 0.08])],
    [("green", [0.15, 0.70, 0.20]), ("yellow", [0.90, 0.85, 0.15])],
    [("blue", [0.12, 0.28, 0.85]), ("purple", [0.55, 0.18, 0.70])],
    [("white", [0.93, 0.93, 0.93]), ("gray", [0.45, 0.45, 0.45])],
];

/// Shape variants: vertical stretch applied before normalization.
pub const PROPORTIONS: [(&str, f64); 2] = [("tall", 1.7), ("flat", 0.55)];

const MIN_POINTS: usize = 20;
/// Points per voxel-face area of surface.
const DENSITY: f64 = 2.5;
const COLOR_NOISE: f64 = 0.02;
/// Side of the square floor cell holding one scene object.
const CELL: f64 = 0.16;

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub scenes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Referring sentences per scene, capped by its instance count.
    pub referrals: usize,
    pub shapes: usize,
    pub scene_voxel: f64,
    pub shape_voxel: f64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_instances == 0 || self.min_instances > self.max_instances || self.max_instances > 4 {
            return Err(Error::Input("instances per scene must satisfy 1 <= min <= max <= 4".into()));
        }
        if !(self.scene_voxel > 0.0 && self.shape_voxel > 0.0) {
            return Err(Error::Input("voxel sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferralEntry {
    /// Instance label in the scene's point cloud.
    pub instance: u32,
    pub categories: Vec<usize>,
    pub sentence: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEntry {
    pub name: String,
    pub path: PathBuf,
    pub referrals: Vec<ReferralEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeEntry {
    pub name: String,
    pub path: PathBuf,
    pub class: usize,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub scenes: Vec<SceneEntry>,
    pub shapes: Vec<ShapeEntry>,
}

/// Manifest plus the point clouds it names.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scene_clouds: Vec<PointCloud>,
    pub shape_clouds: Vec<PointCloud>,
}

enum Primitive {
    Cuboid([f64; 3]),
    Ellipsoid([f64; 3]),
    /// Vertical rectangle in the x-z plane.
    Panel(f64, f64),
    /// Vertical cylinder: radius, half height.
    Cylinder(f64, f64),
}

impl Primitive {
    fn for_class(class: usize, half: f64, stretch: f64) -> Primitive {
        match class {
            0 => Primitive::Cuboid([half, half, half * stretch]),
            1 => Primitive::Ellipsoid([half, half, half * stretch]),
            2 => Primitive::Panel(half, half * stretch),
            _ => Primitive::Cylinder(half * 0.5, half * 1.6 * stretch),
        }
    }

    fn half_height(&self) -> f64 {
        match *self {
            Primitive::Cuboid(e) | Primitive::Ellipsoid(e) => e[2],
            Primitive::Panel(_, h) | Primitive::Cylinder(_, h) => h,
        }
    }

    fn area(&self) -> f64 {
        match *self {
            Primitive::Cuboid([a, b, c]) => 8.0 * (a * b + b * c + a * c),
            Primitive::Ellipsoid([a, b, c]) => {
                // Knud Thomsen's approximation.
                let p = 1.6075;
                let m = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * m.powf(1.0 / p)
            }
            Primitive::Panel(w, h) => 4.0 * w * h,
            Primitive::Cylinder(r, h) => 2.0 * PI * r * 2.0 * h + 2.0 * PI * r * r,
        }
    }

    /// Point on the surface, centered at the origin.
    fn sample(&self, rng: &mut impl Rng) -> [f64; 3] {
        let mut u = || rng.gen_range(-1.0f64..1.0);
        match *self {
            Primitive::Cuboid(e) => {
                let faces = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
                let pick = u().abs() * (faces[0] + faces[1] + faces[2]);
                let axis = if pick < faces[0] {
                    0
                } else if pick < faces[0] + faces[1] {
                    1
                } else {
                    2
                };
                let mut p = [u() * e[0], u() * e[1], u() * e[2]];
                p[axis] = if u() < 0.0 { -e[axis] } else { e[axis] };
                p
            }
            Primitive::Ellipsoid(e) => loop {
                let v = [u(), u(), u()];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-3 && n <= 1.0 {
                    break [v[0] / n * e[0], v[1] / n * e[1], v[2] / n * e[2]];
                }
            },
            Primitive::Panel(w, h) => [u() * w, 0.0, u() * h],
            Primitive::Cylinder(r, h) => {
                let side = 4.0 * PI * r * h;
                let caps = 2.0 * PI * r * r;
                let t = u() * PI;
                if u().abs() * (side + caps) < side {
                    [r * t.cos(), r * t.sin(), u() * h]
                } else {
                    let rad = r * u().abs().sqrt();
                    [rad * t.cos(), rad * t.sin(), if u() < 0.0 { -h } else { h }]
                }
            }
        }
    }

    fn points(&self, voxel: f64, rng: &mut impl Rng) -> Vec<[f64; 3]> {
        let n = ((DENSITY * self.area() / (voxel * voxel)).ceil() as usize).max(MIN_POINTS);
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

fn noisy(color: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    color.map(|c| (c + rng.gen_range(-COLOR_NOISE..COLOR_NOISE)).clamp(0.0, 1.0))
}

struct GeneratedScene {
    cloud: PointCloud,
    referrals: Vec<ReferralEntry>,
}

fn generate_scene(spec: &DataSpec, rng: &mut ChaCha8Rng) -> Result<GeneratedScene> {
    let n = rng.gen_range(spec.min_instances..=spec.max_instances);
    // At most two instances per class so that each gets its own color.
    let mut pool: Vec<(usize, usize)> = (0..4).flat_map(|c| [(c, 0), (c, 1)]).collect();
    pool.shuffle(rng);
    let picks = &pool[..n];
    let mut cells = [(0.0, 0.0), (CELL, 0.0), (0.0, CELL), (CELL, CELL)];
    cells.shuffle(rng);

    let (mut pos, mut col, mut sem, mut inst) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, (&(class, shade), &(cx, cy))) in picks.iter().zip(&cells).enumerate() {
        let half = rng.gen_range(0.04..0.06);
        let prim = Primitive::for_class(class, half, 1.0);
        let slack = CELL / 2.0 - half - 0.02;
        let center = [
            cx + CELL / 2.0 + rng.gen_range(-slack..=slack),
            cy + CELL / 2.0 + rng.gen_range(-slack..=slack),
            prim.half_height(),
        ];
        let base = PALETTE[class][shade].1;
        for p in prim.points(spec.scene_voxel, rng) {
            pos.push([p[0] + center[0], p[1] + center[1], p[2] + center[2]]);
            col.push(noisy(base, rng));
            sem.push(class as u32);
            inst.push(label as u32);
        }
    }
    let cloud = PointCloud::new(pos, col)?.with_labels(sem, Some(inst))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let referrals = order
        .into_iter()
        .take(spec.referrals)
        .map(|label| {
            let (class, shade) = picks[label];
            ReferralEntry {
                instance: label as u32,
                categories: vec![class],
                sentence: format!("the {} {}", PALETTE[class][shade].0, CLASSES[class]),
            }
        })
        .collect();
    Ok(GeneratedScene { cloud, referrals })
}

/// Shape `i` cycles through every (class, color, proportion) combination, so
/// the first sixteen captions are distinct.
fn generate_shape(i: usize, spec: &DataSpec, rng: &mut ChaCha8Rng) -> Result<(PointCloud, usize, String)> {
    let class = i % 4;
    let shade = (i / 4) % 2;
    let (word, stretch) = PROPORTIONS[(i / 8) % 2];
    let prim = Primitive::for_class(class, 1.0, stretch);
    let mut pts: Vec<[f64; 3]> = (0..4096).map(|_| prim.sample(rng)).collect();
    // Unit-normalize: largest extent becomes 1, centered at the origin.
    let extent = pts
        .iter()
        .flat_map(|p| p.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    let s = 0.5 / extent;
    let n = ((DENSITY * prim.area() * s * s / (spec.shape_voxel * spec.shape_voxel)).ceil() as usize).max(MIN_POINTS);
    pts.truncate(n);
    while pts.len() < n {
        pts.push(prim.sample(rng));
    }
    let pts: Vec<[f64; 3]> = pts.iter().map(|p| p.map(|v| v * s)).collect();
    let (color_name, color) = PALETTE[class][shade];
    let colors = (0..pts.len()).map(|_| noisy(color, rng)).collect();
    let cloud = PointCloud::new(pts, colors)?;
    Ok((cloud, class, format!("a {word} {color_name} {}", CLASSES[class])))
}

/// Builds the dataset in memory. Deterministic per seed.
pub fn generate(spec: &DataSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest {
        classes: CLASSES.iter().map(|s| s.to_string()).collect(),
        scenes: Vec::new(),
        shapes: Vec::new(),
    };
    let mut scene_clouds = Vec::new();
    for i in 0..spec.scenes {
        let g = generate_scene(spec, &mut rng)?;
        let name = format!("scene{i:03}");
        manifest.scenes.push(SceneEntry {
            path: PathBuf::from(format!("scenes/{name}.upc")),
            name,
            referrals: g.referrals,
        });
        scene_clouds.push(g.cloud);
    }
    let mut shape_clouds = Vec::new();
    for i in 0..spec.shapes {
        let (cloud, class, caption) = generate_shape(i, spec, &mut rng)?;
        let name = format!("shape{i:03}");
        manifest.shapes.push(ShapeEntry {
            path: PathBuf::from(format!("shapes/{name}.upc")),
            name,
            class,
            caption,
        });
        shape_clouds.push(cloud);
    }
    Ok(Dataset {
        manifest,
        scene_clouds,
        shape_clouds,
    })
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("voxlang-manifest 1\n");
        let _ = writeln!(s, "classes {}", self.classes.join(" "));
        for sc in &self.scenes {
            let _ = writeln!(s, "scene {} {}", sc.name, sc.path.display());
            for r in &sc.referrals {
                let cats: Vec<String> = r.categories.iter().map(usize::to_string).collect();
                let _ = writeln!(s, "refer {} {} {} {}", sc.name, r.instance, cats.join(","), r.sentence);
            }
        }
        for sh in &self.shapes {
            let _ = writeln!(s, "shape {} {} {} {}", sh.name, sh.path.display(), sh.class, sh.caption);
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
            Some((_, h)) if h.trim() == "voxlang-manifest 1" => {}
            _ => return Err(err(1, "missing `voxlang-manifest 1` header".into())),
        }
        let mut m = Manifest {
            classes: Vec::new(),
            scenes: Vec::new(),
            shapes: Vec::new(),
        };
        for (no, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| err(no, format!("bad integer {s:?}")));
            let class = |s: &str, k: usize| {
                num(s).and_then(|c| if c < k { Ok(c) } else { Err(err(no, format!("class {c} out of range"))) })
            };
            match f[0] {
                "classes" if f.len() > 1 => m.classes = f[1..].iter().map(|s| s.to_string()).collect(),
                "scene" if f.len() == 3 => m.scenes.push(SceneEntry {
                    name: f[1].to_string(),
                    path: PathBuf::from(f[2]),
                    referrals: Vec::new(),
                }),
                "refer" if f.len() >= 5 => {
                    let categories = f[3]
                        .split(',')
                        .map(|c| class(c, m.classes.len()))
                        .collect::<Result<Vec<_>>>()?;
                    let instance = num(f[2])? as u32;
                    let scene = m
                        .scenes
                        .iter_mut()
                        .find(|s| s.name == f[1])
                        .ok_or_else(|| err(no, format!("referral to unknown scene {:?}", f[1])))?;
                    scene.referrals.push(ReferralEntry {
                        instance,
                        categories,
                        sentence: f[4..].join(" "),
                    });
                }
                "shape" if f.len() >= 5 => m.shapes.push(ShapeEntry {
                    name: f[1].to_string(),
                    path: PathBuf::from(f[2]),
                    class: class(f[3], m.classes.len())?,
                    caption: f[4..].join(" "),
                }),
                _ => return Err(err(no, format!("unrecognized record {line:?}"))),
            }
        }
        if m.classes.is_empty() {
            return Err(err(1, "manifest declares no classes".into()));
        }
        Ok(m)
    }
}

impl Dataset {
    /// Writes `manifest.txt` and every point cloud under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["scenes", "shapes"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (e, pc) in self.manifest.scenes.iter().zip(&self.scene_clouds) {
            save_pointcloud(pc, dir.join(&e.path))?;
        }
        for (e, pc) in self.manifest.shapes.iter().zip(&self.shape_clouds) {
            save_pointcloud(pc, dir.join(&e.path))?;
        }
        let path = dir.join("manifest.txt");
        std::fs::write(&path, self.manifest.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let m = Manifest::parse(&text, &manifest.display().to_string())?;
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let scene_clouds = m
            .scenes
            .iter()
            .map(|e| load_pointcloud(dir.join(&e.path)))
            .collect::<Result<Vec<_>>>()?;
        let shape_clouds = m
            .shapes
            .iter()
            .map(|e| load_pointcloud(dir.join(&e.path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest: m,
            scene_clouds,
            shape_clouds,
        })
    }

    /// Every sentence, caption and class name, for building a vocabulary.
    pub fn corpus(&self) -> Vec<String> {
        let m = &self.manifest;
        m.classes
            .iter()
            .cloned()
            .chain([crate::model::BACKGROUND.to_string()])
            .chain(m.scenes.iter().flat_map(|s| s.referrals.iter().map(|r| r.sentence.clone())))
            .chain(m.shapes.iter().map(|s| s.caption.clone()))
            .collect()
    }

    pub fn scene_sample(&self, i: usize, cloud: &PointCloud, voxel: f64) -> Result<SceneSample> {
        let entry = &self.manifest.scenes[i];
        let grid = voxelize(cloud, voxel)?;
        let mut labels: Vec<u32> = grid
            .instance
            .clone()
            .ok_or_else(|| Error::Input(format!("scene {} has no instance labels", entry.name)))?;
        labels.sort_unstable();
        labels.dedup();
        let referrals = entry
            .referrals
            .iter()
            .map(|r| {
                let target = labels.binary_search(&r.instance).map_err(|_| {
                    Error::Input(format!("scene {}: instance {} has no voxels", entry.name, r.instance))
                })?;
                Ok(Referral {
                    sentence: r.sentence.clone(),
                    target,
                    categories: r.categories.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SceneSample::from_grid(&entry.name, grid, self.manifest.classes.len(), referrals)
    }

    pub fn shape_sample(&self, i: usize, cloud: &PointCloud, voxel: f64) -> Result<ShapeSample> {
        let e = &self.manifest.shapes[i];
        Ok(ShapeSample {
            name: e.name.clone(),
            grid: voxelize(cloud, voxel)?,
            class: e.class,
            caption: e.caption.clone(),
        })
    }

    pub fn scene_samples(&self, voxel: f64) -> Result<Vec<SceneSample>> {
        (0..self.scene_clouds.len())
            .map(|i| self.scene_sample(i, &self.scene_clouds[i], voxel))
            .collect()
    }

    pub fn shape_samples(&self, voxel: f64) -> Result<Vec<ShapeSample>> {
        (0..self.shape_clouds.len())
            .map(|i| self.shape_sample(i, &self.shape_clouds[i], voxel))
            .collect()
    }

    pub fn scene_grids(&self, voxel: f64) -> Result<Vec<VoxelGrid>> {
        self.scene_clouds.iter().map(|c| voxelize(c, voxel)).collect()
    }

    /// Ground truth in the prediction-dump format, for `eval`.
    pub fn ground_truth(&self, scene_voxel: f64) -> Result<PredictionDump> {
        let mut dump = PredictionDump::default();
        for s in self.scene_samples(scene_voxel)? {
            let n = s.semantic.len();
            let mask = |g: usize| s.masks.row(g).iter().map(|&v| v > 0.5).collect::<Vec<bool>>();
            dump.scenes.push(SceneRecord {
                name: s.name.clone(),
                voxels: n,
                semantic: Some(s.semantic.clone()),
                instances: s
                    .classes
                    .iter()
                    .enumerate()
                    .map(|(g, &class)| InstancePrediction {
                        class,
                        score: 1.0,
                        mask: mask(g),
                    })
                    .collect(),
                referrals: s.referrals.iter().enumerate().map(|(i, r)| (i, mask(r.target))).collect(),
            });
        }
        for sh in &self.manifest.shapes {
            dump.shapes.push(ShapeRecord {
                name: sh.name.clone(),
                class: Some(sh.class),
                caption: Some(sh.caption.clone()),
            });
        }
        Ok(dump)
    }
}
