//! Shape record files, dataset manifests and the procedural box-furniture generator.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resample_cloud, Point, SegmentedCloud};
use crate::error::{Error, Result};

/// JSON manifest describing a dataset on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_id: String,
    pub m: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub connections: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub part_names: Vec<String>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile { path: path.to_path_buf() });
        }
        let mut manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if manifest.root.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            manifest.root = base.join(&manifest.root);
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidArgument("manifest m must be positive".into()));
        }
        for pair in &self.connections {
            if pair[0] >= self.m || pair[1] >= self.m {
                return Err(Error::InvalidArgument(format!("connection {pair:?} out of range for m = {}", self.m)));
            }
        }
        for name in self.train.iter().chain(&self.test) {
            let path = self.root.join(name);
            if !path.exists() {
                return Err(Error::MissingFile { path });
            }
        }
        Ok(())
    }
}

/// Shapes of one category, already resampled to a fixed point budget.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_id: String,
    pub m: usize,
    pub part_names: Vec<String>,
    pub train: Vec<SegmentedCloud>,
    pub test: Vec<SegmentedCloud>,
    pub connections: Vec<[usize; 2]>,
}

pub fn read_record(path: &Path, class_id: &str, m: usize) -> Result<SegmentedCloud> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: path.to_path_buf() },
        _ => Error::Io(e),
    })?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = fields[a].parse::<f64>().map_err(|e| parse_err(e.to_string()))?;
            if !p[a].is_finite() {
                return Err(parse_err("non-finite coordinate".into()));
            }
        }
        let label = fields[3].parse::<usize>().map_err(|e| parse_err(e.to_string()))?;
        if label >= m {
            return Err(parse_err(format!("label out of range: {label} with m = {m}")));
        }
        points.push(p);
        labels.push(label);
    }
    SegmentedCloud::new(points, labels, class_id, m)
}

pub fn write_record(path: &Path, cloud: &SegmentedCloud) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (p, l) in cloud.points().iter().zip(cloud.labels()) {
        writeln!(w, "{} {} {} {}", p[0], p[1], p[2], l)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every record of a directory (sorted by file name).
pub fn read_record_dir(dir: &Path, class_id: &str, m: usize) -> Result<Vec<SegmentedCloud>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile { path: dir.to_path_buf() });
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_record(p, class_id, m)).collect()
}

/// Loads a manifest and resamples every shape to `point_budget` points.
pub fn load_dataset(manifest_path: &Path, point_budget: usize, seed: u64) -> Result<Dataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut load = |names: &[String]| -> Result<Vec<SegmentedCloud>> {
        names
            .iter()
            .map(|n| {
                let raw = read_record(&manifest.root.join(n), &manifest.class_id, manifest.m)?;
                resample_cloud(&raw, point_budget, &mut rng)
            })
            .collect()
    };
    let train = load(&manifest.train)?;
    let test = load(&manifest.test)?;
    let part_names = if manifest.part_names.is_empty() {
        (0..manifest.m).map(|j| format!("part{j}")).collect()
    } else {
        manifest.part_names.clone()
    };
    Ok(Dataset {
        class_id: manifest.class_id,
        m: manifest.m,
        part_names,
        train,
        test,
        connections: manifest.connections,
    })
}

/// Writes `train/` and `test/` records plus a manifest into `dir`; returns
/// the manifest path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    let names = |prefix: &str, clouds: &[SegmentedCloud]| -> Result<Vec<String>> {
        fs::create_dir_all(dir.join(prefix))?;
        clouds
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let name = format!("{prefix}/shape_{i:05}.txt");
                write_record(&dir.join(&name), c)?;
                Ok(name)
            })
            .collect()
    };
    let train = names("train", &dataset.train)?;
    let test = names("test", &dataset.test)?;
    let manifest = DatasetManifest {
        root: PathBuf::from("."),
        class_id: dataset.class_id.clone(),
        m: dataset.m,
        train,
        test,
        connections: dataset.connections.clone(),
        part_names: dataset.part_names.clone(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Axis-aligned box given by its minimum and maximum corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSpec {
    pub min: Point,
    pub max: Point,
}

impl BoxSpec {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        std::array::from_fn(|a| self.min[a] + (self.max[a] - self.min[a]) * rng.random::<f64>())
    }

    fn volume(&self) -> f64 {
        (0..3).map(|a| self.max[a] - self.min[a]).product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackMode {
    Tall,
    Low,
}

/// Parameters of the procedural chair-like template. Part order is
/// back, seat, left legs, right legs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxFurnitureTemplate {
    pub points_per_shape: usize,
    pub seat_width: (f64, f64),
    pub seat_depth: (f64, f64),
    pub seat_thickness: (f64, f64),
    pub leg_height: (f64, f64),
    pub leg_width: (f64, f64),
    pub back_thickness: (f64, f64),
    pub tall_back_height: (f64, f64),
    pub low_back_height: (f64, f64),
    pub tall_probability: f64,
    /// Probability that the back is missing entirely.
    pub missing_back_probability: f64,
    pub floor: f64,
}

impl Default for BoxFurnitureTemplate {
    fn default() -> Self {
        Self {
            points_per_shape: 512,
            seat_width: (0.7, 0.9),
            seat_depth: (0.6, 0.8),
            seat_thickness: (0.06, 0.1),
            leg_height: (0.35, 0.55),
            leg_width: (0.05, 0.09),
            back_thickness: (0.05, 0.09),
            tall_back_height: (0.75, 0.85),
            low_back_height: (0.33, 0.4),
            tall_probability: 0.5,
            missing_back_probability: 0.0,
            floor: -0.5,
        }
    }
}

pub const BOX_FURNITURE_CLASS: &str = "box-furniture";
pub const BOX_FURNITURE_PARTS: [&str; 4] = ["back", "seat", "left_legs", "right_legs"];
/// back-seat, left legs-seat, right legs-seat.
pub const BOX_FURNITURE_CONNECTIONS: [[usize; 2]; 3] = [[0, 1], [2, 1], [3, 1]];

/// Fraction of a shape's points given to each part (renormalized when the back is missing).
const PART_SHARES: [f64; 4] = [0.3, 0.3, 0.2, 0.2];

#[derive(Clone, Debug)]
pub struct SyntheticShape {
    pub cloud: SegmentedCloud,
    /// Boxes making up each part; empty for a missing part.
    pub boxes: Vec<Vec<BoxSpec>>,
    pub mode: Option<BackMode>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.random::<f64>()
}

impl BoxFurnitureTemplate {
    pub fn sample_shape<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SyntheticShape> {
        let w = uniform(rng, self.seat_width);
        let d = uniform(rng, self.seat_depth);
        let th = uniform(rng, self.seat_thickness);
        let leg_h = uniform(rng, self.leg_height);
        let leg_w = uniform(rng, self.leg_width);
        let back_t = uniform(rng, self.back_thickness);
        let mode = if rng.random::<f64>() < self.tall_probability { BackMode::Tall } else { BackMode::Low };
        let back_h = match mode {
            BackMode::Tall => uniform(rng, self.tall_back_height),
            BackMode::Low => uniform(rng, self.low_back_height),
        };
        let has_back = rng.random::<f64>() >= self.missing_back_probability;

        let y0 = self.floor;
        let seat_bottom = y0 + leg_h;
        let seat_top = seat_bottom + th;
        let (hx, hz) = (w / 2.0, d / 2.0);
        let back = BoxSpec { min: [-hx, seat_top, -hz], max: [hx, seat_top + back_h, -hz + back_t] };
        let seat = BoxSpec { min: [-hx, seat_bottom, -hz], max: [hx, seat_top, hz] };
        let post = |x0: f64, z0: f64| BoxSpec { min: [x0, y0, z0], max: [x0 + leg_w, seat_bottom, z0 + leg_w] };
        let left = vec![post(-hx, -hz), post(-hx, hz - leg_w)];
        let right = vec![post(hx - leg_w, -hz), post(hx - leg_w, hz - leg_w)];
        let boxes = vec![if has_back { vec![back] } else { Vec::new() }, vec![seat], left, right];

        let share_total: f64 = boxes.iter().zip(PART_SHARES).filter(|(b, _)| !b.is_empty()).map(|(_, s)| s).sum();
        let mut counts: Vec<usize> = boxes
            .iter()
            .zip(PART_SHARES)
            .map(|(b, s)| if b.is_empty() { 0 } else { (self.points_per_shape as f64 * s / share_total) as usize })
            .collect();
        // Rounding leftovers go to the seat, which is always present.
        counts[1] += self.points_per_shape - counts.iter().sum::<usize>();
        let mut parts: Vec<Vec<Point>> = Vec::with_capacity(4);
        for (part_boxes, &count) in boxes.iter().zip(&counts) {
            if part_boxes.is_empty() {
                parts.push(Vec::new());
                continue;
            }
            let vol: Vec<f64> = part_boxes.iter().map(BoxSpec::volume).collect();
            let total_vol: f64 = vol.iter().sum();
            let mut pts = Vec::with_capacity(count);
            for _ in 0..count {
                let mut u = rng.random::<f64>() * total_vol;
                let mut k = 0;
                while k + 1 < vol.len() && u >= vol[k] {
                    u -= vol[k];
                    k += 1;
                }
                pts.push(part_boxes[k].sample(rng));
            }
            parts.push(pts);
        }
        let cloud = SegmentedCloud::from_parts(&parts, BOX_FURNITURE_CLASS)?;
        Ok(SyntheticShape { cloud, boxes, mode: has_back.then_some(mode) })
    }

    pub fn sample_shapes(&self, seed: u64, n: usize) -> Result<Vec<SyntheticShape>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_shape(&mut rng)).collect()
    }
}

/// Procedural dataset: `n_shapes` training shapes and `n_test` test shapes,
/// deterministic per seed.
pub fn synthesize_dataset(seed: u64, n_shapes: usize, n_test: usize, template: &BoxFurnitureTemplate) -> Result<Dataset> {
    let all = template.sample_shapes(seed, n_shapes + n_test)?;
    let mut clouds: Vec<SegmentedCloud> = all.into_iter().map(|s| s.cloud).collect();
    let test = clouds.split_off(n_shapes);
    Ok(Dataset {
        class_id: BOX_FURNITURE_CLASS.into(),
        m: 4,
        part_names: BOX_FURNITURE_PARTS.iter().map(|s| s.to_string()).collect(),
        train: clouds,
        test,
        connections: BOX_FURNITURE_CONNECTIONS.to_vec(),
    })
}
