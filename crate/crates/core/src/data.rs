//! Wafer-map data: synthetic generation of the nine failure classes, JSONL
//! ingestion/export, class balancing, splitting and tensor encoding.
//!
//! Grid cells hold 0 = off-wafer, 1 = pass die, 2 = fail die. Label 8 is the
//! defect-free class.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

pub const NUM_CLASSES: usize = 9;

pub const OFF_WAFER: u8 = 0;
pub const PASS_DIE: u8 = 1;
pub const FAIL_DIE: u8 = 2;

/// The nine WM-811K failure classes, index order fixed by label convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectClass {
    Center = 0,
    Donut = 1,
    EdgeLoc = 2,
    EdgeRing = 3,
    Loc = 4,
    Random = 5,
    Scratch = 6,
    NearFull = 7,
    None = 8,
}

impl DefectClass {
    pub fn from_index(i: usize) -> Result<Self> {
        use DefectClass::*;
        Ok(match i {
            0 => Center,
            1 => Donut,
            2 => EdgeLoc,
            3 => EdgeRing,
            4 => Loc,
            5 => Random,
            6 => Scratch,
            7 => NearFull,
            8 => None,
            _ => return Err(Error::invalid(format!("class index {i} outside 0..9"))),
        })
    }

    pub fn name(self) -> &'static str {
        use DefectClass::*;
        match self {
            Center => "Center",
            Donut => "Donut",
            EdgeLoc => "Edge-Loc",
            EdgeRing => "Edge-Ring",
            Loc => "Loc",
            Random => "Random",
            Scratch => "Scratch",
            NearFull => "Near-full",
            None => "None",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaferMap {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major, entries in {0, 1, 2}.
    pub grid: Vec<u8>,
    pub label: Option<usize>,
}

impl WaferMap {
    pub fn cell(&self, row: usize, col: usize) -> u8 {
        self.grid[row * self.width + col]
    }

    /// One-hot channel encoding: channel k is 1 where the grid equals k.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0.0; 3 * hw];
        for (i, &v) in self.grid.iter().enumerate() {
            data[v as usize * hw + i] = 1.0;
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("grid shape is valid")
    }
}

/// True where the cell lies on the wafer disk for a `size` x `size` grid.
pub fn disk_mask(size: usize) -> Vec<bool> {
    let c = (size as f64 - 1.0) / 2.0;
    let r = (size as f64) / 2.0 - 0.5;
    let mut mask = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
            mask[i * size + j] = d <= r + 1e-9;
        }
    }
    mask
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 round over seed ^ salt
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates one synthetic wafer map for the given class. Deterministic per
/// (pattern, size, noise_rate, seed).
pub fn generate(pattern: usize, size: usize, noise_rate: f64, rng_seed: u64) -> Result<WaferMap> {
    let class = DefectClass::from_index(pattern)?;
    if size < 15 || size % 2 == 0 {
        return Err(Error::invalid(format!("size must be an odd integer >= 15, got {size}")));
    }
    if !(0.0..=0.2).contains(&noise_rate) {
        return Err(Error::invalid(format!("noise_rate must lie in [0, 0.2], got {noise_rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        rng_seed,
        (pattern as u64) << 32 | (size as u64) << 8 | (noise_rate * 1000.0) as u64,
    ));
    let mask = disk_mask(size);
    let c = (size as f64 - 1.0) / 2.0;
    let radius = (size as f64) / 2.0 - 0.5;
    let mut grid: Vec<u8> =
        mask.iter().map(|&in_disk| if in_disk { PASS_DIE } else { OFF_WAFER }).collect();

    let fail_where = |grid: &mut Vec<u8>, pred: &dyn Fn(f64, f64, f64) -> bool| {
        for i in 0..size {
            for j in 0..size {
                if mask[i * size + j] {
                    let dy = i as f64 - c;
                    let dx = j as f64 - c;
                    let d = (dx * dx + dy * dy).sqrt();
                    let theta = dy.atan2(dx);
                    if pred(d, theta, dx) {
                        grid[i * size + j] = FAIL_DIE;
                    }
                }
            }
        }
    };

    match class {
        DefectClass::Center => {
            let r_fail = rng.gen_range(0.25..0.35) * radius;
            fail_where(&mut grid, &|d, _, _| d <= r_fail);
        }
        DefectClass::Donut => {
            let inner = rng.gen_range(0.35..0.45) * radius;
            let outer = rng.gen_range(0.50..0.60) * radius;
            fail_where(&mut grid, &|d, _, _| d >= inner && d <= outer);
        }
        DefectClass::EdgeLoc => {
            let theta0 = rng.gen_range(0.0..2.0 * PI);
            let span = rng.gen_range(PI / 6.0..PI / 2.0);
            let depth = rng.gen_range(2.0..3.0);
            fail_where(&mut grid, &|d, theta, _| {
                let mut dt = (theta - theta0).abs() % (2.0 * PI);
                if dt > PI {
                    dt = 2.0 * PI - dt;
                }
                d >= radius - depth && dt <= span / 2.0
            });
        }
        DefectClass::EdgeRing => {
            let width = rng.gen_range(2.0..3.0);
            fail_where(&mut grid, &|d, _, _| d >= radius - width);
        }
        DefectClass::Loc => {
            let dir = rng.gen_range(0.0..2.0 * PI);
            let off = rng.gen_range(0.3..0.6) * radius;
            let blob_r = rng.gen_range(0.1..0.2) * radius;
            let (by, bx) = (c + off * dir.sin(), c + off * dir.cos());
            for i in 0..size {
                for j in 0..size {
                    if mask[i * size + j] {
                        let d = ((i as f64 - by).powi(2) + (j as f64 - bx).powi(2)).sqrt();
                        if d <= blob_r.max(1.2) {
                            grid[i * size + j] = FAIL_DIE;
                        }
                    }
                }
            }
        }
        DefectClass::Random => {
            let p = rng.gen_range(0.15..0.30);
            for (cell, &in_disk) in grid.iter_mut().zip(&mask) {
                if in_disk && rng.gen::<f64>() < p {
                    *cell = FAIL_DIE;
                }
            }
        }
        DefectClass::Scratch => {
            let len = rng.gen_range(0.5..1.2) * radius;
            let steps = len.round().max(4.0) as usize;
            let start_r = rng.gen_range(0.0..0.5) * radius;
            let start_a = rng.gen_range(0.0..2.0 * PI);
            let mut y = c + start_r * start_a.sin();
            let mut x = c + start_r * start_a.cos();
            let mut dir = rng.gen_range(0.0..2.0 * PI);
            for _ in 0..steps {
                let (i, j) = (y.round() as i64, x.round() as i64);
                if i >= 0 && j >= 0 && (i as usize) < size && (j as usize) < size {
                    let idx = i as usize * size + j as usize;
                    if mask[idx] {
                        grid[idx] = FAIL_DIE;
                    }
                }
                y += dir.sin();
                x += dir.cos();
                dir += rng.gen_range(-0.3..0.3);
            }
        }
        DefectClass::NearFull => {
            let p = rng.gen_range(0.55..0.80);
            for (cell, &in_disk) in grid.iter_mut().zip(&mask) {
                if in_disk && rng.gen::<f64>() < p {
                    *cell = FAIL_DIE;
                }
            }
        }
        DefectClass::None => {}
    }

    if noise_rate > 0.0 {
        for (cell, &in_disk) in grid.iter_mut().zip(&mask) {
            if in_disk && rng.gen::<f64>() < noise_rate {
                *cell = FAIL_DIE;
            }
        }
    }

    Ok(WaferMap {
        id: format!("syn-c{pattern}-s{size}-{rng_seed}"),
        height: size,
        width: size,
        grid,
        label: Some(pattern),
    })
}

/// Generates a labeled dataset with the given per-class counts. Map ids embed
/// a running index, so one call yields pairwise-distinct ids.
pub fn generate_batch(
    class_counts: &[usize; NUM_CLASSES],
    size: usize,
    noise_rate: f64,
    rng_seed: u64,
) -> Result<Vec<WaferMap>> {
    let mut out = Vec::with_capacity(class_counts.iter().sum());
    let mut index = 0u64;
    for (class, &count) in class_counts.iter().enumerate() {
        for _ in 0..count {
            let mut map = generate(class, size, noise_rate, mix_seed(rng_seed, index))?;
            map.id = format!("w{index:06}-c{class}");
            out.push(map);
            index += 1;
        }
    }
    Ok(out)
}

// ── JSONL ingest / export ────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    grid: Vec<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

/// Reads a JSONL dataset; malformed records are reported with line numbers.
pub fn ingest(path: &Path) -> Result<Vec<WaferMap>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut maps = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        maps.push(record_to_map(record, lineno + 1)?);
    }
    Ok(maps)
}

fn record_to_map(record: Record, line: usize) -> Result<WaferMap> {
    let height = record.grid.len();
    if height == 0 {
        return Err(Error::Parse { line, msg: "empty grid".into() });
    }
    let width = record.grid[0].len();
    let mut grid = Vec::with_capacity(height * width);
    for (r, row) in record.grid.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("ragged grid: row {r} has {} cells, expected {width}", row.len()),
            });
        }
        for (c, &v) in row.iter().enumerate() {
            if v > 2 {
                return Err(Error::Parse {
                    line,
                    msg: format!("cell ({r},{c}) holds {v}, expected 0, 1 or 2"),
                });
            }
            grid.push(v);
        }
    }
    if let Some(label) = record.label {
        if label >= NUM_CLASSES {
            return Err(Error::Parse { line, msg: format!("label {label} outside 0..9") });
        }
    }
    Ok(WaferMap { id: record.id, height, width, grid, label: record.label })
}

/// Writes maps as JSONL in input order; byte-stable for a fixed input.
pub fn export(maps: &[WaferMap], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for map in maps {
        let record = Record {
            id: map.id.clone(),
            grid: map
                .grid
                .chunks(map.width)
                .map(|row| row.to_vec())
                .collect(),
            label: map.label,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::invalid(format!("serialize record: {e}")))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

// ── balancing ────────────────────────────────────────────────────────

/// The 8 dihedral symmetries of a square grid; every class signature is
/// closed under them, so labels are preserved.
pub fn dihedral_transform(map: &WaferMap, which: usize) -> WaferMap {
    let (h, w) = (map.height, map.width);
    debug_assert_eq!(h, w);
    let n = h;
    let mut grid = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = match which % 8 {
                0 => (i, j),
                1 => (j, n - 1 - i),             // rot 90
                2 => (n - 1 - i, n - 1 - j),     // rot 180
                3 => (n - 1 - j, i),             // rot 270
                4 => (i, n - 1 - j),             // horizontal flip
                5 => (n - 1 - i, j),             // vertical flip
                6 => (j, i),                     // transpose
                _ => (n - 1 - j, n - 1 - i),     // anti-transpose
            };
            grid[i * n + j] = map.grid[si * n + sj];
        }
    }
    WaferMap { id: map.id.clone(), height: h, width: w, grid, label: map.label }
}

/// Resamples to exactly `target_per_class` examples per class. Undersampling
/// is uniform without replacement; oversampling duplicates uniformly with
/// replacement and applies a random dihedral transform to each duplicate.
pub fn balance(examples: &[WaferMap], target_per_class: usize, rng_seed: u64) -> Result<Vec<WaferMap>> {
    if target_per_class == 0 {
        return Err(Error::invalid("target_per_class must be positive"));
    }
    let mut by_class: Vec<Vec<&WaferMap>> = vec![Vec::new(); NUM_CLASSES];
    for map in examples {
        let label = map
            .label
            .ok_or_else(|| Error::invalid(format!("unlabeled example '{}' in balance input", map.id)))?;
        by_class[label].push(map);
    }
    let missing: Vec<String> = by_class
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_empty())
        .map(|(c, _)| format!("{c} ({})", DefectClass::from_index(c).unwrap().name()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("classes absent from input: {}", missing.join(", "))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, 0xba1a_4ce5));
    let mut out = Vec::with_capacity(target_per_class * NUM_CLASSES);
    for members in &by_class {
        if members.len() >= target_per_class {
            let mut idx: Vec<usize> = (0..members.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(target_per_class);
            idx.sort_unstable(); // keep input order among the survivors
            out.extend(idx.into_iter().map(|i| members[i].clone()));
        } else {
            out.extend(members.iter().map(|m| (*m).clone()));
            for dup in 0..target_per_class - members.len() {
                let src = members[rng.gen_range(0..members.len())];
                let mut aug = dihedral_transform(src, rng.gen_range(0..8));
                aug.id = format!("{}~aug{dup}", src.id);
                out.push(aug);
            }
        }
    }
    Ok(out)
}

// ── splitting ────────────────────────────────────────────────────────

/// An example whose true label has been stripped for training. The hidden
/// label is reachable only through [`UnlabeledExample::true_label_for_evaluation`],
/// which no training code path calls.
#[derive(Clone, Debug)]
pub struct UnlabeledExample {
    pub map: WaferMap,
    hidden_label: Option<usize>,
}

impl UnlabeledExample {
    /// Evaluation-only access for pseudo-label accuracy reporting.
    pub fn true_label_for_evaluation(&self) -> Option<usize> {
        self.hidden_label
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labeled: Vec<WaferMap>,
    pub unlabeled: Vec<UnlabeledExample>,
    pub test: Vec<WaferMap>,
    pub seed: u64,
}

/// Deterministic three-way split by (fractions, seed). The unlabeled portion
/// has labels stripped but retained in a hidden evaluation-only field.
pub fn split(maps: &[WaferMap], fractions: (f64, f64, f64), rng_seed: u64) -> Result<DatasetSplit> {
    let (fl, fu, ft) = fractions;
    if fl <= 0.0 || fu <= 0.0 || ft <= 0.0 {
        return Err(Error::invalid("split fractions must be positive"));
    }
    if ((fl + fu + ft) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must sum to 1, got {}",
            fl + fu + ft
        )));
    }
    let mut shuffled: Vec<WaferMap> = maps.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, 0x5_717));
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_labeled = (fl * n as f64).round() as usize;
    let n_unlabeled = ((fu * n as f64).round() as usize).min(n - n_labeled);
    let test = shuffled.split_off(n_labeled + n_unlabeled);
    let unlabeled_maps = shuffled.split_off(n_labeled);
    let unlabeled = unlabeled_maps
        .into_iter()
        .map(|mut map| {
            let hidden_label = map.label.take();
            UnlabeledExample { map, hidden_label }
        })
        .collect();
    Ok(DatasetSplit { labeled: shuffled, unlabeled, test, seed: rng_seed })
}

/// Per-class label histogram of a labeled set.
pub fn class_histogram(maps: &[WaferMap]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for map in maps {
        if let Some(label) = map.label {
            *hist.entry(label).or_insert(0) += 1;
        }
    }
    hist
}
