//! Drift guard for the synthetic generator: an independent rule-based
//! detector, written against the documented geometric signatures only, must
//! recognize generated maps well above chance, and per-class density
//! invariants must hold.

use wafer_ssl::data::{disk_mask, generate, DefectClass, WaferMap, FAIL_DIE, NUM_CLASSES};

const SIZE: usize = 27;

struct Features {
    fail_frac: f64,
    /// Fail cells with at least one failing 8-neighbour.
    clustered: usize,
    density_center: f64,
    density_annulus: f64,
    density_edge: f64,
    /// Fraction of 36 angular bins occupied in the edge band.
    edge_coverage: f64,
    /// Mean normalized radius of clustered fail cells (0 when none).
    mean_radius: f64,
    /// Fraction of clustered fail cells close to the rim (d >= 0.75).
    rim_fraction: f64,
    /// Principal-axis ratio of the clustered fail cloud; large for scratches.
    elongation: f64,
}

fn features(map: &WaferMap) -> Features {
    let mask = disk_mask(SIZE);
    let c = (SIZE as f64 - 1.0) / 2.0;
    let radius = SIZE as f64 / 2.0 - 0.5;
    let is_fail = |i: i64, j: i64| {
        i >= 0
            && j >= 0
            && (i as usize) < SIZE
            && (j as usize) < SIZE
            && map.grid[i as usize * SIZE + j as usize] == FAIL_DIE
    };
    let mut disk_cells = 0usize;
    let mut fails = 0usize;
    let mut clustered = 0usize;
    let mut region_cells = [0usize; 3];
    let mut region_fails = [0usize; 3];
    let mut edge_bins = [false; 36];
    let mut radius_sum = 0.0;
    let mut rim = 0usize;
    let mut cluster_coords: Vec<(f64, f64)> = Vec::new();
    for i in 0..SIZE {
        for j in 0..SIZE {
            if !mask[i * SIZE + j] {
                continue;
            }
            disk_cells += 1;
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            let d = (dx * dx + dy * dy).sqrt() / radius;
            let region = if d <= 0.35 {
                Some(0)
            } else if (0.40..=0.60).contains(&d) {
                Some(1)
            } else if d >= 0.82 {
                Some(2)
            } else {
                None
            };
            if let Some(r) = region {
                region_cells[r] += 1;
            }
            if map.grid[i * SIZE + j] != FAIL_DIE {
                continue;
            }
            fails += 1;
            if let Some(r) = region {
                region_fails[r] += 1;
            }
            let neighbours = (-1..=1)
                .flat_map(|di| (-1..=1).map(move |dj| (di, dj)))
                .filter(|&(di, dj)| (di, dj) != (0, 0))
                .filter(|&(di, dj)| is_fail(i as i64 + di, j as i64 + dj))
                .count();
            if neighbours > 0 {
                clustered += 1;
                radius_sum += d;
                if d >= 0.75 {
                    rim += 1;
                }
                cluster_coords.push((dy, dx));
            }
            if d >= 0.82 {
                let theta = dy.atan2(dx) + std::f64::consts::PI;
                let bin = ((theta / (2.0 * std::f64::consts::PI) * 36.0) as usize).min(35);
                edge_bins[bin] = true;
            }
        }
    }
    let n = cluster_coords.len() as f64;
    let elongation = if cluster_coords.len() < 3 {
        1.0
    } else {
        let my = cluster_coords.iter().map(|&(y, _)| y).sum::<f64>() / n;
        let mx = cluster_coords.iter().map(|&(_, x)| x).sum::<f64>() / n;
        let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
        for &(y, x) in &cluster_coords {
            syy += (y - my) * (y - my);
            sxx += (x - mx) * (x - mx);
            sxy += (y - my) * (x - mx);
        }
        let (syy, sxx, sxy) = (syy / n, sxx / n, sxy / n);
        let tr = syy + sxx;
        let det = syy * sxx - sxy * sxy;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = tr / 2.0 - disc;
        l1 / l2.max(0.25)
    };
    Features {
        fail_frac: fails as f64 / disk_cells as f64,
        clustered,
        density_center: region_fails[0] as f64 / region_cells[0] as f64,
        density_annulus: region_fails[1] as f64 / region_cells[1] as f64,
        density_edge: region_fails[2] as f64 / region_cells[2] as f64,
        edge_coverage: edge_bins.iter().filter(|&&b| b).count() as f64 / 36.0,
        mean_radius: if cluster_coords.is_empty() { 0.0 } else { radius_sum / n },
        rim_fraction: if cluster_coords.is_empty() { 0.0 } else { rim as f64 / n },
        elongation,
    }
}

/// Geometric rule-based classification, independent of any trained model.
fn detect(map: &WaferMap) -> usize {
    let f = features(map);
    if f.fail_frac >= 0.45 {
        return DefectClass::NearFull as usize;
    }
    if f.fail_frac <= 0.055 {
        // Small failure budgets: a scratch leaves a long connected trail,
        // a localized blob a round cluster, edge damage hugs the rim, and
        // pure noise stays isolated.
        return if f.clustered < 4 {
            DefectClass::None as usize
        } else if f.rim_fraction >= 0.9 {
            DefectClass::EdgeLoc as usize
        } else if f.elongation >= 3.5 {
            DefectClass::Scratch as usize
        } else {
            DefectClass::Loc as usize
        };
    }
    if f.density_edge >= 0.55 && f.edge_coverage >= 0.7 {
        return DefectClass::EdgeRing as usize;
    }
    if f.density_center >= 0.40 && f.density_center > 2.0 * f.density_edge {
        return DefectClass::Center as usize;
    }
    if f.density_center <= 0.25 && f.density_annulus >= 0.45 && f.density_edge <= 0.50 {
        return DefectClass::Donut as usize;
    }
    if f.density_center >= 0.07 && f.density_annulus >= 0.07 && f.density_edge >= 0.07 {
        return DefectClass::Random as usize;
    }
    if f.rim_fraction >= 0.8 || f.mean_radius >= 0.75 {
        DefectClass::EdgeLoc as usize
    } else {
        DefectClass::Loc as usize
    }
}

#[test]
fn rule_based_detector_recognizes_generated_classes() {
    let per_class = 200;
    let mut correct = 0usize;
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    for class in 0..NUM_CLASSES {
        for i in 0..per_class {
            let map = generate(class, SIZE, 0.02, (class * per_class + i) as u64).unwrap();
            let got = detect(&map);
            confusion[class][got] += 1;
            if got == class {
                correct += 1;
            }
        }
    }
    let accuracy = correct as f64 / (per_class * NUM_CLASSES) as f64;
    assert!(
        accuracy >= 0.80,
        "rule-based detector accuracy {accuracy:.3} below 0.80; confusion {confusion:?}"
    );
}

#[test]
fn center_maps_concentrate_failures_in_the_middle() {
    for seed in 0..50 {
        let map = generate(DefectClass::Center as usize, SIZE, 0.02, seed).unwrap();
        let f = features(&map);
        assert!(
            f.density_center >= 5.0 * f.density_edge.max(0.02),
            "seed {seed}: center density {:.3} not ≥ 5x edge density {:.3}",
            f.density_center,
            f.density_edge
        );
    }
}

#[test]
fn near_full_maps_fail_most_of_the_wafer() {
    for seed in 0..50 {
        let map = generate(DefectClass::NearFull as usize, SIZE, 0.02, seed).unwrap();
        let f = features(&map);
        assert!(f.fail_frac >= 0.55, "seed {seed}: fail fraction {:.3} below 0.55", f.fail_frac);
    }
}

#[test]
fn defect_free_maps_show_only_noise() {
    for seed in 0..50 {
        let map = generate(DefectClass::None as usize, SIZE, 0.05, seed).unwrap();
        let f = features(&map);
        assert!(f.fail_frac <= 0.10, "seed {seed}: fail fraction {:.3} above noise", f.fail_frac);
    }
}
