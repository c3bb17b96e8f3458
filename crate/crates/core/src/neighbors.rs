//! Uniform spatial hash for exact fixed-radius neighbor counts.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::geometry::Vec3;

type CellKey = [i64; 3];

pub struct SpatialHash<'a> {
    points: &'a [Vec3],
    cell_size: f64,
    cells: HashMap<CellKey, Vec<u32>>,
}

impl<'a> SpatialHash<'a> {
    /// Buckets `points` into cubic cells of edge `cell_size`.
    pub fn new(points: &'a [Vec3], cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        let mut cells: HashMap<CellKey, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells
                .entry(Self::key(p, cell_size))
                .or_default()
                .push(i as u32);
        }
        SpatialHash {
            points,
            cell_size,
            cells,
        }
    }

    fn key(p: &Vec3, cell: f64) -> CellKey {
        p.map(|c| (c / cell).floor() as i64)
    }

    /// Number of points other than `index` within distance `radius`
    /// (inclusive). `radius` must not exceed the cell size.
    pub fn count_within(&self, index: usize, radius: f64) -> usize {
        debug_assert!(radius <= self.cell_size);
        let p = self.points[index];
        let k = Self::key(&p, self.cell_size);
        let r2 = radius * radius;
        let mut count = 0;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let Some(bucket) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        let j = j as usize;
                        if j == index {
                            continue;
                        }
                        let q = self.points[j];
                        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                        if d2 <= r2 {
                            count += 1;
                        }
                    }
                }
            }
        }
        count
    }
}

/// For every point, how many other points lie within `radius`.
pub fn neighbor_counts(points: &[Vec3], radius: f64) -> Vec<usize> {
    // slightly oversized cells keep exact-radius pairs in adjacent cells
    let hash = SpatialHash::new(points, radius * (1.0 + 1e-9));
    (0..points.len())
        .into_par_iter()
        .map(|i| hash.count_within(i, radius))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[Vec3], r: f64) -> Vec<usize> {
        (0..points.len())
            .map(|i| {
                (0..points.len())
                    .filter(|&j| {
                        j != i && {
                            let d2: f64 = (0..3).map(|a| (points[i][a] - points[j][a]).powi(2)).sum();
                            d2 <= r * r
                        }
                    })
                    .count()
            })
            .collect()
    }

    #[test]
    fn isolated_and_paired_points() {
        let pts = vec![[0.1, 0.1, 0.1], [0.15, 0.1, 0.1], [0.9, 0.9, 0.9]];
        assert_eq!(neighbor_counts(&pts, 0.06), vec![1, 1, 0]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 1..120),
            r in 0.01f64..0.4,
        ) {
            let fast = neighbor_counts(&pts, r);
            prop_assert_eq!(&fast, &brute(&pts, r));
        }

        #[test]
        fn neighbor_relation_is_symmetric(
            pts in prop::collection::vec(prop::array::uniform3(0.0f64..1.0), 2..60),
            r in 0.05f64..0.5,
        ) {
            let hash = SpatialHash::new(&pts, r * (1.0 + 1e-9));
            let total: usize = (0..pts.len()).map(|i| hash.count_within(i, r)).sum();
            // each unordered pair is counted once from each side
            prop_assert_eq!(total % 2, 0);
        }
    }
}
