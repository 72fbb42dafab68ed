//! Marching cubes with a case table derived from face-consistent edge
//! pairing, so adjacent cells always agree on shared faces and meshes of
//! padded grids are closed.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::mesh::{cross, dot, sub, Mesh};

/// Cube corners as `(x, y, z)` offsets.
pub(crate) const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

pub(crate) const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Faces as corner cycles, counter-clockwise seen from outside the cube.
pub(crate) const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 7, 6, 2],
    [0, 4, 7, 3],
    [1, 2, 6, 5],
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("adjacent corners")
}

/// Surface pieces of one inside-corner bitmask.
#[derive(Clone, Debug, Default)]
pub struct CaseEntry {
    /// Closed loops of crossed cube edges.
    pub loops: Vec<Vec<u8>>,
    /// Triangles over cube edges; an index `12 + l` is the centroid of loop `l`.
    pub tris: Vec<[u8; 3]>,
}

fn share_face(a: usize, b: usize) -> bool {
    FACES.iter().any(|f| {
        let on = |e: usize| EDGES[e].iter().all(|c| f.contains(c));
        on(a) && on(b)
    })
}

fn case_entry(case: u8) -> CaseEntry {
    let inside = |c: usize| case & (1 << c) != 0;
    // next[e] = edge reached from crossing e along the face where e is an entry
    let mut next = [usize::MAX; 12];
    for face in FACES {
        let mut crossings = Vec::new();
        for k in 0..4 {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            if inside(a) != inside(b) {
                crossings.push((edge_between(a, b), inside(b)));
            }
        }
        // Each entry pairs with the exit that closes the same inside arc, which
        // keeps diagonal inside corners separated on ambiguous faces.
        let n = crossings.len();
        for i in 0..n {
            let (e, entering) = crossings[i];
            if entering {
                let exit = (1..n)
                    .map(|d| crossings[(i + d) % n])
                    .find(|c| !c.1)
                    .expect("every entry has an exit");
                next[e] = exit.0;
            }
        }
    }
    let mut seen = [false; 12];
    let mut entry = CaseEntry::default();
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !seen[e] {
            seen[e] = true;
            lp.push(e);
            e = next[e];
        }
        let k = lp.len();
        // A fan chord lying on a cube face could coincide with a chord of the
        // neighboring cell; such loops are triangulated around their centroid.
        let root = (0..k).find(|&r| (2..k - 1).all(|j| !share_face(lp[r], lp[(r + j) % k])));
        match root {
            Some(r) => {
                for j in 1..k - 1 {
                    entry.tris.push([lp[r] as u8, lp[(r + j) % k] as u8, lp[(r + j + 1) % k] as u8]);
                }
            }
            None => {
                let center = (12 + entry.loops.len()) as u8;
                for j in 0..k {
                    entry.tris.push([center, lp[j] as u8, lp[(j + 1) % k] as u8]);
                }
            }
        }
        entry.loops.push(lp.into_iter().map(|e| e as u8).collect());
    }
    entry
}

fn edge_midpoint(e: usize) -> [f64; 3] {
    let [a, b] = EDGES[e];
    std::array::from_fn(|d| 0.5 * (CORNERS[a][d] + CORNERS[b][d]) as f64)
}

/// The 256-case table, oriented so triangle normals point away from inside corners.
pub fn case_table() -> &'static [CaseEntry; 256] {
    static TABLE: OnceLock<[CaseEntry; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table: [CaseEntry; 256] = std::array::from_fn(|c| case_entry(c as u8));
        let t = table[1].tris[0];
        let [a, b, c] = t.map(|e| edge_midpoint(e as usize));
        let n = cross(sub(b, a), sub(c, a));
        let centroid: [f64; 3] = std::array::from_fn(|d| (a[d] + b[d] + c[d]) / 3.0);
        if dot(n, centroid) < 0.0 {
            for case in table.iter_mut() {
                for tri in case.tris.iter_mut() {
                    tri.swap(1, 2);
                }
            }
        }
        table
    })
}

/// Regular samples of a scalar field on `n³` nodes spanning `[lo, lo + (n−1)·h]³`.
#[derive(Clone, Debug)]
pub struct ScalarGrid {
    pub n: usize,
    pub lo: f64,
    pub h: f64,
    /// Node values, x fastest.
    pub values: Vec<f64>,
}

impl ScalarGrid {
    /// Sample `f` on `n` nodes per axis over `[-1, 1]`.
    pub fn sample(n: usize, f: impl Fn([f64; 3]) -> f64 + Sync) -> Self {
        let h = 2.0 / (n - 1) as f64;
        let mut values = vec![0.0; n * n * n];
        values.par_chunks_mut(n * n).enumerate().for_each(|(k, slab)| {
            for j in 0..n {
                for i in 0..n {
                    slab[j * n + i] = f([-1.0 + i as f64 * h, -1.0 + j as f64 * h, -1.0 + k as f64 * h]);
                }
            }
        });
        Self { n, lo: -1.0, h, values }
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.lo + i as f64 * self.h,
            self.lo + j as f64 * self.h,
            self.lo + k as f64 * self.h,
        ]
    }
}

/// Surface `{f = iso}` separating inside (`f < iso`) from outside. Nodes
/// beyond the grid count as outside, so the result is closed.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Mesh {
    let n = grid.n as isize;
    let outside = iso + 1.0;
    let value = |i: isize, j: isize, k: isize| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= n || j >= n || k >= n {
            outside
        } else {
            grid.values[((k * n + j) * n + i) as usize]
        }
    };
    let stride = (n + 2) as u64;
    let edge_key = |i: isize, j: isize, k: isize, axis: usize| -> u64 {
        ((((k + 1) as u64 * stride + (j + 1) as u64) * stride + (i + 1) as u64) * 3) + axis as u64
    };
    let table = case_table();
    let edge_vertex = |key: u64| -> [f64; 3] {
        let axis = (key % 3) as usize;
        let node = key / 3;
        let i = (node % stride) as isize - 1;
        let j = ((node / stride) % stride) as isize - 1;
        let k = (node / (stride * stride)) as isize - 1;
        let mut o = [i, j, k];
        let f0 = value(o[0], o[1], o[2]);
        o[axis] += 1;
        let f1 = value(o[0], o[1], o[2]);
        let t = (iso - f0) / (f1 - f0);
        let mut p = [
            grid.lo + i as f64 * grid.h,
            grid.lo + j as f64 * grid.h,
            grid.lo + k as f64 * grid.h,
        ];
        p[axis] += t * grid.h;
        p
    };
    // Slab triangles reference edge keys; loop centroids get keys past the
    // edge range and carry their loop's edge keys.
    let center_base = 3 * stride * stride * stride;
    type Slab = (Vec<[u64; 3]>, Vec<(u64, Vec<u64>)>);
    let slabs: Vec<Slab> = (-1..n)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            let mut centers = Vec::new();
            for j in -1..n {
                for i in -1..n {
                    let mut case = 0u8;
                    for (c, off) in CORNERS.iter().enumerate() {
                        if value(i + off[0] as isize, j + off[1] as isize, k + off[2] as isize) < iso {
                            case |= 1 << c;
                        }
                    }
                    let entry = &table[case as usize];
                    if entry.tris.is_empty() {
                        continue;
                    }
                    let key_of = |e: u8| {
                        let [a, b] = EDGES[e as usize];
                        let (ca, cb) = (CORNERS[a], CORNERS[b]);
                        let axis = (0..3).find(|&d| ca[d] != cb[d]).expect("edge");
                        let base: [usize; 3] = std::array::from_fn(|d| ca[d].min(cb[d]));
                        edge_key(i + base[0] as isize, j + base[1] as isize, k + base[2] as isize, axis)
                    };
                    let cell = (((k + 1) as u64 * stride + (j + 1) as u64) * stride + (i + 1) as u64) * 4;
                    for tri in &entry.tris {
                        tris.push(tri.map(|e| {
                            if e < 12 {
                                key_of(e)
                            } else {
                                let l = (e - 12) as u64;
                                let key = center_base + cell + l;
                                if !centers.iter().any(|(c, _)| *c == key) {
                                    centers.push((key, entry.loops[l as usize].iter().map(|&e| key_of(e)).collect()));
                                }
                                key
                            }
                        }));
                    }
                }
            }
            (tris, centers)
        })
        .collect();

    let mut index: HashMap<u64, u32> = HashMap::new();
    let mut mesh = Mesh::default();
    let mut center_loops: HashMap<u64, Vec<u64>> = HashMap::new();
    for (_, centers) in &slabs {
        center_loops.extend(centers.iter().cloned());
    }
    for tri_keys in slabs.into_iter().flat_map(|s| s.0) {
        let tri = tri_keys.map(|key| {
            *index.entry(key).or_insert_with(|| {
                let p = if key < center_base {
                    edge_vertex(key)
                } else {
                    let lp = &center_loops[&key];
                    let mut c = [0.0; 3];
                    for &e in lp {
                        let v = edge_vertex(e);
                        for d in 0..3 {
                            c[d] += v[d] / lp.len() as f64;
                        }
                    }
                    c
                };
                mesh.vertices.push(p);
                (mesh.vertices.len() - 1) as u32
            })
        });
        mesh.triangles.push(tri);
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn faces_are_outward() {
        for face in FACES {
            let p = face.map(|c| CORNERS[c].map(|v| v as f64));
            let n = cross(sub(p[1], p[0]), sub(p[2], p[1]));
            let center = [0.5; 3];
            assert!(dot(n, sub(p[0], center)) > 0.0, "{face:?}");
        }
    }

    #[test]
    fn trivial_and_single_corner_cases() {
        let t = case_table();
        assert!(t[0].tris.is_empty());
        assert!(t[255].tris.is_empty());
        for c in 0..8 {
            assert_eq!(t[1 << c].tris.len(), 1);
            assert_eq!(t[255 ^ (1 << c)].tris.len(), 1);
        }
        // Two diagonal corners on one face stay separate: two triangles.
        assert_eq!(t[0b0000_0101].tris.len(), 2);
        assert_eq!(t[0b0000_0101].loops.len(), 2);
        // Half the cube: one quad.
        assert_eq!(t[0b0000_1111].tris.len(), 2);
    }

    #[test]
    fn every_case_closes_inside_a_padded_cube() {
        // A single cell surrounded by outside nodes yields a closed mesh for all 256 cases.
        for case in 0..256usize {
            let mut values = vec![1.0; 8];
            for (c, off) in CORNERS.iter().enumerate() {
                if case & (1 << c) != 0 {
                    values[off[2] * 4 + off[1] * 2 + off[0]] = -1.0;
                }
            }
            let grid = ScalarGrid { n: 2, lo: 0.0, h: 1.0, values };
            let mesh = marching_cubes(&grid, 0.0);
            assert_eq!(mesh.is_empty(), case == 0, "case {case}");
            assert!(mesh.is_empty() || mesh.is_watertight(), "case {case}");
            if case != 0 {
                assert!(mesh.signed_volume() > 0.0, "case {case}");
            }
        }
    }

    #[test]
    fn sphere_radius_and_orientation() {
        let grid = ScalarGrid::sample(48, |p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2] - 0.25);
        let mesh = marching_cubes(&grid, 0.0);
        assert!(mesh.is_watertight());
        let h = grid.h;
        for v in &mesh.vertices {
            let r = dot(*v, *v).sqrt();
            assert!((r - 0.5).abs() < h, "{r}");
        }
        let vol = mesh.signed_volume();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((vol - exact).abs() < 0.03 * exact);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn random_fields_give_closed_meshes(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 7;
            let values = (0..n * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grid = ScalarGrid { n, lo: 0.0, h: 1.0, values };
            let mesh = marching_cubes(&grid, 0.0);
            prop_assert!(mesh.is_watertight());
            prop_assert!(mesh.signed_volume() > 0.0);
        }
    }
}
