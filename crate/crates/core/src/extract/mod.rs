//! Meshing of the occupancy field, persistence and export.

mod checkpoint;
mod export;
mod mc;
mod scad;

pub use checkpoint::{AssemblyCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use export::{parse_obj, read_obj, read_ply, write_obj, write_ply, ObjGroup};
pub use mc::{case_table, marching_cubes, CaseEntry, ScalarGrid};
pub use scad::{export_openscad, fit_box, validate_scad, FittedBox, ScadExport, ScadMode};

use rayon::prelude::*;

use crate::assembly::{min_active, FieldKernel, PrimitiveBank, SelectionMode};
use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Iso-level of the extracted surface; matches the inside test `a* < 0.01`.
pub const ISO: f64 = 0.01;

pub const MIN_RESOLUTION: usize = 16;
pub const EVAL_RESOLUTION: usize = 128;
pub const PREVIEW_RESOLUTION: usize = 64;

/// Grid values kept in memory at once while meshing parts.
const PART_BATCH_VALUES: usize = 1 << 25;

fn check_resolution(res: usize) -> Result<()> {
    if res < MIN_RESOLUTION {
        return Err(Error::Config(format!(
            "grid resolution must be at least {MIN_RESOLUTION}, got {res}"
        )));
    }
    Ok(())
}

fn grid_points(res: usize) -> impl IndexedParallelIterator<Item = [f64; 3]> {
    let h = 2.0 / (res - 1) as f64;
    (0..res * res * res).into_par_iter().map(move |idx| {
        let i = idx % res;
        let j = (idx / res) % res;
        let k = idx / (res * res);
        [-1.0 + i as f64 * h, -1.0 + j as f64 * h, -1.0 + k as f64 * h]
    })
}

fn grid_of(res: usize, values: Vec<f64>) -> ScalarGrid {
    ScalarGrid {
        n: res,
        lo: -1.0,
        h: 2.0 / (res - 1) as f64,
        values,
    }
}

/// Surface of `{a* < iso}` sampled on a `res³` grid over `[-1, 1]³`.
pub fn extract_mesh(bank: &PrimitiveBank, res: usize, iso: f64) -> Result<Mesh> {
    check_resolution(res)?;
    let kernel = FieldKernel::new(bank);
    if !kernel.any_active() {
        log::warn!("no active convex; the extracted mesh is empty");
        return Ok(Mesh::default());
    }
    let values: Vec<f64> = grid_points(res)
        .map_init(
            || vec![0.0; kernel.convexes()],
            |o, x| kernel.a_star(x, o),
        )
        .collect();
    let mesh = marching_cubes(&grid_of(res, values), iso);
    if mesh.is_empty() {
        log::warn!("the occupancy field has no interior on the grid; the extracted mesh is empty");
    }
    Ok(mesh)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    /// Column of the selection matrix this part comes from.
    pub convex: usize,
    pub color: [f64; 3],
    pub mesh: Mesh,
    pub watertight: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartMesh {
    /// Non-empty convexes in column order.
    pub parts: Vec<Part>,
    pub merged: Mesh,
}

/// Mesh every non-empty convex from its own membership field `O[·,c]`.
///
/// `colors` must hold one entry per convex.
pub fn extract_parts(bank: &PrimitiveBank, colors: &[[f64; 3]], res: usize) -> Result<PartMesh> {
    check_resolution(res)?;
    if bank.mode() != SelectionMode::Binary {
        return Err(Error::Mode { expected: "binary" });
    }
    if colors.len() != bank.convex_count() {
        return Err(Error::shape("extract_parts colors", bank.convex_count(), colors.len()));
    }
    let kernel = FieldKernel::new(bank);
    let active: Vec<usize> = (0..kernel.convexes()).filter(|&c| kernel.active()[c]).collect();
    let nodes = res * res * res;
    let batch = (PART_BATCH_VALUES / nodes).max(1);

    let mut merged_values = vec![f64::INFINITY; nodes];
    let mut parts = Vec::new();
    for cols in active.chunks(batch) {
        // node-major values for this batch of columns
        let block: Vec<f64> = grid_points(res)
            .map_init(
                || vec![0.0; kernel.convexes()],
                |o, x| {
                    kernel.eval_o(x, o);
                    cols.iter().map(|&c| o[c]).collect::<Vec<f64>>()
                },
            )
            .flatten_iter()
            .collect();
        let w = cols.len();
        for (node, m) in merged_values.iter_mut().enumerate() {
            for &v in &block[node * w..(node + 1) * w] {
                if v < *m {
                    *m = v;
                }
            }
        }
        let meshes: Vec<Option<Part>> = cols
            .par_iter()
            .enumerate()
            .map(|(slot, &c)| {
                let values: Vec<f64> = (0..nodes).map(|n| block[n * w + slot]).collect();
                if !values.iter().any(|&v| v < ISO) {
                    return None;
                }
                let mesh = marching_cubes(&grid_of(res, values), ISO);
                let watertight = mesh.is_watertight();
                if !watertight {
                    log::warn!("part {c} is not watertight at resolution {res}");
                }
                Some(Part {
                    convex: c,
                    color: colors[c],
                    mesh,
                    watertight,
                })
            })
            .collect();
        parts.extend(meshes.into_iter().flatten());
    }
    let merged = if active.is_empty() {
        Mesh::default()
    } else {
        marching_cubes(&grid_of(res, merged_values), ISO)
    };
    Ok(PartMesh { parts, merged })
}

/// `a*` at one point, `+∞` with no active convex.
pub fn occupancy_at(bank: &PrimitiveBank, x: [f64; 3]) -> f64 {
    let kernel = FieldKernel::new(bank);
    let mut o = vec![0.0; kernel.convexes()];
    kernel.eval_o(x, &mut o);
    min_active(&o, kernel.active()).map_or(f64::INFINITY, |(v, _)| v)
}
