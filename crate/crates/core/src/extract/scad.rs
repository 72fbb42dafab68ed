//! OpenSCAD export of part meshes and a small grammar checker for the output.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::Part;
use crate::error::{Error, Result};
use crate::mesh::Mesh;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScadMode {
    /// One `polyhedron` per part.
    Polyhedron,
    /// One oriented `cube` per part, fitted to the part's vertices.
    FittedBox,
}

/// Oriented box `center + Σ axes[i]·s_i` with `|s_i| ≤ size[i] / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedBox {
    pub center: [f64; 3],
    /// Unit axes, right-handed.
    pub axes: [[f64; 3]; 3],
    pub size: [f64; 3],
}

impl FittedBox {
    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ScadExport {
    pub script: String,
    /// Convex index of every emitted part, in script order.
    pub emitted: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Parts whose enclosed volume is below this are skipped.
const DEGENERATE_VOLUME: f64 = 1e-9;

/// Box aligned with the columns of `r` that encloses `pts`.
fn box_for(pts: &[Vector3<f64>], r: &Rotation3<f64>) -> FittedBox {
    let m = r.matrix();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        let local = m.transpose() * p;
        for d in 0..3 {
            lo[d] = lo[d].min(local[d]);
            hi[d] = hi[d].max(local[d]);
        }
    }
    let mid = Vector3::new((lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0);
    let c = m * mid;
    FittedBox {
        center: [c.x, c.y, c.z],
        axes: std::array::from_fn(|j| [m[(0, j)], m[(1, j)], m[(2, j)]]),
        size: std::array::from_fn(|d| hi[d] - lo[d]),
    }
}

/// Smallest-volume oriented box found from PCA and identity starts refined
/// by coordinate rotations with a halving step. `None` for degenerate meshes.
pub fn fit_box(mesh: &Mesh) -> Option<FittedBox> {
    if mesh.vertices.len() < 4 || mesh.signed_volume().abs() < DEGENERATE_VOLUME {
        return None;
    }
    let pts: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| Vector3::new(v[0], v[1], v[2])).collect();
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vector3<f64>>() / n;
    let cov = pts
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let mut pca = SymmetricEigen::new(cov).eigenvectors;
    if pca.determinant() < 0.0 {
        pca.column_mut(2).neg_mut();
    }
    let starts = [Rotation3::identity(), Rotation3::from_matrix(&pca)];
    let mut best: Option<(Rotation3<f64>, FittedBox)> = None;
    for start in starts {
        let mut r = start;
        let mut cur = box_for(&pts, &r);
        let mut step = 0.1f64;
        while step > 1e-5 {
            let mut improved = false;
            for axis in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
                for sign in [1.0, -1.0] {
                    let cand = r * Rotation3::from_axis_angle(&axis, sign * step);
                    let b = box_for(&pts, &cand);
                    if b.volume() < cur.volume() * (1.0 - 1e-12) {
                        r = cand;
                        cur = b;
                        improved = true;
                    }
                }
            }
            if !improved {
                step /= 2.0;
            }
        }
        if best.as_ref().is_none_or(|(_, b)| cur.volume() < b.volume()) {
            best = Some((r, cur));
        }
    }
    best.map(|(_, b)| b)
}

fn num(v: f64) -> String {
    // OpenSCAD has no literal for -0
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v}")
    }
}

fn vec3(v: [f64; 3]) -> String {
    format!("[{}, {}, {}]", num(v[0]), num(v[1]), num(v[2]))
}

/// Render parts as an OpenSCAD `union`.
pub fn export_openscad(parts: &[Part], mode: ScadMode) -> ScadExport {
    let mut out = ScadExport::default();
    let s = &mut out.script;
    writeln!(s, "// {} parts", parts.len()).unwrap();
    writeln!(s, "union() {{").unwrap();
    for part in parts {
        if part.mesh.signed_volume().abs() < DEGENERATE_VOLUME {
            let msg = format!("part {} has near-zero volume; skipped", part.convex);
            log::warn!("{msg}");
            out.warnings.push(msg);
            continue;
        }
        writeln!(s, "  // convex {}", part.convex).unwrap();
        match mode {
            ScadMode::Polyhedron => {
                let points: Vec<String> = part.mesh.vertices.iter().map(|&v| vec3(v)).collect();
                // OpenSCAD wants faces clockwise seen from outside.
                let faces: Vec<String> = part
                    .mesh
                    .triangles
                    .iter()
                    .map(|t| format!("[{}, {}, {}]", t[0], t[2], t[1]))
                    .collect();
                writeln!(
                    s,
                    "  color({}) polyhedron(points = [{}], faces = [{}]);",
                    vec3(part.color),
                    points.join(", "),
                    faces.join(", ")
                )
                .unwrap();
            }
            ScadMode::FittedBox => {
                let Some(b) = fit_box(&part.mesh) else {
                    let msg = format!("part {} is degenerate; no box fitted", part.convex);
                    log::warn!("{msg}");
                    out.warnings.push(msg);
                    continue;
                };
                let rows: Vec<String> = (0..3)
                    .map(|i| {
                        format!(
                            "[{}, {}, {}, {}]",
                            num(b.axes[0][i]),
                            num(b.axes[1][i]),
                            num(b.axes[2][i]),
                            num(b.center[i])
                        )
                    })
                    .collect();
                writeln!(
                    s,
                    "  color({}) multmatrix(m = [{}, [0, 0, 0, 1]]) cube(size = {}, center = true);",
                    vec3(part.color),
                    rows.join(", "),
                    vec3(b.size)
                )
                .unwrap();
            }
        }
        out.emitted.push(part.convex);
    }
    writeln!(s, "}}").unwrap();
    out
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Number,
    Str,
    Punct(char),
}

fn scad_error(line: usize, reason: impl std::fmt::Display) -> Error {
    Error::Format {
        format: "OpenSCAD",
        reason: format!("line {line}: {reason}"),
    }
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    let mut line = 1;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            line += 1;
            i += 1;
        } else if c.is_whitespace() {
            i += 1;
        } else if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            let start = line;
            i += 2;
            loop {
                match chars.get(i) {
                    None => return Err(scad_error(start, "unterminated block comment")),
                    Some('*') if chars.get(i + 1) == Some(&'/') => {
                        i += 2;
                        break;
                    }
                    Some('\n') => {
                        line += 1;
                        i += 1;
                    }
                    Some(_) => i += 1,
                }
            }
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '.' || ((chars[i] == '-' || chars[i] == '+') && matches!(chars[i - 1], 'e' | 'E'))) {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            text.parse::<f64>().map_err(|_| scad_error(line, format!("bad number `{text}`")))?;
            toks.push((Tok::Number, line));
        } else if c.is_alphabetic() || c == '_' || c == '$' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                i += 1;
            }
            toks.push((Tok::Ident(chars[start..i].iter().collect()), line));
        } else if c == '"' {
            i += 1;
            while i < chars.len() && chars[i] != '"' {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            if i >= chars.len() {
                return Err(scad_error(line, "unterminated string"));
            }
            i += 1;
            toks.push((Tok::Str, line));
        } else if "{}()[];,=+-*/%<>!?:#&|^".contains(c) {
            toks.push((Tok::Punct(c), line));
            i += 1;
        } else {
            return Err(scad_error(line, format!("unexpected character `{c}`")));
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

/// Modules the exporter may emit plus common builtins.
const KNOWN_MODULES: &[&str] = &[
    "union", "difference", "intersection", "color", "multmatrix", "translate", "rotate", "scale",
    "mirror", "cube", "sphere", "cylinder", "polyhedron", "hull", "echo",
];

impl Parser {
    fn line(&self) -> usize {
        self.toks.get(self.pos).or(self.toks.last()).map_or(1, |t| t.1)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn is(&self, c: char) -> bool {
        self.peek() == Some(&Tok::Punct(c))
    }

    fn eat(&mut self, c: char) -> bool {
        if self.is(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(scad_error(self.line(), format!("expected `{c}`, found {:?}", self.peek())))
        }
    }

    fn ident(&mut self) -> Result<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            other => Err(scad_error(self.line(), format!("expected identifier, found {other:?}"))),
        }
    }

    fn statement(&mut self) -> Result<()> {
        if self.eat(';') {
            return Ok(());
        }
        if self.eat('{') {
            while !self.eat('}') {
                if self.peek().is_none() {
                    return Err(scad_error(self.line(), "unclosed `{`"));
                }
                self.statement()?;
            }
            return Ok(());
        }
        while self.eat('!') || self.eat('#') || self.eat('%') || self.eat('*') {}
        let name = self.ident()?;
        if self.eat('=') {
            self.expr()?;
            return self.expect(';');
        }
        if !KNOWN_MODULES.contains(&name.as_str()) {
            return Err(scad_error(self.line(), format!("unknown module `{name}`")));
        }
        self.expect('(')?;
        self.arguments(')')?;
        self.statement()
    }

    fn arguments(&mut self, close: char) -> Result<()> {
        if self.eat(close) {
            return Ok(());
        }
        loop {
            if matches!(self.peek(), Some(Tok::Ident(_))) && self.toks.get(self.pos + 1).map(|t| &t.0) == Some(&Tok::Punct('=')) {
                self.pos += 2;
            }
            self.expr()?;
            if self.eat(close) {
                return Ok(());
            }
            self.expect(',')?;
            if self.eat(close) {
                return Ok(());
            }
        }
    }

    fn expr(&mut self) -> Result<()> {
        self.unary()?;
        loop {
            let binary = matches!(self.peek(), Some(Tok::Punct('+' | '-' | '*' | '/' | '%' | '<' | '>' | '=' | '!' | '&' | '|' | '^')));
            if binary {
                // two-character operators are consumed as two tokens
                self.pos += 1;
                if matches!(self.peek(), Some(Tok::Punct('=' | '&' | '|'))) {
                    self.pos += 1;
                }
                self.unary()?;
            } else if self.eat('?') {
                self.expr()?;
                self.expect(':')?;
                self.expr()?;
            } else {
                return Ok(());
            }
        }
    }

    fn unary(&mut self) -> Result<()> {
        while self.eat('-') || self.eat('+') || self.eat('!') {}
        self.primary()?;
        loop {
            if self.eat('[') {
                self.expr()?;
                self.expect(']')?;
            } else if self.eat('(') {
                self.arguments(')')?;
            } else {
                return Ok(());
            }
        }
    }

    fn primary(&mut self) -> Result<()> {
        match self.peek() {
            Some(Tok::Number | Tok::Str | Tok::Ident(_)) => {
                self.pos += 1;
                Ok(())
            }
            Some(Tok::Punct('(')) => {
                self.pos += 1;
                self.expr()?;
                self.expect(')')
            }
            Some(Tok::Punct('[')) => {
                self.pos += 1;
                if self.eat(']') {
                    return Ok(());
                }
                self.expr()?;
                if self.eat(':') {
                    self.expr()?;
                    if self.eat(':') {
                        self.expr()?;
                    }
                    return self.expect(']');
                }
                loop {
                    if self.eat(']') {
                        return Ok(());
                    }
                    self.expect(',')?;
                    if self.eat(']') {
                        return Ok(());
                    }
                    self.expr()?;
                }
            }
            other => Err(scad_error(self.line(), format!("expected expression, found {other:?}"))),
        }
    }
}

/// Check `src` against the OpenSCAD statement and expression grammar.
pub fn validate_scad(src: &str) -> Result<()> {
    let mut p = Parser {
        toks: tokenize(src)?,
        pos: 0,
    };
    while p.peek().is_some() {
        p.statement()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::marching_cubes;
    use crate::extract::ScalarGrid;

    fn part(convex: usize, mesh: Mesh) -> Part {
        Part {
            convex,
            color: [0.25, 0.5, 1.0],
            watertight: mesh.is_watertight(),
            mesh,
        }
    }

    #[test]
    fn axis_aligned_cuboid_box_matches_extents() {
        let b = fit_box(&Mesh::cuboid([-0.3, -0.1, 0.2], [0.5, 0.3, 0.4])).unwrap();
        let mut got = b.size;
        got.sort_by(f64::total_cmp);
        let want = [0.2, 0.4, 0.8];
        for d in 0..3 {
            assert!((got[d] - want[d]).abs() <= 0.02 * want[d], "{got:?}");
        }
        for d in 0..3 {
            assert!((b.center[d] - [0.1, 0.1, 0.3][d]).abs() < 1e-6);
        }
    }

    #[test]
    fn rotated_cuboid_is_recovered() {
        let r = Rotation3::from_euler_angles(0.3, -0.5, 0.9);
        let m = Mesh::cuboid([-0.4, -0.2, -0.1], [0.4, 0.2, 0.1]).map_vertices(|v| {
            let p = r * Vector3::new(v[0], v[1], v[2]);
            [p.x, p.y, p.z]
        });
        let b = fit_box(&m).unwrap();
        assert!((b.volume() - 0.8 * 0.4 * 0.2).abs() < 0.02 * 0.064, "{:?}", b.size);
    }

    #[test]
    fn sphere_box_side_is_about_the_diameter() {
        let grid = ScalarGrid::sample(40, |p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2] - 0.25);
        let b = fit_box(&marching_cubes(&grid, 0.0)).unwrap();
        for s in b.size {
            assert!((s - 1.0).abs() < 0.06, "{:?}", b.size);
        }
    }

    #[test]
    fn both_modes_emit_valid_scripts() {
        let parts = vec![
            part(0, Mesh::cuboid([0.0; 3], [1.0; 3])),
            part(4, Mesh::cuboid([-1.0; 3], [-0.5, 0.0, 0.25])),
        ];
        for mode in [ScadMode::Polyhedron, ScadMode::FittedBox] {
            let out = export_openscad(&parts, mode);
            validate_scad(&out.script).unwrap_or_else(|e| panic!("{e}\n{}", out.script));
            assert_eq!(out.emitted, vec![0, 4]);
            assert!(out.warnings.is_empty());
        }
        let boxes = export_openscad(&parts, ScadMode::FittedBox).script;
        assert_eq!(boxes.matches("cube(").count(), 2);
    }

    #[test]
    fn polyhedron_faces_are_clockwise_from_outside() {
        let out = export_openscad(&[part(0, Mesh::cuboid([0.0; 3], [1.0; 3]))], ScadMode::Polyhedron);
        // First cuboid triangle is [0, 2, 3]; emitted reversed.
        assert!(out.script.contains("faces = [[0, 3, 2]"));
    }

    #[test]
    fn degenerate_part_is_skipped_with_warning() {
        let out = export_openscad(&[part(2, Mesh::square(0.0))], ScadMode::FittedBox);
        assert!(out.emitted.is_empty());
        assert_eq!(out.warnings.len(), 1);
        validate_scad(&out.script).unwrap();
    }

    #[test]
    fn validator_rejects_broken_scripts() {
        validate_scad("/* c */ x = [1:2:5]; translate([1, -2e-3, .5]) { cube(1); sphere(r = 2, $fn = 8); } // end").unwrap();
        for bad in [
            "cube(1)",
            "union() { cube(1);",
            "cube(size = [1, 2, );",
            "frobnicate(1);",
            "cube(1) @;",
            "/* open",
        ] {
            assert!(validate_scad(bad).is_err(), "{bad}");
        }
    }
}
