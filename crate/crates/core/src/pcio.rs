//! Point-cloud and mesh containers plus XYZ / PLY / OBJ reading and writing.
//!
//! Per-point optimization state (normal, area weight, confidence, density) is
//! stored in PLY files as the vertex properties `nx ny nz area conf density`,
//! so a single file checkpoints the whole optimizer state.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DiwrError, Result};
use crate::Vec3;

/// Uniform scale + translation taking original coordinates into the unit cube:
/// `normalized = (p - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub original_min: [f64; 3],
    pub original_max: [f64; 3],
    pub offset: [f64; 3],
    pub scale: f64,
}

impl ScaleRecord {
    pub fn identity() -> Self {
        ScaleRecord {
            original_min: [0.0; 3],
            original_max: [1.0; 3],
            offset: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn forward(&self, p: &Vec3) -> Vec3 {
        (p - Vec3::from(self.offset)) * self.scale
    }

    pub fn inverse(&self, q: &Vec3) -> Vec3 {
        q / self.scale + Vec3::from(self.offset)
    }

    /// Record equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &ScaleRecord) -> ScaleRecord {
        let offset = Vec3::from(next.offset) / self.scale + Vec3::from(self.offset);
        ScaleRecord {
            original_min: self.original_min,
            original_max: self.original_max,
            offset: offset.into(),
            scale: self.scale * next.scale,
        }
    }
}

/// Positions plus the per-point optimization state.
///
/// Mutating accessors bump a generation counter so that structures built from
/// a snapshot (the winding tree) can detect staleness.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    normals: Vec<Vec3>,
    area_weights: Vec<f64>,
    confidences: Vec<f64>,
    densities: Vec<u32>,
    scale_record: Option<ScaleRecord>,
    generation: u64,
}

impl PointCloud {
    /// Cloud with placeholder state: zero normals, `a = 1`, `c = 1`, `rho = 0`.
    pub fn from_positions(positions: Vec<Vec3>) -> Self {
        let n = positions.len();
        PointCloud {
            positions,
            normals: vec![Vec3::zeros(); n],
            area_weights: vec![1.0; n],
            confidences: vec![1.0; n],
            densities: vec![0; n],
            scale_record: None,
            generation: 0,
        }
    }

    pub fn with_state(
        positions: Vec<Vec3>,
        normals: Vec<Vec3>,
        area_weights: Vec<f64>,
        confidences: Vec<f64>,
    ) -> Result<Self> {
        let n = positions.len();
        if normals.len() != n || area_weights.len() != n || confidences.len() != n {
            return Err(DiwrError::LengthMismatch(format!(
                "{} positions, {} normals, {} area weights, {} confidences",
                n,
                normals.len(),
                area_weights.len(),
                confidences.len()
            )));
        }
        Ok(PointCloud {
            positions,
            normals,
            area_weights,
            confidences,
            densities: vec![0; n],
            scale_record: None,
            generation: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }
    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }
    pub fn area_weights(&self) -> &[f64] {
        &self.area_weights
    }
    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }
    pub fn densities(&self) -> &[u32] {
        &self.densities
    }
    pub fn scale_record(&self) -> Option<&ScaleRecord> {
        self.scale_record.as_ref()
    }

    /// Effective weight `a_i c_i` of every point.
    pub fn effective_weights(&self) -> Vec<f64> {
        self.area_weights
            .iter()
            .zip(&self.confidences)
            .map(|(a, c)| a * c)
            .collect()
    }

    pub fn effective_sum(&self) -> f64 {
        self.area_weights
            .iter()
            .zip(&self.confidences)
            .map(|(a, c)| a * c)
            .sum()
    }

    fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn normals_mut(&mut self) -> &mut [Vec3] {
        self.touch();
        &mut self.normals
    }
    pub fn area_weights_mut(&mut self) -> &mut [f64] {
        self.touch();
        &mut self.area_weights
    }
    pub fn confidences_mut(&mut self) -> &mut [f64] {
        self.touch();
        &mut self.confidences
    }
    pub fn densities_mut(&mut self) -> &mut [u32] {
        &mut self.densities
    }

    pub fn set_normals(&mut self, normals: Vec<Vec3>) {
        assert_eq!(normals.len(), self.len());
        self.touch();
        self.normals = normals;
    }
    pub fn set_area_weights(&mut self, a: Vec<f64>) {
        assert_eq!(a.len(), self.len());
        self.touch();
        self.area_weights = a;
    }
    pub fn set_confidences(&mut self, c: Vec<f64>) {
        assert_eq!(c.len(), self.len());
        self.touch();
        self.confidences = c;
    }
    pub fn set_densities(&mut self, rho: Vec<u32>) {
        assert_eq!(rho.len(), self.len());
        self.densities = rho;
    }
    pub fn set_scale_record(&mut self, record: Option<ScaleRecord>) {
        self.scale_record = record;
    }

    /// Copy of the points selected by `indices`, all channels carried over.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
            area_weights: indices.iter().map(|&i| self.area_weights[i]).collect(),
            confidences: indices.iter().map(|&i| self.confidences[i]).collect(),
            densities: indices.iter().map(|&i| self.densities[i]).collect(),
            scale_record: self.scale_record,
            generation: 0,
        }
    }

    /// Appends points with placeholder state.
    pub fn extend_positions(&mut self, extra: &[Vec3]) {
        self.touch();
        for p in extra {
            self.positions.push(*p);
            self.normals.push(Vec3::zeros());
            self.area_weights.push(1.0);
            self.confidences.push(1.0);
            self.densities.push(0);
        }
    }

    /// Checks the state invariants. Zero-length placeholder normals are
    /// accepted only when `allow_placeholder_normals` is set.
    pub fn validate(&self, allow_placeholder_normals: bool) -> std::result::Result<(), String> {
        let n = self.len();
        if self.normals.len() != n
            || self.area_weights.len() != n
            || self.confidences.len() != n
            || self.densities.len() != n
        {
            return Err("channel lengths differ".into());
        }
        for (i, nrm) in self.normals.iter().enumerate() {
            let len = nrm.norm();
            let placeholder = allow_placeholder_normals && len == 0.0;
            if !placeholder && (len - 1.0).abs() > 1e-6 {
                return Err(format!("normal {i} has length {len}"));
            }
        }
        if let Some(i) = self
            .confidences
            .iter()
            .position(|c| !(0.0..=1.0).contains(c))
        {
            return Err(format!(
                "confidence {i} = {} outside [0,1]",
                self.confidences[i]
            ));
        }
        if let Some(i) = self.area_weights.iter().position(|a| !(*a >= 0.0)) {
            return Err(format!(
                "area weight {i} = {} negative",
                self.area_weights[i]
            ));
        }
        Ok(())
    }
}

pub fn bounding_box(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = points.first()?;
    Some(
        points
            .iter()
            .fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p))),
    )
}

/// Uniformly scales and translates the cloud so its bounding box fits
/// `[0,1]^3` with the longest axis spanning exactly `[0,1]`. Area weights are
/// rescaled by `scale^2`. Any existing scale record is composed with the new
/// transform so the returned record always maps back to the original frame.
pub fn normalize_unit_cube(cloud: &PointCloud) -> Result<(PointCloud, ScaleRecord)> {
    let (lo, hi) = bounding_box(cloud.positions()).ok_or(DiwrError::DegenerateExtent)?;
    let extent = (hi - lo).max();
    if !(extent > 0.0) {
        return Err(DiwrError::DegenerateExtent);
    }
    let step = ScaleRecord {
        original_min: lo.into(),
        original_max: hi.into(),
        offset: lo.into(),
        scale: 1.0 / extent,
    };
    let mut out = cloud.clone();
    if step.scale != 1.0 || lo != Vec3::zeros() {
        out.positions = cloud.positions.iter().map(|p| step.forward(p)).collect();
        let s2 = step.scale * step.scale;
        out.area_weights = cloud.area_weights.iter().map(|a| a * s2).collect();
        out.touch();
    }
    let record = match cloud.scale_record {
        Some(prev) => prev.then(&step),
        None => step,
    };
    out.scale_record = Some(record);
    Ok((out, record))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

/// Edge-incidence audit of a triangle mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EdgeAudit {
    pub edges: usize,
    pub boundary_edges: usize,
    pub non_manifold_edges: usize,
}

impl EdgeAudit {
    pub fn is_watertight(&self) -> bool {
        self.boundary_edges == 0 && self.non_manifold_edges == 0
    }
}

impl TriMesh {
    pub fn indices_in_range(&self) -> bool {
        let n = self.vertices.len();
        self.faces.iter().all(|f| f.iter().all(|&i| i < n))
    }

    fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::with_capacity(self.faces.len() * 3 / 2);
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn edge_audit(&self) -> EdgeAudit {
        let counts = self.edge_counts();
        EdgeAudit {
            edges: counts.len(),
            boundary_edges: counts.values().filter(|&&c| c == 1).count(),
            non_manifold_edges: counts.values().filter(|&&c| c > 2).count(),
        }
    }

    /// `V - E + F` counting only vertices referenced by a face.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &i in f {
                used[i] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        let e = self.edge_counts().len() as i64;
        v - e + self.faces.len() as i64
    }

    /// Signed enclosed volume via the divergence theorem.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let (a, b, c) = (
                    self.vertices[f[0]],
                    self.vertices[f[1]],
                    self.vertices[f[2]],
                );
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn surface_area(&self) -> f64 {
        self.faces.iter().map(|f| self.face_area(f)).sum()
    }

    pub fn face_area(&self, f: &[usize; 3]) -> f64 {
        let (a, b, c) = (
            self.vertices[f[0]],
            self.vertices[f[1]],
            self.vertices[f[2]],
        );
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn face_normal(&self, f: &[usize; 3]) -> Vec3 {
        let (a, b, c) = (
            self.vertices[f[0]],
            self.vertices[f[1]],
            self.vertices[f[2]],
        );
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    /// Face indices grouped by edge-connected component, largest first.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for f in &self.faces {
            let r0 = find(&mut parent, f[0]);
            for &v in &f[1..] {
                let r = find(&mut parent, v);
                if r != r0 {
                    let (lo, hi) = (r.min(r0), r.max(r0));
                    parent[hi] = lo;
                }
            }
        }
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            let root = find(&mut parent, f[0]);
            groups.entry(root).or_default().push(fi);
        }
        let mut comps: Vec<Vec<usize>> = groups.into_values().collect();
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        comps
    }

    /// Sub-mesh made of the given faces with unreferenced vertices dropped.
    pub fn submesh(&self, face_ids: &[usize]) -> TriMesh {
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut faces = Vec::with_capacity(face_ids.len());
        let mut sorted = face_ids.to_vec();
        sorted.sort_unstable();
        for &fi in &sorted {
            let f = self.faces[fi];
            let mut nf = [0usize; 3];
            for k in 0..3 {
                if remap[f[k]] == usize::MAX {
                    remap[f[k]] = vertices.len();
                    vertices.push(self.vertices[f[k]]);
                }
                nf[k] = remap[f[k]];
            }
            faces.push(nf);
        }
        TriMesh { vertices, faces }
    }

    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    Xyz,
    Ply,
    ObjPoints,
}

impl PointFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "xyz" | "txt" | "pts" => Some(PointFormat::Xyz),
            "ply" => Some(PointFormat::Ply),
            "obj" => Some(PointFormat::ObjPoints),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    PlyBinary,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "obj" => Some(MeshFormat::Obj),
            "ply" => Some(MeshFormat::PlyBinary),
            _ => None,
        }
    }
}

pub const MIN_POINTS: usize = 4;

fn parse_err(path: &Path, location: impl Into<String>, message: impl Into<String>) -> DiwrError {
    DiwrError::Parse {
        path: path.to_path_buf(),
        location: location.into(),
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DiwrError::FileNotFound(path.to_path_buf()),
        _ => DiwrError::Io(e),
    })
}

/// Loads a point cloud. Stored state channels found in a PLY file are read
/// back; normals that are not finite unit vectors are replaced by the zero
/// placeholder.
pub fn load_points(path: &Path, format: PointFormat) -> Result<PointCloud> {
    let file = open(path)?;
    let mut cloud = match format {
        PointFormat::Xyz => read_xyz(BufReader::new(file), path)?,
        PointFormat::ObjPoints => read_obj(BufReader::new(file), path)?.0,
        PointFormat::Ply => read_ply(BufReader::new(file), path)?.0,
    };
    if cloud.len() < MIN_POINTS {
        return Err(DiwrError::TooFewPoints {
            got: cloud.len(),
            need: MIN_POINTS,
        });
    }
    for n in cloud.normals.iter_mut() {
        let len = n.norm();
        if !len.is_finite() || (len - 1.0).abs() > 1e-3 {
            *n = Vec3::zeros();
        } else {
            *n /= len;
        }
    }
    Ok(cloud)
}

pub fn load_points_auto(path: &Path) -> Result<PointCloud> {
    let format = PointFormat::from_path(path)
        .ok_or_else(|| parse_err(path, "extension", "unknown point-cloud format"))?;
    load_points(path, format)
}

pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    let file = open(path)?;
    let mesh = match MeshFormat::from_path(path) {
        Some(MeshFormat::Obj) => read_obj(BufReader::new(file), path)?.1,
        Some(MeshFormat::PlyBinary) => read_ply(BufReader::new(file), path)?.1,
        None => return Err(parse_err(path, "extension", "unknown mesh format")),
    };
    if !mesh.indices_in_range() {
        return Err(parse_err(path, "faces", "face index out of range"));
    }
    Ok(mesh)
}

fn read_xyz<R: BufRead>(reader: R, path: &Path) -> Result<PointCloud> {
    let mut positions = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut xyz = [0.0; 3];
        let mut fields = body.split_whitespace();
        for (k, slot) in xyz.iter_mut().enumerate() {
            let tok = fields.next().ok_or_else(|| {
                parse_err(
                    path,
                    format!("line {}", lineno + 1),
                    format!("missing coordinate {k}"),
                )
            })?;
            *slot = tok.parse().map_err(|_| {
                parse_err(
                    path,
                    format!("line {}", lineno + 1),
                    format!("bad number {tok:?}"),
                )
            })?;
        }
        positions.push(Vec3::from(xyz));
    }
    Ok(PointCloud::from_positions(positions))
}

fn read_obj<R: BufRead>(reader: R, path: &Path) -> Result<(PointCloud, TriMesh)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let loc = || format!("line {}", lineno + 1);
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("v") => {
                let mut xyz = [0.0; 3];
                for slot in xyz.iter_mut() {
                    let tok = fields
                        .next()
                        .ok_or_else(|| parse_err(path, loc(), "vertex needs 3 coordinates"))?;
                    *slot = tok
                        .parse()
                        .map_err(|_| parse_err(path, loc(), format!("bad number {tok:?}")))?;
                }
                vertices.push(Vec3::from(xyz));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in fields {
                    let idx_str = tok.split('/').next().unwrap_or("");
                    let idx: i64 = idx_str
                        .parse()
                        .map_err(|_| parse_err(path, loc(), format!("bad face index {tok:?}")))?;
                    let idx = if idx < 0 {
                        vertices.len() as i64 + idx
                    } else {
                        idx - 1
                    };
                    if idx < 0 {
                        return Err(parse_err(path, loc(), "face index out of range"));
                    }
                    poly.push(idx as usize);
                }
                if poly.len() < 3 {
                    return Err(parse_err(path, loc(), "face needs 3 vertices"));
                }
                for k in 1..poly.len() - 1 {
                    faces.push([poly[0], poly[k], poly[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok((
        PointCloud::from_positions(vertices.clone()),
        TriMesh { vertices, faces },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn read_le<R: Read>(self, r: &mut R) -> std::io::Result<f64> {
        macro_rules! rd {
            ($t:ty, $n:expr) => {{
                let mut b = [0u8; $n];
                r.read_exact(&mut b)?;
                <$t>::from_le_bytes(b) as f64
            }};
        }
        Ok(match self {
            Scalar::I8 => rd!(i8, 1),
            Scalar::U8 => rd!(u8, 1),
            Scalar::I16 => rd!(i16, 2),
            Scalar::U16 => rd!(u16, 2),
            Scalar::I32 => rd!(i32, 4),
            Scalar::U32 => rd!(u32, 4),
            Scalar::F32 => rd!(f32, 4),
            Scalar::F64 => rd!(f64, 8),
        })
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

fn read_ply<R: BufRead>(mut reader: R, path: &Path) -> Result<(PointCloud, TriMesh)> {
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut binary = false;
    let mut line = String::new();
    let mut lineno = 0usize;
    let mut header_bytes = 0usize;
    loop {
        line.clear();
        let read = reader.read_line(&mut line)?;
        if read == 0 {
            return Err(parse_err(
                path,
                format!("line {lineno}"),
                "unterminated header",
            ));
        }
        header_bytes += read;
        lineno += 1;
        let loc = format!("line {lineno}");
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] if lineno == 1 => {}
            _ if lineno == 1 => return Err(parse_err(path, loc, "missing 'ply' magic")),
            ["format", "ascii", _] => binary = false,
            ["format", "binary_little_endian", _] => binary = true,
            ["format", other, _] => {
                return Err(parse_err(path, loc, format!("unsupported format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(path, loc.clone(), "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", cnt, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, loc.clone(), "property before element"))?;
                let (c, i) = (Scalar::parse(cnt), Scalar::parse(item));
                match (c, i) {
                    (Some(c), Some(i)) => el.props.push(PlyProperty::List(name.to_string(), c, i)),
                    _ => return Err(parse_err(path, loc, "bad list property type")),
                }
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, loc.clone(), "property before element"))?;
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| parse_err(path, loc.clone(), format!("bad type {ty}")))?;
                el.props.push(PlyProperty::Scalar(name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => {
                return Err(parse_err(
                    path,
                    loc,
                    format!("unexpected header line {:?}", line.trim()),
                ))
            }
        }
    }

    let mut cloud = PointCloud::from_positions(Vec::new());
    let mut mesh = TriMesh::default();
    let mut ascii_tokens: Option<std::vec::IntoIter<String>> = None;
    if !binary {
        let mut rest = String::new();
        reader.read_to_string(&mut rest)?;
        let toks: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        ascii_tokens = Some(toks.into_iter());
    }
    let mut token_index = 0usize;
    let mut byte_offset = header_bytes;

    let mut next_value = |ty: Scalar, reader: &mut R| -> Result<f64> {
        match ascii_tokens.as_mut() {
            Some(toks) => {
                token_index += 1;
                let tok = toks.next().ok_or_else(|| {
                    parse_err(
                        path,
                        format!("data token {token_index}"),
                        "unexpected end of data",
                    )
                })?;
                tok.parse::<f64>().map_err(|_| {
                    parse_err(
                        path,
                        format!("data token {token_index}"),
                        format!("bad number {tok:?}"),
                    )
                })
            }
            None => {
                let v = ty.read_le(reader).map_err(|_| {
                    parse_err(
                        path,
                        format!("byte {byte_offset}"),
                        "unexpected end of binary data",
                    )
                })?;
                byte_offset += match ty {
                    Scalar::I8 | Scalar::U8 => 1,
                    Scalar::I16 | Scalar::U16 => 2,
                    Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
                    Scalar::F64 => 8,
                };
                Ok(v)
            }
        }
    };

    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let slot = |name: &str| {
            el.props
                .iter()
                .position(|p| matches!(p, PlyProperty::Scalar(n, _) if n == name))
        };
        let ix = [slot("x"), slot("y"), slot("z")];
        let inrm = [slot("nx"), slot("ny"), slot("nz")];
        let (iarea, iconf, idens) = (slot("area"), slot("conf"), slot("density"));
        if is_vertex && ix.iter().any(Option::is_none) {
            return Err(parse_err(path, "header", "vertex element lacks x/y/z"));
        }
        let mut values = vec![0.0; el.props.len()];
        for _ in 0..el.count {
            let mut face: Vec<usize> = Vec::new();
            for (pi, prop) in el.props.iter().enumerate() {
                match prop {
                    PlyProperty::Scalar(_, ty) => values[pi] = next_value(*ty, &mut reader)?,
                    PlyProperty::List(name, cty, ity) => {
                        let cnt = next_value(*cty, &mut reader)? as usize;
                        let take = is_face && (name == "vertex_indices" || name == "vertex_index");
                        for _ in 0..cnt {
                            let v = next_value(*ity, &mut reader)?;
                            if take {
                                face.push(v as usize);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                let p = Vec3::new(
                    values[ix[0].unwrap()],
                    values[ix[1].unwrap()],
                    values[ix[2].unwrap()],
                );
                cloud.positions.push(p);
                mesh.vertices.push(p);
                let nrm = match inrm {
                    [Some(a), Some(b), Some(c)] => Vec3::new(values[a], values[b], values[c]),
                    _ => Vec3::zeros(),
                };
                cloud.normals.push(nrm);
                cloud.area_weights.push(iarea.map_or(1.0, |i| values[i]));
                cloud.confidences.push(iconf.map_or(1.0, |i| values[i]));
                cloud
                    .densities
                    .push(idens.map_or(0, |i| values[i].max(0.0) as u32));
            } else if is_face && face.len() >= 3 {
                for k in 1..face.len() - 1 {
                    mesh.faces.push([face[0], face[k], face[k + 1]]);
                }
            }
        }
    }
    Ok((cloud, mesh))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes points; PLY output carries the full per-point state.
pub fn save_points(path: &Path, cloud: &PointCloud, format: PointFormat) -> Result<()> {
    let mut w = create(path)?;
    match format {
        PointFormat::Xyz => {
            for p in cloud.positions() {
                writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
            }
        }
        PointFormat::ObjPoints => {
            for p in cloud.positions() {
                writeln!(w, "v {} {} {}", p.x, p.y, p.z)?;
            }
        }
        PointFormat::Ply => write_state_ply(&mut w, cloud)?,
    }
    w.flush()?;
    Ok(())
}

fn write_state_ply<W: Write>(w: &mut W, cloud: &PointCloud) -> Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\ncomment diwr point state\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property double nx\nproperty double ny\nproperty double nz\n\
         property double area\nproperty double conf\nproperty uint density\nend_header\n",
        cloud.len()
    )?;
    for i in 0..cloud.len() {
        let (p, n) = (cloud.positions[i], cloud.normals[i]);
        for v in [
            p.x,
            p.y,
            p.z,
            n.x,
            n.y,
            n.z,
            cloud.area_weights[i],
            cloud.confidences[i],
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&cloud.densities[i].to_le_bytes())?;
    }
    Ok(())
}

/// Oriented points for an external screened-Poisson solver: `x y z nx ny nz`
/// plus a `weight` property holding the effective weight `a_i c_i`.
pub fn save_oriented_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = create(path)?;
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property float weight\nend_header\n",
        cloud.len()
    )?;
    for i in 0..cloud.len() {
        let (p, n) = (cloud.positions[i], cloud.normals[i]);
        let weight = cloud.area_weights[i] * cloud.confidences[i];
        for v in [p.x, p.y, p.z, n.x, n.y, n.z, weight] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_mesh(path: &Path, mesh: &TriMesh, format: MeshFormat) -> Result<()> {
    let mut w = create(path)?;
    match format {
        MeshFormat::Obj => {
            for v in &mesh.vertices {
                writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
            }
            for f in &mesh.faces {
                writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
            }
        }
        MeshFormat::PlyBinary => {
            write!(
                w,
                "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
                 property double x\nproperty double y\nproperty double z\n\
                 element face {}\nproperty list uchar int vertex_indices\nend_header\n",
                mesh.vertices.len(),
                mesh.faces.len()
            )?;
            for v in &mesh.vertices {
                for c in [v.x, v.y, v.z] {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
            for f in &mesh.faces {
                w.write_all(&[3u8])?;
                for &i in f {
                    w.write_all(&(i as i32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn path_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}
