//! The point-based winding field, its spatial gradient and parameter
//! derivatives, evaluated exactly or through a far-field tree.
//!
//! The tree stores, per node, the aggregated moment `sum m_j` of its sources,
//! the `|m_j|`-weighted centroid, the bounding radius about that centroid and
//! the symmetric moment-offset tensor. A node is used in aggregate form when
//! the query lies farther than `beta * radius` from its centroid; `beta <= 0`
//! disables the far field and reproduces exact summation.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{DiwrError, Result};
use crate::pcio::PointCloud;
use crate::{Vec3, FOUR_PI};

pub const SINGULAR_DIST: f64 = 1e-12;
const SINGULAR_DIST2: f64 = SINGULAR_DIST * SINGULAR_DIST;
const LEAF_SIZE: usize = 16;
const STACK_DEPTH: usize = 128;

/// `(p - q) . n / (4 pi |p - q|^3)`, the unweighted contribution of one
/// oriented point.
#[inline]
pub fn kernel(p: &Vec3, n: &Vec3, q: &Vec3) -> f64 {
    let d = p - q;
    let r2 = d.norm_squared();
    d.dot(n) / (FOUR_PI * r2 * r2.sqrt())
}

/// Gradient with respect to `q` of [`kernel`].
#[inline]
pub fn kernel_grad(p: &Vec3, n: &Vec3, q: &Vec3) -> Vec3 {
    let d = p - q;
    let r2 = d.norm_squared();
    let inv_r = 1.0 / r2.sqrt();
    let inv3 = inv_r * inv_r * inv_r;
    let dn = d.dot(n);
    (d * (3.0 * dn * inv3 * inv_r * inv_r) - n * inv3) / FOUR_PI
}

fn check_singular(cloud: &PointCloud, q: &Vec3) -> Result<()> {
    for (i, p) in cloud.positions().iter().enumerate() {
        if (p - q).norm_squared() < SINGULAR_DIST2 {
            return Err(DiwrError::SingularQuery {
                index: i,
                threshold: SINGULAR_DIST,
            });
        }
    }
    Ok(())
}

/// Direct summation of the field over every point.
pub fn eval_exact(cloud: &PointCloud, q: &Vec3) -> Result<f64> {
    check_singular(cloud, q)?;
    let mut w = 0.0;
    for i in 0..cloud.len() {
        let psi = cloud.area_weights()[i] * cloud.confidences()[i];
        if psi != 0.0 {
            w += psi * kernel(&cloud.positions()[i], &cloud.normals()[i], q);
        }
    }
    Ok(w)
}

pub fn grad_exact(cloud: &PointCloud, q: &Vec3) -> Result<Vec3> {
    check_singular(cloud, q)?;
    let mut g = Vec3::zeros();
    for i in 0..cloud.len() {
        let psi = cloud.area_weights()[i] * cloud.confidences()[i];
        if psi != 0.0 {
            g += kernel_grad(&cloud.positions()[i], &cloud.normals()[i], q) * psi;
        }
    }
    Ok(g)
}

/// Derivatives of `w(q)` with respect to one point's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointDerivs {
    pub d_area: f64,
    pub d_conf: f64,
    pub d_normal: Vec3,
}

pub fn partial_derivs(cloud: &PointCloud, q: &Vec3) -> Result<Vec<PointDerivs>> {
    check_singular(cloud, q)?;
    Ok((0..cloud.len())
        .map(|i| {
            let (p, n) = (cloud.positions()[i], cloud.normals()[i]);
            let (a, c) = (cloud.area_weights()[i], cloud.confidences()[i]);
            let k = kernel(&p, &n, q);
            let d = p - q;
            let r = d.norm();
            PointDerivs {
                d_area: c * k,
                d_conf: a * k,
                d_normal: d * (a * c / (FOUR_PI * r * r * r)),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
struct TreeNode {
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
enum Term {
    /// aggregated node
    Node(usize),
    /// individual source slot
    Source(usize),
}

/// Balanced binary partition of a fixed set of positions. Only the topology
/// lives here; moments are attached by [`DipoleField`] / [`ChargeField`] and
/// can be refreshed without rebuilding the partition.
#[derive(Debug, Clone)]
pub struct SourceTree {
    nodes: Vec<TreeNode>,
    /// tree slot -> original index
    order: Vec<usize>,
    /// original index -> tree slot
    slot_of: Vec<usize>,
    /// positions in slot order
    positions: Vec<Vec3>,
}

impl SourceTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            Self::split(points, &mut order, &mut nodes, 0, points.len());
        }
        let mut slot_of = vec![0; points.len()];
        for (slot, &i) in order.iter().enumerate() {
            slot_of[i] = slot;
        }
        let positions = order.iter().map(|&i| points[i]).collect();
        SourceTree {
            nodes,
            order,
            slot_of,
            positions,
        }
    }

    fn split(
        points: &[Vec3],
        order: &mut [usize],
        nodes: &mut Vec<TreeNode>,
        start: usize,
        end: usize,
    ) -> usize {
        let id = nodes.len();
        nodes.push(TreeNode {
            start,
            end,
            children: None,
        });
        if end - start > LEAF_SIZE {
            let mut lo = Vec3::repeat(f64::INFINITY);
            let mut hi = Vec3::repeat(f64::NEG_INFINITY);
            for &i in &order[start..end] {
                lo = lo.inf(&points[i]);
                hi = hi.sup(&points[i]);
            }
            let axis = (hi - lo).imax();
            let mid = (start + end) / 2;
            order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
            });
            let l = Self::split(points, order, nodes, start, mid);
            let r = Self::split(points, order, nodes, mid, end);
            nodes[id].children = Some((l, r));
        }
        id
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Original index of every slot.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn to_slots<T: Copy>(&self, values: &[T]) -> Vec<T> {
        self.order.iter().map(|&i| values[i]).collect()
    }

    /// Weighted centroid and bounding radius of every node for weights given
    /// in slot order. Falls back to the plain centroid for weightless nodes.
    fn node_geometry(&self, weights: &[f64]) -> (Vec<Vec3>, Vec<f64>, Vec<f64>) {
        let mut centroid = Vec::with_capacity(self.nodes.len());
        let mut radius = Vec::with_capacity(self.nodes.len());
        let mut total = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let range = node.start..node.end;
            let wsum: f64 = weights[range.clone()].iter().sum();
            let c = if wsum > 0.0 {
                range
                    .clone()
                    .fold(Vec3::zeros(), |acc, s| acc + self.positions[s] * weights[s])
                    / wsum
            } else {
                range
                    .clone()
                    .fold(Vec3::zeros(), |acc, s| acc + self.positions[s])
                    / (node.end - node.start) as f64
            };
            let r = range
                .map(|s| (self.positions[s] - c).norm_squared())
                .fold(0.0, f64::max)
                .sqrt();
            centroid.push(c);
            radius.push(r);
            total.push(wsum);
        }
        (centroid, radius, total)
    }

    /// Visits the tree for query `q`, reporting accepted aggregate nodes and
    /// individual sources. The node holding
    /// `exclude_slot` is always opened.
    #[inline]
    fn traverse(
        &self,
        q: &Vec3,
        beta: f64,
        centroid: &[Vec3],
        radius: &[f64],
        exclude_slot: Option<usize>,
        mut visit: impl FnMut(Term),
    ) {
        if self.nodes.is_empty() {
            return;
        }
        let beta2 = beta * beta;
        let mut stack = [0usize; STACK_DEPTH];
        let mut top = 1;
        while top > 0 {
            top -= 1;
            let id = stack[top];
            let node = &self.nodes[id];
            let holds_excluded = exclude_slot.is_some_and(|s| s >= node.start && s < node.end);
            // Far leaves are summed directly: exact and no more expensive
            // than the expansion.
            if beta > 0.0 && !holds_excluded && node.children.is_some() {
                let r = radius[id];
                if (centroid[id] - q).norm_squared() > beta2 * r * r {
                    visit(Term::Node(id));
                    continue;
                }
            }
            match node.children {
                Some((l, r)) => {
                    stack[top] = r;
                    stack[top + 1] = l;
                    top += 2;
                }
                None => {
                    for s in node.start..node.end {
                        if Some(s) != exclude_slot {
                            visit(Term::Source(s));
                        }
                    }
                }
            }
        }
    }
}

type Mat3 = nalgebra::Matrix3<f64>;

/// Potential and `q`-gradient (both without the `1/4pi`) of a dipole `m` at
/// offset `d = p - q`, with `s2 = |d|^2 + softening^2`.
#[inline(always)]
fn dipole_term(d: &Vec3, m: &Vec3, s2: f64) -> (f64, Vec3) {
    let inv_s = 1.0 / s2.sqrt();
    let inv3 = inv_s * inv_s * inv_s;
    let dm = d.dot(m);
    (dm * inv3, d * (3.0 * dm * inv3 * inv_s * inv_s) - m * inv3)
}

/// Correction from the symmetric moment tensor `S = sym(sum m_j (p_j - c)^T)`
/// of a node at offset `d = c - q`.
#[inline(always)]
fn tensor_term(d: &Vec3, s: &Mat3, s2: f64) -> (f64, Vec3) {
    let inv_s = 1.0 / s2.sqrt();
    let inv2 = inv_s * inv_s;
    let inv3 = inv2 * inv_s;
    let inv5 = inv3 * inv2;
    let sd = s * d;
    let dsd = d.dot(&sd);
    let tr = s.trace();
    let w = tr * inv3 - 3.0 * dsd * inv5;
    let g = d * (3.0 * tr * inv5 - 15.0 * dsd * inv5 * inv2) + sd * (6.0 * inv5);
    (w, g)
}

/// Fully symmetric third-order moment `sym(sum m_j (x) d_j (x) d_j)` of a
/// node together with its trace vector `t_c = sum_a U_aac`.
#[derive(Debug, Clone, Copy)]
struct Octupole {
    u: [f64; 27],
    t: Vec3,
}

impl Octupole {
    fn accumulate(moments: &[Vec3], offsets: impl Iterator<Item = Vec3>) -> Self {
        let mut v = [0.0; 27];
        for (m, d) in moments.iter().zip(offsets) {
            for a in 0..3 {
                for b in 0..3 {
                    let mab = m[a] * d[b];
                    for c in 0..3 {
                        v[9 * a + 3 * b + c] += mab * d[c];
                    }
                }
            }
        }
        let mut u = [0.0; 27];
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    u[9 * a + 3 * b + c] =
                        (v[9 * a + 3 * b + c] + v[9 * b + 3 * c + a] + v[9 * c + 3 * a + b]) / 3.0;
                }
            }
        }
        let t = Vec3::from_fn(|c, _| (0..3).map(|a| u[9 * a + 3 * a + c]).sum());
        Octupole { u, t }
    }

    /// Contribution at offset `d = c - q` (without `1/4pi`).
    #[inline(always)]
    fn term(&self, d: &Vec3, s2: f64) -> (f64, Vec3) {
        let mut u2 = Vec3::zeros();
        for a in 0..3 {
            let mut acc = 0.0;
            for b in 0..3 {
                let row = 9 * a + 3 * b;
                acc +=
                    d[b] * (self.u[row] * d[0] + self.u[row + 1] * d[1] + self.u[row + 2] * d[2]);
            }
            u2[a] = acc;
        }
        let uddd = u2.dot(d);
        let td = self.t.dot(d);
        let inv_s = 1.0 / s2.sqrt();
        let inv2 = inv_s * inv_s;
        let inv5 = inv2 * inv2 * inv_s;
        let inv7 = inv5 * inv2;
        let w = 7.5 * uddd * inv7 - 4.5 * td * inv5;
        let grad_d = u2 * (22.5 * inv7) - d * (52.5 * uddd * inv7 * inv2) - self.t * (4.5 * inv5)
            + d * (22.5 * td * inv7);
        (w, -grad_d)
    }
}

/// Field generated by vector dipole moments `m_j` at the tree's positions:
/// potential `sum m_j . (p_j - x) / (4 pi |p_j - x|^3)` and its gradient.
///
/// Accepted nodes contribute their summed moment at the weighted centroid
/// plus the next two Taylor corrections (moment-offset tensors).
#[derive(Debug, Clone)]
pub struct DipoleField {
    tree: Arc<SourceTree>,
    moments: Vec<Vec3>,
    node_moment: Vec<Vec3>,
    node_tensor: Vec<Mat3>,
    node_octupole: Vec<Octupole>,
    node_weight: Vec<f64>,
    node_centroid: Vec<Vec3>,
    node_radius: Vec<f64>,
    beta: f64,
}

#[derive(Debug, Serialize)]
struct NodeDump {
    id: usize,
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
    centroid: [f64; 3],
    radius: f64,
    moment: [f64; 3],
    weight: f64,
}

impl DipoleField {
    /// `moments` are indexed by original source index.
    pub fn new(tree: Arc<SourceTree>, moments: &[Vec3], beta: f64) -> Self {
        assert_eq!(moments.len(), tree.len());
        let slot_moments = tree.to_slots(moments);
        let weights: Vec<f64> = slot_moments.iter().map(|m| m.norm()).collect();
        let (node_centroid, node_radius, node_weight) = tree.node_geometry(&weights);
        let node_moment = tree
            .nodes
            .iter()
            .map(|n| slot_moments[n.start..n.end].iter().sum())
            .collect();
        let node_tensor = tree
            .nodes
            .iter()
            .zip(&node_centroid)
            .map(|(n, c)| {
                let t: Mat3 = (n.start..n.end)
                    .map(|s| slot_moments[s] * (tree.positions[s] - c).transpose())
                    .sum();
                (t + t.transpose()) * 0.5
            })
            .collect();
        let node_octupole = tree
            .nodes
            .iter()
            .zip(&node_centroid)
            .map(|(n, c)| {
                Octupole::accumulate(
                    &slot_moments[n.start..n.end],
                    tree.positions[n.start..n.end].iter().map(|p| p - c),
                )
            })
            .collect();
        DipoleField {
            tree,
            moments: slot_moments,
            node_moment,
            node_tensor,
            node_octupole,
            node_weight,
            node_centroid,
            node_radius,
            beta,
        }
    }

    pub fn tree(&self) -> &Arc<SourceTree> {
        &self.tree
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    #[inline(always)]
    fn visit_terms(
        &self,
        q: &Vec3,
        exclude: Option<usize>,
        eps2: f64,
        mut add: impl FnMut((f64, Vec3)),
    ) {
        let t = &*self.tree;
        let exclude_slot = exclude.map(|i| t.slot_of[i]);
        t.traverse(
            q,
            self.beta,
            &self.node_centroid,
            &self.node_radius,
            exclude_slot,
            |term| match term {
                Term::Node(id) => {
                    let d = self.node_centroid[id] - q;
                    let s2 = d.norm_squared() + eps2;
                    add(dipole_term(&d, &self.node_moment[id], s2));
                    add(tensor_term(&d, &self.node_tensor[id], s2));
                    add(self.node_octupole[id].term(&d, s2));
                }
                Term::Source(s) => {
                    let d = t.positions[s] - q;
                    let s2 = d.norm_squared() + eps2;
                    if s2 >= SINGULAR_DIST2 {
                        add(dipole_term(&d, &self.moments[s], s2));
                    }
                }
            },
        );
    }

    /// Potential and gradient at `q`. `softening` replaces `|d|^2` by
    /// `|d|^2 + softening^2` in the kernel (0 gives the exact kernel).
    pub fn potential_and_gradient(
        &self,
        q: &Vec3,
        exclude: Option<usize>,
        softening: f64,
    ) -> (f64, Vec3) {
        let mut w = 0.0;
        let mut g = Vec3::zeros();
        self.visit_terms(q, exclude, softening * softening, |(dw, dg)| {
            w += dw;
            g += dg;
        });
        (w / FOUR_PI, g / FOUR_PI)
    }

    pub fn potential(&self, q: &Vec3, exclude: Option<usize>) -> f64 {
        let mut w = 0.0;
        self.visit_terms(q, exclude, 0.0, |(dw, _)| w += dw);
        w / FOUR_PI
    }

    pub fn gradient(&self, q: &Vec3, exclude: Option<usize>, softening: f64) -> Vec3 {
        let mut g = Vec3::zeros();
        self.visit_terms(q, exclude, softening * softening, |(_, dg)| g += dg);
        g / FOUR_PI
    }

    /// Aggregated moment, weight, centroid and radius of every node as JSON.
    pub fn debug_json(&self) -> serde_json::Value {
        let nodes: Vec<NodeDump> = self
            .tree
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| NodeDump {
                id,
                start: n.start,
                end: n.end,
                children: n.children,
                centroid: self.node_centroid[id].into(),
                radius: self.node_radius[id],
                moment: self.node_moment[id].into(),
                weight: self.node_weight[id],
            })
            .collect();
        serde_json::json!({ "beta": self.beta, "sources": self.tree.len(), "nodes": nodes })
    }

    /// Largest deviation between a node's aggregates and the sum of its
    /// children's.
    pub fn aggregate_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (id, n) in self.tree.nodes.iter().enumerate() {
            if let Some((l, r)) = n.children {
                let dm = (self.node_moment[id] - self.node_moment[l] - self.node_moment[r]).norm();
                let dw = (self.node_weight[id] - self.node_weight[l] - self.node_weight[r]).abs();
                worst = worst.max(dm).max(dw);
            }
        }
        worst
    }
}

/// Field of scalar charges `r_j`: `sum r_j (x - p_j) / (4 pi |x - p_j|^3)`.
/// Accepted nodes use total charge plus the charge-offset dipole.
#[derive(Debug, Clone)]
pub struct ChargeField {
    tree: Arc<SourceTree>,
    charges: Vec<f64>,
    node_charge: Vec<f64>,
    node_dipole: Vec<Vec3>,
    node_centroid: Vec<Vec3>,
    node_radius: Vec<f64>,
    beta: f64,
}

impl ChargeField {
    pub fn new(tree: Arc<SourceTree>, charges: &[f64], beta: f64) -> Self {
        assert_eq!(charges.len(), tree.len());
        let slot_charges = tree.to_slots(charges);
        let weights: Vec<f64> = slot_charges.iter().map(|r| r.abs()).collect();
        let (node_centroid, node_radius, _) = tree.node_geometry(&weights);
        let node_charge = tree
            .nodes
            .iter()
            .map(|n| slot_charges[n.start..n.end].iter().sum())
            .collect();
        let node_dipole = tree
            .nodes
            .iter()
            .zip(&node_centroid)
            .map(|(n, c)| {
                (n.start..n.end)
                    .map(|s| (tree.positions[s] - c) * slot_charges[s])
                    .sum()
            })
            .collect();
        ChargeField {
            tree,
            charges: slot_charges,
            node_charge,
            node_dipole,
            node_centroid,
            node_radius,
            beta,
        }
    }

    pub fn field(&self, x: &Vec3, exclude: Option<usize>) -> Vec3 {
        let t = &*self.tree;
        let exclude_slot = exclude.map(|i| t.slot_of[i]);
        let mut f = Vec3::zeros();
        t.traverse(
            x,
            self.beta,
            &self.node_centroid,
            &self.node_radius,
            exclude_slot,
            |tm| match tm {
                Term::Node(id) => {
                    let e = x - self.node_centroid[id];
                    let r2 = e.norm_squared();
                    let inv_r = 1.0 / r2.sqrt();
                    let inv3 = inv_r * inv_r * inv_r;
                    let dp = self.node_dipole[id];
                    f += e * (self.node_charge[id] * inv3) - dp * inv3
                        + e * (3.0 * e.dot(&dp) * inv3 * inv_r * inv_r);
                }
                Term::Source(s) => {
                    let r = self.charges[s];
                    let d = x - t.positions[s];
                    let r2 = d.norm_squared();
                    if r2 >= SINGULAR_DIST2 && r != 0.0 {
                        f += d * (r / (r2 * r2.sqrt()));
                    }
                }
            },
        );
        f / FOUR_PI
    }
}

/// Tree-accelerated evaluator of the winding field over an immutable snapshot
/// of the cloud's parameters.
#[derive(Debug, Clone)]
pub struct WindingEvaluator {
    field: DipoleField,
    generation: u64,
}

impl WindingEvaluator {
    pub fn new(cloud: &PointCloud, beta: f64) -> Self {
        let tree = Arc::new(SourceTree::build(cloud.positions()));
        Self::with_tree(tree, cloud, beta)
    }

    /// Reuses an existing partition of the same positions.
    pub fn with_tree(tree: Arc<SourceTree>, cloud: &PointCloud, beta: f64) -> Self {
        assert_eq!(tree.len(), cloud.len(), "tree built over a different cloud");
        let moments: Vec<Vec3> = (0..cloud.len())
            .map(|i| cloud.normals()[i] * (cloud.area_weights()[i] * cloud.confidences()[i]))
            .collect();
        WindingEvaluator {
            field: DipoleField::new(tree, &moments, beta),
            generation: cloud.generation(),
        }
    }

    pub fn tree(&self) -> &Arc<SourceTree> {
        self.field.tree()
    }

    pub fn field(&self) -> &DipoleField {
        &self.field
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn beta(&self) -> f64 {
        self.field.beta
    }

    pub fn eval(&self, q: &Vec3) -> f64 {
        self.field.potential(q, None)
    }

    pub fn grad(&self, q: &Vec3) -> Vec3 {
        self.field.gradient(q, None, 0.0)
    }

    /// [`Self::eval`] after checking the snapshot still matches `cloud`.
    pub fn eval_fast(&self, cloud: &PointCloud, q: &Vec3) -> Result<f64> {
        if cloud.generation() != self.generation || cloud.len() != self.field.tree.len() {
            return Err(DiwrError::StaleTree {
                tree: self.generation,
                cloud: cloud.generation(),
            });
        }
        Ok(self.eval(q))
    }

    /// Field at point `i` with its own term removed.
    pub fn eval_at_point(&self, i: usize) -> f64 {
        let p = self.field.tree.positions[self.field.tree.slot_of[i]];
        self.field.potential(&p, Some(i))
    }

    /// Self-excluded gradient at point `i`, optionally with a softened kernel.
    pub fn grad_at_point(&self, i: usize, softening: f64) -> Vec3 {
        let p = self.field.tree.positions[self.field.tree.slot_of[i]];
        self.field.gradient(&p, Some(i), softening)
    }

    pub fn eval_many(&self, queries: &[Vec3]) -> Vec<f64> {
        queries.par_iter().map(|q| self.eval(q)).collect()
    }

    pub fn grad_many(&self, queries: &[Vec3]) -> Vec<Vec3> {
        queries.par_iter().map(|q| self.grad(q)).collect()
    }

    /// Self-excluded field value at every point.
    pub fn eval_at_points(&self) -> Vec<f64> {
        (0..self.field.tree.len())
            .into_par_iter()
            .map(|i| self.eval_at_point(i))
            .collect()
    }

    pub fn debug_json(&self) -> serde_json::Value {
        self.field.debug_json()
    }
}
