//! Static kd-tree over 3-D points for k-nearest-neighbour and fixed-radius
//! queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::Vec3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
struct KdNode {
    lo: Vec3,
    hi: Vec3,
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    index: Vec<usize>,
    nodes: Vec<KdNode>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

fn box_dist2(q: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    let mut d2 = 0.0;
    for a in 0..3 {
        let v = if q[a] < lo[a] {
            lo[a] - q[a]
        } else if q[a] > hi[a] {
            q[a] - hi[a]
        } else {
            0.0
        };
        d2 += v * v;
    }
    d2
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            index: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.index[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let id = self.nodes.len();
        self.nodes.push(KdNode {
            lo,
            hi,
            start,
            end,
            children: None,
        });
        if end - start > LEAF_SIZE {
            let ext = hi - lo;
            let axis = ext.imax();
            let mid = (start + end) / 2;
            let pts = &self.points;
            self.index[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
            });
            let left = self.build_node(start, mid);
            let right = self.build_node(mid, end);
            self.nodes[id].children = Some((left, right));
        }
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// The `k` nearest points to `q`, closest first. `skip` excludes one
    /// index (typically the query point itself).
    pub fn knn(&self, q: &Vec3, k: usize, skip: Option<usize>) -> Vec<Neighbor> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if heap.len() == k {
                let worst = heap.peek().map(|n| n.dist2).unwrap_or(f64::INFINITY);
                if box_dist2(q, &node.lo, &node.hi) > worst {
                    continue;
                }
            }
            match node.children {
                None => {
                    for &i in &self.index[node.start..node.end] {
                        if Some(i) == skip {
                            continue;
                        }
                        let cand = Neighbor {
                            index: i,
                            dist2: (self.points[i] - q).norm_squared(),
                        };
                        if heap.len() < k {
                            heap.push(cand);
                        } else if cand < *heap.peek().unwrap() {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
                Some((l, r)) => {
                    let dl = box_dist2(q, &self.nodes[l].lo, &self.nodes[l].hi);
                    let dr = box_dist2(q, &self.nodes[r].lo, &self.nodes[r].hi);
                    // visit the closer child first
                    if dl < dr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
            }
        }
        let mut out = heap.into_vec();
        out.sort();
        out
    }

    pub fn nearest(&self, q: &Vec3) -> Option<Neighbor> {
        self.knn(q, 1, None).into_iter().next()
    }

    /// All points within distance `r` of `q` (inclusive), unordered.
    pub fn within(&self, q: &Vec3, r: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        self.visit_within(q, r, |n| out.push(n));
        out
    }

    pub fn count_within(&self, q: &Vec3, r: f64) -> usize {
        let mut count = 0;
        self.visit_within(q, r, |_| count += 1);
        count
    }

    fn visit_within(&self, q: &Vec3, r: f64, mut f: impl FnMut(Neighbor)) {
        if self.nodes.is_empty() {
            return;
        }
        let r2 = r * r;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if box_dist2(q, &node.lo, &node.hi) > r2 {
                continue;
            }
            match node.children {
                None => {
                    for &i in &self.index[node.start..node.end] {
                        let d2 = (self.points[i] - q).norm_squared();
                        if d2 <= r2 {
                            f(Neighbor {
                                index: i,
                                dist2: d2,
                            });
                        }
                    }
                }
                Some((l, r)) => {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
    }
}
