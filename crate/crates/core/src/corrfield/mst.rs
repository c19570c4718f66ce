use super::cost::{CandidateSet, CostTable};
use super::knn::KnnIndex;
use super::KeypointSet;
use crate::error::{Error, Result};

/// Neighbours per keypoint in the graph the spanning tree is taken from.
pub const GRAPH_NEIGHBORS: usize = 8;

/// A rooted spanning tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    /// Breadth-first order from the root; parents precede children.
    pub order: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

impl Tree {
    pub fn new(n: usize, edges: Vec<(usize, usize)>, root: usize) -> Tree {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        let mut parent = vec![None; n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        if n > 0 {
            seen[root] = true;
            order.push(root);
            let mut head = 0;
            while head < order.len() {
                let v = order[head];
                head += 1;
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        parent[w] = Some(v);
                        order.push(w);
                    }
                }
            }
        }
        Tree { root, parent, order, edges }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.0[hi] = lo;
        true
    }
}

/// Minimum spanning tree of the 8-nearest-neighbour graph (Kruskal, ties by length then
/// index pair). If that graph is disconnected, components are joined by their shortest
/// connecting edges.
pub fn minimum_spanning_tree(points: &[[f64; 3]]) -> Vec<(usize, usize)> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * GRAPH_NEIGHBORS);
    if n <= GRAPH_NEIGHBORS + 1 {
        for i in 0..n {
            for j in i + 1..n {
                edges.push((dist(points[i], points[j]), i, j));
            }
        }
    } else {
        let cell = typical_spacing(points);
        let index = KnnIndex::new(points.to_vec(), cell);
        let mut nn = Vec::new();
        for i in 0..n {
            index.nearest(points[i], GRAPH_NEIGHBORS + 1, &mut nn);
            for &(d2, j) in nn.iter() {
                if j != i {
                    edges.push((d2.sqrt(), i.min(j), i.max(j)));
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    edges.dedup();
    let mut dsu = Dsu((0..n).collect());
    let mut tree = Vec::with_capacity(n - 1);
    for &(_, a, b) in &edges {
        if dsu.union(a, b) {
            tree.push((a, b));
        }
    }
    // Join any remaining components (Boruvka rounds over all pairs).
    while tree.len() < n - 1 {
        let comp: Vec<usize> = (0..n).map(|i| dsu.find(i)).collect();
        let mut best: Vec<Option<(f64, usize, usize)>> = vec![None; n];
        for i in 0..n {
            for j in i + 1..n {
                if comp[i] == comp[j] {
                    continue;
                }
                let e = (dist(points[i], points[j]), i, j);
                for c in [comp[i], comp[j]] {
                    if best[c].is_none_or(|b| (e.0, e.1, e.2) < b) {
                        best[c] = Some(e);
                    }
                }
            }
        }
        for (_, a, b) in best.into_iter().flatten() {
            if dsu.union(a, b) {
                tree.push((a, b));
            }
        }
    }
    tree
}

/// Bucket size giving at most about one bucket per point.
fn typical_spacing(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let ext: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).collect();
    let longest = ext.iter().cloned().fold(0.0, f64::max);
    if !(longest > 0.0) {
        return 1.0;
    }
    // Flat axes count as one bucket thick.
    let floor = longest / (points.len() as f64).cbrt();
    let vol: f64 = ext.iter().map(|&e| e.max(floor)).product();
    (vol / points.len() as f64).cbrt()
}

/// Index of the point nearest the centroid (lowest index on ties).
fn central_point(points: &[[f64; 3]]) -> usize {
    let n = points.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if dist(*p, c) < dist(points[best], c) {
            best = i;
        }
    }
    best
}

/// Squared-distance transform on a 1D line: `out[p] = min_q f[q] + alpha (p - q)^2`.
fn dt_1d(f: &[f64], alpha: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + alpha * (q * q) as f64) - (f[p] + alpha * (p * p) as f64)) / (2.0 * alpha * (q - p) as f64);
            if k > 0 && s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        *o = f[q] + alpha * ((p as f64 - q as f64).powi(2));
    }
}

/// `min_{d'} b(d') + w |d - d'|^2` over the separable candidate lattice.
fn min_convolution(belief: &[f32], cands: &CandidateSet, w: f64, out: &mut Vec<f64>) {
    let c = cands.counts();
    let h = cands.step_mm();
    out.clear();
    out.extend(belief.iter().map(|&b| b as f64));
    let maxn = *c.iter().max().unwrap();
    let mut line = vec![0.0; maxn];
    let mut res = vec![0.0; maxn];
    let mut v = vec![0usize; maxn];
    let mut z = vec![0.0; maxn + 1];
    for axis in 0..3 {
        let n = c[axis];
        if n == 1 {
            continue;
        }
        let alpha = w * h[axis] * h[axis];
        let stride = match axis {
            0 => 1,
            1 => c[0],
            _ => c[0] * c[1],
        };
        let lines = out.len() / n;
        for li in 0..lines {
            let base = match axis {
                0 => li * c[0],
                1 => (li % c[0]) + (li / c[0]) * c[0] * c[1],
                _ => li,
            };
            for t in 0..n {
                line[t] = out[base + t * stride];
            }
            dt_1d(&line[..n], alpha, &mut res[..n], &mut v, &mut z);
            for t in 0..n {
                out[base + t * stride] = res[t];
            }
        }
    }
}

fn label_dist2(cands: &CandidateSet, a: usize, b: usize) -> f64 {
    let (da, db) = (cands.displacement_mm(a), cands.displacement_mm(b));
    (0..3).map(|i| (da[i] - db[i]).powi(2)).sum()
}

fn argmin(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, v) in row.enumerate() {
        if v < best.0 {
            best = (v, i);
        }
    }
    best.1
}

/// Exact minimiser labels of
/// `sum_k cost(k, d_k) + lambda sum_{(k,j) in T} |d_k - d_j|^2 / |x_k - x_j|`
/// over the keypoints' minimum spanning tree `T`, by two-pass min-sum dynamic
/// programming. The cost table is consumed and reused for the beliefs.
pub fn solve_labels(points_mm: &[[f64; 3]], mut costs: CostTable, lambda: f64) -> Result<(Vec<usize>, Tree)> {
    let n = points_mm.len();
    if costs.rows != n {
        return Err(Error::Config(format!("cost table has {} rows for {n} keypoints", costs.rows)));
    }
    if n == 0 {
        return Ok((Vec::new(), Tree::new(0, Vec::new(), 0)));
    }
    let root = central_point(points_mm);
    let tree = Tree::new(n, minimum_spanning_tree(points_mm), root);
    let cands = costs.candidates.clone();
    if lambda == 0.0 {
        let labels = (0..n).map(|k| argmin(costs.row(k).iter().map(|&v| v as f64))).collect();
        return Ok((labels, tree));
    }
    let weight = |c: usize, p: usize| lambda / dist(points_mm[c], points_mm[p]);
    let mut msg = Vec::new();
    for &c in tree.order.iter().rev() {
        if let Some(p) = tree.parent[c] {
            min_convolution(costs.row(c), &cands, weight(c, p), &mut msg);
            for (b, &m) in costs.row_mut(p).iter_mut().zip(&msg) {
                *b = (*b as f64 + m) as f32;
            }
        }
    }
    let mut labels = vec![0usize; n];
    for &c in &tree.order {
        labels[c] = match tree.parent[c] {
            None => argmin(costs.row(c).iter().map(|&v| v as f64)),
            Some(p) => {
                let w = weight(c, p);
                let lp = labels[p];
                argmin(
                    costs
                        .row(c)
                        .iter()
                        .enumerate()
                        .map(|(l, &b)| b as f64 + w * label_dist2(&cands, l, lp)),
                )
            }
        };
    }
    Ok((labels, tree))
}

/// Sets each keypoint's displacement to its label in the regularised optimum.
pub fn mst_regularize(kps: &KeypointSet, costs: CostTable, lambda: f64) -> Result<KeypointSet> {
    let cands = costs.candidates.clone();
    let points: Vec<[f64; 3]> = (0..kps.len()).map(|k| kps.position_mm(k)).collect();
    let (labels, _) = solve_labels(&points, costs, lambda)?;
    Ok(KeypointSet {
        displacements: labels.iter().map(|&l| cands.displacement_mm(l)).collect(),
        consistency_error: Vec::new(),
        ..kps.clone()
    })
}

/// Objective value of a labelling on a given tree.
pub fn mst_objective(
    points_mm: &[[f64; 3]],
    edges: &[(usize, usize)],
    costs: &CostTable,
    labels: &[usize],
    lambda: f64,
) -> f64 {
    let unary: f64 = labels.iter().enumerate().map(|(k, &l)| costs.row(k)[l] as f64).sum();
    let pair: f64 = edges
        .iter()
        .map(|&(a, b)| label_dist2(&costs.candidates, labels[a], labels[b]) / dist(points_mm[a], points_mm[b]))
        .sum();
    unary + lambda * pair
}
