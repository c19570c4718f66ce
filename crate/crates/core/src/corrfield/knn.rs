//! k-nearest-neighbour queries over a static point set, bucketed on a uniform grid.

pub(crate) struct KnnIndex {
    points: Vec<[f64; 3]>,
    lo: [f64; 3],
    cell: f64,
    cells: [usize; 3],
    /// Start offsets into `order` per cell (prefix sums, len = cell count + 1).
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl KnnIndex {
    /// `cell` is the bucket edge length; about one point per bucket works well.
    pub(crate) fn new(points: Vec<[f64; 3]>, cell: f64) -> KnnIndex {
        assert!(cell > 0.0);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if points.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let cells = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1);
        let mut index = KnnIndex {
            points,
            lo,
            cell,
            cells,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let ncell = cells[0] * cells[1] * cells[2];
        let keys: Vec<usize> = index.points.iter().map(|&p| index.cell_key(index.cell_of(p))).collect();
        let mut counts = vec![0usize; ncell + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; keys.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i as u32;
            fill[k] += 1;
        }
        index.starts = counts;
        index.order = order;
        index
    }

    fn cell_of(&self, p: [f64; 3]) -> [isize; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.lo[a]) / self.cell).floor() as isize)
    }

    fn cell_key(&self, c: [isize; 3]) -> usize {
        c[0] as usize + self.cells[0] * (c[1] as usize + self.cells[1] * c[2] as usize)
    }

    /// Up to `k` nearest points as `(squared distance, index)`, nearest first, ties by
    /// index. Results are appended to `out` after clearing it.
    pub(crate) fn nearest(&self, q: [f64; 3], k: usize, out: &mut Vec<(f64, usize)>) {
        out.clear();
        if k == 0 || self.points.is_empty() {
            return;
        }
        let k = k.min(self.points.len());
        let c = self.cell_of(q);
        let ncell = self.cells.map(|n| n as isize);
        // Rings beyond this radius contain no cells.
        let max_ring = (0..3)
            .map(|a| c[a].abs().max((c[a] - (ncell[a] - 1)).abs()))
            .max()
            .unwrap();
        // Distance from q to the faces of its own cell bounds what a ring can hold.
        let inner: f64 = (0..3)
            .map(|a| {
                let t = (q[a] - self.lo[a]) / self.cell - c[a] as f64;
                t.min(1.0 - t).max(0.0)
            })
            .fold(f64::INFINITY, f64::min)
            * self.cell;
        for r in 0..=max_ring {
            for z in c[2] - r..=c[2] + r {
                if z < 0 || z >= ncell[2] {
                    continue;
                }
                for y in c[1] - r..=c[1] + r {
                    if y < 0 || y >= ncell[1] {
                        continue;
                    }
                    let on_shell_zy = (z - c[2]).abs() == r || (y - c[1]).abs() == r;
                    let step = if on_shell_zy || r == 0 { 1 } else { 2 * r as usize };
                    for x in (c[0] - r..=c[0] + r).step_by(step) {
                        if x < 0 || x >= ncell[0] {
                            continue;
                        }
                        let key = self.cell_key([x, y, z]);
                        for &pi in &self.order[self.starts[key]..self.starts[key + 1]] {
                            let p = self.points[pi as usize];
                            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                            insert_sorted(out, k, (d2, pi as usize));
                        }
                    }
                }
            }
            if out.len() == k {
                let reach = r as f64 * self.cell + inner;
                if out[k - 1].0 < reach * reach {
                    break;
                }
            }
        }
    }
}

fn insert_sorted(out: &mut Vec<(f64, usize)>, k: usize, item: (f64, usize)) {
    let less = |a: &(f64, usize), b: &(f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    if out.len() == k {
        if !less(&item, &out[k - 1]) {
            return;
        }
        out.pop();
    }
    let mut pos = out.len();
    while pos > 0 && less(&item, &out[pos - 1]) {
        pos -= 1;
    }
    out.insert(pos, item);
}
