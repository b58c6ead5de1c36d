//! Per-action nearest-neighbor index.
//!
//! Keys live in an implicit kd-tree (the median of each range is the node)
//! plus a linear buffer of recent insertions. Evicted entries stay in the
//! tree until the next rebuild and are filtered out at query time.

/// Below this many live points everything stays in the linear buffer.
pub const LINEAR_SCAN_BELOW: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub seq: u64,
    pub dist_sq: f64,
}

fn before(a: &Candidate, b: &Candidate) -> bool {
    a.dist_sq < b.dist_sq || (a.dist_sq == b.dist_sq && a.seq < b.seq)
}

/// Bounded best-k list in ascending (distance, seq) order.
struct Best {
    k: usize,
    items: Vec<Candidate>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].dist_sq
        }
    }

    fn offer(&mut self, c: Candidate) {
        if self.items.len() == self.k && !before(&c, &self.items[self.k - 1]) {
            return;
        }
        let pos = self.items.iter().position(|x| before(&c, x)).unwrap_or(self.items.len());
        self.items.insert(pos, c);
        self.items.truncate(self.k);
    }
}

/// Squared distance, or `None` once the partial sum exceeds `bound`.
fn dist_sq_within(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    let mut s = 0.0;
    for (ca, cb) in a.chunks(8).zip(b.chunks(8)) {
        for (x, y) in ca.iter().zip(cb) {
            let d = x - y;
            s += d * d;
        }
        if s > bound {
            return None;
        }
    }
    Some(s)
}

pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

#[derive(Debug, Clone, Default)]
struct Tree {
    dim: usize,
    points: Vec<f64>,
    seqs: Vec<u64>,
    split: Vec<u32>,
}

impl Tree {
    fn build(dim: usize, mut items: Vec<(u64, Vec<f64>)>) -> Self {
        let n = items.len();
        let mut split = vec![0u32; n];
        Self::arrange(&mut items, &mut split, 0, dim);
        let mut points = Vec::with_capacity(n * dim);
        let mut seqs = Vec::with_capacity(n);
        for (seq, key) in items {
            seqs.push(seq);
            points.extend_from_slice(&key);
        }
        Self {
            dim,
            points,
            seqs,
            split,
        }
    }

    /// Orders `items` so every range's middle element is its node, split
    /// on the coordinate of widest spread.
    fn arrange(items: &mut [(u64, Vec<f64>)], split: &mut [u32], offset: usize, dim: usize) {
        let n = items.len();
        if n <= 1 {
            return;
        }
        let mut best_axis = 0;
        let mut best_spread = -1.0;
        for axis in 0..dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (_, k) in items.iter() {
                lo = lo.min(k[axis]);
                hi = hi.max(k[axis]);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_axis = axis;
            }
        }
        let mid = n / 2;
        items.select_nth_unstable_by(mid, |a, b| a.1[best_axis].total_cmp(&b.1[best_axis]).then(a.0.cmp(&b.0)));
        split[offset + mid] = best_axis as u32;
        let (left, right) = items.split_at_mut(mid);
        Self::arrange(left, split, offset, dim);
        Self::arrange(&mut right[1..], split, offset + mid + 1, dim);
    }

    fn len(&self) -> usize {
        self.seqs.len()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn search(&self, lo: usize, hi: usize, q: &[f64], live_from: u64, best: &mut Best) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.point(mid);
        if self.seqs[mid] >= live_from {
            if let Some(d) = dist_sq_within(p, q, best.worst()) {
                best.offer(Candidate {
                    seq: self.seqs[mid],
                    dist_sq: d,
                });
            }
        }
        let axis = self.split[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, live_from, best);
        // Strict comparison keeps equal-distance ties reachable.
        if !(diff * diff > best.worst()) {
            self.search(far.0, far.1, q, live_from, best);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ActionIndex {
    dim: usize,
    tree: Tree,
    pending: Vec<(u64, Vec<f64>)>,
    dead_in_tree: usize,
}

impl ActionIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            tree: Tree {
                dim,
                ..Tree::default()
            },
            ..Self::default()
        }
    }

    pub fn live(&self) -> usize {
        self.tree.len() - self.dead_in_tree + self.pending.len()
    }

    pub fn insert(&mut self, seq: u64, key: &[f64], live_from: u64) {
        self.pending.push((seq, key.to_vec()));
        let live = self.live();
        if live >= LINEAR_SCAN_BELOW && self.pending.len() * 4 >= live.max(4 * LINEAR_SCAN_BELOW) {
            self.rebuild(live_from);
        }
    }

    /// Notifies the index that `seq` (one of its own) has been evicted.
    pub fn evict(&mut self, seq: u64, live_from: u64) {
        if let Some(pos) = self.pending.iter().position(|(s, _)| *s == seq) {
            self.pending.remove(pos);
        } else {
            self.dead_in_tree += 1;
            if self.dead_in_tree * 2 > self.tree.len() {
                self.rebuild(live_from);
            }
        }
    }

    fn rebuild(&mut self, live_from: u64) {
        let mut items: Vec<(u64, Vec<f64>)> = (0..self.tree.len())
            .filter(|&i| self.tree.seqs[i] >= live_from)
            .map(|i| (self.tree.seqs[i], self.tree.point(i).to_vec()))
            .collect();
        items.append(&mut self.pending);
        items.retain(|(s, _)| *s >= live_from);
        if items.len() < LINEAR_SCAN_BELOW {
            items.sort_by_key(|(s, _)| *s);
            self.tree = Tree {
                dim: self.dim,
                ..Tree::default()
            };
            self.pending = items;
        } else {
            self.tree = Tree::build(self.dim, items);
        }
        self.dead_in_tree = 0;
    }

    /// The `k` nearest live points, ascending by (distance, seq).
    pub fn nearest(&self, q: &[f64], k: usize, live_from: u64) -> Vec<Candidate> {
        let mut best = Best::new(k);
        if k == 0 {
            return Vec::new();
        }
        self.tree.search(0, self.tree.len(), q, live_from, &mut best);
        for (seq, key) in &self.pending {
            if *seq >= live_from {
                if let Some(d) = dist_sq_within(key, q, best.worst()) {
                    best.offer(Candidate { seq: *seq, dist_sq: d });
                }
            }
        }
        best.items
    }
}
