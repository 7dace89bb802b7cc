//! k-nearest-neighbor search over integer BEV coordinates.
//!
//! Distances are exact integer squared Euclidean distances; ties break by
//! lexicographic (ix, iy). Two interchangeable backends: exhaustive scan for
//! small site counts and a 2-d tree above [`EXHAUSTIVE_LIMIT`]. Both produce
//! identical results, including order.

/// Below this active-site count the exhaustive scan is used.
pub const EXHAUSTIVE_LIMIT: usize = 20_000;

/// Strict total order for candidates: (d², ix, iy). Coordinates are unique
/// within a sparse tensor, so no two candidates compare equal.
type Key = (i64, i64, i64);

#[inline]
fn key_for(site: [i64; 2], query: [i64; 2]) -> Key {
    let dx = site[0] - query[0];
    let dy = site[1] - query[1];
    (dx * dx + dy * dy, site[0], site[1])
}

/// Bounded best-k set kept sorted ascending by key.
struct BestK {
    k: usize,
    items: Vec<(Key, usize)>,
}

impl BestK {
    fn new(k: usize) -> Self {
        BestK {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn worst_d2(&self) -> Option<i64> {
        if self.items.len() == self.k {
            Some(self.items[self.k - 1].0 .0)
        } else {
            None
        }
    }

    #[inline]
    fn offer(&mut self, key: Key, idx: usize) {
        if self.items.len() == self.k {
            if key >= self.items[self.k - 1].0 {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|(k, _)| *k < key);
        self.items.insert(pos, (key, idx));
    }
}

/// Exhaustive k-nearest search. Returns row indices into `sites`,
/// nearest-first.
pub fn knn_brute(sites: &[[i64; 2]], query: [i64; 2], k: usize) -> Vec<usize> {
    let k = k.min(sites.len());
    let mut best = BestK::new(k);
    for (idx, &s) in sites.iter().enumerate() {
        best.offer(key_for(s, query), idx);
    }
    best.items.into_iter().map(|(_, i)| i).collect()
}

/// 2-d tree over a fixed site list.
pub struct KdTree2 {
    sites: Vec<[i64; 2]>,
    /// Site indices arranged so each subtree occupies a contiguous range with
    /// its split point in the middle.
    order: Vec<usize>,
}

impl KdTree2 {
    pub fn build(sites: &[[i64; 2]]) -> Self {
        let mut order: Vec<usize> = (0..sites.len()).collect();
        build_rec(sites, &mut order, 0);
        KdTree2 {
            sites: sites.to_vec(),
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn knn(&self, query: [i64; 2], k: usize) -> Vec<usize> {
        let k = k.min(self.sites.len());
        if k == 0 {
            return Vec::new();
        }
        let mut best = BestK::new(k);
        self.search(&mut best, query, 0, self.order.len(), 0);
        best.items.into_iter().map(|(_, i)| i).collect()
    }

    fn search(&self, best: &mut BestK, query: [i64; 2], lo: usize, hi: usize, axis: usize) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let site = self.sites[idx];
        best.offer(key_for(site, query), idx);

        let diff = query[axis] - site[axis];
        let (near, far) = if diff < 0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        let next = axis ^ 1;
        self.search(best, query, near.0, near.1, next);
        // A far-side site at exactly worst distance can still win on the
        // lexicographic tie rule, so prune only on strict excess.
        let must_visit = match best.worst_d2() {
            None => true,
            Some(w) => diff * diff <= w,
        };
        if must_visit {
            self.search(best, query, far.0, far.1, next);
        }
    }
}

fn build_rec(sites: &[[i64; 2]], order: &mut [usize], axis: usize) {
    if order.len() <= 1 {
        return;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by_key(mid, |&i| (sites[i][axis], sites[i][axis ^ 1]));
    let (left, rest) = order.split_at_mut(mid);
    let right = &mut rest[1..];
    build_rec(sites, left, axis ^ 1);
    build_rec(sites, right, axis ^ 1);
}

/// Backend-dispatching k-nearest search.
pub fn knn_indices(sites: &[[i64; 2]], query: [i64; 2], k: usize) -> Vec<usize> {
    if sites.len() < EXHAUSTIVE_LIMIT {
        knn_brute(sites, query, k)
    } else {
        KdTree2::build(sites).knn(query, k)
    }
}
