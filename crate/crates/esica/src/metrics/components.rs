//! 3D connected-component labeling via union-find.

/// Voxel adjacency for component extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face, edge, and corner neighbors.
    TwentySix,
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // Anchor to the smaller index so labels stay ordered by first voxel.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Label the foreground of a boolean volume.
///
/// Returns a label volume (0 = background, components numbered 1..=count)
/// and the component count. Labels are assigned in order of each component's
/// smallest linear index, so the result is deterministic.
pub fn connected_components_3d(
    mask: &[bool],
    extents: (usize, usize, usize),
    connectivity: Connectivity,
) -> (Vec<u32>, usize) {
    let (h, w, d) = extents;
    assert_eq!(mask.len(), h * w * d);
    let idx = |hh: usize, ww: usize, dd: usize| (hh * w + ww) * d + dd;

    let mut uf = UnionFind::new(mask.len());
    // Scan with backward-pointing neighbor offsets only.
    let offsets: Vec<(isize, isize, isize)> = match connectivity {
        Connectivity::Six => vec![(-1, 0, 0), (0, -1, 0), (0, 0, -1)],
        Connectivity::TwentySix => {
            let mut v = Vec::new();
            for dh in -1isize..=1 {
                for dw in -1isize..=1 {
                    for dd in -1isize..=1 {
                        if (dh, dw, dd) < (0, 0, 0) {
                            v.push((dh, dw, dd));
                        }
                    }
                }
            }
            v
        }
    };

    for hh in 0..h {
        for ww in 0..w {
            for dd in 0..d {
                if !mask[idx(hh, ww, dd)] {
                    continue;
                }
                for (oh, ow, od) in &offsets {
                    let nh = hh as isize + oh;
                    let nw = ww as isize + ow;
                    let nd = dd as isize + od;
                    if nh < 0 || nw < 0 || nd < 0 || nw as usize >= w || nd as usize >= d {
                        continue;
                    }
                    let n = idx(nh as usize, nw as usize, nd as usize);
                    if mask[n] {
                        uf.union(idx(hh, ww, dd) as u32, n as u32);
                    }
                }
            }
        }
    }

    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut remap = std::collections::HashMap::new();
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        let root = uf.find(i as u32);
        let label = *remap.entry(root).or_insert_with(|| {
            next += 1;
            next
        });
        labels[i] = label;
    }
    (labels, next as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn volume(extents: (usize, usize, usize), on: &[(usize, usize, usize)]) -> Vec<bool> {
        let (_, w, d) = extents;
        let mut mask = vec![false; extents.0 * w * d];
        for &(hh, ww, dd) in on {
            mask[(hh * w + ww) * d + dd] = true;
        }
        mask
    }

    #[test]
    fn empty_mask_has_zero_components() {
        let (labels, count) = connected_components_3d(&[false; 27], (3, 3, 3), Connectivity::Six);
        assert_eq!(count, 0);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn face_sharing_voxels_are_one_component_either_way() {
        let mask = volume((3, 3, 3), &[(0, 0, 0), (0, 0, 1)]);
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let (_, count) = connected_components_3d(&mask, (3, 3, 3), conn);
            assert_eq!(count, 1);
        }
    }

    #[test]
    fn corner_sharing_voxels_split_at_six_connectivity() {
        // (0,0,0) and (1,1,1) touch only at a corner.
        let mask = volume((3, 3, 3), &[(0, 0, 0), (1, 1, 1)]);
        let (_, six) = connected_components_3d(&mask, (3, 3, 3), Connectivity::Six);
        let (_, full) = connected_components_3d(&mask, (3, 3, 3), Connectivity::TwentySix);
        assert_eq!(six, 2);
        assert_eq!(full, 1);
    }

    #[test]
    fn labels_ordered_by_smallest_linear_index() {
        let mask = volume((1, 1, 7), &[(0, 0, 5), (0, 0, 0), (0, 0, 2), (0, 0, 3)]);
        let (labels, count) = connected_components_3d(&mask, (1, 1, 7), Connectivity::Six);
        assert_eq!(count, 3);
        assert_eq!(labels, vec![1, 0, 2, 2, 0, 3, 0]);
    }

    /// Recursive flood fill, deliberately different from the union-find path.
    fn flood_fill_partition(
        mask: &[bool],
        extents: (usize, usize, usize),
        conn: Connectivity,
    ) -> BTreeSet<BTreeSet<usize>> {
        let (h, w, d) = extents;
        let idx = |hh: usize, ww: usize, dd: usize| (hh * w + ww) * d + dd;
        let mut seen = vec![false; mask.len()];
        let mut parts = BTreeSet::new();
        fn grow(
            mask: &[bool],
            seen: &mut [bool],
            set: &mut BTreeSet<usize>,
            at: (usize, usize, usize),
            extents: (usize, usize, usize),
            conn: Connectivity,
        ) {
            let (h, w, d) = extents;
            let i = (at.0 * w + at.1) * d + at.2;
            if seen[i] || !mask[i] {
                return;
            }
            seen[i] = true;
            set.insert(i);
            for dh in -1isize..=1 {
                for dw in -1isize..=1 {
                    for dd in -1isize..=1 {
                        if (dh, dw, dd) == (0, 0, 0) {
                            continue;
                        }
                        if matches!(conn, Connectivity::Six)
                            && dh.abs() + dw.abs() + dd.abs() != 1
                        {
                            continue;
                        }
                        let nh = at.0 as isize + dh;
                        let nw = at.1 as isize + dw;
                        let nd = at.2 as isize + dd;
                        if nh < 0 || nw < 0 || nd < 0 {
                            continue;
                        }
                        let (nh, nw, nd) = (nh as usize, nw as usize, nd as usize);
                        if nh >= h || nw >= w || nd >= d {
                            continue;
                        }
                        grow(mask, seen, set, (nh, nw, nd), extents, conn);
                    }
                }
            }
        }
        for hh in 0..h {
            for ww in 0..w {
                for dd in 0..d {
                    if mask[idx(hh, ww, dd)] && !seen[idx(hh, ww, dd)] {
                        let mut set = BTreeSet::new();
                        grow(mask, &mut seen, &mut set, (hh, ww, dd), extents, conn);
                        parts.insert(set);
                    }
                }
            }
        }
        parts
    }

    #[test]
    fn partition_matches_flood_fill_oracle_on_random_volumes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..30 {
            let extents = (
                rng.gen_range(2..10usize),
                rng.gen_range(2..10usize),
                rng.gen_range(2..10usize),
            );
            let n = extents.0 * extents.1 * extents.2;
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.35)).collect();
            for conn in [Connectivity::Six, Connectivity::TwentySix] {
                let (labels, count) = connected_components_3d(&mask, extents, conn);
                let mut by_label: std::collections::HashMap<u32, BTreeSet<usize>> =
                    std::collections::HashMap::new();
                for (i, &l) in labels.iter().enumerate() {
                    if l > 0 {
                        by_label.entry(l).or_default().insert(i);
                    }
                }
                assert_eq!(by_label.len(), count, "trial {trial}");
                let ours: BTreeSet<BTreeSet<usize>> = by_label.into_values().collect();
                let oracle = flood_fill_partition(&mask, extents, conn);
                assert_eq!(ours, oracle, "trial {trial} conn {conn:?}");
            }
        }
    }
}
