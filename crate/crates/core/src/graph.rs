//! Augmented hand graph and its three-subset adjacency stack.
//!
//! Joints follow the common 21-landmark hand layout: wrist = 0, then four
//! joints per finger from thumb to pinky, each chain ordered base to tip.
//! On top of the 20 natural bones the graph carries two kinds of extra
//! links: fingertip to the base of the next finger (thumb side to pinky
//! side; the pinky has none) and fingertip to the second joint of its own
//! finger.

use crate::tensor::Tensor;

pub const VERTEX_COUNT: usize = 21;
pub const WRIST: usize = 0;

/// Adjacency subsets, in stack order.
pub const SUBSET_SELF: usize = 0;
pub const SUBSET_INWARD: usize = 1;
pub const SUBSET_OUTWARD: usize = 2;
pub const SUBSET_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Finger {
    Thumb,
    Index,
    Middle,
    Ring,
    Pinky,
}

impl Finger {
    pub const ALL: [Finger; 5] = [
        Finger::Thumb,
        Finger::Index,
        Finger::Middle,
        Finger::Ring,
        Finger::Pinky,
    ];

    pub fn base(self) -> usize {
        1 + 4 * self as usize
    }

    pub fn proximal(self) -> usize {
        self.base() + 1
    }

    pub fn middle(self) -> usize {
        self.base() + 2
    }

    pub fn tip(self) -> usize {
        self.base() + 3
    }

    /// Chain from base to tip.
    pub fn joints(self) -> [usize; 4] {
        [self.base(), self.proximal(), self.middle(), self.tip()]
    }

    /// Next finger towards the pinky side.
    pub fn right_neighbor(self) -> Option<Finger> {
        Finger::ALL.get(self as usize + 1).copied()
    }
}

/// Directed pair `(from, to)`; natural edges point child to parent.
pub type Edge = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct HandGraphTopology {
    pub vertex_count: usize,
    pub natural_edges: Vec<Edge>,
    /// Fingertip to the base of the neighboring finger.
    pub supp_neighbor_edges: Vec<Edge>,
    /// Fingertip to the second joint of the same finger.
    pub supp_bend_edges: Vec<Edge>,
    /// Parent on the natural tree; the wrist is its own parent.
    pub parent_of: Vec<usize>,
}

impl HandGraphTopology {
    pub fn build() -> Self {
        let mut parent_of = vec![WRIST; VERTEX_COUNT];
        let mut natural_edges = Vec::with_capacity(VERTEX_COUNT - 1);
        for finger in Finger::ALL {
            let mut parent = WRIST;
            for joint in finger.joints() {
                parent_of[joint] = parent;
                natural_edges.push((joint, parent));
                parent = joint;
            }
        }
        natural_edges.sort();
        let supp_neighbor_edges = Finger::ALL
            .iter()
            .filter_map(|f| Some((f.tip(), f.right_neighbor()?.base())))
            .collect();
        let supp_bend_edges = Finger::ALL.iter().map(|f| (f.tip(), f.proximal())).collect();
        HandGraphTopology {
            vertex_count: VERTEX_COUNT,
            natural_edges,
            supp_neighbor_edges,
            supp_bend_edges,
            parent_of,
        }
    }

    /// Number of natural edges between `joint` and the wrist.
    pub fn depth(&self, mut joint: usize) -> usize {
        let mut depth = 0;
        while joint != WRIST {
            joint = self.parent_of[joint];
            depth += 1;
        }
        depth
    }

    pub fn supplementary_edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.supp_neighbor_edges.iter().chain(&self.supp_bend_edges).copied()
    }

    /// `(joint, parent)` for every joint in index order, `(0, 0)` for the wrist.
    pub fn bone_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.vertex_count).map(|v| (v, self.parent_of[v])).collect()
    }

    /// Unnormalized `[V, V, 3]` stack: self links, edges towards the wrist,
    /// and their transpose.
    pub fn raw_adjacency(&self, include_supplementary: bool) -> Tensor<f64> {
        let v = self.vertex_count;
        let mut stack = Tensor::zeros(&[v, v, SUBSET_COUNT]);
        for i in 0..v {
            stack.set(&[i, i, SUBSET_SELF], 1.0);
        }
        let mut inward: Vec<Edge> = self.natural_edges.clone();
        if include_supplementary {
            inward.extend(self.supplementary_edges().map(|(a, b)| {
                if self.depth(a) >= self.depth(b) {
                    (a, b)
                } else {
                    (b, a)
                }
            }));
        }
        for (from, to) in inward {
            stack.set(&[from, to, SUBSET_INWARD], 1.0);
            stack.set(&[to, from, SUBSET_OUTWARD], 1.0);
        }
        stack
    }
}

/// Row-normalized `[V, V, 3]` adjacency stack.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyStack {
    stack: Tensor<f64>,
}

impl AdjacencyStack {
    pub fn build(topology: &HandGraphTopology, include_supplementary: bool) -> Self {
        let mut stack = topology.raw_adjacency(include_supplementary);
        let v = topology.vertex_count;
        for k in 0..SUBSET_COUNT {
            for i in 0..v {
                let total: f64 = (0..v).map(|j| stack.get(&[i, j, k])).sum();
                if total > 0.0 {
                    for j in 0..v {
                        let a = stack.get(&[i, j, k]);
                        stack.set(&[i, j, k], a / total);
                    }
                }
            }
        }
        AdjacencyStack { stack }
    }

    pub fn from_tensor(stack: Tensor<f64>) -> Option<Self> {
        let s = stack.shape();
        (s.len() == 3 && s[0] == s[1] && s[2] == SUBSET_COUNT).then_some(AdjacencyStack { stack })
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.stack
    }

    pub fn vertex_count(&self) -> usize {
        self.stack.shape()[0]
    }

    /// Subset `k` as a `[V, V]` matrix.
    pub fn slice(&self, k: usize) -> Tensor<f64> {
        let v = self.vertex_count();
        Tensor::from_fn(&[v, v], |idx| self.stack.get(&[idx / v, idx % v, k]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    #[test]
    fn natural_edges_form_spanning_tree() {
        let topo = HandGraphTopology::build();
        assert_eq!(topo.vertex_count, 21);
        assert_eq!(topo.natural_edges.len(), 20);
        let mut uf: Vec<usize> = (0..21).collect();
        for &(a, b) in &topo.natural_edges {
            let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
            assert_ne!(ra, rb, "cycle through ({a}, {b})");
            uf[ra] = rb;
        }
        let root = find(&mut uf, 0);
        assert!((0..21).all(|v| find(&mut uf, v) == root));
    }

    #[test]
    fn supplementary_edges_match_finger_layout() {
        let topo = HandGraphTopology::build();
        assert_eq!(topo.supp_neighbor_edges, vec![(4, 5), (8, 9), (12, 13), (16, 17)]);
        assert_eq!(topo.supp_bend_edges, vec![(4, 2), (8, 6), (12, 10), (16, 14), (20, 18)]);
        assert!(!topo.supp_neighbor_edges.iter().any(|&(a, _)| a == 20));
        let mut all: Vec<(usize, usize)> = topo
            .natural_edges
            .iter()
            .chain(topo.supp_neighbor_edges.iter())
            .chain(topo.supp_bend_edges.iter())
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 29);
    }

    #[test]
    fn tree_chains_start_at_wrist() {
        let topo = HandGraphTopology::build();
        for f in Finger::ALL {
            assert_eq!(topo.parent_of[f.base()], WRIST);
            assert_eq!(topo.depth(f.tip()), 4);
        }
        assert_eq!(topo.bone_pairs()[0], (0, 0));
        assert_eq!(topo.bone_pairs()[8], (8, 7));
        assert_eq!(topo.bone_pairs().len(), 21);
    }

    #[test]
    fn inward_entry_counts() {
        let topo = HandGraphTopology::build();
        let count = |supp| {
            let raw = topo.raw_adjacency(supp);
            (0..21 * 21)
                .filter(|&i| raw.get(&[i / 21, i % 21, SUBSET_INWARD]) != 0.0)
                .count()
        };
        assert_eq!(count(false), 20);
        assert_eq!(count(true), 29);
    }

    #[test]
    fn inward_is_transpose_of_outward() {
        let topo = HandGraphTopology::build();
        for supp in [false, true] {
            let raw = topo.raw_adjacency(supp);
            for i in 0..21 {
                for j in 0..21 {
                    assert_eq!(raw.get(&[i, j, SUBSET_INWARD]), raw.get(&[j, i, SUBSET_OUTWARD]));
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert_eq!(raw.get(&[i, j, SUBSET_SELF]), expected);
                }
            }
        }
    }

    #[test]
    fn normalized_rows_sum_to_one_or_zero() {
        let adj = AdjacencyStack::build(&HandGraphTopology::build(), true);
        assert_eq!(adj.tensor().shape(), &[21, 21, 3]);
        assert_eq!(adj.slice(SUBSET_SELF), Tensor::eye(21));
        for k in 0..3 {
            let s = adj.slice(k);
            for row in s.data().chunks(21) {
                assert!(row.iter().all(|&a| a >= 0.0));
                let total: f64 = row.iter().sum();
                assert!(total.abs() < 1e-12 || (total - 1.0).abs() < 1e-12);
            }
        }
        // thumb tip drains into its middle joint and two supplementary targets
        let inward = adj.slice(SUBSET_INWARD);
        for j in [3, 5, 2] {
            assert!((inward.get(&[4, j]) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(adj, AdjacencyStack::build(&HandGraphTopology::build(), true));
    }
}
