//! k-nearest communication graph over view centers.

use std::collections::{BTreeMap, BTreeSet};

use super::{Result, ViewSpec, WorldError};

/// Directed listen sets: `listen[i]` is the set of senders node `i`
/// receives from (its k nearest views by Manhattan distance). k-nearest
/// is directional, so the graph is not assumed symmetric anywhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    listen: BTreeMap<usize, BTreeSet<usize>>,
}

impl Topology {
    /// Senders node `i` listens to (the paper-side `K^i`).
    pub fn listen_set(&self, i: usize) -> &BTreeSet<usize> {
        &self.listen[&i]
    }

    /// Nodes that receive `i`'s broadcast: `{k : i ∈ K^k}`.
    pub fn receivers_of(&self, i: usize) -> BTreeSet<usize> {
        self.listen
            .iter()
            .filter_map(|(&k, set)| set.contains(&i).then_some(k))
            .collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.listen.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.listen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.listen.is_empty()
    }

    /// True when an edge exists in either direction.
    pub fn union_adjacent(&self, a: usize, b: usize) -> bool {
        self.listen[&a].contains(&b) || self.listen[&b].contains(&a)
    }

    /// Builds a topology directly from listen sets (tests, checkpoints).
    pub fn from_listen_sets(listen: BTreeMap<usize, BTreeSet<usize>>) -> Self {
        Topology { listen }
    }
}

fn manhattan(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

/// For each view, links the k views with the smallest Manhattan distance
/// between window centers; ties break toward the lower id and a view is
/// never its own neighbor.
pub fn build_topology(views: &[ViewSpec], k: usize) -> Result<Topology> {
    let n = views.len();
    if k >= n {
        return Err(WorldError::KTooLarge { k, n });
    }
    let mut listen = BTreeMap::new();
    for view in views {
        let mut others: Vec<(usize, usize)> = views
            .iter()
            .filter(|o| o.id != view.id)
            .map(|o| (manhattan(view.center(), o.center()), o.id))
            .collect();
        others.sort(); // distance first, then id: exactly the tie rule
        listen.insert(view.id, others.into_iter().take(k).map(|(_, id)| id).collect());
    }
    Ok(Topology { listen })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(id: usize, cx: usize, cy: usize) -> ViewSpec {
        // size 0 windows are fine for topology-only tests: center == origin
        ViewSpec { id, origin: (cx, cy), size: (0, 0) }
    }

    #[test]
    fn square_corners_link_edge_adjacent() {
        let views = vec![view(1, 0, 0), view(2, 10, 0), view(3, 0, 10), view(4, 10, 10)];
        let topo = build_topology(&views, 2).unwrap();
        assert_eq!(topo.listen_set(1), &BTreeSet::from([2, 3]));
        assert_eq!(topo.listen_set(2), &BTreeSet::from([1, 4]));
        assert_eq!(topo.listen_set(3), &BTreeSet::from([1, 4]));
        assert_eq!(topo.listen_set(4), &BTreeSet::from([2, 3]));
    }

    #[test]
    fn k_equals_n_minus_one_is_fully_connected() {
        let views = vec![view(1, 0, 0), view(2, 5, 1), view(3, 9, 9), view(4, 2, 7)];
        let topo = build_topology(&views, 3).unwrap();
        for v in &views {
            assert_eq!(topo.listen_set(v.id).len(), 3);
            assert!(!topo.listen_set(v.id).contains(&v.id));
        }
    }

    #[test]
    fn line_of_three_k1() {
        let views = vec![view(1, 0, 0), view(2, 10, 0), view(3, 25, 0)];
        let topo = build_topology(&views, 1).unwrap();
        assert_eq!(topo.listen_set(1), &BTreeSet::from([2]));
        assert_eq!(topo.listen_set(2), &BTreeSet::from([1]));
        assert_eq!(topo.listen_set(3), &BTreeSet::from([2]));
        // Directional: 1 listens to 2 but 3's inclusion of 2 does not
        // imply 2 listens to 3.
        assert!(!topo.listen_set(2).contains(&3));
        assert_eq!(topo.receivers_of(2), BTreeSet::from([1, 3]));
    }

    #[test]
    fn duplicate_centers_resolve_by_id() {
        let views = vec![view(1, 5, 5), view(2, 5, 5), view(3, 5, 5)];
        let topo = build_topology(&views, 1).unwrap();
        assert_eq!(topo.listen_set(1), &BTreeSet::from([2]));
        assert_eq!(topo.listen_set(2), &BTreeSet::from([1]));
        assert_eq!(topo.listen_set(3), &BTreeSet::from([1]));
    }

    #[test]
    fn k_must_be_less_than_n() {
        let views = vec![view(1, 0, 0), view(2, 1, 0)];
        assert!(matches!(build_topology(&views, 2), Err(WorldError::KTooLarge { k: 2, n: 2 })));
    }
}
