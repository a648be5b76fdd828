//! Zone graph of a building.
//!
//! Zones are 0-indexed here; user-facing files use 1-based indices and go
//! through [`BuildingTopology::from_one_based`].

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct BuildingTopology {
    zone_count: usize,
    /// Unordered pairs stored as `(lo, hi)`, sorted, without duplicates.
    pairs: Vec<(usize, usize)>,
    external_wall: Vec<bool>,
    cache: Option<Box<Adjacency>>,
}

/// Serialized form with 1-based zone numbers.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyRepr {
    zones: usize,
    #[serde(default)]
    adjacency: Vec<[usize; 2]>,
    #[serde(default)]
    external_walls: Vec<usize>,
}

impl TryFrom<TopologyRepr> for BuildingTopology {
    type Error = Error;
    fn try_from(r: TopologyRepr) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = r.adjacency.iter().map(|p| (p[0], p[1])).collect();
        Self::from_one_based(r.zones, &pairs, &r.external_walls)
    }
}

impl From<BuildingTopology> for TopologyRepr {
    fn from(t: BuildingTopology) -> Self {
        TopologyRepr {
            zones: t.zone_count,
            adjacency: t.pairs.iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
            external_walls: (0..t.zone_count).filter(|&z| t.external_wall[z]).map(|z| z + 1).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl BuildingTopology {
    /// Builds a topology from 0-based pairs. Connectivity is not required
    /// here; see [`BuildingTopology::assert_connected`].
    pub fn new(zone_count: usize, pairs: &[(usize, usize)], external_wall: Vec<bool>) -> Result<Self> {
        if zone_count == 0 {
            return Err(Error::input("zone count must be positive"));
        }
        if external_wall.len() != zone_count {
            return Err(Error::input(format!(
                "external-wall flags: expected {zone_count}, got {}",
                external_wall.len()
            )));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in pairs {
            if a >= zone_count || b >= zone_count {
                return Err(Error::input(format!(
                    "adjacency pair ({}, {}) out of range 1..={zone_count}",
                    a + 1,
                    b + 1
                )));
            }
            if a == b {
                return Err(Error::input(format!("zone {} listed as adjacent to itself", a + 1)));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let mut topo = BuildingTopology {
            zone_count,
            pairs: set.into_iter().collect(),
            external_wall,
            cache: None,
        };
        topo.rebuild_cache();
        Ok(topo)
    }

    /// Builds from 1-based pairs and 1-based external-wall zone indices.
    pub fn from_one_based(zone_count: usize, pairs: &[(usize, usize)], external: &[usize]) -> Result<Self> {
        let mut flags = vec![false; zone_count];
        for &z in external {
            if z == 0 || z > zone_count {
                return Err(Error::input(format!("external-wall zone {z} out of range 1..={zone_count}")));
            }
            flags[z - 1] = true;
        }
        let mut zero = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            if a == 0 || b == 0 {
                return Err(Error::input(format!("adjacency pair ({a}, {b}) uses zone 0; zones are 1-based")));
            }
            zero.push((a - 1, b - 1));
        }
        Self::new(zone_count, &zero, flags)
    }

    /// Zones `0 - 1 - ... - (m-1)` in a line, all with external walls.
    pub fn chain(zone_count: usize) -> Result<Self> {
        let pairs: Vec<_> = (1..zone_count).map(|z| (z - 1, z)).collect();
        Self::new(zone_count, &pairs, vec![true; zone_count])
    }

    /// Every pair adjacent; the fallback when the true layout is unknown.
    pub fn complete(zone_count: usize, external_wall: Vec<bool>) -> Result<Self> {
        let mut pairs = Vec::new();
        for a in 0..zone_count {
            for b in a + 1..zone_count {
                pairs.push((a, b));
            }
        }
        Self::new(zone_count, &pairs, external_wall)
    }

    fn rebuild_cache(&mut self) {
        let mut neighbors = vec![Vec::new(); self.zone_count];
        for &(a, b) in &self.pairs {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        self.cache = Some(Box::new(Adjacency { neighbors }));
    }

    fn adjacency(&self) -> &Adjacency {
        self.cache.as_deref().expect("adjacency cache built on construction")
    }

    pub fn zone_count(&self) -> usize {
        self.zone_count
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn external_wall(&self) -> &[bool] {
        &self.external_wall
    }

    pub fn has_external_wall(&self, z: usize) -> bool {
        self.external_wall[z]
    }

    fn check_zone(&self, z: usize) -> Result<()> {
        if z >= self.zone_count {
            return Err(Error::input(format!("zone index {z} out of range 0..{}", self.zone_count)));
        }
        Ok(())
    }

    /// Adjacent zones of `z`, excluding `z` itself.
    pub fn adjacent(&self, z: usize) -> &[usize] {
        &self.adjacency().neighbors[z]
    }

    pub fn degree(&self, z: usize) -> usize {
        self.adjacent(z).len()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.zone_count).map(|z| self.degree(z)).max().unwrap_or(0)
    }

    /// Directed edges `(z, y)` for every adjacent pair, both directions,
    /// sorted by source then destination.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(2 * self.pairs.len());
        for z in 0..self.zone_count {
            for &y in self.adjacent(z) {
                edges.push((z, y));
            }
        }
        edges
    }

    /// `N(z)`: adjacent zones plus `z` itself.
    pub fn neighborhood(&self, z: usize) -> Result<BTreeSet<usize>> {
        self.check_zone(z)?;
        let mut set: BTreeSet<usize> = self.adjacent(z).iter().copied().collect();
        set.insert(z);
        Ok(set)
    }

    /// Hop distance from `z` to every zone; `None` if unreachable.
    pub fn distances(&self, z: usize) -> Result<Vec<Option<usize>>> {
        self.check_zone(z)?;
        let mut dist = vec![None; self.zone_count];
        dist[z] = Some(0);
        let mut queue = VecDeque::from([z]);
        while let Some(cur) = queue.pop_front() {
            let d = dist[cur].expect("visited");
            for &next in self.adjacent(cur) {
                if dist[next].is_none() {
                    dist[next] = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        Ok(dist)
    }

    /// `N^n(z)`: zones within `n` hops of `z`.
    pub fn n_hop_neighborhood(&self, z: usize, n: usize) -> Result<BTreeSet<usize>> {
        Ok(self
            .distances(z)?
            .into_iter()
            .enumerate()
            .filter_map(|(y, d)| d.filter(|d| *d <= n).map(|_| y))
            .collect())
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.zone_count];
        let mut out = Vec::new();
        for start in 0..self.zone_count {
            if seen[start] {
                continue;
            }
            let dist = self.distances(start).expect("in range");
            let comp: Vec<usize> = (0..self.zone_count).filter(|&y| dist[y].is_some()).collect();
            for &y in &comp {
                seen[y] = true;
            }
            out.push(comp);
        }
        out
    }

    pub fn assert_connected(&self) -> Result<()> {
        let comps = self.components();
        if comps.len() == 1 {
            return Ok(());
        }
        let listing: Vec<String> = comps
            .iter()
            .map(|c| {
                let zones: Vec<String> = c.iter().map(|z| (z + 1).to_string()).collect();
                format!("{{{}}}", zones.join(","))
            })
            .collect();
        Err(Error::config(format!("zone graph is disconnected: components {}", listing.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn chain_neighborhoods() {
        let t = BuildingTopology::chain(3).unwrap();
        assert_eq!(t.neighborhood(1).unwrap(), set(&[0, 1, 2]));
        assert_eq!(t.neighborhood(0).unwrap(), set(&[0, 1]));
        assert_eq!(t.n_hop_neighborhood(0, 1).unwrap(), set(&[0, 1]));
        assert_eq!(t.n_hop_neighborhood(0, 2).unwrap(), set(&[0, 1, 2]));
        assert_eq!(t.n_hop_neighborhood(2, 0).unwrap(), set(&[2]));
    }

    #[test]
    fn single_zone() {
        let t = BuildingTopology::chain(1).unwrap();
        assert_eq!(t.neighborhood(0).unwrap(), set(&[0]));
        assert!(t.assert_connected().is_ok());
        assert!(t.directed_edges().is_empty());
    }

    #[test]
    fn out_of_range_zone_is_input_error() {
        let t = BuildingTopology::chain(3).unwrap();
        assert!(matches!(t.neighborhood(3), Err(Error::Input(_))));
        assert!(BuildingTopology::new(2, &[(0, 2)], vec![true; 2]).is_err());
        assert!(BuildingTopology::new(2, &[(1, 1)], vec![true; 2]).is_err());
    }

    #[test]
    fn disconnected_lists_components() {
        let t = BuildingTopology::from_one_based(4, &[(1, 2), (3, 4)], &[1, 2, 3, 4]).unwrap();
        let err = t.assert_connected().unwrap_err().to_string();
        assert!(err.contains("{1,2}") && err.contains("{3,4}"), "{err}");
        assert_eq!(t.components(), vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn directed_edges_sorted_by_source() {
        let t = BuildingTopology::chain(3).unwrap();
        assert_eq!(t.directed_edges(), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        assert_eq!(t.max_degree(), 2);
    }

    #[test]
    fn duplicate_pairs_collapse() {
        let t = BuildingTopology::new(2, &[(0, 1), (1, 0)], vec![true, false]).unwrap();
        assert_eq!(t.pairs(), &[(0, 1)]);
        assert!(!t.has_external_wall(1));
    }
}
