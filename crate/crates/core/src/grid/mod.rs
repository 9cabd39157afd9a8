//! Power grids, their line graphs and line-graph cascade depths.

mod io;
mod synthetic;

use std::collections::{HashMap, HashSet, VecDeque};

pub use io::{load_grid, save_grid, BUSES_FILE, LINES_FILE};
pub use synthetic::{generate_synthetic_grid, GridFamily, SyntheticSpec};

use crate::error::{Error, Result};

/// Tolerance on total generation minus total load for a balanced base case.
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: u32,
    /// Real power injection, per-unit.
    pub generation: f64,
    /// Real power withdrawal, per-unit.
    pub load: f64,
}

impl Bus {
    pub fn new(id: u32, generation: f64, load: f64) -> Self {
        Bus { id, generation, load }
    }

    pub fn injection(&self) -> f64 {
        self.generation - self.load
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: u32,
    pub from_bus: u32,
    pub to_bus: u32,
    pub susceptance: f64,
    pub capacity: f64,
}

impl Line {
    pub fn new(id: u32, from_bus: u32, to_bus: u32, susceptance: f64, capacity: f64) -> Self {
        Line { id, from_bus, to_bus, susceptance, capacity }
    }
}

/// A validated transmission grid. Immutable after construction.
///
/// Lines are addressed by their position in [`PowerGrid::lines`]; that
/// position is also the line-graph node index and the index into every
/// per-line vector (labels, flows, scores).
#[derive(Debug, Clone, PartialEq)]
pub struct PowerGrid {
    name: String,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    endpoints: Vec<(usize, usize)>,
}

impl PowerGrid {
    /// Validates ids, endpoints, parameters, connectivity and balance.
    ///
    /// Parallel lines are accepted here (sensitivity analysis needs them in
    /// tests) but rejected by [`load_grid`].
    pub fn new(name: impl Into<String>, buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self> {
        let name = name.into();
        if buses.is_empty() {
            return Err(Error::InvalidGrid("grid has no buses".into()));
        }
        if lines.is_empty() {
            return Err(Error::InvalidGrid("grid has no lines".into()));
        }
        let mut index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(Error::InvalidGrid(format!("duplicate bus id {}", b.id)));
            }
            if !(b.generation.is_finite() && b.generation >= 0.0) {
                return Err(Error::InvalidGrid(format!("bus {}: generation must be finite and >= 0", b.id)));
            }
            if !(b.load.is_finite() && b.load >= 0.0) {
                return Err(Error::InvalidGrid(format!("bus {}: load must be finite and >= 0", b.id)));
            }
        }
        let mut line_ids = HashSet::with_capacity(lines.len());
        let mut endpoints = Vec::with_capacity(lines.len());
        for l in &lines {
            if !line_ids.insert(l.id) {
                return Err(Error::InvalidGrid(format!("duplicate line id {}", l.id)));
            }
            let f = *index
                .get(&l.from_bus)
                .ok_or_else(|| Error::InvalidGrid(format!("unknown bus {}", l.from_bus)))?;
            let t = *index
                .get(&l.to_bus)
                .ok_or_else(|| Error::InvalidGrid(format!("unknown bus {}", l.to_bus)))?;
            if f == t {
                return Err(Error::InvalidGrid(format!("line {} is a self-loop on bus {}", l.id, l.from_bus)));
            }
            if !(l.susceptance.is_finite() && l.susceptance > 0.0) {
                return Err(Error::InvalidGrid(format!("line {}: susceptance must be > 0", l.id)));
            }
            if !(l.capacity.is_finite() && l.capacity > 0.0) {
                return Err(Error::InvalidGrid(format!("line {}: capacity must be > 0", l.id)));
            }
            endpoints.push((f, t));
        }
        let grid = PowerGrid { name, buses, lines, endpoints };
        let gen: f64 = grid.buses.iter().map(|b| b.generation).sum();
        let load: f64 = grid.buses.iter().map(|b| b.load).sum();
        if (gen - load).abs() > BALANCE_TOL {
            return Err(Error::InvalidGrid(format!(
                "unbalanced base case: generation {gen} vs load {load}"
            )));
        }
        let all: Vec<bool> = vec![true; grid.lines.len()];
        let islands = grid.islands(&all);
        if islands.iter().any(|&c| c != 0) {
            return Err(Error::InvalidGrid("intact grid is not connected".into()));
        }
        Ok(grid)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    /// Bus positions `(from, to)` of the line at position `line`.
    pub fn endpoints(&self, line: usize) -> (usize, usize) {
        self.endpoints[line]
    }

    /// Position of the line with the given id.
    pub fn line_index(&self, id: u32) -> Option<usize> {
        self.lines.iter().position(|l| l.id == id)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn has_parallel_lines(&self) -> bool {
        let mut seen = HashSet::new();
        self.endpoints.iter().any(|&(a, b)| !seen.insert((a.min(b), a.max(b))))
    }

    /// Number of lines incident to each bus (position-indexed).
    pub fn bus_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.buses.len()];
        for &(f, t) in &self.endpoints {
            deg[f] += 1;
            deg[t] += 1;
        }
        deg
    }

    /// Connected-component label per bus over the `active` lines. Components
    /// are numbered in order of their lowest bus position.
    pub fn islands(&self, active: &[bool]) -> Vec<usize> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for (l, &(f, t)) in self.endpoints.iter().enumerate() {
            if active[l] {
                adj[f].push(t);
                adj[t].push(f);
            }
        }
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            label[s] = next;
            queue.push_back(s);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        label
    }
}

/// One directed line-graph edge. `shared_bus` is `None` only on self-loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LineGraphEdge {
    pub source: usize,
    pub target: usize,
    pub shared_bus: Option<u32>,
}

impl LineGraphEdge {
    pub fn is_self_loop(&self) -> bool {
        self.source == self.target
    }
}

/// Lines-as-nodes graph. Edges are stored grouped by target (ascending),
/// each group starting with the target's self-loop followed by its
/// neighbours in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct LineGraph {
    node_count: usize,
    edges: Vec<LineGraphEdge>,
}

impl LineGraph {
    /// Builds a line graph from an explicit undirected adjacency. Both
    /// directions and one self-loop per node are added; duplicate pairs are
    /// collapsed.
    pub fn from_adjacency(node_count: usize, pairs: &[(usize, usize, Option<u32>)]) -> Result<Self> {
        let mut nbrs: Vec<Vec<(usize, Option<u32>)>> = vec![Vec::new(); node_count];
        for &(u, v, bus) in pairs {
            if u >= node_count || v >= node_count {
                return Err(Error::InvalidGrid(format!("edge ({u},{v}) out of range")));
            }
            if u == v {
                continue;
            }
            nbrs[u].push((v, bus));
            nbrs[v].push((u, bus));
        }
        let mut edges = Vec::new();
        for (v, list) in nbrs.iter_mut().enumerate() {
            list.sort_by_key(|&(u, b)| (u, b));
            list.dedup_by_key(|e| e.0);
            edges.push(LineGraphEdge { source: v, target: v, shared_bus: None });
            edges.extend(list.iter().map(|&(u, b)| LineGraphEdge { source: u, target: v, shared_bus: b }));
        }
        Ok(LineGraph { node_count, edges })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[LineGraphEdge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.source).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.target).collect()
    }

    /// Neighbours of `node`, excluding itself.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |e| e.target == node && !e.is_self_loop())
            .map(|e| e.source)
    }

    pub fn contains(&self, source: usize, target: usize) -> bool {
        self.edges.iter().any(|e| e.source == source && e.target == target)
    }

    fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for e in &self.edges {
            if !e.is_self_loop() {
                adj[e.target].push(e.source);
            }
        }
        adj
    }
}

/// Lines become nodes; two nodes are adjacent when their lines share a bus.
/// Node `i` is `grid.lines()[i]`.
pub fn build_line_graph(grid: &PowerGrid) -> LineGraph {
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); grid.bus_count()];
    for l in 0..grid.line_count() {
        let (f, t) = grid.endpoints(l);
        incident[f].push(l);
        incident[t].push(l);
    }
    let mut pairs = Vec::new();
    for (bus, lines) in incident.iter().enumerate() {
        let bus_id = grid.buses()[bus].id;
        for (i, &u) in lines.iter().enumerate() {
            for &v in &lines[i + 1..] {
                pairs.push((u, v, Some(bus_id)));
            }
        }
    }
    LineGraph::from_adjacency(grid.line_count(), &pairs).expect("line indices are in range")
}

/// Line-graph distance to the nearest initial failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Depth {
    Reached(u32),
    Unreachable,
}

impl Depth {
    /// True when a source at this depth passes the mask at step `t`.
    pub fn admitted_at(self, t: usize) -> bool {
        matches!(self, Depth::Reached(d) if (d as usize) <= t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CascadeDepths(pub Vec<Depth>);

impl CascadeDepths {
    pub fn get(&self, node: usize) -> Depth {
        self.0[node]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Multi-source breadth-first distances from `initial_failures`.
pub fn cascade_depth(lg: &LineGraph, initial_failures: &[usize]) -> Result<CascadeDepths> {
    if initial_failures.is_empty() {
        return Err(Error::InvalidSample("initial failure set is empty".into()));
    }
    let adj = lg.adjacency_lists();
    let mut depth = vec![Depth::Unreachable; lg.node_count()];
    let mut queue = VecDeque::new();
    for &s in initial_failures {
        if s >= lg.node_count() {
            return Err(Error::InvalidSample(format!("initial failure {s} out of range")));
        }
        if depth[s] == Depth::Unreachable {
            depth[s] = Depth::Reached(0);
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        let Depth::Reached(d) = depth[u] else { unreachable!() };
        for &v in &adj[u] {
            if depth[v] == Depth::Unreachable {
                depth[v] = Depth::Reached(d + 1);
                queue.push_back(v);
            }
        }
    }
    Ok(CascadeDepths(depth))
}
