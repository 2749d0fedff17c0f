//! Directed feature-interaction graphs.
//!
//! Nodes are environmental variables, edges point from a driver to the
//! variable it influences, and one node is the forecast target. The node
//! order fixes the row order of every per-node tensor downstream.
//!
//! # Config format
//!
//! ```text
//! # comments start with '#'
//! [nodes]
//! OUT_temp
//! G2_temp
//! [edges]
//! OUT_temp -> G2_temp
//! [target]
//! G2_temp
//! [options]
//! self_loops = where_needed     # where_needed | all | none
//! provisional = false
//! ```
//!
//! Sections may appear in any order; `[options]` is optional.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Where the graph inserts self-loops so every node has an incoming edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfLoops {
    /// Only on nodes whose in-degree would otherwise be zero.
    #[default]
    WhereNeeded,
    All,
    None,
}

impl SelfLoops {
    fn as_str(self) -> &'static str {
        match self {
            SelfLoops::WhereNeeded => "where_needed",
            SelfLoops::All => "all",
            SelfLoops::None => "none",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "where_needed" => Ok(SelfLoops::WhereNeeded),
            "all" => Ok(SelfLoops::All),
            "none" => Ok(SelfLoops::None),
            other => Err(Error::Config(format!("unknown self_loops policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct FeatureGraph {
    nodes: Vec<String>,
    edges: Vec<(usize, usize)>,
    target: usize,
    self_loops: SelfLoops,
    provisional: bool,
    /// Effective in-neighbours per destination, self-loops included.
    incoming: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    nodes: Vec<String>,
    edges: Vec<(String, String)>,
    target: String,
    self_loops: SelfLoops,
    provisional: bool,
}

impl TryFrom<GraphRepr> for FeatureGraph {
    type Error = Error;

    fn try_from(r: GraphRepr) -> Result<Self> {
        let edges: Vec<(&str, &str)> = r.edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let nodes: Vec<&str> = r.nodes.iter().map(String::as_str).collect();
        let mut g = FeatureGraph::new(&nodes, &edges, &r.target, r.self_loops)?;
        g.provisional = r.provisional;
        Ok(g)
    }
}

impl From<FeatureGraph> for GraphRepr {
    fn from(g: FeatureGraph) -> Self {
        GraphRepr {
            edges: g
                .edges
                .iter()
                .map(|&(s, d)| (g.nodes[s].clone(), g.nodes[d].clone()))
                .collect(),
            target: g.nodes[g.target].clone(),
            nodes: g.nodes,
            self_loops: g.self_loops,
            provisional: g.provisional,
        }
    }
}

impl FeatureGraph {
    pub fn new(nodes: &[&str], edges: &[(&str, &str)], target: &str, self_loops: SelfLoops) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, &n) in nodes.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config("empty node name".into()));
            }
            if index.insert(n, i).is_some() {
                return Err(Error::Config(format!("duplicate node '{n}'")));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("edge endpoint '{name}' is not a declared node")))
        };
        let mut seen = BTreeSet::new();
        let mut resolved = Vec::with_capacity(edges.len());
        for &(s, d) in edges {
            let e = (lookup(s)?, lookup(d)?);
            if !seen.insert(e) {
                return Err(Error::Config(format!("duplicate edge '{s} -> {d}'")));
            }
            resolved.push(e);
        }
        let target = index
            .get(target)
            .copied()
            .ok_or_else(|| Error::Config(format!("target '{target}' is not a declared node")))?;

        let mut incoming = vec![Vec::new(); nodes.len()];
        for &(s, d) in &resolved {
            incoming[d].push(s);
        }
        for (i, list) in incoming.iter_mut().enumerate() {
            let needs = match self_loops {
                SelfLoops::All => !list.contains(&i),
                SelfLoops::WhereNeeded => list.is_empty(),
                SelfLoops::None => false,
            };
            if needs {
                list.push(i);
            }
            list.sort_unstable();
        }

        Ok(Self {
            nodes: nodes.iter().map(|s| s.to_string()).collect(),
            edges: resolved,
            target,
            self_loops,
            provisional: false,
            incoming,
        })
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Declared edges as `(source, destination)` index pairs.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_names(&self) -> Vec<(&str, &str)> {
        self.edges
            .iter()
            .map(|&(s, d)| (self.nodes[s].as_str(), self.nodes[d].as_str()))
            .collect()
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn target_name(&self) -> &str {
        &self.nodes[self.target]
    }

    pub fn self_loops(&self) -> SelfLoops {
        self.self_loops
    }

    pub fn is_provisional(&self) -> bool {
        self.provisional
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    /// Effective in-neighbours of `node`, ascending, self-loops included.
    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    /// In-degree over declared edges only.
    pub fn declared_in_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|&&(_, d)| d == node).count()
    }

    pub fn has_edge(&self, src: &str, dst: &str) -> bool {
        match (self.index_of(src), self.index_of(dst)) {
            (Some(s), Some(d)) => self.edges.contains(&(s, d)),
            _ => false,
        }
    }

    /// Fails if a node has no effective in-neighbour.
    pub fn check_incoming(&self) -> Result<()> {
        match self.incoming.iter().position(Vec::is_empty) {
            Some(i) => Err(Error::Graph(format!(
                "node '{}' has no incoming edges and self-loops are disabled",
                self.nodes[i]
            ))),
            None => Ok(()),
        }
    }

    /// A copy with edge `src -> dst` removed.
    pub fn without_edge(&self, src: &str, dst: &str) -> Result<Self> {
        let edges: Vec<(&str, &str)> = self
            .edge_names()
            .into_iter()
            .filter(|&(s, d)| !(s == src && d == dst))
            .collect();
        let nodes: Vec<&str> = self.nodes.iter().map(String::as_str).collect();
        let mut g = Self::new(&nodes, &edges, self.target_name(), self.self_loops)?;
        g.provisional = self.provisional;
        Ok(g)
    }

    /// Serialises to the config text format.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        if self.provisional {
            out.push_str("# provisional edge set\n");
        }
        out.push_str("[nodes]\n");
        for n in &self.nodes {
            let _ = writeln!(out, "{n}");
        }
        out.push_str("[edges]\n");
        for (s, d) in self.edge_names() {
            let _ = writeln!(out, "{s} -> {d}");
        }
        out.push_str("[target]\n");
        let _ = writeln!(out, "{}", self.target_name());
        out.push_str("[options]\n");
        let _ = writeln!(out, "self_loops = {}", self.self_loops.as_str());
        let _ = writeln!(out, "provisional = {}", self.provisional);
        out
    }

    /// Graphviz description for visual inspection.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph features {\n  rankdir=LR;\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let shape = if i == self.target { "doublecircle" } else { "ellipse" };
            let _ = writeln!(out, "  \"{n}\" [shape={shape}];");
        }
        for (s, d) in self.edge_names() {
            let _ = writeln!(out, "  \"{s}\" -> \"{d}\";");
        }
        for (i, list) in self.incoming.iter().enumerate() {
            if list.contains(&i) && !self.edges.contains(&(i, i)) {
                let n = &self.nodes[i];
                let _ = writeln!(out, "  \"{n}\" -> \"{n}\" [style=dashed];");
            }
        }
        out.push_str("}\n");
        out
    }

    /// Hex SHA-256 of the config text.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_config_string().as_bytes()))
    }
}

/// Parses the config text format described in the module docs.
pub fn parse_graph_config(text: &str) -> Result<FeatureGraph> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Nodes,
        Edges,
        Target,
        Options,
    }
    let mut section = Section::None;
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut targets = Vec::new();
    let mut self_loops = SelfLoops::default();
    let mut provisional = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
        if line.starts_with('[') {
            section = match line {
                "[nodes]" => Section::Nodes,
                "[edges]" => Section::Edges,
                "[target]" => Section::Target,
                "[options]" => Section::Options,
                other => return Err(at(format!("unknown section {other}"))),
            };
            continue;
        }
        match section {
            Section::None => return Err(at("content before any section".into())),
            Section::Nodes => nodes.push(line.to_string()),
            Section::Edges => {
                let (s, d) = line
                    .split_once("->")
                    .ok_or_else(|| at(format!("expected 'src -> dst', got '{line}'")))?;
                edges.push((s.trim().to_string(), d.trim().to_string()));
            }
            Section::Target => targets.push(line.to_string()),
            Section::Options => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| at(format!("expected 'key = value', got '{line}'")))?;
                match k.trim() {
                    "self_loops" => self_loops = SelfLoops::parse(v.trim())?,
                    "provisional" => {
                        provisional = v
                            .trim()
                            .parse()
                            .map_err(|_| at(format!("provisional must be true/false, got '{}'", v.trim())))?
                    }
                    other => return Err(at(format!("unknown option '{other}'"))),
                }
            }
        }
    }
    let target = match targets.as_slice() {
        [t] => t.as_str(),
        [] => return Err(Error::Config("missing [target]".into())),
        _ => return Err(Error::Config("more than one target declared".into())),
    };
    let node_refs: Vec<&str> = nodes.iter().map(String::as_str).collect();
    let edge_refs: Vec<(&str, &str)> = edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let mut g = FeatureGraph::new(&node_refs, &edge_refs, target, self_loops)?;
    g.provisional = provisional;
    Ok(g)
}

/// Checks that the graph's nodes are exactly the given frame columns.
pub fn validate_graph(graph: &FeatureGraph, columns: &[String]) -> Result<()> {
    let cols: BTreeSet<&str> = columns.iter().map(String::as_str).collect();
    let nodes: BTreeSet<&str> = graph.nodes.iter().map(String::as_str).collect();
    if let Some(n) = nodes.difference(&cols).next() {
        return Err(Error::Config(format!("graph node '{n}' has no matching data column")));
    }
    if let Some(c) = cols.difference(&nodes).next() {
        return Err(Error::Config(format!("data column '{c}' is not a graph node")));
    }
    if cols.len() != columns.len() {
        return Err(Error::Config("data columns contain duplicates".into()));
    }
    Ok(())
}

pub const GH2_COLUMNS: [&str; 6] = ["OUT_temp", "OUT_RH", "OUT_rad", "OUT_wind_speed", "G2_temp", "G2_RH"];

pub const GH4_COLUMNS: [&str; 8] = [
    "OUT_Temp", "OUT_Rad", "OUT_PAR", "OUT_CO2", "OUT_RH", "G4_PAR", "G4_CO2", "G4_Temp",
];

/// Six-variable graph with the thirteen physically motivated links.
pub fn gh2_default_graph() -> FeatureGraph {
    let edges = [
        ("OUT_temp", "OUT_RH"),
        ("OUT_wind_speed", "OUT_RH"),
        ("OUT_rad", "OUT_RH"),
        ("OUT_rad", "OUT_temp"),
        ("OUT_wind_speed", "OUT_temp"),
        ("OUT_temp", "G2_temp"),
        ("OUT_RH", "G2_RH"),
        ("OUT_rad", "G2_temp"),
        ("OUT_rad", "G2_RH"),
        ("OUT_wind_speed", "G2_temp"),
        ("OUT_wind_speed", "G2_RH"),
        ("G2_temp", "G2_RH"),
        ("G2_RH", "G2_temp"),
    ];
    FeatureGraph::new(&GH2_COLUMNS, &edges, "G2_temp", SelfLoops::WhereNeeded)
        .expect("built-in graph is valid")
}

/// Eight-variable PV-house graph. Provisional: external-to-internal links
/// mirror the six-variable house, plus the PAR and CO2 couplings.
pub fn gh4_default_graph() -> FeatureGraph {
    let edges = [
        ("OUT_Temp", "OUT_RH"),
        ("OUT_Rad", "OUT_RH"),
        ("OUT_Rad", "OUT_Temp"),
        ("OUT_Rad", "OUT_PAR"),
        ("OUT_Temp", "G4_Temp"),
        ("OUT_Rad", "G4_Temp"),
        ("OUT_RH", "G4_Temp"),
        ("OUT_PAR", "G4_PAR"),
        ("OUT_CO2", "G4_CO2"),
        ("G4_PAR", "G4_Temp"),
        ("G4_PAR", "G4_CO2"),
        ("G4_CO2", "G4_Temp"),
        ("G4_Temp", "G4_CO2"),
    ];
    let mut g = FeatureGraph::new(&GH4_COLUMNS, &edges, "G4_Temp", SelfLoops::WhereNeeded)
        .expect("built-in graph is valid");
    g.provisional = true;
    g
}
