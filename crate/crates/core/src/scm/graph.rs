use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The five variables of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Node {
    /// Age (years).
    A,
    /// Biological sex (0 female, 1 male).
    S,
    /// Total brain volume (ml).
    B,
    /// Structure volume (ml).
    V,
    /// The mesh.
    X,
}

impl Node {
    pub const ALL: [Node; 5] = [Node::A, Node::S, Node::B, Node::V, Node::X];

    pub fn name(self) -> &'static str {
        match self {
            Node::A => "a",
            Node::S => "s",
            Node::B => "b",
            Node::V => "v",
            Node::X => "x",
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Node {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" | "age" => Ok(Node::A),
            "s" | "sex" => Ok(Node::S),
            "b" | "brain_volume" => Ok(Node::B),
            "v" | "structure_volume" => Ok(Node::V),
            "x" | "mesh" => Ok(Node::X),
            other => Err(Error::UnknownNode(other.to_string())),
        }
    }
}

/// Parent sets of the causal graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalGraph {
    parents: BTreeMap<Node, Vec<Node>>,
}

impl Default for CausalGraph {
    fn default() -> Self {
        let parents = BTreeMap::from([
            (Node::A, vec![]),
            (Node::S, vec![]),
            (Node::B, vec![Node::A, Node::S]),
            (Node::V, vec![Node::A, Node::B]),
            (Node::X, vec![Node::V, Node::B]),
        ]);
        Self { parents }
    }
}

impl CausalGraph {
    /// Graph with overridden parent sets; rejected if it has a cycle.
    pub fn with_parents(parents: BTreeMap<Node, Vec<Node>>) -> Result<Self> {
        let mut full = Self::default().parents;
        for (node, ps) in parents {
            full.insert(node, ps);
        }
        let graph = Self { parents: full };
        graph.topological_order()?;
        Ok(graph)
    }

    pub fn parents(&self, node: Node) -> &[Node] {
        &self.parents[&node]
    }

    /// Kahn's algorithm, ties broken by node order.
    pub fn topological_order(&self) -> Result<Vec<Node>> {
        let mut indegree: BTreeMap<Node, usize> =
            self.parents.iter().map(|(n, ps)| (*n, ps.len())).collect();
        let mut order = Vec::with_capacity(indegree.len());
        while let Some(&next) = indegree.iter().find(|(_, &d)| d == 0).map(|(n, _)| n) {
            indegree.remove(&next);
            order.push(next);
            for (child, ps) in &self.parents {
                if ps.contains(&next) {
                    if let Some(d) = indegree.get_mut(child) {
                        *d -= 1;
                    }
                }
            }
        }
        if !indegree.is_empty() {
            return Err(Error::InvalidConfig("causal graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// All nodes reachable from `node` along edge direction, excluding itself.
    pub fn descendants(&self, node: Node) -> Vec<Node> {
        let mut out: Vec<Node> = Vec::new();
        let mut frontier = vec![node];
        while let Some(n) = frontier.pop() {
            for (child, ps) in &self.parents {
                if ps.contains(&n) && !out.contains(child) {
                    out.push(*child);
                    frontier.push(*child);
                }
            }
        }
        out.sort();
        out
    }
}

/// Observed covariates of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateRecord {
    /// Years.
    pub a: f64,
    /// 0 female, 1 male; non-binary values only arise from interventions.
    pub s: f64,
    /// Millilitres.
    pub b: f64,
    /// Millilitres.
    pub v: f64,
}

impl CovariateRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("a", self.a), ("s", self.s), ("b", self.b), ("v", self.v)] {
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("covariate {name}")));
            }
        }
        for (name, x) in [("a", self.a), ("b", self.b), ("v", self.v)] {
            if x <= 0.0 {
                return Err(Error::Domain(format!("{name} = {x} must be positive")));
            }
        }
        Ok(())
    }

    pub fn get(&self, node: Node) -> Option<f64> {
        match node {
            Node::A => Some(self.a),
            Node::S => Some(self.s),
            Node::B => Some(self.b),
            Node::V => Some(self.v),
            Node::X => None,
        }
    }

    pub(crate) fn set(&mut self, node: Node, value: f64) {
        match node {
            Node::A => self.a = value,
            Node::S => self.s = value,
            Node::B => self.b = value,
            Node::V => self.v = value,
            Node::X => {}
        }
    }
}

/// A set of `do(node := value)` assignments on covariate nodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    assignments: BTreeMap<Node, f64>,
}

impl Intervention {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(assignments: impl IntoIterator<Item = (Node, f64)>) -> Result<Self> {
        let mut iv = Self::default();
        for (node, value) in assignments {
            iv = iv.with(node, value)?;
        }
        Ok(iv)
    }

    pub fn with(mut self, node: Node, value: f64) -> Result<Self> {
        if node == Node::X {
            return Err(Error::InvalidIntervention(
                "the mesh node cannot be fixed by do()".into(),
            ));
        }
        if !value.is_finite() {
            return Err(Error::InvalidIntervention(format!("do({node}) value is not finite")));
        }
        if matches!(node, Node::A | Node::B | Node::V) && value <= 0.0 {
            return Err(Error::InvalidIntervention(format!("do({node} := {value}) must be positive")));
        }
        if self.assignments.insert(node, value).is_some() {
            return Err(Error::InvalidIntervention(format!("{node} assigned twice")));
        }
        Ok(self)
    }

    pub fn get(&self, node: Node) -> Option<f64> {
        self.assignments.get(&node).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Node, f64)> + '_ {
        self.assignments.iter().map(|(n, v)| (*n, *v))
    }

    /// Union of two interventions on disjoint nodes.
    pub fn merge(&self, other: &Intervention) -> Result<Intervention> {
        let mut out = self.clone();
        for (n, v) in other.iter() {
            out = out.with(n, v)?;
        }
        Ok(out)
    }
}

impl fmt::Display for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("do")?;
        for (n, v) in self.iter() {
            write!(f, " {n}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for Intervention {
    type Err = Error;

    /// `do a=80 s=0.5`; the leading `do` is optional and commas also separate.
    fn from_str(text: &str) -> Result<Self> {
        let mut iv = Intervention::none();
        for token in text.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            if token == "do" {
                continue;
            }
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| Error::InvalidIntervention(format!("expected key=value, got `{token}`")))?;
            let node: Node = key.parse()?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidIntervention(format!("bad value in `{token}`")))?;
            iv = iv.with(node, value)?;
        }
        Ok(iv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_graph_is_acyclic_in_ancestral_order() {
        let g = CausalGraph::default();
        assert_eq!(g.topological_order().unwrap(), vec![Node::A, Node::S, Node::B, Node::V, Node::X]);
        assert_eq!(g.descendants(Node::V), vec![Node::X]);
        assert_eq!(g.descendants(Node::A), vec![Node::B, Node::V, Node::X]);
    }

    #[test]
    fn cyclic_override_is_rejected() {
        let bad = BTreeMap::from([(Node::A, vec![Node::V])]);
        assert!(CausalGraph::with_parents(bad).is_err());
        let ok = BTreeMap::from([(Node::V, vec![Node::B])]);
        assert!(CausalGraph::with_parents(ok).is_ok());
    }

    #[test]
    fn intervention_syntax() {
        let iv: Intervention = "do a=80 s=0.5".parse().unwrap();
        assert_eq!(iv.get(Node::A), Some(80.0));
        assert_eq!(iv.get(Node::S), Some(0.5));
        assert!(iv.get(Node::B).is_none());
        assert!("".parse::<Intervention>().unwrap().is_empty());
        assert!(matches!("do q=1".parse::<Intervention>(), Err(Error::UnknownNode(_))));
        assert!("do a=1 a=2".parse::<Intervention>().is_err());
        assert!("do x=1".parse::<Intervention>().is_err());
        assert!("do b=-3".parse::<Intervention>().is_err());
        let round: Intervention = iv.to_string().parse().unwrap();
        assert_eq!(round, iv);
    }
}
