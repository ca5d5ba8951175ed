use std::fmt::Write as _;
use std::path::Path;

use super::RelevanceGraph;
use crate::error::{MagnetError, Result};

/// Renders a graph as a DOT digraph. Vertices are labelled `type:column`;
/// agents are ellipses, objects boxes. Absent vertices and zero-weight
/// edges are left out.
pub fn export_graph_dot(graph: &RelevanceGraph) -> String {
    let names = graph.table.schema.type_names();
    let mut out = String::new();
    let _ = writeln!(out, "digraph relevance {{");
    let _ = writeln!(out, "  // tick {}", graph.tick);
    for v in graph.table.present() {
        let shape = if graph.table.schema.is_agent_type(v.vertex_type) {
            "ellipse"
        } else {
            "box"
        };
        let _ = writeln!(
            out,
            "  v{} [label=\"{}:{}\", shape={shape}];",
            v.column, names[v.vertex_type], v.column
        );
    }
    for (r, c, w) in graph.edges() {
        if !graph.table.is_present(r) || !graph.table.is_present(c) {
            continue;
        }
        let _ = writeln!(out, "  v{r} -> v{c} [weight=\"{w:.4}\"];");
    }
    out.push_str("}\n");
    out
}

pub fn write_graph_dot(graph: &RelevanceGraph, path: &Path) -> Result<()> {
    std::fs::write(path, export_graph_dot(graph))?;
    Ok(())
}

/// Reads the edge lines of a DOT document written by [`export_graph_dot`].
pub fn parse_dot_edges(dot: &str) -> Result<Vec<(usize, usize, f64)>> {
    let mut edges = Vec::new();
    for (n, line) in dot.lines().enumerate() {
        let line = line.trim();
        let Some((lhs, rest)) = line.split_once("->") else { continue };
        let bad = || MagnetError::Schema(format!("DOT line {}: cannot parse {line:?}", n + 1));
        let vertex = |s: &str| s.trim().strip_prefix('v').and_then(|x| x.parse::<usize>().ok());
        let from = vertex(lhs).ok_or_else(bad)?;
        let (to, attrs) = rest.split_once('[').ok_or_else(bad)?;
        let to = vertex(to).ok_or_else(bad)?;
        let w = attrs
            .split_once("weight=\"")
            .and_then(|(_, w)| w.split_once('"'))
            .and_then(|(w, _)| w.parse::<f64>().ok())
            .ok_or_else(bad)?;
        edges.push((from, to, w));
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::envs::{EnvConfig, PredatorPrey};
    use crate::graph::assign_types;

    fn graph(weights: Vec<f64>) -> RelevanceGraph {
        let env = PredatorPrey::new(EnvConfig::predator_prey(10)).unwrap();
        let table = assign_types(&env).unwrap();
        let c = table.cols();
        RelevanceGraph {
            weights: Tensor::new(vec![3, c], weights).unwrap(),
            table,
            tick: 0,
        }
    }

    #[test]
    fn single_edge() {
        let mut w = vec![0.0; 36];
        w[5] = 0.5;
        let dot = export_graph_dot(&graph(w));
        let lines: Vec<&str> = dot.lines().filter(|l| l.contains("->")).collect();
        assert_eq!(lines.len(), 1);
        assert!(lines[0].contains("weight=\"0.5000\""));
        assert!(dot.contains("v0 [label=\"predator-team-1:0\", shape=ellipse]"));
        assert!(dot.contains("shape=box"));
    }

    #[test]
    fn empty_graph_has_no_edges() {
        let dot = export_graph_dot(&graph(vec![0.0; 36]));
        assert!(!dot.contains("->"));
        assert!(parse_dot_edges(&dot).unwrap().is_empty());
    }

    #[test]
    fn parse_back() {
        let mut w = vec![0.0; 36];
        w[1] = -0.25;
        w[14] = 0.75;
        let g = graph(w);
        let edges = parse_dot_edges(&export_graph_dot(&g)).unwrap();
        assert_eq!(edges, g.edges());
        assert!(parse_dot_edges("v1 -> x [weight=\"1\"]").is_err());
    }
}
