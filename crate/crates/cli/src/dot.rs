//! Graphviz export of explained graphs: one cluster per graph, node fill
//! darker for higher mask values, ground-truth nodes drawn with a double
//! border.

use std::io::{self, Write};

use msegnn::Graph;

use crate::commands::ExplanationRecord;

/// Gray fill for mask value `m`: white at 0, black at 1.
pub fn fill_color(m: f64) -> String {
    let level = (255.0 * (1.0 - m.clamp(0.0, 1.0))).round() as u8;
    format!("#{level:02x}{level:02x}{level:02x}")
}

pub fn write_dot(
    out: &mut impl Write,
    records: &[(ExplanationRecord, &Graph)],
    fingerprint: &str,
) -> io::Result<()> {
    writeln!(out, "graph explanations {{")?;
    writeln!(out, "  label=\"config {fingerprint}\";")?;
    writeln!(out, "  node [shape=circle, style=filled, fontsize=8];")?;
    for (i, (r, graph)) in records.iter().enumerate() {
        writeln!(out, "  subgraph cluster_{i} {{")?;
        writeln!(
            out,
            "    label=\"episode {} graph {} class {} predicted {}\";",
            r.episode, r.graph_id, r.true_class, r.predicted_class
        )?;
        for (v, &m) in r.mask.iter().enumerate() {
            let font = if m > 0.5 { "white" } else { "black" };
            let truth = r.truth_mask.as_ref().is_some_and(|t| t[v] == 1);
            writeln!(
                out,
                "    g{i}_{v} [label=\"{v}\", fillcolor=\"{}\", fontcolor={font}{}, tooltip=\"{m:.4}\"];",
                fill_color(m),
                if truth { ", peripheries=2" } else { "" }
            )?;
        }
        for (a, b) in graph.edges() {
            writeln!(out, "    g{i}_{a} -- g{i}_{b};")?;
        }
        writeln!(out, "  }}")?;
    }
    writeln!(out, "}}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_monotone_gray() {
        assert_eq!(fill_color(0.0), "#ffffff");
        assert_eq!(fill_color(1.0), "#000000");
        assert_eq!(fill_color(2.0), "#000000");
        assert!(fill_color(0.25) > fill_color(0.75));
    }
}
