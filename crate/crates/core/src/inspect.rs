//! Plain-text renderings used by the `inspect-*` commands.

use std::fmt::Write;

use crate::graph::{DialogueGraph, NodeKind, CHANNELS};
use crate::mask::AttentionMask;
use crate::preprocess::{EncodedSequence, Layout};

fn layout_name(layout: Layout) -> &'static str {
    match layout {
        Layout::SpecialTokens => "special_tokens",
        Layout::Plain => "plain",
    }
}

fn span_name(seq: &EncodedSequence, v: usize) -> String {
    if v < seq.num_turns {
        format!("turn{v}")
    } else {
        format!("arg{}", v - seq.num_turns)
    }
}

/// Role of each position: `cls`, `sep`, `tau:<span>`, `<span>` or `-`.
fn roles(seq: &EncodedSequence) -> Vec<String> {
    let mut out = vec!["-".to_string(); seq.len()];
    out[seq.cls_position] = "cls".into();
    for &p in &seq.sep_positions {
        out[p] = "sep".into();
    }
    for (v, &(start, end)) in seq.spans.iter().enumerate() {
        for role in &mut out[start..end] {
            *role = span_name(seq, v);
        }
    }
    for (v, &p) in seq.tau_positions.iter().enumerate() {
        out[p] = format!("tau:{}", span_name(seq, v));
    }
    out
}

/// One row per position, then the span list.
pub fn render_sequence(seq: &EncodedSequence) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "layout {} length {} turns {} args {} label {}",
        layout_name(seq.layout),
        seq.len(),
        seq.num_turns,
        seq.num_args,
        seq.label
    )
    .unwrap();
    let roles = roles(seq);
    let width = seq.tokens.iter().map(|t| t.len()).max().unwrap_or(0).max(5);
    writeln!(
        out,
        "{:>4}  {:<width$}  {:>5}  {:>7}  role",
        "pos", "token", "id", "speaker"
    )
    .unwrap();
    for p in 0..seq.len() {
        writeln!(
            out,
            "{:>4}  {:<width$}  {:>5}  {:>7}  {}",
            p, seq.tokens[p], seq.token_ids[p], seq.speaker_ids[p], roles[p]
        )
        .unwrap();
    }
    writeln!(out, "spans").unwrap();
    for (v, &(start, end)) in seq.spans.iter().enumerate() {
        writeln!(out, "  {:<6} [{start}, {end})", span_name(seq, v)).unwrap();
    }
    out
}

/// Header with per-row sums, then the 0/1 grid.
pub fn render_mask(mask: &AttentionMask) -> String {
    let n = mask.len();
    let mut out = format!("size {n}\n");
    let sums: Vec<String> = (0..n).map(|r| mask.row_sum(r).to_string()).collect();
    writeln!(out, "row_sums {}", sums.join(" ")).unwrap();
    out.push_str(&mask.render());
    out
}

fn node_label(graph: &DialogueGraph, v: usize) -> String {
    match graph.node_kind(v) {
        NodeKind::Dialogue => "dialogue".into(),
        NodeKind::Turn(i) => format!("turn{i} speaker {}", graph.turn_speakers[i]),
        NodeKind::Argument(j) => format!("arg{j}"),
    }
}

/// Node list followed by each channel's sorted edge list.
pub fn render_graph(graph: &DialogueGraph) -> String {
    let mut out = String::new();
    writeln!(out, "nodes {}", graph.node_count()).unwrap();
    for v in 0..graph.node_count() {
        writeln!(out, "  {v} {}", node_label(graph, v)).unwrap();
    }
    for c in CHANNELS {
        let edges = graph.edges(c);
        let list: Vec<String> = edges.iter().map(|(a, b)| format!("{a}-{b}")).collect();
        writeln!(out, "{c} {}: {}", edges.len(), list.join(" ")).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Instance, Query, Turn};
    use crate::mask::build_turn_mask;
    use crate::preprocess::{build_sequence, substitute_arguments, Vocab};

    fn seq() -> EncodedSequence {
        let inst = Instance {
            id: "x".into(),
            dialogue: vec![
                Turn::new("Speaker 1", "hi Emma"),
                Turn::new("Speaker 2", "hello"),
            ],
            query: Query {
                arguments: vec!["Speaker 1".into(), "Emma".into()],
            },
            label: 0,
        };
        let sub = substitute_arguments(&inst);
        build_sequence(&sub, &Vocab::build([&sub]), 64, Layout::SpecialTokens).unwrap()
    }

    #[test]
    fn sequence_table_lists_every_position() {
        let s = seq();
        let text = render_sequence(&s);
        assert_eq!(text.lines().count(), 2 + s.len() + 1 + s.spans.len());
        assert!(text.contains("tau:turn0"));
        assert!(text.contains("tau:arg1"));
    }

    #[test]
    fn mask_grid_shape() {
        let s = seq();
        let text = render_mask(&build_turn_mask(&s, true));
        let grid: Vec<&str> = text.lines().skip(2).collect();
        assert_eq!(grid.len(), s.len());
        assert!(grid.iter().all(|r| r.len() == s.len()));
    }

    #[test]
    fn graph_lists_channels_in_order() {
        let text = render_graph(&DialogueGraph::from_sequence(&seq()));
        let channels: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with(' ') && !l.starts_with("nodes"))
            .collect();
        assert_eq!(channels.len(), 5);
        assert!(channels[0].starts_with("dialogue 2: 0-1 0-2"));
    }
}
