//! Canonical text form of a [`ProtocolSpec`].

use std::fmt::Write;

use super::{Item, ProtocolSpec};

/// Largest unit that represents `ms` exactly.
pub fn format_duration(ms: u64) -> String {
    if ms != 0 && ms.is_multiple_of(60_000) {
        format!("{}min", ms / 60_000)
    } else if ms != 0 && ms.is_multiple_of(1_000) {
        format!("{}s", ms / 1_000)
    } else {
        format!("{ms}ms")
    }
}

/// Writes `spec` in canonical form: one declaration per line, repeat
/// bodies indented by four spaces.
pub fn serialize_protocol(spec: &ProtocolSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "protocol {}", spec.name);
    for m in &spec.markers {
        let _ = writeln!(out, "marker {}={}", m.name, m.code);
    }
    write_items(&mut out, &spec.items, 0);
    out
}

fn write_items(out: &mut String, items: &[Item], depth: usize) {
    for item in items {
        let indent = "    ".repeat(depth);
        match item {
            Item::Block(b) => {
                let _ = write!(out, "{indent}block {} {} {}", b.label, b.onset_marker, format_duration(b.duration_ms));
                if let Some(off) = &b.offset_marker {
                    let _ = write!(out, " offset {off}");
                }
                out.push('\n');
            }
            Item::Repeat { count, items } => {
                let _ = writeln!(out, "{indent}repeat {count} {{");
                write_items(out, items, depth + 1);
                let _ = writeln!(out, "{indent}}}");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse_protocol;

    #[test]
    fn durations_pick_exact_unit() {
        assert_eq!(format_duration(20_000), "20s");
        assert_eq!(format_duration(120_000), "2min");
        assert_eq!(format_duration(1_500), "1500ms");
        assert_eq!(format_duration(1), "1ms");
    }

    #[test]
    fn single_block_round_trip() {
        let spec = parse_protocol("protocol p\nmarker REST=1\nblock rest REST 20s").unwrap();
        let text = serialize_protocol(&spec);
        assert_eq!(text, "protocol p\nmarker REST=1\nblock rest REST 20s\n");
        assert_eq!(parse_protocol(&text).unwrap(), spec);
    }

    #[test]
    fn nested_repeat_layout() {
        let spec = parse_protocol(
            "protocol p\nmarker A=1\nmarker E=2\nrepeat 2 { block a A 1s; repeat 3 { block b A 5ms offset E } }",
        )
        .unwrap();
        let text = serialize_protocol(&spec);
        assert_eq!(
            text,
            "protocol p\nmarker A=1\nmarker E=2\nrepeat 2 {\n    block a A 1s\n    repeat 3 {\n        block b A 5ms offset E\n    }\n}\n"
        );
        assert_eq!(parse_protocol(&text).unwrap(), spec);
        assert_eq!(serialize_protocol(&parse_protocol(&text).unwrap()), text);
    }
}
