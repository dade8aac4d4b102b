use proptest::prelude::*;
use trigline_core::protocol::{Block, Item, MarkerCode, ProtocolSpec, MAX_REPEAT_DEPTH};
use trigline_core::transport::{decode_frame, encode_frame, DecodeError, FrameDecoder, MarkerFrame};
use trigline_core::{expand, parse_protocol, serialize_protocol};

fn ident() -> impl Strategy<Value = String> {
    "[A-Za-z_][A-Za-z0-9_.-]{0,10}"
}

fn duration() -> impl Strategy<Value = u64> {
    prop_oneof![1u64..5_000, (1u64..600).prop_map(|s| s * 1_000), (1u64..10).prop_map(|m| m * 60_000)]
}

fn items(markers: Vec<String>) -> impl Strategy<Value = Vec<Item>> {
    let label = prop_oneof![
        Just("rest".to_string()),
        Just("quiz".to_string()),
        Just("concept".to_string()),
        Just("feedback".to_string()),
        ident(),
    ];
    let m = prop::sample::select(markers);
    let block = (label, m.clone(), duration(), prop::option::of(m)).prop_map(|(label, onset, d, off)| {
        let b = Block::new(label, onset, d);
        Item::Block(match off {
            Some(o) => b.with_offset(o),
            None => b,
        })
    });
    let item = block.prop_recursive(MAX_REPEAT_DEPTH as u32, 48, 4, |inner| {
        (1u32..5, prop::collection::vec(inner, 1..4)).prop_map(|(count, items)| Item::Repeat { count, items })
    });
    prop::collection::vec(item, 1..6)
}

fn spec() -> impl Strategy<Value = ProtocolSpec> {
    (
        ident(),
        prop::collection::btree_map(ident(), any::<()>(), 1..6),
        prop::sample::subsequence((1u8..=255).collect::<Vec<_>>(), 6),
    )
        .prop_flat_map(|(name, names, codes)| {
            let markers: Vec<MarkerCode> = names.into_keys().zip(codes).map(|(n, c)| MarkerCode::new(n, c)).collect();
            let names: Vec<String> = markers.iter().map(|m| m.name.clone()).collect();
            (Just(name), Just(markers), items(names))
        })
        .prop_map(|(name, markers, items)| ProtocolSpec { name, markers, items })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_inverts_serialize(spec in spec()) {
        let text = serialize_protocol(&spec);
        let parsed = parse_protocol(&text).map_err(|d| TestCaseError::fail(format!("{d}\n{text}")))?;
        prop_assert_eq!(&parsed, &spec);
        prop_assert_eq!(serialize_protocol(&parsed), text);
    }

    #[test]
    fn expanded_timeline_is_prefix_sum(spec in spec()) {
        let Ok(p) = expand(&spec) else { return Ok(()) };
        let mut t = 0;
        let mut oracle = Vec::new();
        for i in 0..p.blocks().len() {
            let (onset, offset) = p.block_codes(i);
            oracle.push((t, onset));
            t += p.blocks()[i].duration_ms;
            if let Some(c) = offset {
                oracle.push((t, c));
            }
        }
        let got: Vec<(u64, u8)> = p.expected_timeline().events.iter().map(|e| (e.offset_ms, e.marker)).collect();
        prop_assert_eq!(got, oracle);
        prop_assert_eq!(p.total_duration_ms(), t);
    }

    #[test]
    fn frames_round_trip(code in 1u8..=255, seq: u16, ts in prop::option::of(any::<u32>())) {
        let frame = MarkerFrame { code, seq, ts_ms: ts };
        let bytes = encode_frame(&frame).unwrap();
        prop_assert_eq!(decode_frame(&bytes), Ok((frame, bytes.len())));
    }

    #[test]
    fn decoder_survives_arbitrary_input(bytes in prop::collection::vec(any::<u8>(), 0..512), split in 0usize..512) {
        let split = split.min(bytes.len());
        let mut d = FrameDecoder::new();
        d.push(&bytes[..split]);
        while d.next_frame().is_some() {}
        d.push(&bytes[split..]);
        while d.next_frame().is_some() {}
        d.finish();
        prop_assert!(d.buffered() == 0);
        let _ = decode_frame(&bytes);
    }

    #[test]
    fn frames_survive_garbage_between(
        frames in prop::collection::vec((1u8..=255, any::<u16>()), 1..10),
        junk in prop::collection::vec(prop::collection::vec(any::<u8>().prop_filter("no stx", |b| *b != 0x02), 0..8), 10),
    ) {
        let mut stream = Vec::new();
        for ((code, seq), j) in frames.iter().zip(&junk) {
            stream.extend_from_slice(j);
            stream.extend_from_slice(&encode_frame(&MarkerFrame::new(*code, *seq)).unwrap());
        }
        let mut d = FrameDecoder::new();
        d.push(&stream);
        let mut got = Vec::new();
        while let Some(item) = d.next_frame() {
            if let Ok(f) = item {
                got.push((f.code, f.seq));
            }
        }
        prop_assert_eq!(got, frames);
    }
}

#[test]
fn truncated_frame_asks_for_more() {
    let bytes = encode_frame(&MarkerFrame::new(1, 0).with_timestamp(5)).unwrap();
    assert!(matches!(decode_frame(&bytes[..5]), Err(DecodeError::Truncated { .. })));
}
