mod common;

use common::refcodec::{random_message, ref_decode, ref_encode, to_ref};
use elasticbroker::wire::{decode_frame, decode_frame_capped, encode_frame, encode_frame_capped, Decoded, FrameDecoder, Message, WireError, WireRecord, DEFAULT_MAX_FRAME};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn hex(s: &str) -> Vec<u8> {
    s.split_whitespace().map(|b| u8::from_str_radix(b, 16).unwrap()).collect()
}

#[test]
fn hex_vectors() {
    let append = Message::Append {
        step: 7,
        payload: vec![1.0],
    };
    let want = hex("00 00 00 15 02 00 00 00 00 00 00 00 07 00 00 00 01 00 00 00 00 00 00 F0 3F");
    assert_eq!(encode_frame(&append).unwrap(), want);
    assert_eq!(ref_encode(&to_ref(&append)), want);
    assert_eq!(encode_frame(&Message::Finalize).unwrap(), hex("00 00 00 01 03"));
    assert_eq!(encode_frame(&Message::ack_ok()).unwrap(), hex("00 00 00 04 10 00 00 00"));
    assert_eq!(encode_frame(&Message::ack_err("x")).unwrap(), hex("00 00 00 05 10 01 00 01 78"));
    let register = Message::Register {
        field_name: "p".into(),
        rank: 1,
        group_id: 0,
        element_count: 2,
    };
    assert_eq!(
        encode_frame(&register).unwrap(),
        hex("00 00 00 10 01 00 01 70 00 00 00 01 00 00 00 00 00 00 00 02")
    );
    assert_eq!(encode_frame(&Message::ListStreams).unwrap(), hex("00 00 00 01 20"));
    let list = Message::StreamList {
        keys: vec!["p:0".into()],
    };
    assert_eq!(encode_frame(&list).unwrap(), hex("00 00 00 0A 21 00 00 00 01 00 03 70 3A 30"));
    let read = Message::ReadSince {
        stream_key: "p:0".into(),
        after_step: 5,
        max_records: 2,
    };
    assert_eq!(
        encode_frame(&read).unwrap(),
        hex("00 00 00 12 22 00 03 70 3A 30 00 00 00 00 00 00 00 05 00 00 00 02")
    );
    let batch = Message::RecordBatch {
        records: vec![WireRecord {
            step: 10,
            produced_at_ns: 1,
            values: vec![-2.0],
        }],
    };
    assert_eq!(
        encode_frame(&batch).unwrap(),
        hex("00 00 00 21 23 00 00 00 01 00 00 00 00 00 00 00 0A 00 00 00 00 00 00 00 01 00 00 00 01 00 00 00 00 00 00 00 C0")
    );
}

#[test]
fn ten_thousand_random_messages() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for i in 0..10_000 {
        let m = random_message(&mut rng);
        let bytes = encode_frame(&m).unwrap();
        assert_eq!(bytes, ref_encode(&to_ref(&m)), "message {i}: {m:?}");
        match decode_frame(&bytes).unwrap() {
            Decoded::Message(d, used) => {
                assert_eq!(used, bytes.len());
                assert_eq!(to_ref(&d), to_ref(&m), "message {i}");
            }
            Decoded::NeedMoreData => panic!("complete frame reported incomplete"),
        }
        assert_eq!(ref_decode(&bytes), Some((to_ref(&m), bytes.len())));
    }
}

fn arb_message() -> impl Strategy<Value = Message> {
    any::<u64>().prop_map(|seed| random_message(&mut ChaCha8Rng::seed_from_u64(seed)))
}

proptest! {
    #[test]
    fn any_split_points_yield_the_same_messages(
        msgs in prop::collection::vec(arb_message(), 1..8),
        cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..10),
    ) {
        let stream: Vec<u8> = msgs.iter().flat_map(|m| encode_frame(m).unwrap()).collect();
        let mut points: Vec<usize> = cuts.iter().map(|c| c.index(stream.len() + 1)).collect();
        points.push(0);
        points.push(stream.len());
        points.sort_unstable();
        let mut dec = FrameDecoder::new(DEFAULT_MAX_FRAME);
        let mut got = Vec::new();
        for w in points.windows(2) {
            dec.feed(&stream[w[0]..w[1]]);
            while let Some(m) = dec.next_message().unwrap() {
                got.push(to_ref(&m));
            }
        }
        prop_assert_eq!(got, msgs.iter().map(to_ref).collect::<Vec<_>>());
        prop_assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn every_strict_prefix_needs_more_data(m in arb_message()) {
        let bytes = encode_frame(&m).unwrap();
        for k in 0..bytes.len() {
            prop_assert!(matches!(decode_frame(&bytes[..k]), Ok(Decoded::NeedMoreData)));
        }
    }

    #[test]
    fn nan_and_inf_bits_survive(bits in prop::collection::vec(any::<u64>(), 0..64)) {
        let payload: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
        let m = Message::RecordBatch { records: vec![WireRecord { step: 1, produced_at_ns: 2, values: payload }] };
        let Decoded::Message(d, _) = decode_frame(&encode_frame(&m).unwrap()).unwrap() else { unreachable!() };
        let Message::RecordBatch { records } = d else { unreachable!() };
        let back: Vec<u64> = records[0].values.iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(back, bits);
    }

    #[test]
    fn reference_codec_agrees_on_garbage(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        // Whatever the main decoder accepts, the reference decodes identically.
        if let Ok(Decoded::Message(m, used)) = decode_frame(&bytes) {
            prop_assert_eq!(ref_decode(&bytes[..used]), Some((to_ref(&m), used)));
        }
    }
}

fn is_protocol_error<T: std::fmt::Debug>(r: Result<T, WireError>) -> bool {
    matches!(r, Err(WireError::Protocol(_)) | Err(WireError::FrameTooLarge { .. }))
}

#[test]
fn rejects_malformed_frames() {
    assert!(is_protocol_error(decode_frame(&hex("00 00 00 01 7F"))));
    assert!(is_protocol_error(decode_frame(&hex("00 00 00 00"))));
    // APPEND declaring 2 floats but carrying 1.
    let mut bad = hex("00 00 00 15 02 00 00 00 00 00 00 00 07 00 00 00 02 00 00 00 00 00 00 F0 3F");
    assert!(is_protocol_error(decode_frame(&bad)));
    // Trailing byte inside the frame.
    bad = hex("00 00 00 02 03 00");
    assert!(is_protocol_error(decode_frame(&bad)));
    assert!(is_protocol_error(decode_frame(&hex("00 00 00 04 10 02 00 00"))));
    // Oversize declared length is rejected before the body arrives.
    assert!(is_protocol_error(decode_frame_capped(&hex("00 00 01 00 02"), 64)));
    let big = Message::Append {
        step: 1,
        payload: vec![0.0; 16],
    };
    assert!(matches!(encode_frame_capped(&big, 64), Err(WireError::FrameTooLarge { .. })));
    assert!(matches!(
        encode_frame(&Message::Ack { ok: true, detail: "x".repeat(70_000) }),
        Err(WireError::StringTooLong { .. })
    ));
}
