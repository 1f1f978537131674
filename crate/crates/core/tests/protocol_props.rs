use proptest::prelude::*;
use serde_json::{json, Value};
use volunteer_core::protocol::{
    self, AckStatus, ClientMessage, CodecConfig, OverheadConfig, ServerMessage, TaskSnapshot,
};
use volunteer_core::{CheckpointRecord, Payload, SessionId, TaskId, Transport};

fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<i64>().prop_map(Value::from),
        any::<u32>().prop_map(|n| json!(n)),
        (-1e6f64..1e6).prop_map(|x| json!(x)),
        "[a-z]{0,12}".prop_map(Value::from),
        prop::collection::vec(0u32..1001, 0..300).prop_map(|v| json!(v)),
        any::<bool>().prop_map(Value::from),
    ]
}

fn payload() -> impl Strategy<Value = Payload> {
    prop::collection::btree_map("[a-z_]{1,8}", value(), 0..6).prop_map(|m| m.into_iter().collect())
}

fn client_message() -> impl Strategy<Value = ClientMessage> {
    prop_oneof![
        ".{0,30}".prop_map(|client_info| ClientMessage::Hello { client_info }),
        (1u32..1000).prop_map(|count| ClientMessage::RequestTasks { count }),
        (any::<u64>(), 1u64..1000, any::<u64>(), payload()).prop_map(|(t, sequence, progress_units, partial_payload)| {
            ClientMessage::Partial { task_id: TaskId(t), sequence, progress_units, partial_payload }
        }),
        (any::<u64>(), 1u64..1000, payload()).prop_map(|(t, sequence, payload)| ClientMessage::Final {
            task_id: TaskId(t),
            sequence,
            payload
        }),
    ]
}

fn server_message() -> impl Strategy<Value = ServerMessage> {
    let snapshot = (any::<u64>(), payload(), prop::option::of((1u64..100, payload(), any::<u64>()))).prop_map(
        |(id, payload, cp)| TaskSnapshot {
            task_id: TaskId(id),
            kernel_id: "monte-carlo".into(),
            payload,
            checkpoint: cp.map(|(sequence, partial_payload, progress_units)| CheckpointRecord {
                sequence,
                partial_payload,
                progress_units,
            }),
        },
    );
    prop_oneof![
        any::<u64>().prop_map(|s| ServerMessage::Welcome { session_id: SessionId(s) }),
        prop::collection::vec(snapshot, 0..5).prop_map(|tasks| ServerMessage::Tasks { tasks }),
        (any::<u64>(), prop_oneof![
            Just(AckStatus::Applied),
            Just(AckStatus::Stale),
            Just(AckStatus::AlreadyComplete),
            Just(AckStatus::Accepted),
            Just(AckStatus::Duplicate)
        ])
            .prop_map(|(t, status)| ServerMessage::Ack { task_id: TaskId(t), status }),
        Just(ServerMessage::Drained),
        ".{0,20}".prop_map(|message| ServerMessage::Error { message }),
    ]
}

fn codec() -> impl Strategy<Value = CodecConfig> {
    (any::<bool>(), 0usize..2000).prop_map(|(compress, threshold)| CodecConfig { compress, threshold })
}

proptest! {
    #[test]
    fn client_messages_round_trip(msg in client_message(), codec in codec()) {
        let bytes = protocol::encode(&msg, &codec);
        prop_assert_eq!(protocol::decode::<ClientMessage>(&bytes).unwrap(), msg);
    }

    #[test]
    fn server_messages_round_trip(msg in server_message(), codec in codec()) {
        let bytes = protocol::encode(&msg, &codec);
        prop_assert_eq!(protocol::decode::<ServerMessage>(&bytes).unwrap(), msg);
    }

    #[test]
    fn compression_never_grows_the_body(msg in client_message(), codec in codec()) {
        let plain = serde_json::to_vec(&msg).unwrap();
        let bytes = protocol::encode(&msg, &codec);
        prop_assert!(bytes.len() <= plain.len());
        if !codec.compress || plain.len() <= codec.threshold {
            prop_assert_eq!(bytes, plain);
        }
    }

    #[test]
    fn truncation_is_rejected(msg in client_message(), cut in 1usize..40) {
        let bytes = protocol::encode(&msg, &CodecConfig { compress: false, threshold: 0 });
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(protocol::decode::<ClientMessage>(&bytes[..keep]).is_err());
    }

    #[test]
    fn stream_framing_is_cheaper(msg in client_message()) {
        let o = OverheadConfig::default();
        let c = CodecConfig::default();
        prop_assert!(
            protocol::message_cost(&msg, Transport::Stream, &c, &o)
                < protocol::message_cost(&msg, Transport::RequestResponse, &c, &o)
        );
    }
}
