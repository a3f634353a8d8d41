mod common;

use common::wire::message;
use proptest::prelude::*;
use splitfed::transport::{decode_message, encode_message, Message, TransportError};
use splitfed::TensorData;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1200))]

    #[test]
    fn f32_messages_round_trip(msg in message::<f32>()) {
        let bytes = encode_message(&msg).unwrap();
        let (back, used) = decode_message::<f32>(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn prefixes_ask_for_more(msg in message::<f32>(), cut in 0.0f64..1.0) {
        let bytes = encode_message(&msg).unwrap();
        let k = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(k < bytes.len());
        let is_need_more = matches!(decode_message::<f32>(&bytes[..k]), Err(TransportError::NeedMoreData { .. }));
        prop_assert!(is_need_more);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn f64_messages_round_trip_back_to_back(a in message::<f64>(), b in message::<f64>()) {
        let mut bytes = encode_message(&a).unwrap();
        let first = bytes.len();
        bytes.extend(encode_message(&b).unwrap());
        let (da, used) = decode_message::<f64>(&bytes).unwrap();
        prop_assert_eq!(used, first);
        let (db, rest) = decode_message::<f64>(&bytes[used..]).unwrap();
        prop_assert_eq!(used + rest, bytes.len());
        prop_assert_eq!((da, db), (a, b));
    }
}

#[test]
fn wrong_dtype_is_refused() {
    let msg = Message::<f64>::global(1, 2, vec![("w".into(), TensorData { shape: vec![1], data: vec![0.5] })]);
    let bytes = encode_message(&msg).unwrap();
    assert!(matches!(decode_message::<f32>(&bytes), Err(TransportError::Protocol(_))));
}
