//! Random protocol messages for property checks.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use splitfed::transport::{decode_message, encode_message, Body, Control, Message};
use splitfed::{Scalar, TensorData};

pub fn tensor<T: Scalar + Arbitrary>() -> impl Strategy<Value = TensorData<T>> {
    prop::collection::vec(0usize..4, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<T>().prop_filter("finite", |v| v.is_finite()), n).prop_map(move |data| TensorData { shape: shape.clone(), data })
    })
}

pub fn named<T: Scalar + Arbitrary>() -> impl Strategy<Value = Vec<(String, TensorData<T>)>> {
    prop::collection::vec(("[a-z][a-z0-9_.]{0,12}", tensor::<T>()), 0..4)
}

pub fn control() -> impl Strategy<Value = Control> {
    prop_oneof![
        any::<u64>().prop_map(|samples| Control::Hello { samples }),
        any::<bool>().prop_map(|train| Control::SetMode { train }),
        Just(Control::EndRound),
        Just(Control::Shutdown),
        Just(Control::Ack),
        "\\PC{0,24}".prop_map(Control::Error),
        (-1e6f64..1e6, -1e6f64..1e6, 0f64..1.0).prop_map(|(a, b, c)| Control::Stats { train_loss: a, val_loss: b, val_iou: c }),
    ]
}

pub fn message<T: Scalar + Arbitrary>() -> impl Strategy<Value = Message<T>> {
    use splitfed::transport::Tag;
    let tensor_tag = prop_oneof![Just(Tag::Activation), Just(Tag::ServerOutput), Just(Tag::OutputGrad), Just(Tag::ActivationGrad)];
    let body = prop_oneof![
        (tensor_tag, prop::collection::vec(tensor::<T>(), 0..4)).prop_map(|(tag, ts)| (tag, Body::Tensors(ts))),
        (any::<u64>(), named::<T>()).prop_map(|(sample_count, entries)| (Tag::WeightsUpload, Body::Weights { sample_count, entries })),
        named::<T>().prop_map(|e| (Tag::GlobalWeights, Body::Global(e))),
        control().prop_map(|c| (Tag::Control, Body::Control(c))),
    ];
    (body, any::<u16>(), any::<u16>(), any::<u32>()).prop_map(|((tag, body), round, client, batch)| {
        let batch = if tag.carries_tensor_list() { batch } else { 0 };
        Message { tag, round, client, batch, body }
    })
}

/// Encodes and decodes `cases` random f32 messages through a proptest runner.
pub fn round_trips(cases: u32) -> Result<u32, String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner
        .run(&message::<f32>(), |msg| {
            let bytes = encode_message(&msg).unwrap();
            let (back, used) = decode_message::<f32>(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, msg);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(cases)
}
