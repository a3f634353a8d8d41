//! Typed payloads on top of [`Frame`].

use super::{decode_frame, encode_frame, protocol, Frame, Result, Tag};
use crate::scalar::Scalar;
use crate::tensor::TensorData;

pub type NamedTensors<T> = Vec<(String, TensorData<T>)>;

#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    /// First message from a client: its training-sample count.
    Hello { samples: u64 },
    /// Switches the server replica between training and evaluation passes.
    SetMode { train: bool },
    EndRound,
    Shutdown,
    Ack,
    Error(String),
    /// A client's end-of-round summary; NaN marks a missing value.
    Stats { train_loss: f64, val_loss: f64, val_iou: f64 },
}

impl Control {
    fn code(&self) -> u8 {
        match self {
            Control::Hello { .. } => 1,
            Control::SetMode { .. } => 2,
            Control::EndRound => 3,
            Control::Shutdown => 4,
            Control::Ack => 5,
            Control::Error(_) => 6,
            Control::Stats { .. } => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body<T> {
    /// Activations or gradients crossing a cut, in cut order.
    Tensors(Vec<TensorData<T>>),
    Weights { sample_count: u64, entries: NamedTensors<T> },
    Global(NamedTensors<T>),
    Control(Control),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message<T> {
    pub tag: Tag,
    pub round: u16,
    pub client: u16,
    pub batch: u32,
    pub body: Body<T>,
}

impl<T: Scalar> Message<T> {
    pub fn tensors(tag: Tag, round: u16, client: u16, batch: u32, tensors: Vec<TensorData<T>>) -> Self {
        debug_assert!(tag.carries_tensor_list());
        Self { tag, round, client, batch, body: Body::Tensors(tensors) }
    }

    pub fn weights(round: u16, client: u16, sample_count: u64, entries: NamedTensors<T>) -> Self {
        Self { tag: Tag::WeightsUpload, round, client, batch: 0, body: Body::Weights { sample_count, entries } }
    }

    pub fn global(round: u16, client: u16, entries: NamedTensors<T>) -> Self {
        Self { tag: Tag::GlobalWeights, round, client, batch: 0, body: Body::Global(entries) }
    }

    pub fn control(round: u16, client: u16, control: Control) -> Self {
        Self { tag: Tag::Control, round, client, batch: 0, body: Body::Control(control) }
    }

    /// Raw tensor element bytes carried, excluding headers and metadata.
    pub fn tensor_bytes(&self) -> usize {
        match &self.body {
            Body::Tensors(ts) => ts.iter().map(TensorData::byte_len).sum(),
            Body::Weights { entries, .. } | Body::Global(entries) => entries.iter().map(|(_, t)| t.byte_len()).sum(),
            Body::Control(_) => 0,
        }
    }

    pub fn into_tensors(self) -> Result<Vec<TensorData<T>>> {
        match self.body {
            Body::Tensors(ts) => Ok(ts),
            other => Err(protocol(format!("expected a tensor list for {:?}, got {}", self.tag, body_kind(&other)))),
        }
    }
}

fn body_kind<T>(b: &Body<T>) -> &'static str {
    match b {
        Body::Tensors(_) => "tensor list",
        Body::Weights { .. } => "weights upload",
        Body::Global(_) => "global weights",
        Body::Control(_) => "control message",
    }
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &TensorData<T>) -> Result<()> {
    let ndim = u8::try_from(t.shape.len()).map_err(|_| protocol("tensor rank exceeds 255"))?;
    out.push(T::DTYPE.code());
    out.push(ndim);
    for &d in &t.shape {
        let d = u32::try_from(d).map_err(|_| protocol(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.byte_len());
    for &v in &t.data {
        v.write_le(out);
    }
    Ok(())
}

fn put_named<T: Scalar>(out: &mut Vec<u8>, entries: &NamedTensors<T>) -> Result<()> {
    let k = u32::try_from(entries.len()).map_err(|_| protocol("too many entries"))?;
    out.extend_from_slice(&k.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| protocol(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_tensor(out, t)?;
    }
    Ok(())
}

fn encode_body<T: Scalar>(tag: Tag, body: &Body<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match (tag, body) {
        (t, Body::Tensors(ts)) if t.carries_tensor_list() => {
            let n = u16::try_from(ts.len()).map_err(|_| protocol("too many tensors"))?;
            out.extend_from_slice(&n.to_le_bytes());
            for t in ts {
                put_tensor(&mut out, t)?;
            }
        }
        (Tag::WeightsUpload, Body::Weights { sample_count, entries }) => {
            out.extend_from_slice(&sample_count.to_le_bytes());
            put_named(&mut out, entries)?;
        }
        (Tag::GlobalWeights, Body::Global(entries)) => put_named(&mut out, entries)?,
        (Tag::Control, Body::Control(c)) => {
            out.push(c.code());
            match c {
                Control::Hello { samples } => out.extend_from_slice(&samples.to_le_bytes()),
                Control::SetMode { train } => out.push(*train as u8),
                Control::Error(msg) => {
                    out.extend_from_slice(&(msg.len() as u32).to_le_bytes());
                    out.extend_from_slice(msg.as_bytes());
                }
                Control::Stats { train_loss, val_loss, val_iou } => {
                    for v in [train_loss, val_loss, val_iou] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Control::EndRound | Control::Shutdown | Control::Ack => {}
            }
        }
        (tag, body) => return Err(protocol(format!("tag {tag:?} cannot carry a {}", body_kind(body)))),
    }
    Ok(out)
}

pub fn encode_message<T: Scalar>(msg: &Message<T>) -> Result<Vec<u8>> {
    let payload = encode_body(msg.tag, &msg.body)?;
    encode_frame(&Frame { tag: msg.tag, round: msg.round, client: msg.client, batch: msg.batch, payload })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(protocol(format!("payload truncated: wanted {n} bytes at offset {}, {} left", self.pos, self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| protocol("name is not valid UTF-8"))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<TensorData<T>> {
        let code = self.u8()?;
        if code != T::DTYPE.code() {
            return Err(protocol(format!("dtype code {code} does not match the receiver's {:?}", T::DTYPE)));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = self.u32()? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| protocol("tensor size overflows"))?;
            shape.push(d);
        }
        let bytes = numel.checked_mul(T::DTYPE.size()).ok_or_else(|| protocol("tensor size overflows"))?;
        let raw = self.take(bytes)?;
        let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Ok(TensorData { shape, data })
    }

    fn named<T: Scalar>(&mut self) -> Result<NamedTensors<T>> {
        let k = self.u32()? as usize;
        let mut out = Vec::with_capacity(k.min(4096));
        for _ in 0..k {
            let len = self.u16()? as usize;
            let name = self.string(len)?;
            out.push((name, self.tensor()?));
        }
        Ok(out)
    }
}

fn decode_body<T: Scalar>(tag: Tag, payload: &[u8]) -> Result<Body<T>> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let body = match tag {
        Tag::Activation | Tag::ServerOutput | Tag::OutputGrad | Tag::ActivationGrad => {
            let n = c.u16()? as usize;
            let ts = (0..n).map(|_| c.tensor()).collect::<Result<_>>()?;
            Body::Tensors(ts)
        }
        Tag::WeightsUpload => {
            let sample_count = c.u64()?;
            Body::Weights { sample_count, entries: c.named()? }
        }
        Tag::GlobalWeights => Body::Global(c.named()?),
        Tag::Control => Body::Control(match c.u8()? {
            1 => Control::Hello { samples: c.u64()? },
            2 => Control::SetMode {
                train: match c.u8()? {
                    0 => false,
                    1 => true,
                    b => return Err(protocol(format!("invalid mode flag {b}"))),
                },
            },
            3 => Control::EndRound,
            4 => Control::Shutdown,
            5 => Control::Ack,
            6 => {
                let len = c.u32()? as usize;
                Control::Error(c.string(len)?)
            }
            7 => Control::Stats { train_loss: c.f64()?, val_loss: c.f64()?, val_iou: c.f64()? },
            code => return Err(protocol(format!("unknown control code {code}"))),
        }),
    };
    if c.pos != payload.len() {
        return Err(protocol(format!("{} trailing bytes after {tag:?} payload", payload.len() - c.pos)));
    }
    Ok(body)
}

pub(crate) fn message_from_frame<T: Scalar>(f: Frame) -> Result<Message<T>> {
    let body = decode_body(f.tag, &f.payload)?;
    Ok(Message { tag: f.tag, round: f.round, client: f.client, batch: f.batch, body })
}

/// Decodes one message from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_message<T: Scalar>(bytes: &[u8]) -> Result<(Message<T>, usize)> {
    let (frame, used) = decode_frame(bytes)?;
    Ok((message_from_frame(frame)?, used))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::TransportError;

    fn td(shape: &[usize], start: f32) -> TensorData<f32> {
        let n = shape.iter().product();
        TensorData::new(shape.to_vec(), (0..n).map(|i| start + i as f32).collect()).unwrap()
    }

    #[test]
    fn tensor_list_layout() {
        let m = Message::tensors(Tag::Activation, 1, 2, 3, vec![td(&[2, 1], 0.5)]);
        let b = encode_message(&m).unwrap();
        // count, dtype, ndim, 2 dims, 2 floats
        assert_eq!(b.len(), 16 + 2 + 2 + 8 + 8);
        assert_eq!(&b[16..20], &[1, 0, 0, 2]);
        assert_eq!(&b[28..32], &0.5f32.to_le_bytes());
        assert_eq!(m.tensor_bytes(), 8);
        assert_eq!(decode_message::<f32>(&b).unwrap(), (m, b.len()));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let m = Message::tensors(Tag::OutputGrad, 0, 0, 0, vec![td(&[3], 1.0)]);
        let b = encode_message(&m).unwrap();
        assert!(matches!(decode_message::<f64>(&b), Err(TransportError::Protocol(_))));
    }

    #[test]
    fn all_bodies_round_trip() {
        let entries = vec![("enc0/conv1/weight".to_string(), td(&[2, 2], 0.0)), ("b".to_string(), td(&[], 7.0))];
        let msgs = vec![
            Message::weights(4, 1, 170, entries.clone()),
            Message::global(4, 1, entries),
            Message::control(0, 3, Control::Hello { samples: 9 }),
            Message::control(0, 3, Control::SetMode { train: false }),
            Message::control(0, 3, Control::Error("boom".into())),
            Message::control(0, 3, Control::Shutdown),
            Message::control(1, 3, Control::Stats { train_loss: 0.25, val_loss: -0.0, val_iou: 1e-300 }),
            Message::tensors(Tag::ActivationGrad, 0, 0, 0, vec![]),
        ];
        for m in msgs {
            let b = encode_message(&m).unwrap();
            assert_eq!(decode_message::<f32>(&b).unwrap().0, m);
        }
    }

    #[test]
    fn trailing_and_truncated_payloads() {
        let m = Message::<f32>::control(0, 0, Control::Ack);
        let mut b = encode_message(&m).unwrap();
        b.push(0);
        b[12] += 1;
        assert!(matches!(decode_message::<f32>(&b), Err(TransportError::Protocol(e)) if e.contains("trailing")));
        let m = Message::tensors(Tag::Activation, 0, 0, 0, vec![td(&[4], 0.0)]);
        let mut b = encode_message(&m).unwrap();
        b.truncate(b.len() - 4);
        b[12] -= 4;
        assert!(matches!(decode_message::<f32>(&b), Err(TransportError::Protocol(_))));
    }

    #[test]
    fn mismatched_body_is_refused() {
        let m = Message::<f32> { tag: Tag::Control, round: 0, client: 0, batch: 0, body: Body::Tensors(vec![]) };
        assert!(encode_message(&m).is_err());
    }
}
