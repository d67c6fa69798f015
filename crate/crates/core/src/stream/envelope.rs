use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

/// Bytes of framing in front of every payload.
pub const HEADER_BYTES: usize = 4 + 4 + 8 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeKind {
    Data,
    Terminate,
}

/// Wire unit of a stream: one element or a termination marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub stream_id: u32,
    pub producer_rank: u32,
    pub seq_no: u64,
    pub kind: EnvelopeKind,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn encode(&self) -> Vec<u8> {
        encode_parts(self.stream_id, self.producer_rank, self.seq_no, self.kind, &self.payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Envelope> {
        let (stream_id, producer_rank, seq_no, kind, payload) = decode_parts(bytes)?;
        Ok(Envelope {
            stream_id,
            producer_rank,
            seq_no,
            kind,
            payload: payload.to_vec(),
        })
    }
}

pub(crate) fn encode_parts(stream_id: u32, producer: u32, seq_no: u64, kind: EnvelopeKind, payload: &[u8]) -> Vec<u8> {
    let mut w = Writer::with_capacity(HEADER_BYTES + payload.len());
    w.u32(stream_id).u32(producer).u64(seq_no).u8(match kind {
        EnvelopeKind::Data => 0,
        EnvelopeKind::Terminate => 1,
    });
    w.raw(payload);
    w.finish()
}

pub(crate) fn decode_parts(bytes: &[u8]) -> Result<(u32, u32, u64, EnvelopeKind, &[u8])> {
    let mut r = Reader::new(bytes);
    let stream_id = r.u32()?;
    let producer = r.u32()?;
    let seq_no = r.u64()?;
    let kind = match r.u8()? {
        0 => EnvelopeKind::Data,
        1 => EnvelopeKind::Terminate,
        k => return Err(Error::protocol(format!("unknown envelope kind {k}"))),
    };
    let payload = r.rest();
    if kind == EnvelopeKind::Terminate && !payload.is_empty() {
        return Err(Error::protocol("terminate envelope carries a payload"));
    }
    Ok((stream_id, producer, seq_no, kind, payload))
}
