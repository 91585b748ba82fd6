//! Frames exchanged between cluster members: a big-endian `u32` length
//! followed by one JSON message.

use std::io;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::scheduler::ServiceKind;

/// Frames larger than this are rejected as corrupt.
pub const MAX_FRAME: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        instance: String,
    },
    Lease {
        instance: String,
        fingerprint: String,
        /// Remaining lease lifetime in milliseconds.
        expiry: u64,
    },
    Budget {
        instance: String,
        fingerprint: String,
        service: ServiceKind,
        budgets: WireBudget,
        /// Epoch milliseconds of the observation.
        observed_at: u64,
    },
}

impl Message {
    pub fn instance(&self) -> &str {
        match self {
            Message::Hello { instance } | Message::Lease { instance, .. } | Message::Budget { instance, .. } => instance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireBudget {
    pub limit: u64,
    pub remaining: u64,
    /// Epoch seconds; absent when the reset time is unknown.
    pub reset: Option<u64>,
    pub limited: bool,
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("cluster messages always serialize");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decode one frame from the front of `buf`. Returns the message and the
/// number of bytes consumed, or `None` if the frame is incomplete.
pub fn decode(buf: &[u8]) -> io::Result<Option<(Message, usize)>> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]);
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let end = 4 + len as usize;
    if buf.len() < end {
        return Ok(None);
    }
    let msg = serde_json::from_slice(&buf[4..end]).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    Ok(Some((msg, end)))
}

pub async fn write_message<W: AsyncWrite + Unpin>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&encode(msg)).await
}

/// Read one message; `Ok(None)` on clean end of stream.
pub async fn read_message<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len);
    if n > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {n} bytes")));
    }
    let mut body = vec![0u8; n as usize];
    r.read_exact(&mut body).await?;
    serde_json::from_slice(&body).map(Some).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<Message> {
        vec![
            Message::Hello { instance: "a".into() },
            Message::Lease { instance: "a".into(), fingerprint: "00ff".into(), expiry: 15_000 },
            Message::Budget {
                instance: "b".into(),
                fingerprint: "00ff".into(),
                service: ServiceKind::Graphql,
                budgets: WireBudget { limit: 5000, remaining: 4990, reset: Some(1_700_000_000), limited: false },
                observed_at: 1_700_000_000_123,
            },
        ]
    }

    #[test]
    fn json_has_type_tag() {
        let v: serde_json::Value = serde_json::from_slice(&encode(&sample()[1])[4..]).unwrap();
        assert_eq!(v["type"], "lease");
        assert_eq!(v["fingerprint"], "00ff");
    }

    #[test]
    fn stream_of_frames_decodes_in_order() {
        let mut buf = Vec::new();
        for m in sample() {
            buf.extend(encode(&m));
        }
        let mut at = 0;
        let mut got = Vec::new();
        while let Some((m, used)) = decode(&buf[at..]).unwrap() {
            got.push(m);
            at += used;
        }
        assert_eq!(got, sample());
        assert_eq!(decode(&buf[..3]).unwrap(), None);
    }

    #[test]
    fn oversized_frame_rejected() {
        let buf = (MAX_FRAME + 1).to_be_bytes();
        assert!(decode(&buf).is_err());
    }

    #[tokio::test]
    async fn async_round_trip() {
        let (mut a, mut b) = tokio::io::duplex(1024);
        for m in sample() {
            write_message(&mut a, &m).await.unwrap();
        }
        drop(a);
        for m in sample() {
            assert_eq!(read_message(&mut b).await.unwrap(), Some(m));
        }
        assert_eq!(read_message(&mut b).await.unwrap(), None);
    }

    proptest! {
        #[test]
        fn round_trip(instance in "[a-z0-9:.]{1,20}", fp in "[0-9a-f]{16}", expiry in any::<u64>(),
                      remaining in 0u64..10_000, reset in proptest::option::of(any::<u32>())) {
            let msgs = [
                Message::Lease { instance: instance.clone(), fingerprint: fp.clone(), expiry },
                Message::Budget {
                    instance, fingerprint: fp, service: ServiceKind::Rest,
                    budgets: WireBudget { limit: 10_000, remaining, reset: reset.map(u64::from), limited: remaining == 0 },
                    observed_at: expiry / 2,
                },
            ];
            for m in msgs {
                let enc = encode(&m);
                prop_assert_eq!(decode(&enc).unwrap(), Some((m, enc.len())));
            }
        }
    }
}
