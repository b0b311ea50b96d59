//! Incremental frame extraction from a byte stream.

use bytes::{Bytes, BytesMut};
use tokio::io::{AsyncRead, AsyncReadExt};

use crate::codec::{self, CodecError, ControlPacket, Decoded};

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct FrameReader<R> {
    io: R,
    buf: BytesMut,
    limit: usize,
}

impl<R: AsyncRead + Unpin> FrameReader<R> {
    pub fn new(io: R, limit: usize) -> Self {
        Self {
            io,
            buf: BytesMut::with_capacity(8 * 1024),
            limit,
        }
    }

    /// Next complete raw frame, or `None` on clean end of stream.
    /// Cancel-safe: partial reads stay buffered.
    pub async fn next_frame(&mut self) -> Result<Option<Bytes>, FrameError> {
        loop {
            if let Some((_, total)) = codec::frame_length(&self.buf, self.limit)? {
                if self.buf.len() >= total {
                    return Ok(Some(self.buf.split_to(total).freeze()));
                }
                self.buf.reserve(total - self.buf.len());
            }
            if self.io.read_buf(&mut self.buf).await? == 0 {
                if self.buf.is_empty() {
                    return Ok(None);
                }
                return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into());
            }
        }
    }

    pub async fn next_packet(&mut self) -> Result<Option<ControlPacket>, FrameError> {
        match self.next_frame().await? {
            None => Ok(None),
            Some(frame) => Ok(Some(decode_frame(&frame)?)),
        }
    }
}

pub fn decode_frame(frame: &[u8]) -> Result<ControlPacket, CodecError> {
    match codec::decode(frame)? {
        Decoded::Complete { packet, .. } => Ok(packet),
        Decoded::Incomplete { .. } => Err(CodecError::MalformedPacket("incomplete frame")),
    }
}
