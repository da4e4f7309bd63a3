//! The `.mfvc` container: a fixed 31-byte header followed by one chunk per
//! frame. All integers are little-endian.
//!
//! ```text
//! header: "MFVC" | version u8 | width u32 | height u32 | frame_count u32 |
//!         gop_size u8 | rate_index u8 | latent_channels u16 |
//!         downsample_factor u8 | flags u8 | model_digest [8]
//! chunk:  frame_type u8 | z_len u32 | y_len u32 | z bytes | y bytes
//! ```

use crate::error::{Error, Result};
use crate::stem::StemFlags;

pub const MAGIC: &[u8; 4] = b"MFVC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 31;
pub const CHUNK_HEADER_LEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    Intra,
    Predicted,
}

impl FrameType {
    fn to_byte(self) -> u8 {
        match self {
            FrameType::Intra => b'I',
            FrameType::Predicted => b'P',
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            b'I' => Some(FrameType::Intra),
            b'P' => Some(FrameType::Predicted),
            _ => None,
        }
    }

    pub fn letter(self) -> char {
        self.to_byte() as char
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameChunk {
    pub frame_type: FrameType,
    pub z_stream: Vec<u8>,
    pub y_stream: Vec<u8>,
}

impl FrameChunk {
    pub fn encoded_len(&self) -> usize {
        CHUNK_HEADER_LEN + self.z_stream.len() + self.y_stream.len()
    }

    pub fn bits(&self) -> u64 {
        self.encoded_len() as u64 * 8
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.push(self.frame_type.to_byte());
        out.extend_from_slice(&(self.z_stream.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.y_stream.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_stream);
        out.extend_from_slice(&self.y_stream);
    }

    /// Parses one chunk from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < CHUNK_HEADER_LEN {
            return Err(Error::Corrupt(format!(
                "chunk header needs {CHUNK_HEADER_LEN} bytes, {} left",
                bytes.len()
            )));
        }
        let frame_type =
            FrameType::from_byte(bytes[0]).ok_or_else(|| Error::Corrupt(format!("unknown frame type byte {:#04x}", bytes[0])))?;
        let z_len = u32::from_le_bytes(bytes[1..5].try_into().expect("4 bytes")) as usize;
        let y_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let end = CHUNK_HEADER_LEN
            .checked_add(z_len)
            .and_then(|v| v.checked_add(y_len))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "chunk payload of {z_len} + {y_len} bytes exceeds the {} available",
                    bytes.len() - CHUNK_HEADER_LEN
                ))
            })?;
        let z_stream = bytes[CHUNK_HEADER_LEN..CHUNK_HEADER_LEN + z_len].to_vec();
        let y_stream = bytes[CHUNK_HEADER_LEN + z_len..end].to_vec();
        Ok((
            Self {
                frame_type,
                z_stream,
                y_stream,
            },
            end,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoHeader {
    pub version: u8,
    /// Frame size before padding.
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub gop_size: u8,
    pub rate_index: u8,
    pub latent_channels: u16,
    pub downsample_factor: u8,
    pub flags: StemFlags,
    pub model_digest: [u8; 8],
}

impl VideoHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(MAGIC);
        out[4] = self.version;
        out[5..9].copy_from_slice(&self.width.to_le_bytes());
        out[9..13].copy_from_slice(&self.height.to_le_bytes());
        out[13..17].copy_from_slice(&self.frame_count.to_le_bytes());
        out[17] = self.gop_size;
        out[18] = self.rate_index;
        out[19..21].copy_from_slice(&self.latent_channels.to_le_bytes());
        out[21] = self.downsample_factor;
        out[22] = self.flags.to_bits();
        out[23..31].copy_from_slice(&self.model_digest);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("header needs {HEADER_LEN} bytes, got {}", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not an MFVC stream (bad magic)".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported stream version {}", bytes[4])));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let flags = StemFlags::from_bits(bytes[22]).ok_or_else(|| Error::Format(format!("unknown flag bits {:#04x}", bytes[22])))?;
        let h = Self {
            version: bytes[4],
            width: u32_at(5),
            height: u32_at(9),
            frame_count: u32_at(13),
            gop_size: bytes[17],
            rate_index: bytes[18],
            latent_channels: u16::from_le_bytes([bytes[19], bytes[20]]),
            downsample_factor: bytes[21],
            flags,
            model_digest: bytes[23..31].try_into().expect("8 bytes"),
        };
        if h.gop_size == 0 {
            return Err(Error::Format("GOP size 0".into()));
        }
        if h.downsample_factor == 0 || h.width == 0 || h.height == 0 {
            return Err(Error::Format("zero frame dimension or downsampling factor".into()));
        }
        Ok(h)
    }

    /// Frame extents after edge padding to the downsampling multiple.
    pub fn padded_dims(&self) -> (usize, usize) {
        let f = self.downsample_factor as usize;
        (
            (self.height as usize).next_multiple_of(f),
            (self.width as usize).next_multiple_of(f),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoBitstream {
    pub header: VideoHeader,
    pub chunks: Vec<FrameChunk>,
}

impl VideoBitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&self.header.to_bytes());
        for c in &self.chunks {
            c.write_to(&mut out);
        }
        out
    }

    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.chunks.iter().map(FrameChunk::encoded_len).sum::<usize>()
    }

    /// Total stream size in bits, header included.
    pub fn total_bits(&self) -> u64 {
        self.byte_len() as u64 * 8
    }

    /// Parses a complete stream; every declared frame must be present.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let reader = ChunkReader::new(bytes)?;
        let header = reader.header().clone();
        let chunks = reader.collect::<Result<Vec<_>>>()?;
        Ok(Self { header, chunks })
    }
}

/// Streams chunks out of a serialized video one at a time. A malformed chunk
/// ends iteration with an error naming its frame index.
pub struct ChunkReader<'a> {
    header: VideoHeader,
    rest: &'a [u8],
    next: usize,
    failed: bool,
}

impl<'a> ChunkReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let header = VideoHeader::parse(bytes)?;
        Ok(Self {
            header,
            rest: &bytes[HEADER_LEN..],
            next: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &VideoHeader {
        &self.header
    }
}

impl Iterator for ChunkReader<'_> {
    type Item = Result<FrameChunk>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next >= self.header.frame_count as usize {
            return None;
        }
        let index = self.next;
        self.next += 1;
        match FrameChunk::parse(self.rest) {
            Ok((chunk, used)) => {
                self.rest = &self.rest[used..];
                Some(Ok(chunk))
            }
            Err(e) => {
                self.failed = true;
                Some(Err(Error::Frame {
                    index,
                    source: Box::new(e),
                }))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> VideoHeader {
        VideoHeader {
            version: VERSION,
            width: 70,
            height: 33,
            frame_count: 2,
            gop_size: 12,
            rate_index: 1,
            latent_channels: 32,
            downsample_factor: 4,
            flags: StemFlags {
                use_spm: true,
                use_tpm: false,
                use_residual: true,
            },
            model_digest: [1, 2, 3, 4, 5, 6, 7, 8],
        }
    }

    fn stream() -> VideoBitstream {
        VideoBitstream {
            header: header(),
            chunks: vec![
                FrameChunk {
                    frame_type: FrameType::Intra,
                    z_stream: vec![9; 5],
                    y_stream: vec![7; 40],
                },
                FrameChunk {
                    frame_type: FrameType::Predicted,
                    z_stream: vec![],
                    y_stream: vec![1, 2, 3],
                },
            ],
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let b = header().to_bytes();
        assert_eq!(b.len(), 31);
        assert_eq!(&b[..4], b"MFVC");
        assert_eq!(u32::from_le_bytes(b[5..9].try_into().unwrap()), 70);
        assert_eq!(b[17], 12);
        assert_eq!(u16::from_le_bytes([b[19], b[20]]), 32);
        assert_eq!(VideoHeader::parse(&b).unwrap(), header());
        assert_eq!(header().padded_dims(), (36, 72));
    }

    #[test]
    fn stream_roundtrip_and_bit_accounting() {
        let s = stream();
        let bytes = s.to_bytes();
        assert_eq!(s.total_bits(), bytes.len() as u64 * 8);
        assert_eq!(bytes.len(), HEADER_LEN + (9 + 45) + (9 + 3));
        assert_eq!(VideoBitstream::parse(&bytes).unwrap(), s);
    }

    #[test]
    fn truncation_reports_the_failing_frame() {
        let bytes = stream().to_bytes();
        let cut = &bytes[..bytes.len() - 1];
        let mut r = ChunkReader::new(cut).unwrap();
        assert!(r.next().unwrap().is_ok());
        match r.next().unwrap() {
            Err(Error::Frame { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        assert!(r.next().is_none());
        assert!(VideoHeader::parse(&bytes[..30]).is_err());
    }

    #[test]
    fn bad_bytes_are_rejected() {
        let mut b = stream().to_bytes();
        b[HEADER_LEN] = b'X';
        assert!(VideoBitstream::parse(&b).is_err());
        let mut b = stream().to_bytes();
        b[22] = 0xF0;
        assert!(VideoBitstream::parse(&b).is_err());
    }
}
