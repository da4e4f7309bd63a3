//! GOP orchestration: every frame is analysed by the same auto-encoder, GOP
//! heads are coded intra, and every other frame is coded against the previous
//! frame's integer latent.

use crate::codec::{code_iframe_latent, decode_iframe_latent, encode_latent, synthesize, AutoencoderWeights, RateIndex};
use crate::error::{Error, Result};
use crate::stem::{decode_pframe, encode_pframe, StemFlags, StemWeights};
use crate::tensor::LatentPlane;
use crate::weights::{digest_hex, model_digest};

use super::{ChunkReader, FrameChunk, FrameType, RgbFrame, VideoBitstream, VideoHeader, VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GopConfig {
    pub gop_size: usize,
    pub rate_index: usize,
    pub flags: StemFlags,
}

impl GopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gop_size == 0 || self.gop_size > u8::MAX as usize {
            return Err(Error::Config(format!("GOP size must be in 1..=255, got {}", self.gop_size)));
        }
        Ok(())
    }
}

pub fn gop_schedule(frame_count: usize, gop_size: usize) -> Vec<FrameType> {
    (0..frame_count)
        .map(|t| {
            if t % gop_size.max(1) == 0 {
                FrameType::Intra
            } else {
                FrameType::Predicted
            }
        })
        .collect()
}

/// Digest binding a stream to the weights that produced it.
pub fn weights_digest(ae: &AutoencoderWeights, stem: &StemWeights) -> [u8; 8] {
    model_digest(&[&ae.to_named(), &stem.to_named()])
}

/// Integer latents of each frame after edge padding.
pub fn frame_latents(frames: &[RgbFrame], ae: &AutoencoderWeights, rate: RateIndex) -> Result<Vec<LatentPlane>> {
    let f = ae.config.downsample_factor();
    let Some(first) = frames.first() else {
        return Err(Error::Config("no frames to code".into()));
    };
    frames
        .iter()
        .enumerate()
        .map(|(index, fr)| {
            if (fr.width(), fr.height()) != (first.width(), first.height()) {
                return Err(Error::Frame {
                    index,
                    source: Box::new(Error::Config(format!(
                        "frame is {}×{}, expected {}×{}",
                        fr.width(),
                        fr.height(),
                        first.width(),
                        first.height()
                    ))),
                });
            }
            encode_latent(&fr.pad_edge(f).to_tensor(), rate, ae)
        })
        .collect()
}

/// Entropy-codes a latent sequence under the GOP structure.
pub fn code_latents(latents: &[LatentPlane], ae: &AutoencoderWeights, stem: &StemWeights, cfg: &GopConfig) -> Result<Vec<FrameChunk>> {
    cfg.validate()?;
    let schedule = gop_schedule(latents.len(), cfg.gop_size);
    let mut chunks = Vec::with_capacity(latents.len());
    for (t, (latent, kind)) in latents.iter().zip(schedule).enumerate() {
        let chunk = match kind {
            FrameType::Intra => code_iframe_latent(latent, ae),
            FrameType::Predicted => encode_pframe(latent, &latents[t - 1], cfg.flags, stem),
        }
        .map_err(|e| Error::Frame {
            index: t,
            source: Box::new(e),
        })?;
        chunks.push(chunk);
    }
    Ok(chunks)
}

pub fn compress_video(frames: &[RgbFrame], ae: &AutoencoderWeights, stem: &StemWeights, cfg: &GopConfig) -> Result<VideoBitstream> {
    cfg.validate()?;
    let rate = ae.rate(cfg.rate_index)?;
    let latents = frame_latents(frames, ae, rate)?;
    let chunks = code_latents(&latents, ae, stem, cfg)?;
    let header = VideoHeader {
        version: VERSION,
        width: frames[0].width() as u32,
        height: frames[0].height() as u32,
        frame_count: frames.len() as u32,
        gop_size: cfg.gop_size as u8,
        rate_index: cfg.rate_index as u8,
        latent_channels: ae.config.latent_channels as u16,
        downsample_factor: ae.config.downsample_factor() as u8,
        flags: cfg.flags,
        model_digest: weights_digest(ae, stem),
    };
    Ok(VideoBitstream { header, chunks })
}

/// One decoded frame with its lossless latent.
#[derive(Clone, Debug)]
pub struct DecodedFrame {
    pub frame_type: FrameType,
    pub latent: LatentPlane,
    pub frame: RgbFrame,
}

/// Frame-at-a-time decoder over a serialized stream.
pub struct VideoDecoder<'a> {
    reader: ChunkReader<'a>,
    ae: &'a AutoencoderWeights,
    stem: &'a StemWeights,
    rate: RateIndex,
    previous: Option<LatentPlane>,
    index: usize,
    failed: bool,
}

impl<'a> VideoDecoder<'a> {
    /// Checks the header against the weights before any chunk is read.
    pub fn new(bytes: &'a [u8], ae: &'a AutoencoderWeights, stem: &'a StemWeights) -> Result<Self> {
        let reader = ChunkReader::new(bytes)?;
        let h = reader.header();
        let digest = weights_digest(ae, stem);
        if h.model_digest != digest {
            return Err(Error::DigestMismatch {
                expected: digest_hex(&h.model_digest),
                found: digest_hex(&digest),
            });
        }
        if h.latent_channels as usize != ae.config.latent_channels || h.downsample_factor as usize != ae.config.downsample_factor() {
            return Err(Error::Format("stream latent geometry does not match the weights".into()));
        }
        let rate = ae.rate(h.rate_index as usize)?;
        Ok(Self {
            reader,
            ae,
            stem,
            rate,
            previous: None,
            index: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &VideoHeader {
        self.reader.header()
    }

    fn decode_chunk(&mut self, chunk: FrameChunk) -> Result<DecodedFrame> {
        let h = self.reader.header().clone();
        let expected = gop_schedule(self.index + 1, h.gop_size as usize)[self.index];
        if chunk.frame_type != expected {
            return Err(Error::Corrupt(format!("expected a {} chunk", expected.letter())));
        }
        let (ph, pw) = h.padded_dims();
        let latent = match (chunk.frame_type, &self.previous) {
            (FrameType::Intra, _) => decode_iframe_latent(&chunk, self.ae, ph, pw)?,
            (FrameType::Predicted, Some(prev)) => decode_pframe(&chunk, prev, h.flags, self.stem)?,
            (FrameType::Predicted, None) => return Err(Error::Corrupt("predicted chunk without a reference".into())),
        };
        let frame = RgbFrame::from_tensor(&synthesize(&latent, self.rate, self.ae)?)?.crop(h.width as usize, h.height as usize)?;
        self.previous = Some(latent.clone());
        Ok(DecodedFrame {
            frame_type: chunk.frame_type,
            latent,
            frame,
        })
    }
}

impl Iterator for VideoDecoder<'_> {
    type Item = Result<DecodedFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let chunk = match self.reader.next()? {
            Ok(c) => c,
            Err(e) => {
                self.failed = true;
                return Some(Err(e));
            }
        };
        let index = self.index;
        let out = self.decode_chunk(chunk).map_err(|e| Error::Frame {
            index,
            source: Box::new(e),
        });
        self.index += 1;
        self.failed = out.is_err();
        Some(out)
    }
}

pub fn decompress_video(bytes: &[u8], ae: &AutoencoderWeights, stem: &StemWeights) -> Result<Vec<RgbFrame>> {
    VideoDecoder::new(bytes, ae, stem)?.map(|r| r.map(|d| d.frame)).collect()
}

/// Reconstruction of a single frame coded on its own as an intra frame.
pub fn standalone_reconstruction(frame: &RgbFrame, ae: &AutoencoderWeights, rate: RateIndex) -> Result<RgbFrame> {
    let f = ae.config.downsample_factor();
    let padded = frame.pad_edge(f);
    let latent = encode_latent(&padded.to_tensor(), rate, ae)?;
    let chunk = code_iframe_latent(&latent, ae)?;
    let decoded = decode_iframe_latent(&chunk, ae, padded.height(), padded.width())?;
    RgbFrame::from_tensor(&synthesize(&decoded, rate, ae)?)?.crop(frame.width(), frame.height())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ModelConfig;
    use crate::video::{synth_sequence, SequenceKind};

    fn models() -> (AutoencoderWeights, StemWeights) {
        let ae = AutoencoderWeights::init(ModelConfig::new(4, 6, 2, vec![1.0, 4.0]), 1).unwrap();
        let stem = StemWeights::init(4, 2).unwrap();
        (ae, stem)
    }

    #[test]
    fn schedule_places_intra_frames_at_gop_heads() {
        let s = gop_schedule(25, 10);
        let heads: Vec<_> = s
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == FrameType::Intra)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(heads, [0, 10, 20]);
        assert!(gop_schedule(5, 1).iter().all(|t| *t == FrameType::Intra));
        assert_eq!(gop_schedule(12, 12).iter().filter(|t| **t == FrameType::Intra).count(), 1);
    }

    #[test]
    fn roundtrip_matches_standalone_intra_reconstruction() {
        let (ae, stem) = models();
        let frames = synth_sequence(SequenceKind::Translate { step: 1 }, 5, 10, 14, 3).unwrap();
        let cfg = GopConfig {
            gop_size: 3,
            rate_index: 1,
            flags: StemFlags::FULL,
        };
        let stream = compress_video(&frames, &ae, &stem, &cfg).unwrap();
        let bytes = stream.to_bytes();
        assert_eq!(bytes, compress_video(&frames, &ae, &stem, &cfg).unwrap().to_bytes());
        let out = decompress_video(&bytes, &ae, &stem).unwrap();
        assert_eq!(out.len(), 5);
        let rate = ae.rate(1).unwrap();
        for (f, d) in frames.iter().zip(&out) {
            assert_eq!((d.width(), d.height()), (14, 10));
            assert_eq!(*d, standalone_reconstruction(f, &ae, rate).unwrap());
        }
        let latents = frame_latents(&frames, &ae, rate).unwrap();
        let decoded: Vec<_> = VideoDecoder::new(&bytes, &ae, &stem).unwrap().map(|d| d.unwrap().latent).collect();
        assert_eq!(decoded, latents);
    }

    #[test]
    fn wrong_weights_are_refused() {
        let (ae, stem) = models();
        let frames = synth_sequence(SequenceKind::Zoom, 2, 8, 8, 3).unwrap();
        let cfg = GopConfig {
            gop_size: 2,
            rate_index: 0,
            flags: StemFlags::FULL,
        };
        let bytes = compress_video(&frames, &ae, &stem, &cfg).unwrap().to_bytes();
        let other = StemWeights::init(4, 99).unwrap();
        assert!(matches!(decompress_video(&bytes, &ae, &other), Err(Error::DigestMismatch { .. })));
    }

    #[test]
    fn corruption_spares_earlier_frames() {
        let (ae, stem) = models();
        let frames = synth_sequence(SequenceKind::Translate { step: 1 }, 7, 8, 8, 4).unwrap();
        let cfg = GopConfig {
            gop_size: 10,
            rate_index: 0,
            flags: StemFlags::FULL,
        };
        let stream = compress_video(&frames, &ae, &stem, &cfg).unwrap();
        let clean = decompress_video(&stream.to_bytes(), &ae, &stem).unwrap();
        let mut broken = stream.clone();
        broken.chunks[5].y_stream.clear();
        broken.chunks[5].z_stream.clear();
        let mut dec = VideoDecoder::new(&broken.to_bytes(), &ae, &stem)
            .unwrap()
            .collect::<Vec<_>>()
            .into_iter();
        for f in clean.iter().take(5) {
            assert_eq!(dec.next().unwrap().unwrap().frame, *f);
        }
        // Decoding may or may not fail on a damaged chunk; later frames are not trusted either way.
        let bytes = stream.to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        let results: Vec<_> = VideoDecoder::new(cut, &ae, &stem).unwrap().collect();
        assert_eq!(results.len(), 7);
        assert!(matches!(results[6], Err(Error::Frame { index: 6, .. })));
        assert_eq!(
            results[..6].iter().map(|r| r.as_ref().unwrap().frame.clone()).collect::<Vec<_>>(),
            clean[..6]
        );
    }

    #[test]
    fn dimension_drift_is_rejected() {
        let (ae, stem) = models();
        let mut frames = synth_sequence(SequenceKind::Zoom, 2, 8, 8, 3).unwrap();
        frames.push(RgbFrame::filled(9, 8, [0, 0, 0]));
        let cfg = GopConfig {
            gop_size: 2,
            rate_index: 0,
            flags: StemFlags::FULL,
        };
        assert!(matches!(
            compress_video(&frames, &ae, &stem, &cfg),
            Err(Error::Frame { index: 2, .. })
        ));
    }
}
