use std::io::{BufRead, Read, Write};

use flate2::bufread::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::quant::{dequantize8, quantize8, QuantizedTensor};
use crate::drafters::{DraftModel, TargetFeed};
use crate::error::{Error, Result};
use crate::speculation::DraftTree;

pub const MSG_DRAFT: u8 = 1;
pub const MSG_VERIFY: u8 = 2;
pub const MSG_BOOTSTRAP: u8 = 3;
pub const MSG_ACK: u8 = 4;

/// Parent byte of a node attached to the pending token.
pub const ROOT_PARENT: u8 = 255;
pub const MAX_TOKEN: u32 = (1 << 24) - 1;

/// Widths of the activation blocks carried per verified token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PayloadLayout {
    pub widths: Vec<usize>,
}

impl PayloadLayout {
    pub fn for_drafter(model: &DraftModel) -> Self {
        Self {
            widths: model.feed_widths(),
        }
    }

    pub fn elements_per_token(&self) -> usize {
        self.widths.iter().sum()
    }

    fn check(&self, feed: &TargetFeed) -> Result<()> {
        let ok = feed.blocks.len() == self.widths.len()
            && feed
                .blocks
                .iter()
                .zip(&self.widths)
                .all(|(b, &w)| b.cols() == w && b.rows() == feed.rows);
        if ok {
            Ok(())
        } else {
            Err(Error::Protocol(format!(
                "activation payload does not match layout {:?}",
                self.widths
            )))
        }
    }
}

fn put_token(out: &mut Vec<u8>, token: u32) -> Result<()> {
    if token > MAX_TOKEN {
        return Err(Error::Encoding(format!("token {token} does not fit in 3 bytes")));
    }
    out.extend_from_slice(&token.to_le_bytes()[..3]);
    Ok(())
}

fn get_token(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], 0])
}

fn count_byte(n: usize, what: &str) -> Result<u8> {
    u8::try_from(n).map_err(|_| Error::Encoding(format!("{n} {what} exceed one byte")))
}

fn take<'b>(bytes: &'b [u8], at: &mut usize, n: usize) -> Result<&'b [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Protocol(format!("message truncated at byte {}", bytes.len())))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn expect_type(bytes: &[u8], ty: u8) -> Result<()> {
    match bytes.first() {
        Some(&t) if t == ty => Ok(()),
        Some(&t) => Err(Error::Protocol(format!("expected message type {ty}, got {t}"))),
        None => Err(Error::Protocol("empty message".into())),
    }
}

/// `[1][M]` followed by `M` × (3-byte token, parent byte).
pub fn encode_draft(tree: &DraftTree) -> Result<Vec<u8>> {
    tree.check_structure()?;
    let m = count_byte(tree.len(), "draft nodes")?;
    let mut out = Vec::with_capacity(2 + 4 * tree.len());
    out.push(MSG_DRAFT);
    out.push(m);
    for n in &tree.nodes {
        put_token(&mut out, n.token)?;
        out.push(match n.parent {
            None => ROOT_PARENT,
            Some(p) => count_byte(p, "parent index").and_then(|b| {
                if b == ROOT_PARENT {
                    Err(Error::Encoding("parent index collides with the root marker".into()))
                } else {
                    Ok(b)
                }
            })?,
        });
    }
    Ok(out)
}

pub fn decode_draft(bytes: &[u8]) -> Result<DraftTree> {
    expect_type(bytes, MSG_DRAFT)?;
    let mut at = 1;
    let m = take(bytes, &mut at, 1)?[0] as usize;
    let mut pairs = Vec::with_capacity(m);
    for _ in 0..m {
        let e = take(bytes, &mut at, 4)?;
        let parent = if e[3] == ROOT_PARENT { None } else { Some(e[3] as usize) };
        pairs.push((get_token(e), parent));
    }
    if at != bytes.len() {
        return Err(Error::Protocol("trailing bytes after draft".into()));
    }
    DraftTree::from_parents(&pairs)
}

fn put_blocks(out: &mut Vec<u8>, blocks: &[QuantizedTensor]) {
    for q in blocks {
        out.extend_from_slice(&q.scale.to_le_bytes());
        out.extend(q.values.iter().map(|&v| v as u8));
    }
}

fn get_blocks(bytes: &[u8], at: &mut usize, rows: usize, layout: &PayloadLayout) -> Result<Vec<QuantizedTensor>> {
    layout
        .widths
        .iter()
        .map(|&w| {
            let scale = f32::from_le_bytes(take(bytes, at, 4)?.try_into().expect("4 bytes"));
            let values = take(bytes, at, rows * w)?.iter().map(|&b| b as i8).collect();
            Ok(QuantizedTensor {
                scale,
                values,
                shape: vec![rows, w],
            })
        })
        .collect()
}

fn quantize_feed(feed: &TargetFeed, layout: &PayloadLayout) -> Result<Vec<QuantizedTensor>> {
    layout.check(feed)?;
    feed.blocks.iter().map(quantize8).collect()
}

/// Dequantized feed from transported blocks.
pub fn feed_from_blocks(rows: usize, blocks: &[QuantizedTensor]) -> Result<TargetFeed> {
    Ok(TargetFeed {
        rows,
        blocks: blocks.iter().map(dequantize8).collect::<Result<_>>()?,
    })
}

/// Server reply: accepted drafts plus the bonus token, and the activations of
/// the newly verified rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyMessage {
    pub tokens: Vec<u32>,
    pub blocks: Vec<QuantizedTensor>,
}

impl VerifyMessage {
    pub fn from_feed(tokens: Vec<u32>, feed: &TargetFeed, layout: &PayloadLayout) -> Result<Self> {
        if feed.rows != tokens.len() && !layout.widths.is_empty() {
            return Err(Error::Protocol(format!(
                "{} activation rows for {} tokens",
                feed.rows,
                tokens.len()
            )));
        }
        Ok(Self {
            blocks: quantize_feed(feed, layout)?,
            tokens,
        })
    }

    /// `[2][A]`, `A` × 3-byte tokens, then each block as `[f32 scale][i8...]`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let a = count_byte(self.tokens.len(), "verified tokens")?;
        let mut out = vec![MSG_VERIFY, a];
        for &t in &self.tokens {
            put_token(&mut out, t)?;
        }
        put_blocks(&mut out, &self.blocks);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], layout: &PayloadLayout) -> Result<Self> {
        expect_type(bytes, MSG_VERIFY)?;
        let mut at = 1;
        let a = take(bytes, &mut at, 1)?[0] as usize;
        if a == 0 {
            return Err(Error::Protocol("verify message without tokens".into()));
        }
        let tokens = (0..a)
            .map(|_| take(bytes, &mut at, 3).map(get_token))
            .collect::<Result<Vec<_>>>()?;
        let blocks = get_blocks(bytes, &mut at, a, layout)?;
        if at != bytes.len() {
            return Err(Error::Protocol("trailing bytes after verify".into()));
        }
        Ok(Self { tokens, blocks })
    }

    pub fn activation_elements(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }
}

/// Prompt activations and the first target token, gzip-compressed on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapMessage {
    pub prompt_len: usize,
    pub first_token: u32,
    pub blocks: Vec<QuantizedTensor>,
}

impl BootstrapMessage {
    pub fn from_feed(first_token: u32, feed: &TargetFeed, layout: &PayloadLayout) -> Result<Self> {
        if feed.rows == 0 {
            return Err(Error::Protocol("bootstrap needs a non-empty prompt".into()));
        }
        Ok(Self {
            prompt_len: feed.rows,
            first_token,
            blocks: quantize_feed(feed, layout)?,
        })
    }

    fn raw(&self) -> Result<Vec<u8>> {
        let mut raw = Vec::new();
        raw.extend_from_slice(&(self.prompt_len as u32).to_le_bytes());
        put_token(&mut raw, self.first_token)?;
        put_blocks(&mut raw, &self.blocks);
        Ok(raw)
    }

    /// `[3][u32 raw_len]` then the gzip stream of the raw payload.
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.prompt_len == 0 {
            return Err(Error::Protocol("bootstrap needs a non-empty prompt".into()));
        }
        let raw = self.raw()?;
        let mut out = vec![MSG_BOOTSTRAP];
        out.extend_from_slice(&(raw.len() as u32).to_le_bytes());
        let mut gz = GzEncoder::new(out, Compression::default());
        gz.write_all(&raw)?;
        Ok(gz.finish()?)
    }

    pub fn raw_len(&self) -> Result<usize> {
        Ok(self.raw()?.len())
    }

    pub fn decode(bytes: &[u8], layout: &PayloadLayout) -> Result<Self> {
        expect_type(bytes, MSG_BOOTSTRAP)?;
        let mut at = 1;
        let raw_len = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes")) as usize;
        let mut raw = Vec::with_capacity(raw_len);
        GzDecoder::new(&bytes[at..])
            .read_to_end(&mut raw)
            .map_err(|e| Error::Protocol(format!("bootstrap decompression failed: {e}")))?;
        if raw.len() != raw_len {
            return Err(Error::Protocol(format!(
                "bootstrap expanded to {} bytes, header says {raw_len}",
                raw.len()
            )));
        }
        let mut at = 0;
        let prompt_len = u32::from_le_bytes(take(&raw, &mut at, 4)?.try_into().expect("4 bytes")) as usize;
        if prompt_len == 0 {
            return Err(Error::Protocol("bootstrap for an empty prompt".into()));
        }
        let first_token = get_token(take(&raw, &mut at, 3)?);
        let blocks = get_blocks(&raw, &mut at, prompt_len, layout)?;
        if at != raw.len() {
            return Err(Error::Protocol("trailing bytes in bootstrap payload".into()));
        }
        Ok(Self {
            prompt_len,
            first_token,
            blocks,
        })
    }
}

pub fn encode_ack() -> Vec<u8> {
    vec![MSG_ACK]
}

/// Reads one complete message from a byte stream; every message type is
/// self-delimiting given the payload layout.
pub fn read_message<R: BufRead>(r: &mut R, layout: &PayloadLayout) -> Result<Vec<u8>> {
    let mut ty = [0u8; 1];
    r.read_exact(&mut ty)?;
    let mut out = vec![ty[0]];
    let read_n = |r: &mut R, out: &mut Vec<u8>, n: usize| -> Result<()> {
        let start = out.len();
        out.resize(start + n, 0);
        r.read_exact(&mut out[start..])?;
        Ok(())
    };
    match ty[0] {
        MSG_DRAFT => {
            read_n(r, &mut out, 1)?;
            let m = out[1] as usize;
            read_n(r, &mut out, 4 * m)?;
        }
        MSG_VERIFY => {
            read_n(r, &mut out, 1)?;
            let a = out[1] as usize;
            read_n(r, &mut out, 3 * a)?;
            for &w in &layout.widths {
                read_n(r, &mut out, 4 + a * w)?;
            }
        }
        MSG_BOOTSTRAP => {
            read_n(r, &mut out, 4)?;
            let mut rec = Recorder { inner: r, log: out };
            std::io::copy(&mut GzDecoder::new(&mut rec), &mut std::io::sink())?;
            out = rec.log;
        }
        MSG_ACK => {}
        other => return Err(Error::Protocol(format!("unknown message type {other}"))),
    }
    Ok(out)
}

/// Buffered reader that keeps a copy of every consumed byte.
struct Recorder<'r, R: BufRead> {
    inner: &'r mut R,
    log: Vec<u8>,
}

impl<R: BufRead> Read for Recorder<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = {
            let avail = self.fill_buf()?;
            let n = avail.len().min(buf.len());
            buf[..n].copy_from_slice(&avail[..n]);
            n
        };
        self.consume(n);
        Ok(n)
    }
}

impl<R: BufRead> BufRead for Recorder<'_, R> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        if let Ok(buf) = self.inner.fill_buf() {
            let n = amt.min(buf.len());
            self.log.extend_from_slice(&buf[..n]);
        }
        self.inner.consume(amt);
    }
}
