//! Versioned binary checkpoints.
//!
//! Layout (all little-endian):
//! `"VMCK" | u32 version | u8 profile | u64 seed | u8 provenance` followed
//! by five length-prefixed sections in fixed order — encoders, router,
//! adapters, decoder, rng — each `u8 tag | u64 len | payload`. Only
//! parameter *values* are stored (plus the decay flag); optimizer moments
//! are per-stage scratch and are reset when a stage begins. Loading then
//! saving reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::adapters::Adapter;
use crate::decoder::{Decoder, Vocab};
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, LayerNorm, Linear, Param};
use crate::profile::ProfileId;
use crate::rng::Rng;
use crate::router::{ExpertId, Router};
use crate::tensor::Tensor;
use crate::vision::{Encoder, EncoderSpec, Reduction};

use super::Checkpoint;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const SECTION_ENCODERS: u8 = 1;
pub const SECTION_ROUTER: u8 = 2;
pub const SECTION_ADAPTERS: u8 = 3;
pub const SECTION_DECODER: u8 = 4;
pub const SECTION_RNG: u8 = 5;

const SECTION_ORDER: [(u8, &str); 5] = [
    (SECTION_ENCODERS, "encoders"),
    (SECTION_ROUTER, "router"),
    (SECTION_ADAPTERS, "adapters"),
    (SECTION_DECODER, "decoder"),
    (SECTION_RNG, "rng"),
];

fn section_name(tag: u8) -> &'static str {
    SECTION_ORDER
        .iter()
        .find(|(t, _)| *t == tag)
        .map(|(_, n)| *n)
        .unwrap_or("unknown")
}

fn bad(section: &str, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        section: section.to_string(),
        detail: detail.into(),
    }
}

// ─── Little-endian writer ────────────────────────────────────────────────

#[derive(Default)]
struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        assert!(s.len() <= u16::MAX as usize, "string too long for checkpoint");
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn param(&mut self, p: &Param) {
        self.string(&p.name);
        self.u8(p.decay as u8);
        self.tensor(&p.value);
    }
    fn linear(&mut self, l: &Linear) {
        self.param(&l.weight);
        self.param(&l.bias);
    }
    fn layernorm(&mut self, ln: &LayerNorm) {
        self.param(&ln.gain);
        self.param(&ln.shift);
    }
    fn block(&mut self, b: &AttentionBlock) {
        self.u32(b.heads as u32);
        self.u8(b.causal as u8);
        self.layernorm(&b.ln);
        self.param(&b.wq);
        self.param(&b.wk);
        self.param(&b.wv);
        self.param(&b.wo);
    }
}

// ─── Little-endian reader ────────────────────────────────────────────────

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Dec<'a> {
        Dec { buf, pos: 0, section }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad(self.section, "truncated"));
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
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| bad(self.section, "invalid UTF-8 string"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(bad(self.section, format!("bad tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = self.u64()? as usize;
            if d == 0 || numel.saturating_mul(d) > 1 << 30 {
                return Err(bad(self.section, "implausible tensor shape"));
            }
            numel *= d;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Ok(Tensor::from_vec(&shape, data))
    }

    fn param(&mut self) -> Result<Param> {
        let name = self.string()?;
        let decay = match self.u8()? {
            0 => false,
            1 => true,
            v => return Err(bad(self.section, format!("bad decay flag {v}"))),
        };
        Ok(Param::new(name, self.tensor()?, decay))
    }

    fn linear(&mut self) -> Result<Linear> {
        Ok(Linear {
            weight: self.param()?,
            bias: self.param()?,
        })
    }

    fn layernorm(&mut self) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.param()?,
            shift: self.param()?,
        })
    }

    fn block(&mut self) -> Result<AttentionBlock> {
        let heads = self.u32()? as usize;
        let causal = self.u8()? != 0;
        Ok(AttentionBlock {
            heads,
            causal,
            ln: self.layernorm()?,
            wq: self.param()?,
            wk: self.param()?,
            wv: self.param()?,
            wo: self.param()?,
        })
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(bad(
                self.section,
                format!("{} unread bytes at section end", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

// ─── Section payloads ────────────────────────────────────────────────────

fn write_spec(e: &mut Enc, spec: &EncoderSpec) {
    e.string(&spec.name);
    e.u32(spec.resolution as u32);
    e.u32(spec.patch as u32);
    e.u32(spec.width as u32);
    match spec.reduction {
        Reduction::None => e.u8(0),
        Reduction::PixelUnshuffle(r) => {
            e.u8(1);
            e.u32(r as u32);
        }
        Reduction::Bilinear { h, w } => {
            e.u8(2);
            e.u32(h as u32);
            e.u32(w as u32);
        }
    }
}

fn read_spec(d: &mut Dec) -> Result<EncoderSpec> {
    let name = d.string()?;
    let resolution = d.u32()? as usize;
    let patch = d.u32()? as usize;
    let width = d.u32()? as usize;
    let reduction = match d.u8()? {
        0 => Reduction::None,
        1 => Reduction::PixelUnshuffle(d.u32()? as usize),
        2 => Reduction::Bilinear {
            h: d.u32()? as usize,
            w: d.u32()? as usize,
        },
        v => return Err(bad(d.section, format!("bad reduction kind {v}"))),
    };
    let spec = EncoderSpec {
        name,
        resolution,
        patch,
        width,
        reduction,
    };
    spec.validate()?;
    Ok(spec)
}

fn encoders_payload(encoders: &[Encoder]) -> Vec<u8> {
    let mut e = Enc::default();
    e.u8(encoders.len() as u8);
    for enc in encoders {
        write_spec(&mut e, &enc.spec);
        e.linear(&enc.patch_proj);
        e.param(&enc.pos);
        e.u8(enc.blocks.len() as u8);
        for b in &enc.blocks {
            e.block(b);
        }
    }
    e.buf
}

fn read_encoders(buf: &[u8]) -> Result<Vec<Encoder>> {
    let mut d = Dec::new(buf, "encoders");
    let count = d.u8()? as usize;
    let mut encoders = Vec::with_capacity(count);
    for _ in 0..count {
        let spec = read_spec(&mut d)?;
        let patch_proj = d.linear()?;
        let pos = d.param()?;
        let nblocks = d.u8()? as usize;
        let mut blocks = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            blocks.push(d.block()?);
        }
        encoders.push(Encoder {
            spec,
            patch_proj,
            pos,
            blocks,
        });
    }
    d.done()?;
    Ok(encoders)
}

fn router_payload(router: &Router) -> Vec<u8> {
    let mut e = Enc::default();
    e.u8(router.bias.is_some() as u8);
    e.param(&router.w);
    if let Some(b) = &router.bias {
        e.param(b);
    }
    e.buf
}

fn read_router(buf: &[u8]) -> Result<Router> {
    let mut d = Dec::new(buf, "router");
    let has_bias = d.u8()? != 0;
    let w = d.param()?;
    let bias = if has_bias { Some(d.param()?) } else { None };
    d.done()?;
    Ok(Router { w, bias })
}

fn adapters_payload(adapters: &[Adapter]) -> Vec<u8> {
    let mut e = Enc::default();
    e.u8(adapters.len() as u8);
    for a in adapters {
        e.u8(a.expert.0 as u8);
        e.linear(&a.fc1);
        e.linear(&a.fc2);
    }
    e.buf
}

fn read_adapters(buf: &[u8]) -> Result<Vec<Adapter>> {
    let mut d = Dec::new(buf, "adapters");
    let count = d.u8()? as usize;
    let mut adapters = Vec::with_capacity(count);
    for _ in 0..count {
        let expert = ExpertId(d.u8()? as usize);
        let fc1 = d.linear()?;
        let fc2 = d.linear()?;
        adapters.push(Adapter { expert, fc1, fc2 });
    }
    d.done()?;
    Ok(adapters)
}

fn decoder_payload(dec: &Decoder) -> Vec<u8> {
    let mut e = Enc::default();
    e.string(&dec.vocab.to_text());
    e.u32(dec.context as u32);
    e.param(&dec.tok_emb);
    e.param(&dec.pos_emb);
    e.u8(dec.blocks.len() as u8);
    for b in &dec.blocks {
        e.block(b);
    }
    e.linear(&dec.out_proj);
    e.buf
}

fn read_decoder(buf: &[u8]) -> Result<Decoder> {
    let mut d = Dec::new(buf, "decoder");
    let vocab_text = d.string()?;
    let vocab = Vocab::from_text(&vocab_text)
        .map_err(|e| bad("decoder", format!("embedded vocabulary: {e}")))?;
    let context = d.u32()? as usize;
    let tok_emb = d.param()?;
    let pos_emb = d.param()?;
    let nblocks = d.u8()? as usize;
    let mut blocks = Vec::with_capacity(nblocks);
    for _ in 0..nblocks {
        blocks.push(d.block()?);
    }
    let out_proj = d.linear()?;
    d.done()?;
    Ok(Decoder {
        vocab,
        tok_emb,
        pos_emb,
        blocks,
        out_proj,
        context,
    })
}

fn rng_payload(rng: &Rng) -> Vec<u8> {
    let mut e = Enc::default();
    for w in rng.state() {
        e.u64(w);
    }
    e.buf
}

fn read_rng(buf: &[u8]) -> Result<Rng> {
    let mut d = Dec::new(buf, "rng");
    let mut s = [0u64; 4];
    for w in &mut s {
        *w = d.u64()?;
    }
    d.done()?;
    Ok(Rng::from_state(s))
}

// ─── Whole-file encode/decode ────────────────────────────────────────────

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(ckpt.profile.as_u8());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.push(ckpt.provenance);
    let sections = [
        (SECTION_ENCODERS, encoders_payload(&ckpt.encoders)),
        (SECTION_ROUTER, router_payload(&ckpt.router)),
        (SECTION_ADAPTERS, adapters_payload(&ckpt.adapters)),
        (SECTION_DECODER, decoder_payload(&ckpt.decoder)),
        (SECTION_RNG, rng_payload(&ckpt.rng)),
    ];
    for (tag, payload) in sections {
        out.push(tag);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut d = Dec::new(bytes, "header");
    if d.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("header", "not a checkpoint file (bad magic)"));
    }
    let version = d.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(
            "header",
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let profile = ProfileId::from_u8(d.u8()?)
        .map_err(|e| bad("header", e.to_string()))?;
    let seed = d.u64()?;
    let provenance = d.u8()?;

    let mut payloads: Vec<&[u8]> = Vec::with_capacity(SECTION_ORDER.len());
    for (expect_tag, name) in SECTION_ORDER {
        let tag = d.u8()?;
        if tag != expect_tag {
            return Err(bad(
                name,
                format!("expected section {name}, found tag {tag} ({})", section_name(tag)),
            ));
        }
        let len = d.u64()? as usize;
        payloads.push(d.take(len).map_err(|_| bad(name, "truncated section"))?);
    }
    d.done()
        .map_err(|_| bad("header", "trailing bytes after final section"))?;

    Ok(Checkpoint {
        profile,
        seed,
        provenance,
        encoders: read_encoders(payloads[0])?,
        router: read_router(payloads[1])?,
        adapters: read_adapters(payloads[2])?,
        decoder: read_decoder(payloads[3])?,
        rng: read_rng(payloads[4])?,
    })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Raw payload bytes of one section, without deserializing the rest.
/// Freezing contracts compare these slices directly.
pub fn section_bytes(bytes: &[u8], want: u8) -> Result<Vec<u8>> {
    let mut d = Dec::new(bytes, "header");
    d.take(4)?; // magic
    d.u32()?; // version
    d.u8()?; // profile
    d.u64()?; // seed
    d.u8()?; // provenance
    for _ in SECTION_ORDER {
        let tag = d.u8()?;
        let len = d.u64()? as usize;
        let payload = d.take(len)?;
        if tag == want {
            return Ok(payload.to_vec());
        }
    }
    Err(bad(section_name(want), "section not present"))
}
