//! Binary checkpoint format.
//!
//! ```text
//! magic "SEMISUP\0" | version u32
//! section*: tag [u8; 4] | payload length u64 | payload | FNV-1a-64 of payload
//! ```
//!
//! Sections appear in a fixed order: `ARCH` (JSON architecture descriptor),
//! `PARM` and `EMA_` (named blocks: name, shape, raw little-endian f32),
//! `MOMT` (momentum buffers in the same layout), `THRS` (threshold state)
//! and `RNGS` (seed, step, total steps). All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchSpec, Gradients, ModelParams, ParamBlock};
use crate::threshold::{ThresholdMode, ThresholdState};
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 8] = b"SEMISUP\0";
pub const FORMAT_VERSION: u32 = 1;
const SECTIONS: [&str; 6] = ["ARCH", "PARM", "EMA_", "MOMT", "THRS", "RNGS"];

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn section(&mut self, tag: &str, payload: &[u8]) {
        self.0.extend_from_slice(tag.as_bytes());
        self.bytes(payload);
        self.u64(fnv1a(payload));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        Self { buf, pos: 0, section }
    }
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::checkpoint(self.section, msg)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: wanted {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len() - self.pos)
            .ok_or_else(|| self.err(format!("length {n} exceeds remaining {} bytes", self.buf.len() - self.pos)))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn write_blocks(blocks: impl Iterator<Item = (String, Vec<usize>, Vec<f32>)>) -> Vec<u8> {
    let blocks: Vec<_> = blocks.collect();
    let mut w = Writer::default();
    w.u32(blocks.len() as u32);
    for (name, shape, data) in blocks {
        w.bytes(name.as_bytes());
        w.u32(shape.len() as u32);
        for d in shape {
            w.u64(d as u64);
        }
        w.u64(data.len() as u64);
        for v in data {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.0
}

fn read_blocks(r: &mut Reader<'_>) -> Result<Vec<ParamBlock>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = std::str::from_utf8(r.bytes()?)
            .map_err(|_| r.err("block name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n = r.u64()? as usize;
        if shape.iter().product::<usize>() != n {
            return Err(r.err(format!("block `{name}` shape {shape:?} does not hold {n} values")));
        }
        let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err("block too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(ParamBlock { name, shape, data });
    }
    r.finish()?;
    Ok(out)
}

fn params_payload(p: &ModelParams) -> Vec<u8> {
    write_blocks(p.blocks.iter().map(|b| (b.name.clone(), b.shape.clone(), b.data.clone())))
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    let arch = serde_json::to_vec(&state.params.arch).map_err(|e| Error::checkpoint("ARCH", e.to_string()))?;
    w.section("ARCH", &arch);
    w.section("PARM", &params_payload(&state.params));
    w.section("EMA_", &params_payload(&state.ema));
    let momt = write_blocks(
        state
            .params
            .blocks
            .iter()
            .zip(&state.velocity.blocks)
            .map(|(b, v)| (b.name.clone(), b.shape.clone(), v.clone())),
    );
    w.section("MOMT", &momt);
    let th = &state.threshold;
    let mut t = Writer::default();
    t.0.push(match th.mode {
        ThresholdMode::Fixed => 0,
        ThresholdMode::Adaptive => 1,
    });
    t.f64(th.tau);
    t.f64(th.momentum);
    t.f64(th.fixed_value);
    t.u32(th.ptilde.len() as u32);
    for &p in &th.ptilde {
        t.f64(p);
    }
    w.section("THRS", &t.0);
    let mut r = Writer::default();
    r.u64(state.seed);
    r.u64(state.step);
    r.u64(state.total_steps);
    w.section("RNGS", &r.0);
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut head = Reader::new(bytes, "header");
    if head.take(8)? != MAGIC {
        return Err(head.err("bad magic; not a checkpoint file"));
    }
    let version = head.u32()?;
    if version != FORMAT_VERSION {
        return Err(head.err(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let mut payloads: Vec<&[u8]> = Vec::with_capacity(SECTIONS.len());
    for tag in SECTIONS {
        let mut r = Reader { section: tag, ..head };
        let got = r.take(4)?;
        if got != tag.as_bytes() {
            return Err(r.err(format!("found tag {:?}", String::from_utf8_lossy(got))));
        }
        let payload = r.bytes()?;
        if r.u64()? != fnv1a(payload) {
            return Err(r.err("checksum mismatch"));
        }
        payloads.push(payload);
        head.pos = r.pos;
    }
    if head.pos != bytes.len() {
        return Err(Error::checkpoint("trailer", format!("{} unexpected bytes", bytes.len() - head.pos)));
    }

    let arch: ArchSpec =
        serde_json::from_slice(payloads[0]).map_err(|e| Error::checkpoint("ARCH", e.to_string()))?;
    arch.validate().map_err(|e| Error::checkpoint("ARCH", e.to_string()))?;
    let expected = arch.block_shapes();
    let load_params = |idx: usize, tag: &'static str| -> Result<ModelParams> {
        let blocks = read_blocks(&mut Reader::new(payloads[idx], tag))?;
        let layout: Vec<(String, Vec<usize>)> = blocks.iter().map(|b| (b.name.clone(), b.shape.clone())).collect();
        if layout != expected {
            return Err(Error::checkpoint(tag, "blocks do not match the architecture descriptor"));
        }
        Ok(ModelParams {
            arch: arch.clone(),
            blocks,
        })
    };
    let params = load_params(1, "PARM")?;
    let ema = load_params(2, "EMA_")?;
    let velocity = Gradients {
        blocks: load_params(3, "MOMT")?.blocks.into_iter().map(|b| b.data).collect(),
    };

    let mut t = Reader::new(payloads[4], "THRS");
    let mode = match t.take(1)?[0] {
        0 => ThresholdMode::Fixed,
        1 => ThresholdMode::Adaptive,
        m => return Err(t.err(format!("unknown threshold mode {m}"))),
    };
    let (tau, momentum, fixed_value) = (t.f64()?, t.f64()?, t.f64()?);
    let k = t.u32()? as usize;
    if k != arch.classes {
        return Err(t.err(format!("{k} class averages for {} classes", arch.classes)));
    }
    let ptilde = (0..k).map(|_| t.f64()).collect::<Result<Vec<_>>>()?;
    t.finish()?;

    let mut r = Reader::new(payloads[5], "RNGS");
    let (seed, step, total_steps) = (r.u64()?, r.u64()?, r.u64()?);
    r.finish()?;

    Ok(TrainState {
        params,
        ema,
        velocity,
        threshold: ThresholdState {
            mode,
            tau,
            ptilde,
            momentum,
            fixed_value,
        },
        step,
        total_steps,
        seed,
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::init_params;

    fn state() -> TrainState {
        let cfg = RunConfig::from_toml_str(crate::config::DESK_CONFIG, &[]).unwrap();
        let arch = ArchSpec::small_cnn(3, 8, 8, vec![4, 6], 4);
        let mut s = TrainState::new(&arch, &cfg).unwrap();
        s.ema = init_params(&arch, 99).unwrap();
        for (i, v) in s.velocity.blocks.iter_mut().flatten().enumerate() {
            *v = (i as f32 * 0.37).sin();
        }
        s.threshold.tau = 0.712_345;
        s.threshold.ptilde = vec![0.1, 0.2, 0.3, 0.4];
        s.step = 123;
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let bytes = encode_checkpoint(&s).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), s);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        save_checkpoint(&s, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), s);
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = encode_checkpoint(&state()).unwrap();
        for cut in [0, 5, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
        }
    }

    #[test]
    fn corruption_names_the_section() {
        let s = state();
        let bytes = encode_checkpoint(&s).unwrap();
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 0xff;
        match decode_checkpoint(&bad).unwrap_err() {
            Error::Checkpoint { section, .. } => assert_eq!(section, "RNGS"),
            e => panic!("{e}"),
        }
        let mut bad = bytes.clone();
        bad[8] = 9;
        let err = decode_checkpoint(&bad).unwrap_err().to_string();
        assert!(err.contains("header") && err.contains("version 9"), "{err}");
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
    }
}
