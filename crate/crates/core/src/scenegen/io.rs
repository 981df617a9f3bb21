//! Binary sample files and dataset directories.
//!
//! File layout: magic `WARPADT1`, `u8` domain (0 synthetic, 1 real), `u8`
//! presence bitmap (bit 0 disparity, 1 flow, 2 occlusion, 3 stereo mask),
//! then tensor records for left, right, next-left and each present field.
//! A tensor record is `u8` rank (4), four `u32` LE extents and the values
//! as `f32` LE.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Domain, SceneSample};
use crate::error::{Error, Result};
use crate::gradcore::{Shape, Tensor};
use crate::warp::WarpField;

pub const SAMPLE_MAGIC: &[u8; 8] = b"WARPADT1";
pub const MANIFEST: &str = "manifest.txt";
/// Magic of a single-tensor file: the magic followed by one tensor record.
pub const TENSOR_MAGIC: &[u8; 8] = b"WARPTEN1";

const HAS_DISP: u8 = 1;
const HAS_FLOW: u8 = 2;
const HAS_OCC: u8 = 4;
const HAS_STEREO: u8 = 8;

pub(crate) fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.push(4);
    for e in t.shape().0 {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Byte reader that reports the offset of any failure.
pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader {
            path,
            bytes,
            pos: 0,
        }
    }

    pub(crate) fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let start = self.pos;
        let got = self.take(8, "magic")?;
        if got != magic {
            self.pos = start;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let start = self.pos;
        let rank = self.u8(what)?;
        if rank != 4 {
            self.pos = start;
            return Err(self.fail(format!("{what}: rank {rank}, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32(what)? as usize;
        }
        let shape = Shape(dims);
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = count
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| self.fail(format!("{what}: extents {shape} overflow")))?;
        let raw = self.take(bytes, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_sample(s: &SceneSample) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.push(match s.domain {
        Domain::Synthetic => 0,
        Domain::Real => 1,
    });
    let mut bits = 0;
    if s.disparity.is_some() {
        bits |= HAS_DISP;
    }
    if s.flow.is_some() {
        bits |= HAS_FLOW;
    }
    if s.occlusion.is_some() {
        bits |= HAS_OCC;
    }
    if s.stereo_mask.is_some() {
        bits |= HAS_STEREO;
    }
    buf.push(bits);
    for t in [&s.left, &s.right, &s.next_left] {
        put_tensor(&mut buf, t);
    }
    if let Some(d) = &s.disparity {
        put_tensor(&mut buf, &d.values);
    }
    if let Some(f) = &s.flow {
        put_tensor(&mut buf, &f.values);
    }
    if let Some(o) = &s.occlusion {
        put_tensor(&mut buf, o);
    }
    if let Some(m) = &s.stereo_mask {
        put_tensor(&mut buf, m);
    }
    buf
}

pub fn decode_sample(path: &Path, bytes: &[u8]) -> Result<SceneSample> {
    let mut r = Reader::new(path, bytes);
    r.magic(SAMPLE_MAGIC)?;
    let domain = match r.u8("domain tag")? {
        0 => Domain::Synthetic,
        1 => Domain::Real,
        t => {
            r.pos -= 1;
            return Err(r.fail(format!("unknown domain tag {t}")));
        }
    };
    let bits = r.u8("field bitmap")?;
    if bits & !(HAS_DISP | HAS_FLOW | HAS_OCC | HAS_STEREO) != 0 {
        r.pos -= 1;
        return Err(r.fail(format!("unknown field bits {bits:#04x}")));
    }
    let left = r.tensor("left image")?;
    let right = r.tensor("right image")?;
    let next_left = r.tensor("next-left image")?;
    let disparity = if bits & HAS_DISP != 0 {
        Some(WarpField::disparity(r.tensor("disparity")?)?)
    } else {
        None
    };
    let flow = if bits & HAS_FLOW != 0 {
        Some(WarpField::flow(r.tensor("flow")?)?)
    } else {
        None
    };
    let occlusion = if bits & HAS_OCC != 0 {
        Some(r.tensor("occlusion")?)
    } else {
        None
    };
    let stereo_mask = if bits & HAS_STEREO != 0 {
        Some(r.tensor("stereo mask")?)
    } else {
        None
    };
    r.finish()?;
    Ok(SceneSample {
        left,
        right,
        next_left,
        disparity,
        flow,
        occlusion,
        stereo_mask,
        domain,
    })
}

pub fn write_sample(sample: &SceneSample, path: &Path) -> Result<()> {
    write_file(path, &encode_sample(sample))
}

pub fn read_sample(path: &Path) -> Result<SceneSample> {
    decode_sample(path, &read_file(path)?)
}

pub fn write_tensor_file(t: &Tensor, path: &Path) -> Result<()> {
    let mut buf = TENSOR_MAGIC.to_vec();
    put_tensor(&mut buf, t);
    write_file(path, &buf)
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(TENSOR_MAGIC)?;
    let t = r.tensor("tensor")?;
    r.finish()?;
    Ok(t)
}

/// Binary 8-bit PPM of the first image of a 3-channel batch; values are
/// clamped to `[0, 1]` and rounded.
pub fn write_ppm(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    if s.c() != 3 || s.n() == 0 {
        return Err(Error::shape(format!(
            "PPM needs a 3-channel image, got {s}"
        )));
    }
    let mut buf = format!("P6\n{} {}\n255\n", s.w(), s.h()).into_bytes();
    for y in 0..s.h() {
        for x in 0..s.w() {
            for c in 0..3 {
                buf.push((t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    write_file(path, &buf)
}

fn sample_name(i: usize) -> String {
    format!("sample_{i:05}.wad")
}

/// Writes `sample_00000.wad`, ... and a manifest listing them in order.
pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = sample_name(i);
        write_sample(s, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    write_file(&dir.join(MANIFEST), manifest.as_bytes())
}

/// Reads every sample listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let manifest_path: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|name| read_sample(&dir.join(name)))
        .collect()
}
