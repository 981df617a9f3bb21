//! Checkpoint files.
//!
//! Layout: magic `WARPCKP1`, `u32` version, `u32` record count, then named
//! tensor records (`u16` name length, UTF-8 name, tensor record as in
//! sample files); then `u64` iteration, the generator state as four
//! `u64`, and named `f64` scalars (`u32` count, then `u16` name length,
//! name, value) holding architecture sizes, optimizer step counts and
//! running loss averages. Values are little-endian throughout.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{ArchConfig, Networks, Optimizers, TrainState, TRAINABLE};
use crate::error::Result;
use crate::gradcore::Tensor;
use crate::losses::LossBreakdown;
use crate::scenegen::io::{put_tensor, read_file, write_file, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WARPCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

fn rng_words(rng: &Xoshiro256PlusPlus) -> [u64; 4] {
    let v = serde_json::to_value(rng).expect("generator state serializes");
    serde_json::from_value(v["s"].clone()).expect("generator state has four words")
}

fn rng_from_words(s: [u64; 4]) -> Xoshiro256PlusPlus {
    serde_json::from_value(serde_json::json!({ "s": s })).expect("four words form a valid state")
}

fn records(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for net in TRAINABLE {
        let h = state.nets.get(net).expect("trainable network");
        let o = state.opt.get(net).expect("optimizer");
        for (i, p) in h.params().iter().enumerate() {
            out.push((format!("{net}.{}", p.name), &p.value));
            out.push((format!("adam.{net}.m.{}", p.name), &o.m[i]));
            out.push((format!("adam.{net}.v.{}", p.name), &o.v[i]));
        }
    }
    out
}

fn scalars(state: &TrainState) -> Vec<(String, f64)> {
    let a = &state.arch;
    let mut out = vec![
        ("arch.gen_base".to_string(), a.gen_base as f64),
        ("arch.disc_base".to_string(), a.disc_base as f64),
        ("arch.max_disp".to_string(), a.max_disp as f64),
        ("arch.max_flow".to_string(), a.max_flow as f64),
    ];
    for net in TRAINABLE {
        out.push((
            format!("adam.{net}.step"),
            state.opt.get(net).expect("optimizer").step as f64,
        ));
    }
    for (n, v) in state.running.entries() {
        out.push((format!("running.{n}"), *v));
    }
    out
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let recs = records(state);
    buf.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in &recs {
        put_name(&mut buf, name);
        put_tensor(&mut buf, t);
    }
    buf.extend_from_slice(&state.iteration.to_le_bytes());
    for w in rng_words(&state.rng) {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    let sc = scalars(state);
    buf.extend_from_slice(&(sc.len() as u32).to_le_bytes());
    for (name, v) in &sc {
        put_name(&mut buf, name);
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn read_name(r: &mut Reader) -> Result<String> {
    let len = r.u16("name length")? as usize;
    let bytes = r.take(len, "name")?;
    String::from_utf8(bytes.to_vec()).map_err(|_| r.fail("name is not UTF-8"))
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("record count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = read_name(&mut r)?;
        let t = r.tensor(&name)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(r.fail(format!("duplicate record {name}")));
        }
    }
    let iteration = r.u64("iteration")?;
    let mut words = [0u64; 4];
    for w in &mut words {
        *w = r.u64("generator state")?;
    }
    if words == [0; 4] {
        return Err(r.fail("all-zero generator state"));
    }
    let n_scalars = r.u32("scalar count")?;
    let mut sc = Vec::with_capacity(n_scalars as usize);
    for _ in 0..n_scalars {
        let name = read_name(&mut r)?;
        let v = f64::from_le_bytes(r.take(8, &name)?.try_into().expect("8 bytes"));
        sc.push((name, v));
    }
    r.finish()?;

    let scalar = |name: &str| -> Result<f64> {
        sc.iter()
            .find(|(n, _)| n == name)
            .map(|e| e.1)
            .ok_or_else(|| r.fail(format!("missing scalar {name}")))
    };
    let arch = ArchConfig {
        gen_base: scalar("arch.gen_base")? as usize,
        disc_base: scalar("arch.disc_base")? as usize,
        max_disp: scalar("arch.max_disp")? as usize,
        max_flow: scalar("arch.max_flow")? as usize,
    };
    let mut nets = Networks::build(&arch, &mut Xoshiro256PlusPlus::seed_from_u64(0))?;
    let mut opt = Optimizers::new(&nets);
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| r.fail(format!("missing record {name}")))
    };
    for net in TRAINABLE {
        let h = nets.get_mut(net).expect("trainable network");
        let names: Vec<String> = h.params().iter().map(|p| p.name.clone()).collect();
        let mut values = Vec::new();
        let o = opt.get_mut(net).expect("optimizer");
        for (i, p) in names.iter().enumerate() {
            values.push(take(&format!("{net}.{p}"))?);
            o.m[i] = take(&format!("adam.{net}.m.{p}"))?;
            o.v[i] = take(&format!("adam.{net}.v.{p}"))?;
            if o.m[i].shape() != values[i].shape() || o.v[i].shape() != values[i].shape() {
                return Err(r.fail(format!(
                    "moment buffers of {net}.{p} do not match the parameter"
                )));
            }
        }
        h.load_params(values)?;
        o.step = scalar(&format!("adam.{net}.step"))? as u64;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(r.fail(format!("unexpected record {extra}")));
    }
    let mut running = LossBreakdown::default();
    for (n, v) in &sc {
        if let Some(name) = n.strip_prefix("running.") {
            running.push(name, *v);
        }
    }
    Ok(TrainState {
        iteration,
        arch,
        nets,
        opt,
        rng: rng_from_words(words),
        running,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(state))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(path, &read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_state_round_trip() {
        let rng = Xoshiro256PlusPlus::seed_from_u64(42);
        assert_eq!(rng_from_words(rng_words(&rng)), rng);
    }
}
