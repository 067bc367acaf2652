//! Checkpoint format: one newline-terminated JSON shape header followed by
//! the four parameter blocks as little-endian f64, in w1t/b1/w2/b2 order.

use super::{feature_dim, ParamBlock, PolicyError, PolicyParams};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct Header {
    v: usize,
    h: usize,
    f: usize,
    seed: u64,
    step: u64,
    layout: Vec<String>,
}

pub fn save_params(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    let header = Header {
        v: params.v,
        h: params.h,
        f: params.f,
        seed: params.seed,
        step: params.step,
        layout: ["w1t", "b1", "w2", "b2"].iter().map(|s| s.to_string()).collect(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header).map_err(|e| PolicyError::BadCheckpoint(e.to_string()))?;
    out.write_all(b"\n")?;
    for block in [&params.block.w1t, &params.block.b1, &params.block.w2, &params.block.b2] {
        for x in block.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<PolicyParams, PolicyError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        input.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 4096 {
            return Err(PolicyError::BadCheckpoint("header too long".into()));
        }
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| PolicyError::BadCheckpoint(e.to_string()))?;
    if header.f != feature_dim(header.v) {
        return Err(PolicyError::BadCheckpoint(format!(
            "feature dim {} inconsistent with vocab {}",
            header.f, header.v
        )));
    }
    if header.layout != ["w1t", "b1", "w2", "b2"] {
        return Err(PolicyError::BadCheckpoint("unknown block layout".into()));
    }
    let mut block = ParamBlock::zeros(header.v, header.h, header.f);
    for dst in [&mut block.w1t, &mut block.b1, &mut block.w2, &mut block.b2] {
        let mut buf = [0u8; 8];
        for x in dst.iter_mut() {
            input.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(PolicyError::BadCheckpoint("trailing bytes".into()));
    }
    Ok(PolicyParams {
        v: header.v,
        h: header.h,
        f: header.f,
        block,
        seed: header.seed,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut params = PolicyParams::init(64, 16, 42);
        params.step = 37;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn corrupt_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"{not json}\n").unwrap();
        assert!(matches!(
            load_params(&path),
            Err(PolicyError::BadCheckpoint(_))
        ));
    }
}
