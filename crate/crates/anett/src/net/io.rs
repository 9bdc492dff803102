//! Parameter files: text header (format version, network kind, architecture
//! descriptor, seed) followed by all parameter arrays as little-endian f32
//! in flatten order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdapterParams, AutoencoderParams, Descriptor, NetError, ParamSet};

const MAGIC: &str = "anett-params 1";

fn write_params<P: ParamSet>(
    params: &P,
    desc: &Descriptor,
    kind: &str,
    seed: u64,
    path: &Path,
) -> Result<(), NetError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "kind {kind}")?;
    writeln!(w, "arch {}", desc.encode_header())?;
    writeln!(w, "seed {seed}")?;
    writeln!(w, "data")?;
    for v in params.to_flat() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

struct ParamFile {
    kind: String,
    desc: Descriptor,
    seed: u64,
    values: Vec<f64>,
}

fn read_line(r: &mut impl Read) -> Result<String, NetError> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 || byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 512 {
            return Err(NetError::BadHeader("header line too long".into()));
        }
    }
    String::from_utf8(line).map_err(|_| NetError::BadHeader("non-utf8 header".into()))
}

fn read_params(path: &Path) -> Result<ParamFile, NetError> {
    let mut r = BufReader::new(File::open(path)?);
    if read_line(&mut r)? != MAGIC {
        return Err(NetError::BadHeader("not a parameter file".into()));
    }
    let kind_line = read_line(&mut r)?;
    let kind = kind_line
        .strip_prefix("kind ")
        .ok_or_else(|| NetError::BadHeader(format!("bad kind line `{kind_line}`")))?
        .to_string();
    let arch_line = read_line(&mut r)?;
    let arch = arch_line
        .strip_prefix("arch ")
        .ok_or_else(|| NetError::BadHeader(format!("bad arch line `{arch_line}`")))?;
    let desc = Descriptor::parse_header(arch)?;
    let seed_line = read_line(&mut r)?;
    let seed = seed_line
        .strip_prefix("seed ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| NetError::BadHeader(format!("bad seed line `{seed_line}`")))?;
    if read_line(&mut r)? != "data" {
        return Err(NetError::BadHeader("missing `data` marker".into()));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(NetError::BadHeader("payload not a multiple of 4 bytes".into()));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(ParamFile {
        kind,
        desc,
        seed,
        values,
    })
}

pub fn save_autoencoder(ae: &AutoencoderParams, seed: u64, path: &Path) -> Result<(), NetError> {
    write_params(ae, &ae.desc, "ae", seed, path)
}

pub fn load_autoencoder(path: &Path) -> Result<(AutoencoderParams, u64), NetError> {
    let file = read_params(path)?;
    if file.kind != "ae" {
        return Err(NetError::Descriptor(format!(
            "expected an autoencoder parameter file, found kind `{}`",
            file.kind
        )));
    }
    let mut ae = AutoencoderParams::init(file.desc, 0);
    let expected = ae.n_params();
    if file.values.len() != expected {
        return Err(NetError::Truncated {
            expected,
            got: file.values.len(),
        });
    }
    ae.set_from_flat(&file.values);
    Ok((ae, file.seed))
}

pub fn save_adapter(ad: &AdapterParams, seed: u64, path: &Path) -> Result<(), NetError> {
    write_params(ad, &ad.desc, "adapter", seed, path)
}

pub fn load_adapter(path: &Path) -> Result<(AdapterParams, u64), NetError> {
    let file = read_params(path)?;
    if file.kind != "adapter" {
        return Err(NetError::Descriptor(format!(
            "expected an adapter parameter file, found kind `{}`",
            file.kind
        )));
    }
    let mut ad = AdapterParams::init(file.desc, 0);
    let expected = ad.n_params();
    if file.values.len() != expected {
        return Err(NetError::Truncated {
            expected,
            got: file.values.len(),
        });
    }
    ad.set_from_flat(&file.values);
    Ok((ad, file.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_files_roundtrip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.params");
        let ae = AutoencoderParams::init(Descriptor::default(), 42);
        save_autoencoder(&ae, 42, &path).unwrap();
        let (back, seed) = load_autoencoder(&path).unwrap();
        assert_eq!(seed, 42);
        // values pass through f32 once; a second roundtrip is bit-exact
        let path2 = dir.path().join("ae2.params");
        save_autoencoder(&back, seed, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        for (a, b) in ae.to_flat().iter().zip(back.to_flat()) {
            assert_eq!(*a as f32, b as f32);
        }
    }

    #[test]
    fn kind_mismatch_is_a_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ad.params");
        let ad = AdapterParams::init(Descriptor::default(), 1);
        save_adapter(&ad, 1, &path).unwrap();
        assert!(matches!(
            load_autoencoder(&path),
            Err(NetError::Descriptor(_))
        ));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.params");
        let ae = AutoencoderParams::init(Descriptor::default(), 2);
        save_autoencoder(&ae, 2, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(
            load_autoencoder(&path),
            Err(NetError::Truncated { .. })
        ));
    }
}
