//! Flat binary parameter checkpoints exchanged between the pretrain and run
//! phases.
//!
//! Layout: magic `OSKA`, version u32, net spec fields, then little-endian
//! f64 values in layer order (`w` row-major, `b`, per layer) followed by the
//! log inner step sizes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{init_params, Activation, ModelError, ModelParams, NetSpec, Result};

const MAGIC: &[u8; 4] = b"OSKA";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    let spec = &params.spec;
    put_u32(&mut w, spec.input_dim as u32)?;
    put_u32(&mut w, spec.hidden_dims.len() as u32)?;
    for h in &spec.hidden_dims {
        put_u32(&mut w, *h as u32)?;
    }
    put_u32(&mut w, spec.output_dim as u32)?;
    w.write_all(&[match spec.activation {
        Activation::Relu => 0u8,
        Activation::Tanh => 1u8,
    }])?;
    w.write_all(&[u8::from(spec.shared_inner_lr)])?;
    put_u64(&mut w, spec.seed)?;
    for v in params.flatten(true) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let input_dim = get_u32(&mut r)? as usize;
    let n_hidden = get_u32(&mut r)? as usize;
    let mut hidden_dims = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden_dims.push(get_u32(&mut r)? as usize);
    }
    let output_dim = get_u32(&mut r)? as usize;
    let mut tags = [0u8; 2];
    r.read_exact(&mut tags)?;
    let activation = match tags[0] {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        t => {
            return Err(ModelError::Checkpoint(format!(
                "{}: unknown activation tag {t}",
                path.display()
            )))
        }
    };
    let shared_inner_lr = tags[1] != 0;
    let seed = get_u64(&mut r)?;
    let spec = NetSpec {
        input_dim,
        hidden_dims,
        output_dim,
        activation,
        seed,
        shared_inner_lr,
    };

    let mut params = init_params(&spec, 1.0)?;
    let count = params.weight_count() + params.log_inner_lr.len();
    let mut flat = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        flat.push(f64::from_le_bytes(buf));
    }
    if r.read(&mut buf)? != 0 {
        return Err(ModelError::Checkpoint(format!(
            "{}: trailing bytes after {count} parameters",
            path.display()
        )));
    }
    params.load_flat(&flat, true)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bit_exact() {
        let spec = NetSpec {
            input_dim: 7,
            hidden_dims: vec![9, 4],
            output_dim: 3,
            activation: Activation::Tanh,
            seed: 123,
            shared_inner_lr: false,
        };
        let params = init_params(&spec, 0.03).unwrap();
        let dir = std::env::temp_dir().join("osaka_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.spec, spec);
        let a = params.flatten(true);
        let b = loaded.flatten(true);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

        // Re-saving yields byte-identical files.
        let path2 = dir.join("p2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("osaka_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.ckpt");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
