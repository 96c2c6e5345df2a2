//! Model checkpoint format.
//!
//! Little-endian binary: magic, version, config fields, then the f32 weight
//! blob in the fixed parameter order, then the SHA-256 of that blob. Loading
//! verifies the hash.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{FrozenModel, LayerWeights, ModelConfig, Weights};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SLMODEL\0";
const VERSION: u32 = 1;

fn write_u32(f: &mut impl Write, v: u32, path: &str) -> Result<()> {
    f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn save_model(model: &FrozenModel, path: &Path) -> Result<()> {
    let p = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&p, e))?;
    let cfg = model.config();
    f.write_all(MAGIC).map_err(|e| Error::io(&p, e))?;
    write_u32(&mut f, VERSION, &p)?;
    for v in [
        cfg.num_layers,
        cfg.model_dim,
        cfg.num_heads,
        cfg.vocab_size,
        cfg.max_context,
        cfg.intervention_layer,
    ] {
        write_u32(&mut f, v as u32, &p)?;
    }
    let mut hasher = Sha256::new();
    let mut blob = Vec::new();
    for t in model.weights().tensors() {
        for &x in t.data() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    hasher.update(&blob);
    f.write_all(&blob).map_err(|e| Error::io(&p, e))?;
    let digest: [u8; 32] = hasher.finalize().into();
    f.write_all(&digest).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FrozenModel> {
    let p = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(&p, e))?;
    let fmt = |detail: &str| Error::Format {
        path: p.clone(),
        detail: detail.to_string(),
    };

    if buf.len() < 8 + 4 + 24 + 32 {
        return Err(fmt("file too short"));
    }
    if &buf[..8] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fmt(&format!("unsupported version {}", version)));
    }
    let mut fields = [0usize; 6];
    for (i, field) in fields.iter_mut().enumerate() {
        let off = 12 + i * 4;
        *field = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
    }
    let cfg = ModelConfig {
        num_layers: fields[0],
        model_dim: fields[1],
        num_heads: fields[2],
        vocab_size: fields[3],
        max_context: fields[4],
        intervention_layer: fields[5],
    };
    cfg.validate().map_err(|e| fmt(&format!("invalid config: {}", e)))?;

    let shapes = weight_shapes(&cfg);
    let n_params: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let blob_start = 12 + 24;
    let blob_end = blob_start + n_params * 4;
    if buf.len() != blob_end + 32 {
        return Err(fmt(&format!(
            "expected {} bytes, found {}",
            blob_end + 32,
            buf.len()
        )));
    }
    let blob = &buf[blob_start..blob_end];
    let digest: [u8; 32] = Sha256::digest(blob).into();
    if digest != buf[blob_end..] {
        return Err(fmt("weight hash mismatch"));
    }

    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut take = |shape: &[usize]| -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        Tensor::new(shape.to_vec(), data).expect("shape accounted for")
    };

    let emb = take(&shapes[0]);
    let pos = take(&shapes[1]);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for li in 0..cfg.num_layers {
        let base = 2 + li * 8;
        layers.push(LayerWeights {
            wq: take(&shapes[base]),
            wk: take(&shapes[base + 1]),
            wv: take(&shapes[base + 2]),
            wo: take(&shapes[base + 3]),
            w1: take(&shapes[base + 4]),
            w2: take(&shapes[base + 5]),
            g1: take(&shapes[base + 6]),
            g2: take(&shapes[base + 7]),
        });
    }
    let gf = take(&shapes[shapes.len() - 2]);
    let w_out = take(&shapes[shapes.len() - 1]);

    FrozenModel::freeze(
        cfg,
        Weights {
            emb,
            pos,
            layers,
            gf,
            w_out,
        },
    )
}

fn weight_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let d = cfg.model_dim;
    let h = cfg.hidden_mlp();
    let mut shapes = vec![vec![cfg.vocab_size, d], vec![cfg.max_context, d]];
    for _ in 0..cfg.num_layers {
        shapes.extend([
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![h, d],
            vec![d, h],
            vec![d],
            vec![d],
        ]);
    }
    shapes.push(vec![d]);
    shapes.push(vec![cfg.vocab_size, d]);
    shapes
}
