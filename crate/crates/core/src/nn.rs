//! Shared network plumbing: parameter initialisation, MLP forward passes and
//! the checkpoint container (JSON header line + little-endian f32 blob).

use std::fs;
use std::io::Write;
use std::path::Path;

use latentcf_autodiff::{Activation, Tape, Tensor, Var};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Uniform fan-in initialisation for a dense layer: `(weight [in, out], bias [out])`.
pub fn init_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> [Tensor; 2] {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    [
        Tensor::new(vec![fan_in, fan_out], w).expect("linear init shape"),
        Tensor::zeros(&[fan_out]),
    ]
}

/// `(kernel [out, in, k, k], bias [out])`.
pub fn init_conv(rng: &mut impl Rng, in_ch: usize, out_ch: usize, k: usize) -> [Tensor; 2] {
    let fan_in = in_ch * k * k;
    let bound = (6.0 / (fan_in + out_ch * k * k) as f64).sqrt();
    let w = (0..out_ch * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
    [
        Tensor::new(vec![out_ch, in_ch, k, k], w).expect("conv init shape"),
        Tensor::zeros(&[out_ch]),
    ]
}

/// Parameters for an MLP with the given layer widths, as alternating
/// weight/bias tensors.
pub fn init_mlp(rng: &mut impl Rng, sizes: &[usize]) -> Vec<Tensor> {
    sizes.windows(2).flat_map(|w| init_linear(rng, w[0], w[1])).collect()
}

/// Runs an MLP whose parameters are `params` (weight, bias, weight, bias...).
/// Hidden layers use `hidden`; the last layer is left linear.
pub fn mlp_forward(tape: &Tape, params: &[Var], mut x: Var, hidden: Activation) -> Result<Var> {
    let layers = params.len() / 2;
    for (i, wb) in params.chunks(2).enumerate() {
        x = tape.linear(x, wb[0], wb[1])?;
        if i + 1 < layers {
            x = tape.activation(x, hidden)?;
        }
    }
    Ok(x)
}

/// Tape-free forward pass of the same MLP for a single input row.
pub fn mlp_infer(params: &[Tensor], x: &[f64], hidden: Activation) -> Vec<f64> {
    let layers = params.len() / 2;
    let mut cur = x.to_vec();
    for (i, wb) in params.chunks(2).enumerate() {
        let (w, b) = (&wb[0], &wb[1]);
        let out = b.numel();
        let mut y = b.data().to_vec();
        for (k, &xv) in cur.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in y.iter_mut().zip(&w.data()[k * out..(k + 1) * out]) {
                *o += xv * wv;
            }
        }
        if i + 1 < layers {
            y.iter_mut().for_each(|v| *v = hidden.apply(*v));
        }
        cur = y;
    }
    cur
}

/// Rounds every parameter to the nearest f32 so that a checkpoint round
/// trip is lossless.
pub fn round_to_f32(params: &mut [Tensor]) {
    for p in params {
        for v in p.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

const CHECKPOINT_FORMAT: &str = "latentcf-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header<H> {
    format: String,
    version: u32,
    kind: String,
    meta: H,
    shapes: Vec<Vec<usize>>,
    blob_bytes: usize,
}

pub fn write_checkpoint<H: Serialize>(path: &Path, kind: &str, meta: &H, params: &[Tensor]) -> Result<()> {
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: kind.into(),
        meta,
        shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        blob_bytes: params.iter().map(|p| p.numel() * 4).sum(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for p in params {
        for &v in p.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<(H, Vec<Tensor>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("missing header line".into()))?;
    let header: Header<H> =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| malformed(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(malformed(format!("not a checkpoint (format '{}')", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if header.kind != kind {
        return Err(malformed(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != header.blob_bytes {
        return Err(malformed(format!("blob is {} bytes, header says {}", blob.len(), header.blob_bytes)));
    }
    let mut floats = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut params = Vec::with_capacity(header.shapes.len());
    for shape in header.shapes {
        let n = shape.iter().product();
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        if data.len() != n {
            return Err(malformed("blob shorter than declared shapes".into()));
        }
        params.push(Tensor::new(shape, data).map_err(|e| malformed(e.to_string()))?);
    }
    Ok((header.meta, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_free_forward_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = init_mlp(&mut rng, &[3, 6, 2]);
        let x = [0.3, -1.2, 0.0];
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let xin = tape.constant(Tensor::new(vec![1, 3], x.to_vec()).unwrap());
        let y = mlp_forward(&tape, &vars, xin, Activation::Tanh).unwrap();
        let fast = mlp_infer(&params, &x, Activation::Tanh);
        for (a, b) in tape.value(y).data().iter().zip(&fast) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact_after_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = init_mlp(&mut rng, &[5, 7, 3]);
        round_to_f32(&mut params);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, "test", &"meta".to_string(), &params).unwrap();
        let (meta, back): (String, _) = read_checkpoint(&path, "test").unwrap();
        assert_eq!(meta, "meta");
        assert_eq!(back, params);
        assert!(matches!(read_checkpoint::<String>(&path, "other"), Err(Error::Malformed { .. })));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint::<String>(&path, "test"), Err(Error::Malformed { .. })));
    }
}
