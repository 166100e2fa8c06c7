//! Binary on-disk format for trained transformations.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   b"CMCT"
//! u32     format version (currently 1)
//! u8      variant tag (0 m2m, 1 unified, 2 e2e_mean, 3 e2e_weighted, 4 concat)
//! u32     provenance JSON length, followed by that many bytes
//!         (train config, model ids, loss history)
//! u32     net count, then per net:
//!   u32 in_dim, u32 out_dim, u8 has_weight_head, parameters f32 LE in
//!   canonical order (projection, blocks, weight head)
//! u8      query net present flag, then the query net in the same encoding
//! u32     head count, then per head: u32 rows, u32 cols, rows*cols f32 LE
//! ```
//!
//! Parameters are stored at f32 precision; a freshly trained transform
//! loses precision on its first save, after which write/read round-trips
//! are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

use super::{
    Affine, Block, ClassifierHead, TrainConfig, TrainVariant, TrainedTransform, TransformNet,
    NUM_BLOCKS, REDUCTION_RATIO,
};

const MAGIC: &[u8; 4] = b"CMCT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Provenance {
    cfg: TrainConfig,
    gallery_model_ids: Vec<String>,
    query_model_id: String,
    loss_history: Vec<f64>,
}

fn variant_tag(v: TrainVariant) -> u8 {
    match v {
        TrainVariant::M2m => 0,
        TrainVariant::Unified => 1,
        TrainVariant::E2eMean => 2,
        TrainVariant::E2eWeighted => 3,
        TrainVariant::Concat => 4,
    }
}

fn tag_variant(tag: u8) -> Result<TrainVariant> {
    Ok(match tag {
        0 => TrainVariant::M2m,
        1 => TrainVariant::Unified,
        2 => TrainVariant::E2eMean,
        3 => TrainVariant::E2eWeighted,
        4 => TrainVariant::Concat,
        other => return Err(Error::format(format!("unknown variant tag {other}"))),
    })
}

pub fn write_trained_transform(path: &Path, t: &TrainedTransform) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[variant_tag(t.variant)])?;
    let prov = serde_json::to_vec(&Provenance {
        cfg: t.cfg.clone(),
        gallery_model_ids: t.gallery_model_ids.clone(),
        query_model_id: t.query_model_id.clone(),
        loss_history: t.loss_history.clone(),
    })
    .map_err(|e| Error::format(format!("provenance encoding: {e}")))?;
    w.write_all(&(prov.len() as u32).to_le_bytes())?;
    w.write_all(&prov)?;

    w.write_all(&(t.nets.len() as u32).to_le_bytes())?;
    for net in &t.nets {
        write_net(&mut w, net)?;
    }
    match &t.query_net {
        Some(qn) => {
            w.write_all(&[1])?;
            write_net(&mut w, qn)?;
        }
        None => w.write_all(&[0])?,
    }
    w.write_all(&(t.heads.len() as u32).to_le_bytes())?;
    for head in &t.heads {
        w.write_all(&(head.weights.rows as u32).to_le_bytes())?;
        w.write_all(&(head.weights.cols as u32).to_le_bytes())?;
        write_f32s(&mut w, &head.weights.data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trained_transform(path: &Path) -> Result<TrainedTransform> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("truncated header"))?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported format version {version}"
        )));
    }
    let variant = tag_variant(read_u8(&mut r)?)?;
    let prov_len = read_u32(&mut r)? as usize;
    let mut prov_bytes = vec![0u8; prov_len];
    r.read_exact(&mut prov_bytes)
        .map_err(|_| Error::format("truncated provenance"))?;
    let prov: Provenance = serde_json::from_slice(&prov_bytes)
        .map_err(|e| Error::format(format!("provenance decoding: {e}")))?;

    let net_count = read_u32(&mut r)? as usize;
    let mut nets = Vec::with_capacity(net_count);
    for _ in 0..net_count {
        nets.push(read_net(&mut r)?);
    }
    let query_net = match read_u8(&mut r)? {
        0 => None,
        1 => Some(read_net(&mut r)?),
        other => return Err(Error::format(format!("bad query net flag {other}"))),
    };
    let head_count = read_u32(&mut r)? as usize;
    let mut heads = Vec::with_capacity(head_count);
    for _ in 0..head_count {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut weights = Mat::zeros(rows, cols);
        read_f32s(&mut r, &mut weights.data)?;
        heads.push(ClassifierHead {
            weights,
            scale: prov.cfg.head_scale,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after last head"));
    }
    Ok(TrainedTransform {
        variant,
        gallery_model_ids: prov.gallery_model_ids,
        query_model_id: prov.query_model_id,
        nets,
        query_net,
        heads,
        loss_history: prov.loss_history,
        cfg: prov.cfg,
    })
}

fn write_net<W: Write>(w: &mut W, net: &TransformNet) -> Result<()> {
    w.write_all(&(net.in_dim as u32).to_le_bytes())?;
    w.write_all(&(net.out_dim as u32).to_le_bytes())?;
    w.write_all(&[u8::from(net.weight_head.is_some())])?;
    let mut params = Vec::new();
    net.for_each_param(&mut |v| params.push(v));
    write_f32s(w, &params)?;
    Ok(())
}

fn read_net<R: Read>(r: &mut R) -> Result<TransformNet> {
    let in_dim = read_u32(r)? as usize;
    let out_dim = read_u32(r)? as usize;
    let has_weight_head = match read_u8(r)? {
        0 => false,
        1 => true,
        other => return Err(Error::format(format!("bad weight head flag {other}"))),
    };
    if in_dim < 2 || out_dim < 2 || !out_dim.is_multiple_of(REDUCTION_RATIO) {
        return Err(Error::format(format!(
            "stored net dims {in_dim} -> {out_dim} are invalid"
        )));
    }
    let bottleneck = out_dim / REDUCTION_RATIO;
    let mut net = TransformNet {
        in_dim,
        out_dim,
        projection: Affine {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        },
        blocks: (0..NUM_BLOCKS)
            .map(|_| Block {
                reduce: Affine {
                    w: Mat::zeros(bottleneck, out_dim),
                    b: vec![0.0; bottleneck],
                },
                expand: Affine {
                    w: Mat::zeros(out_dim, bottleneck),
                    b: vec![0.0; out_dim],
                },
            })
            .collect(),
        weight_head: if has_weight_head {
            Some(Affine {
                w: Mat::zeros(1, out_dim),
                b: vec![0.0],
            })
        } else {
            None
        },
    };
    let mut params = vec![0.0; net.param_count()];
    read_f32s(r, &mut params)?;
    let mut i = 0;
    net.for_each_param_mut(&mut |v| {
        *v = params[i];
        i += 1;
    });
    Ok(net)
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, out: &mut [f64]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format("truncated parameter payload"))?;
    for (v, c) in out.iter_mut().zip(buf.chunks_exact(4)) {
        let f = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !f.is_finite() {
            return Err(Error::format("non-finite stored parameter"));
        }
        *v = f as f64;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("unexpected end of file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("unexpected end of file"))?;
    Ok(b[0])
}
