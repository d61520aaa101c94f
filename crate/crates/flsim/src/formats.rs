//! Binary model and update records, and the metrics CSV.
//!
//! All binary integers and floats are little-endian.

use std::io::{Read, Write};

use anyhow::{bail, ensure};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use flsim_core::analysis::{BoundKind, MetricsRecord};
use flsim_core::encoding::{EncodedUpdate, LatticePayload, Payload};
use flsim_core::model::ParamVector;

pub const MODEL_MAGIC: &[u8; 8] = b"FLSMODEL";
pub const UPDATE_MAGIC: &[u8; 8] = b"FLSUPDT\0";
pub const FORMAT_VERSION: u16 = 1;

/// Header: magic, version `u16`, model count `u32`, dimension `u64`; then
/// `count · dim` `f64` values, one model after another.
pub fn write_model<W: Write>(mut w: W, models: &[ParamVector]) -> anyhow::Result<()> {
    let dim = models.first().map_or(0, |m| m.len());
    ensure!(models.iter().all(|m| m.len() == dim), "models differ in dimension");
    w.write_all(MODEL_MAGIC)?;
    w.write_u16::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(models.len() as u32)?;
    w.write_u64::<LE>(dim as u64)?;
    for m in models {
        for v in m.iter() {
            w.write_f64::<LE>(*v)?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> anyhow::Result<Vec<ParamVector>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    ensure!(&magic == MODEL_MAGIC, "not a model file");
    let version = r.read_u16::<LE>()?;
    ensure!(version == FORMAT_VERSION, "unsupported model format version {version}");
    let count = r.read_u32::<LE>()? as usize;
    let dim = r.read_u64::<LE>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut m = vec![0.0; dim];
        r.read_f64_into::<LE>(&mut m)?;
        out.push(m.into());
    }
    Ok(out)
}

const TAG_DENSE: u8 = 0;
const TAG_SPARSE: u8 = 1;
const TAG_QUANTIZED: u8 = 2;
const TAG_LATTICE: u8 = 3;
const TAG_NOISED: u8 = 4;

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LE>(v.len() as u64)?;
    v.iter().try_for_each(|x| w.write_f64::<LE>(*x))
}

fn write_i64s<W: Write>(w: &mut W, v: &[i64]) -> std::io::Result<()> {
    w.write_u64::<LE>(v.len() as u64)?;
    v.iter().try_for_each(|x| w.write_i64::<LE>(*x))
}

fn read_len<R: Read>(r: &mut R) -> anyhow::Result<usize> {
    let n = r.read_u64::<LE>()?;
    ensure!(n <= 1 << 32, "implausible length {n}");
    Ok(n as usize)
}

fn read_f64s<R: Read>(r: &mut R) -> anyhow::Result<Vec<f64>> {
    let mut v = vec![0.0; read_len(r)?];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

fn read_i64s<R: Read>(r: &mut R) -> anyhow::Result<Vec<i64>> {
    let mut v = vec![0; read_len(r)?];
    r.read_i64_into::<LE>(&mut v)?;
    Ok(v)
}

/// Header: magic, version, user, round, samples, bit cost, payload tag; then
/// the payload fields with length-prefixed arrays.
pub fn write_update<W: Write>(mut w: W, e: &EncodedUpdate) -> anyhow::Result<()> {
    w.write_all(UPDATE_MAGIC)?;
    w.write_u16::<LE>(FORMAT_VERSION)?;
    w.write_u64::<LE>(e.user as u64)?;
    w.write_u64::<LE>(e.round as u64)?;
    w.write_u64::<LE>(e.samples as u64)?;
    w.write_u64::<LE>(e.bit_cost)?;
    match &e.payload {
        Payload::Dense(v) => {
            w.write_u8(TAG_DENSE)?;
            write_f64s(&mut w, v)?;
        }
        Payload::Sparse {
            dim,
            indices,
            values,
        } => {
            w.write_u8(TAG_SPARSE)?;
            w.write_u64::<LE>(*dim as u64)?;
            w.write_u64::<LE>(indices.len() as u64)?;
            indices.iter().try_for_each(|i| w.write_u32::<LE>(*i))?;
            write_f64s(&mut w, values)?;
        }
        Payload::Quantized { step, indices } => {
            w.write_u8(TAG_QUANTIZED)?;
            w.write_f64::<LE>(*step)?;
            write_i64s(&mut w, indices)?;
        }
        Payload::Lattice(p) => {
            w.write_u8(TAG_LATTICE)?;
            w.write_u64::<LE>(p.dim as u64)?;
            w.write_u8(p.lattice_dim as u8)?;
            w.write_f64::<LE>(p.norm)?;
            w.write_u64::<LE>(p.seed)?;
            w.write_u8(u8::from(p.dithered))?;
            write_i64s(&mut w, &p.coords)?;
        }
        Payload::Noised { values, sigma } => {
            w.write_u8(TAG_NOISED)?;
            w.write_f64::<LE>(*sigma)?;
            write_f64s(&mut w, values)?;
        }
    }
    Ok(())
}

pub fn read_update<R: Read>(mut r: R) -> anyhow::Result<EncodedUpdate> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    ensure!(&magic == UPDATE_MAGIC, "not an update record");
    let version = r.read_u16::<LE>()?;
    ensure!(version == FORMAT_VERSION, "unsupported update format version {version}");
    let user = r.read_u64::<LE>()? as usize;
    let round = r.read_u64::<LE>()? as usize;
    let samples = r.read_u64::<LE>()? as usize;
    let bit_cost = r.read_u64::<LE>()?;
    let payload = match r.read_u8()? {
        TAG_DENSE => Payload::Dense(read_f64s(&mut r)?),
        TAG_SPARSE => {
            let dim = r.read_u64::<LE>()? as usize;
            let mut indices = vec![0u32; read_len(&mut r)?];
            r.read_u32_into::<LE>(&mut indices)?;
            let values = read_f64s(&mut r)?;
            ensure!(indices.len() == values.len(), "sparse payload length mismatch");
            ensure!(indices.iter().all(|i| (*i as usize) < dim), "sparse index out of range");
            Payload::Sparse {
                dim,
                indices,
                values,
            }
        }
        TAG_QUANTIZED => {
            let step = r.read_f64::<LE>()?;
            Payload::Quantized {
                step,
                indices: read_i64s(&mut r)?,
            }
        }
        TAG_LATTICE => {
            let dim = r.read_u64::<LE>()? as usize;
            let lattice_dim = r.read_u8()? as usize;
            let norm = r.read_f64::<LE>()?;
            let seed = r.read_u64::<LE>()?;
            let dithered = r.read_u8()? != 0;
            Payload::Lattice(LatticePayload {
                dim,
                lattice_dim,
                norm,
                coords: read_i64s(&mut r)?,
                seed,
                dithered,
            })
        }
        TAG_NOISED => {
            let sigma = r.read_f64::<LE>()?;
            Payload::Noised {
                values: read_f64s(&mut r)?,
                sigma,
            }
        }
        t => bail!("unknown payload tag {t}"),
    };
    Ok(EncodedUpdate {
        user,
        round,
        samples,
        payload,
        bit_cost,
    })
}

pub const METRICS_COLUMNS: [&str; 6] = ["round", "delay_s", "bits", "train_loss", "test_loss", "test_acc"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Fixed columns followed by one column per bound; missing values are empty cells.
pub fn write_metrics<W: Write>(w: W, rows: &[MetricsRecord], bounds: &[BoundKind]) -> anyhow::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let header: Vec<&str> = METRICS_COLUMNS
        .iter()
        .copied()
        .chain(bounds.iter().map(BoundKind::column))
        .collect();
    out.write_record(&header)?;
    for r in rows {
        ensure!(r.bounds.len() == bounds.len(), "row {} has {} bound values", r.round, r.bounds.len());
        let mut rec = vec![
            r.round.to_string(),
            r.delay_s.to_string(),
            r.bits.to_string(),
            r.train_loss.to_string(),
            opt(r.test_loss),
            opt(r.test_acc),
        ];
        rec.extend(r.bounds.iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(payload: Payload) -> EncodedUpdate {
        EncodedUpdate {
            user: 3,
            round: 17,
            samples: 120,
            payload,
            bit_cost: 999,
        }
    }

    #[test]
    fn every_payload_round_trips() {
        let payloads = [
            Payload::Dense(vec![1.5, -0.0, f64::MIN_POSITIVE]),
            Payload::Sparse {
                dim: 10,
                indices: vec![1, 7],
                values: vec![0.25, -3.0],
            },
            Payload::Quantized {
                step: 0.125,
                indices: vec![-4, 0, 9],
            },
            Payload::Lattice(LatticePayload {
                dim: 5,
                lattice_dim: 2,
                norm: 2.75,
                coords: vec![1, -2, 3, 0, 0, 5],
                seed: u64::MAX - 7,
                dithered: true,
            }),
            Payload::Noised {
                values: vec![0.5; 4],
                sigma: 0.01,
            },
        ];
        for p in payloads {
            let e = update(p);
            let mut buf = Vec::new();
            write_update(&mut buf, &e).unwrap();
            assert_eq!(read_update(buf.as_slice()).unwrap(), e);
        }
    }

    #[test]
    fn corrupted_records_are_rejected() {
        let mut buf = Vec::new();
        write_update(&mut buf, &update(Payload::Dense(vec![1.0]))).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_update(bad.as_slice()).is_err());
        assert!(read_update(&buf[..buf.len() - 1]).is_err());
        let mut model = Vec::new();
        write_model(&mut model, &[vec![1.0].into()]).unwrap();
        assert!(read_update(model.as_slice()).is_err());
    }

    #[test]
    fn model_file_round_trips() {
        let models: Vec<ParamVector> = vec![vec![1.0, 2.0, 3.0].into(), vec![-1.0, 0.5, 1e-300].into()];
        let mut buf = Vec::new();
        write_model(&mut buf, &models).unwrap();
        assert_eq!(buf.len(), 8 + 2 + 4 + 8 + 6 * 8);
        assert_eq!(read_model(buf.as_slice()).unwrap(), models);
    }

    #[test]
    fn metrics_have_fixed_columns_and_empty_missing_cells() {
        let row = MetricsRecord {
            round: 2,
            step: 10,
            delay_s: 0.5,
            bits: 640,
            train_loss: 0.25,
            test_loss: None,
            test_acc: None,
            participants: vec![0, 1],
            bounds: vec![3.0],
        };
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[row], &[BoundKind::Fedavg]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "round,delay_s,bits,train_loss,test_loss,test_acc,bound_fedavg\n2,0.5,640,0.25,,,3\n"
        );
    }
}
