//! Universal vector quantization with subtractive dither.
//!
//! The encoder normalizes the update by `ζ‖u‖`, splits it into `M̄` subvectors
//! of the lattice dimension (zero-padding the tail), adds a dither drawn
//! uniformly over the basic cell and rounds to the nearest lattice point. The
//! decoder regenerates the same dither from the shared seed and subtracts it.

use alloc::vec;
use alloc::vec::Vec;

use super::{
    entropy_bits, DitherMode, EncodedUpdate, LatticePayload, LatticeSpec, ModelUpdate, Payload,
    FLOAT_BITS,
};
use crate::error::{FlError, Result};
use crate::model::ParamVector;
use crate::rng::dither_rng;

pub fn uveqfed_encode(
    u: &ModelUpdate,
    lattice: &LatticeSpec,
    shared_seed: u64,
    dither: DitherMode,
) -> EncodedUpdate {
    let d = u.dim();
    let l = lattice.dim();
    let norm = u.delta.norm();
    if norm == 0.0 {
        let payload = LatticePayload {
            dim: d,
            lattice_dim: l,
            norm: 0.0,
            coords: Vec::new(),
            seed: shared_seed,
            dithered: dither == DitherMode::On,
        };
        return EncodedUpdate::wrap(u, Payload::Lattice(payload), FLOAT_BITS);
    }
    let m = lattice.subvectors(d);
    let scale = lattice.zeta() * norm;
    let mut rng = dither_rng(shared_seed);
    let mut coords = vec![0i64; m * l];
    let mut z = [0.0; 2];
    let mut dv = [0.0; 2];
    for j in 0..m {
        if dither == DitherMode::On {
            lattice.sample_dither(&mut rng, &mut dv[..l]);
        }
        for k in 0..l {
            let idx = j * l + k;
            let x = if idx < d { u.delta[idx] / scale } else { 0.0 };
            z[k] = x + dv[k];
        }
        lattice.nearest(&z[..l], &mut coords[j * l..(j + 1) * l]);
    }
    let bits = entropy_bits(coords.chunks(l)) + FLOAT_BITS;
    let payload = LatticePayload {
        dim: d,
        lattice_dim: l,
        norm,
        coords,
        seed: shared_seed,
        dithered: dither == DitherMode::On,
    };
    EncodedUpdate::wrap(u, Payload::Lattice(payload), bits)
}

/// Inverse of [`uveqfed_encode`]; `shared_seed` must be the encoder's seed.
pub fn uveqfed_decode(
    e: &EncodedUpdate,
    lattice: &LatticeSpec,
    shared_seed: u64,
) -> Result<ModelUpdate> {
    let Payload::Lattice(p) = &e.payload else {
        return Err(FlError::UnsupportedPayload(e.payload.kind()));
    };
    if p.seed != shared_seed {
        return Err(FlError::SeedMismatch {
            expected: p.seed,
            actual: shared_seed,
        });
    }
    crate::error::check_dim(lattice.dim(), p.lattice_dim)?;
    if p.norm == 0.0 {
        return Ok(ModelUpdate::new(
            ParamVector::zeros(p.dim),
            e.user,
            e.round,
            e.samples,
        ));
    }
    let l = lattice.dim();
    let m = lattice.subvectors(p.dim);
    crate::error::check_dim(m * l, p.coords.len())?;
    let scale = lattice.zeta() * p.norm;
    let mut rng = dither_rng(shared_seed);
    let mut out = Vec::with_capacity(m * l);
    let mut point = [0.0; 2];
    let mut dv = [0.0; 2];
    for j in 0..m {
        if p.dithered {
            lattice.sample_dither(&mut rng, &mut dv[..l]);
        }
        lattice.point(&p.coords[j * l..(j + 1) * l], &mut point[..l]);
        for k in 0..l {
            out.push((point[k] - dv[k]) * scale);
        }
    }
    out.truncate(p.dim);
    Ok(ModelUpdate::new(out.into(), e.user, e.round, e.samples))
}
