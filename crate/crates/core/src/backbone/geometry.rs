//! Index maps between voxel grids and token sequences.
//!
//! Volumes are stored x-fastest (`x + D·(y + D·z)`), one row per voxel when
//! viewed as a `[V, channels]` matrix. Tokens follow raster order with z
//! slowest: `t = (tz·g + ty)·g + tx`.

use std::sync::Arc;

use super::ModelConfig;

/// Gather indices for one model geometry, shared between forward passes.
#[derive(Debug)]
pub struct Geometry {
    pub side: usize,
    pub patch: usize,
    pub grid: usize,
    patchify: [Arc<[usize]>; 2],
    depatch: [Arc<[usize]>; 4],
    upsample: [Arc<[usize]>; 3],
    stage_sides: [usize; 4],
}

impl Geometry {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (side, p, g) = (cfg.side, cfg.patch, cfg.grid());
        let c = cfg.dec_channels;
        let stage_sides = [0, 1, 2, 3].map(|j| g * cfg.stage_factor(j));
        Geometry {
            side,
            patch: p,
            grid: g,
            patchify: [patchify_index(side, p, 1), patchify_index(side, p, 2)],
            depatch: [0, 1, 2, 3].map(|j| depatch_index(g, cfg.stage_factor(j), c)),
            upsample: [1, 2, 3].map(|j| upsample_index(stage_sides[j - 1], c)),
            stage_sides,
        }
    }

    /// Maps a `[V, channels]` input to `[N, channels·p³]` patch rows.
    pub fn patchify(&self, channels: usize) -> Arc<[usize]> {
        self.patchify[channels - 1].clone()
    }

    /// Maps `[N, q³·c]` token features of stage `j` to a `[(g·q)³, c]` grid.
    pub fn depatch(&self, j: usize) -> Arc<[usize]> {
        self.depatch[j].clone()
    }

    /// Nearest-neighbour doubling from stage `j - 1` to stage `j`.
    pub fn upsample(&self, j: usize) -> Arc<[usize]> {
        self.upsample[j - 1].clone()
    }

    pub fn stage_side(&self, j: usize) -> usize {
        self.stage_sides[j]
    }
}

/// Column layout of a patch row: `ch·p³ + (dz·p + dy)·p + dx`.
pub fn patchify_index(side: usize, p: usize, channels: usize) -> Arc<[usize]> {
    let g = side / p;
    let p3 = p * p * p;
    let mut idx = vec![0usize; g * g * g * channels * p3];
    for tz in 0..g {
        for ty in 0..g {
            for tx in 0..g {
                let t = (tz * g + ty) * g + tx;
                let row = &mut idx[t * channels * p3..(t + 1) * channels * p3];
                for ch in 0..channels {
                    for dz in 0..p {
                        for dy in 0..p {
                            for dx in 0..p {
                                let (x, y, z) = (tx * p + dx, ty * p + dy, tz * p + dz);
                                let voxel = x + side * (y + side * z);
                                row[ch * p3 + (dz * p + dy) * p + dx] = voxel * channels + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse layout for the decoder: token `t` owns a `q³` block of voxels,
/// feature column `((dz·q + dy)·q + dx)·c + ch`.
pub fn depatch_index(g: usize, q: usize, c: usize) -> Arc<[usize]> {
    let s = g * q;
    let width = q * q * q * c;
    let mut idx = Vec::with_capacity(s * s * s * c);
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let t = ((z / q) * g + y / q) * g + x / q;
                let local = ((z % q) * q + y % q) * q + x % q;
                for ch in 0..c {
                    idx.push(t * width + local * c + ch);
                }
            }
        }
    }
    idx.into()
}

pub fn upsample_index(s: usize, c: usize) -> Arc<[usize]> {
    let t = 2 * s;
    let mut idx = Vec::with_capacity(t * t * t * c);
    for z in 0..t {
        for y in 0..t {
            for x in 0..t {
                let src = x / 2 + s * (y / 2 + s * (z / 2));
                for ch in 0..c {
                    idx.push(src * c + ch);
                }
            }
        }
    }
    idx.into()
}
