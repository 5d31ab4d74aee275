use serde::{Deserialize, Serialize};

use super::volume::{Case, LabelGrid, BACKGROUND};
use crate::tensor::Rng;
use crate::{Error, Result};

/// Foreground-containing to background-only patch ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRatio {
    pub pos: usize,
    pub neg: usize,
}

impl Default for PatchRatio {
    fn default() -> Self {
        PatchRatio { pos: 2, neg: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub origin: [usize; 3],
    pub case: Case,
    pub positive: bool,
    /// A background-only window did not exist; the window with the least
    /// foreground was used instead.
    pub fallback: bool,
}

/// Summed-volume table over foreground indicators, `(d+1)^3` entries.
struct ForegroundTable {
    dims: [usize; 3],
    sums: Vec<u32>,
}

impl ForegroundTable {
    fn new(mask: &LabelGrid) -> Self {
        let [nx, ny, nz] = mask.dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut sums = vec![0u32; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let g = |i: usize| sums[i] as i64;
                    let v = (mask.data[x + nx * (y + ny * z)] != BACKGROUND) as i64;
                    let s = v + g(at(x, y + 1, z + 1)) + g(at(x + 1, y, z + 1)) + g(at(x + 1, y + 1, z))
                        - g(at(x, y, z + 1))
                        - g(at(x, y + 1, z))
                        - g(at(x + 1, y, z))
                        + g(at(x, y, z));
                    sums[at(x + 1, y + 1, z + 1)] = s as u32;
                }
            }
        }
        ForegroundTable { dims: mask.dims, sums }
    }

    fn window(&self, o: [usize; 3], s: usize) -> u32 {
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let at = |x: usize, y: usize, z: usize| self.sums[x + sx * (y + sy * z)] as i64;
        let [x0, y0, z0] = o;
        let [x1, y1, z1] = [x0 + s, y0 + s, z0 + s];
        let v = at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) + at(x0, y1, z0)
            + at(x1, y0, z0)
            - at(x0, y0, z0);
        v as u32
    }
}

/// Draws `count` cubic patches of side `size`. Patch `i` is a positive
/// draw when `i mod (pos + neg) < pos`, so any prefix of the list follows
/// the ratio as closely as integers allow.
pub fn sample_patches(case: &Case, size: usize, ratio: PatchRatio, count: usize, rng: &mut Rng) -> Result<Vec<Patch>> {
    let dims = case.ct.dims;
    if size == 0 || dims.iter().any(|&d| d < size) {
        return Err(Error::invalid(format!("patch size {size} does not fit {dims:?}")));
    }
    if ratio.pos + ratio.neg == 0 {
        return Err(Error::invalid("patch ratio 0:0"));
    }
    let fg: Vec<usize> = case
        .mask
        .data
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != BACKGROUND)
        .map(|(i, _)| i)
        .collect();
    if ratio.pos > 0 && fg.is_empty() && count > 0 {
        return Err(Error::Data(format!("{}: no foreground voxels for positive patches", case.id)));
    }

    let span = [dims[0] - size + 1, dims[1] - size + 1, dims[2] - size + 1];
    let mut empty_windows: Option<Vec<[usize; 3]>> = None;
    let mut least_fg: Option<[usize; 3]> = None;
    let table = ForegroundTable::new(&case.mask);

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let positive = i % (ratio.pos + ratio.neg) < ratio.pos;
        let (origin, fallback) = if positive {
            let v = fg[rng.below(fg.len())];
            let p = [v % dims[0], (v / dims[0]) % dims[1], v / (dims[0] * dims[1])];
            let o = [0, 1, 2].map(|a| p[a].saturating_sub(size / 2).min(dims[a] - size));
            (o, false)
        } else {
            let windows = empty_windows.get_or_insert_with(|| {
                let mut w = Vec::new();
                for z in 0..span[2] {
                    for y in 0..span[1] {
                        for x in 0..span[0] {
                            if table.window([x, y, z], size) == 0 {
                                w.push([x, y, z]);
                            }
                        }
                    }
                }
                w
            });
            if windows.is_empty() {
                let o = *least_fg.get_or_insert_with(|| {
                    let mut best = ([0; 3], u32::MAX);
                    for z in 0..span[2] {
                        for y in 0..span[1] {
                            for x in 0..span[0] {
                                let c = table.window([x, y, z], size);
                                if c < best.1 {
                                    best = ([x, y, z], c);
                                }
                            }
                        }
                    }
                    best.0
                });
                (o, true)
            } else {
                (windows[rng.below(windows.len())], false)
            }
        };
        out.push(Patch {
            origin,
            case: case.crop(origin, size)?,
            positive,
            fallback,
        });
    }
    Ok(out)
}

/// Mirrors every volume of the case along `axis` (0 = x, 1 = y, 2 = z).
pub fn flip(case: &mut Case, axis: usize) {
    let dims = case.ct.dims;
    let mirror = |data: &mut Vec<f32>| flip_values(data, dims, axis);
    mirror(&mut case.ct.data);
    if let Some(p) = case.pet.as_mut() {
        mirror(&mut p.data);
    }
    flip_values(&mut case.mask.data, dims, axis);
}

fn flip_values<T: Copy>(data: &mut [T], dims: [usize; 3], axis: usize) {
    let [nx, ny, nz] = dims;
    let src = data.to_vec();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut p = [x, y, z];
                p[axis] = dims[axis] - 1 - p[axis];
                data[x + nx * (y + ny * z)] = src[p[0] + nx * (p[1] + ny * p[2])];
            }
        }
    }
}

/// Random flips along each axis with probability one half.
pub fn random_flips(case: &mut Case, rng: &mut Rng) {
    for axis in 0..3 {
        if rng.bernoulli(0.5) {
            flip(case, axis);
        }
    }
}

/// Quarter turn in the x/y plane; requires `nx == ny`.
pub fn rot90_xy(case: &mut Case) -> Result<()> {
    let [nx, ny, nz] = case.ct.dims;
    if nx != ny {
        return Err(Error::invalid("rot90 needs a square x/y plane"));
    }
    fn turn<T: Copy>(data: &mut [T], n: usize, nz: usize) {
        let src = data.to_vec();
        for z in 0..nz {
            for y in 0..n {
                for x in 0..n {
                    data[x + n * (y + n * z)] = src[y + n * ((n - 1 - x) + n * z)];
                }
            }
        }
    }
    turn(&mut case.ct.data, nx, nz);
    if let Some(p) = case.pet.as_mut() {
        turn(&mut p.data, nx, nz);
    }
    turn(&mut case.mask.data, nx, nz);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::volume::{Modality, Volume, TUMOR};

    fn single_lesion(side: usize) -> Case {
        let mut mask = LabelGrid::zeros([side; 3]);
        for z in 2..5 {
            for y in 2..5 {
                for x in 2..5 {
                    mask.data[x + side * (y + side * z)] = TUMOR;
                }
            }
        }
        let ct: Vec<f32> = (0..side * side * side).map(|i| i as f32).collect();
        Case {
            id: "one".into(),
            center: "A".into(),
            ct: Volume::new([side; 3], [1.0; 3], Modality::Ct, ct).unwrap(),
            pet: None,
            mask,
            survival: None,
            ehr: None,
        }
    }

    #[test]
    fn two_to_one() {
        let case = single_lesion(24);
        let mut rng = Rng::new(5);
        let patches = sample_patches(&case, 8, PatchRatio::default(), 3, &mut rng).unwrap();
        let with_fg: Vec<bool> = patches.iter().map(|p| p.case.mask.foreground() > 0).collect();
        assert_eq!(with_fg, vec![true, true, false]);
        assert!(patches.iter().all(|p| !p.fallback));
    }

    #[test]
    fn positives_only() {
        let case = single_lesion(16);
        let mut rng = Rng::new(1);
        let patches = sample_patches(&case, 8, PatchRatio { pos: 1, neg: 0 }, 10, &mut rng).unwrap();
        assert!(patches.iter().all(|p| p.case.mask.foreground() > 0));
    }

    #[test]
    fn same_seed_same_origins() {
        let case = single_lesion(20);
        let a = sample_patches(&case, 8, PatchRatio::default(), 6, &mut Rng::new(9)).unwrap();
        let b = sample_patches(&case, 8, PatchRatio::default(), 6, &mut Rng::new(9)).unwrap();
        let o = |v: &[Patch]| v.iter().map(|p| p.origin).collect::<Vec<_>>();
        assert_eq!(o(&a), o(&b));
    }

    #[test]
    fn no_foreground_with_positives_is_an_error() {
        let mut case = single_lesion(12);
        case.mask = LabelGrid::zeros([12; 3]);
        assert!(sample_patches(&case, 8, PatchRatio::default(), 3, &mut Rng::new(1)).is_err());
        assert!(sample_patches(&case, 8, PatchRatio { pos: 0, neg: 1 }, 3, &mut Rng::new(1)).is_ok());
    }

    #[test]
    fn flips_and_turns_are_involutions() {
        let case = single_lesion(6);
        let mut c = case.clone();
        flip(&mut c, 1);
        assert_ne!(c.ct, case.ct);
        flip(&mut c, 1);
        assert_eq!(c.ct, case.ct);
        for _ in 0..4 {
            rot90_xy(&mut c).unwrap();
        }
        assert_eq!(c.ct, case.ct);
        assert_eq!(c.mask, case.mask);
    }
}
