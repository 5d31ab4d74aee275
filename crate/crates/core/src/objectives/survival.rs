use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tape, Var};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 20;
/// Floor applied to a censored subject's survival mass before the log.
pub const SURVIVAL_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    /// Months to event or last follow-up.
    pub time: f64,
    /// True when the event was observed.
    pub event: bool,
    /// Discrete time bin, once assigned.
    pub bin: Option<usize>,
}

/// Quantile bin edges. `edges[k-1]` is the upper edge of bin `k-1`;
/// a time equal to an edge stays in the lower bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeBins {
    pub edges: Vec<f64>,
}

impl TimeBins {
    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn bin_of(&self, t: f64) -> usize {
        self.edges.partition_point(|&e| t > e)
    }

    pub fn assign(&self, records: &mut [SurvivalRecord]) {
        for r in records {
            r.bin = Some(self.bin_of(r.time));
        }
    }
}

/// Edge `k` (1 ≤ k < n_bins) is the `ceil(k·n/n_bins)`-th smallest time.
pub fn discretize_times(times: &[f64], n_bins: usize) -> Result<(TimeBins, Vec<usize>)> {
    if times.is_empty() {
        return Err(Error::invalid("no times to discretize"));
    }
    if n_bins < 2 {
        return Err(Error::invalid(format!("need at least two bins, got {n_bins}")));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::Data("times must be finite and non-negative".into()));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::Data("all times are identical; quantile bins are degenerate".into()));
    }
    let n = sorted.len();
    let edges = (1..n_bins)
        .map(|k| {
            let rank = (k * n).div_ceil(n_bins);
            sorted[rank.max(1) - 1]
        })
        .collect();
    let bins = TimeBins { edges };
    let assigned = times.iter().map(|&t| bins.bin_of(t)).collect();
    Ok((bins, assigned))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepHitConfig {
    /// Weight of the ranking term.
    pub eta: f64,
    /// Temperature of the exponential ranking penalty.
    pub sigma: f64,
}

impl Default for DeepHitConfig {
    fn default() -> Self {
        DeepHitConfig { eta: 0.1, sigma: 0.1 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DeepHitLoss {
    pub total: Var,
    pub nll: Var,
    pub rank: Option<Var>,
    /// Censored subjects whose survival mass hit [`SURVIVAL_FLOOR`].
    pub clamped: usize,
    pub comparable_pairs: usize,
}

fn bins_of(records: &[SurvivalRecord], k: usize) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| match r.bin {
            Some(b) if b < k => Ok(b),
            Some(b) => Err(Error::invalid(format!("bin {b} outside 0..{k}"))),
            None => Err(Error::invalid("survival record has no bin; run discretize_times first")),
        })
        .collect()
}

/// `(i, j)` with `i` an observed event strictly earlier than `t_j`.
pub fn comparable_pairs(records: &[SurvivalRecord]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, a) in records.iter().enumerate() {
        if !a.event {
            continue;
        }
        for (j, b) in records.iter().enumerate() {
            if a.time < b.time {
                out.push((i, j));
            }
        }
    }
    out
}

/// Single-risk DeepHit objective over a `[subjects, bins]` pmf.
pub fn deephit_loss<E: Real>(tape: &mut Tape<E>, pmf: Var, records: &[SurvivalRecord], cfg: &DeepHitConfig) -> Result<DeepHitLoss> {
    let (n, k) = match tape.shape(pmf) {
        [n, k] => (*n, *k),
        s => return Err(Error::shape("deephit_loss", format!("pmf must be [subjects, bins], got {s:?}"))),
    };
    if records.len() != n {
        return Err(Error::shape("deephit_loss", format!("{} records for {n} pmf rows", records.len())));
    }
    if !(cfg.sigma > 0.0 && cfg.eta >= 0.0) {
        return Err(Error::invalid("DeepHit needs sigma > 0 and eta >= 0"));
    }
    let bins = bins_of(records, k)?;

    // likelihood: P(T = bin) for events, P(T > bin) for censored subjects
    let mut select = vec![E::ZERO; n * k];
    for (i, r) in records.iter().enumerate() {
        if r.event {
            select[i * k + bins[i]] = E::ONE;
        } else {
            for b in bins[i] + 1..k {
                select[i * k + b] = E::ONE;
            }
        }
    }
    let select = tape.constant_from([n, k], select)?;
    let mass = tape.mul(pmf, select)?;
    let mass = tape.sum_cols(mass)?;
    let floor = E::from_f64(SURVIVAL_FLOOR);
    let clamped = tape.value(mass).iter().filter(|&&m| m < floor).count();
    let mass = tape.clamp_min(mass, floor)?;
    let logm = tape.log(mass)?;
    let nll = tape.mean(logm)?;
    let nll = tape.scale(nll, -E::ONE)?;

    let pairs = comparable_pairs(records);
    let (total, rank) = if pairs.is_empty() || cfg.eta == 0.0 {
        (nll, None)
    } else {
        // cumulative incidence F_i(b) = sum_{c <= b} pmf_ic
        let mut upper = vec![E::ZERO; k * k];
        for r in 0..k {
            for c in r..k {
                upper[r * k + c] = E::ONE;
            }
        }
        let upper = tape.constant_from([k, k], upper)?;
        let cif = tape.matmul(pmf, upper)?;
        let own: Arc<[usize]> = pairs.iter().map(|&(i, _)| i * k + bins[i]).collect();
        let other: Arc<[usize]> = pairs.iter().map(|&(i, j)| j * k + bins[i]).collect();
        let m = pairs.len();
        let fi = tape.gather(cif, own, [m])?;
        let fj = tape.gather(cif, other, [m])?;
        let diff = tape.sub(fi, fj)?;
        let z = tape.scale(diff, E::from_f64(-1.0 / cfg.sigma))?;
        let pen = tape.exp(z)?;
        let rank = tape.mean(pen)?;
        let weighted = tape.scale(rank, E::from_f64(cfg.eta))?;
        (tape.add(nll, weighted)?, Some(rank))
    };
    Ok(DeepHitLoss {
        total,
        nll,
        rank,
        clamped,
        comparable_pairs: pairs.len(),
    })
}

/// `S_i(b) = sum_{c > b} pmf_ic` for every subject and bin.
pub fn survival_curves(pmf: &[f64], bins: usize) -> Vec<Vec<f64>> {
    pmf.chunks_exact(bins)
        .map(|row| {
            let mut s = vec![0.0; bins];
            let mut acc = 0.0;
            for b in (0..bins).rev() {
                s[b] = acc;
                acc += row[b];
            }
            s
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CIndex {
    pub value: f64,
    pub comparable: usize,
    /// Twice the concordant count plus the tied count.
    pub score_x2: usize,
}

/// Antolini's time-dependent concordance. `survival[i][b]` is subject `i`'s
/// predicted survival beyond bin `b`; a pair `(i, j)` is comparable when
/// `i` had the event and `t_i < t_j`, and concordant when
/// `S_i(b_i) < S_j(b_i)`. Prediction ties score one half.
pub fn antolini_cindex(survival: &[Vec<f64>], records: &[SurvivalRecord]) -> Result<CIndex> {
    if survival.len() != records.len() {
        return Err(Error::shape("antolini_cindex", format!("{} curves for {} records", survival.len(), records.len())));
    }
    if records.len() < 2 {
        return Err(Error::invalid("C-index needs at least two records"));
    }
    let k = survival[0].len();
    if survival.iter().any(|s| s.len() != k) {
        return Err(Error::shape("antolini_cindex", "ragged survival curves"));
    }
    let bins = bins_of(records, k)?;
    let (mut comparable, mut score_x2) = (0usize, 0usize);
    for (i, ri) in records.iter().enumerate() {
        if !ri.event {
            continue;
        }
        let si = survival[i][bins[i]];
        for (j, rj) in records.iter().enumerate() {
            if ri.time < rj.time {
                comparable += 1;
                let sj = survival[j][bins[i]];
                if si < sj {
                    score_x2 += 2;
                } else if si == sj {
                    score_x2 += 1;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::Data("no comparable pairs for the C-index".into()));
    }
    Ok(CIndex {
        value: score_x2 as f64 / (2 * comparable) as f64,
        comparable,
        score_x2,
    })
}
