//! Closed-form parameter counts and FLOP/compute matching.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Parameters IHA adds on top of the base projections: 3H^2P from the three
/// mixing tensors plus H^2P from the collapse map.
pub fn iha_extra_params(heads: u64, pseudo: u64) -> u64 {
    4 * heads * heads * pseudo
}

pub fn ceil_sqrt_u64(k: u64) -> u64 {
    let mut h = (k as f64).sqrt().floor() as u64;
    while h * h < k {
        h += 1;
    }
    while h > 1 && (h - 1) * (h - 1) >= k {
        h -= 1;
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyfilterCounts {
    pub n: u64,
    pub d: u64,
    pub k: u64,
    /// 2N(N+d)k + d(N+d)k
    pub mha: u64,
    /// 2N(N+d)ceil(sqrt k) + d(N+d)ceil(sqrt k)^2 + 4 ceil(sqrt k)^3
    pub iha: u64,
    /// Smallest k at which the IHA count drops below the MHA count.
    pub crossover_k: Option<u64>,
}

fn polyfilter_mha_count(n: u64, d: u64, k: u64) -> u64 {
    2 * n * (n + d) * k + d * (n + d) * k
}

fn polyfilter_iha_count(n: u64, d: u64, k: u64) -> u64 {
    let h = ceil_sqrt_u64(k);
    2 * n * (n + d) * h + d * (n + d) * h * h + 4 * h * h * h
}

pub fn polyfilter_param_counts(n: u64, d: u64, k: u64) -> PolyfilterCounts {
    let crossover_k = (1..=10_000u64).find(|&kk| polyfilter_iha_count(n, d, kk) < polyfilter_mha_count(n, d, kk));
    PolyfilterCounts {
        n,
        d,
        k,
        mha: polyfilter_mha_count(n, d, k),
        iha: polyfilter_iha_count(n, d, k),
        crossover_k,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cpm3Bounds {
    pub n_max: u64,
    /// ceil(37 N^2.5) + N^2 (N-1) + N^2, rounded up so it stays a bound.
    pub iha_upper: u64,
    /// 3 N^3 + N^2 (N-1) + N^2
    pub mha_lower: u64,
}

pub fn cpm3_param_bounds(n_max: u64) -> Cpm3Bounds {
    let n = n_max;
    let nf = n as f64;
    let iha_upper = (37.0 * nf * nf * nf.sqrt()).ceil() as u64 + n * n * (n - 1) + n * n;
    let mha_lower = 3 * n * n * n + n * n * (n - 1) + n * n;
    Cpm3Bounds {
        n_max,
        iha_upper,
        mha_lower,
    }
}

/// Smallest n_max at which the IHA upper bound drops below the MHA lower
/// bound (scanning up to `limit`).
pub fn cpm3_bound_threshold(limit: u64) -> Option<u64> {
    (1..=limit).find(|&n| {
        let b = cpm3_param_bounds(n);
        b.iha_upper < b.mha_lower
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Global,
    Hybrid4To1,
}

/// What the single global layer in the 4:1 hybrid schedule is. The compute
/// accounting matches the 3/5 average only when it is a plain (P=1) layer;
/// the IHA variant is provided because the schedule description leaves it
/// open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalLayerKind {
    Plain,
    Iha,
}

/// Attention-score FLOPs, counted as multiply-add pairs (factor 2) over the
/// score and weighted-sum products only; projections are excluded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopReport {
    pub n: u64,
    pub d: u64,
    pub heads: u64,
    pub pseudo: u64,
    pub schedule: Schedule,
    pub global_layer: GlobalLayerKind,
    /// W = floor(N / (2 P^2)), in original tokens.
    pub window: u64,
    /// One sliding-window IHA layer: 2 H (NP) (WP) d.
    pub flops_local_layer: u64,
    /// One global layer (plain: 2 H N^2 d; IHA: 2 H (NP)^2 d).
    pub flops_global_layer: u64,
    /// Schedule average per layer.
    pub flops_schedule_avg: f64,
    /// Global MHA baseline 2 H N^2 d.
    pub flops_baseline: u64,
    pub ratio_to_baseline: f64,
}

pub fn flop_report(
    n: u64,
    d: u64,
    heads: u64,
    pseudo: u64,
    schedule: Schedule,
    global_layer: GlobalLayerKind,
) -> Result<FlopReport> {
    if n == 0 || d == 0 || heads == 0 || pseudo == 0 {
        return Err(Error::InvalidConfig("flop_report needs positive N, d, H, P".into()));
    }
    let window = n / (2 * pseudo * pseudo);
    if window < 1 {
        return Err(Error::InvalidConfig(format!(
            "window N/(2P^2) = {n}/(2*{pseudo}^2) < 1; sequence too short for this P"
        )));
    }
    let np = n * pseudo;
    let wp = window * pseudo;
    let flops_local_layer = 2 * heads * np * wp * d;
    let flops_global_iha = 2 * heads * np * np * d;
    let flops_baseline = 2 * heads * n * n * d;
    let flops_global_layer = match global_layer {
        GlobalLayerKind::Plain => flops_baseline,
        GlobalLayerKind::Iha => flops_global_iha,
    };
    let flops_schedule_avg = match schedule {
        Schedule::Global => flops_global_iha as f64,
        Schedule::Hybrid4To1 => (4 * flops_local_layer + flops_global_layer) as f64 / 5.0,
    };
    Ok(FlopReport {
        n,
        d,
        heads,
        pseudo,
        schedule,
        global_layer,
        window,
        flops_local_layer,
        flops_global_layer,
        flops_schedule_avg,
        flops_baseline,
        ratio_to_baseline: flops_schedule_avg / flops_baseline as f64,
    })
}
