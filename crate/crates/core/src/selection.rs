//! Composite DIC over stored draws and the choice of the number of clusters.
//!
//! With `m` stored draws, per-draw log mixing weights `log alpha_k^(l)` and
//! per-site composite log-likelihoods `l_ik^(l)`,
//!
//! ```text
//! term1 = -(4/m) sum_l sum_i log sum_k exp(log alpha_k^(l) + l_ik^(l))
//! term2 =  2 sum_i [ log sum_{l,k} exp(log alpha_k^(l) + l_ik^(l)) - log m ]
//! CDIC  = term1 + term2
//! ```

use std::io::Write;

use log::warn;
use rayon::prelude::*;

use crate::basis::DesignMatrix;
use crate::distributions::{log_sum_exp, QuantileSpec};
use crate::error::{Error, Result};
use crate::model::Panel;
use crate::sampler::{run_chain, ChainTrace, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CdicValue {
    pub cdic: f64,
    pub term1: f64,
    pub term2: f64,
}

/// CDIC from `log_alpha[l][k]` and `loglik[l][i * K + k]`.
pub fn cdic_from_terms(log_alpha: &[Vec<f64>], loglik: &[Vec<f64>], n: usize) -> Result<CdicValue> {
    let m = log_alpha.len();
    if m == 0 {
        return Err(Error::domain("CDIC needs at least one stored draw"));
    }
    if loglik.len() != m {
        return Err(Error::domain("one log-likelihood table per draw is required"));
    }
    let k = log_alpha[0].len();
    if log_alpha.iter().any(|a| a.len() != k) || loglik.iter().any(|l| l.len() != n * k) {
        return Err(Error::domain("inconsistent draw dimensions"));
    }
    let mut term1 = 0.0;
    let mut all = vec![Vec::with_capacity(m * k); n];
    let mut buf = vec![0.0; k];
    for (la, ll) in log_alpha.iter().zip(loglik) {
        for (i, acc) in all.iter_mut().enumerate() {
            for kk in 0..k {
                buf[kk] = la[kk] + ll[i * k + kk];
            }
            term1 += log_sum_exp(&buf);
            acc.extend_from_slice(&buf);
        }
    }
    let term1 = -4.0 / m as f64 * term1;
    let ln_m = (m as f64).ln();
    let term2 = 2.0 * all.iter().map(|v| log_sum_exp(v) - ln_m).sum::<f64>();
    Ok(CdicValue {
        cdic: term1 + term2,
        term1,
        term2,
    })
}

/// CDIC of a chain from its stored draws.
pub fn cdic(trace: &ChainTrace) -> Result<CdicValue> {
    let log_alpha: Vec<Vec<f64>> = trace
        .draws
        .iter()
        .map(|d| d.alpha.iter().map(|a| a.ln()).collect())
        .collect();
    let loglik: Vec<Vec<f64>> = trace.draws.iter().map(|d| d.loglik.clone()).collect();
    cdic_from_terms(&log_alpha, &loglik, trace.n)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CdicRow {
    pub k: usize,
    /// `None` when the chain for this `K` failed.
    pub value: Option<CdicValue>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CdicReport {
    /// Sorted by `K`.
    pub rows: Vec<CdicRow>,
    /// Smallest CDIC among successful rows; ties go to the smaller `K`.
    pub chosen_k: Option<usize>,
}

/// Report plus the chains, aligned with `report.rows`.
#[derive(Debug)]
pub struct KSelection {
    pub report: CdicReport,
    pub traces: Vec<Option<ChainTrace>>,
}

impl KSelection {
    pub fn chosen_trace(&self) -> Option<&ChainTrace> {
        let k = self.report.chosen_k?;
        let idx = self.report.rows.iter().position(|r| r.k == k)?;
        self.traces[idx].as_ref()
    }
}

/// The `K` with the smallest finite CDIC; ties go to the smaller `K` and
/// failed rows are skipped.
pub fn choose_k(rows: &[CdicRow]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for row in rows {
        if let Some(v) = row.value {
            let better = match best {
                None => true,
                Some((k, c)) => v.cdic < c || (v.cdic == c && row.k < k),
            };
            if v.cdic.is_finite() && better {
                best = Some((row.k, v.cdic));
            }
        }
    }
    best.map(|(k, _)| k)
}

/// Runs one chain per `K` (seed `base.seed + K`) in parallel and compares
/// their CDIC values.
pub fn select_k(
    panel: &Panel,
    design: &DesignMatrix,
    quant: &QuantileSpec,
    k_range: &[usize],
    base: &SamplerConfig,
) -> Result<KSelection> {
    if k_range.is_empty() {
        return Err(Error::config("K_range", "must not be empty"));
    }
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let results: Vec<(usize, Result<(ChainTrace, CdicValue)>)> = ks
        .par_iter()
        .map(|&k| {
            let config = SamplerConfig {
                k,
                seed: base.seed.wrapping_add(k as u64),
                ..base.clone()
            };
            let res = run_chain(panel, design, quant, &config).and_then(|tr| {
                let v = cdic(&tr)?;
                Ok((tr, v))
            });
            (k, res)
        })
        .collect();
    let mut rows = Vec::with_capacity(ks.len());
    let mut traces = Vec::with_capacity(ks.len());
    for (k, res) in results {
        match res {
            Ok((tr, v)) => {
                rows.push(CdicRow {
                    k,
                    value: Some(v),
                    error: None,
                });
                traces.push(Some(tr));
            }
            Err(e) => {
                warn!("chain for K = {k} failed: {e}");
                rows.push(CdicRow {
                    k,
                    value: None,
                    error: Some(e.to_string()),
                });
                traces.push(None);
            }
        }
    }
    Ok(KSelection {
        report: CdicReport {
            chosen_k: choose_k(&rows),
            rows,
        },
        traces,
    })
}

/// CSV with header `K,cdic,term1,term2,chosen`; failed rows carry `NA`.
pub fn write_cdic_csv<W: Write>(report: &CdicReport, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["K", "cdic", "term1", "term2", "chosen"])?;
    for row in &report.rows {
        let fields = match row.value {
            Some(v) => [v.cdic, v.term1, v.term2].map(|x| x.to_string()),
            None => ["NA", "NA", "NA"].map(String::from),
        };
        wtr.write_record(&[
            row.k.to_string(),
            fields[0].clone(),
            fields[1].clone(),
            fields[2].clone(),
            (report.chosen_k == Some(row.k)).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
