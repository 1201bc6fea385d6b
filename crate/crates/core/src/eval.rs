//! Rank metrics and evaluation protocols.
//!
//! Gallery entries are ranked by ascending distance; equal distances keep
//! gallery order. Entries labelled [`JUNK`] are dropped from the ranking.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::config::Protocol;
use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::rng;

/// Gallery identity of distractor entries.
pub const JUNK: usize = usize::MAX;

fn check_shapes(distances: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize]) -> Result<()> {
    if distances.len() != probe_ids.len() {
        return Err(Error::dim(
            "metrics",
            format!("{} distance rows for {} probes", distances.len(), probe_ids.len()),
        ));
    }
    if let Some((i, row)) = distances.iter().enumerate().find(|(_, r)| r.len() != gallery_ids.len()) {
        return Err(Error::dim(
            "metrics",
            format!("row {i} has {} entries for {} gallery items", row.len(), gallery_ids.len()),
        ));
    }
    if let Some(v) = distances.iter().flatten().find(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("distance {v}")));
    }
    Ok(())
}

/// Non-junk gallery indices of one probe row, nearest first.
fn ranking(row: &[f64], gallery_ids: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| gallery_ids[j] != JUNK).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    order
}

/// 1-based positions of the probe's true matches in its ranking.
fn match_ranks(row: &[f64], probe: usize, gallery_ids: &[usize], index: usize) -> Result<Vec<usize>> {
    let hits: Vec<usize> = ranking(row, gallery_ids)
        .into_iter()
        .enumerate()
        .filter(|&(_, j)| gallery_ids[j] == probe)
        .map(|(r, _)| r + 1)
        .collect();
    if hits.is_empty() {
        return Err(Error::Protocol(format!(
            "probe {index} (identity {probe}) has no match in the gallery"
        )));
    }
    Ok(hits)
}

/// Fraction of probes whose first true match is within the top `k`, for
/// each requested `k`.
pub fn cmc_curve(distances: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize], ranks: &[usize]) -> Result<Vec<f64>> {
    check_shapes(distances, probe_ids, gallery_ids)?;
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks start at 1".into()));
    }
    if probe_ids.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    let mut firsts = Vec::with_capacity(probe_ids.len());
    for (i, (row, &p)) in distances.iter().zip(probe_ids).enumerate() {
        firsts.push(match_ranks(row, p, gallery_ids, i)?[0]);
    }
    let n = firsts.len() as f64;
    Ok(ranks
        .iter()
        .map(|&k| firsts.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect())
}

/// Mean over probes of average precision: the mean, over true matches, of
/// (true matches ranked at or above it) / (its rank).
pub fn mean_average_precision(distances: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize]) -> Result<f64> {
    check_shapes(distances, probe_ids, gallery_ids)?;
    if probe_ids.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    let mut total = 0.0;
    for (i, (row, &p)) in distances.iter().zip(probe_ids).enumerate() {
        let hits = match_ranks(row, p, gallery_ids, i)?;
        let ap: f64 = hits
            .iter()
            .enumerate()
            .map(|(k, &r)| (k + 1) as f64 / r as f64)
            .sum::<f64>()
            / hits.len() as f64;
        total += ap;
    }
    Ok(total / probe_ids.len() as f64)
}

pub fn euclidean_distances(probes: &[Vec<f64>], gallery: &[Vec<f64>]) -> Vec<Vec<f64>> {
    probes
        .iter()
        .map(|p| {
            gallery
                .iter()
                .map(|g| p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

/// Identity-level train/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// `trials` random halves of the identities; odd counts put the extra
/// identity in the test half.
pub fn half_splits(identities: &[String], trials: usize, seed: u64) -> Result<Vec<Split>> {
    if identities.len() < 4 {
        return Err(Error::Protocol(format!(
            "half splits need at least 4 identities, got {}",
            identities.len()
        )));
    }
    Ok((0..trials)
        .map(|t| {
            let mut ids = identities.to_vec();
            ids.shuffle(&mut rng::stream(seed, &format!("splits/half/{t}")));
            let test = ids.split_off(ids.len() / 2);
            let mut train = ids;
            let mut test = test;
            train.sort();
            test.sort();
            Split { train, test }
        })
        .collect())
}

/// One fixed partition with `train_count` training identities (0 = half).
pub fn fixed_split(identities: &[String], train_count: usize, seed: u64) -> Result<Split> {
    let n = identities.len();
    let k = if train_count == 0 { n / 2 } else { train_count };
    if k < 1 || n - k.min(n) < 2 {
        return Err(Error::Protocol(format!(
            "cannot train on {k} of {n} identities and keep at least 2 for testing"
        )));
    }
    let mut ids = identities.to_vec();
    ids.shuffle(&mut rng::stream(seed, "splits/fixed"));
    let mut test = ids.split_off(k);
    let mut train = ids;
    train.sort();
    test.sort();
    Ok(Split { train, test })
}

/// Splits for a protocol: the trial halves, or the single fixed split.
pub fn protocol_splits(index: &DatasetIndex, protocol: Protocol, trials: usize, train_identities: usize, seed: u64) -> Result<Vec<Split>> {
    let ids = index.identities();
    match protocol {
        Protocol::HalfSplit10 => half_splits(&ids, trials, seed),
        Protocol::Fixed => Ok(vec![fixed_split(&ids, train_identities, seed)?]),
    }
}

/// Probe and gallery record indices for the test identities. Probes are the
/// first camera's sequences. The half-split gallery holds the first
/// second-camera sequence of each test identity; the fixed-split gallery
/// holds every test sequence from the other cameras, and probes without any
/// such sequence are left out.
pub fn probe_gallery(index: &DatasetIndex, test: &[String], protocol: Protocol) -> Result<(Vec<usize>, Vec<usize>)> {
    let cams = index.cameras();
    if cams.len() < 2 {
        return Err(Error::Protocol(format!(
            "evaluation needs at least 2 cameras, found {}",
            cams.len()
        )));
    }
    let in_test = |r: usize| test.binary_search(&index.records[r].identity).is_ok();
    let (probe_cam, gallery_cam) = (&cams[0], &cams[1]);
    let mut probes: Vec<usize> = (0..index.len())
        .filter(|&r| in_test(r) && &index.records[r].camera == probe_cam)
        .collect();
    let gallery: Vec<usize> = match protocol {
        Protocol::HalfSplit10 => {
            let mut g = Vec::new();
            for id in test {
                let first = (0..index.len()).find(|&r| &index.records[r].identity == id && &index.records[r].camera == gallery_cam);
                match first {
                    Some(r) => g.push(r),
                    None => {
                        return Err(Error::Protocol(format!(
                            "identity {id} has no sequence from camera {gallery_cam}"
                        )))
                    }
                }
            }
            g
        }
        Protocol::Fixed => {
            let g: Vec<usize> = (0..index.len())
                .filter(|&r| in_test(r) && &index.records[r].camera != probe_cam)
                .collect();
            probes.retain(|&p| g.iter().any(|&r| index.records[r].identity == index.records[p].identity));
            g
        }
    };
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::Protocol("no probe or gallery sequences for the test identities".into()));
    }
    Ok((probes, gallery))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// `None` for an average over trials.
    pub trial: Option<usize>,
    /// `(training domain, test domain)` for cross-dataset runs.
    pub domains: Option<(String, String)>,
    pub ranks: Vec<usize>,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub distances: Vec<Vec<f64>>,
}

impl EvalReport {
    /// CMC value at rank `k`, if it was requested.
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == k).map(|i| self.cmc[i])
    }

    pub fn trial_label(&self) -> String {
        self.trial.map_or_else(|| "mean".to_string(), |t| t.to_string())
    }

    /// `Rank-1 Rank-5 Rank-20 mAP` as percentages.
    pub fn summary_line(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v));
        format!(
            "{:>7} {:>7} {:>7} {:>7}",
            fmt(self.rank(1)),
            fmt(self.rank(5)),
            fmt(self.rank(20)),
            fmt(Some(self.map))
        )
    }
}

/// Scores one set of sequence descriptors.
pub fn evaluate(
    descriptors: &[Vec<f64>],
    index: &DatasetIndex,
    probes: &[usize],
    gallery: &[usize],
    ranks: &[usize],
    protocol: Protocol,
    trial: Option<usize>,
) -> Result<EvalReport> {
    let id_of = |r: usize| index.records[r].identity.clone();
    let names: Vec<String> = index.identities();
    let label = |r: usize| names.binary_search(&id_of(r)).expect("identity listed");
    let probe_ids: Vec<usize> = probes.iter().map(|&r| label(r)).collect();
    let gallery_ids: Vec<usize> = gallery.iter().map(|&r| label(r)).collect();
    let pd: Vec<Vec<f64>> = probes.iter().map(|&r| descriptors[r].clone()).collect();
    let gd: Vec<Vec<f64>> = gallery.iter().map(|&r| descriptors[r].clone()).collect();
    let distances = euclidean_distances(&pd, &gd);
    Ok(EvalReport {
        protocol,
        trial,
        domains: None,
        ranks: ranks.to_vec(),
        cmc: cmc_curve(&distances, &probe_ids, &gallery_ids, ranks)?,
        map: mean_average_precision(&distances, &probe_ids, &gallery_ids)?,
        distances,
    })
}

/// Arithmetic mean of per-trial reports.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::Protocol("no trials to average".into()))?;
    if reports.iter().any(|r| r.ranks != first.ranks) {
        return Err(Error::Protocol("trials report different ranks".into()));
    }
    let n = reports.len() as f64;
    let cmc = (0..first.ranks.len())
        .map(|i| reports.iter().map(|r| r.cmc[i]).sum::<f64>() / n)
        .collect();
    Ok(EvalReport {
        protocol: first.protocol,
        trial: None,
        domains: first.domains.clone(),
        ranks: first.ranks.clone(),
        cmc,
        map: reports.iter().map(|r| r.map).sum::<f64>() / n,
        distances: Vec::new(),
    })
}

/// Runs every split of a protocol. `describe(split)` returns one descriptor
/// per index record, computed by a model appropriate for that split.
pub fn run_protocol(
    index: &DatasetIndex,
    splits: &[Split],
    protocol: Protocol,
    ranks: &[usize],
    mut describe: impl FnMut(usize, &Split) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<EvalReport>> {
    let mut out = Vec::with_capacity(splits.len());
    for (t, split) in splits.iter().enumerate() {
        let (probes, gallery) = probe_gallery(index, &split.test, protocol)?;
        let descriptors = describe(t, split)?;
        if descriptors.len() != index.len() {
            return Err(Error::dim(
                "run_protocol",
                format!("{} descriptors for {} sequences", descriptors.len(), index.len()),
            ));
        }
        out.push(evaluate(&descriptors, index, &probes, &gallery, ranks, protocol, Some(t))?);
    }
    Ok(out)
}

/// Evaluates descriptors of a test domain produced by a model trained on
/// another domain. Every identity of the test domain is a test identity
/// under the fixed protocol; the half-split protocol uses its test halves.
pub fn cross_dataset_eval(
    test_index: &DatasetIndex,
    splits: &[Split],
    protocol: Protocol,
    ranks: &[usize],
    descriptors: &[Vec<f64>],
    domains: (String, String),
) -> Result<Vec<EvalReport>> {
    if let (Some(a), Some(b)) = (descriptors.first(), descriptors.iter().find(|d| d.len() != descriptors[0].len())) {
        return Err(Error::dim(
            "cross_dataset_eval",
            format!("descriptor widths {} and {}", a.len(), b.len()),
        ));
    }
    let mut reports = run_protocol(test_index, splits, protocol, ranks, |_, _| Ok(descriptors.to_vec()))?;
    for r in &mut reports {
        r.domains = Some(domains.clone());
    }
    Ok(reports)
}

/// `trial,rank,cmc` rows.
pub fn cmc_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("trial,rank,cmc\n");
    for r in reports {
        for (k, v) in r.ranks.iter().zip(&r.cmc) {
            let _ = writeln!(s, "{},{k},{v}", r.trial_label());
        }
    }
    s
}

/// `trial,train_domain,test_domain,rank1,rank5,rank20,map` rows.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("trial,train_domain,test_domain,rank1,rank5,rank20,map\n");
    for r in reports {
        let (a, b) = r.domains.clone().unwrap_or_default();
        let v = |k| r.rank(k).map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(s, "{},{a},{b},{},{},{},{}", r.trial_label(), v(1), v(5), v(20), r.map);
    }
    s
}
