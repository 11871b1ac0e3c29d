//! Raw events → centroided photons → coincidence pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Arm, PhotonEvent, Roi};

/// Below this many items the parallel paths are not worth splitting.
const PARALLEL_MIN: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    /// Chebyshev linking distance, pixels.
    pub spatial_radius: u16,
    /// Maximum time difference between linked events, ns.
    pub temporal_gap_ns: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            spatial_radius: 2,
            temporal_gap_ns: 40,
        }
    }
}

/// Signal/idler regions used to assign photons to arms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmLayout {
    pub signal_roi: Roi,
    pub idler_roi: Roi,
}

impl ArmLayout {
    pub fn arm_of(&self, x: f64, y: f64) -> Option<Arm> {
        if self.signal_roi.contains(x, y) {
            Some(Arm::Signal)
        } else if self.idler_roi.contains(x, y) {
            Some(Arm::Idler)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidedPhoton {
    pub cx: f64,
    pub cy: f64,
    /// Time of arrival of the highest-amplitude pixel, ns.
    pub toa_corr: u64,
    pub cluster_size: u32,
    pub total_tot: u64,
    pub arm: Arm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoincidencePair {
    pub signal: CentroidedPhoton,
    pub idler: CentroidedPhoton,
    /// `idler.toa_corr − signal.toa_corr`, ns.
    pub dt: i64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CentroidStats {
    pub events: usize,
    pub clusters: usize,
    /// Clusters whose centroid lies outside both ROIs.
    pub unassigned: usize,
}

fn check_sorted<T>(items: &[T], key: impl Fn(&T) -> u64) -> Result<()> {
    match items.windows(2).position(|w| key(&w[0]) > key(&w[1])) {
        Some(i) => Err(Error::Unsorted { index: i + 1 }),
        None => Ok(()),
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root so labels follow time order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Reduces one cluster to a photon. The reference pixel is the highest tot,
/// ties broken by earliest toa, then lowest `(y, x)`.
fn reduce_cluster(members: &[PhotonEvent], layout: &ArmLayout) -> Option<CentroidedPhoton> {
    let mut sum_tot: u64 = 0;
    let mut sum_x: u128 = 0;
    let mut sum_y: u128 = 0;
    let mut reference = members[0];
    for &e in members {
        let t = e.tot as u64;
        sum_tot += t;
        sum_x += t as u128 * e.x as u128;
        sum_y += t as u128 * e.y as u128;
        let better = (e.tot, std::cmp::Reverse(e.toa), std::cmp::Reverse((e.y, e.x)))
            > (reference.tot, std::cmp::Reverse(reference.toa), std::cmp::Reverse((reference.y, reference.x)));
        if better {
            reference = e;
        }
    }
    let (cx, cy) = if sum_tot == 0 {
        // zero-amplitude cluster: fall back to the unweighted mean
        let n = members.len() as f64;
        (
            members.iter().map(|e| e.x as f64).sum::<f64>() / n,
            members.iter().map(|e| e.y as f64).sum::<f64>() / n,
        )
    } else {
        (sum_x as f64 / sum_tot as f64, sum_y as f64 / sum_tot as f64)
    };
    let arm = layout.arm_of(cx, cy)?;
    Some(CentroidedPhoton {
        cx,
        cy,
        toa_corr: reference.toa,
        cluster_size: members.len() as u32,
        total_tot: sum_tot,
        arm,
    })
}

fn centroid_segment(events: &[PhotonEvent], params: &ClusterParams, layout: &ArmLayout) -> (Vec<CentroidedPhoton>, CentroidStats) {
    let n = events.len();
    let mut sets = DisjointSet::new(n);
    let r = params.spatial_radius as i32;
    let mut lo = 0usize;
    for j in 0..n {
        let ej = events[j];
        while ej.toa - events[lo].toa > params.temporal_gap_ns {
            lo += 1;
        }
        for i in lo..j {
            let ei = events[i];
            if (ei.x as i32 - ej.x as i32).abs() <= r && (ei.y as i32 - ej.y as i32).abs() <= r {
                sets.union(i as u32, j as u32);
            }
        }
    }

    // Counting sort of event indices by root.
    let roots: Vec<u32> = (0..n as u32).map(|i| sets.find(i)).collect();
    let mut counts = vec![0u32; n + 1];
    for &root in &roots {
        counts[root as usize + 1] += 1;
    }
    for k in 1..=n {
        counts[k] += counts[k - 1];
    }
    let starts = counts.clone();
    let mut order = vec![0u32; n];
    for (i, &root) in roots.iter().enumerate() {
        let slot = &mut counts[root as usize];
        order[*slot as usize] = i as u32;
        *slot += 1;
    }

    let mut photons = Vec::new();
    let mut stats = CentroidStats {
        events: n,
        ..Default::default()
    };
    let mut members = Vec::new();
    for root in 0..n {
        let (a, b) = (starts[root] as usize, starts[root + 1] as usize);
        if a == b {
            continue;
        }
        members.clear();
        members.extend(order[a..b].iter().map(|&i| events[i as usize]));
        stats.clusters += 1;
        match reduce_cluster(&members, layout) {
            Some(p) => photons.push(p),
            None => stats.unassigned += 1,
        }
    }
    (photons, stats)
}

/// Splits a time-sorted slice at gaps longer than `gap`, into roughly
/// `target`-sized pieces. Nothing linked by `gap` straddles a boundary.
fn split_at_gaps<T>(items: &[T], key: impl Fn(&T) -> u64, gap: u64, target: usize) -> Vec<&[T]> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut k = target;
    while k < items.len() {
        if key(&items[k]) - key(&items[k - 1]) > gap {
            out.push(&items[start..k]);
            start = k;
            k += target;
        } else {
            k += 1;
        }
    }
    out.push(&items[start..]);
    out
}

fn photon_order(a: &CentroidedPhoton, b: &CentroidedPhoton) -> std::cmp::Ordering {
    a.toa_corr
        .cmp(&b.toa_corr)
        .then(a.cy.total_cmp(&b.cy))
        .then(a.cx.total_cmp(&b.cx))
        .then(a.total_tot.cmp(&b.total_tot))
}

/// Groups raw events into clusters and reduces each to a centroided photon.
///
/// Events are linked when they are within `spatial_radius` (Chebyshev) and
/// `temporal_gap_ns` of each other; clusters are the connected components.
/// The centroid is the tot-weighted mean position and the corrected time is
/// the toa of the reference pixel. Output is sorted by `toa_corr`.
pub fn cluster_and_centroid(
    events: &[PhotonEvent],
    params: &ClusterParams,
    layout: &ArmLayout,
) -> Result<(Vec<CentroidedPhoton>, CentroidStats)> {
    check_sorted(events, |e| e.toa)?;
    let segments = split_at_gaps(events, |e| e.toa, params.temporal_gap_ns, PARALLEL_MIN);
    let parts: Vec<_> = segments
        .par_iter()
        .map(|s| centroid_segment(s, params, layout))
        .collect();
    let mut stats = CentroidStats::default();
    let mut photons = Vec::with_capacity(parts.iter().map(|p| p.0.len()).sum());
    for (p, s) in parts {
        photons.extend(p);
        stats.events += s.events;
        stats.clusters += s.clusters;
        stats.unassigned += s.unassigned;
    }
    photons.par_sort_by(photon_order);
    Ok((photons, stats))
}

/// Splits photons by arm, preserving order.
pub fn split_arms(photons: &[CentroidedPhoton]) -> (Vec<CentroidedPhoton>, Vec<CentroidedPhoton>) {
    photons.iter().partition(|p| p.arm == Arm::Signal)
}

/// Greedy one-to-one matching on time-sorted stamps.
///
/// Signals are visited in order; each takes the unused idler with the
/// smallest `|dt| ≤ window`, ties going to the earlier idler. Returns index
/// pairs in signal order.
pub fn greedy_match(signal: &[i64], idler: &[i64], window: i64) -> Vec<(usize, usize)> {
    let mut used = vec![false; idler.len()];
    let mut out = Vec::new();
    let mut lo = 0usize;
    for (s, &ts) in signal.iter().enumerate() {
        while lo < idler.len() && (idler[lo] < ts - window || used[lo]) {
            lo += 1;
        }
        let mut best: Option<(i64, usize)> = None;
        let mut k = lo;
        while k < idler.len() && idler[k] <= ts + window {
            if !used[k] {
                let d = (idler[k] - ts).abs();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, k));
                }
            }
            k += 1;
        }
        if let Some((_, k)) = best {
            used[k] = true;
            out.push((s, k));
        }
    }
    out
}

/// Splits two sorted stamp lists at common gaps wider than `window`, giving
/// independent sub-problems for [`greedy_match`].
fn independent_blocks(signal: &[i64], idler: &[i64], window: i64, target: usize) -> Vec<((usize, usize), (usize, usize))> {
    let mut blocks = Vec::new();
    let (mut s0, mut i0) = (0usize, 0usize);
    let (mut s, mut i) = (0usize, 0usize);
    let mut last: Option<i64> = None;
    while s < signal.len() || i < idler.len() {
        let take_signal = i >= idler.len() || (s < signal.len() && signal[s] <= idler[i]);
        let t = if take_signal { signal[s] } else { idler[i] };
        if let Some(prev) = last {
            if t - prev > window && (s - s0) + (i - i0) >= target {
                blocks.push(((s0, s), (i0, i)));
                s0 = s;
                i0 = i;
            }
        }
        last = Some(t);
        if take_signal {
            s += 1;
        } else {
            i += 1;
        }
    }
    blocks.push(((s0, signal.len()), (i0, idler.len())));
    blocks
}

fn greedy_match_parallel(signal: &[i64], idler: &[i64], window: i64) -> Vec<(usize, usize)> {
    if signal.len() + idler.len() < PARALLEL_MIN {
        return greedy_match(signal, idler, window);
    }
    let blocks = independent_blocks(signal, idler, window, PARALLEL_MIN);
    blocks
        .par_iter()
        .map(|&((s0, s1), (i0, i1))| {
            greedy_match(&signal[s0..s1], &idler[i0..i1], window)
                .into_iter()
                .map(|(a, b)| (a + s0, b + i0))
                .collect::<Vec<_>>()
        })
        .flatten_iter()
        .collect()
}

fn stamps(photons: &[CentroidedPhoton], shift: i64) -> Vec<i64> {
    photons.iter().map(|p| p.toa_corr as i64 + shift).collect()
}

/// Two-pointer coincidence finding with greedy nearest-match pairing.
pub fn find_coincidences(
    signal: &[CentroidedPhoton],
    idler: &[CentroidedPhoton],
    window_ns: u64,
) -> Result<Vec<CoincidencePair>> {
    check_sorted(signal, |p| p.toa_corr)?;
    check_sorted(idler, |p| p.toa_corr)?;
    let matches = greedy_match_parallel(&stamps(signal, 0), &stamps(idler, 0), window_ns as i64);
    Ok(matches
        .into_iter()
        .map(|(s, i)| CoincidencePair {
            signal: signal[s],
            idler: idler[i],
            dt: idler[i].toa_corr as i64 - signal[s].toa_corr as i64,
        })
        .collect())
}

/// Coincidences found after delaying the idler stream by `offset_ns`; with
/// `offset_ns ≫ window` this estimates the accidental background.
pub fn accidental_estimate(
    signal: &[CentroidedPhoton],
    idler: &[CentroidedPhoton],
    window_ns: u64,
    offset_ns: i64,
) -> Result<usize> {
    check_sorted(signal, |p| p.toa_corr)?;
    check_sorted(idler, |p| p.toa_corr)?;
    Ok(greedy_match_parallel(&stamps(signal, 0), &stamps(idler, offset_ns), window_ns as i64).len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout() -> ArmLayout {
        ArmLayout {
            signal_roi: Roi::new(0, 0, 128, 256),
            idler_roi: Roi::new(128, 0, 128, 256),
        }
    }

    fn ev(x: u16, y: u16, tot: u32, toa: u64) -> PhotonEvent {
        PhotonEvent { x, y, toa, tot }
    }

    fn photon(t: u64, arm: Arm) -> CentroidedPhoton {
        CentroidedPhoton {
            cx: 0.0,
            cy: 0.0,
            toa_corr: t,
            cluster_size: 1,
            total_tot: 1,
            arm,
        }
    }

    #[test]
    fn single_event_photon() {
        let (p, _) = cluster_and_centroid(&[ev(10, 10, 100, 0)], &ClusterParams::default(), &layout()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].cx, p[0].cy, p[0].toa_corr), (10.0, 10.0, 0));
        assert_eq!(p[0].arm, Arm::Signal);
    }

    #[test]
    fn weighted_centroid_and_reference_time() {
        let events = [ev(10, 10, 300, 5), ev(11, 10, 100, 9)];
        let (p, _) = cluster_and_centroid(&events, &ClusterParams::default(), &layout()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].cx, p[0].cy, p[0].toa_corr), (10.25, 10.0, 5));
        assert_eq!(p[0].cluster_size, 2);
        assert_eq!(p[0].total_tot, 400);
    }

    #[test]
    fn tot_ties_go_to_earliest_then_lowest_pixel() {
        let events = [ev(10, 10, 50, 3), ev(11, 10, 50, 7)];
        let (p, _) = cluster_and_centroid(&events, &ClusterParams::default(), &layout()).unwrap();
        assert_eq!(p[0].toa_corr, 3);
        let events = [ev(11, 10, 50, 3), ev(10, 10, 50, 3)];
        let (p, _) = cluster_and_centroid(&events, &ClusterParams::default(), &layout()).unwrap();
        assert_eq!(p[0].toa_corr, 3);
    }

    #[test]
    fn separated_events_stay_apart() {
        let events = [ev(10, 10, 50, 0), ev(13, 10, 50, 1), ev(10, 10, 50, 100)];
        let (p, s) = cluster_and_centroid(&events, &ClusterParams::default(), &layout()).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(s.clusters, 3);
    }

    #[test]
    fn chains_link_transitively() {
        let events = [ev(10, 10, 50, 0), ev(12, 10, 50, 30), ev(14, 10, 50, 60)];
        let (p, _) = cluster_and_centroid(&events, &ClusterParams::default(), &layout()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].cx, 12.0);
    }

    #[test]
    fn unsorted_events_rejected() {
        let events = [ev(10, 10, 50, 10), ev(10, 10, 50, 5)];
        assert!(matches!(
            cluster_and_centroid(&events, &ClusterParams::default(), &layout()),
            Err(Error::Unsorted { index: 1 })
        ));
    }

    #[test]
    fn centroids_outside_rois_are_counted() {
        let l = ArmLayout {
            signal_roi: Roi::new(0, 0, 50, 50),
            idler_roi: Roi::new(100, 0, 50, 50),
        };
        let (p, s) = cluster_and_centroid(&[ev(75, 10, 10, 0)], &ClusterParams::default(), &l).unwrap();
        assert!(p.is_empty());
        assert_eq!(s.unassigned, 1);
    }

    #[test]
    fn equal_toa_permutation_is_canonical() {
        let events = [ev(10, 10, 80, 5), ev(11, 11, 80, 5), ev(60, 60, 30, 5), ev(61, 60, 90, 5), ev(10, 12, 40, 6)];
        let (a, _) = cluster_and_centroid(&events, &ClusterParams::default(), &layout()).unwrap();
        let permuted = [events[3], events[1], events[2], events[0], events[4]];
        let (b, _) = cluster_and_centroid(&permuted, &ClusterParams::default(), &layout()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coincidence_examples() {
        let s = [photon(100, Arm::Signal)];
        let pairs = find_coincidences(&s, &[photon(105, Arm::Idler)], 10).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].dt, 5);
        assert!(find_coincidences(&s, &[photon(115, Arm::Idler)], 10).unwrap().is_empty());
    }

    #[test]
    fn greedy_prefers_nearest_unused() {
        // second signal would prefer idler at 104 but it is taken
        let s = [photon(100, Arm::Signal), photon(103, Arm::Signal)];
        let i = [photon(104, Arm::Idler), photon(110, Arm::Idler)];
        let pairs = find_coincidences(&s, &i, 10).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!((pairs[0].dt, pairs[1].dt), (4, 7));
    }

    #[test]
    fn unsorted_photons_rejected() {
        let s = [photon(100, Arm::Signal), photon(50, Arm::Signal)];
        assert!(find_coincidences(&s, &[], 10).is_err());
        assert!(accidental_estimate(&[], &s, 10, 1000).is_err());
    }

    #[test]
    fn correlated_pairs_have_no_shifted_matches() {
        let s: Vec<_> = (0..1000).map(|k| photon(k * 10_000, Arm::Signal)).collect();
        let i: Vec<_> = (0..1000).map(|k| photon(k * 10_000 + 3, Arm::Idler)).collect();
        assert_eq!(find_coincidences(&s, &i, 10).unwrap().len(), 1000);
        assert_eq!(accidental_estimate(&s, &i, 10, 1_000).unwrap(), 0);
    }

    #[test]
    fn translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s: Vec<u64> = (0..2000).map(|_| rng.random_range(0..1_000_000)).collect();
        let mut i: Vec<u64> = (0..2000).map(|_| rng.random_range(0..1_000_000)).collect();
        s.sort();
        i.sort();
        let mk = |v: &[u64], off: u64, arm| v.iter().map(|&t| photon(t + off, arm)).collect::<Vec<_>>();
        let a = find_coincidences(&mk(&s, 0, Arm::Signal), &mk(&i, 0, Arm::Idler), 10).unwrap();
        let b = find_coincidences(&mk(&s, 123_456_789, Arm::Signal), &mk(&i, 123_456_789, Arm::Idler), 10).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.dt == y.dt));
    }

    #[test]
    fn parallel_blocks_match_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut s: Vec<i64> = (0..200_000).map(|_| rng.random_range(0..2_000_000_000)).collect();
        let mut i: Vec<i64> = (0..200_000).map(|_| rng.random_range(0..2_000_000_000)).collect();
        s.sort();
        i.sort();
        assert_eq!(greedy_match(&s, &i, 10), greedy_match_parallel(&s, &i, 10));
    }

    #[test]
    fn parallel_centroiding_matches_single_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut events: Vec<PhotonEvent> = (0..300_000)
            .map(|_| ev(rng.random_range(0..256), rng.random_range(0..256), rng.random_range(5..400), rng.random_range(0..50_000_000)))
            .collect();
        events.sort_by_key(|e| e.toa);
        let (mut serial, _) = centroid_segment(&events, &ClusterParams::default(), &layout());
        serial.sort_by(photon_order);
        let (parallel, _) = cluster_and_centroid(&events, &ClusterParams::default(), &layout()).unwrap();
        assert_eq!(serial, parallel);
    }
}
