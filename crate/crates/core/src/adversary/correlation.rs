//! Traffic-correlation analysis of mix nodes from the observation log alone.
//!
//! An epoch is one flush event at a mix node. The adversary enumerates which
//! inbound packages each outbound package could be, constrained by time
//! (inbound dispatched no later than the flush) and size (an outbound package
//! is the node's common class or larger, and never larger than
//! `max(inbound size, common class)` — the normalization rule). Weights are
//! uniform over all globally consistent assignments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::CorrelationMode;
use crate::ids::{EntityId, SurfaceId};
use crate::model::{Address, SimTime, SizeClass};
use crate::protocols::MixPolicy;

use super::{movements, AttackError, ObservationEvent};

/// How epochs and their inbound candidate pools are delimited, which follows
/// from the mix policy the node is believed to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epoching {
    /// Threshold mixing: every flush empties the node, so each epoch's
    /// inbound pool is exactly the arrivals since the previous flush.
    Partition,
    /// Pool mixing: packages may dwell across flushes, so every arrival up to
    /// the flush is a candidate.
    FlushGroup,
    /// Timed mixing: each departure is matched against everything that could
    /// still be dwelling at the node — a sliding feasibility window.
    Sliding,
}

impl Epoching {
    pub fn for_policy(policy: &MixPolicy) -> Self {
        match policy {
            MixPolicy::Threshold { .. } => Epoching::Partition,
            MixPolicy::Pool { .. } => Epoching::FlushGroup,
            MixPolicy::TimedDelay { .. } => Epoching::Sliding,
        }
    }
}

/// The adversary's posterior for one outbound package of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutboundPosterior {
    pub out_surface: SurfaceId,
    pub out_time: SimTime,
    pub dest: Address,
    /// Candidate inbound surfaces with their marginal weights; support only,
    /// weights sum to 1.
    pub candidates: Vec<(SurfaceId, f64)>,
    /// Highest-weight candidate, ties broken by lowest surface id.
    pub map_guess: SurfaceId,
}

impl OutboundPosterior {
    pub fn support_size(&self) -> u32 {
        self.candidates.len() as u32
    }

    /// Shannon entropy of the candidate marginal, in bits.
    pub fn entropy_bits(&self) -> f64 {
        self.candidates
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(_, w)| -w * w.log2())
            .sum()
    }
}

/// Posterior over one flush epoch at a mix node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPosterior {
    pub node: EntityId,
    pub flush_time: SimTime,
    /// Inbound candidate pool the epoch was analyzed against.
    pub inbound_surfaces: Vec<SurfaceId>,
    pub outbound: Vec<OutboundPosterior>,
}

impl EpochPosterior {
    /// The posterior for a given outbound package.
    pub fn outbound_for(&self, target: SurfaceId) -> Option<&OutboundPosterior> {
        self.outbound.iter().find(|o| o.out_surface == target)
    }
}

/// All epochs of one node, in flush order.
pub type CorrelationOutput = Vec<EpochPosterior>;

#[derive(Debug, Clone, Copy)]
struct Sighting {
    time: SimTime,
    surface: SurfaceId,
    size: SizeClass,
    dest: Address,
}

/// Whether an outbound package of size `out` could be the rewrap of an
/// inbound of size `inb` at a node normalizing to `common`. Sound: the true
/// pairing always satisfies it.
fn size_compatible(inb: SizeClass, out: SizeClass, common: SizeClass) -> bool {
    out >= common && out <= inb.max(common)
}

/// Runs the correlation analysis for one mix node over the observation log.
///
/// Exact mode weights candidates by their marginal probability under a
/// uniform distribution over all feasible complete assignments (perfect
/// matchings when arrivals and departures balance). Candidate mode reports
/// the same supports — pairs that occur in at least one feasible complete
/// assignment — with uniform weights, skipping the counting.
pub fn correlation_attack(
    observations: &[ObservationEvent],
    node: Address,
    common_class: SizeClass,
    epoching: Epoching,
    mode: CorrelationMode,
) -> Result<CorrelationOutput, AttackError> {
    let moves = movements(observations);
    let arrivals: Vec<Sighting> = moves
        .iter()
        .filter(|m| m.dst.entity == node.entity)
        .map(|m| Sighting {
            time: m.arrived,
            surface: m.surface,
            size: m.size,
            dest: m.dst,
        })
        .collect();
    let departures: Vec<Sighting> = moves
        .iter()
        .filter(|m| m.src.entity == node.entity)
        .map(|m| Sighting {
            time: m.departed,
            surface: m.surface,
            size: m.size,
            dest: m.dst,
        })
        .collect();

    // Group departures into flush events by identical timestamp.
    let mut flushes: BTreeMap<u64, Vec<Sighting>> = BTreeMap::new();
    for d in departures {
        flushes.entry(d.time.to_bits()).or_default().push(d);
    }

    let mut epochs = Vec::new();
    let mut prev_flush: Option<SimTime> = None;
    for (bits, outs) in flushes {
        let flush_time = f64::from_bits(bits);
        let pool: Vec<Sighting> = match epoching {
            Epoching::Partition => arrivals
                .iter()
                .filter(|a| {
                    a.time <= flush_time && prev_flush.map_or(true, |p| a.time > p)
                })
                .copied()
                .collect(),
            Epoching::FlushGroup | Epoching::Sliding => arrivals
                .iter()
                .filter(|a| a.time <= flush_time)
                .copied()
                .collect(),
        };
        prev_flush = Some(flush_time);
        epochs.push(analyze_epoch(
            node.entity,
            flush_time,
            &pool,
            &outs,
            common_class,
            mode,
        )?);
    }
    Ok(epochs)
}

fn analyze_epoch(
    node: EntityId,
    flush_time: SimTime,
    inbound: &[Sighting],
    outbound: &[Sighting],
    common_class: SizeClass,
    mode: CorrelationMode,
) -> Result<EpochPosterior, AttackError> {
    let n_in = inbound.len();
    let n_out = outbound.len();
    if n_in < n_out {
        return Err(AttackError::Infeasible {
            node,
            time: flush_time,
        });
    }
    let feasible: Vec<Vec<bool>> = outbound
        .iter()
        .map(|out| {
            inbound
                .iter()
                .map(|inb| inb.time <= out.time && size_compatible(inb.size, out.size, common_class))
                .collect()
        })
        .collect();

    let marginals = match mode {
        CorrelationMode::Exact => exact_marginals(&feasible, n_in)?,
        CorrelationMode::Candidate => {
            let support = consistent_support(&feasible, n_in);
            support
                .iter()
                .map(|row| {
                    let k = row.iter().filter(|&&b| b).count().max(1);
                    row.iter()
                        .map(|&b| if b { 1.0 / k as f64 } else { 0.0 })
                        .collect()
                })
                .collect()
        }
    };

    let mut outs = Vec::with_capacity(n_out);
    for (j, out) in outbound.iter().enumerate() {
        let mut candidates: Vec<(SurfaceId, f64)> = marginals[j]
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, w)| (inbound[i].surface, *w))
            .collect();
        candidates.sort_by_key(|(s, _)| *s);
        if candidates.is_empty() {
            return Err(AttackError::Infeasible {
                node,
                time: flush_time,
            });
        }
        // MAP guess: highest weight, ties to the lowest surface id.
        let map_guess = candidates
            .iter()
            .fold(None::<(SurfaceId, f64)>, |best, &(s, w)| match best {
                None => Some((s, w)),
                Some((bs, bw)) => {
                    if w > bw + 1e-15 || (w >= bw - 1e-15 && s < bs) {
                        Some((s, w))
                    } else {
                        Some((bs, bw))
                    }
                }
            })
            .expect("nonempty candidates")
            .0;
        outs.push(OutboundPosterior {
            out_surface: out.surface,
            out_time: out.time,
            dest: out.dest,
            candidates,
            map_guess,
        });
    }
    Ok(EpochPosterior {
        node,
        flush_time,
        inbound_surfaces: inbound.iter().map(|s| s.surface).collect(),
        outbound: outs,
    })
}

const MAX_EXACT_INBOUND: usize = 18;

/// Marginal weights over inbound candidates for each outbound package, under
/// a uniform prior over all feasible injective assignments of outbound to
/// inbound packages.
fn exact_marginals(feasible: &[Vec<bool>], n_in: usize) -> Result<Vec<Vec<f64>>, AttackError> {
    let n_out = feasible.len();
    if n_out == 0 {
        return Ok(Vec::new());
    }
    // Uniform epochs (every pair feasible) have fully symmetric marginals;
    // skip the counting, which also keeps large saturated sweeps cheap.
    if feasible.iter().all(|row| row.iter().all(|&b| b)) {
        let w = 1.0 / n_in as f64;
        return Ok(vec![vec![w; n_in]; n_out]);
    }
    if n_in > MAX_EXACT_INBOUND {
        return Err(AttackError::EpochTooLarge { inbound: n_in });
    }

    // Forward counts: ways to assign outputs 0..j using exactly the inputs in
    // `mask`. Backward counts: ways to assign outputs j.. avoiding `mask`.
    let mut forward: Vec<BTreeMap<u32, u64>> = Vec::with_capacity(n_out + 1);
    forward.push(BTreeMap::from([(0u32, 1u64)]));
    for j in 0..n_out {
        let mut next: BTreeMap<u32, u64> = BTreeMap::new();
        for (&mask, &ways) in &forward[j] {
            for i in 0..n_in {
                if feasible[j][i] && mask & (1 << i) == 0 {
                    *next.entry(mask | (1 << i)).or_insert(0) += ways;
                }
            }
        }
        forward.push(next);
    }

    let mut backward: Vec<BTreeMap<u32, u64>> = vec![BTreeMap::new(); n_out + 1];
    for mask in forward[n_out].keys() {
        backward[n_out].insert(*mask, 1);
    }
    for j in (0..n_out).rev() {
        let mut layer: BTreeMap<u32, u64> = BTreeMap::new();
        for &mask in forward[j].keys() {
            let mut ways = 0u64;
            for i in 0..n_in {
                if feasible[j][i] && mask & (1 << i) == 0 {
                    if let Some(&w) = backward[j + 1].get(&(mask | (1 << i))) {
                        ways += w;
                    }
                }
            }
            layer.insert(mask, ways);
        }
        backward[j] = layer;
    }

    let total = *backward[0].get(&0).unwrap_or(&0);
    if total == 0 {
        // Surfaced by the caller as Infeasible with epoch context.
        return Ok(vec![vec![0.0; n_in]; n_out]);
    }

    let mut marginals = vec![vec![0.0f64; n_in]; n_out];
    for j in 0..n_out {
        for (&mask, &f) in &forward[j] {
            for i in 0..n_in {
                if feasible[j][i] && mask & (1 << i) == 0 {
                    if let Some(&b) = backward[j + 1].get(&(mask | (1 << i))) {
                        marginals[j][i] += (f as f64) * (b as f64);
                    }
                }
            }
        }
        for w in &mut marginals[j] {
            *w /= total as f64;
        }
    }
    Ok(marginals)
}

/// Pairs that occur in at least one feasible complete assignment, via
/// augmenting-path matching with each pair forced in turn.
fn consistent_support(feasible: &[Vec<bool>], n_in: usize) -> Vec<Vec<bool>> {
    let n_out = feasible.len();
    let mut support = vec![vec![false; n_in]; n_out];
    for j in 0..n_out {
        for i in 0..n_in {
            if feasible[j][i] && matchable_with(feasible, n_in, j, i) {
                support[j][i] = true;
            }
        }
    }
    support
}

/// Can all outputs be assigned distinct feasible inputs with `j -> i` forced?
fn matchable_with(feasible: &[Vec<bool>], n_in: usize, j: usize, i: usize) -> bool {
    let n_out = feasible.len();
    let mut match_of_input: Vec<Option<usize>> = vec![None; n_in];
    match_of_input[i] = Some(j);

    fn augment(
        out: usize,
        feasible: &[Vec<bool>],
        banned_input: usize,
        match_of_input: &mut Vec<Option<usize>>,
        visited: &mut Vec<bool>,
    ) -> bool {
        for i in 0..match_of_input.len() {
            if i == banned_input || !feasible[out][i] || visited[i] {
                continue;
            }
            visited[i] = true;
            let free = match match_of_input[i] {
                None => true,
                Some(other) => augment(other, feasible, banned_input, match_of_input, visited),
            };
            if free {
                match_of_input[i] = Some(out);
                return true;
            }
        }
        false
    }

    for out in 0..n_out {
        if out == j {
            continue;
        }
        let mut visited = vec![false; n_in];
        if !augment(out, feasible, i, &mut match_of_input, &mut visited) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AddressKind;

    fn node() -> Address {
        Address::new(EntityId(5), AddressKind::DpnSite)
    }

    fn home(n: u64) -> Address {
        Address::new(EntityId(100 + n), AddressKind::CustomerHome)
    }

    fn vendor() -> Address {
        Address::new(EntityId(0), AddressKind::VendorSite)
    }

    fn obs(time: SimTime, src: Address, dst: Address, surface: u64, size: SizeClass) -> ObservationEvent {
        ObservationEvent {
            time,
            src,
            dst,
            surface: SurfaceId(surface),
            size,
        }
    }

    fn uniform_batch(k: u64) -> Vec<ObservationEvent> {
        let mut log = Vec::new();
        for i in 0..k {
            log.push(obs(i as f64, vendor(), node(), i, SizeClass::S1));
        }
        for i in 0..k {
            log.push(obs(k as f64, node(), home(i), 100 + i, SizeClass::S1));
        }
        log
    }

    #[test]
    fn lone_package_is_fully_linked() {
        let log = uniform_batch(1);
        let epochs = correlation_attack(
            &log,
            node(),
            SizeClass::S1,
            Epoching::Partition,
            CorrelationMode::Exact,
        )
        .unwrap();
        assert_eq!(epochs.len(), 1);
        let out = &epochs[0].outbound[0];
        assert_eq!(out.candidates, vec![(SurfaceId(0), 1.0)]);
        assert_eq!(out.support_size(), 1);
        assert_eq!(out.entropy_bits(), 0.0);
        assert_eq!(out.map_guess, SurfaceId(0));
    }

    #[test]
    fn uniform_batch_of_three_has_log2_3_entropy() {
        let log = uniform_batch(3);
        let epochs = correlation_attack(
            &log,
            node(),
            SizeClass::S1,
            Epoching::Partition,
            CorrelationMode::Exact,
        )
        .unwrap();
        assert_eq!(epochs.len(), 1);
        for out in &epochs[0].outbound {
            assert_eq!(out.support_size(), 3);
            assert!((out.entropy_bits() - 3.0f64.log2()).abs() < 1e-12);
            for (_, w) in &out.candidates {
                assert!((w - 1.0 / 3.0).abs() < 1e-12);
            }
            // Uniform ties resolve to the lowest surface id.
            assert_eq!(out.map_guess, SurfaceId(0));
        }
    }

    #[test]
    fn size_leak_pins_the_odd_package() {
        // Inbound s0, s0, s2 normalized to common s1: the s2 outbound can
        // only be the s2 inbound; the two s1 outbounds split the s0 pair.
        let mut log = vec![
            obs(0.0, vendor(), node(), 0, SizeClass::S0),
            obs(1.0, vendor(), node(), 1, SizeClass::S0),
            obs(2.0, vendor(), node(), 2, SizeClass::S2),
        ];
        log.push(obs(3.0, node(), home(0), 100, SizeClass::S1));
        log.push(obs(3.0, node(), home(1), 101, SizeClass::S1));
        log.push(obs(3.0, node(), home(2), 102, SizeClass::S2));
        let epochs = correlation_attack(
            &log,
            node(),
            SizeClass::S1,
            Epoching::Partition,
            CorrelationMode::Exact,
        )
        .unwrap();
        let epoch = &epochs[0];
        let big = epoch.outbound_for(SurfaceId(102)).unwrap();
        assert_eq!(big.candidates, vec![(SurfaceId(2), 1.0)]);
        for surface in [100, 101] {
            let out = epoch.outbound_for(SurfaceId(surface)).unwrap();
            assert_eq!(out.support_size(), 2);
            for (s, w) in &out.candidates {
                assert!(*s == SurfaceId(0) || *s == SurfaceId(1));
                assert!((w - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partition_epochs_do_not_leak_across_flushes() {
        // Two threshold batches of 2: second epoch's pool is only the
        // arrivals after the first flush.
        let mut log = vec![
            obs(0.0, vendor(), node(), 0, SizeClass::S1),
            obs(1.0, vendor(), node(), 1, SizeClass::S1),
            obs(1.0, node(), home(0), 100, SizeClass::S1),
            obs(1.0, node(), home(1), 101, SizeClass::S1),
        ];
        log.push(obs(2.0, vendor(), node(), 2, SizeClass::S1));
        log.push(obs(3.0, vendor(), node(), 3, SizeClass::S1));
        log.push(obs(3.0, node(), home(2), 102, SizeClass::S1));
        log.push(obs(3.0, node(), home(3), 103, SizeClass::S1));
        let epochs = correlation_attack(
            &log,
            node(),
            SizeClass::S1,
            Epoching::Partition,
            CorrelationMode::Exact,
        )
        .unwrap();
        assert_eq!(epochs.len(), 2);
        assert_eq!(epochs[0].inbound_surfaces, vec![SurfaceId(0), SurfaceId(1)]);
        assert_eq!(epochs[1].inbound_surfaces, vec![SurfaceId(2), SurfaceId(3)]);
    }

    #[test]
    fn sliding_window_matches_each_departure_against_dwellers() {
        // Timed mix: two arrivals, departures at distinct times. The first
        // departure sees both arrivals; so does the second (the adversary
        // cannot tell which inbound left first).
        let log = vec![
            obs(0.0, vendor(), node(), 0, SizeClass::S1),
            obs(1.0, vendor(), node(), 1, SizeClass::S1),
            obs(2.0, node(), home(0), 100, SizeClass::S1),
            obs(4.0, node(), home(1), 101, SizeClass::S1),
        ];
        let epochs = correlation_attack(
            &log,
            node(),
            SizeClass::S1,
            Epoching::Sliding,
            CorrelationMode::Exact,
        )
        .unwrap();
        assert_eq!(epochs.len(), 2);
        for epoch in &epochs {
            assert_eq!(epoch.outbound[0].support_size(), 2);
        }
    }

    #[test]
    fn candidate_mode_prunes_to_consistent_support() {
        // Same size-leak batch: candidate mode must agree with exact support,
        // including ruling the s2 inbound out of the s1 outbounds.
        let mut log = vec![
            obs(0.0, vendor(), node(), 0, SizeClass::S0),
            obs(1.0, vendor(), node(), 1, SizeClass::S0),
            obs(2.0, vendor(), node(), 2, SizeClass::S2),
        ];
        log.push(obs(3.0, node(), home(0), 100, SizeClass::S1));
        log.push(obs(3.0, node(), home(1), 101, SizeClass::S1));
        log.push(obs(3.0, node(), home(2), 102, SizeClass::S2));
        let exact = correlation_attack(
            &log,
            node(),
            SizeClass::S1,
            Epoching::Partition,
            CorrelationMode::Exact,
        )
        .unwrap();
        let candidate = correlation_attack(
            &log,
            node(),
            SizeClass::S1,
            Epoching::Partition,
            CorrelationMode::Candidate,
        )
        .unwrap();
        for (e, c) in exact[0].outbound.iter().zip(&candidate[0].outbound) {
            let es: Vec<SurfaceId> = e.candidates.iter().map(|(s, _)| *s).collect();
            let cs: Vec<SurfaceId> = c.candidates.iter().map(|(s, _)| *s).collect();
            assert_eq!(es, cs);
        }
    }
}
