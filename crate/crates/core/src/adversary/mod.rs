//! The threat model: a global passive adversary that observes every physical
//! package movement, per-entity legitimate knowledge views, and the attacks
//! run against them — traffic correlation, repeated-round intersection,
//! uniqueness re-identification, and collusion closure.
//!
//! The adversary sees movements and nothing else; it never opens or injects
//! packages. Entities see exactly what the events they participate in reveal.
//! All attacks here are read-only over immutable run artifacts.

mod correlation;
mod knowledge;
mod reident;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{EntityId, SurfaceId};
use crate::model::{Address, AddressKind, SimTime, SizeClass};

pub use correlation::{
    correlation_attack, CorrelationOutput, EpochPosterior, Epoching, OutboundPosterior,
};
pub use knowledge::{
    all_views, collude, sniffing_dpn, view_of, CollusionOutcome, Fact, KnowledgeView,
    LinkGroundTruth, Viewer,
};
pub use reident::{
    trace_of_orders, uniqueness_reident, uniqueness_reident_exhaustive, Trace, TracePoint,
};

/// One sighting of a physical movement: the adversary's only raw input.
/// Every movement is sighted twice — once leaving `src` (timestamped with
/// the departure) and once reaching `dst` (timestamped with the arrival).
/// Surfaces exist for exactly one movement, so the two sightings of a
/// movement pair up by surface id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationEvent {
    pub time: SimTime,
    pub src: Address,
    pub dst: Address,
    pub surface: SurfaceId,
    pub size: SizeClass,
}

/// One reconstructed movement: both sightings of a surface folded together.
/// A movement cut off by the horizon has been sighted only departing, so
/// `arrived` falls back to `departed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub surface: SurfaceId,
    pub src: Address,
    pub dst: Address,
    pub size: SizeClass,
    pub departed: SimTime,
    pub arrived: SimTime,
}

/// Pairs sightings by surface into movements, ordered by departure time then
/// surface.
pub fn movements(observations: &[ObservationEvent]) -> Vec<Movement> {
    let mut by_surface: std::collections::BTreeMap<SurfaceId, Movement> =
        std::collections::BTreeMap::new();
    for obs in observations {
        by_surface
            .entry(obs.surface)
            .and_modify(|m| {
                m.departed = m.departed.min(obs.time);
                m.arrived = m.arrived.max(obs.time);
            })
            .or_insert(Movement {
                surface: obs.surface,
                src: obs.src,
                dst: obs.dst,
                size: obs.size,
                departed: obs.time,
                arrived: obs.time,
            });
    }
    let mut list: Vec<Movement> = by_surface.into_values().collect();
    list.sort_by(|a, b| a.departed.total_cmp(&b.departed).then(a.surface.cmp(&b.surface)));
    list
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    /// No assignment of outbound to inbound packages satisfies the physical
    /// constraints; the simulation violated its own model.
    #[error("no consistent matching at node {node} for flush at t={time}")]
    Infeasible { node: EntityId, time: SimTime },
    #[error("epoch too large for exact enumeration: {inbound} inbound packages")]
    EpochTooLarge { inbound: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("unknown target {0}")]
    UnknownTarget(String),
}

/// One round of an intersection attack: the adversary knows which inbound
/// package at a mix node belongs to the target this round.
#[derive(Debug, Clone)]
pub struct IntersectionRound<'a> {
    pub epoch: &'a EpochPosterior,
    pub target_inbound: SurfaceId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundCandidates {
    pub round: usize,
    /// Customer homes consistent with this round's posterior support.
    pub candidates: std::collections::BTreeSet<Address>,
    /// Intersection of all candidate sets so far.
    pub cumulative: std::collections::BTreeSet<Address>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionOutcome {
    pub rounds: Vec<RoundCandidates>,
    /// First round (1-based) at which the cumulative set is a singleton;
    /// `None` if the target never becomes unique.
    pub rounds_to_unique: Option<usize>,
}

/// Intersects per-round candidate home sets for a target that sends through
/// a mix node every round.
///
/// Per round, the candidate set holds every customer home reachable in the
/// round's posterior support from the target's inbound package. A supported
/// outbound package headed somewhere other than a home means the adversary
/// cannot bound the recipient this round, so the round falls back to
/// `universe`. The cumulative set is the running intersection.
pub fn intersection_attack(
    rounds: &[IntersectionRound<'_>],
    universe: &std::collections::BTreeSet<Address>,
) -> IntersectionOutcome {
    let mut out = IntersectionOutcome {
        rounds: Vec::with_capacity(rounds.len()),
        rounds_to_unique: None,
    };
    let mut cumulative: Option<std::collections::BTreeSet<Address>> = None;
    for (i, round) in rounds.iter().enumerate() {
        let mut candidates = std::collections::BTreeSet::new();
        let mut unbounded = false;
        for outbound in &round.epoch.outbound {
            let supported = outbound
                .candidates
                .iter()
                .any(|(surface, weight)| *surface == round.target_inbound && *weight > 0.0);
            if supported {
                if outbound.dest.kind == AddressKind::CustomerHome {
                    candidates.insert(outbound.dest);
                } else {
                    unbounded = true;
                }
            }
        }
        if unbounded || candidates.is_empty() {
            candidates = universe.clone();
        }
        let next = match cumulative.take() {
            None => candidates.clone(),
            Some(prev) => prev.intersection(&candidates).copied().collect(),
        };
        if next.len() == 1 && out.rounds_to_unique.is_none() {
            out.rounds_to_unique = Some(i + 1);
        }
        out.rounds.push(RoundCandidates {
            round: i + 1,
            candidates,
            cumulative: next.clone(),
        });
        cumulative = Some(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AddressKind;

    fn home(n: u64) -> Address {
        Address::new(EntityId(100 + n), AddressKind::CustomerHome)
    }

    fn epoch_with(outputs: &[(u64, Address, &[u64])]) -> EpochPosterior {
        EpochPosterior {
            node: EntityId(1),
            flush_time: 0.0,
            inbound_surfaces: outputs
                .iter()
                .flat_map(|(_, _, ins)| ins.iter().map(|&i| SurfaceId(i)))
                .collect(),
            outbound: outputs
                .iter()
                .map(|(out, dest, ins)| OutboundPosterior {
                    out_surface: SurfaceId(*out),
                    out_time: 0.0,
                    dest: *dest,
                    candidates: ins
                        .iter()
                        .map(|&i| (SurfaceId(i), 1.0 / ins.len() as f64))
                        .collect(),
                    map_guess: SurfaceId(ins[0]),
                })
                .collect(),
        }
    }

    #[test]
    fn sole_customer_is_unique_in_one_round() {
        let universe: std::collections::BTreeSet<Address> = [home(0)].into();
        let epoch = epoch_with(&[(10, home(0), &[1])]);
        let rounds = [IntersectionRound {
            epoch: &epoch,
            target_inbound: SurfaceId(1),
        }];
        let outcome = intersection_attack(&rounds, &universe);
        assert_eq!(outcome.rounds_to_unique, Some(1));
    }

    #[test]
    fn perfectly_co_batching_pair_never_separates() {
        // Two customers always flushed together with identical sizes: every
        // round's candidate set is both homes.
        let universe: std::collections::BTreeSet<Address> = [home(0), home(1)].into();
        let epochs: Vec<EpochPosterior> = (0..40)
            .map(|_| epoch_with(&[(10, home(0), &[1, 2]), (11, home(1), &[1, 2])]))
            .collect();
        let rounds: Vec<IntersectionRound> = epochs
            .iter()
            .map(|epoch| IntersectionRound {
                epoch,
                target_inbound: SurfaceId(1),
            })
            .collect();
        let outcome = intersection_attack(&rounds, &universe);
        assert_eq!(outcome.rounds_to_unique, None);
        assert_eq!(outcome.rounds.last().unwrap().cumulative.len(), 2);
    }
}
