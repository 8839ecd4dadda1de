//! Uniqueness re-identification over purchase traces: how often does knowing
//! a few (item, time-bin) points of a target's history pin the target down to
//! a single trace?

use rand::prelude::*;

use crate::ids::ItemId;
use crate::model::{Order, SimTime};
use crate::rng::SimRng;

use super::AttackError;

/// One known point of a purchase history.
pub type TracePoint = (ItemId, u64);

/// A purchase trace: the (item, time-bin) points of one customer's history.
pub type Trace = Vec<TracePoint>;

/// Builds a trace from a customer's orders, quantizing order times into bins
/// of the given width. Every item instance of the order contributes a point.
pub fn trace_of_orders<'a>(
    orders: impl Iterator<Item = &'a Order>,
    bin_width: SimTime,
) -> Trace {
    let mut trace = Vec::new();
    for order in orders {
        let bin = (order.placed_at / bin_width).floor() as u64;
        let mut push_bag = |bag: &crate::model::ItemBag| {
            for (item, count) in bag.iter() {
                for _ in 0..*count {
                    trace.push((*item, bin));
                }
            }
        };
        push_bag(&order.self_items);
        push_bag(&order.noise_items);
    }
    trace.sort_unstable();
    trace
}

/// Distinct points of a trace, sorted.
fn distinct_points(trace: &Trace) -> Vec<TracePoint> {
    let mut points = trace.clone();
    points.sort_unstable();
    points.dedup();
    points
}

/// How many traces contain every point of `chosen`.
fn matching_traces(point_sets: &[Vec<TracePoint>], chosen: &[TracePoint]) -> usize {
    point_sets
        .iter()
        .filter(|points| chosen.iter().all(|p| points.binary_search(p).is_ok()))
        .count()
}

/// Monte-Carlo estimate of the re-identification fraction: per trial, pick a
/// random target, sample `p` distinct points of its trace, and check whether
/// the points match exactly one trace in the corpus.
pub fn uniqueness_reident(
    traces: &[Trace],
    p: usize,
    trials: u32,
    rng: &mut SimRng,
) -> Result<f64, AttackError> {
    if p == 0 {
        return Err(AttackError::InvalidParam("reident.p must be >= 1".into()));
    }
    let point_sets: Vec<Vec<TracePoint>> = traces.iter().map(distinct_points).collect();
    let eligible: Vec<usize> = point_sets
        .iter()
        .enumerate()
        .filter(|(_, pts)| pts.len() >= p)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(AttackError::InvalidParam(format!(
            "reident.p = {p} exceeds every trace length"
        )));
    }
    let mut unique = 0u32;
    for _ in 0..trials {
        let target = eligible[rng.gen_range(0..eligible.len())];
        let points = &point_sets[target];
        // Sample p distinct indices by partial shuffle.
        let mut indices: Vec<usize> = (0..points.len()).collect();
        for i in 0..p {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        let chosen: Vec<TracePoint> = indices[..p].iter().map(|&i| points[i]).collect();
        if matching_traces(&point_sets, &chosen) == 1 {
            unique += 1;
        }
    }
    Ok(unique as f64 / trials as f64)
}

/// Exact re-identification fraction: enumerates every p-point subset for
/// every eligible target and averages the per-target unique fractions —
/// the quantity `uniqueness_reident` estimates.
pub fn uniqueness_reident_exhaustive(traces: &[Trace], p: usize) -> Result<f64, AttackError> {
    if p == 0 {
        return Err(AttackError::InvalidParam("reident.p must be >= 1".into()));
    }
    let point_sets: Vec<Vec<TracePoint>> = traces.iter().map(distinct_points).collect();
    let mut per_target = Vec::new();
    for points in &point_sets {
        if points.len() < p {
            continue;
        }
        let mut unique = 0u64;
        let mut total = 0u64;
        let mut chosen = vec![0usize; p];
        enumerate_subsets(points.len(), p, &mut chosen, 0, 0, &mut |subset| {
            total += 1;
            let pts: Vec<TracePoint> = subset.iter().map(|&i| points[i]).collect();
            if matching_traces(&point_sets, &pts) == 1 {
                unique += 1;
            }
        });
        per_target.push(unique as f64 / total as f64);
    }
    if per_target.is_empty() {
        return Err(AttackError::InvalidParam(format!(
            "reident.p = {p} exceeds every trace length"
        )));
    }
    Ok(per_target.iter().sum::<f64>() / per_target.len() as f64)
}

fn enumerate_subsets(
    n: usize,
    p: usize,
    chosen: &mut Vec<usize>,
    depth: usize,
    start: usize,
    visit: &mut impl FnMut(&[usize]),
) {
    if depth == p {
        visit(chosen);
        return;
    }
    for i in start..n {
        chosen[depth] = i;
        enumerate_subsets(n, p, chosen, depth + 1, i + 1, visit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn t(points: &[(u64, u64)]) -> Trace {
        points.iter().map(|&(i, b)| (ItemId(i), b)).collect()
    }

    #[test]
    fn single_trace_is_always_unique() {
        let traces = vec![t(&[(1, 0), (2, 1)])];
        assert_eq!(uniqueness_reident_exhaustive(&traces, 1).unwrap(), 1.0);
        let f = uniqueness_reident(&traces, 1, 100, &mut stream(1, "reident")).unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn identical_pair_is_never_unique() {
        let traces = vec![t(&[(1, 0), (2, 1)]), t(&[(1, 0), (2, 1)])];
        assert_eq!(uniqueness_reident_exhaustive(&traces, 2).unwrap(), 0.0);
        let f = uniqueness_reident(&traces, 2, 100, &mut stream(2, "reident")).unwrap();
        assert_eq!(f, 0.0);
    }

    /// Four hand-built traces with known overlaps; p=2 checked against a
    /// by-hand enumeration.
    ///
    /// Traces: A = {x, y}, B = {x, z}, C = {y, z}, D = {x, y, z} with
    /// x=(1,0), y=(2,0), z=(3,0).
    /// Pairs per target:
    ///   A: {x,y} also in D -> 0/1 unique
    ///   B: {x,z} also in D -> 0/1 unique
    ///   C: {y,z} also in D -> 0/1 unique
    ///   D: {x,y} in A+D, {x,z} in B+D, {y,z} in C+D -> 0/3 unique
    /// Fraction = 0.
    /// Replacing D's z by w=(4,0): D = {x, y, w}:
    ///   A: {x,y} in A and D -> 0/1
    ///   B: {x,z} only B -> 1/1
    ///   C: {y,z} only C -> 1/1
    ///   D: {x,y} shared, {x,w} only D, {y,w} only D -> 2/3
    /// Fraction = (0 + 1 + 1 + 2/3) / 4 = 2/3.
    #[test]
    fn hand_built_traces_match_manual_enumeration() {
        let traces = vec![
            t(&[(1, 0), (2, 0)]),
            t(&[(1, 0), (3, 0)]),
            t(&[(2, 0), (3, 0)]),
            t(&[(1, 0), (2, 0), (3, 0)]),
        ];
        assert_eq!(uniqueness_reident_exhaustive(&traces, 2).unwrap(), 0.0);

        let traces2 = vec![
            t(&[(1, 0), (2, 0)]),
            t(&[(1, 0), (3, 0)]),
            t(&[(2, 0), (3, 0)]),
            t(&[(1, 0), (2, 0), (4, 0)]),
        ];
        let f = uniqueness_reident_exhaustive(&traces2, 2).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12, "got {f}");
    }

    #[test]
    fn fraction_is_monotone_in_p() {
        // Synthetic corpus with overlapping supports.
        let mut rng = stream(3, "reident");
        let traces: Vec<Trace> = (0..50)
            .map(|_| {
                (0..6)
                    .map(|_| (ItemId(rng.gen_range(0..12)), rng.gen_range(0..3)))
                    .collect()
            })
            .collect();
        let mut prev = 0.0;
        for p in 1..=4 {
            let f = uniqueness_reident_exhaustive(&traces, p).unwrap();
            assert!(
                f >= prev - 1e-12,
                "fraction decreased from {prev} to {f} at p={p}"
            );
            prev = f;
        }
    }

    #[test]
    fn p_larger_than_all_traces_is_rejected() {
        let traces = vec![t(&[(1, 0)])];
        assert!(matches!(
            uniqueness_reident_exhaustive(&traces, 2),
            Err(AttackError::InvalidParam(_))
        ));
        assert!(matches!(
            uniqueness_reident(&traces, 2, 10, &mut stream(4, "reident")),
            Err(AttackError::InvalidParam(_))
        ));
    }

    #[test]
    fn trace_building_bins_times_and_expands_multisets() {
        use crate::ids::{CustomerId, EntityId, OrderId};
        use crate::model::ItemBag;
        let mut bag = ItemBag::new();
        bag.add(ItemId(5), 2);
        let orders = vec![Order {
            id: OrderId(0),
            customer: CustomerId(0),
            vendor: EntityId(0),
            self_items: bag,
            noise_items: ItemBag::singleton(ItemId(7)),
            placed_at: 12.3,
        }];
        let trace = trace_of_orders(orders.iter(), 10.0);
        assert_eq!(
            trace,
            vec![(ItemId(5), 1), (ItemId(5), 1), (ItemId(7), 1)]
        );
    }
}
