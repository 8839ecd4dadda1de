//! Turns run artifacts and attack outputs into privacy and efficiency
//! quantities, and assembles sweep results into a privacy/efficiency
//! frontier.

use serde::{Deserialize, Serialize};

use crate::adversary::{
    collude, correlation_attack, sniffing_dpn, view_of, AttackError, EpochPosterior, Epoching,
    LinkGroundTruth, Viewer,
};
use crate::engine::{AttacksConfig, CollusionSpec, RunResult};
use crate::ids::SurfaceId;
use crate::rng::{labels, stream};

/// Privacy quantities of one run: how well the adversary links packages, and
/// how exposed customers are under the configured collusion sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    /// Outbound packages the correlation analysis covered (plus direct
    /// deliveries, which are trivially linked).
    pub packages_analyzed: u32,
    pub anonymity_mean: Option<f64>,
    pub anonymity_min: Option<u32>,
    pub entropy_mean_bits: Option<f64>,
    /// Fraction of analyzed packages whose MAP guess names the true inbound.
    pub map_accuracy: Option<f64>,
    pub reident_fraction: Option<f64>,
    /// Exposure rate per configured collusion set, in configuration order.
    pub collusion_exposed: Vec<(String, f64)>,
}

impl PrivacyReport {
    pub fn empty() -> Self {
        Self {
            packages_analyzed: 0,
            anonymity_mean: None,
            anonymity_min: None,
            entropy_mean_bits: None,
            map_accuracy: None,
            reident_fraction: None,
            collusion_exposed: Vec::new(),
        }
    }
}

/// Efficiency quantities of one run. Truncated orders are excluded from the
/// latency/cost/hops statistics and reported as a count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub orders_placed: u32,
    pub orders_delivered: u32,
    pub orders_truncated: u32,
    pub latency_mean: Option<f64>,
    pub latency_p50: Option<f64>,
    pub latency_p95: Option<f64>,
    pub cost_mean: Option<f64>,
    pub hops_mean: Option<f64>,
    /// Item instances delivered to secondary recipients.
    pub redistributed_items: u32,
}

impl EfficiencyReport {
    pub fn empty() -> Self {
        Self {
            orders_placed: 0,
            orders_delivered: 0,
            orders_truncated: 0,
            latency_mean: None,
            latency_p50: None,
            latency_p95: None,
            cost_mean: None,
            hops_mean: None,
            redistributed_items: 0,
        }
    }
}

/// Size of the support of the target package's candidate set.
pub fn anonymity_set_size(epoch: &EpochPosterior, target: SurfaceId) -> Result<u32, AttackError> {
    epoch
        .outbound_for(target)
        .map(|o| o.support_size())
        .ok_or_else(|| AttackError::UnknownTarget(target.to_string()))
}

/// Shannon entropy (bits) of the target package's candidate marginal.
pub fn linkage_entropy(epoch: &EpochPosterior, target: SurfaceId) -> Result<f64, AttackError> {
    epoch
        .outbound_for(target)
        .map(|o| o.entropy_bits())
        .ok_or_else(|| AttackError::UnknownTarget(target.to_string()))
}

/// Nearest-rank percentile of an ascending-sorted slice.
fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

fn resolve_collusion_members(
    run: &RunResult,
    spec: &CollusionSpec,
) -> Result<Vec<crate::adversary::KnowledgeView>, AttackError> {
    let mut views = Vec::new();
    for token in &spec.members {
        let (role, index, sniffing) = parse_token(token)?;
        let list = match role {
            "vendor" => &run.directory.vendors,
            "dpn" => &run.directory.dpn_sites,
            "pman" => &run.directory.pman_sites,
            "customer" => &run.directory.customer_homes,
            "adversary" => {
                views.push(view_of(Viewer::Adversary, run)?);
                continue;
            }
            other => {
                return Err(AttackError::InvalidParam(format!(
                    "unknown collusion role '{other}'"
                )))
            }
        };
        let selected: Vec<_> = match index {
            Some(i) => list
                .get(i)
                .into_iter()
                .map(|a| a.entity)
                .collect(),
            None => list.iter().map(|a| a.entity).collect(),
        };
        if selected.is_empty() {
            return Err(AttackError::InvalidParam(format!(
                "collusion member '{token}' names nobody in this run"
            )));
        }
        for entity in selected {
            if sniffing {
                views.push(sniffing_dpn(run, entity)?);
            } else {
                views.push(view_of(Viewer::Entity(entity), run)?);
            }
        }
    }
    Ok(views)
}

fn parse_token(token: &str) -> Result<(&'static str, Option<usize>, bool), AttackError> {
    let (sniffing, rest) = match token.strip_prefix("sniffing_") {
        Some(rest) => (true, rest),
        None => (false, token),
    };
    for role in ["vendor", "dpn", "pman", "customer", "adversary"] {
        if let Some(suffix) = rest.strip_prefix(role) {
            if sniffing && role != "dpn" {
                return Err(AttackError::InvalidParam(format!(
                    "sniffing only applies to dpn entities, got '{token}'"
                )));
            }
            if suffix.is_empty() {
                return Ok((role, None, sniffing));
            }
            if let Ok(i) = suffix.parse::<usize>() {
                return Ok((role, Some(i), sniffing));
            }
        }
    }
    Err(AttackError::InvalidParam(format!(
        "unknown collusion member '{token}'"
    )))
}

/// Runs the configured attacks over a completed run and aggregates both
/// reports deterministically.
pub fn summarize(
    run: &RunResult,
    attacks: &AttacksConfig,
) -> Result<(PrivacyReport, EfficiencyReport), AttackError> {
    // --- privacy: per-package linkage at every mix node ---
    let epoching = Epoching::for_policy(&run.mix.policy);
    let mut supports: Vec<u32> = Vec::new();
    let mut entropies: Vec<f64> = Vec::new();
    let mut map_total = 0u32;
    let mut map_correct = 0u32;
    for node in &run.directory.dpn_sites {
        let epochs = correlation_attack(
            &run.observations,
            *node,
            run.mix.common_class,
            epoching,
            attacks.correlation_mode,
        )?;
        for epoch in &epochs {
            // Ground truth for MAP scoring: the engine's record of the same
            // flush.
            let truth = run.epochs.iter().find(|e| {
                e.node == epoch.node && e.flush_time.to_bits() == epoch.flush_time.to_bits()
            });
            for out in &epoch.outbound {
                supports.push(out.support_size());
                entropies.push(out.entropy_bits());
                if let Some(truth) = truth {
                    if let Some(entry) =
                        truth.entries.iter().find(|e| e.out_surface == out.out_surface)
                    {
                        map_total += 1;
                        if entry.in_surface == out.map_guess {
                            map_correct += 1;
                        }
                    }
                }
            }
        }
    }
    // Orders delivered with no intermediary are fully linked by direct
    // observation: anonymity set of one.
    for (record, delivery) in run.orders.iter().zip(&run.deliveries) {
        if record.main_route.intermediaries().is_empty() && delivery.delivered_at.is_some() {
            supports.push(1);
            entropies.push(0.0);
            map_total += 1;
            map_correct += 1;
        }
    }

    // --- privacy: re-identification over this run's purchase traces ---
    let reident_fraction = {
        let mut traces = Vec::new();
        for home in &run.directory.customer_homes {
            let customer = crate::ids::CustomerId(
                run.directory
                    .customer_homes
                    .iter()
                    .position(|a| a.entity == home.entity)
                    .unwrap() as u64,
            );
            let trace = crate::adversary::trace_of_orders(
                run.orders
                    .iter()
                    .map(|r| &r.order)
                    .filter(|o| o.customer == customer),
                attacks.reident.bin,
            );
            if !trace.is_empty() {
                traces.push(trace);
            }
        }
        if traces.is_empty() {
            None
        } else {
            crate::adversary::uniqueness_reident(
                &traces,
                attacks.reident.p,
                attacks.reident.trials,
                &mut stream(run.seed, labels::REIDENT),
            )
            .ok()
        }
    };

    // --- privacy: collusion closure per configured set ---
    let truth = LinkGroundTruth::from_run(run);
    let mut collusion_exposed = Vec::new();
    for spec in &attacks.collusion_sets {
        let views = resolve_collusion_members(run, spec)?;
        let outcome = collude(&views, &truth);
        collusion_exposed.push((spec.name(), outcome.exposed_rate()));
    }

    let packages_analyzed = supports.len() as u32;
    let privacy = PrivacyReport {
        packages_analyzed,
        anonymity_mean: if supports.is_empty() {
            None
        } else {
            Some(supports.iter().map(|&s| s as f64).sum::<f64>() / supports.len() as f64)
        },
        anonymity_min: supports.iter().min().copied(),
        entropy_mean_bits: if entropies.is_empty() {
            None
        } else {
            Some(entropies.iter().sum::<f64>() / entropies.len() as f64)
        },
        map_accuracy: if map_total == 0 {
            None
        } else {
            Some(map_correct as f64 / map_total as f64)
        },
        reident_fraction,
        collusion_exposed,
    };

    // --- efficiency ---
    let mut latencies: Vec<f64> = run
        .deliveries
        .iter()
        .filter_map(|d| d.latency())
        .collect();
    latencies.sort_by(|a, b| a.total_cmp(b));
    let delivered: Vec<_> = run
        .deliveries
        .iter()
        .filter(|d| d.delivered_at.is_some())
        .collect();
    let redistributed_items: u32 = run
        .redistributions
        .iter()
        .filter(|r| r.arrived_at.is_some())
        .map(|r| r.items.len())
        .sum();
    let efficiency = EfficiencyReport {
        orders_placed: run.orders.len() as u32,
        orders_delivered: delivered.len() as u32,
        orders_truncated: (run.orders.len() - delivered.len()) as u32,
        latency_mean: if latencies.is_empty() {
            None
        } else {
            Some(latencies.iter().sum::<f64>() / latencies.len() as f64)
        },
        latency_p50: percentile(&latencies, 0.50),
        latency_p95: percentile(&latencies, 0.95),
        cost_mean: if delivered.is_empty() {
            None
        } else {
            Some(delivered.iter().map(|d| d.tally.cost).sum::<f64>() / delivered.len() as f64)
        },
        hops_mean: if delivered.is_empty() {
            None
        } else {
            Some(
                delivered.iter().map(|d| d.tally.hops as f64).sum::<f64>()
                    / delivered.len() as f64,
            )
        },
        redistributed_items,
    };
    Ok((privacy, efficiency))
}

/// One sweep point of the privacy/efficiency frontier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub knob: f64,
    pub privacy: PrivacyReport,
    pub efficiency: EfficiencyReport,
}

/// Orders sweep results by knob value into frontier rows.
pub fn frontier(mut rows: Vec<FrontierRow>) -> Vec<FrontierRow> {
    rows.sort_by(|a, b| a.knob.total_cmp(&b.knob));
    rows
}
