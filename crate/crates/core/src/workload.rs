//! Deterministic synthetic workload generation: catalogs, customers with
//! purchase profiles, order streams, and secondary-recipient request streams.
//!
//! Every generator is a pure function of its parameters and the supplied RNG
//! stream, so identical seeds reproduce identical workloads.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{CustomerId, EntityId, ItemId, OrderId};
use crate::model::{Address, ItemBag, SimTime};
use crate::protocols::Topology;
use crate::rng::SimRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// The goods on offer, with a Zipf-shaped popularity distribution over them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub items: Vec<ItemId>,
    /// Zipf exponent; 0 is uniform popularity.
    pub zipf_s: f64,
    /// Popularity weight per item, same order as `items`, sums to 1.
    pub weights: Vec<f64>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One customer's purchasing behavior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CustomerProfile {
    pub customer: CustomerId,
    pub home: Address,
    /// Normalized propensity per item in the profile's support, item-ordered.
    pub item_propensity: Vec<(ItemId, f64)>,
    /// Mean orders per unit time (Poisson rate).
    pub order_rate: f64,
    /// Maximum noise items bought per order for redistribution.
    pub noise_budget: u32,
}

/// A secondary recipient asking the PMAN for goods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondaryRequest {
    pub recipient: EntityId,
    pub items: ItemBag,
    pub requested_at: SimTime,
}

/// Generates `n` items whose popularity weights are proportional to
/// `rank^(-s)`, normalized to sum to 1.
pub fn gen_catalog(n: usize, s: f64) -> Result<Catalog, WorkloadError> {
    if n == 0 {
        return Err(WorkloadError::InvalidParam("catalog.n must be >= 1".into()));
    }
    if !(s.is_finite() && s >= 0.0) {
        return Err(WorkloadError::InvalidParam(
            "catalog.zipf_s must be finite and >= 0".into(),
        ));
    }
    let raw: Vec<f64> = (1..=n).map(|rank| (rank as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    Ok(Catalog {
        items: (0..n as u64).map(ItemId).collect(),
        zipf_s: s,
        weights: raw.into_iter().map(|w| w / total).collect(),
    })
}

/// Weighted sampling of `k` distinct indices without replacement.
fn sample_distinct_weighted(weights: &[f64], k: usize, rng: &mut SimRng) -> Vec<usize> {
    let mut remaining: Vec<f64> = weights.to_vec();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let dist = WeightedIndex::new(&remaining).expect("some weight remains positive");
        let idx = dist.sample(rng);
        picked.push(idx);
        remaining[idx] = 0.0;
    }
    picked
}

/// Builds one profile per home address. Each customer's support is `k` items
/// sampled by popularity without replacement, with propensities renormalized
/// over the support.
pub fn gen_customers(
    homes: &[Address],
    catalog: &Catalog,
    k: usize,
    order_rate: f64,
    noise_budget: u32,
    rng: &mut SimRng,
) -> Result<Vec<CustomerProfile>, WorkloadError> {
    if k == 0 || k > catalog.len() {
        return Err(WorkloadError::InvalidParam(format!(
            "profile.sparsity_k must be in 1..={}, got {k}",
            catalog.len()
        )));
    }
    if !(order_rate.is_finite() && order_rate > 0.0) {
        return Err(WorkloadError::InvalidParam(
            "profile.order_rate must be > 0".into(),
        ));
    }
    let profiles = homes
        .iter()
        .enumerate()
        .map(|(i, &home)| {
            let mut support = sample_distinct_weighted(&catalog.weights, k, rng);
            support.sort_unstable();
            let total: f64 = support.iter().map(|&idx| catalog.weights[idx]).sum();
            let item_propensity = support
                .into_iter()
                .map(|idx| (catalog.items[idx], catalog.weights[idx] / total))
                .collect();
            CustomerProfile {
                customer: CustomerId(i as u64),
                home,
                item_propensity,
                order_rate,
                noise_budget,
            }
        })
        .collect();
    Ok(profiles)
}

/// Epochs of a Poisson process with the given rate over `[0, horizon)`.
fn poisson_epochs(rate: f64, horizon: SimTime, rng: &mut SimRng) -> Vec<SimTime> {
    let mut epochs = Vec::new();
    if horizon <= 0.0 || rate <= 0.0 {
        return epochs;
    }
    let exp = Exp::new(rate).expect("rate > 0");
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t >= horizon {
            return epochs;
        }
        epochs.push(t);
    }
}

fn sample_propensity(profile: &CustomerProfile, rng: &mut SimRng) -> ItemId {
    let dist = WeightedIndex::new(profile.item_propensity.iter().map(|(_, w)| *w))
        .expect("propensities are positive");
    profile.item_propensity[dist.sample(rng)].0
}

/// Generates the time-ordered order stream for all customers.
///
/// Per customer, order epochs follow a Poisson process at the profile's rate.
/// Each order carries one self item drawn from the customer's propensity.
/// Noise items are drawn uniformly from the catalog — deliberately not from
/// the customer's own propensity, so the noise does not resemble the profile
/// it obfuscates — with a count sampled in `0..=noise_budget`, and only under
/// the DPN+PMAN topology.
pub fn gen_orders(
    profiles: &[CustomerProfile],
    catalog: &Catalog,
    horizon: SimTime,
    topology: Topology,
    vendors: &[EntityId],
    rng: &mut SimRng,
) -> Vec<Order> {
    let mut orders: Vec<Order> = Vec::new();
    let with_noise = matches!(topology, Topology::DpnPman);
    for profile in profiles {
        // Each customer shops at a fixed vendor.
        let vendor = vendors[profile.customer.0 as usize % vendors.len()];
        for epoch in poisson_epochs(profile.order_rate, horizon, rng) {
            let self_items = ItemBag::singleton(sample_propensity(profile, rng));
            let mut noise_items = ItemBag::new();
            if with_noise && profile.noise_budget > 0 {
                let count = rng.gen_range(0..=profile.noise_budget);
                for _ in 0..count {
                    let idx = rng.gen_range(0..catalog.len());
                    noise_items.add(catalog.items[idx], 1);
                }
            }
            orders.push(Order {
                id: OrderId(0), // assigned after the global sort
                customer: profile.customer,
                vendor,
                self_items,
                noise_items,
                placed_at: epoch,
            });
        }
    }
    orders.sort_by(|a, b| {
        a.placed_at
            .total_cmp(&b.placed_at)
            .then(a.customer.cmp(&b.customer))
    });
    for (i, order) in orders.iter_mut().enumerate() {
        order.id = OrderId(i as u64);
    }
    orders
}

use crate::model::Order;

/// Generates the time-ordered secondary-recipient request stream. Each
/// recipient requests at the given Poisson rate; every request asks for one
/// item drawn by catalog popularity.
pub fn gen_secondary_requests(
    recipients: &[EntityId],
    catalog: &Catalog,
    rate: f64,
    horizon: SimTime,
    rng: &mut SimRng,
) -> Vec<SecondaryRequest> {
    let mut requests: Vec<SecondaryRequest> = Vec::new();
    if rate <= 0.0 {
        return requests;
    }
    let popularity =
        WeightedIndex::new(&catalog.weights).expect("catalog weights are positive");
    for &recipient in recipients {
        for epoch in poisson_epochs(rate, horizon, rng) {
            let item = catalog.items[popularity.sample(rng)];
            requests.push(SecondaryRequest {
                recipient,
                items: ItemBag::singleton(item),
                requested_at: epoch,
            });
        }
    }
    requests.sort_by(|a, b| {
        a.requested_at
            .total_cmp(&b.requested_at)
            .then(a.recipient.cmp(&b.recipient))
    });
    requests
}
