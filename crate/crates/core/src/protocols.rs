//! State machines for the four delivery architectures: route planning,
//! mix-node batching and delay behavior, PMAN order splitting and
//! redistribution, and layered multi-hop route construction.

use std::collections::VecDeque;

use rand::prelude::*;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{EntityId, OrderId, SurfaceMint};
use crate::model::{
    open_owned_layers, wrap_package, Address, AddressKind, ItemBag, Manifest, ModelError, Order,
    Package, RouteClass, RouteError, RouteSpec, SimTime, SizeClass, SniffResult, Unwrapped,
};
use crate::rng::SimRng;
use crate::workload::SecondaryRequest;

/// The delivery network architecture under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Topology {
    /// Vendor ships straight to the customer.
    Conventional,
    /// One de-identifying intermediary between vendor and customer.
    Dpn,
    /// DPN plus noise purchases donated onward to a mutual-aid entity.
    DpnPman,
    /// A chain of `hops` intermediaries with layered wrapping.
    Dpdn { hops: u32 },
}

impl Topology {
    pub fn tag(&self) -> &'static str {
        match self {
            Topology::Conventional => "conventional",
            Topology::Dpn => "dpn",
            Topology::DpnPman => "dpn_pman",
            Topology::Dpdn { .. } => "dpdn",
        }
    }
}

/// Delay distribution used for mix dwell and hop latency sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "dist")]
pub enum DelayDist {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { mean: f64 },
}

impl DelayDist {
    pub fn sample(&self, rng: &mut SimRng) -> f64 {
        match *self {
            DelayDist::Constant { value } => value,
            DelayDist::Uniform { lo, hi } => {
                if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            }
            DelayDist::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("mean > 0").sample(rng)
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            DelayDist::Constant { value } if value >= 0.0 => Ok(()),
            DelayDist::Constant { .. } => Err("constant delay must be >= 0".into()),
            DelayDist::Uniform { lo, hi } if lo >= 0.0 && hi >= lo => Ok(()),
            DelayDist::Uniform { .. } => Err("uniform delay needs 0 <= lo <= hi".into()),
            DelayDist::Exponential { mean } if mean > 0.0 => Ok(()),
            DelayDist::Exponential { .. } => Err("exponential delay needs mean > 0".into()),
        }
    }
}

/// How an intermediary batches, delays, and reorders before forwarding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MixPolicy {
    /// Hold until `x` packages of common size are present, then flush all of
    /// them at once in shuffled order.
    Threshold { x: u32 },
    /// Forward each package after an independently sampled artificial delay.
    TimedDelay { dist: DelayDist },
    /// Keep a pool of at least `pool_min`; each excess package independently
    /// flushes with probability `flush_prob`.
    Pool { pool_min: u32, flush_prob: f64 },
}

impl MixPolicy {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            MixPolicy::Threshold { x } if x >= 1 => Ok(()),
            MixPolicy::Threshold { .. } => Err("mix.x must be >= 1".into()),
            MixPolicy::TimedDelay { dist } => dist.validate(),
            MixPolicy::Pool { flush_prob, .. } if flush_prob > 0.0 && flush_prob <= 1.0 => Ok(()),
            MixPolicy::Pool { .. } => Err("mix.flush_prob must be in (0, 1]".into()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    /// The site directory cannot satisfy the requested route shape.
    #[error("directory too small: {0}")]
    DirectoryTooSmall(String),
    /// A package reached a node that cannot open it: a routing bug, surfaced
    /// loudly instead of dropped.
    #[error("misrouted package at node {node}: {source}")]
    Misrouted {
        node: EntityId,
        #[source]
        source: ModelError,
    },
    /// A mix node opened its layers and found bare goods; mix nodes are never
    /// final recipients, so the route that produced this was malformed.
    #[error("mix node {node} unwrapped goods addressed to it")]
    UnexpectedGoods { node: EntityId },
    #[error(transparent)]
    Route(#[from] RouteError),
}

/// Where donated noise goods travel on their way to the PMAN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonationMode {
    /// Customer ships to a DPN which forwards to the PMAN; the extra mix hop
    /// hides the donor from the PMAN.
    #[default]
    ViaDpn,
    /// Customer ships straight to the PMAN (the weaker alternative).
    Direct,
}

/// The physical sites available for route planning.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SiteDirectory {
    pub vendors: Vec<Address>,
    pub dpn_sites: Vec<Address>,
    pub pman_sites: Vec<Address>,
}

/// Routes planned for one order: the main vendor-to-customer delivery, plus a
/// donation route when the order carries noise items under DPN+PMAN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedRoutes {
    pub main: RouteSpec,
    pub donation: Option<RouteSpec>,
}

fn pick<'a>(sites: &'a [Address], rng: &mut SimRng) -> &'a Address {
    &sites[rng.gen_range(0..sites.len())]
}

/// Plans the route(s) for `order` under `topology`.
///
/// Conventional: vendor -> customer. DPN and DPN+PMAN: vendor -> dpn ->
/// customer, the latter adding a donation route for noise items. DPDN(k):
/// vendor -> k distinct intermediaries chosen uniformly without replacement
/// -> customer.
pub fn plan_route(
    order: &Order,
    customer_home: Address,
    topology: Topology,
    donation_mode: DonationMode,
    directory: &SiteDirectory,
    rng: &mut SimRng,
) -> Result<PlannedRoutes, ProtocolError> {
    let vendor = Address::new(order.vendor, AddressKind::VendorSite);
    let main = match topology {
        Topology::Conventional => {
            RouteSpec::new(RouteClass::MainDelivery, vec![vendor, customer_home])?
        }
        Topology::Dpn | Topology::DpnPman => {
            if directory.dpn_sites.is_empty() {
                return Err(ProtocolError::DirectoryTooSmall(
                    "topology needs at least one dpn site".into(),
                ));
            }
            let dpn = *pick(&directory.dpn_sites, rng);
            RouteSpec::new(RouteClass::MainDelivery, vec![vendor, dpn, customer_home])?
        }
        Topology::Dpdn { hops } => {
            let k = hops as usize;
            if directory.dpn_sites.len() < k {
                return Err(ProtocolError::DirectoryTooSmall(format!(
                    "dpdn with {k} hops needs {k} dpn sites, directory has {}",
                    directory.dpn_sites.len()
                )));
            }
            // Uniform selection without replacement, order-sensitive.
            let mut pool: Vec<Address> = directory.dpn_sites.clone();
            let mut hops_out = Vec::with_capacity(k + 2);
            hops_out.push(vendor);
            for _ in 0..k {
                let idx = rng.gen_range(0..pool.len());
                hops_out.push(pool.swap_remove(idx));
            }
            hops_out.push(customer_home);
            RouteSpec::new(RouteClass::MainDelivery, hops_out)?
        }
    };

    let donation = if matches!(topology, Topology::DpnPman) && !order.noise_items.is_empty() {
        if directory.pman_sites.is_empty() {
            return Err(ProtocolError::DirectoryTooSmall(
                "dpn_pman topology needs at least one pman site".into(),
            ));
        }
        let pman = *pick(&directory.pman_sites, rng);
        let hops = match donation_mode {
            DonationMode::ViaDpn => {
                let dpn = *pick(&directory.dpn_sites, rng);
                vec![customer_home, dpn, pman]
            }
            DonationMode::Direct => vec![customer_home, pman],
        };
        Some(RouteSpec::new(RouteClass::Donation, hops)?)
    } else {
        None
    };

    Ok(PlannedRoutes { main, donation })
}

/// Builds the layered package for a route: one layer per hop after the
/// origin, innermost goods first. The layer for hop `i` is addressed to hop
/// `i` and openable only by it, so unwrapping at hop `i` reveals hop `i+1`
/// and nothing deeper.
pub fn build_onion(mint: &mut SurfaceMint, route: &RouteSpec, manifest: Manifest) -> Package {
    let hops = &route.hops;
    let last = hops[hops.len() - 1];
    let mut pkg = Package::over_goods(mint, manifest, last, last.entity);
    // Remaining layers from the second-to-last hop back to the first stop
    // after the origin.
    for hop in hops[1..hops.len() - 1].iter().rev() {
        let size = pkg.size_class;
        pkg = wrap_package(mint, pkg, *hop, hop.entity, size);
    }
    pkg
}

/// A package a mix node is holding, already rewrapped and ready to forward.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldPackage {
    pub package: Package,
    pub next_dest: Address,
    pub arrived_at: SimTime,
    /// Surface the package wore when it arrived (for ground-truth records).
    pub arrival_surface: crate::ids::SurfaceId,
    pub departs_at: Option<SimTime>,
    /// Ground truth: which shipment this parcel belongs to.
    pub order: Option<OrderId>,
}

/// Ground truth about one relay step, produced as a package is rewrapped.
/// Feeds the engine's epoch records and the sniffing analysis; never part of
/// any legitimate knowledge view except the relaying node's own.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayInfo {
    pub in_surface: crate::ids::SurfaceId,
    pub in_size: SizeClass,
    pub out_surface: crate::ids::SurfaceId,
    pub out_size: SizeClass,
    pub next_dest: Address,
    /// Departure time assigned under the timed policy.
    pub departs_at: Option<SimTime>,
    /// What one illegal opening of the held layer would reveal.
    pub sniff: SniffResult,
}

/// A package released by a mix node.
#[derive(Debug, Clone, PartialEq)]
pub struct Flush {
    pub package: Package,
    pub dest: Address,
    pub departs_at: SimTime,
    pub arrival_surface: crate::ids::SurfaceId,
    pub arrived_at: SimTime,
    pub order: Option<OrderId>,
}

/// One intermediary's holding state.
#[derive(Debug, Clone)]
pub struct MixNodeState {
    pub node: EntityId,
    pub policy: MixPolicy,
    pub common_class: SizeClass,
    pub held: VecDeque<HeldPackage>,
}

impl MixNodeState {
    pub fn new(node: EntityId, policy: MixPolicy, common_class: SizeClass) -> Self {
        Self {
            node,
            policy,
            common_class,
            held: VecDeque::new(),
        }
    }

    /// Receives a package addressed to this node: opens the layers sealed for
    /// the node, rewraps the revealed layer to its next destination at the
    /// node's common size class (minting a fresh surface), and enqueues it.
    ///
    /// Threshold policy flushes everything held once the threshold is
    /// reached, in shuffled order. Pool policy lets each package beyond the
    /// pool minimum escape independently. Timed policy assigns a departure
    /// time served later by [`MixNodeState::on_timer`].
    pub fn on_arrival(
        &mut self,
        pkg: Package,
        order: Option<OrderId>,
        now: SimTime,
        mint: &mut SurfaceMint,
        rng: &mut SimRng,
    ) -> Result<(RelayInfo, Vec<Flush>), ProtocolError> {
        let arrival_surface = pkg.surface_id;
        let arrival_size = pkg.size_class;
        if pkg.opener != self.node {
            // Surfaces the AccessDenied from unwrap: a misrouted package.
            let err = crate::model::unwrap_package(pkg, self.node)
                .expect_err("opener mismatch must deny");
            return Err(ProtocolError::Misrouted {
                node: self.node,
                source: err,
            });
        }
        let (_, outcome) = open_owned_layers(pkg, self.node);
        let inner = match outcome {
            Ok((_, Unwrapped::Package(inner))) => inner,
            Ok((_, Unwrapped::Goods(_))) => {
                return Err(ProtocolError::UnexpectedGoods { node: self.node })
            }
            Err(_) => unreachable!("outermost opener was checked"),
        };
        let next_dest = inner.visible_dest;
        let sniff = inner.sniff_interior();
        let rewrapped = wrap_package(mint, inner, next_dest, next_dest.entity, self.common_class);

        let departs_at = match self.policy {
            MixPolicy::TimedDelay { dist } => Some(now + dist.sample(rng)),
            _ => None,
        };
        let relay = RelayInfo {
            in_surface: arrival_surface,
            in_size: arrival_size,
            out_surface: rewrapped.surface_id,
            out_size: rewrapped.size_class,
            next_dest,
            departs_at,
            sniff,
        };
        self.held.push_back(HeldPackage {
            package: rewrapped,
            next_dest,
            arrived_at: now,
            arrival_surface,
            departs_at,
            order,
        });

        let flushes = match self.policy {
            MixPolicy::Threshold { x } => {
                if self.held.len() >= x as usize {
                    let mut batch: Vec<HeldPackage> = self.held.drain(..).collect();
                    batch.shuffle(rng);
                    batch.into_iter().map(|h| release(h, now)).collect()
                } else {
                    Vec::new()
                }
            }
            MixPolicy::Pool {
                pool_min,
                flush_prob,
            } => {
                let excess = self.held.len().saturating_sub(pool_min as usize);
                if excess == 0 {
                    Vec::new()
                } else {
                    let mut pool: Vec<HeldPackage> = self.held.drain(..).collect();
                    pool.shuffle(rng);
                    let mut flushed = Vec::new();
                    let mut kept = Vec::new();
                    for (i, held) in pool.into_iter().enumerate() {
                        if i < excess && rng.gen::<f64>() < flush_prob {
                            flushed.push(release(held, now));
                        } else {
                            kept.push(held);
                        }
                    }
                    self.held = kept.into();
                    flushed
                }
            }
            MixPolicy::TimedDelay { .. } => Vec::new(),
        };
        Ok((relay, flushes))
    }

    /// Releases every held package whose departure time has come. Only
    /// meaningful under the timed policy; other policies hold nothing due.
    pub fn on_timer(&mut self, now: SimTime) -> Vec<Flush> {
        let mut due: Vec<HeldPackage> = Vec::new();
        let mut kept = VecDeque::new();
        for held in self.held.drain(..) {
            match held.departs_at {
                Some(t) if t <= now => due.push(held),
                _ => kept.push_back(held),
            }
        }
        self.held = kept;
        due.sort_by(|a, b| {
            a.departs_at
                .unwrap_or(0.0)
                .total_cmp(&b.departs_at.unwrap_or(0.0))
        });
        due.into_iter()
            .map(|h| {
                let t = h.departs_at.unwrap_or(now);
                release(h, t)
            })
            .collect()
    }

    /// Earliest pending departure, if any (timed policy).
    pub fn next_departure(&self) -> Option<SimTime> {
        self.held
            .iter()
            .filter_map(|h| h.departs_at)
            .min_by(|a, b| a.total_cmp(b))
    }
}

fn release(held: HeldPackage, departs_at: SimTime) -> Flush {
    Flush {
        package: held.package,
        dest: held.next_dest,
        departs_at,
        arrival_surface: held.arrival_surface,
        arrived_at: held.arrived_at,
        order: held.order,
    }
}

/// Splits a delivered order at the customer: items kept for the household and
/// the donation bound for the PMAN. The split exists only here; neither the
/// vendor nor the DPN is ever handed it.
pub fn pman_split(order: &Order, customer_home: Address) -> (Manifest, ItemBag) {
    (
        Manifest::new(order.self_items.clone(), customer_home),
        order.noise_items.clone(),
    )
}

/// The PMAN's holdings: donated inventory and the queue of secondary-recipient
/// requests. Deliberately carries no donor identities and no donor purchase
/// information — there is no field that could hold them.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PmanState {
    pub node: EntityId,
    pub inventory: ItemBag,
    pub pending_requests: VecDeque<SecondaryRequest>,
}

impl PmanState {
    pub fn new(node: EntityId) -> Self {
        Self {
            node,
            inventory: ItemBag::new(),
            pending_requests: VecDeque::new(),
        }
    }

    /// Absorbs donated goods. Nothing about the donor is recorded.
    pub fn receive(&mut self, goods: &ItemBag) {
        self.inventory.extend_from(goods);
    }

    pub fn enqueue_request(&mut self, request: SecondaryRequest) {
        self.pending_requests.push_back(request);
    }

    /// Serves pending requests in FIFO order. A request is served only when
    /// every item it asks for is in inventory — partial service never occurs;
    /// unservable requests stay queued while later servable ones proceed.
    pub fn redistribute(&mut self) -> Vec<(Manifest, Address)> {
        let mut deliveries = Vec::new();
        let mut kept = VecDeque::new();
        for request in self.pending_requests.drain(..) {
            if self.inventory.remove_all(&request.items) {
                let home = Address::new(request.recipient, AddressKind::SecondaryRecipientHome);
                deliveries.push((Manifest::new(request.items.clone(), home), home));
            } else {
                kept.push_back(request);
            }
        }
        self.pending_requests = kept;
        deliveries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{CustomerId, ItemId, OrderId, SurfaceId};
    use crate::rng::stream;
    use std::collections::HashMap;

    fn vendor_addr() -> Address {
        Address::new(EntityId(0), AddressKind::VendorSite)
    }

    fn dpn_addr(n: u64) -> Address {
        Address::new(EntityId(10 + n), AddressKind::DpnSite)
    }

    fn pman_addr() -> Address {
        Address::new(EntityId(20), AddressKind::PmanSite)
    }

    fn home_addr(n: u64) -> Address {
        Address::new(EntityId(100 + n), AddressKind::CustomerHome)
    }

    fn directory(dpns: u64) -> SiteDirectory {
        SiteDirectory {
            vendors: vec![vendor_addr()],
            dpn_sites: (0..dpns).map(dpn_addr).collect(),
            pman_sites: vec![pman_addr()],
        }
    }

    fn order(noise: bool) -> Order {
        let mut noise_items = ItemBag::new();
        if noise {
            noise_items.add(ItemId(9), 1);
        }
        Order {
            id: OrderId(1),
            customer: CustomerId(0),
            vendor: EntityId(0),
            self_items: ItemBag::singleton(ItemId(1)),
            noise_items,
            placed_at: 0.0,
        }
    }

    #[test]
    fn conventional_route_is_two_hops() {
        let routes = plan_route(
            &order(false),
            home_addr(0),
            Topology::Conventional,
            DonationMode::ViaDpn,
            &directory(0),
            &mut stream(1, "routes"),
        )
        .unwrap();
        assert_eq!(routes.main.hops.len(), 2);
        assert!(routes.donation.is_none());
    }

    #[test]
    fn dpdn_one_matches_dpn_shape() {
        let mut rng = stream(2, "routes");
        let dpn = plan_route(
            &order(false),
            home_addr(0),
            Topology::Dpn,
            DonationMode::ViaDpn,
            &directory(1),
            &mut rng,
        )
        .unwrap();
        let dpdn = plan_route(
            &order(false),
            home_addr(0),
            Topology::Dpdn { hops: 1 },
            DonationMode::ViaDpn,
            &directory(1),
            &mut rng,
        )
        .unwrap();
        assert_eq!(dpn.main.hops, dpdn.main.hops);
    }

    #[test]
    fn dpdn_needs_enough_sites() {
        let err = plan_route(
            &order(false),
            home_addr(0),
            Topology::Dpdn { hops: 3 },
            DonationMode::ViaDpn,
            &directory(2),
            &mut stream(3, "routes"),
        )
        .unwrap_err();
        assert!(matches!(err, ProtocolError::DirectoryTooSmall(_)));
    }

    #[test]
    fn dpdn_hop_orderings_uniform_over_seeds() {
        // 3 sites, 3 hops: all 6 orderings, chi-squared at 5% over 6000 draws
        // (df = 5, critical value 11.0705).
        let dir = directory(3);
        let mut counts: HashMap<Vec<EntityId>, u32> = HashMap::new();
        for seed in 0..6000u64 {
            let routes = plan_route(
                &order(false),
                home_addr(0),
                Topology::Dpdn { hops: 3 },
                DonationMode::ViaDpn,
                &dir,
                &mut stream(seed, "routes"),
            )
            .unwrap();
            let perm: Vec<EntityId> = routes
                .main
                .intermediaries()
                .iter()
                .map(|a| a.entity)
                .collect();
            *counts.entry(perm).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 6, "all 6 orderings must occur");
        let expected = 1000.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 11.0705, "chi-squared {chi2} exceeds 5% critical value");
    }

    #[test]
    fn donation_route_present_only_with_noise() {
        let mut rng = stream(4, "routes");
        let with = plan_route(
            &order(true),
            home_addr(0),
            Topology::DpnPman,
            DonationMode::ViaDpn,
            &directory(1),
            &mut rng,
        )
        .unwrap();
        let donation = with.donation.expect("noise order needs a donation route");
        assert_eq!(donation.hops.len(), 3);
        assert_eq!(donation.origin().kind, AddressKind::CustomerHome);
        assert_eq!(donation.terminal().kind, AddressKind::PmanSite);

        let without = plan_route(
            &order(false),
            home_addr(0),
            Topology::DpnPman,
            DonationMode::ViaDpn,
            &directory(1),
            &mut rng,
        )
        .unwrap();
        assert!(without.donation.is_none());

        let direct = plan_route(
            &order(true),
            home_addr(0),
            Topology::DpnPman,
            DonationMode::Direct,
            &directory(1),
            &mut rng,
        )
        .unwrap();
        assert_eq!(direct.donation.unwrap().hops.len(), 2);
    }

    fn sample_manifest(dest: Address) -> Manifest {
        Manifest::new(ItemBag::singleton(ItemId(7)), dest)
    }

    #[test]
    fn onion_single_layer_for_direct_route() {
        let mut mint = SurfaceMint::new();
        let route =
            RouteSpec::new(RouteClass::MainDelivery, vec![vendor_addr(), home_addr(0)]).unwrap();
        let pkg = build_onion(&mut mint, &route, sample_manifest(home_addr(0)));
        assert_eq!(pkg.depth(), 1);
        assert_eq!(pkg.opener, home_addr(0).entity);
        assert_eq!(pkg.visible_dest, home_addr(0));
    }

    #[test]
    fn onion_unwrap_chain_reveals_one_hop_at_a_time() {
        let mut mint = SurfaceMint::new();
        let route = RouteSpec::new(
            RouteClass::MainDelivery,
            vec![vendor_addr(), dpn_addr(0), dpn_addr(1), home_addr(0)],
        )
        .unwrap();
        let pkg = build_onion(&mut mint, &route, sample_manifest(home_addr(0)));
        assert_eq!(pkg.visible_dest, dpn_addr(0));

        let (next, unwrapped) =
            crate::model::unwrap_package(pkg, dpn_addr(0).entity).unwrap();
        assert_eq!(next, dpn_addr(1));
        let inner = match unwrapped {
            Unwrapped::Package(p) => p,
            _ => panic!("expected a layer"),
        };
        let (next2, unwrapped2) =
            crate::model::unwrap_package(inner, dpn_addr(1).entity).unwrap();
        assert_eq!(next2, home_addr(0));
        assert!(matches!(unwrapped2, Unwrapped::Package(_)));
    }

    #[test]
    fn onion_layer_count_is_hops_plus_one() {
        for k in 1..=5u64 {
            let mut mint = SurfaceMint::new();
            let mut hops = vec![vendor_addr()];
            hops.extend((0..k).map(dpn_addr));
            hops.push(home_addr(0));
            let route = RouteSpec::new(RouteClass::MainDelivery, hops).unwrap();
            let pkg = build_onion(&mut mint, &route, sample_manifest(home_addr(0)));
            assert_eq!(pkg.depth() as u64, k + 1);
            let surfaces = pkg.layer_surfaces();
            let unique: std::collections::HashSet<_> = surfaces.iter().collect();
            assert_eq!(unique.len() as u64, k + 1);
        }
    }

    /// A one-layer parcel addressed to the mix node, wrapping a layer bound
    /// onward for `next`.
    fn parcel_for_mix(
        mint: &mut SurfaceMint,
        mix: Address,
        next: Address,
    ) -> Package {
        let goods = Package::over_goods(mint, sample_manifest(next), next, next.entity);
        wrap_package(mint, goods, mix, mix.entity, SizeClass::S0)
    }

    #[test]
    fn threshold_one_flushes_every_arrival_alone() {
        let mix = dpn_addr(0);
        let mut state = MixNodeState::new(mix.entity, MixPolicy::Threshold { x: 1 }, SizeClass::S1);
        let mut mint = SurfaceMint::new();
        let mut rng = stream(5, "mixing");
        for t in 0..4 {
            let pkg = parcel_for_mix(&mut mint, mix, home_addr(t));
            let (_, flushes) = state
                .on_arrival(pkg, None, t as f64, &mut mint, &mut rng)
                .unwrap();
            assert_eq!(flushes.len(), 1);
            assert_eq!(flushes[0].departs_at, t as f64);
            assert!(state.held.is_empty());
        }
    }

    #[test]
    fn threshold_three_holds_until_third_arrival() {
        let mix = dpn_addr(0);
        let mut state = MixNodeState::new(mix.entity, MixPolicy::Threshold { x: 3 }, SizeClass::S1);
        let mut mint = SurfaceMint::new();
        let mut rng = stream(6, "mixing");
        for (i, t) in [1.0, 2.0].iter().enumerate() {
            let pkg = parcel_for_mix(&mut mint, mix, home_addr(i as u64));
            assert!(state.on_arrival(pkg, None, *t, &mut mint, &mut rng).unwrap().1.is_empty());
        }
        let pkg = parcel_for_mix(&mut mint, mix, home_addr(2));
        let (_, flushes) = state.on_arrival(pkg, None, 5.0, &mut mint, &mut rng).unwrap();
        assert_eq!(flushes.len(), 3);
        assert!(flushes.iter().all(|f| f.departs_at == 5.0));
        assert!(state.held.is_empty());
    }

    #[test]
    fn threshold_flush_order_uniform_over_seeds() {
        // Batch of 3 flushes in one of 6 orders; chi-squared over 6000 seeds.
        let mix = dpn_addr(0);
        let mut counts: HashMap<Vec<EntityId>, u32> = HashMap::new();
        for seed in 0..6000u64 {
            let mut state =
                MixNodeState::new(mix.entity, MixPolicy::Threshold { x: 3 }, SizeClass::S1);
            let mut mint = SurfaceMint::new();
            let mut rng = stream(seed, "mixing");
            let mut flushes = Vec::new();
            for i in 0..3u64 {
                let pkg = parcel_for_mix(&mut mint, mix, home_addr(i));
                flushes = state.on_arrival(pkg, None, i as f64, &mut mint, &mut rng).unwrap().1;
            }
            let perm: Vec<EntityId> = flushes.iter().map(|f| f.dest.entity).collect();
            *counts.entry(perm).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 6);
        let chi2: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - 1000.0;
                d * d / 1000.0
            })
            .sum();
        assert!(chi2 < 11.0705, "chi-squared {chi2} exceeds 5% critical value");
    }

    #[test]
    fn mix_rejects_misrouted_package() {
        let mix = dpn_addr(0);
        let other = dpn_addr(1);
        let mut state = MixNodeState::new(mix.entity, MixPolicy::Threshold { x: 1 }, SizeClass::S1);
        let mut mint = SurfaceMint::new();
        // Parcel sealed for a different node.
        let pkg = parcel_for_mix(&mut mint, other, home_addr(0));
        let err = state
            .on_arrival(pkg, None, 0.0, &mut mint, &mut stream(7, "mixing"))
            .unwrap_err();
        assert!(matches!(err, ProtocolError::Misrouted { .. }));
    }

    #[test]
    fn rewrap_always_refreshes_surface_and_normalizes_size() {
        let mix = dpn_addr(0);
        let mut state = MixNodeState::new(mix.entity, MixPolicy::Threshold { x: 1 }, SizeClass::S2);
        let mut mint = SurfaceMint::new();
        let pkg = parcel_for_mix(&mut mint, mix, home_addr(0));
        let arrival_surface = pkg.surface_id;
        let (relay, flushes) = state
            .on_arrival(pkg, None, 0.0, &mut mint, &mut stream(8, "mixing"))
            .unwrap();
        assert_eq!(relay.in_surface, arrival_surface);
        assert_eq!(relay.out_surface, flushes[0].package.surface_id);
        assert_ne!(flushes[0].package.surface_id, arrival_surface);
        assert_eq!(flushes[0].package.size_class, SizeClass::S2);
        assert_eq!(flushes[0].dest, home_addr(0));
    }

    #[test]
    fn timer_with_nothing_due_is_empty() {
        let mix = dpn_addr(0);
        let mut state = MixNodeState::new(
            mix.entity,
            MixPolicy::TimedDelay {
                dist: DelayDist::Constant { value: 10.0 },
            },
            SizeClass::S1,
        );
        let mut mint = SurfaceMint::new();
        let pkg = parcel_for_mix(&mut mint, mix, home_addr(0));
        assert!(state
            .on_arrival(pkg, None, 0.0, &mut mint, &mut stream(9, "mixing"))
            .unwrap()
            .1
            .is_empty());
        assert!(state.on_timer(5.0).is_empty());
        assert_eq!(state.on_timer(10.0).len(), 1);
    }

    #[test]
    fn constant_zero_delay_forwards_immediately() {
        let mix = dpn_addr(0);
        let mut state = MixNodeState::new(
            mix.entity,
            MixPolicy::TimedDelay {
                dist: DelayDist::Constant { value: 0.0 },
            },
            SizeClass::S1,
        );
        let mut mint = SurfaceMint::new();
        let pkg = parcel_for_mix(&mut mint, mix, home_addr(0));
        let _ = state
            .on_arrival(pkg, None, 3.0, &mut mint, &mut stream(10, "mixing"))
            .unwrap();
        let flushes = state.on_timer(3.0);
        assert_eq!(flushes.len(), 1);
        assert_eq!(flushes[0].departs_at, 3.0);
    }

    #[test]
    fn exponential_delay_mean_dwell_matches() {
        // 10,000 packages through an exponential(mean 4) mix: sample mean
        // within 3 sigma = 3 * 4 / sqrt(n) of 4.
        let mix = dpn_addr(0);
        let mean = 4.0;
        let mut state = MixNodeState::new(
            mix.entity,
            MixPolicy::TimedDelay {
                dist: DelayDist::Exponential { mean },
            },
            SizeClass::S1,
        );
        let mut mint = SurfaceMint::new();
        let mut rng = stream(11, "mixing");
        let n = 10_000;
        for _ in 0..n {
            let pkg = parcel_for_mix(&mut mint, mix, home_addr(0));
            state.on_arrival(pkg, None, 0.0, &mut mint, &mut rng).unwrap();
        }
        let flushes = state.on_timer(f64::INFINITY);
        assert_eq!(flushes.len(), n);
        let total_dwell: f64 = flushes.iter().map(|f| f.departs_at - f.arrived_at).sum();
        let sample_mean = total_dwell / n as f64;
        let tol = 3.0 * mean / (n as f64).sqrt();
        assert!(
            (sample_mean - mean).abs() <= tol,
            "dwell mean {sample_mean} outside {mean} +- {tol}"
        );
        // Timer releases in departure order.
        for pair in flushes.windows(2) {
            assert!(pair[0].departs_at <= pair[1].departs_at);
        }
    }

    #[test]
    fn pool_holds_minimum_and_flushes_excess() {
        let mix = dpn_addr(0);
        let mut state = MixNodeState::new(
            mix.entity,
            MixPolicy::Pool {
                pool_min: 2,
                flush_prob: 1.0,
            },
            SizeClass::S1,
        );
        let mut mint = SurfaceMint::new();
        let mut rng = stream(12, "mixing");
        let mut total_flushed = 0;
        for i in 0..6u64 {
            let pkg = parcel_for_mix(&mut mint, mix, home_addr(i));
            total_flushed += state
                .on_arrival(pkg, None, i as f64, &mut mint, &mut rng)
                .unwrap()
                .1
                .len();
        }
        // With flush_prob 1 every excess package leaves; exactly pool_min stay.
        assert_eq!(state.held.len(), 2);
        assert_eq!(total_flushed, 4);
    }

    #[test]
    fn split_separates_self_and_donation() {
        let o = order(true);
        let (manifest, donation) = pman_split(&o, home_addr(0));
        assert_eq!(manifest.items, o.self_items);
        assert_eq!(manifest.final_recipient, home_addr(0));
        assert_eq!(donation, o.noise_items);

        // Conservation: self + noise = the full order, always.
        let mut together = manifest.items.clone();
        together.extend_from(&donation);
        assert_eq!(together, o.all_items());

        let quiet = order(false);
        let (_, empty) = pman_split(&quiet, home_addr(0));
        assert!(empty.is_empty());
    }

    #[test]
    fn pman_receive_accumulates_multisets() {
        let mut state = PmanState::new(EntityId(20));
        state.receive(&ItemBag::singleton(ItemId(3)));
        state.receive(&ItemBag::singleton(ItemId(3)));
        assert_eq!(state.inventory.count(ItemId(3)), 2);
    }

    #[test]
    fn pman_state_records_no_donor_identity() {
        // Structural check: the serialized state exposes inventory and
        // requests only — no customer/donor keys exist to leak.
        let mut state = PmanState::new(EntityId(20));
        state.receive(&ItemBag::singleton(ItemId(3)));
        let json = serde_json::to_value(&state).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        assert_eq!(keys, vec!["inventory", "node", "pending_requests"]);
    }

    fn request(recipient: u64, items: &[u64], t: SimTime) -> SecondaryRequest {
        SecondaryRequest {
            recipient: EntityId(recipient),
            items: items.iter().map(|&i| ItemId(i)).collect(),
            requested_at: t,
        }
    }

    #[test]
    fn redistribute_serves_fifo_until_inventory_runs_out() {
        let mut state = PmanState::new(EntityId(20));
        state.receive(&{
            let mut bag = ItemBag::new();
            bag.add(ItemId(1), 2);
            bag
        });
        state.enqueue_request(request(30, &[1], 0.0));
        state.enqueue_request(request(31, &[1], 1.0));
        state.enqueue_request(request(32, &[1], 2.0));
        let deliveries = state.redistribute();
        assert_eq!(deliveries.len(), 2);
        assert_eq!(deliveries[0].1.entity, EntityId(30));
        assert_eq!(deliveries[1].1.entity, EntityId(31));
        assert!(state.inventory.is_empty());
        assert_eq!(state.pending_requests.len(), 1);
    }

    #[test]
    fn redistribute_with_empty_inventory_delivers_nothing() {
        let mut state = PmanState::new(EntityId(20));
        state.enqueue_request(request(30, &[1], 0.0));
        assert!(state.redistribute().is_empty());
        assert_eq!(state.pending_requests.len(), 1);
    }

    #[test]
    fn redistribute_is_all_or_nothing() {
        let mut state = PmanState::new(EntityId(20));
        state.receive(&ItemBag::singleton(ItemId(1)));
        state.enqueue_request(request(30, &[1, 2], 0.0));
        assert!(state.redistribute().is_empty());
        assert_eq!(state.inventory.count(ItemId(1)), 1);
    }
}
