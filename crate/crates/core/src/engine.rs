//! Deterministic discrete-event core: clock, event queue, latency and cost
//! accrual, and end-to-end orchestration of one scenario.
//!
//! A run is one logical sequential event loop; everything observable about it
//! lands in [`RunResult`], which is a pure function of the [`Scenario`]
//! (including its seed). Distinct runs share nothing mutable and may execute
//! on different threads.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::ObservationEvent;
use crate::ids::{CustomerId, EntityId, OrderId, SurfaceId, SurfaceMint};
use crate::model::{
    open_owned_layers, Address, AddressKind, ItemBag, Manifest, Order, Package, RouteClass,
    RouteSpec, SimTime, SizeClass, SniffResult, Unwrapped,
};
use crate::protocols::{
    build_onion, plan_route, DelayDist, DonationMode, MixNodeState, MixPolicy, PmanState,
    ProtocolError, SiteDirectory, Topology,
};
use crate::rng::{labels, stream, SimRng};
use crate::workload::{
    gen_catalog, gen_customers, gen_orders, gen_secondary_requests, SecondaryRequest,
};

#[derive(Debug, Error)]
pub enum EngineError {
    /// A scenario field is invalid; `path` names it in the scenario document.
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },
    /// An event was scheduled before the current clock.
    #[error("time travel: event at t={event} scheduled while clock is t={clock}")]
    TimeTravel { event: SimTime, clock: SimTime },
    /// A simulator invariant broke mid-run; always a bug, never a scenario
    /// problem.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl EngineError {
    fn config(path: &str, message: impl Into<String>) -> Self {
        EngineError::Config {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

impl From<ProtocolError> for EngineError {
    fn from(err: ProtocolError) -> Self {
        match err {
            ProtocolError::DirectoryTooSmall(msg) => EngineError::config("counts", msg),
            other => EngineError::Internal(other.to_string()),
        }
    }
}

pub type EngineResult<T> = Result<T, EngineError>;

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub customers: u32,
    pub vendors: u32,
    pub dpn_sites: u32,
    pub pman_sites: u32,
    pub secondary_recipients: u32,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            customers: 10,
            vendors: 1,
            dpn_sites: 1,
            pman_sites: 1,
            secondary_recipients: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub n: usize,
    pub zipf_s: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self { n: 20, zipf_s: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub sparsity_k: usize,
    pub order_rate: f64,
    pub noise_budget: u32,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            sparsity_k: 5,
            order_rate: 0.2,
            noise_budget: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub policy: MixPolicy,
    /// Outbound packages at every mix node are normalized up to this class.
    pub common_class: SizeClass,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            policy: MixPolicy::Threshold { x: 1 },
            common_class: SizeClass::S1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub per_hop: f64,
    pub per_rewrap: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            per_hop: 1.0,
            per_rewrap: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    Exact,
    Candidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReidentConfig {
    /// Points sampled per trial.
    pub p: usize,
    pub trials: u32,
    /// Width of the time bins traces are quantized into.
    pub bin: f64,
}

impl Default for ReidentConfig {
    fn default() -> Self {
        Self {
            p: 2,
            trials: 200,
            bin: 1.0,
        }
    }
}

/// One set of entities assumed to pool their knowledge, named by role tokens:
/// `vendor`, `dpn`, `dpn<i>`, `pman`, `pman<i>`, `sniffing_dpn`,
/// `sniffing_dpn<i>`, `adversary`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollusionSpec {
    pub members: Vec<String>,
}

impl CollusionSpec {
    pub fn name(&self) -> String {
        self.members.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttacksConfig {
    pub correlation_mode: CorrelationMode,
    pub collusion_sets: Vec<CollusionSpec>,
    pub reident: ReidentConfig,
}

impl Default for AttacksConfig {
    fn default() -> Self {
        Self {
            correlation_mode: CorrelationMode::Exact,
            collusion_sets: Vec::new(),
            reident: ReidentConfig::default(),
        }
    }
}

/// Everything that defines one run. `RunResult` is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub topology: Topology,
    pub counts: Counts,
    pub catalog: CatalogConfig,
    pub profile: ProfileConfig,
    /// Requests per secondary recipient per unit time (DPN+PMAN only).
    pub secondary_rate: f64,
    pub mix: MixConfig,
    pub latency: DelayDist,
    pub cost: CostModel,
    pub donation_route: DonationMode,
    pub horizon: SimTime,
    pub seed: u64,
    pub attacks: AttacksConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            topology: Topology::Conventional,
            counts: Counts::default(),
            catalog: CatalogConfig::default(),
            profile: ProfileConfig::default(),
            secondary_rate: 0.2,
            mix: MixConfig::default(),
            latency: DelayDist::Constant { value: 1.0 },
            cost: CostModel::default(),
            donation_route: DonationMode::default(),
            horizon: 100.0,
            seed: 0,
            attacks: AttacksConfig::default(),
        }
    }
}

impl Scenario {
    /// Checks every invariant, reporting the offending field by its scenario
    /// document path.
    pub fn validate(&self) -> EngineResult<()> {
        if !(self.horizon > 0.0) {
            return Err(EngineError::config("horizon", "must be > 0"));
        }
        if self.counts.customers == 0 {
            return Err(EngineError::config("counts.customers", "must be >= 1"));
        }
        if self.counts.vendors == 0 {
            return Err(EngineError::config("counts.vendors", "must be >= 1"));
        }
        match self.topology {
            Topology::Conventional => {}
            Topology::Dpn | Topology::DpnPman => {
                if self.counts.dpn_sites == 0 {
                    return Err(EngineError::config(
                        "counts.dpn_sites",
                        "topology needs at least one dpn site",
                    ));
                }
            }
            Topology::Dpdn { hops } => {
                if hops == 0 {
                    return Err(EngineError::config("topology.k", "must be >= 1"));
                }
                if self.counts.dpn_sites < hops {
                    return Err(EngineError::config(
                        "counts.dpn_sites",
                        format!("dpdn with k={hops} needs at least {hops} dpn sites"),
                    ));
                }
            }
        }
        if matches!(self.topology, Topology::DpnPman) && self.counts.pman_sites == 0 {
            return Err(EngineError::config(
                "counts.pman_sites",
                "dpn_pman topology needs at least one pman site",
            ));
        }
        if self.catalog.n == 0 {
            return Err(EngineError::config("catalog.n", "must be >= 1"));
        }
        if !(self.catalog.zipf_s.is_finite() && self.catalog.zipf_s >= 0.0) {
            return Err(EngineError::config("catalog.zipf_s", "must be finite and >= 0"));
        }
        if self.profile.sparsity_k == 0 || self.profile.sparsity_k > self.catalog.n {
            return Err(EngineError::config(
                "profile.sparsity_k",
                format!("must be in 1..={}", self.catalog.n),
            ));
        }
        if !(self.profile.order_rate > 0.0) {
            return Err(EngineError::config("profile.order_rate", "must be > 0"));
        }
        if self.secondary_rate < 0.0 {
            return Err(EngineError::config("secondary.request_rate", "must be >= 0"));
        }
        self.mix
            .policy
            .validate()
            .map_err(|m| EngineError::config("mix", m))?;
        self.latency
            .validate()
            .map_err(|m| EngineError::config("latency", m))?;
        if self.cost.per_hop < 0.0 {
            return Err(EngineError::config("cost.per_hop", "must be >= 0"));
        }
        if self.cost.per_rewrap < 0.0 {
            return Err(EngineError::config("cost.per_rewrap", "must be >= 0"));
        }
        if self.attacks.reident.p == 0 {
            return Err(EngineError::config("attacks.reident.p", "must be >= 1"));
        }
        if !(self.attacks.reident.bin > 0.0) {
            return Err(EngineError::config("attacks.reident.bin", "must be > 0"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Entities and directory
// ---------------------------------------------------------------------------

/// All entities in a run, with stable ids, labels, and role lookup. Entity
/// ids are allocated in role blocks: vendors, then DPN sites, PMAN sites,
/// customers, secondary recipients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Directory {
    pub vendors: Vec<Address>,
    pub dpn_sites: Vec<Address>,
    pub pman_sites: Vec<Address>,
    pub customer_homes: Vec<Address>,
    pub secondary_homes: Vec<Address>,
    pub labels: BTreeMap<EntityId, String>,
}

impl Directory {
    pub fn build(counts: &Counts) -> Self {
        let mut labels = BTreeMap::new();
        let mut next = 0u64;
        let mut alloc = |n: u32, kind: AddressKind, prefix: &str| -> Vec<Address> {
            (0..n)
                .map(|i| {
                    let entity = EntityId(next);
                    next += 1;
                    labels.insert(entity, format!("{prefix}{i}"));
                    Address::new(entity, kind)
                })
                .collect()
        };
        let vendors = alloc(counts.vendors, AddressKind::VendorSite, "vendor");
        let dpn_sites = alloc(counts.dpn_sites, AddressKind::DpnSite, "dpn");
        let pman_sites = alloc(counts.pman_sites, AddressKind::PmanSite, "pman");
        let customer_homes = alloc(counts.customers, AddressKind::CustomerHome, "customer");
        let secondary_homes = alloc(
            counts.secondary_recipients,
            AddressKind::SecondaryRecipientHome,
            "secondary",
        );
        Self {
            vendors,
            dpn_sites,
            pman_sites,
            customer_homes,
            secondary_homes,
            labels,
        }
    }

    pub fn label(&self, entity: EntityId) -> &str {
        self.labels.get(&entity).map(|s| s.as_str()).unwrap_or("?")
    }

    pub fn home_of(&self, customer: CustomerId) -> Address {
        self.customer_homes[customer.0 as usize]
    }

    pub fn sites(&self) -> SiteDirectory {
        SiteDirectory {
            vendors: self.vendors.clone(),
            dpn_sites: self.dpn_sites.clone(),
            pman_sites: self.pman_sites.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

/// Which record a shipment's hops and rewraps accrue to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordRef {
    Order(OrderId),
    Donation(usize),
    Redistribution(usize),
}

/// A package in motion, with engine-side bookkeeping the adversary never
/// sees: which record it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Shipment {
    pub package: Package,
    pub record: RecordRef,
}

impl Shipment {
    fn order_id(&self) -> Option<OrderId> {
        match self.record {
            RecordRef::Order(id) => Some(id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    OrderPlaced(Box<Order>),
    PackageDeparted {
        shipment: Shipment,
        from: Address,
        to: Address,
    },
    PackageArrived {
        shipment: Shipment,
        from: Address,
        at: Address,
    },
    MixTimer {
        node: EntityId,
    },
    PmanCycle {
        pman: EntityId,
        request: SecondaryRequest,
    },
    RunEnd,
}

/// One scheduled event. `seq` is a per-run monotone counter that breaks ties
/// between events at the same simulated time: equal-time events dequeue in
/// insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want earliest (time, seq).
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

/// The run's event queue: a clock plus a priority queue ordered by
/// `(time, seq)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    clock: SimTime,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    /// Schedules `kind` at `time`. Fails with [`EngineError::TimeTravel`] if
    /// `time` is before the current clock.
    pub fn schedule(&mut self, time: SimTime, kind: EventKind) -> EngineResult<()> {
        if time < self.clock {
            return Err(EngineError::TimeTravel {
                event: time,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
        Ok(())
    }

    /// Pops the earliest event and advances the clock to it.
    pub fn pop(&mut self) -> Option<Event> {
        let event = self.heap.pop()?;
        debug_assert!(event.time >= self.clock, "clock monotonicity");
        self.clock = event.time;
        Some(event)
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    fn drain_remaining(self) -> Vec<Event> {
        self.heap.into_sorted_vec()
    }
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

/// Hop/rewrap/cost accrual shared by every shipment record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTally {
    pub hops: u32,
    pub rewraps: u32,
    pub cost: f64,
}

impl CostTally {
    /// Accrues one traversed edge.
    pub fn accrue_hop(&mut self, model: &CostModel) {
        self.hops += 1;
        self.cost += model.per_hop;
    }

    /// Accrues one de-identifying rewrap.
    pub fn accrue_rewrap(&mut self, model: &CostModel) {
        self.rewraps += 1;
        self.cost += model.per_rewrap;
    }
}

/// Ground truth about one order: the order, where it goes, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRecord {
    pub order: Order,
    pub home: Address,
    pub main_route: RouteSpec,
    pub donation_route: Option<RouteSpec>,
    /// Surface of the package as it left the vendor.
    pub sent_surface: SurfaceId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub order: OrderId,
    pub customer: CustomerId,
    pub placed_at: SimTime,
    pub delivered_at: Option<SimTime>,
    pub tally: CostTally,
}

impl DeliveryRecord {
    pub fn latency(&self) -> Option<SimTime> {
        self.delivered_at.map(|d| d - self.placed_at)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonationRecord {
    pub order: OrderId,
    pub items: ItemBag,
    pub shipped_at: SimTime,
    pub arrived_at: Option<SimTime>,
    pub tally: CostTally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedistributionRecord {
    pub pman: EntityId,
    pub recipient: EntityId,
    pub items: ItemBag,
    pub shipped_at: SimTime,
    pub arrived_at: Option<SimTime>,
    pub tally: CostTally,
}

/// Ground truth about one relay step at a mix node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayRecord {
    pub node: EntityId,
    pub time: SimTime,
    pub in_surface: SurfaceId,
    pub in_size: SizeClass,
    pub out_surface: SurfaceId,
    pub out_size: SizeClass,
    pub order: Option<OrderId>,
    pub sniff: SniffResult,
}

/// One package inside a flush epoch, with the true inbound/outbound pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub in_surface: SurfaceId,
    pub in_size: SizeClass,
    pub in_time: SimTime,
    pub out_surface: SurfaceId,
    pub out_size: SizeClass,
    pub dest: Address,
}

/// Ground truth for one flush event at a mix node: the unit the adversary's
/// correlation attack works over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEpochRecord {
    pub node: EntityId,
    pub flush_time: SimTime,
    pub entries: Vec<EpochEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmanReceipt {
    pub pman: EntityId,
    pub time: SimTime,
    pub items: ItemBag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub pman: EntityId,
    pub request: SecondaryRequest,
}

/// Where every shipped item instance ended up.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledgers {
    /// Items that left a vendor.
    pub shipped: ItemBag,
    pub home_items: BTreeMap<CustomerId, ItemBag>,
    pub secondary_items: BTreeMap<EntityId, ItemBag>,
    pub pman_inventory: ItemBag,
    /// Items inside packages still moving or held when the run was cut off.
    pub in_flight: ItemBag,
}

impl Ledgers {
    /// Items at customer homes, across all customers.
    pub fn total_home(&self) -> ItemBag {
        let mut bag = ItemBag::new();
        for items in self.home_items.values() {
            bag.extend_from(items);
        }
        bag
    }

    /// Items at secondary recipient homes, across all recipients.
    pub fn total_secondary(&self) -> ItemBag {
        let mut bag = ItemBag::new();
        for items in self.secondary_items.values() {
            bag.extend_from(items);
        }
        bag
    }
}

/// Everything observable about one completed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub topology: Topology,
    pub seed: u64,
    pub horizon: SimTime,
    pub mix: MixConfig,
    pub directory: Directory,
    pub orders: Vec<OrderRecord>,
    /// Index-aligned with `orders`.
    pub deliveries: Vec<DeliveryRecord>,
    pub donations: Vec<DonationRecord>,
    pub redistributions: Vec<RedistributionRecord>,
    /// Every physical movement, in time order: the adversary's entire input.
    pub observations: Vec<ObservationEvent>,
    pub epochs: Vec<MixEpochRecord>,
    pub relays: Vec<RelayRecord>,
    pub pman_receipts: Vec<PmanReceipt>,
    pub requests: Vec<RequestRecord>,
    pub ledgers: Ledgers,
    /// Ground truth: which order each minted surface belongs to (order and
    /// donation packages, every layer). Evaluation only.
    pub surface_order: BTreeMap<SurfaceId, OrderId>,
    /// True when the horizon cut packages off mid-flight; latency statistics
    /// must exclude (and separately count) the unfinished orders.
    pub truncated: bool,
}

impl RunResult {
    pub fn order_record(&self, id: OrderId) -> &OrderRecord {
        &self.orders[id.0 as usize]
    }
}

// ---------------------------------------------------------------------------
// The run loop
// ---------------------------------------------------------------------------

struct Engine<'a> {
    scenario: &'a Scenario,
    directory: Directory,
    queue: EventQueue,
    mint: SurfaceMint,
    routes_rng: SimRng,
    mixing_rng: SimRng,
    latency_rng: SimRng,
    mixes: BTreeMap<EntityId, MixNodeState>,
    pmans: BTreeMap<EntityId, PmanState>,
    orders: Vec<OrderRecord>,
    deliveries: Vec<DeliveryRecord>,
    donations: Vec<DonationRecord>,
    redistributions: Vec<RedistributionRecord>,
    observations: Vec<ObservationEvent>,
    epochs: Vec<MixEpochRecord>,
    relays: Vec<RelayRecord>,
    pman_receipts: Vec<PmanReceipt>,
    requests: Vec<RequestRecord>,
    ledgers: Ledgers,
    surface_order: BTreeMap<SurfaceId, OrderId>,
    /// Relay metadata by arrival surface, for epoch reconstruction.
    relay_by_in_surface: BTreeMap<SurfaceId, (SimTime, SizeClass)>,
}

/// Runs one scenario end to end. Fully deterministic in the scenario,
/// including its seed.
pub fn run_scenario(scenario: &Scenario) -> EngineResult<RunResult> {
    scenario.validate()?;
    let directory = Directory::build(&scenario.counts);

    // Workload generation, each concern on its own named stream.
    let catalog = gen_catalog(scenario.catalog.n, scenario.catalog.zipf_s)
        .map_err(|e| EngineError::config("catalog", e.to_string()))?;
    let profiles = gen_customers(
        &directory.customer_homes,
        &catalog,
        scenario.profile.sparsity_k,
        scenario.profile.order_rate,
        scenario.profile.noise_budget,
        &mut stream(scenario.seed, labels::CUSTOMERS),
    )
    .map_err(|e| EngineError::config("profile", e.to_string()))?;
    let vendor_entities: Vec<EntityId> = directory.vendors.iter().map(|a| a.entity).collect();
    let orders = gen_orders(
        &profiles,
        &catalog,
        scenario.horizon,
        scenario.topology,
        &vendor_entities,
        &mut stream(scenario.seed, labels::ORDERS),
    );
    let secondary_requests = if matches!(scenario.topology, Topology::DpnPman) {
        gen_secondary_requests(
            &directory
                .secondary_homes
                .iter()
                .map(|a| a.entity)
                .collect::<Vec<_>>(),
            &catalog,
            scenario.secondary_rate,
            scenario.horizon,
            &mut stream(scenario.seed, labels::REQUESTS),
        )
    } else {
        Vec::new()
    };

    let mut engine = Engine {
        scenario,
        mixes: directory
            .dpn_sites
            .iter()
            .map(|a| {
                (
                    a.entity,
                    MixNodeState::new(a.entity, scenario.mix.policy, scenario.mix.common_class),
                )
            })
            .collect(),
        pmans: directory
            .pman_sites
            .iter()
            .map(|a| (a.entity, PmanState::new(a.entity)))
            .collect(),
        directory,
        queue: EventQueue::new(),
        mint: SurfaceMint::new(),
        routes_rng: stream(scenario.seed, labels::ROUTES),
        mixing_rng: stream(scenario.seed, labels::MIXING),
        latency_rng: stream(scenario.seed, labels::LATENCY),
        orders: Vec::new(),
        deliveries: Vec::new(),
        donations: Vec::new(),
        redistributions: Vec::new(),
        observations: Vec::new(),
        epochs: Vec::new(),
        relays: Vec::new(),
        pman_receipts: Vec::new(),
        requests: Vec::new(),
        ledgers: Ledgers::default(),
        surface_order: BTreeMap::new(),
        relay_by_in_surface: BTreeMap::new(),
    };
    engine.seed_events(orders, secondary_requests)?;
    engine.run()
}

impl<'a> Engine<'a> {
    fn seed_events(
        &mut self,
        orders: Vec<Order>,
        requests: Vec<SecondaryRequest>,
    ) -> EngineResult<()> {
        // RunEnd first: at the horizon it outranks same-time events, so the
        // horizon is exclusive and deterministic.
        self.queue.schedule(self.scenario.horizon, EventKind::RunEnd)?;
        for order in orders {
            self.queue
                .schedule(order.placed_at, EventKind::OrderPlaced(Box::new(order)))?;
        }
        let pman_count = self.directory.pman_sites.len();
        for request in requests {
            // Each secondary recipient is served by a fixed PMAN site.
            let pman = self.directory.pman_sites
                [(request.recipient.0 as usize) % pman_count]
                .entity;
            self.queue
                .schedule(request.requested_at, EventKind::PmanCycle { pman, request })?;
        }
        Ok(())
    }

    fn run(mut self) -> EngineResult<RunResult> {
        let mut clock: SimTime = 0.0;
        while let Some(event) = self.queue.pop() {
            if event.time < clock {
                return Err(EngineError::Internal(format!(
                    "clock went backwards: {} after {}",
                    event.time, clock
                )));
            }
            clock = event.time;
            match event.kind {
                EventKind::RunEnd => break,
                EventKind::OrderPlaced(order) => self.on_order_placed(*order, clock)?,
                EventKind::PackageDeparted { shipment, from, to } => {
                    self.on_departed(shipment, from, to, clock)?
                }
                EventKind::PackageArrived { shipment, from, at } => {
                    self.on_arrived(shipment, from, at, clock)?
                }
                EventKind::MixTimer { node } => self.on_mix_timer(node, clock)?,
                EventKind::PmanCycle { pman, request } => {
                    self.on_pman_cycle(pman, request, clock)?
                }
            }
        }
        self.finalize()
    }

    fn on_order_placed(&mut self, order: Order, now: SimTime) -> EngineResult<()> {
        let home = self.directory.home_of(order.customer);
        let planned = plan_route(
            &order,
            home,
            self.scenario.topology,
            self.scenario.donation_route,
            &self.directory.sites(),
            &mut self.routes_rng,
        )?;
        let manifest = Manifest::new(order.all_items(), home);
        let package = build_onion(&mut self.mint, &planned.main, manifest);
        let id = order.id;
        debug_assert_eq!(id.0 as usize, self.orders.len(), "order ids are dense");
        for surface in package.layer_surfaces() {
            self.surface_order.insert(surface, id);
        }

        self.ledgers.shipped.extend_from(&order.all_items());
        self.deliveries.push(DeliveryRecord {
            order: id,
            customer: order.customer,
            placed_at: now,
            delivered_at: None,
            tally: CostTally::default(),
        });
        self.orders.push(OrderRecord {
            order,
            home,
            sent_surface: package.surface_id,
            donation_route: planned.donation,
            main_route: planned.main.clone(),
        });

        let from = planned.main.origin();
        let to = package.visible_dest;
        self.queue.schedule(
            now,
            EventKind::PackageDeparted {
                shipment: Shipment {
                    package,
                    record: RecordRef::Order(id),
                },
                from,
                to,
            },
        )
    }

    fn tally_mut(&mut self, record: RecordRef) -> &mut CostTally {
        match record {
            RecordRef::Order(id) => &mut self.deliveries[id.0 as usize].tally,
            RecordRef::Donation(i) => &mut self.donations[i].tally,
            RecordRef::Redistribution(i) => &mut self.redistributions[i].tally,
        }
    }

    fn on_departed(
        &mut self,
        shipment: Shipment,
        from: Address,
        to: Address,
        now: SimTime,
    ) -> EngineResult<()> {
        self.observations.push(ObservationEvent {
            time: now,
            src: from,
            dst: to,
            surface: shipment.package.surface_id,
            size: shipment.package.size_class,
        });
        let cost = self.scenario.cost;
        self.tally_mut(shipment.record).accrue_hop(&cost);
        let delay = self.scenario.latency.sample(&mut self.latency_rng);
        self.queue.schedule(
            now + delay,
            EventKind::PackageArrived {
                shipment,
                from,
                at: to,
            },
        )
    }

    fn on_arrived(
        &mut self,
        shipment: Shipment,
        from: Address,
        at: Address,
        now: SimTime,
    ) -> EngineResult<()> {
        // The arrival sighting: watchers at a location see deliveries in as
        // well as out, so every movement is observed at both endpoints.
        self.observations.push(ObservationEvent {
            time: now,
            src: from,
            dst: at,
            surface: shipment.package.surface_id,
            size: shipment.package.size_class,
        });
        match at.kind {
            AddressKind::DpnSite => self.arrive_at_mix(shipment, at, now),
            AddressKind::CustomerHome => self.arrive_at_home(shipment, at, now),
            AddressKind::PmanSite => self.arrive_at_pman(shipment, at, now),
            AddressKind::SecondaryRecipientHome => self.arrive_at_secondary(shipment, at, now),
            AddressKind::VendorSite => Err(EngineError::Internal(
                "package arrived back at a vendor".into(),
            )),
        }
    }

    fn arrive_at_mix(&mut self, shipment: Shipment, at: Address, now: SimTime) -> EngineResult<()> {
        let order = shipment.order_id().or(match shipment.record {
            RecordRef::Donation(i) => Some(self.donations[i].order),
            _ => None,
        });
        let record = shipment.record;
        let mix = self
            .mixes
            .get_mut(&at.entity)
            .ok_or_else(|| EngineError::Internal(format!("no mix state for {at:?}")))?;
        let (relay, flushes) =
            mix.on_arrival(shipment.package, order, now, &mut self.mint, &mut self.mixing_rng)?;

        let cost = self.scenario.cost;
        self.tally_mut(record).accrue_rewrap(&cost);
        self.relay_by_in_surface
            .insert(relay.in_surface, (now, relay.in_size));
        if let Some(order_id) = order {
            self.surface_order.insert(relay.out_surface, order_id);
        }
        self.relays.push(RelayRecord {
            node: at.entity,
            time: now,
            in_surface: relay.in_surface,
            in_size: relay.in_size,
            out_surface: relay.out_surface,
            out_size: relay.out_size,
            order,
            sniff: relay.sniff,
        });
        if let Some(departs_at) = relay.departs_at {
            self.queue
                .schedule(departs_at, EventKind::MixTimer { node: at.entity })?;
        }
        // Held shipments dropped their record tag inside the mix; recover it
        // from the relay log when they flush.
        self.dispatch_flushes(at, flushes, now)
    }

    fn dispatch_flushes(
        &mut self,
        node: Address,
        flushes: Vec<crate::protocols::Flush>,
        now: SimTime,
    ) -> EngineResult<()> {
        if flushes.is_empty() {
            return Ok(());
        }
        // Group flushes released together into epochs by departure time.
        let mut by_time: BTreeMap<u64, MixEpochRecord> = BTreeMap::new();
        for flush in &flushes {
            let key = flush.departs_at.to_bits();
            let (in_time, in_size) = self
                .relay_by_in_surface
                .get(&flush.arrival_surface)
                .copied()
                .unwrap_or((flush.arrived_at, flush.package.size_class));
            by_time
                .entry(key)
                .or_insert_with(|| MixEpochRecord {
                    node: node.entity,
                    flush_time: flush.departs_at,
                    entries: Vec::new(),
                })
                .entries
                .push(EpochEntry {
                    in_surface: flush.arrival_surface,
                    in_size,
                    in_time,
                    out_surface: flush.package.surface_id,
                    out_size: flush.package.size_class,
                    dest: flush.dest,
                });
        }
        self.epochs.extend(by_time.into_values());

        for flush in flushes {
            let record = self.record_for_flushed(&flush)?;
            let depart = flush.departs_at.max(now);
            self.queue.schedule(
                depart,
                EventKind::PackageDeparted {
                    shipment: Shipment {
                        package: flush.package,
                        record,
                    },
                    from: node,
                    to: flush.dest,
                },
            )?;
        }
        Ok(())
    }

    /// Recovers which record a flushed package belongs to from its shipment
    /// tag: mix state tracks the order id, and destination kind disambiguates
    /// main deliveries from donations and redistributions.
    fn record_for_flushed(&self, flush: &crate::protocols::Flush) -> EngineResult<RecordRef> {
        match flush.dest.kind {
            AddressKind::CustomerHome => flush
                .order
                .map(RecordRef::Order)
                .ok_or_else(|| EngineError::Internal("main flush lost its order tag".into())),
            AddressKind::PmanSite => {
                let order = flush
                    .order
                    .ok_or_else(|| EngineError::Internal("donation flush lost its tag".into()))?;
                let idx = self
                    .donations
                    .iter()
                    .position(|d| d.order == order && d.arrived_at.is_none())
                    .ok_or_else(|| {
                        EngineError::Internal("donation flush without a record".into())
                    })?;
                Ok(RecordRef::Donation(idx))
            }
            AddressKind::DpnSite => flush
                .order
                .map(RecordRef::Order)
                .ok_or_else(|| EngineError::Internal("relay flush lost its order tag".into())),
            other => Err(EngineError::Internal(format!(
                "mix flushed a package toward {other}"
            ))),
        }
    }

    fn arrive_at_home(&mut self, shipment: Shipment, at: Address, now: SimTime) -> EngineResult<()> {
        let order_id = shipment.order_id().ok_or_else(|| {
            EngineError::Internal("non-order shipment arrived at a customer home".into())
        })?;
        let (_, outcome) = open_owned_layers(shipment.package, at.entity);
        let manifest = match outcome {
            Ok((_, Unwrapped::Goods(m))) => m,
            _ => {
                return Err(EngineError::Internal(
                    "customer could not fully open a delivery".into(),
                ))
            }
        };
        let record = &self.orders[order_id.0 as usize];
        let order = record.order.clone();
        let home = record.home;
        if manifest.items != order.all_items() {
            return Err(EngineError::Internal(format!(
                "order {order_id} delivered wrong goods"
            )));
        }
        self.deliveries[order_id.0 as usize].delivered_at = Some(now);

        // The split exists only here, at the customer.
        let (self_manifest, donation_items) = crate::protocols::pman_split(&order, home);
        self.ledgers
            .home_items
            .entry(order.customer)
            .or_default()
            .extend_from(&self_manifest.items);

        if donation_items.is_empty() {
            return Ok(());
        }
        let route = self.orders[order_id.0 as usize]
            .donation_route
            .clone()
            .ok_or_else(|| {
                EngineError::Internal("noise items without a donation route".into())
            })?;
        let pman = route.terminal();
        let manifest = Manifest::new(donation_items.clone(), pman);
        let package = build_onion(&mut self.mint, &route, manifest);
        for surface in package.layer_surfaces() {
            self.surface_order.insert(surface, order_id);
        }
        let donation_idx = self.donations.len();
        self.donations.push(DonationRecord {
            order: order_id,
            items: donation_items,
            shipped_at: now,
            arrived_at: None,
            tally: CostTally::default(),
        });
        let to = package.visible_dest;
        self.queue.schedule(
            now,
            EventKind::PackageDeparted {
                shipment: Shipment {
                    package,
                    record: RecordRef::Donation(donation_idx),
                },
                from: at,
                to,
            },
        )
    }

    fn arrive_at_pman(&mut self, shipment: Shipment, at: Address, now: SimTime) -> EngineResult<()> {
        let record = shipment.record;
        let (_, outcome) = open_owned_layers(shipment.package, at.entity);
        let manifest = match outcome {
            Ok((_, Unwrapped::Goods(m))) => m,
            _ => {
                return Err(EngineError::Internal(
                    "pman could not fully open a donation".into(),
                ))
            }
        };
        if let RecordRef::Donation(idx) = record {
            self.donations[idx].arrived_at = Some(now);
        } else {
            return Err(EngineError::Internal(
                "non-donation shipment arrived at a pman".into(),
            ));
        }
        let pman = self
            .pmans
            .get_mut(&at.entity)
            .ok_or_else(|| EngineError::Internal(format!("no pman state for {at:?}")))?;
        // Receives goods only: no donor identity crosses this boundary.
        pman.receive(&manifest.items);
        self.pman_receipts.push(PmanReceipt {
            pman: at.entity,
            time: now,
            items: manifest.items,
        });
        self.redistribute(at, now)
    }

    fn on_pman_cycle(
        &mut self,
        pman: EntityId,
        request: SecondaryRequest,
        now: SimTime,
    ) -> EngineResult<()> {
        let at = Address::new(pman, AddressKind::PmanSite);
        self.requests.push(RequestRecord {
            pman,
            request: request.clone(),
        });
        let state = self
            .pmans
            .get_mut(&pman)
            .ok_or_else(|| EngineError::Internal(format!("no pman state for {pman:?}")))?;
        state.enqueue_request(request);
        self.redistribute(at, now)
    }

    fn redistribute(&mut self, at: Address, now: SimTime) -> EngineResult<()> {
        let state = self
            .pmans
            .get_mut(&at.entity)
            .ok_or_else(|| EngineError::Internal(format!("no pman state for {at:?}")))?;
        let deliveries = state.redistribute();
        for (manifest, home) in deliveries {
            let route = RouteSpec::new(RouteClass::Redistribution, vec![at, home])
                .map_err(|e| EngineError::Internal(e.to_string()))?;
            let package = build_onion(&mut self.mint, &route, manifest.clone());
            let idx = self.redistributions.len();
            self.redistributions.push(RedistributionRecord {
                pman: at.entity,
                recipient: home.entity,
                items: manifest.items,
                shipped_at: now,
                arrived_at: None,
                tally: CostTally::default(),
            });
            self.queue.schedule(
                now,
                EventKind::PackageDeparted {
                    shipment: Shipment {
                        package,
                        record: RecordRef::Redistribution(idx),
                    },
                    from: at,
                    to: home,
                },
            )?;
        }
        Ok(())
    }

    fn arrive_at_secondary(
        &mut self,
        shipment: Shipment,
        at: Address,
        now: SimTime,
    ) -> EngineResult<()> {
        let record = shipment.record;
        let (_, outcome) = open_owned_layers(shipment.package, at.entity);
        let manifest = match outcome {
            Ok((_, Unwrapped::Goods(m))) => m,
            _ => {
                return Err(EngineError::Internal(
                    "secondary recipient could not open a delivery".into(),
                ))
            }
        };
        if let RecordRef::Redistribution(idx) = record {
            self.redistributions[idx].arrived_at = Some(now);
        } else {
            return Err(EngineError::Internal(
                "non-redistribution shipment arrived at a secondary home".into(),
            ));
        }
        self.ledgers
            .secondary_items
            .entry(at.entity)
            .or_default()
            .extend_from(&manifest.items);
        Ok(())
    }

    fn on_mix_timer(&mut self, node: EntityId, now: SimTime) -> EngineResult<()> {
        let mix = self
            .mixes
            .get_mut(&node)
            .ok_or_else(|| EngineError::Internal(format!("timer for unknown mix {node:?}")))?;
        let flushes = mix.on_timer(now);
        let at = Address::new(node, AddressKind::DpnSite);
        self.dispatch_flushes(at, flushes, now)
    }

    fn finalize(mut self) -> EngineResult<RunResult> {
        // Anything still inside a mix node or the event queue is in flight.
        let mut in_flight = ItemBag::new();
        let mut any_held = false;
        for mix in self.mixes.values() {
            for held in &mix.held {
                any_held = true;
                in_flight.extend_from(&held.package.ground_truth_manifest().items);
            }
        }
        for event in self.queue.drain_remaining() {
            match event.kind {
                EventKind::PackageDeparted { shipment, .. }
                | EventKind::PackageArrived { shipment, .. } => {
                    in_flight.extend_from(&shipment.package.ground_truth_manifest().items);
                }
                _ => {}
            }
        }
        let truncated = any_held || !in_flight.is_empty();
        self.ledgers.in_flight = in_flight;
        for pman in self.pmans.values() {
            self.ledgers.pman_inventory.extend_from(&pman.inventory);
        }

        Ok(RunResult {
            topology: self.scenario.topology,
            seed: self.scenario.seed,
            horizon: self.scenario.horizon,
            mix: self.scenario.mix,
            directory: self.directory,
            orders: self.orders,
            deliveries: self.deliveries,
            donations: self.donations,
            redistributions: self.redistributions,
            observations: self.observations,
            epochs: self.epochs,
            relays: self.relays,
            pman_receipts: self.pman_receipts,
            requests: self.requests,
            ledgers: self.ledgers,
            surface_order: self.surface_order,
            truncated,
        })
    }
}
