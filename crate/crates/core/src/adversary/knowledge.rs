//! Per-entity knowledge views and the collusion closure.
//!
//! A view is the set of ground facts one entity legitimately learns from the
//! events it participates in: vendors know purchases and where they shipped,
//! intermediaries know their own traffic and rewrap pairings, the PMAN knows
//! donated goods (donor-less) and requests, and the global adversary knows
//! every movement and nothing else. Collusion merges views and joins facts on
//! shared identifiers — order ids, surface ids, customer pseudonyms — which
//! is a syntactic, conservative lower bound on what colluders could infer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::engine::RunResult;
use crate::ids::{CustomerId, EntityId, OrderId, SurfaceId};
use crate::model::{Address, AddressKind, ItemBag, SimTime, SniffResult};
use crate::protocols::Topology;

use super::{AttackError, ObservationEvent};

/// A ground fact one entity holds. The vocabulary encodes exactly the
/// knowledge splits of the architectures: who knows purchases, who knows
/// addresses, who knows package pairings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fact {
    /// The vendor-side record of a purchase, under the customer's pseudonym.
    Purchased {
        customer: CustomerId,
        items: ItemBag,
        order: OrderId,
        placed_at: SimTime,
    },
    /// Where an order was handed to the delivery network (first hop only).
    ShippedTo { order: OrderId, dest: Address },
    /// The surface the order's package wore when it left the vendor.
    SentPackage { order: OrderId, surface: SurfaceId },
    /// A registration record: this entity can map the customer to a home.
    HoldsAddressOf {
        customer: CustomerId,
        address: Address,
    },
    /// Donated goods received, with no donor attached.
    ReceivedGoods { items: ItemBag, time: SimTime },
    /// What a secondary recipient asked for.
    RequestedGoods {
        recipient: EntityId,
        items: ItemBag,
    },
    /// One observed physical movement.
    ObservedMove { movement: ObservationEvent },
    /// An intermediary's own pairing of an inbound surface to the outbound
    /// surface it forwarded it as.
    Relayed {
        node: EntityId,
        in_surface: SurfaceId,
        out_surface: SurfaceId,
    },
    /// Sniffing result: the goods found one layer below a held package.
    SniffedGoods {
        surface: SurfaceId,
        items: ItemBag,
        final_recipient: Address,
    },
    /// Sniffing result: another sealed layer found below a held package,
    /// revealing only the next-next destination.
    SniffedLayer {
        outer_surface: SurfaceId,
        inner_surface: SurfaceId,
        inner_dest: Address,
    },
}

/// Whose view this is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Viewer {
    Entity(EntityId),
    Adversary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeView {
    pub owner: Viewer,
    pub label: String,
    pub facts: Vec<Fact>,
}

fn role_of(run: &RunResult, entity: EntityId) -> Option<AddressKind> {
    let d = &run.directory;
    for (list, kind) in [
        (&d.vendors, AddressKind::VendorSite),
        (&d.dpn_sites, AddressKind::DpnSite),
        (&d.pman_sites, AddressKind::PmanSite),
        (&d.customer_homes, AddressKind::CustomerHome),
        (&d.secondary_homes, AddressKind::SecondaryRecipientHome),
    ] {
        if list.iter().any(|a| a.entity == entity) {
            return Some(kind);
        }
    }
    None
}

/// Derives the legitimate knowledge view of one participant (or the global
/// adversary) from the run trace.
pub fn view_of(viewer: Viewer, run: &RunResult) -> Result<KnowledgeView, AttackError> {
    let mut facts = Vec::new();
    let label = match viewer {
        Viewer::Adversary => {
            for movement in &run.observations {
                facts.push(Fact::ObservedMove {
                    movement: *movement,
                });
            }
            "ADVERSARY".to_string()
        }
        Viewer::Entity(entity) => {
            let role = role_of(run, entity).ok_or(AttackError::UnknownEntity(entity))?;
            match role {
                AddressKind::VendorSite => {
                    for record in &run.orders {
                        if record.order.vendor != entity {
                            continue;
                        }
                        facts.push(Fact::Purchased {
                            customer: record.order.customer,
                            items: record.order.all_items(),
                            order: record.order.id,
                            placed_at: record.order.placed_at,
                        });
                        facts.push(Fact::ShippedTo {
                            order: record.order.id,
                            dest: record.main_route.hops[1],
                        });
                        facts.push(Fact::SentPackage {
                            order: record.order.id,
                            surface: record.sent_surface,
                        });
                    }
                }
                AddressKind::DpnSite => {
                    // Registration knowledge exists only where customers name
                    // a DPN as their delivery location; DPDN intermediaries
                    // learn neighbors from packages alone.
                    if matches!(run.topology, Topology::Dpn | Topology::DpnPman) {
                        let mut seen = BTreeSet::new();
                        for record in &run.orders {
                            let registered = record
                                .main_route
                                .intermediaries()
                                .iter()
                                .any(|a| a.entity == entity);
                            if registered && seen.insert(record.order.customer) {
                                facts.push(Fact::HoldsAddressOf {
                                    customer: record.order.customer,
                                    address: record.home,
                                });
                            }
                        }
                    }
                    for relay in run.relays.iter().filter(|r| r.node == entity) {
                        facts.push(Fact::Relayed {
                            node: entity,
                            in_surface: relay.in_surface,
                            out_surface: relay.out_surface,
                        });
                    }
                    for movement in run
                        .observations
                        .iter()
                        .filter(|o| o.src.entity == entity || o.dst.entity == entity)
                    {
                        facts.push(Fact::ObservedMove {
                            movement: *movement,
                        });
                    }
                }
                AddressKind::PmanSite => {
                    for receipt in run.pman_receipts.iter().filter(|r| r.pman == entity) {
                        facts.push(Fact::ReceivedGoods {
                            items: receipt.items.clone(),
                            time: receipt.time,
                        });
                    }
                    for record in run.requests.iter().filter(|r| r.pman == entity) {
                        facts.push(Fact::RequestedGoods {
                            recipient: record.request.recipient,
                            items: record.request.items.clone(),
                        });
                    }
                }
                AddressKind::CustomerHome => {
                    let customer = run
                        .directory
                        .customer_homes
                        .iter()
                        .position(|a| a.entity == entity)
                        .map(|i| CustomerId(i as u64))
                        .ok_or(AttackError::UnknownEntity(entity))?;
                    facts.push(Fact::HoldsAddressOf {
                        customer,
                        address: run.directory.customer_homes[customer.0 as usize],
                    });
                    for record in run.orders.iter().filter(|r| r.order.customer == customer) {
                        facts.push(Fact::Purchased {
                            customer,
                            items: record.order.all_items(),
                            order: record.order.id,
                            placed_at: record.order.placed_at,
                        });
                    }
                }
                AddressKind::SecondaryRecipientHome => {
                    for record in run
                        .requests
                        .iter()
                        .filter(|r| r.request.recipient == entity)
                    {
                        facts.push(Fact::RequestedGoods {
                            recipient: entity,
                            items: record.request.items.clone(),
                        });
                    }
                }
            }
            run.directory.label(entity).to_string()
        }
    };
    Ok(KnowledgeView {
        owner: viewer,
        label,
        facts,
    })
}

/// Views of every participant plus the adversary, in a stable order.
pub fn all_views(run: &RunResult) -> Vec<KnowledgeView> {
    let mut views = Vec::new();
    for entity in run.directory.labels.keys() {
        views.push(view_of(Viewer::Entity(*entity), run).expect("directory entities are known"));
    }
    views.push(view_of(Viewer::Adversary, run).expect("adversary view always exists"));
    views
}

/// A DPN's view augmented with what it finds by opening the packages in its
/// custody one layer deeper than it is entitled to.
pub fn sniffing_dpn(run: &RunResult, node: EntityId) -> Result<KnowledgeView, AttackError> {
    if role_of(run, node) != Some(AddressKind::DpnSite) {
        return Err(AttackError::UnknownEntity(node));
    }
    let mut view = view_of(Viewer::Entity(node), run)?;
    view.label = format!("sniffing_{}", view.label);
    for relay in run.relays.iter().filter(|r| r.node == node) {
        match &relay.sniff {
            SniffResult::Goods(manifest) => view.facts.push(Fact::SniffedGoods {
                surface: relay.in_surface,
                items: manifest.items.clone(),
                final_recipient: manifest.final_recipient,
            }),
            SniffResult::Layer {
                inner_surface,
                inner_dest,
            } => view.facts.push(Fact::SniffedLayer {
                outer_surface: relay.in_surface,
                inner_surface: *inner_surface,
                inner_dest: *inner_dest,
            }),
        }
    }
    Ok(view)
}

/// Ground truth needed to score a collusion closure: who lives where, and
/// which order (hence customer) each minted surface belongs to. Evaluation
/// only — the closure itself never touches it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LinkGroundTruth {
    pub home_of: BTreeMap<CustomerId, Address>,
    pub customer_of_order: BTreeMap<OrderId, CustomerId>,
    pub order_of_surface: BTreeMap<SurfaceId, OrderId>,
}

impl LinkGroundTruth {
    pub fn from_run(run: &RunResult) -> Self {
        let mut truth = Self::default();
        for record in &run.orders {
            truth.home_of.insert(record.order.customer, record.home);
            truth
                .customer_of_order
                .insert(record.order.id, record.order.customer);
        }
        for (surface, order) in &run.surface_order {
            truth.order_of_surface.insert(*surface, *order);
        }
        truth
    }
}

/// Outcome of merging a set of views.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollusionOutcome {
    pub merged: KnowledgeView,
    /// Per ordering customer: did the closure tie their purchases to their
    /// home address in one composite?
    pub link_exposed: BTreeMap<CustomerId, bool>,
}

impl CollusionOutcome {
    /// Fraction of ordering customers whose link is exposed.
    pub fn exposed_rate(&self) -> f64 {
        if self.link_exposed.is_empty() {
            return 0.0;
        }
        let exposed = self.link_exposed.values().filter(|&&b| b).count();
        exposed as f64 / self.link_exposed.len() as f64
    }
}

/// Identifier atoms facts can share; the closure joins on exactly these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum JoinKey {
    Order(OrderId),
    Surface(SurfaceId),
    Customer(CustomerId),
}

fn join_keys(fact: &Fact) -> Vec<JoinKey> {
    match fact {
        Fact::Purchased {
            customer, order, ..
        } => vec![JoinKey::Customer(*customer), JoinKey::Order(*order)],
        Fact::ShippedTo { order, .. } => vec![JoinKey::Order(*order)],
        Fact::SentPackage { order, surface } => {
            vec![JoinKey::Order(*order), JoinKey::Surface(*surface)]
        }
        Fact::HoldsAddressOf { customer, .. } => vec![JoinKey::Customer(*customer)],
        Fact::ReceivedGoods { .. } | Fact::RequestedGoods { .. } => Vec::new(),
        Fact::ObservedMove { movement } => vec![JoinKey::Surface(movement.surface)],
        Fact::Relayed {
            in_surface,
            out_surface,
            ..
        } => vec![JoinKey::Surface(*in_surface), JoinKey::Surface(*out_surface)],
        Fact::SniffedGoods { surface, .. } => vec![JoinKey::Surface(*surface)],
        Fact::SniffedLayer {
            outer_surface,
            inner_surface,
            ..
        } => vec![
            JoinKey::Surface(*outer_surface),
            JoinKey::Surface(*inner_surface),
        ],
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Merges the given views and computes the join closure: facts sharing an
/// order id, surface id, or customer pseudonym coalesce into composites.
/// `link_exposed(c)` is true iff one composite holds both c's purchase
/// contents and c's true home address.
pub fn collude(views: &[KnowledgeView], truth: &LinkGroundTruth) -> CollusionOutcome {
    // Union of all facts, deduplicated on canonical serialization.
    let mut facts: Vec<Fact> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for view in views {
        for fact in &view.facts {
            let key = serde_json::to_string(fact).expect("facts serialize");
            if seen.insert(key) {
                facts.push(fact.clone());
            }
        }
    }

    let mut uf = UnionFind::new(facts.len());
    let mut by_key: HashMap<JoinKey, usize> = HashMap::new();
    for (idx, fact) in facts.iter().enumerate() {
        for key in join_keys(fact) {
            match by_key.get(&key) {
                Some(&first) => uf.union(idx, first),
                None => {
                    by_key.insert(key, idx);
                }
            }
        }
    }

    // Per composite: which customers' purchase contents appear, and which
    // home addresses appear.
    let mut purchases_in: HashMap<usize, BTreeSet<CustomerId>> = HashMap::new();
    let mut homes_in: HashMap<usize, BTreeSet<Address>> = HashMap::new();
    for (idx, fact) in facts.iter().enumerate() {
        let root = uf.find(idx);
        match fact {
            Fact::Purchased { customer, .. } => {
                purchases_in.entry(root).or_default().insert(*customer);
            }
            Fact::SniffedGoods { surface, .. } => {
                if let Some(order) = truth.order_of_surface.get(surface) {
                    if let Some(customer) = truth.customer_of_order.get(order) {
                        purchases_in.entry(root).or_default().insert(*customer);
                    }
                }
            }
            _ => {}
        }
        let mut push_home = |addr: &Address| {
            if addr.kind == AddressKind::CustomerHome {
                homes_in.entry(root).or_default().insert(*addr);
            }
        };
        match fact {
            Fact::ShippedTo { dest, .. } => push_home(dest),
            Fact::HoldsAddressOf { address, .. } => push_home(address),
            Fact::ObservedMove { movement } => {
                push_home(&movement.src);
                push_home(&movement.dst);
            }
            Fact::SniffedGoods {
                final_recipient, ..
            } => push_home(final_recipient),
            Fact::SniffedLayer { inner_dest, .. } => push_home(inner_dest),
            _ => {}
        }
    }

    let mut link_exposed: BTreeMap<CustomerId, bool> = truth
        .customer_of_order
        .values()
        .map(|c| (*c, false))
        .collect();
    for (root, customers) in &purchases_in {
        if let Some(homes) = homes_in.get(root) {
            for customer in customers {
                if let Some(home) = truth.home_of.get(customer) {
                    if homes.contains(home) {
                        link_exposed.insert(*customer, true);
                    }
                }
            }
        }
    }

    let label = views
        .iter()
        .map(|v| v.label.clone())
        .collect::<Vec<_>>()
        .join("+");
    CollusionOutcome {
        merged: KnowledgeView {
            owner: Viewer::Adversary,
            label,
            facts,
        },
        link_exposed,
    }
}
