//! Road-network graph, single-source shortest paths, and the
//! category-indexed POI matcher that anchors an activity decision to a real
//! location: given a target distance `d` and a location category `e`, the
//! anchor returns the POI of that category whose network distance from the
//! current position best matches `d`.

pub mod grid;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::geo::GeoPoint;
use crate::num::Real;

/// Closed vocabulary of POI categories that activity purposes map onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoiCategory {
    Workplace,
    School,
    Entertainment,
    Hospital,
    Shop,
    Residence,
}

impl PoiCategory {
    pub const ALL: [PoiCategory; 6] = [
        PoiCategory::Workplace,
        PoiCategory::School,
        PoiCategory::Entertainment,
        PoiCategory::Hospital,
        PoiCategory::Shop,
        PoiCategory::Residence,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PoiCategory::Workplace => "workplace",
            PoiCategory::School => "school",
            PoiCategory::Entertainment => "entertainment",
            PoiCategory::Hospital => "hospital",
            PoiCategory::Shop => "shop",
            PoiCategory::Residence => "residence",
        }
    }
}

impl std::str::FromStr for PoiCategory {
    type Err = SpatialError;

    fn from_str(s: &str) -> Result<Self, SpatialError> {
        PoiCategory::ALL
            .iter()
            .find(|c| c.as_str() == s)
            .copied()
            .ok_or_else(|| SpatialError::UnknownCategory(s.to_owned()))
    }
}

impl std::fmt::Display for PoiCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which POIs an anchor query may consider: one category, a choice of two
/// (written `a|b`), or any category at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CategoryQuery {
    Any,
    One(PoiCategory),
    Either(PoiCategory, PoiCategory),
}

impl CategoryQuery {
    pub fn matches(&self, cat: PoiCategory) -> bool {
        match self {
            CategoryQuery::Any => true,
            CategoryQuery::One(c) => *c == cat,
            CategoryQuery::Either(a, b) => *a == cat || *b == cat,
        }
    }
}

impl std::str::FromStr for CategoryQuery {
    type Err = SpatialError;

    fn from_str(s: &str) -> Result<Self, SpatialError> {
        if s == "any" {
            return Ok(CategoryQuery::Any);
        }
        match s.split_once('|') {
            Some((a, b)) => Ok(CategoryQuery::Either(a.trim().parse()?, b.trim().parse()?)),
            None => Ok(CategoryQuery::One(s.parse()?)),
        }
    }
}

impl std::fmt::Display for CategoryQuery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CategoryQuery::Any => f.write_str("any"),
            CategoryQuery::One(c) => f.write_str(c.as_str()),
            CategoryQuery::Either(a, b) => write!(f, "{}|{}", a.as_str(), b.as_str()),
        }
    }
}

impl serde::Serialize for CategoryQuery {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for CategoryQuery {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl CategoryQuery {
    /// The POI categories a trip purpose can plausibly end at. "Returning
    /// Home" maps to `residence` but is additionally special-cased by the
    /// diary generator, which anchors it to the profile's own home.
    pub fn for_purpose(purpose: crate::domain::vocab::TravelPurpose) -> CategoryQuery {
        use crate::domain::vocab::TravelPurpose as P;
        use PoiCategory as C;
        match purpose {
            P::CommutingToWork | P::BusinessTrip => CategoryQuery::One(C::Workplace),
            P::GoingToSchool => CategoryQuery::One(C::School),
            P::EntertainmentDining => CategoryQuery::One(C::Entertainment),
            P::MedicalAppointment => CategoryQuery::One(C::Hospital),
            P::PickupDropoff => CategoryQuery::Either(C::School, C::Residence),
            P::ReturningHome | P::VisitingFriends => CategoryQuery::One(C::Residence),
            P::Shopping => CategoryQuery::One(C::Shop),
            P::Other => CategoryQuery::Any,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SpatialError {
    #[error("edge references missing node: {from} -> {to}")]
    DanglingEdge { from: String, to: String },
    #[error("edge {from} -> {to} has non-positive length {length_m}")]
    NonPositiveLength { from: String, to: String, length_m: f64 },
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("duplicate poi id {0}")]
    DuplicatePoi(String),
    #[error("poi {0} has no network node within the snap radius")]
    PoiUnsnappable(String),
    #[error("coordinate ({lat}, {lon}) has no network node within {radius_m} m")]
    Unsnappable { lat: f64, lon: f64, radius_m: f64 },
    #[error("unknown node id {0}")]
    UnknownNode(String),
    #[error("unknown poi category {0:?}")]
    UnknownCategory(String),
    #[error("no poi of category {0}")]
    NoPoiOfCategory(String),
    #[error("no poi of category {0} reachable from the origin")]
    NoReachablePoi(String),
    #[error("{file}:{line}: {reason}")]
    Malformed { file: String, line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One raw edge before graph assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDef {
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub oneway: bool,
}

/// An undirected-by-default road graph with positive edge lengths. Node ids
/// are opaque strings; internally nodes are dense indices for fast search.
#[derive(Debug)]
pub struct RoadNetwork {
    ids: Vec<String>,
    coords: Vec<GeoPoint>,
    adj: Vec<Vec<(u32, f64)>>,
    by_id: HashMap<String, u32>,
    edge_count: usize,
}

impl RoadNetwork {
    pub fn build(
        nodes: Vec<(String, GeoPoint)>,
        edges: Vec<EdgeDef>,
    ) -> Result<Self, SpatialError> {
        let mut ids = Vec::with_capacity(nodes.len());
        let mut coords = Vec::with_capacity(nodes.len());
        let mut by_id = HashMap::with_capacity(nodes.len());
        for (id, coord) in nodes {
            if by_id.contains_key(&id) {
                return Err(SpatialError::DuplicateNode(id));
            }
            by_id.insert(id.clone(), ids.len() as u32);
            ids.push(id);
            coords.push(coord);
        }
        let mut adj = vec![Vec::new(); ids.len()];
        let edge_count = edges.len();
        for e in edges {
            let (Some(&u), Some(&v)) = (by_id.get(&e.from), by_id.get(&e.to)) else {
                return Err(SpatialError::DanglingEdge { from: e.from, to: e.to });
            };
            if !(e.length_m.is_finite() && e.length_m > 0.0) {
                return Err(SpatialError::NonPositiveLength {
                    from: e.from,
                    to: e.to,
                    length_m: e.length_m,
                });
            }
            adj[u as usize].push((v, e.length_m));
            if !e.oneway {
                adj[v as usize].push((u, e.length_m));
            }
        }
        Ok(Self { ids, coords, adj, by_id, edge_count })
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn node_index(&self, id: &str) -> Option<u32> {
        self.by_id.get(id).copied()
    }

    pub fn node_id(&self, idx: u32) -> &str {
        &self.ids[idx as usize]
    }

    pub fn node_coord(&self, idx: u32) -> GeoPoint {
        self.coords[idx as usize]
    }

    /// Node minimizing great-circle distance to the coordinate, with ties
    /// (within 1e-9 m) broken by smallest node id. `None` on an empty graph.
    pub fn nearest_node(&self, c: &GeoPoint) -> Option<(u32, f64)> {
        const TIE_EPS_M: f64 = 1e-9;
        let mut best: Option<(u32, f64)> = None;
        for (i, coord) in self.coords.iter().enumerate() {
            let d = coord.haversine_m(c);
            match best {
                None => best = Some((i as u32, d)),
                Some((bi, bd)) => {
                    if d + TIE_EPS_M < bd {
                        best = Some((i as u32, d));
                    } else if d <= bd + TIE_EPS_M && self.ids[i] < self.ids[bi as usize] {
                        best = Some((i as u32, d.min(bd)));
                    }
                }
            }
        }
        best
    }

    /// Exact single-source shortest-path distances from `origin`; nodes
    /// absent from the map are unreachable.
    pub fn shortest_dist(&self, origin: &str) -> Result<BTreeMap<String, f64>, SpatialError> {
        let src = self
            .node_index(origin)
            .ok_or_else(|| SpatialError::UnknownNode(origin.to_owned()))?;
        let dist = dijkstra(&self.adj, src);
        Ok(dist
            .into_iter()
            .enumerate()
            .filter_map(|(i, d)| d.map(|d| (self.ids[i].clone(), d)))
            .collect())
    }

    /// Dense distance vector from a node index (None = unreachable).
    pub fn distances_from(&self, origin: u32) -> Vec<Option<f64>> {
        dijkstra(&self.adj, origin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry<T> {
    dist: T,
    node: u32,
}

// Min-heap ordering over finite distances (edge lengths are validated
// positive and finite, so no NaN can appear).
impl<T: PartialOrd> Eq for HeapEntry<T> {}

impl<T: PartialOrd> PartialOrd for HeapEntry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: PartialOrd> Ord for HeapEntry<T> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .dist
            .partial_cmp(&self.dist)
            .expect("distances are finite")
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Dijkstra over an adjacency list with nonnegative weights. Generic over
/// the scalar so the kernel can run in `f32` where memory matters.
pub fn dijkstra<T: Real>(adj: &[Vec<(u32, T)>], source: u32) -> Vec<Option<T>> {
    let mut dist: Vec<Option<T>> = vec![None; adj.len()];
    let mut heap = std::collections::BinaryHeap::new();
    dist[source as usize] = Some(T::zero());
    heap.push(HeapEntry { dist: T::zero(), node: source });
    while let Some(HeapEntry { dist: d, node }) = heap.pop() {
        match dist[node as usize] {
            Some(best) if d > best => continue,
            _ => {}
        }
        for &(next, w) in &adj[node as usize] {
            let nd = d + w;
            let better = match dist[next as usize] {
                None => true,
                Some(cur) => nd < cur,
            };
            if better {
                dist[next as usize] = Some(nd);
                heap.push(HeapEntry { dist: nd, node: next });
            }
        }
    }
    dist
}

/// One point of interest, snapped to its nearest network node.
#[derive(Debug, Clone, PartialEq)]
pub struct Poi {
    pub id: String,
    pub location: GeoPoint,
    pub category: PoiCategory,
    pub node: u32,
}

/// Category-indexed POIs; candidate lists are pre-sorted by POI id so the
/// anchor's smallest-id tie-break is a plain first-wins scan.
#[derive(Debug)]
pub struct PoiIndex {
    pois: Vec<Poi>,
    by_category: BTreeMap<PoiCategory, Vec<u32>>,
    all: Vec<u32>,
}

impl PoiIndex {
    /// Snaps each POI to its nearest node within `snap_radius_m`. In strict
    /// mode the first unsnappable POI is an error; otherwise unsnappable
    /// POIs are skipped and their ids reported.
    pub fn build(
        network: &RoadNetwork,
        rows: Vec<(String, GeoPoint, PoiCategory)>,
        snap_radius_m: f64,
        strict: bool,
    ) -> Result<(Self, Vec<String>), SpatialError> {
        let mut pois = Vec::with_capacity(rows.len());
        let mut rejected = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (id, location, category) in rows {
            if !seen.insert(id.clone()) {
                return Err(SpatialError::DuplicatePoi(id));
            }
            match network.nearest_node(&location) {
                Some((node, d)) if d <= snap_radius_m => {
                    pois.push(Poi { id, location, category, node });
                }
                _ => {
                    if strict {
                        return Err(SpatialError::PoiUnsnappable(id));
                    }
                    rejected.push(id);
                }
            }
        }
        let mut all: Vec<u32> = (0..pois.len() as u32).collect();
        all.sort_by(|&a, &b| pois[a as usize].id.cmp(&pois[b as usize].id));
        let mut by_category: BTreeMap<PoiCategory, Vec<u32>> = BTreeMap::new();
        for &i in &all {
            by_category.entry(pois[i as usize].category).or_default().push(i);
        }
        Ok((Self { pois, by_category, all }, rejected))
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn poi(&self, idx: u32) -> &Poi {
        &self.pois[idx as usize]
    }

    /// Candidate POI indices for a query, ascending by POI id.
    pub fn candidates(&self, query: &CategoryQuery) -> Vec<u32> {
        match query {
            CategoryQuery::Any => self.all.clone(),
            CategoryQuery::One(c) => self.by_category.get(c).cloned().unwrap_or_default(),
            CategoryQuery::Either(a, b) => {
                let left = self.by_category.get(a).cloned().unwrap_or_default();
                let right = self.by_category.get(b).cloned().unwrap_or_default();
                let mut merged = Vec::with_capacity(left.len() + right.len());
                let (mut i, mut j) = (0, 0);
                while i < left.len() && j < right.len() {
                    if self.pois[left[i] as usize].id <= self.pois[right[j] as usize].id {
                        merged.push(left[i]);
                        i += 1;
                    } else {
                        merged.push(right[j]);
                        j += 1;
                    }
                }
                merged.extend_from_slice(&left[i..]);
                merged.extend_from_slice(&right[j..]);
                merged
            }
        }
    }
}

/// The result of anchoring one activity decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorResult {
    pub poi_id: String,
    pub location: GeoPoint,
    pub network_distance_m: f64,
    /// Node the query origin snapped to.
    pub origin_node: String,
    /// Node the winning POI sits on; the follow-up query's origin.
    pub dest_node: u32,
}

/// Immutable network + POI index shared read-only across generation
/// workers, with a per-origin shortest-path cache (one full Dijkstra per
/// distinct origin node, not per query).
pub struct SpatialIndex {
    network: RoadNetwork,
    pois: PoiIndex,
    snap_radius_m: f64,
    cache: RwLock<HashMap<u32, Arc<Vec<Option<f64>>>>>,
}

impl std::fmt::Debug for SpatialIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpatialIndex")
            .field("nodes", &self.network.node_count())
            .field("edges", &self.network.edge_count())
            .field("pois", &self.pois.len())
            .field("snap_radius_m", &self.snap_radius_m)
            .finish()
    }
}

impl SpatialIndex {
    pub fn new(network: RoadNetwork, pois: PoiIndex, snap_radius_m: f64) -> Self {
        Self { network, pois, snap_radius_m, cache: RwLock::new(HashMap::new()) }
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn pois(&self) -> &PoiIndex {
        &self.pois
    }

    /// Nearest node within the snap radius; ties go to the smallest id.
    pub fn snap(&self, coordinate: &GeoPoint) -> Result<u32, SpatialError> {
        match self.network.nearest_node(coordinate) {
            Some((node, d)) if d <= self.snap_radius_m => Ok(node),
            _ => Err(SpatialError::Unsnappable {
                lat: coordinate.lat,
                lon: coordinate.lon,
                radius_m: self.snap_radius_m,
            }),
        }
    }

    /// Shared distance vector from a node, computed once per distinct
    /// origin. Concurrent callers may race to insert the same key; both
    /// compute identical vectors, so either insertion is correct.
    pub fn distances(&self, origin: u32) -> Arc<Vec<Option<f64>>> {
        if let Some(hit) = self.cache.read().expect("cache lock").get(&origin) {
            return Arc::clone(hit);
        }
        let computed = Arc::new(self.network.distances_from(origin));
        let mut w = self.cache.write().expect("cache lock");
        Arc::clone(w.entry(origin).or_insert(computed))
    }

    /// R(d, e): among POIs matching the category query and reachable from
    /// the snapped origin, returns the one minimizing
    /// |network_distance − target_d|, ties broken by smallest POI id.
    pub fn anchor(
        &self,
        origin: &GeoPoint,
        query: &CategoryQuery,
        target_d: f64,
    ) -> Result<AnchorResult, SpatialError> {
        let origin_node = self.snap(origin)?;
        self.anchor_from_node(origin_node, query, target_d)
    }

    /// [`SpatialIndex::anchor`] with a pre-snapped origin node.
    pub fn anchor_from_node(
        &self,
        origin_node: u32,
        query: &CategoryQuery,
        target_d: f64,
    ) -> Result<AnchorResult, SpatialError> {
        let candidates = self.pois.candidates(query);
        if candidates.is_empty() {
            return Err(SpatialError::NoPoiOfCategory(query.to_string()));
        }
        let dist = self.distances(origin_node);
        let mut best: Option<(f64, u32, f64)> = None; // (error, poi idx, network distance)
        for idx in candidates {
            let poi = self.pois.poi(idx);
            let Some(d) = dist[poi.node as usize] else { continue };
            let err = (d - target_d).abs();
            // Candidates arrive in ascending id order, so a strict
            // improvement test implements the smallest-id tie-break.
            if best.map_or(true, |(be, _, _)| err < be) {
                best = Some((err, idx, d));
            }
        }
        let Some((_, idx, network_distance_m)) = best else {
            return Err(SpatialError::NoReachablePoi(query.to_string()));
        };
        let poi = self.pois.poi(idx);
        Ok(AnchorResult {
            poi_id: poi.id.clone(),
            location: poi.location,
            network_distance_m,
            origin_node: self.network.node_id(origin_node).to_owned(),
            dest_node: poi.node,
        })
    }

    /// Network distance to one specific node (the "go to a known place"
    /// case, e.g. returning to the profile's own home): no POI search, the
    /// destination is fixed and only reachability can fail.
    pub fn anchor_node(
        &self,
        origin_node: u32,
        dest_node: u32,
    ) -> Result<AnchorResult, SpatialError> {
        let dist = self.distances(origin_node);
        let Some(network_distance_m) = dist[dest_node as usize] else {
            return Err(SpatialError::NoReachablePoi(format!(
                "node {}",
                self.network.node_id(dest_node)
            )));
        };
        Ok(AnchorResult {
            poi_id: format!("node:{}", self.network.node_id(dest_node)),
            location: self.network.node_coord(dest_node),
            network_distance_m,
            origin_node: self.network.node_id(origin_node).to_owned(),
            dest_node,
        })
    }
}

fn malformed(file: &Path, line: u64, reason: impl Into<String>) -> SpatialError {
    SpatialError::Malformed {
        file: file.display().to_string(),
        line,
        reason: reason.into(),
    }
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn parse_field<T: std::str::FromStr>(
    file: &Path,
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T, SpatialError>
where
    T::Err: std::fmt::Display,
{
    let raw = rec
        .get(idx)
        .ok_or_else(|| malformed(file, record_line(rec), format!("missing column {name}")))?;
    raw.trim().parse().map_err(|e| {
        malformed(file, record_line(rec), format!("bad {name} value {raw:?}: {e}"))
    })
}

fn header_index(
    file: &Path,
    headers: &csv::StringRecord,
    name: &str,
) -> Result<usize, SpatialError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| malformed(file, 1, format!("missing column {name}")))
}

/// Loads `nodes.csv` (node_id, lat, lon), `edges.csv` (from_node, to_node,
/// length_m[, oneway]) and `pois.csv` (poi_id, lat, lon, category), snapping
/// each POI within `snap_radius_m`. Returns the assembled index plus the ids
/// of POIs rejected as unsnappable (empty in strict mode, which fails
/// instead).
pub fn load_network(
    nodes_path: &Path,
    edges_path: &Path,
    pois_path: &Path,
    snap_radius_m: f64,
    strict_pois: bool,
) -> Result<(SpatialIndex, Vec<String>), SpatialError> {
    let mut nodes = Vec::new();
    {
        let mut rdr = csv::Reader::from_path(nodes_path)?;
        let headers = rdr.headers()?.clone();
        let id_i = header_index(nodes_path, &headers, "node_id")?;
        let lat_i = header_index(nodes_path, &headers, "lat")?;
        let lon_i = header_index(nodes_path, &headers, "lon")?;
        for rec in rdr.records() {
            let rec = rec?;
            let id: String = parse_field(nodes_path, &rec, id_i, "node_id")?;
            let lat: f64 = parse_field(nodes_path, &rec, lat_i, "lat")?;
            let lon: f64 = parse_field(nodes_path, &rec, lon_i, "lon")?;
            let coord = GeoPoint::new(lat, lon);
            if !coord.in_bounds() {
                return Err(malformed(
                    nodes_path,
                    record_line(&rec),
                    format!("coordinate out of range: ({lat}, {lon})"),
                ));
            }
            nodes.push((id, coord));
        }
    }
    let mut edges = Vec::new();
    {
        let mut rdr = csv::Reader::from_path(edges_path)?;
        let headers = rdr.headers()?.clone();
        let from_i = header_index(edges_path, &headers, "from_node")?;
        let to_i = header_index(edges_path, &headers, "to_node")?;
        let len_i = header_index(edges_path, &headers, "length_m")?;
        let oneway_i = headers.iter().position(|h| h.trim() == "oneway");
        for rec in rdr.records() {
            let rec = rec?;
            let oneway = match oneway_i {
                Some(i) => {
                    let v: u8 = parse_field(edges_path, &rec, i, "oneway")?;
                    v != 0
                }
                None => false,
            };
            edges.push(EdgeDef {
                from: parse_field(edges_path, &rec, from_i, "from_node")?,
                to: parse_field(edges_path, &rec, to_i, "to_node")?,
                length_m: parse_field(edges_path, &rec, len_i, "length_m")?,
                oneway,
            });
        }
    }
    let network = RoadNetwork::build(nodes, edges)?;
    let mut poi_rows = Vec::new();
    {
        let mut rdr = csv::Reader::from_path(pois_path)?;
        let headers = rdr.headers()?.clone();
        let id_i = header_index(pois_path, &headers, "poi_id")?;
        let lat_i = header_index(pois_path, &headers, "lat")?;
        let lon_i = header_index(pois_path, &headers, "lon")?;
        let cat_i = header_index(pois_path, &headers, "category")?;
        for rec in rdr.records() {
            let rec = rec?;
            let cat: PoiCategory = parse_field(pois_path, &rec, cat_i, "category")?;
            poi_rows.push((
                parse_field::<String>(pois_path, &rec, id_i, "poi_id")?,
                GeoPoint::new(
                    parse_field(pois_path, &rec, lat_i, "lat")?,
                    parse_field(pois_path, &rec, lon_i, "lon")?,
                ),
                cat,
            ));
        }
    }
    let (pois, rejected) = PoiIndex::build(&network, poi_rows, snap_radius_m, strict_pois)?;
    Ok((SpatialIndex::new(network, pois, snap_radius_m), rejected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon)
    }

    fn edge(from: &str, to: &str, length_m: f64) -> EdgeDef {
        EdgeDef { from: from.into(), to: to.into(), length_m, oneway: false }
    }

    /// Three nodes on a line ~100 m apart, lengths set explicitly.
    fn line_network() -> RoadNetwork {
        RoadNetwork::build(
            vec![
                ("A".into(), pt(22.5400, 114.06)),
                ("B".into(), pt(22.5409, 114.06)),
                ("C".into(), pt(22.5418, 114.06)),
            ],
            vec![edge("A", "B", 100.0), edge("B", "C", 100.0)],
        )
        .unwrap()
    }

    #[test]
    fn triangle_shortcut_goes_through_the_middle() {
        let net = RoadNetwork::build(
            vec![
                ("A".into(), pt(0.0, 0.0)),
                ("B".into(), pt(0.001, 0.0)),
                ("C".into(), pt(0.002, 0.0)),
            ],
            vec![edge("A", "B", 100.0), edge("B", "C", 100.0), edge("A", "C", 250.0)],
        )
        .unwrap();
        let dist = net.shortest_dist("A").unwrap();
        assert_eq!(dist["A"], 0.0);
        assert_eq!(dist["C"], 200.0, "A-B-C (200) beats the direct 250 edge");
    }

    #[test]
    fn disconnected_nodes_are_absent() {
        let net = RoadNetwork::build(
            vec![
                ("A".into(), pt(0.0, 0.0)),
                ("B".into(), pt(0.001, 0.0)),
                ("Z".into(), pt(1.0, 1.0)),
            ],
            vec![edge("A", "B", 100.0)],
        )
        .unwrap();
        let dist = net.shortest_dist("A").unwrap();
        assert!(!dist.contains_key("Z"));
    }

    #[test]
    fn oneway_edges_are_directed() {
        let net = RoadNetwork::build(
            vec![("A".into(), pt(0.0, 0.0)), ("B".into(), pt(0.001, 0.0))],
            vec![EdgeDef { from: "A".into(), to: "B".into(), length_m: 100.0, oneway: true }],
        )
        .unwrap();
        assert_eq!(net.shortest_dist("A").unwrap().get("B"), Some(&100.0));
        assert!(!net.shortest_dist("B").unwrap().contains_key("A"));
    }

    #[test]
    fn build_rejects_dangling_and_nonpositive_edges() {
        let nodes = vec![("A".into(), pt(0.0, 0.0)), ("B".into(), pt(0.001, 0.0))];
        let err = RoadNetwork::build(nodes.clone(), vec![edge("A", "X", 10.0)]).unwrap_err();
        assert!(matches!(err, SpatialError::DanglingEdge { .. }));
        let err = RoadNetwork::build(nodes, vec![edge("A", "B", 0.0)]).unwrap_err();
        assert!(matches!(err, SpatialError::NonPositiveLength { .. }));
    }

    // Independent oracle: Floyd–Warshall all-pairs distances.
    fn floyd_warshall(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for &(u, v, w) in edges {
            if w < d[u][v] {
                d[u][v] = w;
                d[v][u] = w;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let alt = d[i][k] + d[k][j];
                    if alt < d[i][j] {
                        d[i][j] = alt;
                    }
                }
            }
        }
        d
    }

    #[test]
    fn dijkstra_matches_floyd_warshall_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let n = rng.random_range(2..=20usize);
            let density: f64 = rng.random_range(0.1..0.5);
            let mut raw = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.random::<f64>() < density {
                        raw.push((u, v, f64::from(rng.random_range(1..=1000u32))));
                    }
                }
            }
            let nodes: Vec<(String, GeoPoint)> =
                (0..n).map(|i| (format!("n{i:02}"), pt(0.0, 0.0001 * i as f64))).collect();
            let edges: Vec<EdgeDef> = raw
                .iter()
                .map(|&(u, v, w)| edge(&format!("n{u:02}"), &format!("n{v:02}"), w))
                .collect();
            let net = RoadNetwork::build(nodes, edges).unwrap();
            let oracle = floyd_warshall(n, &raw);
            for src in 0..n {
                let dist = net.distances_from(src as u32);
                for (v, got) in dist.iter().enumerate() {
                    let want = oracle[src][v];
                    match got {
                        Some(g) => assert_eq!(*g, want, "src {src} -> {v}"),
                        None => assert!(want.is_infinite(), "src {src} -> {v} should be reachable"),
                    }
                }
            }
        }
    }

    #[test]
    fn triangle_inequality_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 15usize;
        let mut raw = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random::<f64>() < 0.3 {
                    raw.push((u, v, f64::from(rng.random_range(1..=1000u32))));
                }
            }
        }
        let nodes: Vec<(String, GeoPoint)> =
            (0..n).map(|i| (format!("n{i:02}"), pt(0.0, 0.0001 * i as f64))).collect();
        let edges: Vec<EdgeDef> = raw
            .iter()
            .map(|&(u, v, w)| edge(&format!("n{u:02}"), &format!("n{v:02}"), w))
            .collect();
        let net = RoadNetwork::build(nodes, edges).unwrap();
        let from: Vec<Vec<Option<f64>>> = (0..n).map(|i| net.distances_from(i as u32)).collect();
        for o in 0..n {
            for u in 0..n {
                for v in 0..n {
                    if let (Some(ov), Some(ou), Some(uv)) = (from[o][v], from[o][u], from[u][v]) {
                        assert!(ov <= ou + uv + 1e-9, "triangle violated at ({o},{u},{v})");
                    }
                }
            }
        }
    }

    fn line_index(shops: Vec<(&str, &str)>) -> SpatialIndex {
        // shops: (poi id, node id to place it on)
        let net = line_network();
        let rows = shops
            .into_iter()
            .map(|(pid, nid)| {
                let node = net.node_index(nid).unwrap();
                (pid.to_owned(), net.node_coord(node), PoiCategory::Shop)
            })
            .collect();
        let (pois, rejected) = PoiIndex::build(&net, rows, 500.0, true).unwrap();
        assert!(rejected.is_empty());
        SpatialIndex::new(net, pois, 500.0)
    }

    #[test]
    fn snap_prefers_exact_node_and_reports_distance_zero() {
        let idx = line_index(vec![("s1", "A")]);
        let a = idx.network().node_index("A").unwrap();
        let snapped = idx.snap(&idx.network().node_coord(a)).unwrap();
        assert_eq!(snapped, a);
    }

    #[test]
    fn snap_breaks_ties_by_smallest_node_id() {
        // Two nodes at the same coordinate: "5" must win over "9".
        let net = RoadNetwork::build(
            vec![("9".into(), pt(22.54, 114.06)), ("5".into(), pt(22.54, 114.06))],
            vec![edge("9", "5", 1.0)],
        )
        .unwrap();
        let (node, d) = net.nearest_node(&pt(22.54, 114.06)).unwrap();
        assert_eq!(net.node_id(node), "5");
        assert_eq!(d, 0.0);
    }

    #[test]
    fn snap_fails_beyond_radius() {
        let idx = line_index(vec![("s1", "A")]);
        // ~10 km north of the line.
        let err = idx.snap(&pt(22.63, 114.06)).unwrap_err();
        assert!(matches!(err, SpatialError::Unsnappable { .. }));
    }

    #[test]
    fn anchor_prefers_best_distance_match() {
        // Shops at A (0 m) and C (200 m); target 150 → C wins (50 vs 150).
        let idx = line_index(vec![("sA", "A"), ("sC", "C")]);
        let a = idx.network().node_coord(idx.network().node_index("A").unwrap());
        let got = idx.anchor(&a, &CategoryQuery::One(PoiCategory::Shop), 150.0).unwrap();
        assert_eq!(got.poi_id, "sC");
        assert_eq!(got.network_distance_m, 200.0);
        assert_eq!(got.origin_node, "A");
    }

    #[test]
    fn anchor_at_target_zero_picks_the_origin_poi() {
        let idx = line_index(vec![("sA", "A"), ("sC", "C")]);
        let a = idx.network().node_coord(idx.network().node_index("A").unwrap());
        let got = idx.anchor(&a, &CategoryQuery::One(PoiCategory::Shop), 0.0).unwrap();
        assert_eq!(got.poi_id, "sA");
        assert_eq!(got.network_distance_m, 0.0);
    }

    #[test]
    fn anchor_breaks_ties_by_smallest_poi_id() {
        // Shops at distances 100 ("7") and 200 ("3"), target 150: equal
        // error 50 → id "3" wins.
        let idx = line_index(vec![("7", "B"), ("3", "C")]);
        let a = idx.network().node_coord(idx.network().node_index("A").unwrap());
        let got = idx.anchor(&a, &CategoryQuery::One(PoiCategory::Shop), 150.0).unwrap();
        assert_eq!(got.poi_id, "3");
        assert_eq!(got.network_distance_m, 200.0);
    }

    #[test]
    fn anchor_reports_missing_and_unreachable_categories() {
        let idx = line_index(vec![("sA", "A")]);
        let a = idx.network().node_coord(idx.network().node_index("A").unwrap());
        let err = idx.anchor(&a, &CategoryQuery::One(PoiCategory::Hospital), 100.0).unwrap_err();
        assert!(matches!(err, SpatialError::NoPoiOfCategory(_)));

        // A shop on an island node is unreachable.
        let net = RoadNetwork::build(
            vec![
                ("A".into(), pt(22.5400, 114.06)),
                ("B".into(), pt(22.5409, 114.06)),
                ("Z".into(), pt(22.5500, 114.06)),
            ],
            vec![edge("A", "B", 100.0)],
        )
        .unwrap();
        let z = net.node_coord(net.node_index("Z").unwrap());
        let (pois, _) =
            PoiIndex::build(&net, vec![("sZ".into(), z, PoiCategory::Shop)], 500.0, true).unwrap();
        let idx = SpatialIndex::new(net, pois, 500.0);
        let a = idx.network().node_coord(idx.network().node_index("A").unwrap());
        let err = idx.anchor(&a, &CategoryQuery::One(PoiCategory::Shop), 100.0).unwrap_err();
        assert!(matches!(err, SpatialError::NoReachablePoi(_)));
    }

    #[test]
    fn anchor_matches_exhaustive_search_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for round in 0..5 {
            let spec = grid::GridSpec {
                rows: 6,
                cols: 6,
                spacing_m: 500.0,
                origin: pt(22.5, 114.0),
                pois_per_category: 8,
                seed: round,
            };
            let data = grid::generate_grid(&spec);
            let net = RoadNetwork::build(data.nodes, data.edges).unwrap();
            let (pois, _) = PoiIndex::build(&net, data.pois, 500.0, true).unwrap();
            let idx = SpatialIndex::new(net, pois, 500.0);
            for _ in 0..40 {
                let origin = rng.random_range(0..idx.network().node_count()) as u32;
                let target = rng.random_range(0.0..6000.0);
                let cat = PoiCategory::ALL[rng.random_range(0..PoiCategory::ALL.len())];
                let query = CategoryQuery::One(cat);
                let got = idx.anchor_from_node(origin, &query, target).unwrap();
                // Exhaustive oracle over every POI of the category.
                let dist = idx.network().distances_from(origin);
                let mut best: Option<(f64, &str, f64)> = None;
                for i in 0..idx.pois().len() as u32 {
                    let poi = idx.pois().poi(i);
                    if poi.category != cat {
                        continue;
                    }
                    let Some(d) = dist[poi.node as usize] else { continue };
                    let err = (d - target).abs();
                    let replace = match best {
                        None => true,
                        Some((be, bid, _)) => {
                            err < be || (err == be && poi.id.as_str() < bid)
                        }
                    };
                    if replace {
                        best = Some((err, &poi.id, d));
                    }
                }
                let (_, want_id, want_d) = best.expect("grid POIs are reachable");
                assert_eq!(got.poi_id, want_id);
                assert_eq!(got.network_distance_m, want_d);
            }
        }
    }

    #[test]
    fn distance_cache_returns_shared_results() {
        let idx = line_index(vec![("sA", "A")]);
        let a = idx.network().node_index("A").unwrap();
        let first = idx.distances(a);
        let second = idx.distances(a);
        assert!(Arc::ptr_eq(&first, &second), "second call must hit the cache");
    }

    #[test]
    fn category_query_parsing() {
        assert_eq!("any".parse::<CategoryQuery>().unwrap(), CategoryQuery::Any);
        assert_eq!(
            "shop".parse::<CategoryQuery>().unwrap(),
            CategoryQuery::One(PoiCategory::Shop)
        );
        assert_eq!(
            "school|residence".parse::<CategoryQuery>().unwrap(),
            CategoryQuery::Either(PoiCategory::School, PoiCategory::Residence)
        );
        assert!("mall".parse::<CategoryQuery>().is_err());
    }

    #[test]
    fn poi_build_rejects_or_reports_unsnappable() {
        let net = line_network();
        let far = pt(23.5, 114.06);
        let rows = vec![("far".to_owned(), far, PoiCategory::Shop)];
        let err = PoiIndex::build(&net, rows.clone(), 500.0, true).unwrap_err();
        assert!(matches!(err, SpatialError::PoiUnsnappable(_)));
        let (pois, rejected) = PoiIndex::build(&net, rows, 500.0, false).unwrap();
        assert_eq!(pois.len(), 0);
        assert_eq!(rejected, vec!["far".to_owned()]);
    }

    #[test]
    fn load_network_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let spec = grid::GridSpec {
            rows: 3,
            cols: 3,
            spacing_m: 500.0,
            origin: pt(22.5, 114.0),
            pois_per_category: 2,
            seed: 1,
        };
        let data = grid::generate_grid(&spec);
        grid::write_csvs(&data, dir.path()).unwrap();
        let (idx, rejected) = load_network(
            &dir.path().join("nodes.csv"),
            &dir.path().join("edges.csv"),
            &dir.path().join("pois.csv"),
            500.0,
            true,
        )
        .unwrap();
        assert!(rejected.is_empty());
        assert_eq!(idx.network().node_count(), 9);
        assert_eq!(idx.pois().len(), 12);
        // 3x3 grid: 6 horizontal + 6 vertical edges.
        assert_eq!(idx.network().edge_count(), 12);
    }
}
