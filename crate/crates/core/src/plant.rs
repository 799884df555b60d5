//! Deterministic simulation of the modular production cell: conveyor
//! stations with entrance/ready sensors, a material holder and an RFID
//! reader, AGVs moving between stations, and simulated neighbour agents that
//! answer coordination requests.
//!
//! Kinematics are one-dimensional and integer valued (micrometres and
//! milliseconds) so identical call sequences give identical states.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::Invocation;
use crate::time::Millis;
use crate::twin::{is_valid_address, SignalChange, SignalValue};

/// Simulation sub-step.
pub const SUB_STEP_MS: Millis = 100;
/// Width of the entrance and ready sensor windows.
pub const SENSOR_WINDOW_UM: i64 = 50_000;
pub const DEFAULT_BELT_LENGTH_M: f64 = 1.0;
pub const DEFAULT_BELT_SPEED_MPS: f64 = 0.2;
pub const DEFAULT_AGV_TRANSIT_MS: Millis = 8_000;
pub const DEFAULT_RFID_CHECK_MS: Millis = 1_000;
pub const DEFAULT_OVERDUE_GRACE_MS: Millis = 1_000;
pub const IN_TRANSIT: &str = "in_transit";

pub const ENTRANCE_SENSOR: &str = "BG56";
pub const READY_SENSOR: &str = "BG51";

pub fn metres_to_um(m: f64) -> i64 {
    (m * 1_000_000.0).round() as i64
}

pub fn um_to_metres(um: i64) -> f64 {
    um as f64 / 1_000_000.0
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("no workpiece at the ready position of {0}")]
    NoWorkpieceAtReadyPosition(String),
    #[error("entrance of {0} is occupied")]
    EntranceOccupied(String),
    #[error("unknown fault target {0:?}")]
    UnknownTarget(String),
    #[error("fault time {at} ms lies before the current time {now} ms")]
    InvalidTime { at: Millis, now: Millis },
    #[error("unknown station {0:?}")]
    UnknownStation(String),
    #[error("unknown AGV {0:?}")]
    UnknownAgv(String),
    #[error("workpiece {0:?} already exists outside the buffer")]
    WorkpieceInUse(String),
    #[error("AGV {0} is in transit")]
    AgvInTransit(String),
    #[error("AGV {0} carries no workpiece")]
    AgvEmpty(String),
    #[error("AGV {0} already carries a workpiece")]
    AgvLoaded(String),
    #[error("no workpiece to load at {0}")]
    NothingToLoad(String),
    #[error("{0} has no next agent configured")]
    NoNextAgent(String),
    #[error("invocation of {0} names no station")]
    MissingStation(String),
    #[error("service {0:?} has no plant actuation")]
    UnsupportedService(String),
    #[error("invalid argument for {service}: {message}")]
    InvalidArgument { service: String, message: String },
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BeltState {
    Stopped,
    Forward,
    Backward,
}

impl BeltState {
    pub fn as_str(self) -> &'static str {
        match self {
            BeltState::Stopped => "stopped",
            BeltState::Forward => "forward",
            BeltState::Backward => "backward",
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum HolderState {
    Engaged,
    Released,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RfidCheck {
    None,
    Pending { due: Millis },
    Ok,
    Failed,
}

impl RfidCheck {
    fn as_str(self) -> &'static str {
        match self {
            RfidCheck::None | RfidCheck::Pending { .. } => "none",
            RfidCheck::Ok => "ok",
            RfidCheck::Failed => "failed",
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SimClock {
    pub now: Millis,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Location {
    Belt { station: String, offset_um: i64 },
    Agv { agv: String },
    /// Off-system storage: not yet delivered, or handed over at a station.
    Buffer {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        station: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        owner: Option<String>,
    },
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Workpiece {
    pub id: String,
    pub location: Location,
    pub held: bool,
    pub stuck: bool,
    pub cleared_for_processing: Option<bool>,
}

impl Workpiece {
    pub fn incoming(id: impl Into<String>, cleared: Option<bool>) -> Self {
        Self {
            id: id.into(),
            location: Location::Buffer { station: None, owner: None },
            held: false,
            stuck: false,
            cleared_for_processing: cleared,
        }
    }

    fn on_belt(&self, station: &str) -> Option<i64> {
        match &self.location {
            Location::Belt { station: s, offset_um } if s == station => Some(*offset_um),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct ConveyorStation {
    pub id: String,
    pub belt_length_um: i64,
    pub belt_speed_um_per_s: i64,
    pub belt_state: BeltState,
    pub belt_timer_ms: Millis,
    /// BG56
    pub entrance_sensor: bool,
    /// BG51
    pub ready_sensor: bool,
    /// H1
    pub holder: HolderState,
    /// TF81
    pub rfid_reader: Option<String>,
    pub rfid_check: RfidCheck,
    pub next_agent: Option<String>,
    /// Transport watchdog: the ready sensor has not fired by the expected time.
    pub overdue: bool,
    arrival_deadline: Option<Millis>,
    dropped_sensors: BTreeSet<String>,
}

impl ConveyorStation {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            belt_length_um: metres_to_um(DEFAULT_BELT_LENGTH_M),
            belt_speed_um_per_s: metres_to_um(DEFAULT_BELT_SPEED_MPS),
            belt_state: BeltState::Stopped,
            belt_timer_ms: 0,
            entrance_sensor: false,
            ready_sensor: false,
            holder: HolderState::Released,
            rfid_reader: None,
            rfid_check: RfidCheck::None,
            next_agent: None,
            overdue: false,
            arrival_deadline: None,
            dropped_sensors: BTreeSet::new(),
        }
    }

    pub fn with_geometry(mut self, length_m: f64, speed_mps: f64) -> Self {
        self.belt_length_um = metres_to_um(length_m);
        self.belt_speed_um_per_s = metres_to_um(speed_mps);
        self
    }

    pub fn with_next_agent(mut self, agent: impl Into<String>) -> Self {
        self.next_agent = Some(agent.into());
        self
    }

    pub fn ready_start_um(&self) -> i64 {
        self.belt_length_um - SENSOR_WINDOW_UM
    }

    pub fn in_entrance_window(&self, offset_um: i64) -> bool {
        (0..=SENSOR_WINDOW_UM).contains(&offset_um)
    }

    pub fn in_ready_window(&self, offset_um: i64) -> bool {
        (self.ready_start_um()..=self.belt_length_um).contains(&offset_um)
    }

    pub fn sensor_dropped(&self, sensor: &str) -> bool {
        self.dropped_sensors.contains(sensor)
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct AgvUnit {
    pub id: String,
    /// Station id or [`IN_TRANSIT`].
    pub location: String,
    pub destination: Option<String>,
    pub cargo: Option<String>,
    pub transit_timer_ms: Millis,
}

impl AgvUnit {
    pub fn at(id: impl Into<String>, station: impl Into<String>) -> Self {
        Self { id: id.into(), location: station.into(), destination: None, cargo: None, transit_timer_ms: 0 }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PeerStatus {
    Busy,
    Ready,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeerReply {
    pub status: PeerStatus,
    #[serde(default)]
    pub latency_ms: Millis,
}

/// Scripted answers of a simulated neighbour agent. Once the script is
/// exhausted the peer answers ready without delay.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq, Default)]
pub struct PeerScript {
    pub replies: VecDeque<PeerReply>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    /// Target workpiece stops moving.
    StuckWorkpiece,
    /// Target `station.SENSOR` reads false until cleared.
    SensorDropout,
    /// Sets the target signal address to `value`.
    Custom { value: SignalValue },
    /// Undoes a stuck, dropout or custom fault on the target.
    Clear,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct FaultSpec {
    #[serde(flatten)]
    pub kind: FaultKind,
    pub target: String,
    pub at_ms: Millis,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlantTiming {
    pub agv_transit_ms: Millis,
    pub rfid_check_ms: Millis,
    pub overdue_grace_ms: Millis,
}

impl Default for PlantTiming {
    fn default() -> Self {
        Self {
            agv_transit_ms: DEFAULT_AGV_TRANSIT_MS,
            rfid_check_ms: DEFAULT_RFID_CHECK_MS,
            overdue_grace_ms: DEFAULT_OVERDUE_GRACE_MS,
        }
    }
}

/// Flat view of every raw signal, keyed by `station.component.tag`.
pub type SignalSnapshot = BTreeMap<String, SignalValue>;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
pub struct PlantState {
    pub clock: SimClock,
    pub stations: BTreeMap<String, ConveyorStation>,
    pub agvs: BTreeMap<String, AgvUnit>,
    pub workpieces: BTreeMap<String, Workpiece>,
    pub peers: BTreeMap<String, PeerScript>,
    pub pending_faults: Vec<FaultSpec>,
    pub custom_signals: BTreeMap<String, SignalValue>,
    pub timing: PlantTiming,
}

/// Outcome of handing a workpiece to the next agent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandoverInfo {
    pub workpiece: String,
    pub next_agent: String,
}

impl PlantState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_station(&mut self, station: ConveyorStation) {
        self.stations.insert(station.id.clone(), station);
    }

    pub fn add_agv(&mut self, agv: AgvUnit) {
        self.agvs.insert(agv.id.clone(), agv);
    }

    pub fn add_workpiece(&mut self, workpiece: Workpiece) {
        self.workpieces.insert(workpiece.id.clone(), workpiece);
    }

    pub fn now(&self) -> Millis {
        self.clock.now
    }

    pub fn station(&self, id: &str) -> Result<&ConveyorStation, PlantError> {
        self.stations.get(id).ok_or_else(|| PlantError::UnknownStation(id.to_string()))
    }

    /// Current value of every raw signal. Pure.
    pub fn read_signals(&self) -> SignalSnapshot {
        let mut out = SignalSnapshot::new();
        for (id, st) in &self.stations {
            out.insert(format!("{id}.{ENTRANCE_SENSOR}.detected"), st.entrance_sensor.into());
            out.insert(format!("{id}.{READY_SENSOR}.detected"), st.ready_sensor.into());
            out.insert(format!("{id}.H1.engaged"), (st.holder == HolderState::Engaged).into());
            out.insert(format!("{id}.C1.state"), st.belt_state.as_str().into());
            out.insert(format!("{id}.C1.overdue"), st.overdue.into());
            out.insert(format!("{id}.TF81.id"), st.rfid_reader.clone().unwrap_or_default().as_str().into());
            out.insert(format!("{id}.TF81.check"), st.rfid_check.as_str().into());
        }
        for (id, agv) in &self.agvs {
            out.insert(format!("{id}.location"), agv.location.as_str().into());
            out.insert(format!("{id}.cargo"), agv.cargo.clone().unwrap_or_default().as_str().into());
        }
        for (address, value) in &self.custom_signals {
            out.insert(address.clone(), value.clone());
        }
        out
    }

    /// Geometric sensor predicate for one station, ignoring stored booleans.
    pub fn sensor_predicate(&self, station: &str) -> (bool, bool) {
        let Some(st) = self.stations.get(station) else { return (false, false) };
        let offsets: Vec<i64> = self.workpieces.values().filter_map(|w| w.on_belt(station)).collect();
        let entrance = offsets.iter().any(|&o| st.in_entrance_window(o)) && !st.sensor_dropped(ENTRANCE_SENSOR);
        let ready = offsets.iter().any(|&o| st.in_ready_window(o)) && !st.sensor_dropped(READY_SENSOR);
        (entrance, ready)
    }

    fn refresh_sensors(&mut self) {
        let ids: Vec<String> = self.stations.keys().cloned().collect();
        for id in ids {
            let (entrance, ready) = self.sensor_predicate(&id);
            let st = self.stations.get_mut(&id).expect("station exists");
            st.entrance_sensor = entrance;
            st.ready_sensor = ready;
            if ready {
                st.arrival_deadline = None;
                st.overdue = false;
            }
        }
    }

    fn diff(before: &SignalSnapshot, after: &SignalSnapshot, at: Millis) -> Vec<SignalChange> {
        after
            .iter()
            .filter_map(|(address, new)| match before.get(address) {
                Some(old) if old == new => None,
                old => Some(SignalChange {
                    address: address.clone(),
                    old_value: old.cloned(),
                    new_value: new.clone(),
                    at,
                }),
            })
            .collect()
    }

    /// Runs `f` on a scratch copy; commits and returns the signal changes only
    /// if it succeeds.
    fn transact<T>(
        &mut self,
        f: impl FnOnce(&mut PlantState) -> Result<T, PlantError>,
    ) -> Result<(T, Vec<SignalChange>), PlantError> {
        let before = self.read_signals();
        let mut scratch = self.clone();
        let value = f(&mut scratch)?;
        scratch.refresh_sensors();
        let changes = Self::diff(&before, &scratch.read_signals(), scratch.clock.now);
        *self = scratch;
        Ok((value, changes))
    }

    /// Advances the virtual clock by `dt`, in sub-steps of [`SUB_STEP_MS`].
    /// Every signal change carries the end time of the sub-step in which it
    /// happened. `dt = 0` is the identity.
    pub fn advance(&mut self, dt: Millis) -> Vec<SignalChange> {
        let mut changes = Vec::new();
        let mut remaining = dt;
        while remaining > 0 {
            let step = remaining.min(SUB_STEP_MS);
            remaining -= step;
            let before = self.read_signals();
            self.sub_step(step);
            changes.extend(Self::diff(&before, &self.read_signals(), self.clock.now));
        }
        changes
    }

    fn sub_step(&mut self, step: Millis) {
        self.clock.now += step;
        let now = self.clock.now;
        for st in self.stations.values_mut() {
            if st.belt_state == BeltState::Stopped {
                continue;
            }
            let run = step.min(st.belt_timer_ms);
            let delta = st.belt_speed_um_per_s * run as i64 / 1000;
            let signed = if st.belt_state == BeltState::Forward { delta } else { -delta };
            for wp in self.workpieces.values_mut() {
                if wp.held || wp.stuck {
                    continue;
                }
                if let Location::Belt { station, offset_um } = &mut wp.location {
                    if *station == st.id {
                        *offset_um = (*offset_um + signed).clamp(0, st.belt_length_um);
                    }
                }
            }
            st.belt_timer_ms -= run;
            if st.belt_timer_ms == 0 {
                st.belt_state = BeltState::Stopped;
                st.arrival_deadline = None;
            }
        }
        for agv in self.agvs.values_mut() {
            if agv.location != IN_TRANSIT {
                continue;
            }
            agv.transit_timer_ms = agv.transit_timer_ms.saturating_sub(step);
            if agv.transit_timer_ms == 0 {
                agv.location = agv.destination.take().unwrap_or_default();
            }
        }
        for st in self.stations.values_mut() {
            if let RfidCheck::Pending { due } = st.rfid_check {
                if due <= now {
                    let cleared = st
                        .rfid_reader
                        .as_ref()
                        .and_then(|id| self.workpieces.get(id))
                        .and_then(|w| w.cleared_for_processing)
                        .unwrap_or(false);
                    st.rfid_check = if cleared { RfidCheck::Ok } else { RfidCheck::Failed };
                }
            }
        }
        self.refresh_sensors();
        for st in self.stations.values_mut() {
            if let Some(deadline) = st.arrival_deadline {
                if now >= deadline && st.belt_state != BeltState::Stopped && !st.ready_sensor {
                    st.overdue = true;
                    st.arrival_deadline = None;
                }
            }
        }
        self.apply_due_faults();
        self.refresh_sensors();
    }

    fn apply_due_faults(&mut self) {
        let now = self.clock.now;
        let (due, later): (Vec<FaultSpec>, Vec<FaultSpec>) =
            std::mem::take(&mut self.pending_faults).into_iter().partition(|f| f.at_ms <= now);
        self.pending_faults = later;
        for fault in due {
            self.activate_fault(&fault);
        }
    }

    fn activate_fault(&mut self, fault: &FaultSpec) {
        match &fault.kind {
            FaultKind::StuckWorkpiece => {
                if let Some(wp) = self.workpieces.get_mut(&fault.target) {
                    wp.stuck = true;
                }
            }
            FaultKind::SensorDropout => {
                if let Some((station, sensor)) = fault.target.split_once('.') {
                    if let Some(st) = self.stations.get_mut(station) {
                        st.dropped_sensors.insert(sensor.to_string());
                    }
                }
            }
            FaultKind::Custom { value } => {
                self.custom_signals.insert(fault.target.clone(), value.clone());
            }
            FaultKind::Clear => {
                if let Some(wp) = self.workpieces.get_mut(&fault.target) {
                    wp.stuck = false;
                } else if let Some((station, sensor)) = fault.target.split_once('.') {
                    if let Some(st) = self.stations.get_mut(station) {
                        st.dropped_sensors.remove(sensor);
                    }
                }
                self.custom_signals.remove(&fault.target);
            }
        }
    }

    fn fault_target_known(&self, fault: &FaultSpec) -> bool {
        let sensor_target = || {
            fault.target.split_once('.').is_some_and(|(station, sensor)| {
                self.stations.contains_key(station) && (sensor == ENTRANCE_SENSOR || sensor == READY_SENSOR)
            })
        };
        match &fault.kind {
            FaultKind::StuckWorkpiece => self.workpieces.contains_key(&fault.target),
            FaultKind::SensorDropout => sensor_target(),
            FaultKind::Custom { .. } => is_valid_address(&fault.target) && fault.target.contains('.'),
            FaultKind::Clear => {
                self.workpieces.contains_key(&fault.target)
                    || sensor_target()
                    || self.custom_signals.contains_key(&fault.target)
                    || self.pending_faults.iter().any(|f| f.target == fault.target)
            }
        }
    }

    /// Queues a fault; it takes effect when the clock reaches `fault.at_ms`.
    /// A fault due now takes effect immediately.
    pub fn inject_fault(&mut self, fault: FaultSpec) -> Result<Vec<SignalChange>, PlantError> {
        if fault.at_ms < self.clock.now {
            return Err(PlantError::InvalidTime { at: fault.at_ms, now: self.clock.now });
        }
        if !self.fault_target_known(&fault) {
            return Err(PlantError::UnknownTarget(fault.target));
        }
        let (_, changes) = self.transact(|p| {
            p.pending_faults.push(fault);
            p.apply_due_faults();
            Ok(())
        })?;
        Ok(changes)
    }

    /// Places a workpiece at the entrance of `station`. A workpiece waiting in
    /// the off-system buffer is moved; an unknown id creates a new workpiece.
    pub fn spawn_workpiece(&mut self, station: &str, workpiece: &str) -> Result<Vec<SignalChange>, PlantError> {
        let (_, changes) = self.transact(|p| p.place_at_entrance(station, workpiece))?;
        Ok(changes)
    }

    fn place_at_entrance(&mut self, station: &str, workpiece: &str) -> Result<(), PlantError> {
        let st = self.station(station)?;
        let occupied = self.workpieces.values().filter_map(|w| w.on_belt(station)).any(|o| st.in_entrance_window(o));
        if occupied {
            return Err(PlantError::EntranceOccupied(station.to_string()));
        }
        let location = Location::Belt { station: station.to_string(), offset_um: 0 };
        match self.workpieces.get_mut(workpiece) {
            Some(wp) => {
                if matches!(wp.location, Location::Belt { .. }) {
                    return Err(PlantError::WorkpieceInUse(workpiece.to_string()));
                }
                wp.location = location;
                wp.held = false;
            }
            None => {
                let mut wp = Workpiece::incoming(workpiece, None);
                wp.location = location;
                self.add_workpiece(wp);
            }
        }
        Ok(())
    }

    /// Removes a workpiece from the plant entirely.
    pub fn remove_workpiece(&mut self, workpiece: &str) -> Result<Vec<SignalChange>, PlantError> {
        let (_, changes) = self.transact(|p| {
            p.workpieces.remove(workpiece).ok_or_else(|| PlantError::UnknownTarget(workpiece.to_string()))?;
            for st in p.stations.values_mut() {
                if st.rfid_reader.as_deref() == Some(workpiece) {
                    st.rfid_reader = None;
                    st.rfid_check = RfidCheck::None;
                }
            }
            for agv in p.agvs.values_mut() {
                if agv.cargo.as_deref() == Some(workpiece) {
                    agv.cargo = None;
                }
            }
            Ok(())
        })?;
        Ok(changes)
    }

    fn ready_workpiece(&self, station: &str) -> Result<String, PlantError> {
        let st = self.station(station)?;
        self.workpieces
            .values()
            .filter(|w| w.on_belt(station).is_some_and(|o| st.in_ready_window(o)))
            .max_by_key(|w| (w.on_belt(station), std::cmp::Reverse(w.id.clone())))
            .map(|w| w.id.clone())
            .ok_or_else(|| PlantError::NoWorkpieceAtReadyPosition(station.to_string()))
    }

    /// Applies an actuation service. On error the plant is unchanged.
    pub fn apply_actuation(&mut self, invocation: &Invocation) -> Result<Vec<SignalChange>, PlantError> {
        if invocation.service == "pass" {
            return Ok(Vec::new());
        }
        let (_, changes) = self.transact(|p| p.actuate(invocation).map(|_| ()))?;
        Ok(changes)
    }

    /// Releases the ready-position workpiece of `station` to the station's
    /// next agent: holder released, workpiece moved to the station's handover
    /// buffer owned by that agent.
    pub fn hand_over(&mut self, station: &str) -> Result<(HandoverInfo, Vec<SignalChange>), PlantError> {
        self.transact(|p| p.hand_over_inner(station))
    }

    fn hand_over_inner(&mut self, station: &str) -> Result<HandoverInfo, PlantError> {
        let next_agent = self
            .station(station)?
            .next_agent
            .clone()
            .ok_or_else(|| PlantError::NoNextAgent(station.to_string()))?;
        let id = self.ready_workpiece(station)?;
        let wp = self.workpieces.get_mut(&id).expect("ready workpiece exists");
        wp.held = false;
        wp.location = Location::Buffer { station: Some(station.to_string()), owner: Some(next_agent.clone()) };
        let st = self.stations.get_mut(station).expect("station exists");
        st.holder = HolderState::Released;
        if st.rfid_reader.as_deref() == Some(id.as_str()) {
            st.rfid_reader = None;
            st.rfid_check = RfidCheck::None;
        }
        Ok(HandoverInfo { workpiece: id, next_agent })
    }

    fn station_arg<'a>(&self, invocation: &'a Invocation) -> Result<&'a str, PlantError> {
        invocation.station.as_deref().ok_or_else(|| PlantError::MissingStation(invocation.service.clone()))
    }

    fn actuate(&mut self, inv: &Invocation) -> Result<Option<HandoverInfo>, PlantError> {
        let invalid = |message: &str| PlantError::InvalidArgument {
            service: inv.service.clone(),
            message: message.to_string(),
        };
        let now = self.clock.now;
        match inv.service.as_str() {
            "conveyor_belt_run" => {
                let station = self.station_arg(inv)?;
                let direction = match inv.text_arg(0) {
                    Some("forward") => BeltState::Forward,
                    Some("backward") => BeltState::Backward,
                    _ => return Err(invalid("direction must be forward or backward")),
                };
                let seconds = inv.int_arg(1).filter(|s| *s > 0).ok_or_else(|| invalid("duration must be positive"))?;
                let upstream = {
                    let st = self.station(station)?;
                    self.workpieces
                        .values()
                        .filter(|w| !w.held)
                        .filter_map(|w| w.on_belt(station))
                        .filter(|&o| o < st.ready_start_um())
                        .max()
                };
                let grace = self.timing.overdue_grace_ms;
                let st = self.stations.get_mut(station).expect("checked");
                st.belt_state = direction;
                st.belt_timer_ms = seconds as Millis * 1000;
                st.overdue = false;
                st.arrival_deadline = match (direction, upstream) {
                    (BeltState::Forward, Some(offset)) if st.belt_speed_um_per_s > 0 => {
                        let distance = (st.ready_start_um() - offset) as u64;
                        let speed = st.belt_speed_um_per_s as u64;
                        Some(now + (distance * 1000).div_ceil(speed) + grace)
                    }
                    _ => None,
                };
                Ok(None)
            }
            "conveyor_belt_stop" => {
                let station = self.station_arg(inv)?;
                self.station(station)?;
                let st = self.stations.get_mut(station).expect("checked");
                st.belt_state = BeltState::Stopped;
                st.belt_timer_ms = 0;
                st.arrival_deadline = None;
                Ok(None)
            }
            "activate_material_holder" => {
                let station = self.station_arg(inv)?;
                let id = self.ready_workpiece(station)?;
                let st = self.stations.get_mut(station).expect("checked");
                st.holder = HolderState::Engaged;
                let length = st.belt_length_um;
                let wp = self.workpieces.get_mut(&id).expect("exists");
                wp.held = true;
                wp.location = Location::Belt { station: station.to_string(), offset_um: length };
                Ok(None)
            }
            "deactivate_material_holder" => {
                let station = self.station_arg(inv)?;
                self.station(station)?;
                self.stations.get_mut(station).expect("checked").holder = HolderState::Released;
                for wp in self.workpieces.values_mut() {
                    if wp.on_belt(station).is_some() {
                        wp.held = false;
                    }
                }
                Ok(None)
            }
            "rfid_read" => {
                let station = self.station_arg(inv)?;
                let id = self.ready_workpiece(station)?;
                let due = now + self.timing.rfid_check_ms;
                let st = self.stations.get_mut(station).expect("checked");
                st.rfid_reader = Some(id);
                st.rfid_check = RfidCheck::Pending { due };
                Ok(None)
            }
            "release_workpiece_to_next_agent" => {
                let station = self.station_arg(inv)?.to_string();
                self.hand_over_inner(&station).map(Some)
            }
            "move_to" => {
                let agv_id = self.station_arg(inv)?;
                let destination = inv.text_arg(0).ok_or_else(|| invalid("station id expected"))?.to_string();
                if !self.stations.contains_key(&destination) {
                    return Err(PlantError::UnknownStation(destination));
                }
                let transit = self.timing.agv_transit_ms;
                let agv = self.agvs.get_mut(agv_id).ok_or_else(|| PlantError::UnknownAgv(agv_id.to_string()))?;
                if agv.location == IN_TRANSIT {
                    return Err(PlantError::AgvInTransit(agv.id.clone()));
                }
                if agv.location != destination {
                    agv.location = IN_TRANSIT.to_string();
                    agv.destination = Some(destination);
                    agv.transit_timer_ms = transit;
                }
                Ok(None)
            }
            "load_workpiece" => {
                let agv_id = self.station_arg(inv)?;
                let agv = self.agvs.get(agv_id).ok_or_else(|| PlantError::UnknownAgv(agv_id.to_string()))?;
                if agv.location == IN_TRANSIT {
                    return Err(PlantError::AgvInTransit(agv.id.clone()));
                }
                if agv.cargo.is_some() {
                    return Err(PlantError::AgvLoaded(agv.id.clone()));
                }
                let here = agv.location.clone();
                let buffered = self
                    .workpieces
                    .values()
                    .find(|w| matches!(&w.location, Location::Buffer { station: Some(s), .. } if *s == here))
                    .map(|w| w.id.clone());
                let id = match buffered {
                    Some(id) => id,
                    None => {
                        let id = self.ready_workpiece(&here).map_err(|_| PlantError::NothingToLoad(here.clone()))?;
                        if self.workpieces[&id].held {
                            return Err(PlantError::NothingToLoad(here));
                        }
                        id
                    }
                };
                let wp = self.workpieces.get_mut(&id).expect("exists");
                wp.location = Location::Agv { agv: agv_id.to_string() };
                wp.held = false;
                self.agvs.get_mut(agv_id).expect("exists").cargo = Some(id);
                Ok(None)
            }
            "unload_workpiece" => {
                let agv_id = self.station_arg(inv)?;
                let agv = self.agvs.get(agv_id).ok_or_else(|| PlantError::UnknownAgv(agv_id.to_string()))?;
                if agv.location == IN_TRANSIT {
                    return Err(PlantError::AgvInTransit(agv.id.clone()));
                }
                let cargo = agv.cargo.clone().ok_or_else(|| PlantError::AgvEmpty(agv.id.clone()))?;
                let here = agv.location.clone();
                self.place_at_entrance(&here, &cargo)?;
                self.agvs.get_mut(agv_id).expect("exists").cargo = None;
                Ok(None)
            }
            other => Err(PlantError::UnsupportedService(other.to_string())),
        }
    }

    /// True when nothing will change without outside input: belts stopped,
    /// no AGV in transit, no pending RFID check or fault.
    pub fn is_idle(&self) -> bool {
        self.pending_faults.is_empty()
            && self.stations.values().all(|s| {
                s.belt_state == BeltState::Stopped && !matches!(s.rfid_check, RfidCheck::Pending { .. })
            })
            && self.agvs.values().all(|a| a.location != IN_TRANSIT)
    }

    /// Takes the next scripted reply of a simulated peer agent.
    pub fn next_peer_reply(&mut self, agent: &str) -> PeerReply {
        self.peers
            .get_mut(agent)
            .and_then(|p| p.replies.pop_front())
            .unwrap_or(PeerReply { status: PeerStatus::Ready, latency_ms: 0 })
    }

    /// Workpiece offset in metres if it lies on a belt.
    pub fn offset_m(&self, workpiece: &str) -> Option<f64> {
        match &self.workpieces.get(workpiece)?.location {
            Location::Belt { offset_um, .. } => Some(um_to_metres(*offset_um)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::ArgValue;

    fn plant() -> PlantState {
        let mut p = PlantState::new();
        p.add_station(ConveyorStation::new("conveyor1").with_next_agent("op_next"));
        p
    }

    fn call(service: &str, args: Vec<ArgValue>) -> Invocation {
        Invocation::new(service, args).issued("op", 0, Some("conveyor1"))
    }

    fn run(direction: &str, secs: i64) -> Invocation {
        call("conveyor_belt_run", vec![ArgValue::Text(direction.into()), ArgValue::Int(secs)])
    }

    #[test]
    fn fresh_plant_reads_all_false() {
        let p = plant();
        let s = p.read_signals();
        assert_eq!(s["conveyor1.BG56.detected"], false.into());
        assert_eq!(s["conveyor1.BG51.detected"], false.into());
        assert_eq!(s["conveyor1.C1.state"], "stopped".into());
        assert_eq!(p.read_signals(), s);
    }

    #[test]
    fn five_seconds_forward_reaches_ready() {
        let mut p = plant();
        let spawn = p.spawn_workpiece("conveyor1", "W1").unwrap();
        assert_eq!(spawn.len(), 1);
        assert_eq!(spawn[0].address, "conveyor1.BG56.detected");
        assert_eq!(spawn[0].at, 0);
        p.apply_actuation(&run("forward", 10)).unwrap();
        let changes = p.advance(5_000);
        assert_eq!(p.offset_m("W1"), Some(1.0));
        assert!(p.stations["conveyor1"].ready_sensor);
        let ready = changes.iter().find(|c| c.address == "conveyor1.BG51.detected").unwrap();
        // 0.95 m window start / 0.2 m/s = 4.75 s, resolved at the 4.8 s sub-step
        assert_eq!(ready.at, 4_800);
    }

    #[test]
    fn stopped_belt_does_not_move() {
        let mut p = plant();
        p.spawn_workpiece("conveyor1", "W1").unwrap();
        assert!(p.advance(10_000).is_empty());
        assert_eq!(p.offset_m("W1"), Some(0.0));
    }

    #[test]
    fn stuck_workpiece_stays() {
        let mut p = plant();
        p.add_workpiece(Workpiece {
            id: "W1".into(),
            location: Location::Belt { station: "conveyor1".into(), offset_um: 300_000 },
            held: false,
            stuck: false,
            cleared_for_processing: Some(true),
        });
        p.inject_fault(FaultSpec { kind: FaultKind::StuckWorkpiece, target: "W1".into(), at_ms: 0 }).unwrap();
        p.apply_actuation(&run("forward", 10)).unwrap();
        p.advance(10_000);
        assert_eq!(p.offset_m("W1"), Some(0.3));
        assert!(!p.stations["conveyor1"].ready_sensor);
        assert!(p.stations["conveyor1"].overdue);
    }

    #[test]
    fn run_sets_state_and_timer_and_auto_stops() {
        let mut p = plant();
        let changes = p.apply_actuation(&run("forward", 10)).unwrap();
        assert_eq!(p.stations["conveyor1"].belt_state, BeltState::Forward);
        assert_eq!(p.stations["conveyor1"].belt_timer_ms, 10_000);
        assert_eq!(changes[0].new_value, "forward".into());
        let changes = p.advance(10_000);
        let stop = changes.iter().find(|c| c.address == "conveyor1.C1.state").unwrap();
        assert_eq!(stop.at, 10_000);
        assert_eq!(p.stations["conveyor1"].belt_state, BeltState::Stopped);
    }

    #[test]
    fn pass_changes_nothing() {
        let mut p = plant();
        let before = p.clone();
        assert!(p.apply_actuation(&call("pass", vec![])).unwrap().is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn holder_needs_a_ready_workpiece() {
        let mut p = plant();
        let before = p.clone();
        assert_eq!(
            p.apply_actuation(&call("activate_material_holder", vec![])),
            Err(PlantError::NoWorkpieceAtReadyPosition("conveyor1".into()))
        );
        assert_eq!(p, before);
        p.spawn_workpiece("conveyor1", "W1").unwrap();
        p.apply_actuation(&run("forward", 10)).unwrap();
        p.advance(4_800);
        p.apply_actuation(&call("activate_material_holder", vec![])).unwrap();
        assert!(p.workpieces["W1"].held);
        assert_eq!(p.offset_m("W1"), Some(1.0));
        p.apply_actuation(&run("backward", 10)).unwrap();
        p.advance(3_000);
        assert_eq!(p.offset_m("W1"), Some(1.0));
        p.apply_actuation(&call("deactivate_material_holder", vec![])).unwrap();
        p.advance(1_000);
        assert_eq!(p.offset_m("W1"), Some(0.8));
    }

    #[test]
    fn entrance_must_be_free() {
        let mut p = plant();
        p.spawn_workpiece("conveyor1", "W1").unwrap();
        assert_eq!(p.spawn_workpiece("conveyor1", "W2"), Err(PlantError::EntranceOccupied("conveyor1".into())));
        let snapshot = p.clone();
        assert!(p.advance(0).is_empty());
        assert_eq!(p, snapshot);
    }

    #[test]
    fn fault_in_the_past_is_rejected() {
        let mut p = plant();
        p.advance(1_000);
        p.add_workpiece(Workpiece::incoming("W1", None));
        assert_eq!(
            p.inject_fault(FaultSpec { kind: FaultKind::StuckWorkpiece, target: "W1".into(), at_ms: 500 }),
            Err(PlantError::InvalidTime { at: 500, now: 1_000 })
        );
        assert_eq!(
            p.inject_fault(FaultSpec { kind: FaultKind::StuckWorkpiece, target: "W9".into(), at_ms: 2_000 }),
            Err(PlantError::UnknownTarget("W9".into()))
        );
    }

    #[test]
    fn dropout_pins_ready_sensor_false() {
        let mut p = plant();
        p.spawn_workpiece("conveyor1", "W1").unwrap();
        p.inject_fault(FaultSpec { kind: FaultKind::SensorDropout, target: "conveyor1.BG51".into(), at_ms: 1_000 })
            .unwrap();
        p.apply_actuation(&run("forward", 10)).unwrap();
        p.advance(8_000);
        assert_eq!(p.offset_m("W1"), Some(1.0));
        assert_eq!(p.read_signals()["conveyor1.BG51.detected"], false.into());
        let changes = p
            .inject_fault(FaultSpec { kind: FaultKind::Clear, target: "conveyor1.BG51".into(), at_ms: 8_000 })
            .unwrap();
        assert!(changes.iter().any(|c| c.address == "conveyor1.BG51.detected"));
        // the watchdog had fired while the sensor was dark; a late arrival resets it
        assert!(changes.iter().any(|c| c.address == "conveyor1.C1.overdue" && c.new_value == false.into()));
    }

    #[test]
    fn rfid_check_follows_clearance() {
        let mut p = plant();
        p.add_workpiece(Workpiece::incoming("W1", Some(true)));
        p.spawn_workpiece("conveyor1", "W1").unwrap();
        p.apply_actuation(&run("forward", 10)).unwrap();
        p.advance(5_000);
        let changes = p.apply_actuation(&call("rfid_read", vec![])).unwrap();
        assert_eq!(changes[0].new_value, "W1".into());
        let changes = p.advance(1_000);
        assert!(changes.iter().any(|c| c.address == "conveyor1.TF81.check" && c.new_value == "ok".into()));
    }

    #[test]
    fn agv_round_trip() {
        let mut p = plant();
        p.add_station(ConveyorStation::new("conveyor2"));
        p.add_agv(AgvUnit::at("agv1", "conveyor1"));
        p.spawn_workpiece("conveyor1", "W1").unwrap();
        p.apply_actuation(&run("forward", 6)).unwrap();
        p.advance(6_000);
        let (info, _) = p.hand_over("conveyor1").unwrap();
        assert_eq!(info, HandoverInfo { workpiece: "W1".into(), next_agent: "op_next".into() });
        let agv = |s: &str, args| Invocation::new(s, args).issued("op_agv", 0, Some("agv1"));
        p.apply_actuation(&agv("load_workpiece", vec![])).unwrap();
        assert_eq!(p.agvs["agv1"].cargo.as_deref(), Some("W1"));
        p.apply_actuation(&agv("move_to", vec![ArgValue::Text("conveyor2".into())])).unwrap();
        assert!(!p.is_idle());
        let changes = p.advance(8_000);
        assert!(changes.iter().any(|c| c.address == "agv1.location" && c.new_value == "conveyor2".into()));
        p.apply_actuation(&agv("unload_workpiece", vec![])).unwrap();
        assert!(p.stations["conveyor2"].entrance_sensor);
        assert_eq!(p.workpieces.len(), 1);
    }
}
