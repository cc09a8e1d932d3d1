//! Scenario files: TOML descriptions of nodes, message types, application
//! scripts, the bus mode and exploration bounds.
//!
//! ```toml
//! name = "minimal"
//! bus = "perfect"            # or "duplicate"
//!
//! [[node]]
//! name = "a"
//! tx_buffers = 1
//! frags = ["f"]
//!
//! [[node]]
//! name = "b"
//! tx_buffers = 1
//!
//! [[app]]
//! name = "sender"
//! node = "a"
//! script = [{ op = "submit", mt = 52, payload = "6869" }]
//!
//! [[message]]
//! id = 52
//! sender = "sender"
//! receivers = ["b"]
//! parts = 1
//! frag = "f"
//! ```
//!
//! Every problem found is reported with the line it was found on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::Deserialize;
use toml::Spanned;

use crate::bus::world::{AppScript, EventKind, PriorityPair, ScriptEvent, System, MASK_BITS};
use crate::bus::BusMode;
use crate::explorer::ExploreConfig;
use crate::types::{
    validate_table, AppId, CanId, MessageType, MessageTypeTable, Payload, TableEntry,
    TableViolation, Topology, FRAME_PAYLOAD,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    #[serde(default)]
    bus: Option<Spanned<String>>,
    #[serde(default = "one")]
    max_duplicates: u8,
    #[serde(default)]
    explore: RawExplore,
    priority: Option<Spanned<RawPriority>>,
    #[serde(default)]
    node: Vec<Spanned<RawNode>>,
    #[serde(default)]
    app: Vec<Spanned<RawApp>>,
    #[serde(default)]
    message: Vec<Spanned<RawMessage>>,
}

fn one() -> u8 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExplore {
    depth: Option<usize>,
    max_states: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPriority {
    high: u32,
    low: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    name: Spanned<String>,
    tx_buffers: Spanned<u32>,
    #[serde(default)]
    frags: Vec<Spanned<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawApp {
    name: Spanned<String>,
    node: Spanned<String>,
    #[serde(default)]
    repeat: bool,
    #[serde(default = "yes")]
    wait_for_status: bool,
    #[serde(default)]
    script: Vec<Spanned<RawEvent>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    op: String,
    mt: Option<u32>,
    payload: Option<String>,
    #[serde(default)]
    after: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMessage {
    id: Spanned<u32>,
    sender: Spanned<String>,
    #[serde(default)]
    receivers: Vec<Spanned<String>>,
    parts: Option<u16>,
    length: Option<usize>,
    frag: Spanned<String>,
}

/// One problem in a scenario file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

/// Every problem found in a scenario file, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostics {
    pub source: String,
    pub items: Vec<Diagnostic>,
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.items.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}:{d}", self.source)?;
        }
        Ok(())
    }
}

impl std::error::Error for Diagnostics {}

/// A loaded and validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub system: System,
    pub depth: Option<usize>,
    pub max_states: Option<usize>,
    /// Fixed message lengths of the types declared with `length`.
    pub fixed_lengths: BTreeMap<MessageType, usize>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, Diagnostics> {
        let source = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Diagnostics {
            source: source.clone(),
            items: vec![Diagnostic {
                line: 0,
                column: 0,
                message: format!("cannot read file: {e}"),
            }],
        })?;
        let default_name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Scenario::parse(&text, &source, &default_name)
    }

    pub fn parse(text: &str, source: &str, default_name: &str) -> Result<Scenario, Diagnostics> {
        let mut b = Builder {
            text,
            items: Vec::new(),
        };
        let raw: RawScenario = match toml::from_str(text) {
            Ok(raw) => raw,
            Err(e) => {
                let span = e.span().unwrap_or(0..0);
                b.error(&span, e.message().to_string());
                return Err(b.finish(source));
            }
        };
        match b.build(raw, default_name) {
            Some(s) if b.items.is_empty() => Ok(s),
            _ => Err(b.finish(source)),
        }
    }

    /// Exploration bounds: scenario values overridden by explicit ones.
    pub fn explore_config(&self, depth: Option<usize>, max_states: Option<usize>) -> ExploreConfig {
        let d = ExploreConfig::default();
        ExploreConfig {
            depth: depth.or(self.depth).unwrap_or(d.depth),
            max_states: max_states.or(self.max_states).unwrap_or(d.max_states),
            paranoid: false,
        }
    }
}

struct Builder<'t> {
    text: &'t str,
    items: Vec<Diagnostic>,
}

impl Builder<'_> {
    fn position(&self, offset: usize) -> (usize, usize) {
        let offset = offset.min(self.text.len());
        let before = &self.text[..offset];
        let line = before.matches('\n').count() + 1;
        let column = before.rfind('\n').map_or(offset, |i| offset - i - 1) + 1;
        (line, column)
    }

    fn error(&mut self, span: &Range<usize>, message: impl Into<String>) {
        let (line, column) = self.position(span.start);
        self.items.push(Diagnostic {
            line,
            column,
            message: message.into(),
        });
    }

    fn finish(mut self, source: &str) -> Diagnostics {
        self.items.sort_by_key(|d| (d.line, d.column));
        Diagnostics {
            source: source.to_string(),
            items: self.items,
        }
    }

    fn build(&mut self, raw: RawScenario, default_name: &str) -> Option<Scenario> {
        let mut topo = Topology::default();
        let mut frag_names: Vec<BTreeMap<String, usize>> = Vec::new();

        let bus = match raw.bus.as_ref().map(|b| (b.get_ref().as_str(), b.span())) {
            None | Some(("perfect", _)) => BusMode::Perfect,
            Some(("duplicate", _)) => BusMode::Duplicate,
            Some((other, span)) => {
                self.error(
                    &span,
                    format!("unknown bus mode `{other}`; expected `perfect` or `duplicate`"),
                );
                BusMode::Perfect
            }
        };

        for node in &raw.node {
            let n = node.get_ref();
            let name = n.name.get_ref();
            if topo.node_by_name(name).is_some() {
                self.error(&n.name.span(), format!("node `{name}` is defined twice"));
                continue;
            }
            let tx = *n.tx_buffers.get_ref();
            if !(1..=255).contains(&tx) {
                self.error(&n.tx_buffers.span(), "tx_buffers must be between 1 and 255");
            }
            let mut seen = BTreeMap::new();
            for (i, f) in n.frags.iter().enumerate() {
                if seen.insert(f.get_ref().clone(), i).is_some() {
                    self.error(
                        &f.span(),
                        format!("fragmentation instance `{}` is defined twice", f.get_ref()),
                    );
                }
            }
            let names: Vec<&str> = n.frags.iter().map(|f| f.get_ref().as_str()).collect();
            topo.add_node(name, tx.clamp(1, 255) as u8, &names);
            frag_names.push(seen);
        }
        if raw.node.is_empty() {
            self.error(&(0..0), "a scenario needs at least one [[node]]");
        }
        if topo.component_count() > MASK_BITS {
            self.error(
                &(0..0),
                format!(
                    "{} components exceed the supported {MASK_BITS}",
                    topo.component_count()
                ),
            );
            return None;
        }

        for app in &raw.app {
            let a = app.get_ref();
            let name = a.name.get_ref();
            if topo.app_by_name(name).is_some() {
                self.error(
                    &a.name.span(),
                    format!("application `{name}` is defined twice"),
                );
                continue;
            }
            match topo.node_by_name(a.node.get_ref()) {
                Some(node) => {
                    topo.add_app(name, node);
                }
                None => {
                    self.error(
                        &a.node.span(),
                        format!("unknown node `{}`", a.node.get_ref()),
                    );
                    topo.add_app(name, usize::MAX);
                }
            }
        }

        // Message types.
        let mut rows = Vec::new();
        let mut row_spans: Vec<(TableEntry, Range<usize>)> = Vec::new();
        let mut fixed_lengths = BTreeMap::new();
        for msg in &raw.message {
            let m = msg.get_ref();
            let Ok(cid) = CanId::new(*m.id.get_ref()) else {
                self.error(
                    &m.id.span(),
                    format!("id {} is outside the 11-bit range 0..=2047", m.id.get_ref()),
                );
                continue;
            };
            let mt = MessageType::new(cid);
            let parts = match (m.parts, m.length) {
                (Some(p), None) => p,
                (None, Some(len)) => {
                    fixed_lengths.insert(mt, len);
                    TableEntry::parts_for_length(len)
                }
                (Some(p), Some(len)) if p == TableEntry::parts_for_length(len) => {
                    fixed_lengths.insert(mt, len);
                    p
                }
                (Some(p), Some(len)) => {
                    self.error(
                        &msg.span(),
                        format!(
                            "length {len} needs {} parts, not {p}",
                            TableEntry::parts_for_length(len)
                        ),
                    );
                    p
                }
                (None, None) => {
                    self.error(&msg.span(), "message type needs `parts` or `length`");
                    continue;
                }
            };
            let Some(sender) = topo.app_by_name(m.sender.get_ref()) else {
                self.error(
                    &m.sender.span(),
                    format!("unknown application `{}`", m.sender.get_ref()),
                );
                continue;
            };
            let sender_node = topo.apps[usize::from(sender.0)].node;
            let mut receivers = BTreeSet::new();
            for r in &m.receivers {
                match topo.node_by_name(r.get_ref()) {
                    Some(node) => {
                        receivers.insert(topo.nodes[node].reassembly);
                    }
                    None => self.error(&r.span(), format!("unknown node `{}`", r.get_ref())),
                }
            }
            let frag_label = m.frag.get_ref();
            let frag = if sender_node == usize::MAX {
                None
            } else if let Some(&i) = frag_names[sender_node].get(frag_label) {
                Some(topo.nodes[sender_node].frags[i])
            } else {
                topo.component_by_name(frag_label)
            };
            let Some(frag) = frag else {
                self.error(
                    &m.frag.span(),
                    format!(
                        "no fragmentation instance `{frag_label}` on the node of `{}`",
                        m.sender.get_ref()
                    ),
                );
                continue;
            };
            let row = TableEntry {
                mt,
                sender,
                receivers,
                parts,
                frag,
            };
            row_spans.push((row.clone(), msg.span()));
            rows.push(row);
        }
        let table = MessageTypeTable::new(rows);
        for v in validate_table(&table, &topo) {
            let span_of = |pick: &dyn Fn(&TableEntry) -> bool, nth: usize| {
                row_spans
                    .iter()
                    .filter(|(row, _)| pick(row))
                    .nth(nth)
                    .map(|(_, span)| span.clone())
            };
            let span = match &v {
                TableViolation::ZeroParts { mt }
                | TableViolation::IdSpaceExceeded { mt, .. }
                | TableViolation::UnknownSender { mt }
                | TableViolation::NotAReassembly { mt, .. }
                | TableViolation::FragNotOnSenderNode { mt, .. } => span_of(&|r| r.mt == *mt, 0),
                TableViolation::Overlap { first, second } if first == second => {
                    span_of(&|r| r.mt == *second, 1)
                }
                TableViolation::Overlap { second, .. } => span_of(&|r| r.mt == *second, 0),
                TableViolation::FragSharedByApps { frag, second, .. } => {
                    span_of(&|r| r.frag == *frag && r.sender == *second, 0)
                }
            }
            .unwrap_or(0..0);
            let text = match &v {
                TableViolation::NotAReassembly { mt, receiver } => format!(
                    "message type {mt} lists `{}` as receiver",
                    topo.component_name(*receiver)
                ),
                TableViolation::FragNotOnSenderNode { mt, frag } => format!(
                    "fragmentation instance `{}` of message type {mt} is not on the sender's node",
                    topo.component_name(*frag)
                ),
                TableViolation::FragSharedByApps {
                    frag,
                    first,
                    second,
                } => format!(
                    "fragmentation instance `{}` serves applications `{}` and `{}`",
                    topo.component_name(*frag),
                    topo.app_name(*first),
                    topo.app_name(*second)
                ),
                other => other.to_string(),
            };
            self.error(&span, text);
        }

        // Scripts.
        let mut scripts = Vec::new();
        for (app_index, app) in raw.app.iter().enumerate() {
            let a = app.get_ref();
            let this = AppId(app_index as u16);
            if a.script.len() > MASK_BITS {
                self.error(
                    &app.span(),
                    format!("scripts hold at most {MASK_BITS} events"),
                );
            }
            let mut events = Vec::new();
            for ev in &a.script {
                if let Some(e) = self.event(ev, this, &topo, &table, &fixed_lengths, &raw.app) {
                    events.push(e);
                }
            }
            scripts.push(AppScript {
                events,
                repeat: a.repeat,
                wait_for_status: a.wait_for_status,
            });
        }

        let priority = raw.priority.as_ref().and_then(|p| {
            let span = p.span();
            let p = p.get_ref();
            let high = self.registered(&table, p.high, &span)?;
            let low = self.registered(&table, p.low, &span)?;
            Some(PriorityPair { high, low })
        });

        if !self.items.is_empty() {
            return None;
        }
        let mut system = System::new(topo, table, scripts);
        system.bus = bus;
        system.max_duplicates = raw.max_duplicates;
        system.priority = priority;
        Some(Scenario {
            name: raw.name.unwrap_or_else(|| default_name.to_string()),
            system,
            depth: raw.explore.depth,
            max_states: raw.explore.max_states,
            fixed_lengths,
        })
    }

    fn registered(
        &mut self,
        table: &MessageTypeTable,
        id: u32,
        span: &Range<usize>,
    ) -> Option<MessageType> {
        let mt = CanId::new(id).ok().map(MessageType::new);
        match mt.filter(|mt| table.entry(*mt).is_ok()) {
            Some(mt) => Some(mt),
            None => {
                self.error(span, format!("message type {id} is not registered"));
                None
            }
        }
    }

    fn event(
        &mut self,
        ev: &Spanned<RawEvent>,
        app: AppId,
        topo: &Topology,
        table: &MessageTypeTable,
        fixed_lengths: &BTreeMap<MessageType, usize>,
        apps: &[Spanned<RawApp>],
    ) -> Option<ScriptEvent> {
        let span = ev.span();
        let e = ev.get_ref();
        let app_name = topo.app_name(app).to_string();
        let owned = |b: &mut Self, id: u32| -> Option<MessageType> {
            let mt = b.registered(table, id, &span)?;
            if table.entry(mt).ok()?.sender != app {
                b.error(
                    &span,
                    format!("message type {id} is not sent by `{app_name}`"),
                );
                return None;
            }
            Some(mt)
        };
        let kind = match e.op.as_str() {
            "submit" => {
                let Some(id) = e.mt else {
                    self.error(&span, "submit needs `mt`");
                    return None;
                };
                let mt = owned(self, id)?;
                let payload = match Payload::from_hex(e.payload.as_deref().unwrap_or("")) {
                    Ok(p) => p,
                    Err(reason) => {
                        self.error(&span, reason);
                        return None;
                    }
                };
                let parts = usize::from(table.entry(mt).ok()?.parts);
                let len = payload.len();
                match fixed_lengths.get(&mt) {
                    Some(&fixed) if fixed != len => {
                        self.error(
                            &span,
                            format!(
                                "payload has {len} bytes; message type {id} has length {fixed}"
                            ),
                        );
                        return None;
                    }
                    None if len > FRAME_PAYLOAD * parts
                        || (parts > 1 && len <= FRAME_PAYLOAD * (parts - 1)) =>
                    {
                        self.error(
                            &span,
                            format!(
                                "payload has {len} bytes; {parts} fragments carry {}..={} bytes",
                                if parts > 1 {
                                    FRAME_PAYLOAD * (parts - 1) + 1
                                } else {
                                    0
                                },
                                FRAME_PAYLOAD * parts
                            ),
                        );
                        return None;
                    }
                    _ => {}
                }
                EventKind::Submit { mt, payload }
            }
            "cancel" => {
                if e.payload.is_some() {
                    self.error(&span, "cancel takes no payload");
                }
                let mt = match e.mt {
                    Some(id) => Some(owned(self, id)?),
                    None => None,
                };
                EventKind::Cancel { mt }
            }
            other => {
                self.error(
                    &span,
                    format!("unknown op `{other}`; expected `submit` or `cancel`"),
                );
                return None;
            }
        };
        let mut after = Vec::new();
        for dep in &e.after {
            let parsed = dep.split_once('#').and_then(|(name, idx)| {
                let other = topo.app_by_name(name)?;
                let idx: u16 = idx.parse().ok()?;
                let len = apps.get(usize::from(other.0))?.get_ref().script.len();
                (usize::from(idx) < len).then_some((other, idx))
            });
            match parsed {
                Some(d) => after.push(d),
                None => self.error(
                    &span,
                    format!("`after` entry `{dep}` names no script event (expected `app#index`)"),
                ),
            }
        }
        Some(ScriptEvent { kind, after })
    }
}
