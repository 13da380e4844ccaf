//! Per-unit network model and a reader for MATPOWER-style case files.
//!
//! Accepted columns (1-based, as in the MATPOWER case format):
//!
//! * `mpc.bus`: `BUS_I TYPE PD QD GS BS AREA VM VA BASE_KV ZONE VMAX VMIN`
//! * `mpc.gen`: `BUS PG QG QMAX QMIN VG MBASE STATUS PMAX PMIN ...`
//! * `mpc.branch`: `F_BUS T_BUS BR_R BR_X BR_B RATE_A RATE_B RATE_C TAP SHIFT STATUS [ANGMIN ANGMAX]`
//! * `mpc.gencost`: `2 STARTUP SHUTDOWN N c(N-1) ... c0` with `N <= 3`
//!
//! Line charging, tap ratios, phase shifters and bus shunts are read but
//! dropped (a warning is recorded for each nonzero value), because the flow
//! equations used throughout this crate model a branch by its series
//! admittance only.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Version tag written into the canonical JSON form of a [`Network`].
pub const NETWORK_SCHEMA_VERSION: u32 = 1;

/// Angle-difference bound used when a branch carries no limit.
pub const UNLIMITED_ANGLE: f64 = 2.0 * PI;

#[derive(Debug, Error, PartialEq)]
pub enum CaseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("missing table `mpc.{0}`")]
    MissingTable(&'static str),
    #[error("table `mpc.{table}` row {row}: expected at least {expected} columns, found {found}")]
    ShortRow { table: &'static str, row: usize, expected: usize, found: usize },
    #[error("{table} row {row} references unknown bus {bus}")]
    UnknownBus { table: &'static str, row: usize, bus: i64 },
    #[error("no reference bus (type 3) in bus table")]
    NoReferenceBus,
    #[error("network graph is disconnected: bus {0} is unreachable from the reference bus")]
    Disconnected(i64),
    #[error("baseMVA must be positive, got {0}")]
    NonPositiveBase(f64),
    #[error("gencost row {row}: {message}")]
    UnsupportedCost { row: usize, message: String },
    #[error("branch row {row} has zero series impedance")]
    ZeroImpedance { row: usize },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("network json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// Bus number in the source case file.
    pub id: i64,
    pub v_min: f64,
    pub v_max: f64,
    pub base_kv: f64,
    pub is_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// Internal bus index.
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Polynomial cost `[c2, c1, c0]` in $/MW²h, $/MWh, $/h.
    pub cost: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub g: f64,
    pub b: f64,
    /// Apparent-power rating in p.u.; `None` means unlimited.
    pub s_max: Option<f64>,
    pub theta_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: usize,
    pub p0: f64,
    pub q0: f64,
}

/// Immutable per-unit network. Element references use dense internal bus
/// indices `0..buses.len()`; [`Bus::id`] keeps the original numbering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub schema_version: u32,
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
    pub loads: Vec<Load>,
}

/// One invariant breach found by [`Network::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub entity: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.message)
    }
}

impl Network {
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    pub fn n_load(&self) -> usize {
        self.loads.len()
    }

    /// Internal index of the reference bus (the first flagged one).
    pub fn reference_bus(&self) -> usize {
        self.buses.iter().position(|b| b.is_reference).unwrap_or(0)
    }

    /// Internal index of a bus given its original case-file number.
    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn nominal_load(&self) -> (Vec<f64>, Vec<f64>) {
        (self.loads.iter().map(|l| l.p0).collect(), self.loads.iter().map(|l| l.q0).collect())
    }

    /// Every invariant breach; empty iff the network is valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut diag = |entity: String, message: String| out.push(Diagnostic { entity, message });
        let n = self.buses.len();

        if !(self.base_mva > 0.0) || !self.base_mva.is_finite() {
            diag("network".into(), format!("base_mva must be positive, got {}", self.base_mva));
        }
        if n == 0 {
            diag("network".into(), "no buses".into());
        }
        for bus in &self.buses {
            let name = format!("bus {}", bus.id);
            if !(bus.v_min > 0.0) {
                diag(name.clone(), format!("v_min must be positive, got {}", bus.v_min));
            }
            if !(bus.v_min <= bus.v_max) {
                diag(name.clone(), format!("bound order violated: v_min {} > v_max {}", bus.v_min, bus.v_max));
            }
            if !(bus.base_kv > 0.0) {
                diag(name, format!("base_kv must be positive, got {}", bus.base_kv));
            }
        }
        let refs = self.buses.iter().filter(|b| b.is_reference).count();
        if refs != 1 {
            diag("network".into(), format!("expected exactly one reference bus, found {refs}"));
        }
        for (k, gen) in self.generators.iter().enumerate() {
            let name = format!("generator {k}");
            if gen.bus >= n {
                diag(name.clone(), format!("references missing bus index {}", gen.bus));
            }
            if !(gen.p_min <= gen.p_max) {
                diag(name.clone(), format!("p_min {} > p_max {}", gen.p_min, gen.p_max));
            }
            if !(gen.q_min <= gen.q_max) {
                diag(name.clone(), format!("q_min {} > q_max {}", gen.q_min, gen.q_max));
            }
            if !(gen.cost[0] >= 0.0) {
                diag(name.clone(), format!("quadratic cost c2 must be >= 0, got {}", gen.cost[0]));
            }
            if gen.cost.iter().any(|c| !c.is_finite()) {
                diag(name, "non-finite cost coefficient".into());
            }
        }
        for (k, br) in self.branches.iter().enumerate() {
            let name = format!("branch {k}");
            if br.from_bus >= n || br.to_bus >= n {
                diag(name.clone(), format!("references missing bus index {}-{}", br.from_bus, br.to_bus));
            }
            if br.from_bus == br.to_bus {
                diag(name.clone(), "from_bus equals to_bus".into());
            }
            if let Some(s) = br.s_max {
                if !(s > 0.0) {
                    diag(name.clone(), format!("s_max must be positive, got {s}"));
                }
            }
            if !(br.theta_delta > 0.0) {
                diag(name.clone(), format!("theta_delta must be positive, got {}", br.theta_delta));
            }
            if !br.g.is_finite() || !br.b.is_finite() {
                diag(name, "non-finite admittance".into());
            }
        }
        for (k, load) in self.loads.iter().enumerate() {
            let name = format!("load {k}");
            if load.bus >= n {
                diag(name.clone(), format!("references missing bus index {}", load.bus));
            }
            if !(load.p0 >= 0.0) {
                diag(name, format!("p0 must be >= 0, got {}", load.p0));
            }
        }
        if n > 0 && self.all_refs_in_range() {
            if let Some(k) = self.unreachable_bus() {
                diag(
                    format!("bus {}", self.buses[k].id),
                    "unreachable from the reference bus (graph disconnected)".into(),
                );
            }
        }
        out
    }

    fn all_refs_in_range(&self) -> bool {
        let n = self.buses.len();
        self.branches.iter().all(|b| b.from_bus < n && b.to_bus < n)
    }

    /// First bus not reachable from the reference bus, if any.
    fn unreachable_bus(&self) -> Option<usize> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            adj[br.from_bus].push(br.to_bus);
            adj[br.to_bus].push(br.from_bus);
        }
        let mut seen = vec![false; n];
        let start = self.reference_bus();
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.iter().position(|s| !s)
    }

    /// Canonical JSON serialization.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    /// Parses and validates the canonical JSON serialization.
    pub fn from_json(text: &str) -> Result<Network, CaseError> {
        let net: Network = serde_json::from_str(text).map_err(|e| CaseError::Json(e.to_string()))?;
        if net.schema_version != NETWORK_SCHEMA_VERSION {
            return Err(CaseError::Json(format!("unsupported schema_version {}", net.schema_version)));
        }
        let diags = net.validate();
        if let Some(d) = diags.first() {
            return Err(CaseError::Invalid(d.to_string()));
        }
        Ok(net)
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn case_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("network serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Result of reading a case file: the network plus non-fatal warnings about
/// data that was dropped.
#[derive(Debug, Clone)]
pub struct ParsedCase {
    pub network: Network,
    pub warnings: Vec<String>,
}

/// Parses a MATPOWER-dialect case file into a validated per-unit network.
pub fn parse_case(text: &str) -> Result<Network, CaseError> {
    let parsed = parse_case_with_warnings(text)?;
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    Ok(parsed.network)
}

pub fn parse_case_with_warnings(text: &str) -> Result<ParsedCase, CaseError> {
    let raw = RawCase::read(text)?;
    raw.into_network()
}

/// Series admittance `(g, b)` of an impedance `r + jx`.
pub fn series_admittance(r: f64, x: f64) -> (f64, f64) {
    let z2 = r * r + x * x;
    (r / z2, -x / z2)
}

#[derive(Debug, Default)]
struct RawCase {
    name: String,
    base_mva: Option<f64>,
    tables: HashMap<String, Vec<Vec<f64>>>,
}

impl RawCase {
    fn read(text: &str) -> Result<RawCase, CaseError> {
        let mut case = RawCase::default();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((idx, line)) = lines.next() {
            let lineno = idx + 1;
            let body = strip_comment(line);
            let trimmed = body.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix("function") {
                if let Some((_, name)) = rest.split_once('=') {
                    case.name = name.trim().trim_end_matches(';').trim().to_string();
                }
                continue;
            }
            let Some(rest) = trimmed.strip_prefix("mpc.") else {
                return Err(syntax(lineno, indent_of(line), "expected `mpc.<field> = ...`"));
            };
            let Some((field, value)) = rest.split_once('=') else {
                return Err(syntax(lineno, indent_of(line) + 4, "missing `=` in assignment"));
            };
            let field = field.trim().to_string();
            let value_col = line.find('=').map(|c| c + 2).unwrap_or(1);
            let value = value.trim();
            if let Some(rest) = value.strip_prefix('[') {
                let mut rows = Vec::new();
                let mut pending = Vec::new();
                let mut chunk = rest.to_string();
                let mut chunk_line = lineno;
                let mut chunk_col = value_col + 1;
                loop {
                    let closed = chunk.find(']');
                    let content = match closed {
                        Some(pos) => &chunk[..pos],
                        None => chunk.as_str(),
                    };
                    parse_matrix_text(content, chunk_line, chunk_col, &mut pending, &mut rows)?;
                    if closed.is_some() {
                        break;
                    }
                    match lines.next() {
                        Some((i, l)) => {
                            chunk = strip_comment(l).to_string();
                            chunk_line = i + 1;
                            chunk_col = 1;
                        }
                        None => return Err(syntax(lineno, value_col, "unterminated matrix (missing `]`)")),
                    }
                }
                if !pending.is_empty() {
                    rows.push(std::mem::take(&mut pending));
                }
                case.tables.insert(field, rows);
            } else if value.starts_with('{') {
                // Cell arrays (bus names etc.) carry nothing we model.
                let mut closed = value.contains('}');
                while !closed {
                    match lines.next() {
                        Some((_, l)) => closed = strip_comment(l).contains('}'),
                        None => return Err(syntax(lineno, value_col, "unterminated cell array")),
                    }
                }
            } else if field == "baseMVA" {
                let num = value.trim_end_matches(';').trim();
                let base =
                    num.parse::<f64>().map_err(|_| syntax(lineno, value_col, &format!("invalid number `{num}`")))?;
                case.base_mva = Some(base);
            }
        }
        Ok(case)
    }

    fn table(&self, name: &'static str) -> Result<&[Vec<f64>], CaseError> {
        self.tables.get(name).map(|t| t.as_slice()).ok_or(CaseError::MissingTable(name))
    }

    fn into_network(self) -> Result<ParsedCase, CaseError> {
        let base = self.base_mva.ok_or_else(|| CaseError::Syntax {
            line: 1,
            column: 1,
            message: "missing `mpc.baseMVA`".into(),
        })?;
        if !(base > 0.0) {
            return Err(CaseError::NonPositiveBase(base));
        }
        let mut warnings = Vec::new();

        let bus_rows = self.table("bus")?;
        let mut buses = Vec::with_capacity(bus_rows.len());
        let mut loads = Vec::new();
        let mut index_of = HashMap::new();
        let mut have_ref = false;
        for (r, row) in bus_rows.iter().enumerate() {
            require_cols("bus", r, row, 13)?;
            let id = row[0] as i64;
            let kind = row[1] as i64;
            if kind == 4 {
                warnings.push(format!("bus {id} is isolated (type 4) and was dropped"));
                continue;
            }
            let is_reference = kind == 3 && !have_ref;
            have_ref |= is_reference;
            if row[4] != 0.0 || row[5] != 0.0 {
                warnings.push(format!("bus {id}: shunt (GS={}, BS={}) ignored", row[4], row[5]));
            }
            let mut base_kv = row[9];
            if !(base_kv > 0.0) {
                warnings.push(format!("bus {id}: baseKV {base_kv} not positive, using 1.0 kV"));
                base_kv = 1.0;
            }
            let idx = buses.len();
            index_of.insert(id, idx);
            buses.push(Bus { id, v_min: row[12], v_max: row[11], base_kv, is_reference });
            if row[2] != 0.0 || row[3] != 0.0 {
                loads.push(Load { bus: idx, p0: row[2] / base, q0: row[3] / base });
            }
        }
        if !have_ref {
            return Err(CaseError::NoReferenceBus);
        }
        let lookup = |table: &'static str, row: usize, id: f64| {
            index_of.get(&(id as i64)).copied().ok_or(CaseError::UnknownBus { table, row, bus: id as i64 })
        };

        let gen_rows = self.table("gen")?;
        let cost_rows = self.table("gencost")?;
        if cost_rows.len() < gen_rows.len() {
            return Err(CaseError::UnsupportedCost {
                row: cost_rows.len(),
                message: format!("{} gencost rows for {} generators", cost_rows.len(), gen_rows.len()),
            });
        }
        let mut generators = Vec::new();
        for (r, row) in gen_rows.iter().enumerate() {
            require_cols("gen", r, row, 10)?;
            if row[7] <= 0.0 {
                continue;
            }
            let bus = lookup("gen", r, row[0])?;
            let cost = polynomial_cost(r, &cost_rows[r])?;
            generators.push(Generator {
                bus,
                p_min: row[9] / base,
                p_max: row[8] / base,
                q_min: row[4] / base,
                q_max: row[3] / base,
                cost,
            });
        }

        let branch_rows = self.table("branch")?;
        let mut branches = Vec::new();
        for (r, row) in branch_rows.iter().enumerate() {
            require_cols("branch", r, row, 11)?;
            if row[10] <= 0.0 {
                continue;
            }
            let from_bus = lookup("branch", r, row[0])?;
            let to_bus = lookup("branch", r, row[1])?;
            let (res, react) = (row[2], row[3]);
            if res == 0.0 && react == 0.0 {
                return Err(CaseError::ZeroImpedance { row: r });
            }
            if row[4] != 0.0 {
                warnings.push(format!("branch row {r}: line charging b={} ignored", row[4]));
            }
            if row[8] != 0.0 && row[8] != 1.0 {
                warnings.push(format!("branch row {r}: tap ratio {} ignored", row[8]));
            }
            if row[9] != 0.0 {
                warnings.push(format!("branch row {r}: phase shift {} ignored", row[9]));
            }
            let (g, b) = series_admittance(res, react);
            let s_max = (row[5] > 0.0).then(|| row[5] / base);
            let theta_delta = if row.len() >= 13 { angle_limit(row[11], row[12]) } else { UNLIMITED_ANGLE };
            branches.push(Branch { from_bus, to_bus, g, b, s_max, theta_delta });
        }

        let network = Network {
            schema_version: NETWORK_SCHEMA_VERSION,
            name: self.name,
            base_mva: base,
            buses,
            generators,
            branches,
            loads,
        };
        if let Some(k) = network.unreachable_bus() {
            return Err(CaseError::Disconnected(network.buses[k].id));
        }
        if let Some(d) = network.validate().first() {
            return Err(CaseError::Invalid(d.to_string()));
        }
        Ok(ParsedCase { network, warnings })
    }
}

/// Symmetric angle-difference bound in radians from ANGMIN/ANGMAX degrees.
fn angle_limit(angmin: f64, angmax: f64) -> f64 {
    let lo = if angmin <= -360.0 || angmin == 0.0 { 360.0 } else { -angmin };
    let hi = if angmax >= 360.0 || angmax == 0.0 { 360.0 } else { angmax };
    let deg = lo.min(hi);
    if deg >= 360.0 || deg <= 0.0 {
        UNLIMITED_ANGLE
    } else {
        deg.to_radians()
    }
}

fn polynomial_cost(row_idx: usize, row: &[f64]) -> Result<[f64; 3], CaseError> {
    let err = |message: String| CaseError::UnsupportedCost { row: row_idx, message };
    if row.len() < 4 {
        return Err(err("expected at least 4 columns".into()));
    }
    match row[0] as i64 {
        2 => {}
        1 => return Err(err("piecewise-linear cost tables are not supported".into())),
        m => return Err(err(format!("unknown cost model {m}"))),
    }
    let n = row[3] as usize;
    if n > 3 {
        return Err(err(format!("polynomial degree {} exceeds 2", n.saturating_sub(1))));
    }
    if row.len() < 4 + n {
        return Err(err(format!("expected {n} coefficients")));
    }
    let coeffs = &row[4..4 + n];
    let mut cost = [0.0; 3];
    for (k, c) in coeffs.iter().rev().enumerate() {
        cost[2 - k] = *c;
    }
    Ok(cost)
}

fn require_cols(table: &'static str, row: usize, values: &[f64], expected: usize) -> Result<(), CaseError> {
    if values.len() < expected {
        return Err(CaseError::ShortRow { table, row, expected, found: values.len() });
    }
    Ok(())
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len() + 1
}

fn syntax(line: usize, column: usize, message: &str) -> CaseError {
    CaseError::Syntax { line, column, message: message.to_string() }
}

/// Splits matrix text into numbers; `;` and line ends terminate rows.
fn parse_matrix_text(
    content: &str,
    line: usize,
    col_offset: usize,
    pending: &mut Vec<f64>,
    rows: &mut Vec<Vec<f64>>,
) -> Result<(), CaseError> {
    let bytes = content.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c == b';' {
            if !pending.is_empty() {
                rows.push(std::mem::take(pending));
            }
            i += 1;
        } else if c.is_ascii_whitespace() || c == b',' {
            i += 1;
        } else {
            let start = i;
            while i < bytes.len() && !(bytes[i].is_ascii_whitespace() || bytes[i] == b',' || bytes[i] == b';') {
                i += 1;
            }
            let tok = &content[start..i];
            let v = tok.parse::<f64>().map_err(|_| CaseError::Syntax {
                line,
                column: col_offset + start,
                message: format!("invalid number `{tok}`"),
            })?;
            pending.push(v);
        }
    }
    // A newline also ends a row.
    if !pending.is_empty() {
        rows.push(std::mem::take(pending));
    }
    Ok(())
}
