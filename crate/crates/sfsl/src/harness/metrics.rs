//! Per-round measurements: bytes moved per stage and role, wall time per
//! stage, dropout events, clipping, and index set cardinalities. Written
//! out as long-format CSV rows plus a JSON summary per experiment.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::wire::Scheme;
use crate::ClientId;

/// Coarse round stages used for metrics bucketing.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum StageId {
    Config,
    Psu,
    Submodel,
    Update,
}

impl StageId {
    pub const ALL: [StageId; 4] = [
        StageId::Config,
        StageId::Psu,
        StageId::Submodel,
        StageId::Update,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageId::Config => "config",
            StageId::Psu => "psu",
            StageId::Submodel => "submodel",
            StageId::Update => "update",
        }
    }
}

/// Bytes moved in one direction pair, from the server's point of view.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Traffic {
    pub sent: u64,
    pub received: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.sent + self.received
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RoundMetrics {
    pub round_id: u64,
    pub scheme: Option<Scheme>,
    pub selected: usize,
    /// Server-side bytes per stage.
    pub server: BTreeMap<StageId, Traffic>,
    /// Per-client bytes per stage, from that client's point of view
    /// (sent = client-to-server).
    pub clients: BTreeMap<ClientId, BTreeMap<StageId, Traffic>>,
    pub wall_ms: BTreeMap<StageId, f64>,
    pub dropouts: Vec<(ClientId, StageId)>,
    pub union_size: usize,
    pub perturbed_sizes: BTreeMap<ClientId, u32>,
    pub clip_count: u64,
    pub aborted: Option<String>,
}

impl RoundMetrics {
    pub fn new(round_id: u64, scheme: Scheme, selected: usize) -> Self {
        Self {
            round_id,
            scheme: Some(scheme),
            selected,
            ..Self::default()
        }
    }

    pub fn record_server_sent(&mut self, stage: StageId, to: ClientId, bytes: u64) {
        self.server.entry(stage).or_default().sent += bytes;
        self.clients
            .entry(to)
            .or_default()
            .entry(stage)
            .or_default()
            .received += bytes;
    }

    pub fn record_server_received(&mut self, stage: StageId, from: ClientId, bytes: u64) {
        self.server.entry(stage).or_default().received += bytes;
        self.clients
            .entry(from)
            .or_default()
            .entry(stage)
            .or_default()
            .sent += bytes;
    }

    /// Lossless-transport invariant: per stage, what the server received
    /// is exactly what clients sent, and vice versa.
    pub fn check_conservation(&self) -> Result<(), String> {
        for stage in StageId::ALL {
            let server = self.server.get(&stage).copied().unwrap_or_default();
            let mut client_sent = 0u64;
            let mut client_recv = 0u64;
            for per_stage in self.clients.values() {
                let t = per_stage.get(&stage).copied().unwrap_or_default();
                client_sent += t.sent;
                client_recv += t.received;
            }
            if server.received != client_sent || server.sent != client_recv {
                return Err(format!(
                    "stage {}: server {:?} vs clients sent={client_sent} recv={client_recv}",
                    stage.name(),
                    server
                ));
            }
        }
        Ok(())
    }

    /// Total bytes (both directions) one client moved this round.
    pub fn client_total_bytes(&self, client: ClientId) -> u64 {
        self.clients
            .get(&client)
            .map(|m| m.values().map(Traffic::total).sum())
            .unwrap_or(0)
    }

    /// Total bytes one client moved in the given stage.
    pub fn client_stage_bytes(&self, client: ClientId, stage: StageId) -> u64 {
        self.clients
            .get(&client)
            .and_then(|m| m.get(&stage))
            .map(Traffic::total)
            .unwrap_or(0)
    }

    /// Mean per-client total bytes over participating clients.
    pub fn mean_client_bytes(&self) -> f64 {
        if self.clients.is_empty() {
            return 0.0;
        }
        let total: u64 = self
            .clients
            .keys()
            .map(|&c| self.client_total_bytes(c))
            .sum();
        total as f64 / self.clients.len() as f64
    }

    /// Mean per-client bytes spent in one stage.
    pub fn mean_client_stage_bytes(&self, stage: StageId) -> f64 {
        if self.clients.is_empty() {
            return 0.0;
        }
        let total: u64 = self
            .clients
            .keys()
            .map(|&c| self.client_stage_bytes(c, stage))
            .sum();
        total as f64 / self.clients.len() as f64
    }
}

pub const CSV_HEADER: &str =
    "round_id,scheme,stage,server_sent_bytes,server_recv_bytes,wall_ms,union_size,dropouts,clips";

/// Appends this round's rows in long format, one row per stage.
pub fn write_csv_rows<W: Write>(w: &mut W, m: &RoundMetrics) -> std::io::Result<()> {
    let scheme = match m.scheme {
        Some(Scheme::Sfsl) => "sfsl",
        Some(Scheme::Sfl) => "sfl",
        None => "-",
    };
    for stage in StageId::ALL {
        let t = m.server.get(&stage).copied().unwrap_or_default();
        let wall = m.wall_ms.get(&stage).copied().unwrap_or(0.0);
        writeln!(
            w,
            "{},{},{},{},{},{:.3},{},{},{}",
            m.round_id,
            scheme,
            stage.name(),
            t.sent,
            t.received,
            wall,
            m.union_size,
            m.dropouts.len(),
            m.clip_count
        )?;
    }
    Ok(())
}

/// Ordinary least squares of y on x; returns (intercept, slope, r_squared).
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    assert!(points.len() >= 2);
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
        syy += (y - mean_y) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (intercept, slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conservation_holds_for_paired_recording() {
        let mut m = RoundMetrics::new(1, Scheme::Sfsl, 2);
        m.record_server_sent(StageId::Config, ClientId(1), 100);
        m.record_server_received(StageId::Config, ClientId(1), 40);
        m.record_server_sent(StageId::Psu, ClientId(2), 7);
        m.check_conservation().unwrap();
        assert_eq!(m.client_total_bytes(ClientId(1)), 140);
        // Tampering breaks it.
        m.server.get_mut(&StageId::Psu).unwrap().sent += 1;
        assert!(m.check_conservation().is_err());
    }

    #[test]
    fn csv_rows_one_per_stage() {
        let mut m = RoundMetrics::new(3, Scheme::Sfl, 4);
        m.record_server_sent(StageId::Update, ClientId(1), 10);
        let mut buf = Vec::new();
        write_csv_rows(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), StageId::ALL.len());
        assert!(text.contains("3,sfl,update,10,0"));
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (1..=5).map(|x| (x as f64, 3.0 + 2.0 * x as f64)).collect();
        let (b, a, r2) = linear_fit(&pts);
        assert!((b - 3.0).abs() < 1e-12);
        assert!((a - 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_fit_detects_noise() {
        let pts = vec![(1.0, 0.0), (2.0, 5.0), (3.0, 0.0), (4.0, 5.0)];
        let (_, _, r2) = linear_fit(&pts);
        assert!(r2 < 0.5);
    }
}
