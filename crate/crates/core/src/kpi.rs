use serde::{Deserialize, Serialize};

/// Number of KPI columns.
pub const K: usize = 13;

/// The monitored KPIs, in column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kpi {
    SpectralEfficiency,
    Rsrp,
    Sinr,
    MimoRank,
    Mcs,
    RbNumber,
    Cqi,
    Rsrq,
    Pmi,
    UeRssi,
    UeBufferStatus,
    PacketDelay,
    Bler,
}

impl Kpi {
    pub const ALL: [Kpi; K] = [
        Kpi::SpectralEfficiency,
        Kpi::Rsrp,
        Kpi::Sinr,
        Kpi::MimoRank,
        Kpi::Mcs,
        Kpi::RbNumber,
        Kpi::Cqi,
        Kpi::Rsrq,
        Kpi::Pmi,
        Kpi::UeRssi,
        Kpi::UeBufferStatus,
        Kpi::PacketDelay,
        Kpi::Bler,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Kpi::SpectralEfficiency => "spectral_efficiency",
            Kpi::Rsrp => "rsrp",
            Kpi::Sinr => "sinr",
            Kpi::MimoRank => "mimo_rank",
            Kpi::Mcs => "mcs",
            Kpi::RbNumber => "rb_number",
            Kpi::Cqi => "cqi",
            Kpi::Rsrq => "rsrq",
            Kpi::Pmi => "pmi",
            Kpi::UeRssi => "ue_rssi",
            Kpi::UeBufferStatus => "ue_buffer_status",
            Kpi::PacketDelay => "packet_delay",
            Kpi::Bler => "bler",
        }
    }

    pub fn from_name(name: &str) -> Option<Kpi> {
        Kpi::ALL.into_iter().find(|k| k.name() == name)
    }

    /// KPIs reported as integers (indices, counts, ranks).
    pub fn is_integer(self) -> bool {
        matches!(
            self,
            Kpi::MimoRank | Kpi::Mcs | Kpi::RbNumber | Kpi::Cqi | Kpi::Pmi
        )
    }
}

impl std::fmt::Display for Kpi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
