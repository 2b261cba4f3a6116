//! Architecture knobs of the dynamic encoder.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, DtnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellKind {
    Gmc,
    Lmc,
    Amc,
    Cpc,
    Cac,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellDomain {
    Spatial,
    Channel,
}

impl CellKind {
    pub const ALL: [CellKind; 5] = [
        CellKind::Gmc,
        CellKind::Lmc,
        CellKind::Amc,
        CellKind::Cpc,
        CellKind::Cac,
    ];

    pub fn domain(self) -> CellDomain {
        match self {
            CellKind::Gmc | CellKind::Lmc | CellKind::Amc => CellDomain::Spatial,
            CellKind::Cpc | CellKind::Cac => CellDomain::Channel,
        }
    }

    /// Lowercase tag used in parameter names.
    pub fn tag(self) -> &'static str {
        match self {
            CellKind::Gmc => "gmc",
            CellKind::Lmc => "lmc",
            CellKind::Amc => "amc",
            CellKind::Cpc => "cpc",
            CellKind::Cac => "cac",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag().to_ascii_uppercase())
    }
}

impl FromStr for CellKind {
    type Err = DtnError;

    fn from_str(s: &str) -> Result<Self> {
        CellKind::ALL
            .into_iter()
            .find(|k| k.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| config_err(format!("unknown cell kind {s:?}")))
    }
}

/// Parses `"GMC,LMC"`; `"none"` or the empty string is the empty set.
pub fn parse_cells(s: &str) -> Result<Vec<CellKind>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    let mut out: Vec<CellKind> = Vec::new();
    for part in s.split(',') {
        let k: CellKind = part.parse()?;
        if out.contains(&k) {
            return Err(config_err(format!("cell {k} listed twice in {s:?}")));
        }
        out.push(k);
    }
    Ok(out)
}

pub fn format_cells(cells: &[CellKind]) -> String {
    if cells.is_empty() {
        return "none".into();
    }
    cells.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = DtnError;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(config_err(format!(
                        concat!("unknown ", stringify!($name), " {:?}; expected one of {}"),
                        s,
                        [$($text),+].join("|")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(
    /// Order of the routed spatial and channel blocks inside a layer.
    Arrangement { SThenC => "s_then_c", CThenS => "c_then_s", Parallel => "parallel" }
);

keyword_enum!(
    /// Whether spatial and channel cells get separate routing spaces.
    Grouping { Grouped => "grouped", Ungrouped => "ungrouped" }
);

keyword_enum!(
    RouterVariant {
        Scjr => "scjr",
        SpatialOnly => "spatial_only",
        ChannelOnly => "channel_only",
        StaticSum => "static_sum",
    }
);

/// Soft convex mixing or Gumbel-softmax one-hot selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RoutingType {
    Soft,
    Hard { temperature: f64 },
}

impl RoutingType {
    pub fn validate(self) -> Result<()> {
        match self {
            RoutingType::Hard { temperature } if !(temperature > 0.0) => Err(config_err(format!(
                "routing temperature must be positive, got {temperature}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub spatial_cells: Vec<CellKind>,
    pub channel_cells: Vec<CellKind>,
    pub arrangement: Arrangement,
    pub grouping: Grouping,
    pub router: RouterVariant,
    pub routing: RoutingType,
    /// Explicit two-set partition of the cells, overriding the domain split.
    pub custom_groups: Option<(Vec<CellKind>, Vec<CellKind>)>,
}

impl Default for EncoderConfig {
    /// Desk-scale configuration: every cell, grouped, SCJR soft routing.
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            grid_h: 7,
            grid_w: 7,
            spatial_cells: vec![CellKind::Gmc, CellKind::Lmc, CellKind::Amc],
            channel_cells: vec![CellKind::Cpc, CellKind::Cac],
            arrangement: Arrangement::SThenC,
            grouping: Grouping::Grouped,
            router: RouterVariant::Scjr,
            routing: RoutingType::Soft,
            custom_groups: None,
        }
    }
}

/// One routing space: the cells a single router mixes.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub cells: Vec<CellKind>,
}

impl EncoderConfig {
    /// Full-size settings (3 layers, d_model 512, 8 heads).
    pub fn full_scale() -> Self {
        Self {
            layers: 3,
            d_model: 512,
            heads: 8,
            ..Self::default()
        }
    }

    pub fn grid_positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(config_err(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(config_err("grid must be non-empty"));
        }
        self.routing.validate()?;
        for (name, cells, want) in [
            ("spatial_cells", &self.spatial_cells, CellDomain::Spatial),
            ("channel_cells", &self.channel_cells, CellDomain::Channel),
        ] {
            if let Some(bad) = cells.iter().find(|c| c.domain() != want) {
                return Err(config_err(format!("{name} may not contain {bad}")));
            }
        }
        if let Some((a, b)) = &self.custom_groups {
            if a.is_empty() || b.is_empty() {
                return Err(config_err("custom_groups needs two non-empty sets"));
            }
            if a.iter().any(|c| b.contains(c)) {
                return Err(config_err("custom_groups sets must be disjoint"));
            }
        } else if self.spatial_cells.is_empty() && self.channel_cells.is_empty() {
            return Err(config_err("at least one cell is required"));
        }
        Ok(())
    }

    /// Routing spaces in execution order.
    pub fn groups(&self) -> Vec<GroupSpec> {
        if let Some((a, b)) = &self.custom_groups {
            return vec![
                GroupSpec {
                    name: "group0".into(),
                    cells: a.clone(),
                },
                GroupSpec {
                    name: "group1".into(),
                    cells: b.clone(),
                },
            ];
        }
        if self.grouping == Grouping::Ungrouped {
            let mut cells = self.spatial_cells.clone();
            cells.extend(&self.channel_cells);
            return vec![GroupSpec {
                name: "joint".into(),
                cells,
            }];
        }
        let spatial = GroupSpec {
            name: "spatial".into(),
            cells: self.spatial_cells.clone(),
        };
        let channel = GroupSpec {
            name: "channel".into(),
            cells: self.channel_cells.clone(),
        };
        let ordered = match self.arrangement {
            Arrangement::CThenS => [channel, spatial],
            _ => [spatial, channel],
        };
        ordered.into_iter().filter(|g| !g.cells.is_empty()).collect()
    }
}
