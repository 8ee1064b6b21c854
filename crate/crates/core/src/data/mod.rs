//! Observed-data panels, identification assumptions, simulation designs and
//! CSV input/output.

mod csv_io;
mod panel;
mod scenario;

pub use csv_io::{read_panel, read_panel_csv, write_panel, write_panel_csv, PanelSchema, Transform};
pub use panel::{ErrorModelSpec, ErrorStructure, Pattern, PatternGroup, ProxyPanel, ProxySpec};
pub use scenario::{
    generate_panel, ErrorDist, ErrorLaw, OutcomeLaw, ProxyLaw, ScenarioConfig, XLaw, ZLaw,
};
