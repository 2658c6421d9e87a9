//! Named network sources and the on-disk network bundle
//! (`network.tntp` plus a `network.json` sidecar).

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pathflow_core::network::{generate_manhattan, Network, OdMatrix, Units};

use crate::tntp::{self, NetworkSidecar};
use crate::{Error, Result};

pub const NET_FILE: &str = "network.tntp";
pub const SIDECAR_FILE: &str = "network.json";
pub const SIDECAR_SCHEMA_VERSION: u32 = 1;

/// Where a network comes from on the command line: `siouxfalls`,
/// `grid:RxC`, or a path to a bundle directory or a `.tntp` file.
#[derive(Debug, Clone, PartialEq)]
pub enum NetSource {
    SiouxFalls,
    Grid { rows: usize, cols: usize },
    Path(PathBuf),
}

impl FromStr for NetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("siouxfalls") {
            return Ok(NetSource::SiouxFalls);
        }
        if let Some(dims) = s.strip_prefix("grid:") {
            let (rows, cols) = parse_grid(dims)?;
            return Ok(NetSource::Grid { rows, cols });
        }
        Ok(NetSource::Path(PathBuf::from(s)))
    }
}

/// Parses `RxC`.
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Format(format!("grid size must look like 5x5, got `{s}`"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows: usize = r.trim().parse().map_err(|_| bad())?;
    let cols: usize = c.trim().parse().map_err(|_| bad())?;
    if rows == 0 || cols == 0 {
        return Err(bad());
    }
    Ok((rows, cols))
}

/// A network with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedNetwork {
    pub name: String,
    pub network: Network,
    pub units: Units,
    pub seed: Option<u64>,
}

impl LoadedNetwork {
    pub fn sidecar(&self) -> NetworkSidecar {
        NetworkSidecar {
            schema_version: SIDECAR_SCHEMA_VERSION,
            source: self.name.clone(),
            class_multipliers: self.network.classes().iter().map(|c| c.freeflow_multiplier).collect(),
            units: self.units.clone(),
            seed: self.seed,
            nodes: self.network.node_count(),
            links: self.network.link_count(),
            disabled_links: self.network.disabled_links(),
        }
    }
}

/// The bundled file carries free-flow time in its length column.
pub fn sioux_falls_units() -> Units {
    Units::new("min", "min")
}

pub fn grid_units() -> Units {
    Units::new("km", "h")
}

/// Resolves a source. `multipliers` sets the vehicle classes (empty keeps a
/// bundle's own classes, or a single car class); `seed` only matters for grids.
pub fn load(source: &NetSource, multipliers: &[f64], seed: u64) -> Result<LoadedNetwork> {
    let mults = if multipliers.is_empty() { &[1.0][..] } else { multipliers };
    match source {
        NetSource::SiouxFalls => Ok(LoadedNetwork {
            name: "siouxfalls".into(),
            network: tntp::parse_net(tntp::SIOUX_FALLS_NET, mults)?,
            units: sioux_falls_units(),
            seed: None,
        }),
        NetSource::Grid { rows, cols } => {
            let net = generate_manhattan(*rows, *cols, seed)?;
            Ok(LoadedNetwork {
                name: format!("grid:{rows}x{cols}"),
                network: net.with_classes(tntp::classes_from_multipliers(mults))?,
                units: grid_units(),
                seed: Some(seed),
            })
        }
        NetSource::Path(p) => load_path(p, multipliers),
    }
}

fn load_path(p: &Path, multipliers: &[f64]) -> Result<LoadedNetwork> {
    let (net_file, sidecar_file) = if p.is_dir() {
        (p.join(NET_FILE), p.join(SIDECAR_FILE))
    } else {
        (p.to_path_buf(), p.with_file_name(SIDECAR_FILE))
    };
    let text = fs::read_to_string(&net_file).map_err(|e| Error::io(&net_file, e))?;
    let sidecar: Option<NetworkSidecar> = if sidecar_file.exists() {
        let s = fs::read_to_string(&sidecar_file).map_err(|e| Error::io(&sidecar_file, e))?;
        Some(serde_json::from_str(&s)?)
    } else {
        None
    };
    let mults: Vec<f64> = match (&sidecar, multipliers.is_empty()) {
        (_, false) => multipliers.to_vec(),
        (Some(sc), true) => sc.class_multipliers.clone(),
        (None, true) => vec![1.0],
    };
    let mut network = tntp::parse_net(&text, &mults)?;
    if let Some(sc) = &sidecar {
        if sc.nodes != network.node_count() || sc.links != network.link_count() {
            return Err(Error::Format(format!(
                "{}: sidecar describes {} nodes / {} links, net file has {} / {}",
                sidecar_file.display(),
                sc.nodes,
                sc.links,
                network.node_count(),
                network.link_count()
            )));
        }
        if !sc.disabled_links.is_empty() {
            network = network.with_disabled(&sc.disabled_links)?;
        }
    }
    let name = sidecar
        .as_ref()
        .map(|s| s.source.clone())
        .unwrap_or_else(|| p.display().to_string());
    Ok(LoadedNetwork {
        name,
        network,
        units: sidecar.as_ref().map(|s| s.units.clone()).unwrap_or_else(|| Units::new("unknown", "unknown")),
        seed: sidecar.and_then(|s| s.seed),
    })
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `network.tntp` and `network.json` into `dir`.
pub fn save(dir: &Path, net: &LoadedNetwork) -> Result<()> {
    write_file(&dir.join(NET_FILE), tntp::write_net(&net.network))?;
    write_file(&dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&net.sidecar())? + "\n")
}

/// Trips for a network: `base` means the bundled Sioux Falls trips, anything
/// else is a TNTP trips file. Extra classes get `share` × the base demand.
pub fn load_trips(spec: &str, network: &Network, share: f64) -> Result<OdMatrix> {
    let text = if spec == "base" {
        if network.node_count() != 24 {
            return Err(Error::Format("`--trips base` is only defined for Sioux Falls".into()));
        }
        tntp::SIOUX_FALLS_TRIPS.to_string()
    } else {
        fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?
    };
    let base = tntp::parse_trips(&text, network.node_count())?;
    let classes = network.class_count();
    if classes == 1 {
        return Ok(base);
    }
    let n = network.node_count();
    let mut out = base.with_class_count(classes);
    for z in 1..classes {
        for o in 0..n {
            for d in 0..n {
                if o != d {
                    out.set(o, d, z, base.get(o * n + d, 0) * share)?;
                }
            }
        }
    }
    Ok(out)
}
