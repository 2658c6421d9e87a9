//! TNTP network and trips text formats.
//!
//! Net files carry a metadata header (`<NUMBER OF NODES>`, `<NUMBER OF LINKS>`,
//! `<FIRST THRU NODE>`, ..., `<END OF METADATA>`) followed by one row per link:
//! `init_node term_node capacity length free_flow_time b power speed toll type ;`.
//! Only capacity, length and free-flow time are kept. Node ids are 1-based in
//! the file and 0-based in memory.

use std::fmt::Write as _;

use pathflow_core::network::{Link, Network, OdMatrix, VehicleClass};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const NET_COLUMNS: usize = 10;

pub const SIOUX_FALLS_NET: &str = include_str!("../../../data/SiouxFalls_net.tntp");
pub const SIOUX_FALLS_TRIPS: &str = include_str!("../../../data/SiouxFalls_trips.tntp");

/// Vehicle classes from free-flow multipliers; the first must be 1.
pub fn classes_from_multipliers(multipliers: &[f64]) -> Vec<VehicleClass> {
    if multipliers.is_empty() {
        return vec![VehicleClass::car()];
    }
    multipliers
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let name = match i {
                0 => "car".to_string(),
                1 => "truck".to_string(),
                _ => format!("class{i}"),
            };
            VehicleClass::new(i, name, m)
        })
        .collect()
}

struct Metadata {
    values: Vec<(String, String)>,
    body_start: usize,
}

fn read_metadata(text: &str) -> Result<Metadata> {
    let mut values = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('~') {
            continue;
        }
        if !line.starts_with('<') {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected a metadata tag, found `{line}`"),
            });
        }
        let close = line.find('>').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "unterminated metadata tag".into(),
        })?;
        let tag = line[1..close].trim().to_ascii_uppercase();
        if tag == "END OF METADATA" {
            return Ok(Metadata {
                values,
                body_start: i + 1,
            });
        }
        values.push((tag, line[close + 1..].trim().to_string()));
    }
    Err(Error::Parse {
        line: text.lines().count(),
        msg: "missing <END OF METADATA>".into(),
    })
}

fn header_count(meta: &Metadata, tag: &str, text: &str) -> Result<Option<usize>> {
    let Some((_, value)) = meta.values.iter().find(|(t, _)| t == tag) else {
        return Ok(None);
    };
    value.parse::<usize>().map(Some).map_err(|_| {
        let line = text
            .lines()
            .position(|l| l.to_ascii_uppercase().contains(&format!("<{tag}>")))
            .map_or(0, |p| p + 1);
        Error::Parse {
            line,
            msg: format!("<{tag}> expects a non-negative integer, found `{value}`"),
        }
    })
}

/// Parses a TNTP net file. Per-class free-flow time is the file's time times
/// the class multiplier.
pub fn parse_net(text: &str, class_multipliers: &[f64]) -> Result<Network> {
    let meta = read_metadata(text)?;
    let nodes = header_count(&meta, "NUMBER OF NODES", text)?.ok_or_else(|| Error::Parse {
        line: meta.body_start,
        msg: "missing <NUMBER OF NODES>".into(),
    })?;
    let declared_links = header_count(&meta, "NUMBER OF LINKS", text)?.ok_or_else(|| Error::Parse {
        line: meta.body_start,
        msg: "missing <NUMBER OF LINKS>".into(),
    })?;
    header_count(&meta, "FIRST THRU NODE", text)?;

    let mut links = Vec::with_capacity(declared_links);
    for (i, raw) in text.lines().enumerate().skip(meta.body_start) {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('~') {
            continue;
        }
        let body = line.split(';').next().unwrap_or("");
        let cols: Vec<&str> = body.split_whitespace().collect();
        if cols.len() < NET_COLUMNS {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {NET_COLUMNS} link columns, found {}", cols.len()),
            });
        }
        let num = |c: usize| -> Result<f64> {
            cols[c].parse::<f64>().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("column {} is not a number: `{}`", c + 1, cols[c]),
            })
        };
        let node = |c: usize| -> Result<usize> {
            let v = num(c)?;
            if v < 1.0 || v.fract() != 0.0 || v > nodes as f64 {
                return Err(Error::Core(pathflow_core::Error::Validation(format!(
                    "line {}: node id {} outside 1..={nodes}",
                    i + 1,
                    cols[c]
                ))));
            }
            Ok(v as usize - 1)
        };
        let (tail, head) = (node(0)?, node(1)?);
        let capacity = num(2)?;
        let length = num(3)?;
        let freeflow_time = num(4)?;
        // b, power, speed, toll, type: parsed for well-formedness, not kept
        for c in 5..NET_COLUMNS {
            num(c)?;
        }
        links.push(Link {
            id: links.len(),
            tail,
            head,
            length,
            capacity,
            freeflow_time,
        });
    }
    if links.len() != declared_links {
        return Err(Error::Core(pathflow_core::Error::Validation(format!(
            "header declares {declared_links} links, file has {}",
            links.len()
        ))));
    }
    Ok(Network::new(nodes, links, classes_from_multipliers(class_multipliers))?)
}

/// Parses a TNTP trips file into base-class demand. Unlisted pairs are 0.
pub fn parse_trips(text: &str, nodes: usize) -> Result<OdMatrix> {
    let meta = read_metadata(text)?;
    let mut demand = OdMatrix::zeros(nodes, 1);
    let mut origin: Option<usize> = None;
    for (i, raw) in text.lines().enumerate().skip(meta.body_start) {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('~') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("Origin") {
            let id: usize = rest.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad origin `{}`", rest.trim()),
            })?;
            if id == 0 || id > nodes {
                return Err(Error::Core(pathflow_core::Error::Validation(format!(
                    "line {}: origin {id} outside 1..={nodes}",
                    i + 1
                ))));
            }
            origin = Some(id - 1);
            continue;
        }
        let o = origin.ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "demand entry before any `Origin` line".into(),
        })?;
        for entry in line.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (d, v) = entry.split_once(':').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `dest : demand`, found `{entry}`"),
            })?;
            let d: usize = d.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad destination `{}`", d.trim()),
            })?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad demand `{}`", v.trim()),
            })?;
            if d == 0 || d > nodes {
                return Err(Error::Core(pathflow_core::Error::Validation(format!(
                    "line {}: destination {d} outside 1..={nodes}",
                    i + 1
                ))));
            }
            if d - 1 == o && v == 0.0 {
                continue;
            }
            demand.set(o, d - 1, 0, v)?;
        }
    }
    Ok(demand)
}

/// Serializes a network in the TNTP net format (b = 0.15, power = 4).
pub fn write_net(network: &Network) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "<NUMBER OF ZONES> {}", network.node_count());
    let _ = writeln!(out, "<NUMBER OF NODES> {}", network.node_count());
    let _ = writeln!(out, "<FIRST THRU NODE> 1");
    let _ = writeln!(out, "<NUMBER OF LINKS> {}", network.link_count());
    let _ = writeln!(out, "<END OF METADATA>\n");
    let _ = writeln!(
        out,
        "~\tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\tb\tpower\tspeed\ttoll\tlink_type\t;"
    );
    for l in network.links() {
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t0.15\t4\t0\t0\t1\t;",
            l.tail + 1,
            l.head + 1,
            l.capacity,
            l.length,
            l.freeflow_time
        );
    }
    out
}

/// Serializes one class of an OD matrix in the TNTP trips format.
pub fn write_trips(demand: &OdMatrix, class: usize) -> String {
    let n = demand.nodes();
    let total = demand.class_total(class);
    let mut out = String::new();
    let _ = writeln!(out, "<NUMBER OF ZONES> {n}");
    let _ = writeln!(out, "<TOTAL OD FLOW> {total}");
    let _ = writeln!(out, "<END OF METADATA>\n");
    for o in 0..n {
        let _ = writeln!(out, "Origin {}", o + 1);
        let entries: Vec<String> = (0..n)
            .filter(|&d| d != o)
            .map(|d| format!("{} : {};", d + 1, demand.get(o * n + d, class)))
            .collect();
        for chunk in entries.chunks(5) {
            let _ = writeln!(out, "    {}", chunk.join("  "));
        }
        out.push('\n');
    }
    out
}

/// JSON sidecar written next to generated TNTP files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSidecar {
    pub schema_version: u32,
    pub source: String,
    pub class_multipliers: Vec<f64>,
    pub units: pathflow_core::network::Units,
    pub seed: Option<u64>,
    pub nodes: usize,
    pub links: usize,
    pub disabled_links: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "<NUMBER OF ZONES> 2\n<NUMBER OF NODES> 2\n<FIRST THRU NODE> 1\n<NUMBER OF LINKS> 1\n<END OF METADATA>\n\n~ init term cap len fft b power speed toll type ;\n\t1\t2\t1000\t3\t2\t0.15\t4\t0\t0\t1\t;\n";

    #[test]
    fn tiny_network() {
        let net = parse_net(TINY, &[1.0]).unwrap();
        assert_eq!(net.node_count(), 2);
        assert_eq!(net.link_count(), 1);
        assert_eq!(net.outgoing(0), &[0]);
        assert_eq!(net.link(0).length, 3.0);
        let two = parse_net(TINY, &[1.0, 1.5]).unwrap();
        assert_eq!(two.freeflow_time(0, 1), 3.0);
    }

    #[test]
    fn malformed_header_names_line() {
        let bad = TINY.replace("<NUMBER OF NODES> 2", "<NUMBER OF NODES> two");
        match parse_net(&bad, &[1.0]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let no_end = TINY.replace("<END OF METADATA>", "");
        assert!(matches!(parse_net(&no_end, &[1.0]), Err(Error::Parse { .. })));
    }

    #[test]
    fn node_out_of_range_and_duplicates() {
        let bad = TINY.replace("\t1\t2\t1000", "\t1\t3\t1000");
        assert!(matches!(parse_net(&bad, &[1.0]), Err(Error::Core(pathflow_core::Error::Validation(_)))));
        let dup = TINY.replace("<NUMBER OF LINKS> 1", "<NUMBER OF LINKS> 2")
            + "\t1\t2\t500\t3\t2\t0.15\t4\t0\t0\t1\t;\n";
        assert!(matches!(parse_net(&dup, &[1.0]), Err(Error::Core(pathflow_core::Error::Validation(_)))));
    }

    #[test]
    fn trips_parsing() {
        let text = "<NUMBER OF ZONES> 24\n<END OF METADATA>\nOrigin 1\n 2 : 100.0;\n";
        let m = parse_trips(text, 24).unwrap();
        assert_eq!(m.get(1, 0), 100.0);
        assert_eq!(m.class_total(0), 100.0);
        let empty = parse_trips("<NUMBER OF ZONES> 3\n<END OF METADATA>\n", 3).unwrap();
        assert!(empty.as_slice().iter().all(|&x| x == 0.0));
        assert!(parse_trips("<END OF METADATA>\nOrigin 1\n 30 : 1.0;\n", 24).is_err());
        assert!(parse_trips("<END OF METADATA>\nOrigin 1\n 3 : -1.0;\n", 24).is_err());
        assert!(parse_trips("<END OF METADATA>\nOrigin 25\n", 24).is_err());
    }

    #[test]
    fn round_trip_preserves_attributes() {
        let net = pathflow_core::network::generate_manhattan(3, 4, 12).unwrap();
        let back = parse_net(&write_net(&net), &[1.0]).unwrap();
        for (a, b) in net.links().iter().zip(back.links()) {
            assert_eq!((a.tail, a.head), (b.tail, b.head));
            for (x, y) in [(a.capacity, b.capacity), (a.length, b.length), (a.freeflow_time, b.freeflow_time)] {
                assert!((x - y).abs() <= 1e-9 * x.abs());
            }
        }
        let mut d = OdMatrix::zeros(12, 1);
        d.set(0, 5, 0, 123.456).unwrap();
        d.set(11, 2, 0, 7.0).unwrap();
        assert_eq!(parse_trips(&write_trips(&d, 0), 12).unwrap(), d);
    }
}
