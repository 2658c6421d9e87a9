mod common;

use pathflow::checkpoint::{Checkpoint, MAGIC};
use pathflow::engine::Surrogate;
use pathflow::store;
use pathflow::tntp::{self, SIOUX_FALLS_NET, SIOUX_FALLS_TRIPS};

#[test]
fn checkpoint_round_trip_is_exact() {
    let (net, ds, ckpt) = common::trained(2);
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.manifest_hash, ds.hash().unwrap());
    assert_eq!(back.manifest, ds.manifest);
    let (a, b) = (Surrogate::new(ckpt), Surrogate::new(back));
    let s = &ds.samples[3];
    let pa = a.predict(&net.network, &s.demand, &ds.path_sets, false).unwrap();
    let pb = b.predict(&net.network, &s.demand, &ds.path_sets, false).unwrap();
    assert_eq!(pa.flows, pb.flows);
}

#[test]
fn damaged_checkpoints_are_errors() {
    let (_, _, ckpt) = common::trained(1);
    let bytes = ckpt.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut long = bytes;
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let net = common::grid(3, 3, 1, 1);
    let ds = store::generate(&net, &common::spec(6, 1, 2), &common::gen_options(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    store::save(dir.path(), &ds).unwrap();
    let back = store::load(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.hash().unwrap(), ds.hash().unwrap());
    assert_eq!(back.samples, ds.samples);
    assert_eq!(back.path_sets, ds.path_sets);
    assert_eq!(back.network(), ds.network());
}

#[test]
fn tntp_network_round_trip() {
    let net = tntp::parse_net(SIOUX_FALLS_NET, &[1.0, 1.5]).unwrap();
    assert_eq!((net.node_count(), net.link_count(), net.class_count()), (24, 76, 2));
    let again = tntp::parse_net(&tntp::write_net(&net), &[1.0, 1.5]).unwrap();
    assert_eq!(again, net);
    let grid = common::grid(4, 3, 1, 6).network;
    assert_eq!(tntp::parse_net(&tntp::write_net(&grid), &[1.0]).unwrap(), grid);
}

#[test]
fn tntp_trips_round_trip() {
    let od = tntp::parse_trips(SIOUX_FALLS_TRIPS, 24).unwrap();
    let total: f64 = od.as_slice().iter().sum();
    assert_eq!(total, 360600.0);
    assert_eq!(tntp::parse_trips(&tntp::write_trips(&od, 0), 24).unwrap(), od);
}

#[test]
fn malformed_tntp_is_rejected() {
    assert!(tntp::parse_net("<NUMBER OF NODES> 2\n<END OF METADATA>\n~\n1 9 100 1 1 0.15 4 0 0 1 ;\n", &[1.0]).is_err());
    assert!(tntp::parse_trips("Origin 1\n 2 : abc;\n", 2).is_err());
}
