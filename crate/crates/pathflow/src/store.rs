//! Dataset directories.
//!
//! Layout: `manifest.json`, the network bundle the samples were solved on,
//! and `samples/{train,val,test}/{idx}.bin`. A sample file holds four
//! row-major little-endian f32 arrays (input, target, demand, label flows),
//! each behind a 16-byte header `[rank, dim0, dim1, 0]` of u32.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use pathflow_core::datagen::{
    apply_link_scenario, build_manifest, generate_sample, sample_tensors, DatasetManifest, LabeledSample,
    SampleTensors, ScenarioSpec, TargetMode,
};
use pathflow_core::equilibrium::SolverConfig;
use pathflow_core::network::{Network, OdMatrix, PathFlows};
use pathflow_core::paths::{build_path_sets, PathSets};
use pathflow_core::rng;
use pathflow_core::tensor::Tensor;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::netio::{self, LoadedNetwork, NetSource};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER: usize = 16;
const LINK_SCENARIO_TAG: u64 = 0x11_4e5;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn manifest_json(manifest: &DatasetManifest) -> Result<String> {
    Ok(serde_json::to_string_pretty(manifest)? + "\n")
}

/// Hash that binds checkpoints and reports to a dataset.
pub fn manifest_hash(manifest: &DatasetManifest) -> Result<String> {
    Ok(sha256_hex(manifest_json(manifest)?.as_bytes()))
}

fn push_array(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 || shape.iter().product::<usize>() != data.len() {
        return Err(Error::Format(format!("cannot store array of shape {shape:?}")));
    }
    let dims = [shape.len(), shape[0], *shape.get(1).unwrap_or(&0), 0];
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format("array dimension exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(())
}

fn read_array(bytes: &[u8], at: &mut usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let word = |i: usize| -> Result<usize> {
        let s = bytes
            .get(*at + 4 * i..*at + 4 * i + 4)
            .ok_or_else(|| Error::Format("truncated array header".into()))?;
        Ok(u32::from_le_bytes(s.try_into().unwrap()) as usize)
    };
    let rank = word(0)?;
    let shape = match rank {
        1 => vec![word(1)?],
        2 => vec![word(1)?, word(2)?],
        r => return Err(Error::Format(format!("unsupported array rank {r}"))),
    };
    let n: usize = shape.iter().product();
    let start = *at + HEADER;
    let body = bytes
        .get(start..start + 4 * n)
        .ok_or_else(|| Error::Format("truncated array body".into()))?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    *at = start + 4 * n;
    Ok((shape, data))
}

pub fn encode_sample(s: &SampleTensors) -> Result<Vec<u8>> {
    let rows = s.input.rows();
    let mut out = Vec::new();
    push_array(&mut out, s.input.shape(), s.input.data())?;
    push_array(&mut out, s.target.shape(), s.target.data())?;
    push_array(&mut out, &[rows, s.demand.classes()], s.demand.as_slice())?;
    push_array(&mut out, &[rows, s.label.classes * s.label.k], &s.label.flow)?;
    Ok(out)
}

pub fn decode_sample(bytes: &[u8], k: usize) -> Result<SampleTensors> {
    let mut at = 0;
    let (ishape, idata) = read_array(bytes, &mut at)?;
    let (tshape, tdata) = read_array(bytes, &mut at)?;
    let (dshape, ddata) = read_array(bytes, &mut at)?;
    let (lshape, ldata) = read_array(bytes, &mut at)?;
    if at != bytes.len() || dshape.len() != 2 || k == 0 {
        return Err(Error::Format("sample file does not hold exactly four arrays".into()));
    }
    let (rows, classes) = (dshape[0], dshape[1]);
    let nodes = (rows as f64).sqrt().round() as usize;
    if nodes * nodes != rows || lshape != [rows, classes * k] {
        return Err(Error::Format(format!(
            "sample arrays disagree: demand {dshape:?}, label {lshape:?}, k={k}"
        )));
    }
    Ok(SampleTensors {
        input: Tensor::new(ishape, idata)?,
        target: Tensor::new(tshape, tdata)?,
        demand: OdMatrix::from_vec(nodes, classes, ddata)?,
        label: PathFlows::from_vec(rows, classes, k, ldata)?,
    })
}

/// A dataset in memory. `samples` is indexed by sample index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub network: LoadedNetwork,
    pub path_sets: PathSets,
    pub samples: Vec<SampleTensors>,
}

impl Dataset {
    pub fn network(&self) -> &Network {
        &self.network.network
    }

    pub fn hash(&self) -> Result<String> {
        manifest_hash(&self.manifest)
    }

    pub fn split_samples(&self, split: Split) -> Vec<&SampleTensors> {
        self.split_indices(split).iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.split.train,
            Split::Val => &self.manifest.split.val,
            Split::Test => &self.manifest.split.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Generation settings besides the scenario spec.
#[derive(Debug, Clone)]
pub struct GenOptions {
    pub k: usize,
    pub target: TargetMode,
    pub solver: SolverConfig,
}

/// Draws, solves and normalizes every sample. The link scenario is applied
/// once, from its own stream of the dataset seed.
pub fn generate(base: &LoadedNetwork, spec: &ScenarioSpec, opts: &GenOptions) -> Result<Dataset> {
    spec.validate()?;
    let expected = spec.classes;
    if base.network.class_count() != expected {
        return Err(Error::Format(format!(
            "spec asks for {expected} classes, network has {}",
            base.network.class_count()
        )));
    }
    let mut link_rng = rng::seeded(rng::derive(spec.seed, LINK_SCENARIO_TAG));
    let (network, path_sets) = apply_link_scenario(&base.network, spec, opts.k, &mut link_rng)?;
    let labeled: Vec<LabeledSample> = (0..spec.n_samples as u64)
        .into_par_iter()
        .map(|i| generate_sample(&network, &path_sets, spec, &opts.solver, i))
        .collect::<std::result::Result<_, _>>()?;
    let manifest = build_manifest(
        &base.name,
        &network,
        &path_sets,
        spec,
        &opts.solver,
        &labeled,
        opts.target,
        base.units.clone(),
    )?;
    let samples = labeled
        .par_iter()
        .map(|s| sample_tensors(&network, &path_sets, s, &manifest.feature_stats, &manifest.target))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Dataset {
        manifest,
        network: LoadedNetwork {
            network,
            ..base.clone()
        },
        path_sets,
        samples,
    })
}

fn sample_path(dir: &Path, split: Split, idx: usize) -> PathBuf {
    dir.join("samples").join(split.name()).join(format!("{idx}.bin"))
}

pub fn save(dir: &Path, ds: &Dataset) -> Result<()> {
    netio::save(dir, &ds.network)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let sub = dir.join("samples").join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for &i in ds.split_indices(split) {
            let path = sample_path(dir, split, i);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&encode_sample(&ds.samples[i])?).map_err(|e| Error::io(&path, e))?;
        }
    }
    // written last: a directory with a manifest is complete
    netio::write_file(&dir.join(MANIFEST_FILE), manifest_json(&ds.manifest)?)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let network = netio::load(&NetSource::Path(dir.to_path_buf()), &manifest.class_multipliers, 0)?;
    if network.network.disabled_links() != manifest.disabled_links {
        return Err(Error::Format("dataset network and manifest disagree on disabled links".into()));
    }
    let path_sets = build_path_sets(&network.network, manifest.k);
    let mut samples = vec![None; manifest.spec.n_samples];
    for split in [Split::Train, Split::Val, Split::Test] {
        let idx = match split {
            Split::Train => &manifest.split.train,
            Split::Val => &manifest.split.val,
            Split::Test => &manifest.split.test,
        };
        for &i in idx {
            let path = sample_path(dir, split, i);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let s = decode_sample(&bytes, manifest.k).map_err(|e| e.in_stage("sample"))?;
            samples[i] = Some(s);
        }
    }
    let samples = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Format(format!("sample {i} is in no split"))))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        manifest,
        network,
        path_sets,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pathflow_core::datagen::TargetMode;

    fn tiny() -> Dataset {
        let base = netio::load(&NetSource::Grid { rows: 3, cols: 3 }, &[1.0], 2).unwrap();
        let spec = ScenarioSpec {
            od_missing_ratio: 0.3,
            link_missing_ratio: 0.0,
            removed_links: vec![],
            classes: 1,
            demand_range: (50.0, 500.0),
            n_samples: 10,
            seed: 3,
        };
        let opts = GenOptions {
            k: 3,
            target: TargetMode::PerOdShare,
            solver: SolverConfig::default(),
        };
        generate(&base, &spec, &opts).unwrap()
    }

    #[test]
    fn sample_round_trip() {
        let ds = tiny();
        let bytes = encode_sample(&ds.samples[0]).unwrap();
        assert_eq!(decode_sample(&bytes, 3).unwrap(), ds.samples[0]);
        assert!(decode_sample(&bytes[..bytes.len() - 1], 3).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let ds = tiny();
        assert_eq!(ds.manifest.split.train.len(), 7);
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &ds).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.path_sets, ds.path_sets);
    }
}
