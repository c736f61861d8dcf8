//! Checkpoint directories: one `.npy` file per parameter array plus a
//! `manifest.toml` holding the architecture, layer lists and priors.
//! Round trips are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::PriorConfig;
use crate::nets::{ArchitectureSpec, Layer, ModelBundle, NetKind, Network};
use crate::replay::ReplaySnapshot;
use crate::tape::Mat;

pub const MANIFEST: &str = "manifest.toml";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetEntry {
    name: String,
    layers: Vec<Layer>,
    params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Bundle,
    Snapshot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: Kind,
    /// Tasks finished when the checkpoint was written.
    task_count: usize,
    arch: ArchitectureSpec,
    prior: PriorConfig,
    networks: Vec<NetEntry>,
}

fn array_path(dir: &Path, net: &str, i: usize) -> PathBuf {
    dir.join(format!("{net}.{i}.npy"))
}

fn write_net(dir: &Path, name: &str, net: &Network) -> Result<NetEntry> {
    for (i, p) in net.params.iter().enumerate() {
        let path = array_path(dir, name, i);
        ndarray_npy::write_npy(&path, p).map_err(|e| Error::Array(format!("{}: {e}", path.display())))?;
    }
    Ok(NetEntry {
        name: name.to_string(),
        layers: net.layers.clone(),
        params: net.params.len(),
    })
}

fn read_net(dir: &Path, entry: &NetEntry) -> Result<Network> {
    let params = (0..entry.params)
        .map(|i| {
            let path = array_path(dir, &entry.name, i);
            ndarray_npy::read_npy::<_, Mat>(&path).map_err(|e| Error::Array(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Network::from_parts(entry.layers.clone(), params)
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let text = toml::to_string_pretty(m).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::CheckpointNotFound(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint format {}", m.format_version)));
    }
    Ok(m)
}

fn entry<'a>(m: &'a Manifest, name: &str) -> Result<&'a NetEntry> {
    m.networks
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks network {name}")))
}

/// Write the full bundle, its prior and the finished-task count to `dir`.
pub fn save_bundle(dir: &Path, bundle: &ModelBundle, prior: &PriorConfig, task_count: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let networks = NetKind::ALL
        .iter()
        .map(|&k| write_net(dir, k.name(), bundle.net(k)))
        .collect::<Result<Vec<_>>>()?;
    write_manifest(
        dir,
        &Manifest {
            format_version: FORMAT_VERSION,
            kind: Kind::Bundle,
            task_count,
            arch: bundle.arch.clone(),
            prior: prior.clone(),
            networks,
        },
    )
}

/// A loaded bundle checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleCheckpoint {
    pub bundle: ModelBundle,
    pub prior: PriorConfig,
    pub task_count: usize,
}

pub fn load_bundle(dir: &Path) -> Result<BundleCheckpoint> {
    let m = read_manifest(dir)?;
    if !matches!(m.kind, Kind::Bundle) {
        return Err(Error::Config(format!("{} holds a snapshot, not a bundle", dir.display())));
    }
    let load = |k: NetKind| read_net(dir, entry(&m, k.name())?);
    let bundle = ModelBundle {
        generator: load(NetKind::Generator)?,
        critic: load(NetKind::Critic)?,
        encoder: load(NetKind::Encoder)?,
        task_head: load(NetKind::TaskHead)?,
        class_head: load(NetKind::ClassHead)?,
        arch: m.arch,
    };
    bundle.validate()?;
    Ok(BundleCheckpoint {
        bundle,
        prior: m.prior,
        task_count: m.task_count,
    })
}

pub fn save_snapshot(dir: &Path, snap: &ReplaySnapshot) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut networks = vec![write_net(dir, NetKind::Generator.name(), snap.generator())?];
    if let Some(h) = snap.class_head() {
        networks.push(write_net(dir, NetKind::ClassHead.name(), h)?);
    }
    write_manifest(
        dir,
        &Manifest {
            format_version: FORMAT_VERSION,
            kind: Kind::Snapshot,
            task_count: snap.task_count(),
            arch: snap.arch().clone(),
            prior: snap.prior().clone(),
            networks,
        },
    )
}

pub fn load_snapshot(dir: &Path) -> Result<ReplaySnapshot> {
    let m = read_manifest(dir)?;
    if !matches!(m.kind, Kind::Snapshot) {
        return Err(Error::Config(format!("{} holds a bundle, not a snapshot", dir.display())));
    }
    let generator = read_net(dir, entry(&m, NetKind::Generator.name())?)?;
    let class_head = match m.networks.iter().find(|e| e.name == NetKind::ClassHead.name()) {
        Some(e) => Some(read_net(dir, e)?),
        None => None,
    };
    ReplaySnapshot::from_parts(generator, class_head, m.arch, m.prior, m.task_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::{build_snapshot, sample_replay};

    #[test]
    fn bundle_and_snapshot_roundtrip_bit_exact() {
        let arch = ArchitectureSpec {
            image_shape: crate::nets::ImageShape::new(8, 8, 1),
            dim_z: 3,
            num_classes: 4,
            num_domains: 2,
            generator_hidden: vec![7],
            critic_hidden: vec![5],
            encoder_hidden: vec![6],
            task_hidden: vec![4],
            class_hidden: vec![5],
            ..Default::default()
        };
        let bundle = ModelBundle::new(arch.clone(), 9).unwrap();
        let prior = PriorConfig::uniform(3, 4, 2);
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &bundle, &prior, 2).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.bundle, bundle);
        assert_eq!(back.prior, prior);
        assert_eq!(back.task_count, 2);
        for k in NetKind::ALL {
            for (a, b) in bundle.net(k).params.iter().zip(&back.bundle.net(k).params) {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }

        let snap = build_snapshot(&bundle, &prior, 2).unwrap();
        let sdir = dir.path().join("snap");
        save_snapshot(&sdir, &snap).unwrap();
        let loaded = load_snapshot(&sdir).unwrap();
        assert_eq!(loaded, snap);
        assert_eq!(sample_replay(&loaded, 5, 3).unwrap().0, sample_replay(&snap, 5, 3).unwrap().0);
        assert!(load_bundle(&sdir).is_err());
    }

    #[test]
    fn missing_checkpoint_has_stable_code() {
        let err = load_bundle(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert_eq!(err.code(), "checkpoint_not_found");
    }
}
