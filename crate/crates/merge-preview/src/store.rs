//! On-disk artifact store: one binary posterior plus a JSON sidecar per
//! artifact, and an index rewritten after every change.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "MPPOST\0\0"
//! version    u32
//! kind       u8       0 point, 1 Gaussian, 2 mixture
//! layout     u8       0 none, 1 diagonal, 2 full
//! reserved   u16
//! P          u64
//! K          u64      components, 0 unless a mixture
//! payload    f64...   point: θ
//!                     Gaussian: mean, precision (P or P×P row-major)
//!                     mixture: per component weight, mean, precision
//! checksum   32 bytes SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use merge_preview_core::linalg::DenseMatrix;
use merge_preview_core::vartrain::Provenance;
use merge_preview_core::{
    ArtifactKind, GaussianPosterior, Layout, MixtureComponent, MixturePosterior, ParamVector, Payload,
    PosteriorArtifact, PrecisionMatrix,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const STORE_ENV: &str = "MERGE_PREVIEW_STORE";
pub const POSTERIOR_MAGIC: [u8; 8] = *b"MPPOST\0\0";
pub const POSTERIOR_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;
const CHECKSUM_LEN: usize = 32;
const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArtifactKey {
    pub experiment: String,
    pub task: String,
    pub kind: String,
    pub seed: u64,
}

impl ArtifactKey {
    pub fn new(experiment: &str, task: &str, kind: ArtifactKind, seed: u64) -> Self {
        Self {
            experiment: experiment.into(),
            task: task.into(),
            kind: kind.as_str().into(),
            seed,
        }
    }

    fn stem(&self) -> String {
        format!("{}.{}.s{}", self.task, self.kind, self.seed)
    }
}

impl std::fmt::Display for ArtifactKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}/seed={}", self.experiment, self.task, self.kind, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub kind: ArtifactKind,
    pub dim: usize,
    pub components: usize,
    pub checksum: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    key: ArtifactKey,
    file: PathBuf,
    checksum: String,
}

#[derive(Debug)]
pub struct ArtifactStore {
    root: PathBuf,
    index: BTreeMap<ArtifactKey, IndexEntry>,
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_gaussian(out: &mut Vec<u8>, g: &GaussianPosterior) {
    push_f64s(out, g.mean().as_slice());
    match g.precision() {
        PrecisionMatrix::Diagonal(d) => push_f64s(out, d),
        PrecisionMatrix::Full(f) => push_f64s(out, f.matrix().as_slice()),
    }
}

fn layout_tag(layout: Layout) -> u8 {
    match layout {
        Layout::Diagonal => 1,
        Layout::Full => 2,
    }
}

pub fn encode_posterior(payload: &Payload) -> Vec<u8> {
    let (kind, layout, p, k) = match payload {
        Payload::Point(v) => (0u8, 0u8, v.len(), 0usize),
        Payload::Gaussian(g) => (1, layout_tag(g.layout()), g.dim(), 0),
        Payload::Mixture(m) => (2, layout_tag(m.layout()), m.dim(), m.len()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + CHECKSUM_LEN);
    out.extend_from_slice(&POSTERIOR_MAGIC);
    out.extend_from_slice(&POSTERIOR_VERSION.to_le_bytes());
    out.extend_from_slice(&[kind, layout, 0, 0]);
    out.extend_from_slice(&(p as u64).to_le_bytes());
    out.extend_from_slice(&(k as u64).to_le_bytes());
    match payload {
        Payload::Point(v) => push_f64s(&mut out, v.as_slice()),
        Payload::Gaussian(g) => push_gaussian(&mut out, g),
        Payload::Mixture(m) => {
            for c in m.components() {
                push_f64s(&mut out, &[c.weight]);
                push_gaussian(&mut out, &c.gaussian);
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn f64s(&mut self, n: usize) -> Vec<f64> {
        let out = self.bytes[self.pos..self.pos + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        self.pos += 8 * n;
        out
    }

    fn gaussian(&mut self, p: usize, layout: Layout) -> merge_preview_core::Result<GaussianPosterior> {
        let mean = ParamVector::new(self.f64s(p))?;
        let prec = match layout {
            Layout::Diagonal => PrecisionMatrix::diagonal(self.f64s(p))?,
            Layout::Full => PrecisionMatrix::full(DenseMatrix::from_row_major(p, self.f64s(p * p))?)?,
        };
        GaussianPosterior::new(mean, prec)
    }
}

/// Parses and verifies a posterior file. `path` only labels errors.
pub fn decode_posterior(bytes: &[u8], path: &Path) -> Result<Payload> {
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN || bytes[..8] != POSTERIOR_MAGIC {
        return Err(Error::format(path, "not a posterior file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != POSTERIOR_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            expected: POSTERIOR_VERSION,
        });
    }
    let body = &bytes[..bytes.len() - CHECKSUM_LEN];
    if Sha256::digest(body).as_slice() != &bytes[bytes.len() - CHECKSUM_LEN..] {
        return Err(Error::Checksum { path: path.into() });
    }
    let (kind, layout) = (bytes[12], bytes[13]);
    let p = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let k = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes")) as usize;
    let layout = match layout {
        0 => None,
        1 => Some(Layout::Diagonal),
        2 => Some(Layout::Full),
        t => return Err(Error::format(path, format!("unknown layout tag {t}"))),
    };
    let per_gaussian = |l: Layout| p + if l == Layout::Full { p * p } else { p };
    let expected = match (kind, layout) {
        (0, None) if k == 0 => p,
        (1, Some(l)) if k == 0 => per_gaussian(l),
        (2, Some(l)) if k > 0 => k * (1 + per_gaussian(l)),
        _ => return Err(Error::format(path, format!("inconsistent header: kind {kind}, K {k}"))),
    };
    if body.len() != HEADER_LEN + 8 * expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header implies {}", body.len() - HEADER_LEN, 8 * expected),
        ));
    }
    let mut r = Reader {
        bytes: body,
        pos: HEADER_LEN,
    };
    let payload = match (kind, layout) {
        (0, _) => Payload::Point(ParamVector::new(r.f64s(p))?),
        (1, Some(l)) => Payload::Gaussian(r.gaussian(p, l)?),
        (_, Some(l)) => {
            let mut comps = Vec::with_capacity(k);
            for _ in 0..k {
                let weight = r.f64s(1)[0];
                comps.push(MixtureComponent {
                    weight,
                    gaussian: r.gaussian(p, l)?,
                });
            }
            Payload::Mixture(MixturePosterior::new(comps)?)
        }
        _ => unreachable!("checked above"),
    };
    Ok(payload)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl ArtifactStore {
    /// Opens (creating if needed) a store rooted at `root` and rebuilds the
    /// index from the sidecars found there.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut store = Self {
            root,
            index: BTreeMap::new(),
        };
        store.rescan()?;
        Ok(store)
    }

    /// Root from the environment override, else `default`.
    pub fn open_default(default: impl Into<PathBuf>) -> Result<Self> {
        match std::env::var_os(STORE_ENV) {
            Some(root) if !root.is_empty() => Self::open(PathBuf::from(root)),
            _ => Self::open(default),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn rescan(&mut self) -> Result<()> {
        self.index.clear();
        let Ok(experiments) = fs::read_dir(&self.root) else {
            return Ok(());
        };
        for exp in experiments.flatten() {
            if !exp.path().is_dir() {
                continue;
            }
            let Ok(files) = fs::read_dir(exp.path()) else { continue };
            for f in files.flatten() {
                let path = f.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let Ok(side) = serde_json::from_slice::<Sidecar>(&read(&path)?) else {
                    continue;
                };
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let Some(seed) = stem.rsplit_once(".s").and_then(|(_, s)| s.parse().ok()) else {
                    continue;
                };
                let key = ArtifactKey {
                    experiment: exp.file_name().to_string_lossy().into_owned(),
                    task: side.provenance.task_id.clone(),
                    kind: side.kind.as_str().into(),
                    seed,
                };
                let file = path.with_extension("post");
                if file.exists() {
                    self.index.insert(
                        key.clone(),
                        IndexEntry {
                            key,
                            file,
                            checksum: side.checksum,
                        },
                    );
                }
            }
        }
        self.write_index()
    }

    fn write_index(&self) -> Result<()> {
        let entries: Vec<&IndexEntry> = self.index.values().collect();
        let json = serde_json::to_vec_pretty(&entries).expect("index serializes");
        write_atomic(&self.root.join(INDEX_FILE), &json)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ArtifactKey> {
        self.index.keys()
    }

    pub fn contains(&self, key: &ArtifactKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn path_of(&self, key: &ArtifactKey) -> PathBuf {
        self.root.join(&key.experiment).join(format!("{}.post", key.stem()))
    }

    /// Writes the binary posterior, then its sidecar, then the index.
    pub fn save(&mut self, experiment: &str, seed: u64, artifact: &PosteriorArtifact) -> Result<PathBuf> {
        let key = ArtifactKey::new(experiment, &artifact.provenance.task_id, artifact.kind(), seed);
        let path = self.path_of(&key);
        let bytes = encode_posterior(&artifact.payload);
        let checksum = hex(&bytes[bytes.len() - CHECKSUM_LEN..]);
        let side = Sidecar {
            format_version: POSTERIOR_VERSION,
            kind: artifact.kind(),
            dim: artifact.dim(),
            components: artifact.mixture().map_or(0, |m| m.len()),
            checksum: checksum.clone(),
            provenance: artifact.provenance.clone(),
        };
        write_atomic(&path, &bytes)?;
        let side_json = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
        write_atomic(&path.with_extension("json"), &side_json)?;
        self.index.insert(
            key.clone(),
            IndexEntry {
                key,
                file: path.clone(),
                checksum,
            },
        );
        self.write_index()?;
        Ok(path)
    }

    pub fn load(&self, key: &ArtifactKey) -> Result<PosteriorArtifact> {
        let entry = self
            .index
            .get(key)
            .ok_or_else(|| Error::MissingArtifact(key.to_string()))?;
        let bytes = read(&entry.file)?;
        let payload = decode_posterior(&bytes, &entry.file)?;
        let side_path = entry.file.with_extension("json");
        let side: Sidecar =
            serde_json::from_slice(&read(&side_path)?).map_err(|e| Error::format(&side_path, e))?;
        if side.checksum != hex(&bytes[bytes.len() - CHECKSUM_LEN..]) {
            return Err(Error::Checksum { path: side_path });
        }
        Ok(PosteriorArtifact {
            payload,
            provenance: side.provenance,
        })
    }

    /// Loads every key, or reports all missing ones at once.
    pub fn load_all(&self, keys: &[ArtifactKey]) -> Result<Vec<PosteriorArtifact>> {
        let missing: Vec<String> = keys
            .iter()
            .filter(|k| !self.contains(k))
            .map(ToString::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingArtifacts(missing));
        }
        keys.iter().map(|k| self.load(k)).collect()
    }
}

pub fn save_posterior(
    store: &mut ArtifactStore,
    experiment: &str,
    seed: u64,
    artifact: &PosteriorArtifact,
) -> Result<PathBuf> {
    store.save(experiment, seed, artifact)
}

pub fn load_posterior(store: &ArtifactStore, key: &ArtifactKey) -> Result<PosteriorArtifact> {
    store.load(key)
}
