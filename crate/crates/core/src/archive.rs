//! Weights archives: a tar file holding `meta.json` plus one little-endian
//! `f32` blob per tensor. Entries carry fixed timestamps and modes so equal
//! contents give byte-identical files.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::FeatureGenerator;
use crate::probes::{NseVariant, NseWeights, ProbeWeights, TrainedProbe, UpsampleMode};

pub const FORMAT_VERSION: u32 = 1;

const META_NAME: &str = "meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchiveKind {
    Lse,
    #[serde(rename = "nse-1")]
    Nse1,
    #[serde(rename = "nse-2")]
    Nse2,
    Centers,
    Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub format_version: u32,
    pub kind: ArchiveKind,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub depths: Vec<usize>,
    pub upsample: Option<UpsampleMode>,
    pub config_hash: String,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub shots: Option<usize>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub blobs: Vec<BlobInfo>,
}

/// Provenance fields recorded alongside trained weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub config_hash: String,
    pub shots: Option<usize>,
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

fn f64_values(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Archive("blob length is not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

fn append(builder: &mut tar::Builder<Vec<u8>>, name: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    header.set_cksum();
    builder.append_data(&mut header, name, data)?;
    Ok(())
}

fn pack(meta: &ArchiveMeta, blobs: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    builder.mode(tar::HeaderMode::Deterministic);
    append(&mut builder, META_NAME, &serde_json::to_vec_pretty(meta)?)?;
    for (info, data) in meta.blobs.iter().zip(blobs) {
        append(&mut builder, &info.name, &f32_bytes(data))?;
    }
    Ok(builder.into_inner()?)
}

fn unpack(bytes: &[u8]) -> Result<(ArchiveMeta, Vec<Vec<f64>>)> {
    let corrupt = |e: std::io::Error| Error::Archive(format!("unreadable tar: {e}"));
    let mut archive = tar::Archive::new(Cursor::new(bytes));
    let mut meta_bytes = None;
    let mut files = Vec::new();
    for entry in archive.entries().map_err(corrupt)? {
        let mut entry = entry.map_err(corrupt)?;
        let name = entry.path().map_err(corrupt)?.to_string_lossy().into_owned();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(corrupt)?;
        if name == META_NAME {
            meta_bytes = Some(data);
        } else {
            files.push((name, data));
        }
    }
    let meta_bytes = meta_bytes.ok_or_else(|| Error::Archive("missing meta.json".into()))?;
    let bad_meta = |e: serde_json::Error| Error::Archive(format!("meta.json: {e}"));
    let version: serde_json::Value = serde_json::from_slice(&meta_bytes).map_err(bad_meta)?;
    let found = version
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Archive("meta.json lacks format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::ArchiveVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let meta: ArchiveMeta = serde_json::from_slice(&meta_bytes).map_err(bad_meta)?;
    let mut blobs = Vec::with_capacity(meta.blobs.len());
    for info in &meta.blobs {
        let (_, data) = files
            .iter()
            .find(|(n, _)| *n == info.name)
            .ok_or_else(|| Error::Archive(format!("missing blob {}", info.name)))?;
        let values = f64_values(data)?;
        if values.len() != info.rows * info.cols {
            return Err(Error::Archive(format!(
                "blob {} holds {} values, expected {}x{}",
                info.name,
                values.len(),
                info.rows,
                info.cols
            )));
        }
        blobs.push(values);
    }
    Ok((meta, blobs))
}

/// A trained extractor plus its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeArchive {
    pub meta: ArchiveMeta,
    pub probe: TrainedProbe,
}

impl ProbeArchive {
    pub fn new(probe: TrainedProbe, class_names: Vec<String>, info: TrainingInfo) -> Self {
        let (kind, num_classes, depths, upsample, hidden, blobs) = match &probe {
            TrainedProbe::Lse(w) => (
                ArchiveKind::Lse,
                w.num_classes,
                w.depths.clone(),
                Some(w.upsample),
                None,
                w.depths
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| BlobInfo {
                        name: format!("layer_{i:02}.bin"),
                        rows: w.num_classes,
                        cols: c,
                    })
                    .collect(),
            ),
            TrainedProbe::Nse(w) => (
                match w.variant {
                    NseVariant::Nse1 => ArchiveKind::Nse1,
                    NseVariant::Nse2 => ArchiveKind::Nse2,
                },
                w.num_classes,
                w.depths.clone(),
                None,
                Some(w.hidden),
                vec![BlobInfo {
                    name: "params.bin".into(),
                    rows: 1,
                    cols: w.param_count(),
                }],
            ),
        };
        let meta = ArchiveMeta {
            format_version: FORMAT_VERSION,
            kind,
            num_classes,
            class_names,
            depths,
            upsample,
            config_hash: info.config_hash,
            hidden,
            shots: info.shots,
            iterations: info.iterations,
            seed: info.seed,
            blobs,
        };
        Self { meta, probe }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blobs = match &self.probe {
            TrainedProbe::Lse(w) => w.matrices.clone(),
            TrainedProbe::Nse(w) => vec![w.flat()],
        };
        pack(&self.meta, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, blobs) = unpack(bytes)?;
        let m = meta.num_classes;
        let probe = match meta.kind {
            ArchiveKind::Lse => {
                if blobs.len() != meta.depths.len()
                    || meta.blobs.iter().zip(&meta.depths).any(|(b, &c)| b.rows != m || b.cols != c)
                {
                    return Err(Error::Archive("layer blobs do not match the recorded depths".into()));
                }
                let mut w = ProbeWeights::zeros(m, &meta.depths, meta.class_names.clone());
                w.upsample = meta.upsample.unwrap_or(UpsampleMode::Bilinear);
                w.matrices = blobs;
                TrainedProbe::Lse(w)
            }
            ArchiveKind::Nse1 | ArchiveKind::Nse2 => {
                let variant = if meta.kind == ArchiveKind::Nse1 {
                    NseVariant::Nse1
                } else {
                    NseVariant::Nse2
                };
                let hidden = meta
                    .hidden
                    .ok_or_else(|| Error::Archive("NSE archive lacks hidden width".into()))?;
                let mut w = NseWeights::zeros(variant, m, &meta.depths, hidden);
                if blobs.len() != 1 || blobs[0].len() != w.param_count() {
                    return Err(Error::Archive("parameter blob does not match the recorded layout".into()));
                }
                w.set_flat(&blobs[0]);
                TrainedProbe::Nse(w)
            }
            ArchiveKind::Centers | ArchiveKind::Confusion => {
                return Err(Error::Archive("archive holds a matrix, not an extractor".into()))
            }
        };
        Ok(Self { meta, probe })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and rejects archives whose layout does not fit `gen`.
    pub fn load_for<G: FeatureGenerator + ?Sized>(path: impl AsRef<Path>, gen: &G) -> Result<Self> {
        let archive = Self::load(path)?;
        archive.check_generator(gen)?;
        Ok(archive)
    }

    pub fn check_generator<G: FeatureGenerator + ?Sized>(&self, gen: &G) -> Result<()> {
        let depths: Vec<usize> = gen.layer_meta().iter().map(|l| l.depth).collect();
        if depths != self.meta.depths {
            return Err(Error::Archive(format!(
                "archive layer depths {:?} do not match generator depths {:?}",
                self.meta.depths, depths
            )));
        }
        if gen.num_classes() != self.meta.num_classes {
            return Err(Error::Archive(format!(
                "archive has {} classes, generator {}",
                self.meta.num_classes,
                gen.num_classes()
            )));
        }
        Ok(())
    }
}

/// A single `(rows, cols)` matrix such as class centres or a confusion
/// matrix, in the same container format.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixArchive {
    pub meta: ArchiveMeta,
    pub rows: Vec<Vec<f64>>,
}

impl MatrixArchive {
    pub fn new(kind: ArchiveKind, rows: Vec<Vec<f64>>, class_names: Vec<String>, depths: Vec<usize>, config_hash: String) -> Result<Self> {
        if !matches!(kind, ArchiveKind::Centers | ArchiveKind::Confusion) {
            return Err(Error::InvalidArgument("matrix archives hold centers or confusion matrices".into()));
        }
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged matrix".into()));
        }
        let meta = ArchiveMeta {
            format_version: FORMAT_VERSION,
            kind,
            num_classes: rows.len(),
            class_names,
            depths,
            upsample: None,
            config_hash,
            hidden: None,
            shots: None,
            iterations: None,
            seed: None,
            blobs: vec![BlobInfo {
                name: "matrix.bin".into(),
                rows: rows.len(),
                cols,
            }],
        };
        Ok(Self { meta, rows })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        pack(&self.meta, &[self.rows.concat()])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, blobs) = unpack(bytes)?;
        if !matches!(meta.kind, ArchiveKind::Centers | ArchiveKind::Confusion) || blobs.len() != 1 {
            return Err(Error::Archive("not a matrix archive".into()));
        }
        let cols = meta.blobs[0].cols.max(1);
        let rows = blobs[0].chunks(cols).map(<[f64]>::to_vec).collect();
        Ok(Self { meta, rows })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
