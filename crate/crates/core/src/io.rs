//! Dataset manifests, little-endian float payloads and scene checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::SpectrumFrame;
use crate::scene::{AngularGrid, RFScene};
use crate::train::TrainConfig;
use crate::{Complex, Vec3};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Spectrum,
    Rssi,
    Csi,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Spectrum => "spectrum",
            Mode::Rssi => "rssi",
            Mode::Csi => "csi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub tx: Vec3,
    pub split: Split,
    /// Payload path relative to the manifest.
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub mode: Mode,
    pub n_az: usize,
    pub n_el: usize,
    pub cell_deg: f64,
    pub carrier_freq: f64,
    pub rx: Vec3,
    /// Values per sample for CSI, 1 otherwise.
    pub channels: usize,
    pub samples: Vec<SampleEntry>,
}

/// Measured quantity of one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Spectrum(SpectrumFrame),
    /// Received power in dBm.
    Rssi(f64),
    Csi(Vec<Complex>),
}

impl Target {
    pub fn mode(&self) -> Mode {
        match self {
            Target::Spectrum(_) => Mode::Spectrum,
            Target::Rssi(_) => Mode::Rssi,
            Target::Csi(_) => Mode::Csi,
        }
    }

    /// Round every value through `f32`, as stored on disk.
    pub fn quantized(&self) -> Self {
        let q = |x: f64| x as f32 as f64;
        match self {
            Target::Spectrum(f) => Target::Spectrum(SpectrumFrame {
                data: f.data.iter().map(|&x| q(x)).collect(),
                ..f.clone()
            }),
            Target::Rssi(x) => Target::Rssi(q(*x)),
            Target::Csi(v) => Target::Csi(v.iter().map(|z| Complex::new(q(z.re), q(z.im))).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub tx: Vec3,
    pub split: Split,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mode: Mode,
    pub grid: AngularGrid,
    pub carrier_freq: f64,
    pub rx: Vec3,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.channels == 0 {
            return Err(Error::Data("channels must be at least 1".into()));
        }
        if self.mode != Mode::Csi && self.channels != 1 {
            return Err(Error::Data(format!(
                "{} datasets carry one channel, found {}",
                self.mode.name(),
                self.channels
            )));
        }
        for s in &self.samples {
            if s.target.mode() != self.mode {
                return Err(Error::Data(format!(
                    "sample {} is {} in a {} dataset",
                    s.id,
                    s.target.mode().name(),
                    self.mode.name()
                )));
            }
            match &s.target {
                Target::Spectrum(f) if (f.n_az, f.n_el) != (self.grid.n_az, self.grid.n_el) => {
                    return Err(Error::shape(
                        format!("{}x{}", self.grid.n_az, self.grid.n_el),
                        format!("{}x{}", f.n_az, f.n_el),
                    ))
                }
                Target::Csi(v) if v.len() != self.channels => return Err(Error::shape(self.channels, v.len())),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Parse JSON with the failing field path in the error.
pub fn from_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn check_version(bytes: &[u8]) -> Result<()> {
    #[derive(Deserialize)]
    struct Probe {
        format_version: u32,
    }
    let probe: Probe = from_json(bytes)?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: probe.format_version,
        });
    }
    Ok(())
}

pub fn encode_f32(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|x| (x as f32).to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Data(format!(
            "payload length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn encode_target(t: &Target) -> Vec<u8> {
    match t {
        Target::Spectrum(f) => encode_f32(f.data.iter().copied()),
        Target::Rssi(x) => encode_f32([*x]),
        Target::Csi(v) => encode_f32(v.iter().flat_map(|z| [z.re, z.im])),
    }
}

fn decode_target(bytes: &[u8], m: &DatasetManifest) -> Result<Target> {
    let v = decode_f32(bytes)?;
    let expected = match m.mode {
        Mode::Spectrum => m.n_az * m.n_el,
        Mode::Rssi => 1,
        Mode::Csi => 2 * m.channels,
    };
    if v.len() != expected {
        return Err(Error::Data(format!(
            "payload holds {} values, expected {expected}",
            v.len()
        )));
    }
    Ok(match m.mode {
        Mode::Spectrum => Target::Spectrum(SpectrumFrame::new(m.n_az, m.n_el, v)?),
        Mode::Rssi => Target::Rssi(v[0]),
        Mode::Csi => Target::Csi(v.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect()),
    })
}

/// Write `manifest.json` plus one payload file per sample under `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    data.validate()?;
    fs::create_dir_all(dir.join("samples"))?;
    let mut entries = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let payload = format!("samples/{}.f32", s.id);
        fs::write(dir.join(&payload), encode_target(&s.target))?;
        entries.push(SampleEntry {
            id: s.id.clone(),
            tx: s.tx,
            split: s.split,
            payload,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        mode: data.mode,
        n_az: data.grid.n_az,
        n_el: data.grid.n_el,
        cell_deg: data.grid.cell_deg,
        carrier_freq: data.carrier_freq,
        rx: data.rx,
        channels: data.channels,
        samples: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), to_json(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    check_version(&bytes)?;
    from_json(&bytes)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let grid = AngularGrid::new(m.n_az, m.n_el, m.cell_deg)?;
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in &m.samples {
        let path: PathBuf = dir.join(&e.payload);
        let bytes = fs::read(&path).map_err(|err| Error::Data(format!("{}: {err}", path.display())))?;
        samples.push(Sample {
            id: e.id.clone(),
            tx: e.tx,
            split: e.split,
            target: decode_target(&bytes, &m).map_err(|err| Error::Data(format!("{}: {err}", path.display())))?,
        });
    }
    let data = Dataset {
        mode: m.mode,
        grid,
        carrier_freq: m.carrier_freq,
        rx: m.rx,
        channels: m.channels,
        samples,
    };
    data.validate()?;
    Ok(data)
}

/// Saved scene with the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneCheckpoint {
    pub format_version: u32,
    pub iteration: usize,
    pub config: TrainConfig,
    pub scene: RFScene,
}

impl SceneCheckpoint {
    pub fn new(iteration: usize, config: &TrainConfig, scene: &RFScene) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            iteration,
            config: config.clone(),
            scene: scene.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        to_json(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_version(bytes)?;
        let c: Self = from_json(bytes)?;
        c.scene.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::random_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(mode: Mode) -> Dataset {
        let grid = AngularGrid::full_sphere(8, 4).unwrap();
        let channels = if mode == Mode::Csi { 3 } else { 1 };
        let samples = (0..4)
            .map(|i| Sample {
                id: format!("{i:04}"),
                tx: Vec3::new(i as f64 + 0.1, -1.0 / 3.0, 2.0),
                split: if i == 3 { Split::Test } else { Split::Train },
                target: match mode {
                    Mode::Spectrum => Target::Spectrum(
                        SpectrumFrame::new(8, 4, (0..32).map(|k| (k * i) as f64 / 7.0).collect()).unwrap(),
                    ),
                    Mode::Rssi => Target::Rssi(-40.0 - i as f64 / 3.0),
                    Mode::Csi => Target::Csi((0..3).map(|k| Complex::new(k as f64 / 3.0, -(i as f64))).collect()),
                },
            })
            .collect();
        Dataset {
            mode,
            grid,
            carrier_freq: 2.4e9,
            rx: Vec3::zeros(),
            channels,
            samples,
        }
    }

    #[test]
    fn dataset_roundtrip_to_f32_precision() {
        for mode in [Mode::Spectrum, Mode::Rssi, Mode::Csi] {
            let dir = tempfile::tempdir().unwrap();
            let data = dataset(mode);
            write_dataset(dir.path(), &data).unwrap();
            let back = read_dataset(dir.path()).unwrap();
            let want = Dataset {
                samples: data
                    .samples
                    .iter()
                    .map(|s| Sample {
                        target: s.target.quantized(),
                        ..s.clone()
                    })
                    .collect(),
                ..data.clone()
            };
            assert_eq!(back, want);
        }
    }

    #[test]
    fn payload_is_little_endian_u_major() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &dataset(Mode::Spectrum)).unwrap();
        let bytes = fs::read(dir.path().join("samples/0002.f32")).unwrap();
        assert_eq!(bytes.len(), 32 * 4);
        // Cell (u=1, v=0) is the fifth value.
        let v = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
        assert_eq!(v, (4.0f64 * 2.0 / 7.0) as f32);
    }

    #[test]
    fn missing_field_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &dataset(Mode::Rssi)).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut json: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        json["samples"][1].as_object_mut().unwrap().remove("tx");
        fs::write(&path, serde_json::to_vec(&json).unwrap()).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Schema { path, message }) => {
                assert_eq!(path, "samples[1]");
                assert!(message.contains("tx"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_payload_size_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &dataset(Mode::Spectrum)).unwrap();
        fs::write(dir.path().join("samples/0001.f32"), [0u8; 12]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn version_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &dataset(Mode::Rssi)).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::Version { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn mixed_modes_are_rejected() {
        let mut d = dataset(Mode::Rssi);
        d.samples[2].target = Target::Csi(vec![Complex::new(0.0, 0.0)]);
        assert!(d.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = random_scene(&mut rng, 5, AngularGrid::full_sphere(16, 8).unwrap(), 3, 2);
        let c = SceneCheckpoint::new(17, &TrainConfig::default(), &scene);
        let a = c.to_bytes().unwrap();
        let back = SceneCheckpoint::from_bytes(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn checkpoint_version_mismatch_fails() {
        let scene = random_scene(
            &mut ChaCha8Rng::seed_from_u64(2),
            1,
            AngularGrid::full_sphere(16, 8).unwrap(),
            1,
            1,
        );
        let text = String::from_utf8(
            SceneCheckpoint::new(0, &TrainConfig::default(), &scene)
                .to_bytes()
                .unwrap(),
        )
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            SceneCheckpoint::from_bytes(text.as_bytes()),
            Err(Error::Version { expected: 1, found: 2 })
        ));
    }
}
