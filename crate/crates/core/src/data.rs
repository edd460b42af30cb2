//! Shower-event records: loading, normalization, synthetic generation,
//! and train/validation/test splits.
//!
//! Each event is a pair of 32x32 grids (peak crystal energy, arrival
//! time) plus a binary label; only the energy grid feeds the models, the
//! timing grid is parsed and carried through untouched. Grid columns are
//! the azimuthal (phi) direction and rows the pseudorapidity (eta)
//! direction, so the default 16x32 central crop keeps the full phi range
//! where the class asymmetry lives.
//!
//! Two file formats are supported (byte-exact layout in docs/FORMATS.md):
//! the HDF5 layout of the public source files, datasets `/X` f32
//! (N, 32, 32, 2) and `/y` f32 (N,), and a self-contained portable format
//! with magic "QVITDATA".

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Grid side length; every event is GRID x GRID.
pub const GRID: usize = 32;
/// Pixels per grid.
pub const GRID_PIXELS: usize = GRID * GRID;

pub const PORTABLE_MAGIC: &[u8; 8] = b"QVITDATA";
pub const PORTABLE_VERSION: u32 = 1;
/// Bytes per portable record: two f32 grids plus an f32 label.
pub const PORTABLE_RECORD_BYTES: u64 = (2 * GRID_PIXELS as u64 + 1) * 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at byte offset {offset}: {reason}")]
    Parse { offset: u64, reason: String },
    #[error("schema error: {reason}")]
    Schema { reason: String },
    #[error(transparent)]
    Hdf5(#[from] hdf5::Error),
    #[error("split fractions sum to {sum}, expected 1")]
    BadFractions { sum: f64 },
    #[error("record {index} has label {value}, expected 0 or 1")]
    BadLabel { index: usize, value: f32 },
    #[error("record {index} contains a non-finite value")]
    NonFinite { index: usize },
    #[error("all-zero energy grid")]
    AllZeroGrid,
}

/// Photon (0) or electron (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Photon,
    Electron,
}

impl Label {
    pub fn from_f32(value: f32, index: usize) -> Result<Self, DataError> {
        if value == 0.0 {
            Ok(Label::Photon)
        } else if value == 1.0 {
            Ok(Label::Electron)
        } else {
            Err(DataError::BadLabel { index, value })
        }
    }

    pub fn as_f32(self) -> f32 {
        match self {
            Label::Photon => 0.0,
            Label::Electron => 1.0,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.as_f32() as f64
    }
}

/// One shower event: energy grid, timing grid (pass-through), label.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub energy: Vec<f32>,
    pub time: Vec<f32>,
    pub label: Label,
}

impl EventRecord {
    pub fn new(energy: Vec<f32>, time: Vec<f32>, label: Label) -> Self {
        debug_assert_eq!(energy.len(), GRID_PIXELS);
        debug_assert_eq!(time.len(), GRID_PIXELS);
        Self {
            energy,
            time,
            label,
        }
    }

    /// Energy grid widened to f64 for the model pipeline.
    pub fn energy_f64(&self) -> Vec<f64> {
        self.energy.iter().map(|&v| v as f64).collect()
    }

    fn check_finite(&self, index: usize) -> Result<(), DataError> {
        if self.energy.iter().chain(&self.time).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(DataError::NonFinite { index })
        }
    }
}

/// Scale the energy grid so its maximum entry is exactly 1; timing is
/// untouched. All-zero grids are rejected. Idempotent (x / 1.0 == x).
pub fn normalize(mut record: EventRecord) -> Result<EventRecord, DataError> {
    let max = record.energy.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Err(DataError::AllZeroGrid);
    }
    for e in &mut record.energy {
        *e /= max;
    }
    Ok(record)
}

/// Normalize a batch, dropping rejected records; returns the survivors and
/// the rejection count (logged when nonzero).
pub fn normalize_all(records: Vec<EventRecord>) -> (Vec<EventRecord>, usize) {
    let total = records.len();
    let kept: Vec<EventRecord> = records
        .into_iter()
        .filter_map(|r| normalize(r).ok())
        .collect();
    let rejected = total - kept.len();
    if rejected > 0 {
        log::warn!("normalize: rejected {rejected} all-zero record(s) of {total}");
    }
    (kept, rejected)
}

/// Count of (photons, electrons).
pub fn count_labels(records: &[EventRecord]) -> (usize, usize) {
    let electrons = records
        .iter()
        .filter(|r| r.label == Label::Electron)
        .count();
    (records.len() - electrons, electrons)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Statistical stand-in for the shower dataset: one Gaussian deposit per
/// event with Poisson pixel noise. Electrons are wider in phi (columns)
/// and carry a bremsstrahlung-like secondary deposit displaced in +phi;
/// photons are isotropic. Every event also draws an overall spread
/// multiplier, so the class signal is the phi/eta width *ratio* rather
/// than any absolute width; that keeps a linear pixel probe well below a
/// trained transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub photon_sigma_phi: f64,
    pub photon_sigma_eta: f64,
    pub electron_sigma_phi: f64,
    pub electron_sigma_eta: f64,
    /// Secondary-deposit amplitude as a fraction of the main peak
    /// (electrons only; 0 disables it).
    pub electron_tail_fraction: f64,
    /// Secondary-deposit displacement in +phi, pixels.
    pub electron_tail_shift: f64,
    /// Poisson rate at the main-profile peak; lower is noisier.
    pub peak_counts: f64,
    /// Uniform sub-pixel jitter of the deposit center, per axis.
    pub center_jitter: f64,
    /// Per-event overall spread multiplier, uniform in this range.
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            photon_sigma_phi: 1.15,
            photon_sigma_eta: 1.15,
            electron_sigma_phi: 1.72,
            electron_sigma_eta: 1.15,
            electron_tail_fraction: 0.12,
            electron_tail_shift: 1.8,
            peak_counts: 16.0,
            center_jitter: 0.4,
            scale_min: 0.65,
            scale_max: 2.2,
        }
    }
}

impl SynthParams {
    /// Electron parameters collapsed onto the photon ones: the two classes
    /// become identically distributed.
    pub fn symmetric(&self) -> Self {
        Self {
            electron_sigma_phi: self.photon_sigma_phi,
            electron_sigma_eta: self.photon_sigma_eta,
            electron_tail_fraction: 0.0,
            electron_tail_shift: 0.0,
            ..self.clone()
        }
    }
}

/// Generate `n` normalized synthetic events, alternating photon/electron
/// so the label marginal is exactly 50/50 for even `n`. Deterministic in
/// the seed.
pub fn synth_generate(n: usize, seed: u64, params: &SynthParams) -> Vec<EventRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 {
            Label::Photon
        } else {
            Label::Electron
        };
        loop {
            let record = synth_event(&mut rng, label, params);
            // Poisson noise can in principle zero the whole grid; regenerate.
            match normalize(record) {
                Ok(normalized) => {
                    records.push(normalized);
                    break;
                }
                Err(DataError::AllZeroGrid) => continue,
                Err(e) => unreachable!("synth produced invalid record: {e}"),
            }
        }
    }
    records
}

fn synth_event(rng: &mut ChaCha8Rng, label: Label, p: &SynthParams) -> EventRecord {
    let center = (GRID / 2) as f64;
    let scale = if p.scale_max > p.scale_min {
        rng.gen_range(p.scale_min..=p.scale_max)
    } else {
        p.scale_min
    };
    let jitter = |rng: &mut ChaCha8Rng| {
        if p.center_jitter > 0.0 {
            rng.gen_range(-p.center_jitter..=p.center_jitter)
        } else {
            0.0
        }
    };
    let c_eta = center + jitter(rng);
    let c_phi = center + jitter(rng);
    let (sigma_phi, sigma_eta, tail_fraction) = match label {
        Label::Photon => (p.photon_sigma_phi * scale, p.photon_sigma_eta * scale, 0.0),
        Label::Electron => (
            p.electron_sigma_phi * scale,
            p.electron_sigma_eta * scale,
            p.electron_tail_fraction,
        ),
    };

    let mut energy = vec![0.0f32; GRID_PIXELS];
    for r in 0..GRID {
        for c in 0..GRID {
            let d_eta = r as f64 - c_eta;
            let d_phi = c as f64 - c_phi;
            let main = (-(d_phi * d_phi) / (2.0 * sigma_phi * sigma_phi)
                - (d_eta * d_eta) / (2.0 * sigma_eta * sigma_eta))
                .exp();
            let mut profile = main;
            if tail_fraction > 0.0 {
                let d_tail = d_phi - p.electron_tail_shift;
                profile += tail_fraction
                    * (-(d_tail * d_tail) / (2.0 * sigma_phi * sigma_phi)
                        - (d_eta * d_eta) / (2.0 * sigma_eta * sigma_eta))
                        .exp();
            }
            let rate = p.peak_counts * profile;
            if rate > 1e-9 {
                let counts = Poisson::new(rate).expect("positive rate").sample(rng);
                energy[r * GRID + c] = counts as f32;
            }
        }
    }
    // Mirror the detector pipeline: the stored grid is centered on the
    // maximum-energy crystal.
    let energy = recenter_on_max(&energy);
    EventRecord::new(energy, vec![0.0; GRID_PIXELS], label)
}

/// Shift a grid so its (first) maximum lands on the center pixel; cells
/// shifted in from outside are zero.
fn recenter_on_max(energy: &[f32]) -> Vec<f32> {
    let mut best = 0;
    for (i, &v) in energy.iter().enumerate() {
        if v > energy[best] {
            best = i;
        }
    }
    let (br, bc) = ((best / GRID) as isize, (best % GRID) as isize);
    let center = (GRID / 2) as isize;
    let (dr, dc) = (center - br, center - bc);
    if dr == 0 && dc == 0 {
        return energy.to_vec();
    }
    let mut out = vec![0.0f32; GRID_PIXELS];
    for r in 0..GRID as isize {
        for c in 0..GRID as isize {
            let (sr, sc) = (r - dr, c - dc);
            if (0..GRID as isize).contains(&sr) && (0..GRID as isize).contains(&sc) {
                out[(r * GRID as isize + c) as usize] = energy[(sr * GRID as isize + sc) as usize];
            }
        }
    }
    out
}

/// Energy-weighted standard deviation along the phi (column) axis.
pub fn phi_spread(record: &EventRecord) -> f64 {
    let mut total = 0.0;
    let mut mean = 0.0;
    for r in 0..GRID {
        for c in 0..GRID {
            let w = record.energy[r * GRID + c] as f64;
            total += w;
            mean += w * c as f64;
        }
    }
    if total == 0.0 {
        return 0.0;
    }
    mean /= total;
    let mut var = 0.0;
    for r in 0..GRID {
        for c in 0..GRID {
            let w = record.energy[r * GRID + c] as f64;
            var += w * (c as f64 - mean) * (c as f64 - mean);
        }
    }
    (var / total).sqrt()
}

/// True when the brightest pixel is at or adjacent to the grid center
/// (the centering property of the source data, checked on synthetic data).
pub fn argmax_near_center(record: &EventRecord) -> bool {
    let mut best = 0;
    for (i, &v) in record.energy.iter().enumerate() {
        if v > record.energy[best] {
            best = i;
        }
    }
    let (r, c) = (best / GRID, best % GRID);
    let center = GRID / 2;
    r.abs_diff(center) <= 1 && c.abs_diff(center) <= 1
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Disjoint covering index lists, stratified by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub fractions: [f64; 3],
}

/// Seeded stratified split. Within each class the indices are shuffled and
/// cut at the cumulative fractions; each split is then shuffled once more
/// so prefixes stay label-balanced.
pub fn split(
    records: &[EventRecord],
    fractions: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(DataError::BadFractions { sum });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_label: HashMap<Label, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        by_label.entry(r.label).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    // Fixed class order keeps the split independent of HashMap iteration.
    for label in [Label::Photon, Label::Electron] {
        let Some(mut indices) = by_label.remove(&label) else {
            continue;
        };
        indices.shuffle(&mut rng);
        let n = indices.len() as f64;
        let c1 = (fractions[0] * n).round() as usize;
        let c2 = ((fractions[0] + fractions[1]) * n).round() as usize;
        let c1 = c1.min(indices.len());
        let c2 = c2.clamp(c1, indices.len());
        train.extend_from_slice(&indices[..c1]);
        val.extend_from_slice(&indices[c1..c2]);
        test.extend_from_slice(&indices[c2..]);
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
        fractions,
    })
}

impl DatasetSplit {
    pub fn gather<'a>(&self, which: &str, records: &'a [EventRecord]) -> Vec<&'a EventRecord> {
        let idx = match which {
            "train" => &self.train,
            "val" => &self.val,
            "test" => &self.test,
            other => panic!("unknown split {other:?}"),
        };
        idx.iter().map(|&i| &records[i]).collect()
    }
}

// ---------------------------------------------------------------------------
// Portable format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Portable,
    Hdf5,
}

impl DataFormat {
    pub fn tag(self) -> &'static str {
        match self {
            DataFormat::Portable => "portable",
            DataFormat::Hdf5 => "hdf5",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "portable" => Some(DataFormat::Portable),
            "hdf5" => Some(DataFormat::Hdf5),
            _ => None,
        }
    }
}

pub fn write_portable(path: &Path, records: &[EventRecord]) -> Result<(), DataError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(PORTABLE_MAGIC)?;
    out.write_all(&PORTABLE_VERSION.to_le_bytes())?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        for &v in r.energy.iter().chain(&r.time) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&r.label.as_f32().to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Streaming reader over either on-disk format.
pub enum EventReader {
    Portable(PortableReader),
    Hdf5(Hdf5Reader),
}

impl EventReader {
    /// Declared number of records.
    pub fn len(&self) -> usize {
        match self {
            EventReader::Portable(r) => r.total,
            EventReader::Hdf5(r) => r.total,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Iterator for EventReader {
    type Item = Result<EventRecord, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            EventReader::Portable(r) => r.next_record(),
            EventReader::Hdf5(r) => r.next_record(),
        }
    }
}

/// Open a dataset file and validate its schema; records are yielded
/// lazily and validated (finite values, 0/1 labels) as they stream.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<EventReader, DataError> {
    match format {
        DataFormat::Portable => Ok(EventReader::Portable(PortableReader::open(path)?)),
        DataFormat::Hdf5 => Ok(EventReader::Hdf5(Hdf5Reader::open(path)?)),
    }
}

/// Load up to `limit` records into memory.
pub fn load_all(
    path: &Path,
    format: DataFormat,
    limit: Option<usize>,
) -> Result<Vec<EventRecord>, DataError> {
    let reader = load_dataset(path, format)?;
    let take = limit.unwrap_or(usize::MAX);
    reader.take(take).collect()
}

pub struct PortableReader {
    file: BufReader<std::fs::File>,
    total: usize,
    cursor: usize,
    offset: u64,
}

impl PortableReader {
    fn open(path: &Path) -> Result<Self, DataError> {
        let mut file = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(|_| DataError::Schema {
            reason: "file too short for the magic header".into(),
        })?;
        if &magic != PORTABLE_MAGIC {
            return Err(DataError::Schema {
                reason: format!("bad magic {magic:?}, expected {PORTABLE_MAGIC:?}"),
            });
        }
        let mut version = [0u8; 4];
        file.read_exact(&mut version)
            .map_err(|_| DataError::Schema {
                reason: "file too short for the version field".into(),
            })?;
        let version = u32::from_le_bytes(version);
        if version != PORTABLE_VERSION {
            return Err(DataError::Schema {
                reason: format!("unsupported version {version}"),
            });
        }
        let mut count = [0u8; 8];
        file.read_exact(&mut count).map_err(|_| DataError::Schema {
            reason: "file too short for the record count".into(),
        })?;
        let total = u64::from_le_bytes(count) as usize;
        Ok(Self {
            file,
            total,
            cursor: 0,
            offset: 20,
        })
    }

    fn next_record(&mut self) -> Option<Result<EventRecord, DataError>> {
        if self.cursor >= self.total {
            return None;
        }
        let index = self.cursor;
        self.cursor += 1;
        Some(self.read_one(index))
    }

    fn read_one(&mut self, index: usize) -> Result<EventRecord, DataError> {
        let start = self.offset;
        let mut buf = vec![0u8; PORTABLE_RECORD_BYTES as usize];
        self.file
            .read_exact(&mut buf)
            .map_err(|_| DataError::Parse {
                offset: start,
                reason: format!("record {index} truncated"),
            })?;
        self.offset += PORTABLE_RECORD_BYTES;
        let mut floats = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let energy: Vec<f32> = floats.by_ref().take(GRID_PIXELS).collect();
        let time: Vec<f32> = floats.by_ref().take(GRID_PIXELS).collect();
        let label_value = floats.next().expect("record buffer sized");
        let label = Label::from_f32(label_value, index).map_err(|_| DataError::Parse {
            offset: start + PORTABLE_RECORD_BYTES - 4,
            reason: format!("record {index} label {label_value} is not 0 or 1"),
        })?;
        let record = EventRecord::new(energy, time, label);
        record.check_finite(index).map_err(|_| DataError::Parse {
            offset: start,
            reason: format!("record {index} contains non-finite values"),
        })?;
        Ok(record)
    }
}

// ---------------------------------------------------------------------------
// HDF5 layout
// ---------------------------------------------------------------------------

const HDF5_CHUNK: usize = 256;

pub fn write_hdf5(path: &Path, records: &[EventRecord]) -> Result<(), DataError> {
    let file = hdf5::File::create(path)?;
    let n = records.len();
    let mut x = Vec::with_capacity(n * GRID_PIXELS * 2);
    for r in records {
        for i in 0..GRID_PIXELS {
            x.push(r.energy[i]);
            x.push(r.time[i]);
        }
    }
    let xs = file
        .new_dataset::<f32>()
        .shape((n, GRID, GRID, 2))
        .create("X")?;
    xs.as_writer().write_raw(&x)?;
    let ys = file.new_dataset::<f32>().shape((n,)).create("y")?;
    let labels: Vec<f32> = records.iter().map(|r| r.label.as_f32()).collect();
    ys.as_writer().write_raw(&labels)?;
    Ok(())
}

pub struct Hdf5Reader {
    x: hdf5::Dataset,
    labels: Vec<f32>,
    total: usize,
    cursor: usize,
    buffer: Vec<EventRecord>,
    buffer_start: usize,
}

impl Hdf5Reader {
    fn open(path: &Path) -> Result<Self, DataError> {
        let file = hdf5::File::open(path)?;
        let x = file.dataset("X").map_err(|_| DataError::Schema {
            reason: "missing dataset /X".into(),
        })?;
        let y = file.dataset("y").map_err(|_| DataError::Schema {
            reason: "missing dataset /y".into(),
        })?;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != GRID || shape[2] != GRID || shape[3] != 2 {
            return Err(DataError::Schema {
                reason: format!("/X has shape {shape:?}, expected (N, {GRID}, {GRID}, 2)"),
            });
        }
        let total = shape[0];
        if y.shape() != [total] {
            return Err(DataError::Schema {
                reason: format!(
                    "/y has shape {:?}, expected ({total},) to match /X",
                    y.shape()
                ),
            });
        }
        let labels = y.read_raw::<f32>()?;
        Ok(Self {
            x,
            labels,
            total,
            cursor: 0,
            buffer: Vec::new(),
            buffer_start: 0,
        })
    }

    fn next_record(&mut self) -> Option<Result<EventRecord, DataError>> {
        if self.cursor >= self.total {
            return None;
        }
        if self.cursor >= self.buffer_start + self.buffer.len() {
            if let Err(e) = self.refill() {
                self.cursor = self.total;
                return Some(Err(e));
            }
        }
        let record = self.buffer[self.cursor - self.buffer_start].clone();
        let index = self.cursor;
        self.cursor += 1;
        match record.check_finite(index) {
            Ok(()) => Some(Ok(record)),
            Err(e) => Some(Err(e)),
        }
    }

    fn refill(&mut self) -> Result<(), DataError> {
        let start = self.cursor;
        let end = (start + HDF5_CHUNK).min(self.total);
        let slab: ndarray::Array4<f32> = self.x.read_slice(ndarray::s![start..end, .., .., ..])?;
        let mut buffer = Vec::with_capacity(end - start);
        for (i, event) in slab.outer_iter().enumerate() {
            let index = start + i;
            let mut energy = Vec::with_capacity(GRID_PIXELS);
            let mut time = Vec::with_capacity(GRID_PIXELS);
            for r in 0..GRID {
                for c in 0..GRID {
                    energy.push(event[[r, c, 0]]);
                    time.push(event[[r, c, 1]]);
                }
            }
            let label = Label::from_f32(self.labels[index], index)?;
            buffer.push(EventRecord::new(energy, time, label));
        }
        self.buffer = buffer;
        self.buffer_start = start;
        Ok(())
    }
}

/// SHA-256 of a file's raw bytes, hex-encoded; used to pin the exact
/// dataset in run manifests.
pub fn file_sha256(path: &Path) -> Result<String, DataError> {
    let mut file = BufReader::new(std::fs::File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
