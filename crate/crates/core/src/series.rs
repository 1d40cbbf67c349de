//! Loading, normalizing and synthesizing labeled multivariate series.
//!
//! The on-disk layout is a headered CSV with one row per timestep, `D`
//! numeric value columns and a final integer `Label` column. The training
//! length comes either from an explicit override or from a `tr_<n>` token in
//! the file name (`001_SMD_id_1_Facility_tr_500_1st_800.csv` trains on the
//! first 500 rows).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VaceError};
use crate::matrix::Matrix;

pub const LABEL_COLUMN: &str = "Label";
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub values: Matrix,
    pub train_len: usize,
    /// Test-region labels, `values.rows() - train_len` long.
    pub labels: Option<Vec<u8>>,
    pub name: String,
    pub channel_names: Option<Vec<String>>,
}

impl LabeledSeries {
    pub fn new(values: Matrix, train_len: usize, labels: Option<Vec<u8>>, name: impl Into<String>) -> Result<Self> {
        let t = values.rows();
        if train_len == 0 || train_len >= t {
            return Err(VaceError::Bounds(format!(
                "train_len {train_len} must lie strictly between 0 and T = {t}"
            )));
        }
        if let Some(l) = &labels {
            if l.len() != t - train_len {
                return Err(VaceError::Dimension(format!(
                    "{} labels for a test region of {} timesteps",
                    l.len(),
                    t - train_len
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(VaceError::Format("labels must be 0 or 1".into()));
            }
        }
        if !values.is_finite() {
            return Err(VaceError::Format("series contains non-finite values".into()));
        }
        Ok(Self {
            values,
            train_len,
            labels,
            name: name.into(),
            channel_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn test_len(&self) -> usize {
        self.len() - self.train_len
    }

    pub fn train_values(&self) -> Matrix {
        self.values.slice_rows(0, self.train_len)
    }

    pub fn test_values(&self) -> Matrix {
        self.values.slice_rows(self.train_len, self.len())
    }

    /// Fraction of anomalous test timesteps, zero when unlabeled.
    pub fn anomaly_ratio(&self) -> f64 {
        match &self.labels {
            Some(l) if !l.is_empty() => l.iter().map(|&v| v as f64).sum::<f64>() / l.len() as f64,
            _ => 0.0,
        }
    }
}

/// First `tr_<digits>` token of an underscore-delimited file stem.
pub fn train_len_from_name(file_name: &str) -> Option<usize> {
    let stem = file_name.rsplit(['/', '\\']).next().unwrap_or(file_name);
    let stem = match stem.rfind('.') {
        Some(i) if i > 0 => &stem[..i],
        _ => stem,
    };
    let tokens: Vec<&str> = stem.split('_').collect();
    tokens.windows(2).find_map(|w| {
        if w[0] == "tr" && !w[1].is_empty() && w[1].bytes().all(|b| b.is_ascii_digit()) {
            w[1].parse().ok()
        } else {
            None
        }
    })
}

pub fn load_series(path: impl AsRef<Path>, train_len_override: Option<usize>) -> Result<LabeledSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| VaceError::io(path, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let series_name = path
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.clone());
    let train_len = train_len_override.or_else(|| train_len_from_name(&name));
    let mut series = parse_series(std::io::BufReader::new(file), &series_name, train_len)?;
    series.name = series_name;
    Ok(series)
}

/// Parses the CSV layout from any reader. `train_len` must be supplied here;
/// [`load_series`] resolves it from the file name.
pub fn parse_series<R: Read>(reader: R, name: &str, train_len: Option<usize>) -> Result<LabeledSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| VaceError::Format(format!("unreadable header: {e}")))?
        .clone();
    let n_cols = headers.len();
    if n_cols == 0 || &headers[n_cols - 1] != LABEL_COLUMN {
        return Err(VaceError::Format(format!("missing final `{LABEL_COLUMN}` column")));
    }
    let d = n_cols - 1;
    if d == 0 {
        return Err(VaceError::Format("no value columns".into()));
    }
    let channel_names: Vec<String> = headers.iter().take(d).map(str::to_string).collect();

    let mut data = Vec::new();
    let mut all_labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| VaceError::Format(format!("row {}: {e}", row + 1)))?;
        if record.len() != n_cols {
            return Err(VaceError::Format(format!(
                "row {} has {} fields, expected {n_cols}",
                row + 1,
                record.len()
            )));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| VaceError::Parse {
                row: row + 1,
                column: headers[c].to_string(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(VaceError::Parse {
                    row: row + 1,
                    column: headers[c].to_string(),
                    message: format!("non-finite value `{cell}`"),
                });
            }
            if c < d {
                data.push(v);
            } else if v == 0.0 || v == 1.0 {
                all_labels.push(v as u8);
            } else {
                return Err(VaceError::Parse {
                    row: row + 1,
                    column: LABEL_COLUMN.into(),
                    message: format!("label `{cell}` is not 0 or 1"),
                });
            }
        }
    }
    let t = all_labels.len();
    let train_len = train_len.ok_or_else(|| {
        VaceError::Format(format!(
            "no train length for `{name}`: pass an override or a tr_<n> file name"
        ))
    })?;
    if train_len == 0 || train_len >= t {
        return Err(VaceError::Bounds(format!(
            "train_len {train_len} must lie strictly between 0 and T = {t}"
        )));
    }
    let values = Matrix::from_vec(t, d, data)?;
    let labels = all_labels.split_off(train_len);
    let mut series = LabeledSeries::new(values, train_len, Some(labels), name)?;
    series.channel_names = Some(channel_names);
    Ok(series)
}

/// Writes the same CSV layout [`parse_series`] reads. Training rows carry
/// label 0.
pub fn write_series<W: Write>(series: &LabeledSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = series.channels();
    let mut header: Vec<String> = match &series.channel_names {
        Some(names) if names.len() == d => names.clone(),
        _ => (0..d).map(|c| format!("c{c}")).collect(),
    };
    header.push(LABEL_COLUMN.to_string());
    let csv_err = |e: csv::Error| VaceError::Format(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    let mut fields = Vec::with_capacity(d + 1);
    for t in 0..series.len() {
        fields.clear();
        fields.extend(series.values.row(t).iter().map(|v| v.to_string()));
        let label = if t < series.train_len {
            0
        } else {
            series.labels.as_ref().map_or(0, |l| l[t - series.train_len])
        };
        fields.push(label.to_string());
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush().map_err(|e| VaceError::Format(e.to_string()))?;
    Ok(())
}

pub fn save_series(series: &LabeledSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| VaceError::io(path, e))?;
    write_series(series, std::io::BufWriter::new(file))
}

/// Per-channel z-normalization with statistics from the training rows only.
pub fn znormalize(series: &LabeledSeries) -> LabeledSeries {
    let train = series.train_len;
    let d = series.channels();
    let mut out = series.clone();
    for c in 0..d {
        let mean = (0..train).map(|t| series.values.get(t, c)).sum::<f64>() / train as f64;
        let var = (0..train)
            .map(|t| (series.values.get(t, c) - mean).powi(2))
            .sum::<f64>()
            / train as f64;
        let std = var.sqrt().max(STD_FLOOR);
        for t in 0..series.len() {
            out.values.set(t, c, (series.values.get(t, c) - mean) / std);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Spike,
    LevelShift,
    FrequencyShift,
}

impl AnomalyKind {
    fn segment_len(self) -> usize {
        match self {
            AnomalyKind::Spike => 4,
            AnomalyKind::LevelShift => 40,
            AnomalyKind::FrequencyShift => 60,
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::LevelShift => "level_shift",
            AnomalyKind::FrequencyShift => "frequency_shift",
        })
    }
}

impl FromStr for AnomalyKind {
    type Err = VaceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike" => Ok(AnomalyKind::Spike),
            "level_shift" | "level-shift" => Ok(AnomalyKind::LevelShift),
            "frequency_shift" | "frequency-shift" => Ok(AnomalyKind::FrequencyShift),
            other => Err(VaceError::Config(format!("unknown anomaly kind `{other}`"))),
        }
    }
}

/// Fraction of a synthetic series used for training.
pub const SYNTHETIC_TRAIN_FRACTION: f64 = 0.4;

struct Component {
    amplitude: f64,
    period: f64,
    phase: f64,
}

/// Sums of sinusoids with Gaussian noise; the test region receives
/// contiguous anomalous ranges totalling exactly
/// `ceil(anomaly_ratio * test_len)` timesteps.
pub fn generate_synthetic(
    seed: u64,
    len: usize,
    channels: usize,
    anomaly_ratio: f64,
    kind: AnomalyKind,
) -> Result<LabeledSeries> {
    if len < 400 {
        return Err(VaceError::Bounds(format!("T = {len} is below the minimum of 400")));
    }
    if channels == 0 {
        return Err(VaceError::Bounds("at least one channel is required".into()));
    }
    if !(anomaly_ratio > 0.0 && anomaly_ratio <= 0.2) {
        return Err(VaceError::Bounds(format!(
            "anomaly ratio {anomaly_ratio} outside (0, 0.2]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_len = (len as f64 * SYNTHETIC_TRAIN_FRACTION).round() as usize;
    let test_len = len - train_len;

    // every period and every pairwise beat must repeat at least twice inside
    // the train region, otherwise the test region shows normal regimes the
    // detector never saw
    let cover = train_len as f64 / 2.0;
    let max_period = cover.min(200.0);
    let comps: Vec<Vec<Component>> = (0..channels)
        .map(|_| {
            let n = rng.random_range(2..=3);
            let mut periods: Vec<f64> = Vec::with_capacity(n);
            while periods.len() < n {
                let p: f64 = rng.random_range(20.0..max_period);
                if periods.iter().all(|&q| (1.0 / p - 1.0 / q).abs() * cover >= 1.0) {
                    periods.push(p);
                }
            }
            periods
                .into_iter()
                .map(|period| Component {
                    amplitude: rng.random_range(0.5..1.5),
                    period,
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                })
                .collect()
        })
        .collect();
    let amp: Vec<f64> = comps
        .iter()
        .map(|c| c.iter().map(|k| k.amplitude).fold(0.0, f64::max))
        .collect();

    let anomalous = (anomaly_ratio * test_len as f64).ceil() as usize;
    let seg_nominal = kind.segment_len();
    let n_seg = anomalous.div_ceil(seg_nominal).max(1);
    let slot = test_len / n_seg;
    let mut segments = Vec::with_capacity(n_seg);
    for s in 0..n_seg {
        let seg_len = anomalous / n_seg + usize::from(s < anomalous % n_seg);
        let slot_start = train_len + s * slot;
        // one timestep of margin on each side keeps ranges disjoint
        let room = slot.saturating_sub(seg_len + 2);
        let start = slot_start + 1 + if room > 0 { rng.random_range(0..=room) } else { 0 };
        segments.push((start, seg_len));
    }

    let mut labels = vec![0u8; test_len];
    let mut affected: Vec<Vec<bool>> = Vec::with_capacity(n_seg);
    let mut spike_sign: Vec<f64> = Vec::with_capacity(n_seg);
    for &(start, seg_len) in &segments {
        for t in start..start + seg_len {
            labels[t - train_len] = 1;
        }
        let mut mask: Vec<bool> = (0..channels).map(|_| rng.random_bool(0.5)).collect();
        if !mask.iter().any(|&m| m) {
            let c = rng.random_range(0..channels);
            mask[c] = true;
        }
        affected.push(mask);
        spike_sign.push(if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    }
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut values = Matrix::zeros(len, channels);
    for t in 0..len {
        let seg = segments.iter().position(|&(start, l)| t >= start && t < start + l);
        for c in 0..channels {
            let hit = seg.filter(|&s| affected[s][c]);
            let freq_scale = match (hit, kind) {
                (Some(_), AnomalyKind::FrequencyShift) => 3.0,
                _ => 1.0,
            };
            let mut v: f64 = comps[c]
                .iter()
                .map(|k| k.amplitude * (std::f64::consts::TAU * t as f64 * freq_scale / k.period + k.phase).sin())
                .sum();
            v += 0.05 * amp[c] * noise.sample(&mut rng);
            match (hit, kind) {
                (Some(s), AnomalyKind::Spike) => v += spike_sign[s] * 5.0 * amp[c],
                (Some(_), AnomalyKind::LevelShift) => v += 2.0 * amp[c],
                _ => {}
            }
            values.set(t, c, v);
        }
    }

    let name = format!("synthetic_{kind}_tr_{train_len}_seed_{seed}");
    let mut series = LabeledSeries::new(values, train_len, Some(labels), name)?;
    series.channel_names = Some((0..channels).map(|c| format!("c{c}")).collect());
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_csv() -> &'static str {
        "a,b,Label\n1,2,0\n3,4,0\n5,6,0\n7,8,1\n9,10,0\n"
    }

    #[test]
    fn parses_with_override() {
        let s = parse_series(small_csv().as_bytes(), "x", Some(3)).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.channels(), 2);
        assert_eq!(s.labels.as_deref(), Some(&[1u8, 0][..]));
        assert_eq!(s.values.row(4), &[9.0, 10.0]);
    }

    #[test]
    fn filename_grammar() {
        assert_eq!(train_len_from_name("sensor_tr_500_xyz.csv"), Some(500));
        assert_eq!(
            train_len_from_name("001_Genesis_id_1_Sensor_tr_4055_1st_15538.csv"),
            Some(4055)
        );
        assert_eq!(train_len_from_name("a_tr_12.csv"), Some(12));
        assert_eq!(train_len_from_name("a_tr_7_tr_9"), Some(7));
        assert_eq!(train_len_from_name("str_500.csv"), None);
        assert_eq!(train_len_from_name("a_tr_x5_b.csv"), None);
        assert_eq!(train_len_from_name("a_tr_.csv"), None);
    }

    #[test]
    fn rejects_nan_and_missing_label() {
        let err = parse_series("a,Label\n1,0\nNaN,0\n3,1\n".as_bytes(), "x", Some(1)).unwrap_err();
        match err {
            VaceError::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_series("a,b\n1,0\n".as_bytes(), "x", Some(1)).unwrap_err();
        assert!(matches!(err, VaceError::Format(_)));
        let err = parse_series("a,Label\n1,0\nfoo,0\n".as_bytes(), "x", Some(1)).unwrap_err();
        assert!(matches!(err, VaceError::Parse { .. }));
    }

    #[test]
    fn train_len_bounds() {
        for bad in [0, 5, 9] {
            let err = parse_series(small_csv().as_bytes(), "x", Some(bad)).unwrap_err();
            assert!(matches!(err, VaceError::Bounds(_)), "{bad}");
        }
    }

    #[test]
    fn znormalize_two_point_and_constant() {
        let values = Matrix::from_rows(&[[0.0, 5.0], [2.0, 5.0], [3.0, 5.0]]).unwrap();
        let s = LabeledSeries::new(values, 2, None, "z").unwrap();
        let z = znormalize(&s);
        assert_eq!(z.values.column(0), vec![-1.0, 1.0, 2.0]);
        assert_eq!(z.values.column(1), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn synthetic_label_count_and_determinism() {
        let a = generate_synthetic(1, 1000, 2, 0.05, AnomalyKind::Spike).unwrap();
        let expected = (0.05 * a.test_len() as f64).ceil() as usize;
        let labels = a.labels.as_ref().unwrap();
        assert_eq!(labels.iter().map(|&l| l as usize).sum::<usize>(), expected);
        let b = generate_synthetic(1, 1000, 2, 0.05, AnomalyKind::Spike).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(2, 1000, 2, 0.05, AnomalyKind::Spike).unwrap();
        assert_ne!(a.values, c.values);
        assert!(generate_synthetic(1, 1000, 2, 0.3, AnomalyKind::Spike).is_err());
        assert!(generate_synthetic(1, 1000, 2, 0.0, AnomalyKind::Spike).is_err());
    }
}
