//! CSV ingestion, chronological splits, sliding windows and reversible
//! per-instance normalization.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path} has no data rows")]
    Empty { path: String },
    #[error("unparseable number {value:?} at row {row}, column {column}")]
    BadCell {
        value: String,
        row: usize,
        column: String,
    },
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios([f64; 3]),
    #[error("{name} segment has {len} rows, need at least {need} for one window")]
    SegmentTooShort {
        name: &'static str,
        len: usize,
        need: usize,
    },
    #[error("series length {len} is shorter than one window ({need})")]
    TooShort { len: usize, need: usize },
    #[error("window parameters must be at least 1 (I={input}, O={horizon}, stride={stride})")]
    BadWindow {
        input: usize,
        horizon: usize,
        stride: usize,
    },
    #[error("stats are for {expected} instances × {features} features, got {got:?}")]
    StatsMismatch {
        expected: usize,
        features: usize,
        got: Vec<usize>,
    },
}

/// A multivariate series: T timesteps × D features, NaN-free.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesDataset {
    /// Row-major T×D values.
    values: Vec<f64>,
    num_features: usize,
    pub feature_names: Vec<String>,
    /// Free-form sampling-frequency label ("hourly", "15min", ...).
    pub frequency: String,
    /// Rows discarded at load time because a cell was empty or NaN.
    pub dropped_rows: usize,
}

impl SeriesDataset {
    pub fn from_values(
        values: Vec<f64>,
        num_features: usize,
        feature_names: Vec<String>,
        frequency: String,
    ) -> Self {
        assert_eq!(values.len() % num_features.max(1), 0);
        SeriesDataset {
            values,
            num_features,
            feature_names,
            frequency,
            dropped_rows: 0,
        }
    }

    /// Number of timesteps T.
    pub fn len(&self) -> usize {
        if self.num_features == 0 {
            0
        } else {
            self.values.len() / self.num_features
        }
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of features D.
    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.num_features..(t + 1) * self.num_features]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Load a header-first CSV. A leading column named `date` (case-insensitive,
/// or whatever `date_column` names) is dropped from the numeric matrix. Rows
/// with an empty or NaN cell are discarded and counted in `dropped_rows`.
pub fn load_csv(path: &Path, date_column: Option<&str>) -> Result<SeriesDataset, DataError> {
    let pstr = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|source| DataError::Csv {
            path: pstr.clone(),
            source,
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: pstr.clone(),
            source,
        })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let date_name = date_column.unwrap_or("date");
    let skip_first = headers
        .first()
        .is_some_and(|h| h.eq_ignore_ascii_case(date_name));
    let feature_names: Vec<String> = headers
        .iter()
        .skip(usize::from(skip_first))
        .cloned()
        .collect();
    let d = feature_names.len();

    let mut values = Vec::new();
    let mut dropped = 0usize;
    for (ri, record) in reader.records().enumerate() {
        let record = record.map_err(|source| DataError::Csv {
            path: pstr.clone(),
            source,
        })?;
        let mut row = Vec::with_capacity(d);
        let mut drop_row = false;
        for (ci, cell) in record.iter().skip(usize::from(skip_first)).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                drop_row = true;
                break;
            }
            let v: f64 = cell.parse().map_err(|_| DataError::BadCell {
                value: cell.to_string(),
                row: ri + 2, // 1-based, after the header
                column: feature_names.get(ci).cloned().unwrap_or_default(),
            })?;
            if v.is_nan() {
                drop_row = true;
                break;
            }
            row.push(v);
        }
        if drop_row {
            dropped += 1;
        } else {
            values.extend_from_slice(&row);
        }
    }
    if values.is_empty() {
        return Err(DataError::Empty { path: pstr });
    }
    Ok(SeriesDataset {
        values,
        num_features: d,
        feature_names,
        frequency: String::new(),
        dropped_rows: dropped,
    })
}

/// Cut the series into contiguous train/val/test segments. Lengths are
/// `floor(T·ratio)` for train and val; the remainder goes to test. Each
/// segment must fit at least one `min_window`-row window.
pub fn chronological_split(
    ds: &SeriesDataset,
    ratios: (f64, f64, f64),
    min_window: usize,
) -> Result<(SeriesDataset, SeriesDataset, SeriesDataset), DataError> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| x <= 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(r));
    }
    let t = ds.len();
    let n_train = (t as f64 * ratios.0).floor() as usize;
    let n_val = (t as f64 * ratios.1).floor() as usize;
    let n_test = t - n_train - n_val;
    let segments = [("train", 0, n_train), ("val", n_train, n_val), ("test", n_train + n_val, n_test)];
    let mut out = Vec::with_capacity(3);
    for (name, start, len) in segments {
        if len < min_window {
            return Err(DataError::SegmentTooShort {
                name,
                len,
                need: min_window,
            });
        }
        let d = ds.num_features;
        out.push(SeriesDataset {
            values: ds.values[start * d..(start + len) * d].to_vec(),
            num_features: d,
            feature_names: ds.feature_names.clone(),
            frequency: ds.frequency.clone(),
            dropped_rows: 0,
        });
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok((train, val, test))
}

/// A batch of forecasting windows: `inputs` is B×I×D and `targets` is B×O×D,
/// with each target slice starting exactly where its input slice ends.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl WindowBatch {
    pub fn batch_size(&self) -> usize {
        self.inputs.shape()[0]
    }
}

/// Start offsets of every window of `input_len + horizon` rows at the given
/// stride, optionally shuffled with a seeded RNG.
pub fn window_starts(
    t: usize,
    input_len: usize,
    horizon: usize,
    stride: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<usize>, DataError> {
    if input_len < 1 || horizon < 1 || stride < 1 {
        return Err(DataError::BadWindow {
            input: input_len,
            horizon,
            stride,
        });
    }
    let need = input_len + horizon;
    if t < need {
        return Err(DataError::TooShort { len: t, need });
    }
    let mut starts: Vec<usize> = (0..=t - need).step_by(stride).collect();
    if let Some(seed) = shuffle_seed {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        starts.shuffle(&mut rng);
    }
    Ok(starts)
}

/// Materialize the windows at `starts` into batches of at most `batch_size`.
pub fn make_windows(
    ds: &SeriesDataset,
    starts: &[usize],
    input_len: usize,
    horizon: usize,
    batch_size: usize,
) -> Vec<WindowBatch> {
    let d = ds.num_features;
    starts
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let b = chunk.len();
            let mut inputs = Vec::with_capacity(b * input_len * d);
            let mut targets = Vec::with_capacity(b * horizon * d);
            for &s in chunk {
                inputs.extend_from_slice(&ds.values[s * d..(s + input_len) * d]);
                targets.extend_from_slice(
                    &ds.values[(s + input_len) * d..(s + input_len + horizon) * d],
                );
            }
            WindowBatch {
                inputs: Tensor::new(vec![b, input_len, d], inputs).expect("sized above"),
                targets: Tensor::new(vec![b, horizon, d], targets).expect("sized above"),
            }
        })
        .collect()
}

/// Per-instance, per-feature mean and standard deviation of an input window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    /// B×D means.
    pub mean: Tensor,
    /// B×D standard deviations, floored at epsilon.
    pub std: Tensor,
}

pub const NORM_EPSILON: f64 = 1e-5;

/// Standardize each (instance, feature) lane of a B×I×D window using the
/// population statistics of its own input span.
pub fn instance_normalize(x: &Tensor) -> (Tensor, NormStats) {
    let (b, i, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut mean = vec![0.0; b * d];
    let mut std = vec![0.0; b * d];
    let mut z = vec![0.0; x.len()];
    for bi in 0..b {
        for di in 0..d {
            let mut m = 0.0;
            for ti in 0..i {
                m += x.data()[bi * i * d + ti * d + di];
            }
            m /= i as f64;
            let mut v = 0.0;
            for ti in 0..i {
                let c = x.data()[bi * i * d + ti * d + di] - m;
                v += c * c;
            }
            let s = (v / i as f64).sqrt().max(NORM_EPSILON);
            mean[bi * d + di] = m;
            std[bi * d + di] = s;
            for ti in 0..i {
                let k = bi * i * d + ti * d + di;
                z[k] = (x.data()[k] - m) / s;
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), z).expect("shape preserved"),
        NormStats {
            mean: Tensor::new(vec![b, d], mean).expect("sized above"),
            std: Tensor::new(vec![b, d], std).expect("sized above"),
        },
    )
}

/// Invert [`instance_normalize`] on a B×O×D tensor: `o·std + mean`, with the
/// B×D statistics broadcast over the middle axis.
pub fn instance_denormalize(o: &Tensor, stats: &NormStats) -> Result<Tensor, DataError> {
    let (b, n, d) = (o.shape()[0], o.shape()[1], o.shape()[2]);
    if stats.mean.shape() != [b, d] || stats.std.shape() != [b, d] {
        return Err(DataError::StatsMismatch {
            expected: b,
            features: d,
            got: stats.mean.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; o.len()];
    for bi in 0..b {
        for ti in 0..n {
            for di in 0..d {
                let k = bi * n * d + ti * d + di;
                out[k] = o.data()[k] * stats.std.data()[bi * d + di]
                    + stats.mean.data()[bi * d + di];
            }
        }
    }
    Ok(Tensor::new(o.shape().to_vec(), out).expect("shape preserved"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_a_dated_csv_and_drops_the_date_column() {
        let f = write_csv("date,a,b\n2020-01-01,1.0,2.0\n2020-01-02,3.0,4.0\n2020-01-03,5,6\n");
        let ds = load_csv(f.path(), None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_features(), 2);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
        assert_eq!(ds.row(1), &[3.0, 4.0]);
        assert_eq!(ds.dropped_rows, 0);
    }

    #[test]
    fn drops_and_counts_nan_rows() {
        let f = write_csv("a,b\n1,2\nNaN,4\n5,6\n7,\n");
        let ds = load_csv(f.path(), None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dropped_rows, 2);
    }

    #[test]
    fn rejects_unparseable_cells_with_location() {
        let f = write_csv("a,b\n1,2\n3,oops\n");
        let err = load_csv(f.path(), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("oops") && msg.contains("row 3") && msg.contains('b'), "{msg}");
    }

    #[test]
    fn rejects_an_empty_file() {
        let f = write_csv("a,b\n");
        assert!(matches!(load_csv(f.path(), None), Err(DataError::Empty { .. })));
    }

    #[test]
    fn splits_with_floor_then_remainder_to_test() {
        let ds = SeriesDataset::from_values(
            (0..10).map(|v| v as f64).collect(),
            1,
            vec!["x".into()],
            String::new(),
        );
        let (tr, va, te) = chronological_split(&ds, (0.5, 0.25, 0.25), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (5, 2, 3));
        // Chronological and contiguous.
        assert_eq!(tr.values(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(va.values(), &[5.0, 6.0]);
        assert_eq!(te.values(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn splits_even_ratios_exactly() {
        let ds = SeriesDataset::from_values(
            (0..100).map(|v| v as f64).collect(),
            1,
            vec!["x".into()],
            String::new(),
        );
        let (tr, va, te) = chronological_split(&ds, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (60, 20, 20));
    }

    #[test]
    fn rejects_bad_ratios_and_short_segments() {
        let ds = SeriesDataset::from_values(
            (0..100).map(|v| v as f64).collect(),
            1,
            vec!["x".into()],
            String::new(),
        );
        assert!(matches!(
            chronological_split(&ds, (0.5, 0.2, 0.2), 1),
            Err(DataError::BadRatios(_))
        ));
        assert!(matches!(
            chronological_split(&ds, (0.6, 0.2, 0.2), 25),
            Err(DataError::SegmentTooShort { .. })
        ));
    }

    #[test]
    fn counts_windows() {
        assert_eq!(window_starts(100, 96, 4, 1, None).unwrap().len(), 1);
        assert_eq!(window_starts(200, 96, 96, 1, None).unwrap().len(), 9);
        assert!(matches!(
            window_starts(100, 96, 8, 1, None),
            Err(DataError::TooShort { .. })
        ));
        assert!(matches!(
            window_starts(100, 96, 4, 0, None),
            Err(DataError::BadWindow { .. })
        ));
    }

    #[test]
    fn windows_are_adjacent_and_gap_free() {
        let ds = SeriesDataset::from_values(
            (0..40).map(|v| v as f64).collect(),
            2,
            vec!["a".into(), "b".into()],
            String::new(),
        );
        let starts = window_starts(ds.len(), 5, 3, 1, None).unwrap();
        let batches = make_windows(&ds, &starts, 5, 3, 4);
        for (ci, batch) in batches.iter().enumerate() {
            for (wi, &s) in starts[ci * 4..].iter().take(batch.batch_size()).enumerate() {
                let d = ds.num_features();
                let last_in = &batch.inputs.data()[wi * 5 * d + 4 * d..wi * 5 * d + 5 * d];
                assert_eq!(last_in, ds.row(s + 4));
                let first_t = &batch.targets.data()[wi * 3 * d..wi * 3 * d + d];
                assert_eq!(first_t, ds.row(s + 5));
            }
        }
    }

    #[test]
    fn shuffle_is_seeded_and_a_permutation() {
        let a = window_starts(50, 4, 2, 1, Some(9)).unwrap();
        let b = window_starts(50, 4, 2, 1, Some(9)).unwrap();
        let c = window_starts(50, 4, 2, 1, Some(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, window_starts(50, 4, 2, 1, None).unwrap());
    }

    #[test]
    fn normalizes_with_population_std() {
        let x = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let (z, stats) = instance_normalize(&x);
        assert!((stats.mean.data()[0] - 2.0).abs() < 1e-12);
        // population std of [1,2,3] = sqrt(2/3)
        assert!((stats.std.data()[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((z.data()[0] + 1.224_744_871_391_589).abs() < 1e-9);
        assert!(z.data()[1].abs() < 1e-12);
    }

    #[test]
    fn constant_windows_map_to_zero() {
        let x = Tensor::new(vec![1, 3, 1], vec![5.0; 3]).unwrap();
        let (z, stats) = instance_normalize(&x);
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(stats.mean.data()[0], 5.0);
        assert_eq!(stats.std.data()[0], NORM_EPSILON);
    }

    #[test]
    fn denormalize_broadcasts_and_round_trips() {
        let stats = NormStats {
            mean: Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
            std: Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
        };
        let o = Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap();
        let y = instance_denormalize(&o, &stats).unwrap();
        assert_eq!(y.data(), &[5.0, 3.0]);

        let x = Tensor::new(vec![2, 4, 3], (0..24).map(|v| (v as f64).sin() * 7.0).collect())
            .unwrap();
        let (z, stats) = instance_normalize(&x);
        let back = instance_denormalize(&z, &stats).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn denormalize_checks_stat_shapes() {
        let stats = NormStats {
            mean: Tensor::new(vec![2, 1], vec![0.0; 2]).unwrap(),
            std: Tensor::new(vec![2, 1], vec![1.0; 2]).unwrap(),
        };
        let o = Tensor::new(vec![1, 2, 1], vec![0.0; 2]).unwrap();
        assert!(matches!(
            instance_denormalize(&o, &stats),
            Err(DataError::StatsMismatch { .. })
        ));
    }
}
