//! Samples, seasons and grid-cell place classes.
//!
//! A place class is a square cell of a regular grid laid over the ground
//! plane. Samples carry the viewpoint they were captured at; the cell that
//! viewpoint falls in is the sample's class, provided the cell has enough
//! samples in every season to be usable for both training and testing.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RkdError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub x: f64,
    pub y: f64,
}

impl Viewpoint {
    pub fn new(x: f64, y: f64) -> Self {
        Viewpoint { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub viewpoint: Viewpoint,
    pub features: Vec<f64>,
    /// Set by grid labeling; `None` until the sample has been filtered.
    pub class_id: Option<usize>,
    /// Path or URI of the source image, if any.
    pub payload_ref: Option<String>,
}

impl Sample {
    pub fn new(viewpoint: Viewpoint, features: Vec<f64>) -> Self {
        Sample {
            viewpoint,
            features,
            class_id: None,
            payload_ref: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonDataset {
    /// 1-based position of the season in its sequence.
    pub season_index: usize,
    pub samples: Vec<Sample>,
    pub label: String,
}

impl SeasonDataset {
    pub fn new(season_index: usize, label: impl Into<String>, samples: Vec<Sample>) -> Self {
        SeasonDataset {
            season_index,
            samples,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature dimension shared by every sample, or `None` for an empty season.
    pub fn feature_dim(&self) -> Result<Option<usize>> {
        let Some(first) = self.samples.first() else {
            return Ok(None);
        };
        let dim = first.features.len();
        if let Some((i, _)) = self
            .samples
            .iter()
            .enumerate()
            .find(|(_, s)| s.features.len() != dim)
        {
            return Err(RkdError::invalid(format!(
                "season {}: sample {i} has {} features, expected {dim}",
                self.season_index,
                self.samples[i].features.len()
            )));
        }
        Ok(Some(dim))
    }

    /// Labeled `(features, class)` pairs; errors if any sample is unlabeled.
    pub fn labeled(&self) -> Result<Vec<(&[f64], usize)>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| match s.class_id {
                Some(c) => Ok((s.features.as_slice(), c)),
                None => Err(RkdError::invalid(format!(
                    "season {}: sample {i} has no class label",
                    self.season_index
                ))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub ix: i64,
    pub iy: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSequence {
    pub seasons: Vec<SeasonDataset>,
    /// Valid cells in lexicographic order; a cell's position is its class index.
    pub valid_classes: Vec<GridCell>,
    pub cell_size: f64,
}

impl DomainSequence {
    pub fn num_classes(&self) -> usize {
        self.valid_classes.len()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.seasons
            .iter()
            .flat_map(|s| s.samples.first())
            .map(|s| s.features.len())
            .next()
    }
}

/// Cell containing `v` on a grid of square `cell_size` cells anchored at the origin.
pub fn grid_cell(v: Viewpoint, cell_size: f64) -> Result<GridCell> {
    if !v.is_finite() {
        return Err(RkdError::invalid(format!(
            "viewpoint ({}, {}) is not finite",
            v.x, v.y
        )));
    }
    if !(cell_size.is_finite() && cell_size > 0.0) {
        return Err(RkdError::invalid(format!(
            "cell size must be positive, got {cell_size}"
        )));
    }
    Ok(GridCell {
        ix: (v.x / cell_size).floor() as i64,
        iy: (v.y / cell_size).floor() as i64,
    })
}

/// Keeps the cells holding at least `min_count` samples in every season and
/// stamps contiguous class indices (lexicographic cell order) on the
/// surviving samples. Samples in other cells are dropped.
pub fn filter_valid_classes(
    seasons: Vec<SeasonDataset>,
    cell_size: f64,
    min_count: usize,
) -> Result<DomainSequence> {
    if seasons.is_empty() {
        return Err(RkdError::invalid("at least one season is required"));
    }
    if min_count == 0 {
        return Err(RkdError::invalid("min_count must be at least 1"));
    }
    let mut dim = None;
    for (pos, season) in seasons.iter().enumerate() {
        if season.season_index != pos + 1 {
            return Err(RkdError::invalid(format!(
                "season indices must run 1, 2, ...; position {} has index {}",
                pos + 1,
                season.season_index
            )));
        }
        if let Some(d) = season.feature_dim()? {
            match dim {
                None => dim = Some(d),
                Some(prev) if prev != d => {
                    return Err(RkdError::invalid(format!(
                        "season {} has feature dimension {d}, expected {prev}",
                        season.season_index
                    )))
                }
                _ => {}
            }
        }
    }

    let cells: Vec<Vec<GridCell>> = seasons
        .iter()
        .map(|s| {
            s.samples
                .iter()
                .map(|sample| grid_cell(sample.viewpoint, cell_size))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let per_season: Vec<BTreeMap<GridCell, usize>> = cells
        .iter()
        .map(|season_cells| {
            let mut counts = BTreeMap::new();
            for &c in season_cells {
                *counts.entry(c).or_insert(0usize) += 1;
            }
            counts
        })
        .collect();

    let valid: Vec<GridCell> = per_season[0]
        .keys()
        .copied()
        .filter(|cell| {
            per_season
                .iter()
                .all(|counts| counts.get(cell).copied().unwrap_or(0) >= min_count)
        })
        .collect();
    if valid.is_empty() {
        return Err(RkdError::EmptyClassSet { min_count });
    }
    let index: BTreeMap<GridCell, usize> = valid.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let seasons = seasons
        .into_iter()
        .zip(cells)
        .map(|(season, season_cells)| {
            let samples = season
                .samples
                .into_iter()
                .zip(season_cells)
                .filter_map(|(mut sample, cell)| {
                    index.get(&cell).map(|&class| {
                        sample.class_id = Some(class);
                        sample
                    })
                })
                .collect();
            SeasonDataset { samples, ..season }
        })
        .collect();

    Ok(DomainSequence {
        seasons,
        valid_classes: valid,
        cell_size,
    })
}

/// Reads `x,y,f1,...,fF[,payload_ref]` rows. Rows keep file order and are
/// left unlabeled. A trailing column is taken as `payload_ref` only when it
/// is not itself a number; otherwise the row has too many features.
pub fn ingest_pose_csv(
    path: impl AsRef<Path>,
    feature_dim: usize,
    has_header: bool,
    season_index: usize,
    label: impl Into<String>,
) -> Result<SeasonDataset> {
    let path = path.as_ref();
    if feature_dim == 0 {
        return Err(RkdError::invalid("feature dimension must be at least 1"));
    }
    let file = File::open(path).map_err(|e| RkdError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        samples.push(parse_row(&record, feature_dim, row)?);
    }
    Ok(SeasonDataset::new(season_index, label, samples))
}

fn csv_error(path: &Path, e: csv::Error) -> RkdError {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => RkdError::io(path, source),
        other => RkdError::Parse {
            row,
            message: format!("{other:?}"),
        },
    }
}

fn parse_row(record: &csv::StringRecord, feature_dim: usize, row: usize) -> Result<Sample> {
    let parse = |i: usize| -> Result<f64> {
        let field = &record[i];
        field.parse::<f64>().map_err(|_| RkdError::Parse {
            row,
            message: format!("column {}: `{field}` is not a number", i + 1),
        })
    };
    let numeric = feature_dim + 2;
    let payload_ref = match record.len() {
        n if n == numeric => None,
        n if n == numeric + 1 => {
            let last = &record[numeric];
            if last.parse::<f64>().is_ok() {
                return Err(dimension_error(row, n - 2, feature_dim));
            }
            Some(last.to_string())
        }
        n => return Err(dimension_error(row, n.saturating_sub(2), feature_dim)),
    };
    let viewpoint = Viewpoint::new(parse(0)?, parse(1)?);
    if !viewpoint.is_finite() {
        return Err(RkdError::Parse {
            row,
            message: "viewpoint is not finite".into(),
        });
    }
    let features = (2..numeric).map(parse).collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        viewpoint,
        features,
        class_id: None,
        payload_ref,
    })
}

fn dimension_error(row: usize, got: usize, expected: usize) -> RkdError {
    RkdError::Parse {
        row,
        message: format!("expected {expected} features, found {got}"),
    }
}

/// Writes a season in the format read by [`ingest_pose_csv`].
pub fn write_pose_csv(path: impl AsRef<Path>, season: &SeasonDataset, header: bool) -> Result<()> {
    let path = path.as_ref();
    let dim = season.feature_dim()?.unwrap_or(0);
    let mut out = String::new();
    if header {
        out.push_str("x,y");
        for i in 1..=dim {
            out.push_str(&format!(",f{i}"));
        }
        out.push('\n');
    }
    for s in &season.samples {
        out.push_str(&format!("{},{}", s.viewpoint.x, s.viewpoint.y));
        for f in &s.features {
            out.push_str(&format!(",{f}"));
        }
        if let Some(p) = &s.payload_ref {
            out.push(',');
            out.push_str(p);
        }
        out.push('\n');
    }
    let mut file = File::create(path).map_err(|e| RkdError::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| RkdError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(x: f64, y: f64) -> Sample {
        Sample::new(Viewpoint::new(x, y), vec![0.0, 0.0])
    }

    #[test]
    fn grid_cell_floor_semantics() {
        let c = |x, y| grid_cell(Viewpoint::new(x, y), 20.0).unwrap();
        assert_eq!(c(0.0, 0.0), GridCell { ix: 0, iy: 0 });
        assert_eq!(c(35.2, 7.9), GridCell { ix: 1, iy: 0 });
        assert_eq!(c(-0.1, 5.0), GridCell { ix: -1, iy: 0 });
    }

    #[test]
    fn grid_cell_rejects_bad_input() {
        assert!(grid_cell(Viewpoint::new(f64::NAN, 0.0), 20.0).is_err());
        assert!(grid_cell(Viewpoint::new(0.0, f64::INFINITY), 20.0).is_err());
        assert!(grid_cell(Viewpoint::new(0.0, 0.0), 0.0).is_err());
        assert!(grid_cell(Viewpoint::new(0.0, 0.0), -3.0).is_err());
    }

    proptest! {
        #[test]
        fn grid_cell_translation_consistent(x in -1e6f64..1e6, y in -1e6f64..1e6) {
            // Exactly representable cell sizes keep x + s free of rounding drift.
            for s in [1.0, 20.0, 0.5] {
                let a = grid_cell(Viewpoint::new(x, y), s).unwrap();
                let b = grid_cell(Viewpoint::new(x + s, y), s).unwrap();
                prop_assert_eq!(b.ix, a.ix + 1);
                prop_assert_eq!(b.iy, a.iy);
            }
        }
    }

    #[test]
    fn filter_keeps_cells_present_in_every_season() {
        let a = |n| (0..n).map(|_| at(5.0, 5.0)).collect::<Vec<_>>();
        let b = |n| (0..n).map(|_| at(25.0, 5.0)).collect::<Vec<_>>();
        let s1 = SeasonDataset::new(1, "s1", [a(5), b(5)].concat());
        let s2 = SeasonDataset::new(2, "s2", a(5));
        let seq = filter_valid_classes(vec![s1, s2], 20.0, 1).unwrap();
        assert_eq!(seq.valid_classes, vec![GridCell { ix: 0, iy: 0 }]);
        assert_eq!(seq.num_classes(), 1);
        assert_eq!(seq.seasons[0].len(), 5);
        assert!(seq
            .seasons
            .iter()
            .flat_map(|s| &s.samples)
            .all(|s| s.class_id == Some(0)));
    }

    #[test]
    fn filter_orders_classes_lexicographically() {
        let pts = [(25.0, -5.0), (5.0, 25.0), (5.0, 5.0), (-5.0, 100.0)];
        let samples: Vec<_> = pts.iter().map(|&(x, y)| at(x, y)).collect();
        let seq = filter_valid_classes(vec![SeasonDataset::new(1, "s", samples)], 20.0, 1).unwrap();
        let cells: Vec<_> = seq.valid_classes.iter().map(|c| (c.ix, c.iy)).collect();
        assert_eq!(cells, vec![(-1, 5), (0, 0), (0, 1), (1, -1)]);
        let ids: Vec<_> = seq.seasons[0]
            .samples
            .iter()
            .map(|s| s.class_id.unwrap())
            .collect();
        assert_eq!(ids, vec![3, 2, 1, 0]);
    }

    #[test]
    fn filter_empty_class_set() {
        let s1 = SeasonDataset::new(1, "s1", vec![at(1.0, 1.0), at(1.0, 2.0)]);
        let err = filter_valid_classes(vec![s1], 20.0, 3).unwrap_err();
        assert!(matches!(err, RkdError::EmptyClassSet { min_count: 3 }));
    }

    #[test]
    fn filter_rejects_bad_season_indices() {
        let s = SeasonDataset::new(2, "s", vec![at(1.0, 1.0)]);
        assert!(filter_valid_classes(vec![s], 20.0, 1).is_err());
        assert!(filter_valid_classes(vec![], 20.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn filter_never_keeps_sparse_cells(
            pts in proptest::collection::vec(
                proptest::collection::vec((0u8..4, 0u8..4), 0..60), 1..4),
            min_count in 1usize..6,
        ) {
            let seasons: Vec<_> = pts.iter().enumerate().map(|(i, ps)| {
                let samples = ps.iter()
                    .map(|&(cx, cy)| at(cx as f64 * 10.0 + 1.0, cy as f64 * 10.0 + 1.0))
                    .collect();
                SeasonDataset::new(i + 1, format!("s{i}"), samples)
            }).collect();
            match filter_valid_classes(seasons, 10.0, min_count) {
                Ok(seq) => {
                    for season in &seq.seasons {
                        let mut counts = vec![0usize; seq.num_classes()];
                        for s in &season.samples {
                            counts[s.class_id.unwrap()] += 1;
                        }
                        prop_assert!(counts.iter().all(|&c| c >= min_count));
                    }
                }
                Err(e) => prop_assert!(matches!(e, RkdError::EmptyClassSet { .. }), "{}", e),
            }
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_single_row() {
        let f = write_tmp("1.0,2.0,0.5,0.5\n");
        let season = ingest_pose_csv(f.path(), 2, false, 1, "SP1").unwrap();
        assert_eq!(
            season.samples,
            vec![Sample {
                viewpoint: Viewpoint::new(1.0, 2.0),
                features: vec![0.5, 0.5],
                class_id: None,
                payload_ref: None,
            }]
        );
    }

    #[test]
    fn ingest_payload_and_header() {
        let f = write_tmp("x,y,f1,f2\n1,2,3,4,img/0001.png\n5,6,7,8\n");
        let season = ingest_pose_csv(f.path(), 2, true, 1, "s").unwrap();
        assert_eq!(season.len(), 2);
        assert_eq!(
            season.samples[0].payload_ref.as_deref(),
            Some("img/0001.png")
        );
        assert_eq!(season.samples[1].features, vec![7.0, 8.0]);
    }

    #[test]
    fn ingest_dimension_mismatch_names_row() {
        let f = write_tmp("1,2,0.5,0.5\n1,2,0.5,0.5,0.5\n");
        match ingest_pose_csv(f.path(), 2, false, 1, "s") {
            Err(RkdError::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write_tmp("1,2,0.5\n");
        assert!(matches!(
            ingest_pose_csv(f.path(), 2, false, 1, "s"),
            Err(RkdError::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn ingest_empty_file() {
        let f = write_tmp("");
        let season = ingest_pose_csv(f.path(), 3, false, 1, "s").unwrap();
        assert!(season.is_empty());
    }

    #[test]
    fn ingest_missing_file_is_io_error() {
        let err = ingest_pose_csv("/nonexistent/season.csv", 2, false, 1, "s").unwrap_err();
        assert!(matches!(err, RkdError::Io { .. }));
    }

    #[test]
    fn write_then_ingest() {
        let mut s = Sample::new(Viewpoint::new(-3.25, 1e-7), vec![0.1, -2.5e10, 3.0]);
        s.payload_ref = Some("a.png".into());
        let season = SeasonDataset::new(
            1,
            "s",
            vec![s, Sample::new(Viewpoint::new(1.0, 2.0), vec![0.0; 3])],
        );
        let f = tempfile::NamedTempFile::new().unwrap();
        write_pose_csv(f.path(), &season, true).unwrap();
        let back = ingest_pose_csv(f.path(), 3, true, 1, "s").unwrap();
        assert_eq!(back, season);
    }
}
