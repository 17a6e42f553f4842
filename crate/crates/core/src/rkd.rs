//! The recursive seasonal loop.
//!
//! Season 1 pretrains a single classifier. Every later season pretrains a
//! current teacher on the new data, samples a TSA matrix over the current
//! teacher and the previous ensemble, then distills `K` fresh students from
//! their assigned teachers. Teachers are reduced to soft-target tables over
//! the transfer set before any student is trained, so at most `K + 1`
//! parameter sets (previous ensemble plus current teacher) ever coexist.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{init_params, ClassifierConfig, ClassifierParams};
use crate::data::SeasonDataset;
use crate::distill::{distill_from_targets, pretrain, TargetTable, TrainSpec, TransferSet};
use crate::error::{Result, RkdError};
use crate::retention::RetentionProbe;
use crate::seed::{derive_seed, rng_from, SeedRng};
use crate::tsa::{sample_tsa, Strategy, TsaMatrix};

const STREAM_TEACHER: u64 = 1;
const STREAM_STUDENT: u64 = 2;
const STREAM_TSA: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberProvenance {
    /// TSA rows this member was distilled from; `[0]` for a pretrained member.
    pub teachers: Vec<usize>,
    pub strategy: String,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub season_index: usize,
    pub members: Vec<ClassifierParams>,
    pub provenance: Vec<MemberProvenance>,
}

impl EnsembleState {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.members
            .first()
            .map_or(0, ClassifierParams::num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .members
            .first()
            .ok_or_else(|| RkdError::invalid("ensemble has no members"))?;
        if self
            .members
            .iter()
            .any(|m| m.num_classes() != first.num_classes() || m.input_dim() != first.input_dim())
        {
            return Err(RkdError::invalid("ensemble members disagree on shape"));
        }
        if self.provenance.len() != self.members.len() {
            return Err(RkdError::invalid("provenance does not cover every member"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RkdConfig {
    /// Ensemble size from season 2 on.
    pub k: usize,
    pub strategy: Strategy,
    pub classifier: ClassifierConfig,
    pub pretrain: TrainSpec,
    pub distill: TrainSpec,
    pub master_seed: u64,
    /// Distill students on separate threads. Results are identical either way.
    pub parallel: bool,
}

impl RkdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(RkdError::InvalidConfig(
                "ensemble size K must be at least 1".into(),
            ));
        }
        self.strategy.check_students(self.k)?;
        self.classifier.validate()?;
        self.pretrain.validate()?;
        self.distill.validate()
    }

    pub fn teacher_init_seed(&self, season: usize) -> u64 {
        derive_seed(self.master_seed, &[season as u64, STREAM_TEACHER, 0])
    }

    fn teacher_shuffle_seed(&self, season: usize) -> u64 {
        derive_seed(self.master_seed, &[season as u64, STREAM_TEACHER, 1])
    }

    pub fn student_init_seed(&self, season: usize, student: usize) -> u64 {
        derive_seed(
            self.master_seed,
            &[season as u64, STREAM_STUDENT, student as u64, 0],
        )
    }

    fn student_shuffle_seed(&self, season: usize, student: usize) -> u64 {
        derive_seed(
            self.master_seed,
            &[season as u64, STREAM_STUDENT, student as u64, 1],
        )
    }

    /// RNG stream for the TSA draw of `season`.
    pub fn tsa_rng(&self, season: usize) -> SeedRng {
        rng_from(self.master_seed, &[season as u64, STREAM_TSA])
    }

    fn pretrain_teacher(&self, season: usize, data: &SeasonDataset) -> Result<ClassifierParams> {
        pretrain(
            &self.classifier.with_seed(self.teacher_init_seed(season)),
            data,
            &self.pretrain.with_seed(self.teacher_shuffle_seed(season)),
        )
    }
}

/// Season-1 ensemble: one classifier pretrained on the first season.
pub fn init_first_season(cfg: &RkdConfig, first: &SeasonDataset) -> Result<EnsembleState> {
    cfg.validate()?;
    if first.is_empty() {
        return Err(RkdError::invalid("first season has no samples"));
    }
    let member = cfg.pretrain_teacher(1, first)?;
    Ok(EnsembleState {
        season_index: 1,
        provenance: vec![MemberProvenance {
            teachers: vec![0],
            strategy: "pretrain".into(),
            init_seed: cfg.teacher_init_seed(1),
        }],
        members: vec![member],
    })
}

/// Rebuilds the ensemble for the season following `prev`. `prev` is
/// consumed and released once its soft targets have been computed.
pub fn season_step(
    prev: EnsembleState,
    season: &SeasonDataset,
    transfer: &TransferSet,
    cfg: &RkdConfig,
    tsa_rng: &mut SeedRng,
) -> Result<EnsembleState> {
    cfg.validate()?;
    prev.validate()?;
    let t = prev.season_index + 1;
    if season.season_index != t {
        return Err(RkdError::invalid(format!(
            "ensemble is at season {}, cannot step to season {}",
            prev.season_index, season.season_index
        )));
    }
    if transfer.is_empty() {
        return Err(RkdError::invalid("transfer set is empty"));
    }
    let teacher = cfg.pretrain_teacher(t, season)?;
    if teacher.num_classes() != prev.num_classes() {
        return Err(RkdError::invalid(
            "current teacher and ensemble disagree on classes",
        ));
    }
    let assignment = sample_tsa(&cfg.strategy, prev.len(), tsa_rng);
    let temperature = cfg.distill.temperature;

    let current = TargetTable::for_teacher(&teacher, transfer, temperature)?;
    drop(teacher);
    let used = |row: usize| (0..assignment.cols()).any(|j| assignment.get(row, j));
    let previous: Vec<Option<TargetTable>> = prev
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| {
            used(i + 1)
                .then(|| TargetTable::for_teacher(m, transfer, temperature))
                .transpose()
        })
        .collect::<Result<_>>()?;
    drop(prev);

    let targets_for = |j: usize| -> Result<TargetTable> {
        let tables: Vec<&TargetTable> = assignment
            .teachers_of(j)
            .into_iter()
            .map(|row| match row {
                0 => &current,
                i => previous[i - 1]
                    .as_ref()
                    .expect("assigned teacher has targets"),
            })
            .collect();
        TargetTable::mean(&tables)
    };
    let train_student = |j: usize| -> Result<ClassifierParams> {
        let targets = targets_for(j)?;
        let init = init_params(&cfg.classifier.with_seed(cfg.student_init_seed(t, j)))?;
        let spec = cfg.distill.with_seed(cfg.student_shuffle_seed(t, j));
        distill_from_targets(init, transfer, &targets, &spec)
    };

    let members: Vec<ClassifierParams> = if cfg.parallel {
        let probe = RetentionProbe::active();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..cfg.k)
                .map(|j| {
                    let probe = probe.clone();
                    let train_student = &train_student;
                    scope.spawn(move || {
                        let _guard = probe.as_ref().map(RetentionProbe::install);
                        train_student(j)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("student thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..cfg.k).map(train_student).collect::<Result<_>>()?
    };

    Ok(EnsembleState {
        season_index: t,
        members,
        provenance: provenance(&assignment, cfg, t),
    })
}

fn provenance(assignment: &TsaMatrix, cfg: &RkdConfig, t: usize) -> Vec<MemberProvenance> {
    let strategy = cfg.strategy.to_string();
    (0..assignment.cols())
        .map(|j| MemberProvenance {
            teachers: assignment.teachers_of(j),
            strategy: strategy.clone(),
            init_seed: cfg.student_init_seed(t, j),
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleManifest {
    season_index: usize,
    strategy: String,
    master_seed: u64,
    members: Vec<String>,
    provenance: Vec<MemberProvenance>,
}

/// Writes `member_<j>.json` checkpoints plus `manifest.json` into `dir`.
pub fn save_ensemble(state: &EnsembleState, cfg: &RkdConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| RkdError::io(dir, e))?;
    let mut names = Vec::with_capacity(state.len());
    for (j, m) in state.members.iter().enumerate() {
        let name = format!("member_{j}.json");
        m.save(dir.join(&name))?;
        names.push(name);
    }
    let manifest = EnsembleManifest {
        season_index: state.season_index,
        strategy: cfg.strategy.to_string(),
        master_seed: cfg.master_seed,
        members: names,
        provenance: state.provenance.clone(),
    };
    let path = dir.join("manifest.json");
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| RkdError::invalid(e.to_string()))?;
    fs::write(&path, text).map_err(|e| RkdError::io(path, e))
}

pub fn load_ensemble(dir: impl AsRef<Path>) -> Result<EnsembleState> {
    let dir = dir.as_ref();
    let path: PathBuf = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| RkdError::io(&path, e))?;
    let manifest: EnsembleManifest =
        serde_json::from_str(&text).map_err(|e| RkdError::invalid(format!("manifest: {e}")))?;
    let members = manifest
        .members
        .iter()
        .map(|name| ClassifierParams::load(dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    let state = EnsembleState {
        season_index: manifest.season_index,
        members,
        provenance: manifest.provenance,
    };
    state.validate()?;
    Ok(state)
}
