//! Stage orchestration.
//!
//! Every stage reads its predecessors' artifacts from the output directory,
//! checks each one against the digest recorded in the producing stage's
//! manifest, and refuses artifacts written under a different configuration
//! hash. Outputs land in the output directory; manifests in `manifests/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use statskernel::diagnostics::quantile;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::{self, Cohort, DayActivity, Participant, PanelRow, Race, RiskFactorPanel, Sex};
use crate::io::{self, fmt_f64};
use crate::mem::{self, MemParams, MemUnit, PARAM_COUNT};
use crate::predict::{self, PredictiveDraw, SexMode};
use crate::preprocess::{self, AdjustedActivity, Ar1Unit, OptimizerSettings, VarianceFunction, WeekendModel};
use crate::rfm::{self, Dic, Gamma, Mat7, MixtureParams, RfmPosterior, Vec7, FACTOR_NAMES, GAMMA_LEN, R};
use crate::simgen;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    Ingest,
    Preprocess,
    FitMem,
    EstimateUsual,
    FitRfm,
    SelectH,
    Predict,
    Residuals,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 9] = [
        Stage::Ingest,
        Stage::Preprocess,
        Stage::FitMem,
        Stage::EstimateUsual,
        Stage::FitRfm,
        Stage::SelectH,
        Stage::Predict,
        Stage::Residuals,
        Stage::Report,
    ];

    /// Subcommand name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Ingest => "ingest",
            Stage::Preprocess => "preprocess",
            Stage::FitMem => "fit-mem",
            Stage::EstimateUsual => "estimate-usual",
            Stage::FitRfm => "fit-rfm",
            Stage::SelectH => "select-h",
            Stage::Predict => "predict",
            Stage::Residuals => "residuals",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    DiagnosticFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub wall_seconds: f64,
    pub status: StageStatus,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// Output file names.
pub mod files {
    pub const DAYS: &str = "days.csv";
    pub const PARTICIPANTS: &str = "participants.csv";
    pub const PANELS: &str = "panels.csv";
    pub const ADJUSTED: &str = "adjusted_activity.csv";
    pub const VARIANCE: &str = "variance_function.json";
    pub const PREPROCESS_FIT: &str = "preprocess_fit.json";
    pub const RISK_FACTORS: &str = "risk_factors.csv";
    pub const MEM_POSTERIOR: &str = "mem_posterior.csv";
    pub const RANDOM_EFFECTS: &str = "random_effects.csv";
    pub const MEM_SUMMARY: &str = "mem_summary.csv";
    pub const MEM_DIAGNOSTICS: &str = "mem_diagnostics.json";
    pub const T_DRAWS: &str = "t_draws.csv";
    pub const USUAL: &str = "usual_mvpa.csv";
    pub const RFM_POSTERIOR: &str = "rfm_posterior.csv";
    pub const RFM_DIAGNOSTICS: &str = "rfm_diagnostics.json";
    pub const DIC: &str = "dic_by_H.csv";
    pub const PROB_HIGH: &str = "prob_high.csv";
    pub const PROB_R: &str = "prob_R.csv";
    pub const RESIDUALS: &str = "residuals.csv";
    pub const SUMMARY: &str = "summary_tables.csv";
    pub const REPORT: &str = "report.json";
    pub const TRUTH: &str = "truth.json";
}

/// Row of `participants.csv`: demographics plus cohort membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRow {
    pub participant_id: String,
    pub age: f64,
    pub sex: Sex,
    pub race: Race,
    pub education: u8,
    pub bmi: f64,
    pub cohort: Cohort,
}

impl MemberRow {
    pub fn participant(&self) -> Participant {
        Participant {
            participant_id: self.participant_id.clone(),
            age: self.age,
            sex: self.sex,
            race: self.race,
            education: self.education,
            bmi: self.bmi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessFit {
    pub weekend: WeekendModel,
    pub ar1_phi: f64,
    pub ar1_theta: f64,
    pub ar1_sigma_sq: f64,
    pub ar1_beta: Vec<f64>,
    pub ar1_loglik: f64,
    pub ar1_iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rhat: BTreeMap<String, f64>,
    pub max_rhat: f64,
    pub threshold: f64,
    pub converged: bool,
    pub acceptance: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dic: Option<Dic>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relabel_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relabel_converged: Option<bool>,
}

/// One run's view of the output directory.
pub struct Workspace {
    pub cfg: RunConfig,
    pub hash: String,
}

struct StageRun<'a> {
    ws: &'a Workspace,
    stage: Stage,
    start: Instant,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<PathBuf>,
}

impl<'a> StageRun<'a> {
    fn begin(ws: &'a Workspace, stage: Stage) -> Result<Self> {
        std::fs::create_dir_all(ws.manifest_dir()).map_err(|e| Error::io(ws.manifest_dir(), e))?;
        let m = ws.manifest_path(stage);
        if m.exists() {
            std::fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
        }
        info!("stage {} started", stage.name());
        Ok(Self {
            ws,
            stage,
            start: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Verified path of an artifact produced by `producer`.
    fn artifact(&mut self, producer: Stage, file: &str) -> Result<PathBuf> {
        let path = self.ws.out().join(file);
        let manifest = self.ws.manifest(producer, &path)?;
        if manifest.config_hash != self.ws.hash {
            return Err(Error::StaleInput {
                path,
                reason: format!(
                    "written under config {} but this run is {}; rerun `{}`",
                    manifest.config_hash,
                    self.ws.hash,
                    producer.name()
                ),
            });
        }
        if manifest.status != StageStatus::Ok {
            return Err(Error::StaleInput {
                path,
                reason: format!("`{}` failed its convergence diagnostics", producer.name()),
            });
        }
        let recorded = manifest
            .outputs
            .iter()
            .find(|d| d.file == file)
            .ok_or_else(|| Error::MissingArtifact {
                path: path.clone(),
                stage: producer.name(),
            })?;
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                stage: producer.name(),
            });
        }
        let actual = io::file_sha256(&path)?;
        if actual != recorded.sha256 {
            return Err(Error::StaleInput {
                path,
                reason: format!("contents differ from the `{}` manifest", producer.name()),
            });
        }
        self.inputs.push((file.to_string(), path.clone()));
        Ok(path)
    }

    fn external(&mut self, path: &Path) -> Result<PathBuf> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        self.inputs.push((path.display().to_string(), path.to_path_buf()));
        Ok(path.to_path_buf())
    }

    fn output(&mut self, file: &str) -> PathBuf {
        let p = self.ws.out().join(file);
        self.outputs.push(p.clone());
        p
    }

    fn finish(self, status: StageStatus) -> Result<Manifest> {
        let digest = |name: String, p: &Path| -> Result<FileDigest> {
            Ok(FileDigest {
                file: name,
                sha256: io::file_sha256(p)?,
            })
        };
        let inputs = self
            .inputs
            .iter()
            .map(|(n, p)| digest(n.clone(), p))
            .collect::<Result<Vec<_>>>()?;
        let outputs = self
            .outputs
            .iter()
            .map(|p| {
                let name = p
                    .strip_prefix(self.ws.out())
                    .map(|r| r.display().to_string())
                    .unwrap_or_else(|_| p.display().to_string());
                digest(name, p)
            })
            .collect::<Result<Vec<_>>>()?;
        let m = Manifest {
            version: MANIFEST_VERSION,
            stage: self.stage.name().to_string(),
            seed: self.ws.cfg.seed,
            config_hash: self.ws.hash.clone(),
            wall_seconds: self.start.elapsed().as_secs_f64(),
            status,
            inputs,
            outputs,
        };
        io::write_json(&self.ws.manifest_path(self.stage), &m)?;
        info!("stage {} finished in {:.1}s", self.stage.name(), m.wall_seconds);
        Ok(m)
    }
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        std::fs::create_dir_all(&cfg.paths.output_dir).map_err(|e| Error::io(&cfg.paths.output_dir, e))?;
        Ok(Self { cfg, hash })
    }

    pub fn out(&self) -> &Path {
        &self.cfg.paths.output_dir
    }

    fn manifest_dir(&self) -> PathBuf {
        self.out().join(MANIFEST_DIR)
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.manifest_dir().join(format!("{}.json", stage.name()))
    }

    fn manifest(&self, stage: Stage, wanted: &Path) -> Result<Manifest> {
        let p = self.manifest_path(stage);
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: wanted.to_path_buf(),
                stage: stage.name(),
            });
        }
        io::read_json(&p)
    }

    pub fn run(&self, stage: Stage) -> Result<Manifest> {
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::Ingest => self.ingest(),
            Stage::Preprocess => self.preprocess(),
            Stage::FitMem => self.fit_mem(),
            Stage::EstimateUsual => self.estimate_usual(),
            Stage::FitRfm => self.fit_rfm(),
            Stage::SelectH => self.select_h(),
            Stage::Predict => self.predict(),
            Stage::Residuals => self.residuals(),
            Stage::Report => self.report(),
        }
    }

    /// Every stage from ingest to report.
    pub fn run_all(&self) -> Result<Vec<Manifest>> {
        Stage::PIPELINE.iter().map(|s| self.run(*s)).collect()
    }

    fn hash_ref(&self) -> Option<&str> {
        Some(&self.hash)
    }

    /// Writes the simulated inputs to the configured input paths and the
    /// ground truth to the output directory.
    pub fn simulate(&self) -> Result<Manifest> {
        let mut run = StageRun::begin(self, Stage::Simulate)?;
        let cohort = simgen::simulate_cohort(&self.cfg.simulate)?;
        let paths = &self.cfg.paths;
        for p in [&paths.days, &paths.participants, &paths.panels] {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        io::write_csv(&paths.days, &cohort.days, None)?;
        io::write_csv(&paths.participants, &cohort.participants, None)?;
        io::write_csv(&paths.panels, &cohort.panels, None)?;
        let truth = run.output(files::TRUTH);
        io::write_json_hashed(&truth, &cohort.truth, &self.hash)?;
        for p in [&paths.days, &paths.participants, &paths.panels] {
            run.outputs.push(p.clone());
        }
        info!(
            "simulated {} participants ({} with panels)",
            cohort.participants.len(),
            cohort.panels.len()
        );
        run.finish(StageStatus::Ok)
    }

    pub fn ingest(&self) -> Result<Manifest> {
        let mut run = StageRun::begin(self, Stage::Ingest)?;
        let paths = &self.cfg.paths;
        let days: Vec<DayActivity> = match &paths.minutes {
            Some(m) => {
                let m = run.external(m)?;
                ingest::derive_days(&ingest::read_minutes(&m)?, &self.cfg.activity)?
            }
            None => {
                let d = run.external(&paths.days)?;
                let days: Vec<DayActivity> = io::read_csv(&d)?;
                validate_days(&days, &self.cfg.activity)?;
                days
            }
        };
        let people = ingest::read_participants(&run.external(&paths.participants)?)?;
        let panels = ingest::read_panels(&run.external(&paths.panels)?)?;
        let by_id: BTreeMap<&str, &Participant> = people.iter().map(|p| (p.participant_id.as_str(), p)).collect();
        if by_id.len() != people.len() {
            return Err(Error::Data("participants file repeats an id".into()));
        }
        let mut cohorts = ingest::build_cohorts(&days, &panels);
        let missing: Vec<String> = cohorts
            .mem
            .iter()
            .filter(|id| !by_id.contains_key(id.as_str()))
            .cloned()
            .collect();
        for id in &missing {
            cohorts
                .warnings
                .push(format!("participant {id} has accelerometry but no demographics; excluded"));
        }
        cohorts.mem.retain(|id| by_id.contains_key(id.as_str()));
        cohorts.rfm.retain(|id| by_id.contains_key(id.as_str()));
        for w in &cohorts.warnings {
            warn!("{w}");
        }
        if cohorts.mem.is_empty() {
            return Err(Error::Data("no participant has seven full days of accelerometry".into()));
        }
        let members: Vec<MemberRow> = cohorts
            .mem
            .iter()
            .map(|id| {
                let p = by_id[id.as_str()];
                MemberRow {
                    participant_id: p.participant_id.clone(),
                    age: p.age,
                    sex: p.sex,
                    race: p.race,
                    education: p.education,
                    bmi: p.bmi,
                    cohort: cohorts.cohort_of(id).expect("member of the MEM cohort"),
                }
            })
            .collect();
        let complete: BTreeMap<&str, RiskFactorPanel> = panels
            .iter()
            .filter_map(|p| p.complete().map(|c| (p.participant_id.as_str(), c)))
            .collect();
        let rfm_panels: Vec<PanelRow> = cohorts
            .rfm
            .iter()
            .map(|id| PanelRow::from(&complete[id.as_str()]))
            .collect();
        let mut out_days = days;
        out_days.sort_by(|a, b| (&a.participant_id, a.day_index).cmp(&(&b.participant_id, b.day_index)));
        io::write_csv(&run.output(files::DAYS), &out_days, self.hash_ref())?;
        io::write_csv(&run.output(files::PARTICIPANTS), &members, self.hash_ref())?;
        io::write_csv(&run.output(files::PANELS), &rfm_panels, self.hash_ref())?;
        info!(
            "cohorts: {} with seven full days, {} with complete panels",
            cohorts.mem.len(),
            cohorts.rfm.len()
        );
        run.finish(StageStatus::Ok)
    }

    pub fn preprocess(&self) -> Result<Manifest> {
        let mut run = StageRun::begin(self, Stage::Preprocess)?;
        let days: Vec<DayActivity> = io::read_csv(&run.artifact(Stage::Ingest, files::DAYS)?)?;
        let members: Vec<MemberRow> = io::read_csv(&run.artifact(Stage::Ingest, files::PARTICIPANTS)?)?;
        let panels: Vec<PanelRow> = io::read_csv(&run.artifact(Stage::Ingest, files::PANELS)?)?;
        let member_ids: BTreeMap<&str, &MemberRow> = members.iter().map(|m| (m.participant_id.as_str(), m)).collect();
        let mem_days: Vec<DayActivity> = days
            .into_iter()
            .filter(|d| member_ids.contains_key(d.participant_id.as_str()))
            .collect();
        let weekend = preprocess::fit_weekend_model(&mem_days)?;
        let adjusted: Vec<AdjustedActivity> = mem_days
            .iter()
            .map(|d| Ok(AdjustedActivity::new(d.participant_id.clone(), d.day_index, preprocess::adjust_weekend(d, &weekend)?)))
            .collect::<Result<_>>()?;

        let mut by_id: BTreeMap<&str, Vec<&AdjustedActivity>> = BTreeMap::new();
        for a in &adjusted {
            by_id.entry(a.participant_id.as_str()).or_default().push(a);
        }
        let mut units = Vec::new();
        let mut ages = Vec::new();
        for (id, rows) in &by_id {
            let m = member_ids[id];
            let (days, w): (Vec<u8>, Vec<f64>) = rows.iter().filter(|a| a.w1 > 0.0).map(|a| (a.day_index, a.w)).unzip();
            if w.is_empty() {
                continue;
            }
            ages.push(m.age);
            units.push(Ar1Unit {
                z: m.participant().covariates().to_vec(),
                age: m.age,
                days,
                w,
            });
        }
        let opt = OptimizerSettings {
            max_iters: self.cfg.preprocess.optimizer_max_iters,
            sd_tolerance: self.cfg.preprocess.optimizer_tolerance,
        };
        let fit = preprocess::fit_preliminary_ar1(&units, &opt)?;
        let (res, res_ages): (Vec<f64>, Vec<f64>) = fit
            .residuals
            .iter()
            .zip(&ages)
            .flat_map(|(r, a)| r.iter().map(move |e| (*e, *a)))
            .unzip();
        let vf = preprocess::fit_variance_function(&res, &res_ages, self.cfg.preprocess.variance_floor)?;
        info!(
            "preliminary AR(1): phi = {:.3}; variance cubic {:?}",
            fit.phi, vf.delta
        );

        let complete: Vec<RiskFactorPanel> = panels
            .iter()
            .map(|p| {
                p.complete()
                    .ok_or_else(|| Error::Data(format!("panel of {} is incomplete", p.participant_id)))
            })
            .collect::<Result<_>>()?;
        let y = risk_factor_matrix(&complete, self.cfg.preprocess.survey_weights)?;
        let header: Vec<String> = std::iter::once("participant_id".to_string())
            .chain(FACTOR_NAMES.iter().map(|s| s.to_string()))
            .collect();
        let rows = complete
            .iter()
            .zip(&y)
            .map(|(p, v)| std::iter::once(p.participant_id.clone()).chain(v.iter().map(|x| fmt_f64(*x))).collect());

        io::write_csv(&run.output(files::ADJUSTED), &adjusted, self.hash_ref())?;
        io::write_json_hashed(&run.output(files::VARIANCE), &vf, &self.hash)?;
        io::write_json_hashed(
            &run.output(files::PREPROCESS_FIT),
            &PreprocessFit {
                weekend,
                ar1_phi: fit.phi,
                ar1_theta: fit.theta,
                ar1_sigma_sq: fit.sigma_sq,
                ar1_beta: fit.beta.clone(),
                ar1_loglik: fit.loglik,
                ar1_iterations: fit.iterations,
            },
            &self.hash,
        )?;
        io::write_table(&run.output(files::RISK_FACTORS), &header, rows, self.hash_ref())?;
        run.finish(StageStatus::Ok)
    }

    pub fn fit_mem(&self) -> Result<Manifest> {
        let mut run = StageRun::begin(self, Stage::FitMem)?;
        let adjusted: Vec<AdjustedActivity> = io::read_csv(&run.artifact(Stage::Preprocess, files::ADJUSTED)?)?;
        let (vf, _): (VarianceFunction, _) = io::read_json_hashed(&run.artifact(Stage::Preprocess, files::VARIANCE)?)?;
        let members: Vec<MemberRow> = io::read_csv(&run.artifact(Stage::Ingest, files::PARTICIPANTS)?)?;
        let units = mem_units(&members, &adjusted, &vf)?;
        let post = mem::run_mem(&units, &self.cfg.mem, self.cfg.seed)?;

        let names = mem::param_names();
        let header: Vec<String> = ["chain", "draw"].iter().map(|s| s.to_string()).chain(names.iter().cloned()).collect();
        let rows = post.draws.iter().enumerate().map(|(k, d)| {
            [(k / post.draws_per_chain).to_string(), (k % post.draws_per_chain).to_string()]
                .into_iter()
                .chain(d.flatten().iter().map(|v| fmt_f64(*v)))
                .collect::<Vec<_>>()
        });
        io::write_table(&run.output(files::MEM_POSTERIOR), &header, rows, self.hash_ref())?;

        let re_header: Vec<String> = ["draw", "participant_id", "b1", "b2"].iter().map(|s| s.to_string()).collect();
        let re_rows = post.pool.iter().enumerate().flat_map(|(s, &draw)| {
            let post = &post;
            post.participant_ids.iter().enumerate().map(move |(i, id)| {
                vec![
                    draw.to_string(),
                    id.clone(),
                    fmt_f64(post.pool_b1[s][i]),
                    fmt_f64(post.pool_b2[s][i]),
                ]
            })
        });
        io::write_table(&run.output(files::RANDOM_EFFECTS), &re_header, re_rows, self.hash_ref())?;

        let sum_header: Vec<String> = ["participant_id", "b1_mean", "b2_mean", "pi_mean", "t_mean"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let sum_rows = post.participant_ids.iter().enumerate().map(|(i, id)| {
            vec![
                id.clone(),
                fmt_f64(post.b1_mean[i]),
                fmt_f64(post.b2_mean[i]),
                fmt_f64(post.pi_mean[i]),
                fmt_f64(post.t_mean[i]),
            ]
        });
        io::write_table(&run.output(files::MEM_SUMMARY), &sum_header, sum_rows, self.hash_ref())?;

        let threshold = self.cfg.mem.rhat_threshold;
        let converged = post.check_convergence(threshold);
        let diag = Diagnostics {
            rhat: post.rhat.iter().cloned().collect(),
            max_rhat: post.max_rhat(),
            threshold,
            converged: converged.is_ok(),
            acceptance: post.acceptance.iter().cloned().collect(),
            dic: None,
            relabel_iterations: None,
            relabel_converged: None,
        };
        io::write_json_hashed(&run.output(files::MEM_DIAGNOSTICS), &diag, &self.hash)?;
        info!("MEM max R̂ {:.4}", diag.max_rhat);
        finish_checked(run, converged)
    }

    pub fn estimate_usual(&self) -> Result<Manifest> {
        let mut run = StageRun::begin(self, Stage::EstimateUsual)?;
        let draws = read_mem_posterior(&run.artifact(Stage::FitMem, files::MEM_POSTERIOR)?)?;
        let effects: Vec<EffectRow> = io::read_csv(&run.artifact(Stage::FitMem, files::RANDOM_EFFECTS)?)?;
        let (vf, _): (VarianceFunction, _) = io::read_json_hashed(&run.artifact(Stage::Preprocess, files::VARIANCE)?)?;
        let members: Vec<MemberRow> = io::read_csv(&run.artifact(Stage::Ingest, files::PARTICIPANTS)?)?;
        let index: BTreeMap<&str, usize> = members
            .iter()
            .enumerate()
            .map(|(i, m)| (m.participant_id.as_str(), i))
            .collect();
        let covariates: Vec<[f64; mem::P]> = members.iter().map(|m| m.participant().covariates()).collect();
        let xi: Vec<f64> = members.iter().map(|m| vf.eval(m.age)).collect();

        let mut pool: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for e in &effects {
            let params = draws
                .get(e.draw)
                .ok_or_else(|| Error::Data(format!("random-effect draw {} has no parameter row", e.draw)))?;
            let &i = index
                .get(e.participant_id.as_str())
                .ok_or_else(|| Error::Data(format!("random effects name unknown participant {}", e.participant_id)))?;
            let row = pool.entry(e.draw).or_insert_with(|| vec![f64::NAN; members.len()]);
            row[i] = mem::participant_usual_mvpa(&covariates[i], xi[i], params, e.b1, e.b2);
        }
        if pool.values().flatten().any(|t| t.is_nan()) {
            return Err(Error::Data("random-effect pool does not cover every participant".into()));
        }
        let rfm_cols: Vec<usize> = members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.cohort == Cohort::MemAndRfm)
            .map(|(i, _)| i)
            .collect();
        let header: Vec<String> = std::iter::once("draw".to_string())
            .chain(rfm_cols.iter().map(|&i| members[i].participant_id.clone()))
            .collect();
        let rows = pool.iter().map(|(draw, t)| {
            std::iter::once(draw.to_string())
                .chain(rfm_cols.iter().map(|&i| fmt_f64(t[i])))
                .collect::<Vec<_>>()
        });
        io::write_table(&run.output(files::T_DRAWS), &header, rows, self.hash_ref())?;

        let usual_header: Vec<String> = ["participant_id", "cohort", "t_mean", "t_lower", "t_upper"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let usual_rows = members.iter().enumerate().map(|(i, m)| {
            let col: Vec<f64> = pool.values().map(|r| r[i]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            vec![
                m.participant_id.clone(),
                match m.cohort {
                    Cohort::MemOnly => "MEM_ONLY".to_string(),
                    Cohort::MemAndRfm => "MEM_AND_RFM".to_string(),
                },
                fmt_f64(mean),
                fmt_f64(quantile(&col, 0.025)),
                fmt_f64(quantile(&col, 0.975)),
            ]
        });
        io::write_table(&run.output(files::USUAL), &usual_header, usual_rows, self.hash_ref())?;
        run.finish(StageStatus::Ok)
    }

    fn rfm_inputs(&self, run: &mut StageRun) -> Result<(Vec<String>, Vec<Vec<f64>>, Vec<Vec7>)> {
        let (ids, pool) = read_t_draws(&run.artifact(Stage::EstimateUsual, files::T_DRAWS)?)?;
        let (y_ids, y) = read_risk_factors(&run.artifact(Stage::Preprocess, files::RISK_FACTORS)?)?;
        if ids != y_ids {
            return Err(Error::Data(format!(
                "usual-MVPA draws cover {} participants but risk factors cover {}; cohorts are misaligned",
                ids.len(),
                y_ids.len()
            )));
        }
        Ok((ids, pool, y))
    }

    pub fn fit_rfm(&self) -> Result<Manifest> {
        let mut run = StageRun::begin(self, Stage::FitRfm)?;
        let (_, pool, y) = self.rfm_inputs(&mut run)?;
        let post = rfm::run_two_stage(&pool, &y, &self.cfg.priors, &self.cfg.rfm, self.cfg.seed)?;
        write_rfm_posterior(&run.output(files::RFM_POSTERIOR), &post, self.hash_ref())?;
        let threshold = self.cfg.rfm.rhat_threshold;
        let converged = post.check_convergence(threshold);
        let diag = Diagnostics {
            rhat: post.rhat.iter().cloned().collect(),
            max_rhat: post.max_rhat(),
            threshold,
            converged: converged.is_ok(),
            acceptance: post.acceptance.iter().cloned().collect(),
            dic: Some(post.dic),
            relabel_iterations: Some(post.relabeling.iterations),
            relabel_converged: Some(post.relabeling.converged),
        };
        if !post.relabeling.converged {
            warn!("relabeling stopped after {} iterations without converging", post.relabeling.iterations);
        }
        io::write_json_hashed(&run.output(files::RFM_DIAGNOSTICS), &diag, &self.hash)?;
        info!("RFM max R̂ {:.4}, DIC {:.2}", diag.max_rhat, post.dic.dic);
        finish_checked(run, converged)
    }

    pub fn select_h(&self) -> Result<Manifest> {
        let mut run = StageRun::begin(self, Stage::SelectH)?;
        let (_, pool, y) = self.rfm_inputs(&mut run)?;
        let scan = rfm::select_h(
            &pool,
            &y,
            &self.cfg.priors,
            &self.cfg.scan_settings(),
            &self.cfg.select_h.components,
            self.cfg.seed,
        )?;
        let best = rfm::argmin_dic(&scan);
        let header: Vec<String> = ["H", "mean_deviance", "deviance_at_mean", "p_d", "dic", "selected"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows = scan.iter().enumerate().map(|(k, (h, d))| {
            vec![
                h.to_string(),
                fmt_f64(d.mean_deviance),
                fmt_f64(d.deviance_at_mean),
                fmt_f64(d.p_d),
                fmt_f64(d.dic),
                (Some(k) == best).to_string(),
            ]
        });
        io::write_table(&run.output(files::DIC), &header, rows, self.hash_ref())?;
        if let Some(k) = best {
            info!("DIC selects H = {}", scan[k].0);
        }
        run.finish(StageStatus::Ok)
    }

    fn sex_mode(&self, members: &[MemberRow]) -> SexMode {
        self.cfg.predict.sex.unwrap_or_else(|| {
            let rfm: Vec<&MemberRow> = members.iter().filter(|m| m.cohort == Cohort::MemAndRfm).collect();
            let female = rfm.iter().filter(|m| m.sex == Sex::Female).count();
            SexMode::Mixed(if rfm.is_empty() { 0.5 } else { female as f64 / rfm.len() as f64 })
        })
    }

    fn predictive_draws(&self, path: &Path) -> Result<Vec<PredictiveDraw>> {
        let all = read_rfm_posterior(path)?;
        Ok(thin_evenly(all, self.cfg.predict.max_draws))
    }

    pub fn predict(&self) -> Result<Manifest> {
        let mut run = StageRun::begin(self, Stage::Predict)?;
        let draws = self.predictive_draws(&run.artifact(Stage::FitRfm, files::RFM_POSTERIOR)?)?;
        let members: Vec<MemberRow> = io::read_csv(&run.artifact(Stage::Ingest, files::PARTICIPANTS)?)?;
        let sex = self.sex_mode(&members);
        let p = &self.cfg.predict;
        let grid = predict::minute_grid(p.grid_max, p.grid_step);
        let header: Vec<String> = ["risk_factor", "minutes", "estimate", "lower", "upper"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::new();
        for (j, name) in FACTOR_NAMES.iter().enumerate() {
            let c = predict::prob_high(j, &grid, sex, &p.thresholds, &draws)?;
            rows.extend(curve_rows(name, &c));
        }
        io::write_table(&run.output(files::PROB_HIGH), &header, rows, self.hash_ref())?;
        let curves = predict::prob_r_or_more(&grid, sex, &p.thresholds, &draws, p.samples, self.cfg.seed)?;
        let r_header: Vec<String> = ["r", "minutes", "estimate", "lower", "upper"].iter().map(|s| s.to_string()).collect();
        let r_rows = curves
            .iter()
            .enumerate()
            .flat_map(|(r, c)| curve_rows(&(r + 1).to_string(), c));
        io::write_table(&run.output(files::PROB_R), &r_header, r_rows, self.hash_ref())?;
        run.finish(StageStatus::Ok)
    }

    pub fn residuals(&self) -> Result<Manifest> {
        let mut run = StageRun::begin(self, Stage::Residuals)?;
        let draws = self.predictive_draws(&run.artifact(Stage::FitRfm, files::RFM_POSTERIOR)?)?;
        let (ids, pool, y) = self.rfm_inputs(&mut run)?;
        let t_hat: Vec<f64> = (0..ids.len())
            .map(|i| pool.iter().map(|r| r[i]).sum::<f64>() / pool.len() as f64)
            .collect();
        let res = predict::standardized_residuals(&y, &t_hat, &draws)?;
        let header: Vec<String> = ["participant_id", "t_hat"]
            .iter()
            .map(|s| s.to_string())
            .chain(FACTOR_NAMES.iter().map(|f| format!("r_{f}")))
            .collect();
        let rows = ids.iter().zip(&t_hat).zip(&res).map(|((id, t), r)| {
            [id.clone(), fmt_f64(*t)]
                .into_iter()
                .chain(r.iter().map(|v| fmt_f64(*v)))
                .collect::<Vec<_>>()
        });
        io::write_table(&run.output(files::RESIDUALS), &header, rows, self.hash_ref())?;
        run.finish(StageStatus::Ok)
    }

    /// Table-layout posterior summaries and an index of the figure data.
    pub fn report(&self) -> Result<Manifest> {
        let mut run = StageRun::begin(self, Stage::Report)?;
        let post_path = run.artifact(Stage::FitRfm, files::RFM_POSTERIOR)?;
        let draws = read_rfm_posterior(&post_path)?;
        let prob_high = run.artifact(Stage::Predict, files::PROB_HIGH)?;
        let prob_r = run.artifact(Stage::Predict, files::PROB_R)?;
        run.artifact(Stage::Residuals, files::RESIDUALS)?;
        let scan = if self.manifest_path(Stage::SelectH).exists() {
            Some(read_dic_scan(&run.artifact(Stage::SelectH, files::DIC)?)?)
        } else {
            None
        };
        let rows = summary_rows(&draws);
        io::write_csv(&run.output(files::SUMMARY), &rows, self.hash_ref())?;

        let anchor = |path: &Path, key: &str| -> Result<Option<f64>> {
            let (_, table) = read_curve_file(path)?;
            Ok(table
                .iter()
                .filter(|(k, m, _)| k == key && (*m - self.cfg.predict.grid_max.min(60.0)).abs() < 1e-9)
                .map(|(_, _, e)| *e)
                .next())
        };
        let report = Report {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            components: draws.first().map(|d| d.mixture.components()).unwrap_or(0),
            posterior_draws: draws.len(),
            selected_h: scan.as_ref().and_then(|s| s.iter().find(|r| r.1).map(|r| r.0)),
            waist_exceedance_at_60: anchor(&prob_high, "waist")?,
            one_or_more_at_60: anchor(&prob_r, "1")?,
            figure_data: vec![files::PROB_HIGH.into(), files::PROB_R.into(), files::RESIDUALS.into()],
        };
        io::write_json(&run.output(files::REPORT), &report)?;
        run.finish(StageStatus::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub components: usize,
    pub posterior_draws: usize,
    pub selected_h: Option<usize>,
    /// Values at 60 minutes, or at `grid_max` when the grid ends earlier.
    pub waist_exceedance_at_60: Option<f64>,
    pub one_or_more_at_60: Option<f64>,
    pub figure_data: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// "3" for the sigmoidal factors, "4" for the linear ones.
    pub table: String,
    pub risk_factor: String,
    pub parameter: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

fn finish_checked(run: StageRun, converged: Result<()>) -> Result<Manifest> {
    match converged {
        Ok(()) => run.finish(StageStatus::Ok),
        Err(e) => {
            run.finish(StageStatus::DiagnosticFailure)?;
            Err(e)
        }
    }
}

fn validate_days(days: &[DayActivity], th: &ingest::ActivityThresholds) -> Result<()> {
    for d in days {
        let ok = (1..=ingest::DAYS_OBSERVED).contains(&d.day_index)
            && (1..=7).contains(&d.day_of_week)
            && usize::from(d.wear_minutes) <= ingest::MINUTES_PER_DAY
            && d.mvpa_minutes >= 0.0
            && d.mvpa_minutes <= f64::from(d.wear_minutes)
            && d.is_full_day == (d.wear_minutes >= th.full_day_wear);
        if !ok {
            return Err(Error::Data(format!(
                "participant {} day {}: inconsistent day record",
                d.participant_id, d.day_index
            )));
        }
    }
    Ok(())
}

/// Model-scale risk factors, after survey-weight equalization when asked.
pub fn risk_factor_matrix(panels: &[RiskFactorPanel], survey_weights: bool) -> Result<Vec<Vec7>> {
    let n = panels.len();
    let weights: Vec<f64> = panels.iter().map(|p| p.survey_weight).collect();
    let mut cols = Vec::with_capacity(R);
    for j in 0..R {
        let raw: Vec<f64> = panels.iter().map(|p| p.raw()[j]).collect();
        cols.push(if survey_weights {
            preprocess::adjust_survey_weights(&raw, &weights)?
        } else {
            raw
        });
    }
    Ok((0..n)
        .map(|i| {
            Vec7::from_fn(|j, _| {
                let v = cols[j][i];
                if predict::LOG_FACTORS.contains(&j) {
                    v.ln()
                } else {
                    v
                }
            })
        })
        .collect())
}

/// MEM input from the adjusted activity of the cohort members, in member
/// order.
pub fn mem_units(members: &[MemberRow], adjusted: &[AdjustedActivity], vf: &VarianceFunction) -> Result<Vec<MemUnit>> {
    let mut by_id: BTreeMap<&str, Vec<&AdjustedActivity>> = BTreeMap::new();
    for a in adjusted {
        by_id.entry(a.participant_id.as_str()).or_default().push(a);
    }
    members
        .iter()
        .map(|m| {
            let mut rows = by_id.remove(m.participant_id.as_str()).unwrap_or_default();
            if rows.is_empty() {
                return Err(Error::Data(format!("no adjusted activity for {}", m.participant_id)));
            }
            rows.sort_by_key(|a| a.day_index);
            let (positive_days, w): (Vec<u8>, Vec<f64>) = rows.iter().filter(|a| a.w1 > 0.0).map(|a| (a.day_index, a.w)).unzip();
            let p = m.participant();
            Ok(MemUnit {
                participant_id: m.participant_id.clone(),
                z: p.covariates(),
                group: p.age_group(),
                xi_sq: vf.eval(m.age),
                observed_days: rows.len() as u8,
                positive_days,
                w,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Deserialize)]
struct EffectRow {
    draw: usize,
    participant_id: String,
    b1: f64,
    b2: f64,
}

fn read_mem_posterior(path: &Path) -> Result<Vec<MemParams>> {
    let (header, rows) = io::read_table(path)?;
    if header.len() != 2 + PARAM_COUNT {
        return Err(Error::Data(format!("{}: expected {} columns", path.display(), 2 + PARAM_COUNT)));
    }
    rows.iter().map(|r| MemParams::from_flat(&r[2..])).collect()
}

/// (participant ids, draws × participants) from `t_draws.csv`.
pub fn read_t_draws(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let (header, rows) = io::read_table(path)?;
    let ids = header.into_iter().skip(1).collect();
    Ok((ids, rows.into_iter().map(|r| r[1..].to_vec()).collect()))
}

pub fn read_risk_factors(path: &Path) -> Result<(Vec<String>, Vec<Vec7>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let mut ids = Vec::new();
    let mut y = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if rec.len() != R + 1 {
            return Err(Error::Data(format!("{}: expected {} columns", path.display(), R + 1)));
        }
        ids.push(rec[0].to_string());
        let v: Vec<f64> = (1..=R)
            .map(|k| rec[k].parse::<f64>().map_err(|_| Error::Data(format!("{}: bad number {:?}", path.display(), &rec[k]))))
            .collect::<Result<_>>()?;
        y.push(Vec7::from_row_slice(&v));
    }
    Ok((ids, y))
}

fn rfm_header(h: usize) -> Vec<String> {
    let mut v: Vec<String> = ["chain", "draw", "pool_index"].iter().map(|s| s.to_string()).collect();
    v.extend(Gamma::names());
    v.extend(FACTOR_NAMES.iter().map(|f| format!("gamma0_{f}")));
    for k in 1..=h {
        v.push(format!("p_{k}"));
        v.extend(FACTOR_NAMES.iter().map(|f| format!("lambda_{k}_{f}")));
        for a in 0..R {
            for b in 0..=a {
                v.push(format!("sigma_{k}_{}_{}", FACTOR_NAMES[a], FACTOR_NAMES[b]));
            }
        }
    }
    v
}

const TRI: usize = R * (R + 1) / 2;
const FIXED_COLS: usize = 3 + GAMMA_LEN + R;

pub fn write_rfm_posterior(path: &Path, post: &RfmPosterior, hash: Option<&str>) -> Result<()> {
    let rows = post.draws.iter().zip(&post.gamma0).enumerate().map(|(k, (d, g0))| {
        let mut r = vec![
            (k / post.draws_per_chain).to_string(),
            (k % post.draws_per_chain).to_string(),
            d.pool_index.to_string(),
        ];
        r.extend(d.gamma.to_array().iter().map(|v| fmt_f64(*v)));
        r.extend(g0.iter().map(|v| fmt_f64(*v)));
        for h in 0..post.components {
            r.push(fmt_f64(d.mixture.p[h]));
            r.extend(d.mixture.lambda[h].iter().map(|v| fmt_f64(*v)));
            let s = &d.mixture.sigma[h];
            for a in 0..R {
                for b in 0..=a {
                    r.push(fmt_f64(s[(a, b)]));
                }
            }
        }
        r
    });
    io::write_table(path, &rfm_header(post.components), rows, hash)
}

pub fn read_rfm_posterior(path: &Path) -> Result<Vec<PredictiveDraw>> {
    let (header, rows) = io::read_table(path)?;
    let per = 1 + R + TRI;
    if header.len() < FIXED_COLS + per || (header.len() - FIXED_COLS) % per != 0 {
        return Err(Error::Data(format!("{}: unexpected column count {}", path.display(), header.len())));
    }
    let h = (header.len() - FIXED_COLS) / per;
    if header != rfm_header(h) {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no posterior draws", path.display())));
    }
    rows.iter()
        .map(|r| {
            let g: [f64; GAMMA_LEN] = r[3..3 + GAMMA_LEN].try_into().expect("fixed width");
            let mut mix = MixtureParams {
                lambda: Vec::with_capacity(h),
                sigma: Vec::with_capacity(h),
                p: Vec::with_capacity(h),
            };
            for k in 0..h {
                let o = FIXED_COLS + k * per;
                mix.p.push(r[o]);
                mix.lambda.push(Vec7::from_row_slice(&r[o + 1..o + 1 + R]));
                let mut s = Mat7::zeros();
                let mut c = o + 1 + R;
                for a in 0..R {
                    for b in 0..=a {
                        s[(a, b)] = r[c];
                        s[(b, a)] = r[c];
                        c += 1;
                    }
                }
                mix.sigma.push(s);
            }
            mix.validate()?;
            Ok(PredictiveDraw {
                gamma: Gamma::from_array(&g),
                mixture: mix,
            })
        })
        .collect()
}

/// At most `max` draws, evenly spaced; all when `max` is 0.
pub fn thin_evenly<T>(all: Vec<T>, max: usize) -> Vec<T> {
    if max == 0 || all.len() <= max {
        return all;
    }
    let n = all.len();
    let keep: Vec<usize> = (0..max).map(|k| k * n / max).collect();
    all.into_iter()
        .enumerate()
        .filter(|(i, _)| keep.binary_search(i).is_ok())
        .map(|(_, d)| d)
        .collect()
}

fn curve_rows(key: &str, c: &predict::PredictiveCurve) -> Vec<Vec<String>> {
    (0..c.grid.len())
        .map(|g| {
            vec![
                key.to_string(),
                fmt_f64(c.grid[g]),
                fmt_f64(c.estimate[g]),
                fmt_f64(c.lower[g]),
                fmt_f64(c.upper[g]),
            ]
        })
        .collect()
}

fn read_curve_file(path: &Path) -> Result<(Vec<String>, Vec<(String, f64, f64)>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| Error::Data(format!("{}: bad number", path.display())));
        out.push((rec[0].to_string(), num(1)?, num(2)?));
    }
    Ok((header, out))
}

fn read_dic_scan(path: &Path) -> Result<Vec<(usize, bool)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let h = rec[0].parse::<usize>().map_err(|_| Error::Data(format!("{}: bad H", path.display())))?;
        out.push((h, &rec[5] == "true"));
    }
    Ok(out)
}

/// Posterior mean and 95% interval of γ₀, the curve parameters with the
/// regular-participation level `2·B⁴` minutes, and the slopes.
pub fn summary_rows(draws: &[PredictiveDraw]) -> Vec<SummaryRow> {
    let summarize = |table: &str, factor: &str, parameter: &str, vals: Vec<f64>| {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        SummaryRow {
            table: table.into(),
            risk_factor: factor.into(),
            parameter: parameter.into(),
            mean,
            lower: quantile(&vals, 0.025),
            upper: quantile(&vals, 0.975),
        }
    };
    let g0: Vec<Vec7> = draws
        .iter()
        .map(|d| rfm::compute_gamma0(&d.mixture.lambda, &d.mixture.p))
        .collect();
    let mut rows = Vec::new();
    for (j, f) in FACTOR_NAMES.iter().enumerate() {
        let table = if j < rfm::CURVES { "3" } else { "4" };
        rows.push(summarize(table, f, "gamma0", g0.iter().map(|g| g[j]).collect()));
        if j < rfm::CURVES {
            let c = |sel: fn(&rfm::CurveParams) -> f64| draws.iter().map(|d| sel(&d.gamma.curves[j])).collect::<Vec<_>>();
            rows.push(summarize(table, f, "L", c(|p| p.l)));
            rows.push(summarize(table, f, "K", c(|p| p.k)));
            rows.push(summarize(table, f, "B", c(|p| p.b)));
            rows.push(summarize(table, f, "regular_minutes", c(|p| 2.0 * p.b.powi(4))));
        } else {
            rows.push(summarize(
                table,
                f,
                "slope",
                draws.iter().map(|d| d.gamma.slopes[j - rfm::CURVES]).collect(),
            ));
        }
    }
    rows
}
