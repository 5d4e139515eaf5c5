//! Batch jobs behind the CLI: simulation matrices, evaluation over stored
//! sessions, and CSV/JSON export.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use chrono::DateTime;
use gate_core::domain::{DomainId, DomainRegistry};
use gate_core::lm::{Gateway, LmProfile};
use gate_core::metrics::{self, DeltaCurve};
use gate_core::persona::{self, MethodResult, SimulationConfig};
use gate_core::session::{PolicyKind, PolicySpec, Session, SessionState, SurveyValue};
use serde::{Deserialize, Serialize};

use crate::config::{self, SimulationMatrix};
use crate::results::{compute_results, SessionResults};
use crate::store::{FileStore, RecordKind};

/// Profiles used when `--mock` is given: seeded mocks, one seed per role.
pub fn mock_profiles(seed: u64) -> (LmProfile, LmProfile, LmProfile) {
    (
        LmProfile::seeded(seed),
        LmProfile::seeded(seed.wrapping_add(1)),
        LmProfile::seeded(seed.wrapping_add(2)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Ok {
        session_id: String,
        turns: usize,
        records: usize,
        curve: DeltaCurve,
        auc: f64,
        final_delta: f64,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRun {
    pub domain: DomainId,
    pub method: PolicyKind,
    pub persona: String,
    #[serde(flatten)]
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub turn_budget: u32,
    pub runs: Vec<SimulationRun>,
    /// Mean turn-axis AUC per (domain, method) over the personas that ran.
    pub method_auc: BTreeMap<String, f64>,
}

/// Runs every domain × method × persona cell. Cells whose persona cannot
/// drive the method, or that need a missing pool, are reported as skipped.
pub fn simulate(matrix: &SimulationMatrix, base: &Path, mock: bool) -> Result<SimulationReport> {
    if matrix.turn_budget == 0 {
        bail!("turn_budget must be at least 1");
    }
    let (elicitor_p, predictor_p, persona_p) = if mock {
        mock_profiles(matrix.seed)
    } else {
        let need = |p: &Option<LmProfile>, role: &str| {
            p.clone()
                .with_context(|| format!("config has no `{role}` profile (use --mock for offline runs)"))
        };
        (
            need(&matrix.elicitor, "elicitor")?,
            need(&matrix.predictor, "predictor")?,
            matrix.persona_lm.clone().unwrap_or(need(&matrix.elicitor, "elicitor")?),
        )
    };
    let pools = config::load_pools(base, &matrix.pools)?;

    let mut runs = Vec::new();
    for sim_domain in &matrix.domains {
        let items = config::load_test_set(&config::resolve(base, &sim_domain.test_set))?;
        let mut registry = DomainRegistry::with_builtins();
        registry.set_test_set(&sim_domain.domain, items)?;
        let domain = registry.get(&sim_domain.domain)?.clone();
        let personas = sim_domain
            .personas
            .iter()
            .map(|p| config::load_persona(&config::resolve(base, p)))
            .collect::<Result<Vec<_>>>()?;
        let pool = match &sim_domain.pool {
            Some(name) => Some(
                pools
                    .get(name)
                    .cloned()
                    .with_context(|| format!("unknown pool `{name}`"))?,
            ),
            None => None,
        };

        for &method in &matrix.methods {
            for (name, persona) in &personas {
                let skip = |reason: String| SimulationRun {
                    domain: sim_domain.domain.clone(),
                    method,
                    persona: name.clone(),
                    outcome: RunOutcome::Skipped { reason },
                };
                if persona.is_rule() && !method.asks_membership() {
                    runs.push(skip(format!(
                        "{:?} persona cannot answer {method:?} queries",
                        persona.kind
                    )));
                    continue;
                }
                let mut policy = PolicySpec::turns(method, matrix.turn_budget);
                if method.uses_pool() {
                    if pool.is_none() {
                        runs.push(skip("method needs a pool and the domain has none".into()));
                        continue;
                    }
                    policy = policy.with_pool(sim_domain.pool.clone().unwrap_or_default());
                }
                // Fresh gateways per cell so scripted backends restart.
                let elicitor = Gateway::from_profile(elicitor_p.clone())?;
                let predictor = Gateway::from_profile(predictor_p.clone())?;
                let persona_gw = Gateway::from_profile(persona_p.clone())?;
                let outcome = persona::run_simulation(SimulationConfig {
                    policy,
                    persona,
                    domain: &domain,
                    elicitor: &elicitor,
                    predictor: &predictor,
                    persona_gateway: &persona_gw,
                    seed: matrix.seed,
                    pool: if method.uses_pool() { pool.clone() } else { None },
                    started_at: DateTime::UNIX_EPOCH,
                })
                .with_context(|| format!("{} / {method:?} / {name}", sim_domain.domain))?;
                let horizon = f64::from(matrix.turn_budget);
                let result = MethodResult::from_curve(&outcome.curve, horizon)?;
                runs.push(SimulationRun {
                    domain: sim_domain.domain.clone(),
                    method,
                    persona: name.clone(),
                    outcome: RunOutcome::Ok {
                        session_id: outcome.session.id().to_string(),
                        turns: outcome.session.answered_turns(),
                        records: outcome.records.len(),
                        curve: outcome.curve,
                        auc: result.auc,
                        final_delta: result.final_delta,
                    },
                });
            }
        }
    }

    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for run in &runs {
        if let RunOutcome::Ok { auc, .. } = run.outcome {
            let e = sums
                .entry(format!("{}/{}", run.domain, run.method.as_str()))
                .or_default();
            e.0 += auc;
            e.1 += 1;
        }
    }
    Ok(SimulationReport {
        seed: matrix.seed,
        turn_budget: matrix.turn_budget,
        runs,
        method_auc: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub domain: DomainId,
    pub method: PolicyKind,
    pub sessions: usize,
    /// Per-session curves averaged pointwise.
    pub mean_curve: DeltaCurve,
    pub mean_auc: f64,
    pub mean_auroc_auc: Option<f64>,
    /// Mean Likert rating per survey question id.
    pub mean_ratings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPoint {
    pub item_id: String,
    pub fraction_yes_a: f64,
    pub fraction_yes_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceShift {
    pub domain: DomainId,
    pub method_a: PolicyKind,
    pub method_b: PolicyKind,
    pub points: Vec<ShiftPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub completed_sessions: usize,
    pub skipped_sessions: Vec<String>,
    pub methods: Vec<MethodSummary>,
    pub preference_shift: Vec<PreferenceShift>,
}

/// Loads completed sessions, computing and storing results for any that
/// lack them, and summarises per (domain, method).
pub fn evaluate(store: &FileStore, registry: &DomainRegistry, predictor: &Gateway) -> Result<EvaluationReport> {
    let ids = store.list(RecordKind::Session)?;
    if ids.is_empty() {
        bail!("no sessions under {}", store.root().display());
    }
    let mut groups: BTreeMap<(DomainId, PolicyKind), Vec<(Session, SessionResults)>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for id in ids {
        let record = store
            .get::<Session>(RecordKind::Session, &id)?
            .with_context(|| format!("session {id} vanished"))?;
        let session = record.payload;
        session
            .check_invariants()
            .with_context(|| format!("stored session {id}"))?;
        if session.state() != SessionState::Complete {
            skipped.push(id);
            continue;
        }
        let results = match store.get::<SessionResults>(RecordKind::Predictions, &id)? {
            Some(r) => r.payload,
            None => {
                let domain = registry.get(session.domain())?;
                let r = compute_results(&session, domain, predictor).with_context(|| format!("session {id}"))?;
                store.put(RecordKind::Predictions, &id, &r)?;
                r
            }
        };
        groups
            .entry((session.domain().clone(), session.policy().kind))
            .or_default()
            .push((session, results));
    }
    if groups.is_empty() {
        bail!("no completed sessions under {}", store.root().display());
    }

    let mut methods = Vec::new();
    for ((domain, method), members) in &groups {
        let curves: Vec<DeltaCurve> = members.iter().map(|(_, r)| r.curve.clone()).collect();
        let n = members.len() as f64;
        let aurocs: Vec<f64> = members.iter().filter_map(|(_, r)| r.auroc_auc).collect();
        let mut ratings: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (session, _) in members {
            for answer in session.survey() {
                if let SurveyValue::Rating(r) = answer.value {
                    let e = ratings.entry(answer.question_id.clone()).or_default();
                    e.0 += f64::from(r);
                    e.1 += 1;
                }
            }
        }
        methods.push(MethodSummary {
            domain: domain.clone(),
            method: *method,
            sessions: members.len(),
            mean_curve: metrics::mean_curve(&curves)?,
            mean_auc: members.iter().map(|(_, r)| r.auc).sum::<f64>() / n,
            mean_auroc_auc: (!aurocs.is_empty()).then(|| aurocs.iter().sum::<f64>() / aurocs.len() as f64),
            mean_ratings: ratings.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        });
    }

    let mut preference_shift = Vec::new();
    let keys: Vec<_> = groups.keys().cloned().collect();
    for (i, a) in keys.iter().enumerate() {
        for b in keys.iter().skip(i + 1).filter(|b| b.0 == a.0) {
            let group_a: Vec<&Session> = groups[a].iter().map(|(s, _)| s).collect();
            let group_b: Vec<&Session> = groups[b].iter().map(|(s, _)| s).collect();
            if let Ok(pairs) = metrics::preference_shift(&group_a, &group_b) {
                preference_shift.push(PreferenceShift {
                    domain: a.0.clone(),
                    method_a: a.1,
                    method_b: b.1,
                    points: pairs
                        .into_iter()
                        .map(|(item_id, fa, fb)| ShiftPoint {
                            item_id,
                            fraction_yes_a: fa,
                            fraction_yes_b: fb,
                        })
                        .collect(),
                });
            }
        }
    }

    Ok(EvaluationReport {
        completed_sessions: groups.values().map(Vec::len).sum(),
        skipped_sessions: skipped,
        methods,
        preference_shift,
    })
}

/// Writes `report.json`, `curves.csv`, `auc.csv` and `preference_shift.csv`
/// into `out_dir`.
pub fn export(report: &EvaluationReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(out_dir.join("report.json"), json)?;

    let mut curves = csv::Writer::from_path(out_dir.join("curves.csv"))?;
    curves.write_record(["domain", "method", "axis", "coordinate", "delta_p_correct"])?;
    for m in &report.methods {
        let axis = serde_json::to_value(m.mean_curve.axis)?;
        for (x, y) in &m.mean_curve.points {
            curves.write_record([
                m.domain.to_string(),
                m.method.as_str().to_string(),
                axis.as_str().unwrap_or_default().to_string(),
                x.to_string(),
                y.to_string(),
            ])?;
        }
    }
    curves.flush()?;

    let mut auc = csv::Writer::from_path(out_dir.join("auc.csv"))?;
    auc.write_record(["domain", "method", "sessions", "mean_auc", "mean_auroc_auc"])?;
    for m in &report.methods {
        auc.write_record([
            m.domain.to_string(),
            m.method.as_str().to_string(),
            m.sessions.to_string(),
            m.mean_auc.to_string(),
            m.mean_auroc_auc.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    auc.flush()?;

    let mut shift = csv::Writer::from_path(out_dir.join("preference_shift.csv"))?;
    shift.write_record([
        "domain",
        "method_a",
        "method_b",
        "item_id",
        "fraction_yes_a",
        "fraction_yes_b",
    ])?;
    for s in &report.preference_shift {
        for p in &s.points {
            shift.write_record([
                s.domain.to_string(),
                s.method_a.as_str().to_string(),
                s.method_b.as_str().to_string(),
                p.item_id.clone(),
                p.fraction_yes_a.to_string(),
                p.fraction_yes_b.to_string(),
            ])?;
        }
    }
    shift.flush()?;
    Ok(())
}
