//! The end-to-end analysis run and the building blocks the subcommands
//! share with it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use ivcf_core::aggregate::{
    compute_dr_scores_itt, compute_dr_scores_late, gates_for, histogram_bins, ite_quantiles, profile_by_effect_sign,
    DoublyRobustScores, Estimand, GateResult,
};
use ivcf_core::dataset::{DropReport, RawTable};
use ivcf_core::forest::variable_importance;
use ivcf_core::inference::classify_significance;
use ivcf_core::linear::{fit_2sls, Controls, TwoSlsFit};
use ivcf_core::policy::{allocate_capacity, learn_policy_tree, profile_allocation, RewardSpec};
use ivcf_core::{fit_iv_forest, IvForestModel, ObservationFrame, Result, Schema, TreeParams};

use crate::config::RunConfig;
use crate::output::{self, slug, Manifest};
use crate::{CliError, CliResult, TrainedOn};

/// Reads a CSV and derives visit-type columns when the schema asks for
/// them.
pub fn load_table(path: &Path, schema: &Schema) -> Result<RawTable> {
    let mut table = RawTable::read_csv(path)?;
    if let Some(spec) = &schema.visit_types {
        table.derive_visit_types(spec)?;
    }
    Ok(table)
}

/// Grows the effect forest for `estimand`: on the frame itself for LATE,
/// on its intent-to-treat version for ITT.
pub fn fit_model(frame: &ObservationFrame, estimand: Estimand, params: &TreeParams, center: bool) -> Result<IvForestModel> {
    match estimand {
        Estimand::Late => fit_iv_forest(frame, params, center),
        Estimand::Itt => fit_iv_forest(&frame.as_intent_to_treat(), params, center),
    }
}

pub fn dr_scores(model: &IvForestModel, frame: &ObservationFrame, trained_on: TrainedOn) -> Result<DoublyRobustScores> {
    match trained_on {
        TrainedOn::Late => compute_dr_scores_late(model, frame),
        TrainedOn::Itt => compute_dr_scores_itt(model, frame),
    }
}

/// One row of the forest results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForestEffectRow {
    pub outcome: String,
    pub estimand: Estimand,
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    /// Share of units with a significantly positive (negative) effect, at
    /// 10% and 5%.
    pub share_pos_sig10: f64,
    pub share_neg_sig10: f64,
    pub share_pos_sig05: f64,
    pub share_neg_sig05: f64,
    pub clipped_propensities: usize,
    /// Units whose debiased variance was floored.
    pub floored_variances: usize,
}

pub fn forest_effect_row(outcome: &str, model: &IvForestModel, scores: &DoublyRobustScores) -> ForestEffectRow {
    let pairs: Vec<(f64, f64)> = model.oob.iter().map(|e| (e.tau_hat, e.se)).collect();
    let sig = classify_significance(&pairs, &[0.10, 0.05]);
    let s = scores.summary();
    ForestEffectRow {
        outcome: outcome.to_owned(),
        estimand: scores.estimand,
        estimate: s.estimate,
        se: s.se,
        p_value: s.p_value,
        ci_low: s.ci_low,
        ci_high: s.ci_high,
        n: scores.scores.len(),
        share_pos_sig10: sig.summaries[0].share_positive_sig,
        share_neg_sig10: sig.summaries[0].share_negative_sig,
        share_pos_sig05: sig.summaries[1].share_positive_sig,
        share_neg_sig05: sig.summaries[1].share_negative_sig,
        clipped_propensities: scores.clipped,
        floored_variances: model.oob.iter().filter(|e| e.variance_floored).count(),
    }
}

/// One row of the linear results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearEffectRow {
    pub outcome: String,
    pub estimand: Estimand,
    pub coefficient: f64,
    pub se: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub first_stage_f: f64,
    pub n: usize,
    pub n_clusters: usize,
}

pub fn linear_effect_row(outcome: &str, estimand: Estimand, fit: &TwoSlsFit) -> LinearEffectRow {
    LinearEffectRow {
        outcome: outcome.to_owned(),
        estimand,
        coefficient: fit.coefficient,
        se: fit.se,
        p_value: fit.p_value,
        ci_low: fit.ci_low,
        ci_high: fit.ci_high,
        first_stage_f: fit.first_stage_f,
        n: fit.n,
        n_clusters: fit.n_clusters,
    }
}

#[derive(Debug, Serialize)]
struct IngestEntry<'a> {
    outcome: &'a str,
    #[serde(flatten)]
    drops: &'a DropReport,
    n_clusters: usize,
    fingerprint: String,
}

#[derive(Debug, Serialize)]
struct GateRow<'a> {
    outcome: &'a str,
    subgroup: &'a str,
    gate: f64,
    se: f64,
    p_value: f64,
    n: usize,
    share: f64,
}

impl<'a> GateRow<'a> {
    fn new(outcome: &'a str, g: &'a GateResult) -> Self {
        Self {
            outcome,
            subgroup: &g.subgroup,
            gate: g.gate,
            se: g.se,
            p_value: g.p_value,
            n: g.n,
            share: g.share,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct QuantileRow<'a> {
    pub outcome: &'a str,
    pub prob: f64,
    pub value: f64,
}

#[derive(Debug, Serialize)]
pub struct ImportanceRow<'a> {
    #[serde(skip_serializing_if = "str::is_empty")]
    pub outcome: &'a str,
    pub rank: usize,
    pub variable: &'a str,
    pub importance: f64,
}

/// Variable importance rows, most important first; ties keep column
/// order.
pub fn importance_rows<'a>(outcome: &'a str, model: &'a IvForestModel, depth: usize) -> Vec<ImportanceRow<'a>> {
    let scores = variable_importance(&model.forest, depth);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .enumerate()
        .map(|(r, j)| ImportanceRow {
            outcome,
            rank: r + 1,
            variable: &model.forest.covariate_names[j],
            importance: scores[j],
        })
        .collect()
}

#[derive(Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub effects: Vec<ForestEffectRow>,
}

/// Runs every stage and writes the artifacts and a manifest into the
/// configured output directory. A failing stage leaves what was written
/// so far plus a `FAILED` marker naming the stage.
pub fn run_pipeline(config: &RunConfig) -> CliResult<RunReport> {
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| {
        CliError::stage("setup")(ivcf_core::Error::InvalidData(format!("cannot create {}: {e}", dir.display())))
    })?;
    let marker = dir.join(output::FAILED);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| {
            CliError::stage("setup")(ivcf_core::Error::InvalidData(format!("cannot remove stale marker: {e}")))
        })?;
    }
    let mut run = Run {
        config,
        dir: &dir,
        files: Vec::new(),
    };
    match run.stages() {
        Ok(effects) => {
            let manifest = output::write_manifest(&dir, &run.files).map_err(CliError::stage("manifest"))?;
            Ok(RunReport {
                output_dir: dir,
                manifest,
                effects,
            })
        }
        Err(e) => {
            // best effort: the original error matters more than the marker
            let _ = output::write_bytes(&marker, format!("{e}\n").as_bytes());
            Err(e)
        }
    }
}

struct Run<'a> {
    config: &'a RunConfig,
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Run<'_> {
    fn path(&mut self, name: String) -> PathBuf {
        let p = self.dir.join(&name);
        self.files.push(PathBuf::from(name));
        p
    }

    fn stages(&mut self) -> CliResult<Vec<ForestEffectRow>> {
        let cfg = self.config;
        let schema = cfg.schema().map_err(CliError::stage("config"))?;
        let table = load_table(&cfg.input, &schema).map_err(CliError::stage("ingest"))?;
        cfg.validate(&schema, table.headers()).map_err(CliError::stage("config"))?;
        let subgroups = cfg.subgroup_specs().map_err(CliError::stage("config"))?;
        let params = cfg.tree_params();

        // written with a relocatable output_dir so reruns elsewhere hash equal
        let mut resolved = cfg.clone();
        resolved.output_dir = PathBuf::from(".");
        let p = self.path("config.json".into());
        output::write_json(&p, &resolved).map_err(CliError::stage("config"))?;

        let outcomes = cfg.outcomes(&schema);
        let mut frames = Vec::new();
        let mut ingest = Vec::new();
        for o in &outcomes {
            let (frame, drops) =
                ObservationFrame::from_table(&table, &schema.with_outcome(o)).map_err(CliError::stage(format!("ingest:{o}")))?;
            ingest.push((drops, frame.n_clusters(), frame.fingerprint()));
            frames.push(frame);
        }
        let entries: Vec<IngestEntry> = outcomes
            .iter()
            .zip(&ingest)
            .map(|(o, (drops, n_clusters, fp))| IngestEntry {
                outcome: o,
                drops,
                n_clusters: *n_clusters,
                fingerprint: fp.clone(),
            })
            .collect();
        let p = self.path("ingest.json".into());
        output::write_json(&p, &entries).map_err(CliError::stage("ingest"))?;

        let trained_on = match cfg.estimand {
            Estimand::Late => TrainedOn::Late,
            Estimand::Itt => TrainedOn::Itt,
        };
        let mut forest_rows = Vec::new();
        let mut linear_rows = Vec::new();
        let mut quantiles = Vec::new();
        let mut importance = Vec::new();
        let mut gate_rows = Vec::new();
        let mut policy_input = None;

        for (o, frame) in outcomes.iter().zip(&frames) {
            let s = slug(o);
            let stage = |name: &str| CliError::stage(format!("{name}:{o}"));
            eprintln!("ivcf: fitting `{o}` ({} trees, n = {})", params.n_trees, frame.n_rows());
            let model = fit_model(frame, cfg.estimand, &params, cfg.center).map_err(stage("fit"))?;
            let p = self.path(format!("model_{s}.bin"));
            model.save(&p).map_err(stage("fit"))?;

            let p = self.path(format!("ite_{s}.csv"));
            output::write_csv(&p, &output::ite_rows(frame.unit_ids(), &model.oob)).map_err(stage("ite"))?;

            let tau: Vec<f64> = model.oob.iter().map(|e| e.tau_hat).collect();
            for (prob, value) in ite_quantiles(&tau, &cfg.inference.quantiles).map_err(stage("quantiles"))? {
                quantiles.push((o.clone(), prob, value));
            }

            let scores = dr_scores(&model, frame, trained_on).map_err(stage("effects"))?;
            forest_rows.push(forest_effect_row(o, &model, &scores));
            let linear_frame = match trained_on {
                TrainedOn::Late => frame.clone(),
                TrainedOn::Itt => frame.as_intent_to_treat(),
            };
            let fit = fit_2sls(&linear_frame, Controls::Strata).map_err(stage("linear"))?;
            linear_rows.push(linear_effect_row(o, cfg.estimand, &fit));

            if !subgroups.is_empty() {
                let gates = gates_for(&scores, frame, &subgroups, cfg.complements).map_err(stage("gates"))?;
                gate_rows.extend(gates.into_iter().map(|g| (o.clone(), g)));
            }

            for r in importance_rows(o, &model, cfg.inference.importance_depth) {
                importance.push((o.clone(), r.rank, r.variable.to_owned(), r.importance));
            }

            let profile = profile_by_effect_sign(frame, &model.oob, cfg.inference.sign_rule).map_err(stage("profile"))?;
            let p = self.path(format!("profile_{s}.csv"));
            output::write_csv(&p, &profile.rows).map_err(stage("profile"))?;
            let p = self.path(format!("profile_{s}.json"));
            output::write_json(&p, &profile).map_err(stage("profile"))?;

            let pairs: Vec<(f64, f64)> = model.oob.iter().map(|e| (e.tau_hat, e.se)).collect();
            let sig = classify_significance(&pairs, &cfg.inference.levels[..1]);
            let hist = histogram_bins(&tau, Some(&sig.flags[0]), cfg.inference.trim).map_err(stage("hist"))?;
            let p = self.path(format!("hist_{s}.json"));
            output::write_json(&p, &hist).map_err(stage("hist"))?;

            if cfg.policy.as_ref().is_some_and(|pc| &pc.outcome == o) {
                policy_input = Some((frame, scores));
            }
        }

        let p = self.path("table_forest.csv".into());
        output::write_csv(&p, &forest_rows).map_err(CliError::stage("effects"))?;
        let p = self.path("table_2sls.csv".into());
        output::write_csv(&p, &linear_rows).map_err(CliError::stage("linear"))?;
        let rows: Vec<QuantileRow> = quantiles
            .iter()
            .map(|(o, prob, value)| QuantileRow {
                outcome: o,
                prob: *prob,
                value: *value,
            })
            .collect();
        let p = self.path("quantiles.csv".into());
        output::write_csv(&p, &rows).map_err(CliError::stage("quantiles"))?;
        let rows: Vec<ImportanceRow> = importance
            .iter()
            .map(|(o, rank, v, imp)| ImportanceRow {
                outcome: o,
                rank: *rank,
                variable: v,
                importance: *imp,
            })
            .collect();
        let p = self.path("varimp.csv".into());
        output::write_csv(&p, &rows).map_err(CliError::stage("varimp"))?;
        if !gate_rows.is_empty() {
            let rows: Vec<GateRow> = gate_rows.iter().map(|(o, g)| GateRow::new(o, g)).collect();
            let p = self.path("table_gates.csv".into());
            output::write_csv(&p, &rows).map_err(CliError::stage("gates"))?;
        }

        if let (Some(pc), Some((frame, scores))) = (&cfg.policy, policy_input) {
            let spec = RewardSpec {
                outcome: pc.outcome.clone(),
                direction: pc.direction,
            };
            let rewards = spec.rewards(&scores.scores).map_err(CliError::stage("policy"))?;
            let tree = learn_policy_tree(frame, &rewards, &pc.features, pc.depth).map_err(CliError::stage("policy"))?;
            let p = self.path("policy_tree.json".into());
            output::write_json(&p, &tree).map_err(CliError::stage("policy"))?;
            let p = self.path("policy_tree.txt".into());
            output::write_bytes(&p, tree.render().as_bytes()).map_err(CliError::stage("policy"))?;
            if let Some(k) = pc.capacity {
                let alloc = allocate_capacity(&rewards, k).map_err(CliError::stage("allocate"))?;
                let all: Vec<usize> = (0..frame.n_rows()).collect();
                let profile = profile_allocation(frame, &alloc.treated, &all).map_err(CliError::stage("allocate"))?;
                let p = self.path("allocation.json".into());
                output::write_json(&p, &alloc).map_err(CliError::stage("allocate"))?;
                let p = self.path("allocation_profile.csv".into());
                output::write_csv(&p, &profile.rows).map_err(CliError::stage("allocate"))?;
            }
        }
        Ok(forest_rows)
    }
}
